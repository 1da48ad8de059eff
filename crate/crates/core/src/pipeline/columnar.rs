//! Binary column files used by the store.
//!
//! Layout: magic `SNTB`, format version byte, table name (u16 length +
//! UTF-8), row count (u64), then one block per column. Each block starts
//! with a type tag; strings are dictionary-encoded. All integers are
//! little-endian.

use byteorder::{ByteOrder, LittleEndian};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SNTB";
pub const FORMAT_VERSION: u8 = 1;

const TAG_U64: u8 = 1;
const TAG_I64: u8 = 2;
const TAG_U32: u8 = 3;
const TAG_U16: u8 = 4;
const TAG_F64: u8 = 5;
const TAG_BOOL: u8 = 6;
const TAG_STR: u8 = 7;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ColumnError {
    #[error("not a table file (bad magic)")]
    Magic,
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("expected table {expected}, found {found}")]
    Name { expected: String, found: String },
    #[error("column {index}: expected type tag {expected}, found {found}")]
    Tag { index: usize, expected: u8, found: u8 },
    #[error("file truncated")]
    Truncated,
    #[error("invalid UTF-8 in string column")]
    Utf8,
    #[error("string index out of range")]
    Dictionary,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub struct TableWriter {
    buf: Vec<u8>,
    rows: usize,
}

impl TableWriter {
    pub fn new(name: &str, rows: usize) -> Self {
        let mut buf = Vec::with_capacity(64 + rows * 16);
        buf.extend_from_slice(MAGIC);
        buf.push(FORMAT_VERSION);
        put_str(&mut buf, name);
        put_u64(&mut buf, rows as u64);
        Self { buf, rows }
    }

    fn block(&mut self, tag: u8, n: usize) {
        assert_eq!(n, self.rows, "column length differs from row count");
        self.buf.push(tag);
    }

    pub fn u64s(&mut self, values: impl ExactSizeIterator<Item = u64>) -> &mut Self {
        self.block(TAG_U64, values.len());
        for v in values {
            put_u64(&mut self.buf, v);
        }
        self
    }

    pub fn i64s(&mut self, values: impl ExactSizeIterator<Item = i64>) -> &mut Self {
        self.block(TAG_I64, values.len());
        for v in values {
            let mut b = [0u8; 8];
            LittleEndian::write_i64(&mut b, v);
            self.buf.extend_from_slice(&b);
        }
        self
    }

    pub fn u32s(&mut self, values: impl ExactSizeIterator<Item = u32>) -> &mut Self {
        self.block(TAG_U32, values.len());
        for v in values {
            let mut b = [0u8; 4];
            LittleEndian::write_u32(&mut b, v);
            self.buf.extend_from_slice(&b);
        }
        self
    }

    pub fn u16s(&mut self, values: impl ExactSizeIterator<Item = u16>) -> &mut Self {
        self.block(TAG_U16, values.len());
        for v in values {
            let mut b = [0u8; 2];
            LittleEndian::write_u16(&mut b, v);
            self.buf.extend_from_slice(&b);
        }
        self
    }

    pub fn f64s(&mut self, values: impl ExactSizeIterator<Item = f64>) -> &mut Self {
        self.block(TAG_F64, values.len());
        for v in values {
            let mut b = [0u8; 8];
            LittleEndian::write_f64(&mut b, v);
            self.buf.extend_from_slice(&b);
        }
        self
    }

    pub fn bools(&mut self, values: impl ExactSizeIterator<Item = bool>) -> &mut Self {
        self.block(TAG_BOOL, values.len());
        self.buf.extend(values.map(u8::from));
        self
    }

    pub fn strs<'a>(&mut self, values: impl ExactSizeIterator<Item = &'a str>) -> &mut Self {
        self.block(TAG_STR, values.len());
        let mut dict: Vec<&str> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut ids = Vec::with_capacity(values.len());
        for v in values {
            let id = *index.entry(v).or_insert_with(|| {
                dict.push(v);
                dict.len() - 1
            });
            ids.push(id as u32);
        }
        put_u64(&mut self.buf, dict.len() as u64);
        for s in dict {
            put_str(&mut self.buf, s);
        }
        for id in ids {
            let mut b = [0u8; 4];
            LittleEndian::write_u32(&mut b, id);
            self.buf.extend_from_slice(&b);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    let mut b = [0u8; 8];
    LittleEndian::write_u64(&mut b, v);
    buf.extend_from_slice(&b);
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    let len = u32::try_from(s.len()).expect("string longer than 4 GiB");
    let mut b = [0u8; 4];
    LittleEndian::write_u32(&mut b, len);
    buf.extend_from_slice(&b);
    buf.extend_from_slice(s.as_bytes());
}

pub struct TableReader<'a> {
    data: &'a [u8],
    pos: usize,
    rows: usize,
    column: usize,
}

impl<'a> TableReader<'a> {
    pub fn open(data: &'a [u8], expected_name: &str) -> Result<Self, ColumnError> {
        let mut r = Self {
            data,
            pos: 0,
            rows: 0,
            column: 0,
        };
        if r.take(4)? != MAGIC {
            return Err(ColumnError::Magic);
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(ColumnError::Version(version));
        }
        let name = r.string()?;
        if name != expected_name {
            return Err(ColumnError::Name {
                expected: expected_name.to_string(),
                found: name,
            });
        }
        r.rows = r.u64()? as usize;
        Ok(r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ColumnError> {
        let end = self.pos.checked_add(n).ok_or(ColumnError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(ColumnError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ColumnError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn string(&mut self) -> Result<String, ColumnError> {
        let len = LittleEndian::read_u32(self.take(4)?) as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ColumnError::Utf8)
    }

    fn expect_tag(&mut self, expected: u8) -> Result<(), ColumnError> {
        let found = self.take(1)?[0];
        let index = self.column;
        self.column += 1;
        if found != expected {
            return Err(ColumnError::Tag { index, expected, found });
        }
        Ok(())
    }

    fn fixed<T>(&mut self, tag: u8, width: usize, f: impl Fn(&[u8]) -> T) -> Result<Vec<T>, ColumnError> {
        self.expect_tag(tag)?;
        let bytes = self.take(width.checked_mul(self.rows).ok_or(ColumnError::Truncated)?)?;
        Ok(bytes.chunks_exact(width).map(f).collect())
    }

    pub fn u64s(&mut self) -> Result<Vec<u64>, ColumnError> {
        self.fixed(TAG_U64, 8, LittleEndian::read_u64)
    }

    pub fn i64s(&mut self) -> Result<Vec<i64>, ColumnError> {
        self.fixed(TAG_I64, 8, LittleEndian::read_i64)
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>, ColumnError> {
        self.fixed(TAG_U32, 4, LittleEndian::read_u32)
    }

    pub fn u16s(&mut self) -> Result<Vec<u16>, ColumnError> {
        self.fixed(TAG_U16, 2, LittleEndian::read_u16)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, ColumnError> {
        self.fixed(TAG_F64, 8, LittleEndian::read_f64)
    }

    pub fn bools(&mut self) -> Result<Vec<bool>, ColumnError> {
        self.fixed(TAG_BOOL, 1, |b| b[0] != 0)
    }

    pub fn strs(&mut self) -> Result<Vec<String>, ColumnError> {
        self.expect_tag(TAG_STR)?;
        let n = self.u64()? as usize;
        let mut dict = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            dict.push(self.string()?);
        }
        let ids = self.take(4usize.checked_mul(self.rows).ok_or(ColumnError::Truncated)?)?;
        ids.chunks_exact(4)
            .map(|b| {
                dict.get(LittleEndian::read_u32(b) as usize)
                    .cloned()
                    .ok_or(ColumnError::Dictionary)
            })
            .collect()
    }

    pub fn finish(self) -> Result<(), ColumnError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(ColumnError::Trailing(n)),
        }
    }
}
