//! The 16-byte sample record: the unit of flash storage and of radio
//! transfer.
//!
//! Wire layout, big-endian:
//!
//! | bytes  | field                              |
//! |--------|------------------------------------|
//! | 0..4   | `mote_time_s` (u32, boot-relative) |
//! | 4..6   | low 16 bits of `seq`               |
//! | 6..16  | five 10-bit readings, one u16 each |
//!
//! Readings are in channel order: soil temperature, soil moisture, box
//! temperature, photo, battery.

use byteorder::{BigEndian, ByteOrder};
use thiserror::Error;

use crate::pipeline::convert::ADC_MAX;

pub const RECORD_SIZE: usize = 16;
pub const READINGS_PER_RECORD: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("reading {value} on channel {channel} exceeds the 10-bit range")]
    ReadingOutOfRange { channel: usize, value: u16 },
    #[error("expected {RECORD_SIZE} bytes, got {0}")]
    Length(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRecord {
    pub seq: u64,
    pub mote_time_s: u32,
    pub readings: [u16; READINGS_PER_RECORD],
}

impl SampleRecord {
    pub fn new(seq: u64, mote_time_s: u32, readings: [u16; READINGS_PER_RECORD]) -> Result<Self, RecordError> {
        check_readings(&readings)?;
        Ok(Self {
            seq,
            mote_time_s,
            readings,
        })
    }

    pub fn encode(&self) -> [u8; RECORD_SIZE] {
        let mut buf = [0u8; RECORD_SIZE];
        BigEndian::write_u32(&mut buf[0..4], self.mote_time_s);
        BigEndian::write_u16(&mut buf[4..6], (self.seq & 0xFFFF) as u16);
        for (i, r) in self.readings.iter().enumerate() {
            BigEndian::write_u16(&mut buf[6 + 2 * i..8 + 2 * i], *r);
        }
        buf
    }

    /// Decodes a frame, widening the truncated sequence number to the
    /// smallest value `>= seq_floor` with matching low bits. Unambiguous as
    /// long as the requested range spans fewer than 65536 records, which the
    /// 32768-record flash guarantees.
    pub fn decode(bytes: &[u8], seq_floor: u64) -> Result<Self, RecordError> {
        if bytes.len() != RECORD_SIZE {
            return Err(RecordError::Length(bytes.len()));
        }
        let mote_time_s = BigEndian::read_u32(&bytes[0..4]);
        let low = u64::from(BigEndian::read_u16(&bytes[4..6]));
        let mut readings = [0u16; READINGS_PER_RECORD];
        for (i, r) in readings.iter_mut().enumerate() {
            *r = BigEndian::read_u16(&bytes[6 + 2 * i..8 + 2 * i]);
        }
        check_readings(&readings)?;
        let base = seq_floor & !0xFFFF;
        let mut seq = base | low;
        if seq < seq_floor {
            seq += 0x1_0000;
        }
        Ok(Self {
            seq,
            mote_time_s,
            readings,
        })
    }
}

fn check_readings(readings: &[u16; READINGS_PER_RECORD]) -> Result<(), RecordError> {
    for (channel, &value) in readings.iter().enumerate() {
        if value > ADC_MAX {
            return Err(RecordError::ReadingOutOfRange { channel, value });
        }
    }
    Ok(())
}
