//! Circular record buffer in the mote's external flash.

use std::collections::VecDeque;

use thiserror::Error;

use super::record::{SampleRecord, RECORD_SIZE};

pub const FLASH_CAPACITY_BYTES: usize = 524_288;
pub const FLASH_CAPACITY_RECORDS: u64 = (FLASH_CAPACITY_BYTES / RECORD_SIZE) as u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlashError {
    #[error("records from {from_seq} were overwritten; oldest retained is {tail_seq}")]
    Evicted { from_seq: u64, tail_seq: u64 },
    #[error("range {from_seq}..{to_seq} extends past the newest record {head_seq}")]
    BeyondHead { from_seq: u64, to_seq: u64, head_seq: u64 },
    #[error("empty or reversed range {from_seq}..{to_seq}")]
    Reversed { from_seq: u64, to_seq: u64 },
}

/// Records `[tail_seq, head_seq)` are retained; appending to a full ring
/// drops the oldest record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlashRing {
    capacity_records: u64,
    records: VecDeque<SampleRecord>,
    head_seq: u64,
    tail_seq: u64,
    overwritten_count: u64,
}

impl Default for FlashRing {
    fn default() -> Self {
        Self::with_capacity(FLASH_CAPACITY_RECORDS)
    }
}

impl FlashRing {
    pub fn with_capacity(capacity_records: u64) -> Self {
        assert!(capacity_records > 0, "flash capacity must be positive");
        Self {
            capacity_records,
            records: VecDeque::new(),
            head_seq: 0,
            tail_seq: 0,
            overwritten_count: 0,
        }
    }

    pub fn capacity_records(&self) -> u64 {
        self.capacity_records
    }

    /// Sequence number the next record will get.
    pub fn head_seq(&self) -> u64 {
        self.head_seq
    }

    /// Oldest retained sequence number.
    pub fn tail_seq(&self) -> u64 {
        self.tail_seq
    }

    pub fn overwritten_count(&self) -> u64 {
        self.overwritten_count
    }

    pub fn len(&self) -> u64 {
        self.head_seq - self.tail_seq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes_used(&self) -> u64 {
        self.len() * RECORD_SIZE as u64
    }

    /// Stores a record stamped with the next sequence number.
    pub fn append(&mut self, mote_time_s: u32, readings: [u16; 5]) -> SampleRecord {
        if self.len() == self.capacity_records {
            self.records.pop_front();
            self.tail_seq += 1;
            self.overwritten_count += 1;
        }
        let record = SampleRecord {
            seq: self.head_seq,
            mote_time_s,
            readings,
        };
        self.records.push_back(record);
        self.head_seq += 1;
        record
    }

    pub fn get(&self, seq: u64) -> Option<&SampleRecord> {
        if seq < self.tail_seq || seq >= self.head_seq {
            return None;
        }
        self.records.get((seq - self.tail_seq) as usize)
    }

    /// Records with `from_seq <= seq < to_seq`, in order.
    pub fn read_range(&self, from_seq: u64, to_seq: u64) -> Result<Vec<SampleRecord>, FlashError> {
        if to_seq < from_seq {
            return Err(FlashError::Reversed { from_seq, to_seq });
        }
        if from_seq == to_seq {
            return Ok(Vec::new());
        }
        if from_seq < self.tail_seq {
            return Err(FlashError::Evicted {
                from_seq,
                tail_seq: self.tail_seq,
            });
        }
        if to_seq > self.head_seq {
            return Err(FlashError::BeyondHead {
                from_seq,
                to_seq,
                head_seq: self.head_seq,
            });
        }
        let start = (from_seq - self.tail_seq) as usize;
        let end = (to_seq - self.tail_seq) as usize;
        Ok(self.records.range(start..end).copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn capacity_matches_flash_size() {
        assert_eq!(FLASH_CAPACITY_RECORDS, 32_768);
    }

    #[test]
    fn overwrite_advances_tail() {
        let mut ring = FlashRing::with_capacity(4);
        for t in 0..6 {
            ring.append(t, [0; 5]);
        }
        assert_eq!(ring.tail_seq(), 2);
        assert_eq!(ring.head_seq(), 6);
        assert_eq!(ring.overwritten_count(), 2);
        assert_eq!(
            ring.read_range(1, 3),
            Err(FlashError::Evicted {
                from_seq: 1,
                tail_seq: 2
            })
        );
        let got = ring.read_range(2, 6).unwrap();
        assert_eq!(got.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert_eq!(got[0].mote_time_s, 2);
    }

    #[test]
    fn empty_range_is_empty() {
        let ring = FlashRing::default();
        assert_eq!(ring.read_range(0, 0).unwrap(), vec![]);
        assert!(ring.read_range(0, 1).is_err());
    }

    proptest! {
        #[test]
        fn never_exceeds_capacity(cap in 1u64..64, n in 0u32..300) {
            let mut ring = FlashRing::with_capacity(cap);
            for t in 0..n {
                ring.append(t, [0; 5]);
                prop_assert!(ring.len() <= cap);
                prop_assert_eq!(ring.bytes_used(), ring.len() * 16);
            }
            prop_assert_eq!(ring.head_seq(), u64::from(n));
            prop_assert_eq!(ring.tail_seq() + ring.len(), ring.head_seq());
            prop_assert_eq!(ring.overwritten_count(), ring.tail_seq());
        }
    }
}
