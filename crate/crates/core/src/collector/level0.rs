//! Level-0 CSV: one row per downloaded record, written by the gateway.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::mote::SampleRecord;
use crate::registry::MoteId;

pub const LEVEL0_HEADER: [&str; 12] = [
    "download_id",
    "mote_id",
    "epoch",
    "seq",
    "mote_time_s",
    "soil_temp_adc",
    "soil_moist_adc",
    "box_temp_adc",
    "photo_adc",
    "battery_adc",
    "anchor_mote_time_s",
    "anchor_utc_iso8601",
];

/// A simultaneous reading of the mote clock and gateway UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeAnchor {
    pub mote_time_s: u32,
    pub utc: DateTime<Utc>,
}

impl TimeAnchor {
    /// UTC of a record stamped `mote_time_s` in the anchor's epoch.
    pub fn utc_of(&self, mote_time_s: u32) -> DateTime<Utc> {
        self.utc + chrono::Duration::seconds(i64::from(mote_time_s) - i64::from(self.mote_time_s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Level0Row {
    pub download_id: u64,
    pub mote_id: MoteId,
    pub epoch: u32,
    pub seq: u64,
    pub mote_time_s: u32,
    pub readings: [u16; 5],
    pub anchor: TimeAnchor,
}

#[derive(Debug, Error)]
pub enum Level0Error {
    #[error("no records to export")]
    Empty,
    #[error("records out of sequence order at seq {0}")]
    Unordered(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn format_utc(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Renders the CSV text. Output depends only on the inputs.
pub fn level0_csv(
    records: &[SampleRecord],
    mote_id: MoteId,
    epoch: u32,
    download_id: u64,
    anchor: TimeAnchor,
) -> Result<String, Level0Error> {
    if records.is_empty() {
        return Err(Level0Error::Empty);
    }
    if let Some(w) = records.windows(2).find(|w| w[1].seq <= w[0].seq) {
        return Err(Level0Error::Unordered(w[1].seq));
    }
    let anchor_utc = format_utc(anchor.utc);
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(&LEVEL0_HEADER.join(","));
    out.push('\n');
    for r in records {
        let [a, b, c, d, e] = r.readings;
        out.push_str(&format!(
            "{download_id},{mote_id},{epoch},{},{},{a},{b},{c},{d},{e},{},{anchor_utc}\n",
            r.seq, r.mote_time_s, anchor.mote_time_s
        ));
    }
    Ok(out)
}

pub fn export_level0(
    records: &[SampleRecord],
    mote_id: MoteId,
    epoch: u32,
    download_id: u64,
    anchor: TimeAnchor,
    path: impl AsRef<Path>,
) -> Result<(), Level0Error> {
    let text = level0_csv(records, mote_id, epoch, download_id, anchor)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
