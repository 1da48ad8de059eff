//! Level-0 staging and promotion to time-stamped, geolocated Level 1.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};

use super::store::{
    AnchorRow, Frame, LoadRecord, LoadVersion, Measurement, Quarantined, StagedRow, Store, StrayReading,
};
use super::PipelineError;
use crate::collector::{Level0Row, TimeAnchor, LEVEL0_HEADER};
use crate::mote::env::parse_utc;
use crate::pipeline::convert::ADC_MAX;
use crate::registry::{MoteId, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageReport {
    pub staged: usize,
    pub duplicates_dropped: usize,
    pub malformed_dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PromoteReport {
    pub promoted: usize,
    pub quarantined: usize,
}

/// Reads a Level-0 CSV into staging, dropping rows already seen (staged,
/// promoted or quarantined) under the same (mote, epoch, seq) key and rows
/// that fail to parse or carry out-of-range counts.
pub fn stage_and_dedup(path: impl AsRef<Path>, store: &mut Store) -> Result<StageReport, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let source = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    stage_text(&text, &source, store)
}

pub fn stage_text(text: &str, source: &str, store: &mut Store) -> Result<StageReport, PipelineError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| PipelineError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != LEVEL0_HEADER {
        return Err(PipelineError::SchemaMismatch {
            expected: LEVEL0_HEADER.join(","),
            found: header.join(","),
        });
    }
    let mut seen: HashSet<(MoteId, u32, u64)> = store
        .staging
        .iter()
        .map(|s| (s.row.mote_id, s.row.epoch, s.row.seq))
        .collect();
    let mut report = StageReport::default();
    for rec in reader.records() {
        let row = match rec.ok().and_then(|r| parse_row(&r)) {
            Some(row) => row,
            None => {
                report.malformed_dropped += 1;
                continue;
            }
        };
        let key = (row.mote_id, row.epoch, row.seq);
        if store.settled_keys.contains(&key) || !seen.insert(key) {
            report.duplicates_dropped += 1;
            continue;
        }
        store.staging.push(StagedRow {
            row,
            source: source.to_string(),
        });
        report.staged += 1;
    }
    Ok(report)
}

fn parse_row(r: &csv::StringRecord) -> Option<Level0Row> {
    if r.len() != LEVEL0_HEADER.len() {
        return None;
    }
    let f = |i: usize| r.get(i).map(str::trim);
    let mut readings = [0u16; 5];
    for (k, v) in readings.iter_mut().enumerate() {
        *v = f(5 + k)?.parse().ok()?;
        if *v > ADC_MAX {
            return None;
        }
    }
    Some(Level0Row {
        download_id: f(0)?.parse().ok()?,
        mote_id: f(1)?.parse().ok()?,
        epoch: f(2)?.parse().ok()?,
        seq: f(3)?.parse().ok()?,
        mote_time_s: f(4)?.parse().ok()?,
        readings,
        anchor: TimeAnchor {
            mote_time_s: f(10)?.parse().ok()?,
            utc: parse_utc(f(11)?).ok()?,
        },
    })
}

/// Moves every staged row into Level 1. UTC comes from the row's anchor;
/// positions come from the registry. Within one download of one boot, rows
/// sequenced before a backwards step of the mote clock cannot be timed by
/// the anchor and are quarantined instead. Fails without changing the store
/// if any row names a mote the registry does not know.
pub fn promote_level1(
    store: &mut Store,
    registry: &Registry,
    load_version: LoadVersion,
    load_time: DateTime<Utc>,
) -> Result<PromoteReport, PipelineError> {
    store.check_version(load_version)?;
    if store.staging.is_empty() {
        return Err(PipelineError::NothingStaged);
    }
    if let Some(s) = store.staging.iter().find(|s| registry.mote(s.row.mote_id).is_none()) {
        return Err(PipelineError::UnknownMote(s.row.mote_id));
    }

    let mut positions = Vec::new();
    let motes: BTreeSet<MoteId> = store.staging.iter().map(|s| s.row.mote_id).collect();
    for sensor in motes.iter().flat_map(|&m| registry.sensors_on(m)) {
        if !store.positions.contains_key(&sensor.sensor_id) {
            positions.push((sensor.sensor_id.clone(), registry.locate_sensor(&sensor.sensor_id)?));
        }
    }
    store.positions.extend(positions);

    let staged = std::mem::take(&mut store.staging);
    let mut groups: BTreeMap<(u64, MoteId, u32), Vec<StagedRow>> = BTreeMap::new();
    for s in staged {
        groups
            .entry((s.row.download_id, s.row.mote_id, s.row.epoch))
            .or_default()
            .push(s);
    }

    let mut anchors: HashMap<(MoteId, u64), TimeAnchor> = store
        .anchors
        .iter()
        .map(|a| ((a.mote_id, a.download_id), a.anchor))
        .collect();
    let mut taken_times: HashSet<(MoteId, i64)> = store
        .frames
        .iter()
        .map(|f| (f.mote_id, f.utc.timestamp_millis()))
        .collect();
    let mut report = PromoteReport::default();
    let mut sources = BTreeSet::new();
    let mut notes: BTreeMap<&'static str, usize> = BTreeMap::new();

    for ((download_id, mote_id, epoch), mut rows) in groups {
        rows.sort_by_key(|s| s.row.seq);
        let cut = rows
            .windows(2)
            .rposition(|w| w[1].row.mote_time_s < w[0].row.mote_time_s)
            .map_or(0, |i| i + 1);
        let sensors: Vec<_> = registry.sensors_on(mote_id).collect();
        for (i, s) in rows.into_iter().enumerate() {
            sources.insert(s.source.clone());
            let reason = if i < cut {
                Some("clock regression without epoch change")
            } else {
                match anchors.get(&(mote_id, download_id)) {
                    Some(a) if *a != s.row.anchor => Some("conflicting anchor for download"),
                    _ => None,
                }
            };
            let utc = s.row.anchor.utc_of(s.row.mote_time_s);
            let reason = reason.or_else(|| {
                (!taken_times.insert((mote_id, utc.timestamp_millis()))).then_some("duplicate timestamp for mote")
            });
            let key = (mote_id, epoch, s.row.seq);
            store.settled_keys.insert(key);
            if let Some(reason) = reason {
                *notes.entry(reason).or_default() += 1;
                store.quarantine.push(Quarantined {
                    staged: s,
                    reason: reason.to_string(),
                    load_version,
                });
                report.quarantined += 1;
                continue;
            }
            if let std::collections::hash_map::Entry::Vacant(e) = anchors.entry((mote_id, download_id)) {
                e.insert(s.row.anchor);
                store.anchors.push(AnchorRow {
                    mote_id,
                    download_id,
                    epoch,
                    anchor: s.row.anchor,
                });
            }
            store.frames.push(Frame {
                mote_id,
                epoch,
                seq: s.row.seq,
                download_id,
                mote_time_s: s.row.mote_time_s,
                utc,
                load_version,
            });
            let mut bound = [false; 5];
            for sensor in &sensors {
                let slot = sensor.sensor_type.reading_slot();
                bound[slot] = true;
                let is_bad = store.bad_data.iter().any(|b| b.contains(&sensor.sensor_id, utc));
                store.measurements.push(Measurement {
                    sensor_id: sensor.sensor_id.clone(),
                    mote_id,
                    epoch,
                    seq: s.row.seq,
                    slot: slot as u8,
                    utc,
                    raw_value: s.row.readings[slot],
                    mote_time_s: s.row.mote_time_s,
                    load_version,
                    processed: false,
                    is_bad,
                });
            }
            for (slot, _) in bound.iter().enumerate().filter(|(_, b)| !**b) {
                store.strays.push(StrayReading {
                    mote_id,
                    epoch,
                    seq: s.row.seq,
                    slot: slot as u8,
                    raw_value: s.row.readings[slot],
                });
            }
            report.promoted += 1;
        }
    }

    let error_notes = notes
        .iter()
        .map(|(reason, n)| format!("{n} quarantined: {reason}"))
        .collect::<Vec<_>>()
        .join("; ");
    store.load_history.push(LoadRecord {
        load_version,
        filename: sources.into_iter().collect::<Vec<_>>().join(";"),
        load_time,
        procedure: "promote_level1".into(),
        error_notes,
    });
    Ok(report)
}
