//! File-backed table store for every processing level.
//!
//! A store directory holds one column file per table (see
//! [`super::columnar`]): `staging.tbl`, `frames.tbl`, `measurement.tbl`,
//! `stray.tbl`, `anchors.tbl`, `quarantine.tbl`, `calibrated.tbl`,
//! `dataseries.tbl`, `load_history.tbl`, `bad_data.tbl`, `weather.tbl`,
//! `positions.tbl`. Tables are rewritten whole on save, each through a
//! temporary file and rename.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, Utc};

use super::columnar::{ColumnError, TableReader, TableWriter};
use super::PipelineError;
use crate::collector::{Level0Row, TimeAnchor};
use crate::registry::{MoteId, SensorLocation};

pub type LoadVersion = u64;

/// Identity of one record from one mote boot.
pub type RecordKey = (MoteId, u32, u64);

#[derive(Debug, Clone, PartialEq)]
pub struct StagedRow {
    pub row: Level0Row,
    pub source: String,
}

/// One promoted record: the per-record part of Level 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub mote_id: MoteId,
    pub epoch: u32,
    pub seq: u64,
    pub download_id: u64,
    pub mote_time_s: u32,
    pub utc: DateTime<Utc>,
    pub load_version: LoadVersion,
}

impl Frame {
    pub fn key(&self) -> RecordKey {
        (self.mote_id, self.epoch, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub sensor_id: String,
    pub mote_id: MoteId,
    pub epoch: u32,
    pub seq: u64,
    /// ADC channel slot within the record.
    pub slot: u8,
    pub utc: DateTime<Utc>,
    pub raw_value: u16,
    pub mote_time_s: u32,
    pub load_version: LoadVersion,
    pub processed: bool,
    pub is_bad: bool,
}

/// A reading from a channel with no registered sensor, kept so the
/// original record can be rebuilt.
#[derive(Debug, Clone, PartialEq)]
pub struct StrayReading {
    pub mote_id: MoteId,
    pub epoch: u32,
    pub seq: u64,
    pub slot: u8,
    pub raw_value: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRow {
    pub mote_id: MoteId,
    pub download_id: u64,
    pub epoch: u32,
    pub anchor: TimeAnchor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quarantined {
    pub staged: StagedRow,
    pub reason: String,
    pub load_version: LoadVersion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedValue {
    pub sensor_id: String,
    pub utc: DateTime<Utc>,
    pub value: f64,
    pub std_error: f64,
    pub calib_version: LoadVersion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSeriesCell {
    pub sensor_id: String,
    pub step_s: u32,
    /// Cell covers `[step_index · step_s, (step_index + 1) · step_s)` in
    /// Unix seconds.
    pub step_index: i64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
    pub count: u32,
    pub interpolated: bool,
}

impl DataSeriesCell {
    pub fn start(&self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.step_index * i64::from(self.step_s), 0).expect("in range")
    }

    pub fn end(&self) -> DateTime<Utc> {
        DateTime::from_timestamp((self.step_index + 1) * i64::from(self.step_s), 0).expect("in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadRecord {
    pub load_version: LoadVersion,
    pub filename: String,
    pub load_time: DateTime<Utc>,
    pub procedure: String,
    pub error_notes: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BadDataInterval {
    pub sensor_id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub reason: String,
}

impl BadDataInterval {
    pub fn contains(&self, sensor_id: &str, t: DateTime<Utc>) -> bool {
        self.sensor_id == sensor_id && self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WeatherEvent {
    Rain,
    Snow,
    Thunderstorm,
    Fog,
}

impl WeatherEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            WeatherEvent::Rain => "rain",
            WeatherEvent::Snow => "snow",
            WeatherEvent::Thunderstorm => "thunderstorm",
            WeatherEvent::Fog => "fog",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rain" => Some(WeatherEvent::Rain),
            "snow" => Some(WeatherEvent::Snow),
            "thunderstorm" => Some(WeatherEvent::Thunderstorm),
            "fog" => Some(WeatherEvent::Fog),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeatherDay {
    pub date: NaiveDate,
    pub tmin_c: f64,
    pub tmax_c: f64,
    pub tavg_c: f64,
    pub precipitation_mm: f64,
    pub humidity_pct: f64,
    pub pressure_hpa: f64,
    pub events: BTreeSet<WeatherEvent>,
}

impl WeatherDay {
    pub fn events_text(&self) -> String {
        self.events.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(";")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Store {
    pub(crate) staging: Vec<StagedRow>,
    pub(crate) frames: Vec<Frame>,
    pub(crate) measurements: Vec<Measurement>,
    pub(crate) strays: Vec<StrayReading>,
    pub(crate) anchors: Vec<AnchorRow>,
    pub(crate) quarantine: Vec<Quarantined>,
    pub(crate) calibrated: Vec<CalibratedValue>,
    pub(crate) dataseries: Vec<DataSeriesCell>,
    pub(crate) load_history: Vec<LoadRecord>,
    pub(crate) bad_data: Vec<BadDataInterval>,
    pub(crate) weather: BTreeMap<NaiveDate, WeatherDay>,
    pub(crate) positions: BTreeMap<String, SensorLocation>,
    /// Keys already promoted or quarantined.
    pub(crate) settled_keys: HashSet<RecordKey>,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn staging(&self) -> &[StagedRow] {
        &self.staging
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn quarantine(&self) -> &[Quarantined] {
        &self.quarantine
    }

    pub fn calibrated(&self) -> &[CalibratedValue] {
        &self.calibrated
    }

    pub fn dataseries(&self) -> &[DataSeriesCell] {
        &self.dataseries
    }

    pub fn load_history(&self) -> &[LoadRecord] {
        &self.load_history
    }

    pub fn bad_data(&self) -> &[BadDataInterval] {
        &self.bad_data
    }

    pub fn weather(&self) -> impl Iterator<Item = &WeatherDay> {
        self.weather.values()
    }

    pub fn weather_on(&self, date: NaiveDate) -> Option<&WeatherDay> {
        self.weather.get(&date)
    }

    pub fn position(&self, sensor_id: &str) -> Option<&SensorLocation> {
        self.positions.get(sensor_id)
    }

    pub fn anchors(&self) -> &[AnchorRow] {
        &self.anchors
    }

    pub fn last_load_version(&self) -> Option<LoadVersion> {
        self.load_history.iter().map(|l| l.load_version).max()
    }

    pub fn next_load_version(&self) -> LoadVersion {
        self.last_load_version().map_or(1, |v| v + 1)
    }

    pub(crate) fn check_version(&self, v: LoadVersion) -> Result<(), PipelineError> {
        match self.last_load_version() {
            Some(last) if v <= last => Err(PipelineError::VersionNotMonotone { given: v, last }),
            _ => Ok(()),
        }
    }

    pub fn load_record(&self, v: LoadVersion) -> Option<&LoadRecord> {
        self.load_history.iter().find(|l| l.load_version == v)
    }

    /// Calibrated rows with only the newest calibration per
    /// (sensor, time) kept, in (sensor, time) order.
    pub fn latest_calibrated(&self) -> Vec<&CalibratedValue> {
        let mut best: BTreeMap<(&str, DateTime<Utc>), &CalibratedValue> = BTreeMap::new();
        for c in &self.calibrated {
            best.entry((c.sensor_id.as_str(), c.utc))
                .and_modify(|cur| {
                    if c.calib_version > cur.calib_version {
                        *cur = c;
                    }
                })
                .or_insert(c);
        }
        best.into_values().collect()
    }

    /// Marks every measurement of `sensor_id` unprocessed so the next
    /// calibration run recomputes it.
    pub fn reset_processed(&mut self, sensor_id: &str) -> usize {
        let mut n = 0;
        for m in self.measurements.iter_mut().filter(|m| m.sensor_id == sensor_id) {
            if m.processed {
                m.processed = false;
                n += 1;
            }
        }
        n
    }

    /// Rebuilds every promoted record as its original Level-0 row, in
    /// (mote, epoch, seq) order.
    pub fn reconstruct_level0(&self) -> Result<Vec<Level0Row>, PipelineError> {
        let anchors: BTreeMap<(MoteId, u64), &AnchorRow> =
            self.anchors.iter().map(|a| ((a.mote_id, a.download_id), a)).collect();
        let mut rows: BTreeMap<RecordKey, Level0Row> = BTreeMap::new();
        for f in &self.frames {
            let a = anchors.get(&(f.mote_id, f.download_id)).ok_or_else(|| {
                PipelineError::Integrity(format!(
                    "frame {:?} references missing download {}",
                    f.key(),
                    f.download_id
                ))
            })?;
            rows.insert(
                f.key(),
                Level0Row {
                    download_id: f.download_id,
                    mote_id: f.mote_id,
                    epoch: f.epoch,
                    seq: f.seq,
                    mote_time_s: f.mote_time_s,
                    readings: [u16::MAX; 5],
                    anchor: a.anchor,
                },
            );
        }
        let slots = self
            .measurements
            .iter()
            .map(|m| ((m.mote_id, m.epoch, m.seq), m.slot, m.raw_value))
            .chain(
                self.strays
                    .iter()
                    .map(|s| ((s.mote_id, s.epoch, s.seq), s.slot, s.raw_value)),
            );
        for (key, slot, raw) in slots {
            let row = rows
                .get_mut(&key)
                .ok_or_else(|| PipelineError::Integrity(format!("reading for unknown frame {key:?}")))?;
            row.readings[usize::from(slot)] = raw;
        }
        let out: Vec<Level0Row> = rows.into_values().collect();
        if let Some(r) = out.iter().find(|r| r.readings.contains(&u16::MAX)) {
            return Err(PipelineError::Integrity(format!(
                "frame ({}, {}, {}) is missing a channel",
                r.mote_id, r.epoch, r.seq
            )));
        }
        Ok(out)
    }

    pub(crate) fn rebuild_keys(&mut self) {
        self.settled_keys = self
            .frames
            .iter()
            .map(Frame::key)
            .chain(
                self.quarantine
                    .iter()
                    .map(|q| (q.staged.row.mote_id, q.staged.row.epoch, q.staged.row.seq)),
            )
            .collect();
    }

    /// Loads a store directory; a missing directory is an empty store.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let mut store = Store::new();
        if !dir.exists() {
            return Ok(store);
        }
        let read = |name: &str| -> Result<Option<Vec<u8>>, PipelineError> {
            let p = dir.join(format!("{name}.tbl"));
            if p.exists() {
                Ok(Some(std::fs::read(p)?))
            } else {
                Ok(None)
            }
        };
        macro_rules! load {
            ($name:literal, $field:ident, $dec:ident) => {
                if let Some(bytes) = read($name)? {
                    store.$field = $dec(&bytes).map_err(|e| PipelineError::Corrupt {
                        table: $name,
                        source: e,
                    })?;
                }
            };
        }
        load!("staging", staging, decode_staging);
        load!("frames", frames, decode_frames);
        load!("measurement", measurements, decode_measurements);
        load!("stray", strays, decode_strays);
        load!("anchors", anchors, decode_anchors);
        load!("quarantine", quarantine, decode_quarantine);
        load!("calibrated", calibrated, decode_calibrated);
        load!("dataseries", dataseries, decode_dataseries);
        load!("load_history", load_history, decode_load_history);
        load!("bad_data", bad_data, decode_bad_data);
        load!("weather", weather, decode_weather);
        load!("positions", positions, decode_positions);
        store.rebuild_keys();
        Ok(store)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let tables: [(&str, Vec<u8>); 12] = [
            ("staging", encode_staging(&self.staging)),
            ("frames", encode_frames(&self.frames)),
            ("measurement", encode_measurements(&self.measurements)),
            ("stray", encode_strays(&self.strays)),
            ("anchors", encode_anchors(&self.anchors)),
            ("quarantine", encode_quarantine(&self.quarantine)),
            ("calibrated", encode_calibrated(&self.calibrated)),
            ("dataseries", encode_dataseries(&self.dataseries)),
            ("load_history", encode_load_history(&self.load_history)),
            ("bad_data", encode_bad_data(&self.bad_data)),
            ("weather", encode_weather(&self.weather)),
            ("positions", encode_positions(&self.positions)),
        ];
        for (name, bytes) in tables {
            let tmp = dir.join(format!("{name}.tbl.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, dir.join(format!("{name}.tbl")))?;
        }
        Ok(())
    }
}

fn ms(t: &DateTime<Utc>) -> i64 {
    t.timestamp_millis()
}

fn from_ms(v: i64) -> Result<DateTime<Utc>, ColumnError> {
    DateTime::from_timestamp_millis(v).ok_or(ColumnError::Truncated)
}

fn times(v: Vec<i64>) -> Result<Vec<DateTime<Utc>>, ColumnError> {
    v.into_iter().map(from_ms).collect()
}

fn u8s(v: Vec<u16>) -> Vec<u8> {
    v.into_iter().map(|x| x as u8).collect()
}

fn write_level0(w: &mut TableWriter, rows: &[&Level0Row]) {
    w.u64s(rows.iter().map(|r| r.download_id))
        .u32s(rows.iter().map(|r| r.mote_id))
        .u32s(rows.iter().map(|r| r.epoch))
        .u64s(rows.iter().map(|r| r.seq))
        .u32s(rows.iter().map(|r| r.mote_time_s));
    for i in 0..5 {
        w.u16s(rows.iter().map(|r| r.readings[i]));
    }
    w.u32s(rows.iter().map(|r| r.anchor.mote_time_s))
        .i64s(rows.iter().map(|r| ms(&r.anchor.utc)));
}

fn read_level0(r: &mut TableReader) -> Result<Vec<Level0Row>, ColumnError> {
    let download = r.u64s()?;
    let mote = r.u32s()?;
    let epoch = r.u32s()?;
    let seq = r.u64s()?;
    let mt = r.u32s()?;
    let mut readings = Vec::with_capacity(5);
    for _ in 0..5 {
        readings.push(r.u16s()?);
    }
    let amt = r.u32s()?;
    let autc = times(r.i64s()?)?;
    Ok((0..r.rows())
        .map(|i| Level0Row {
            download_id: download[i],
            mote_id: mote[i],
            epoch: epoch[i],
            seq: seq[i],
            mote_time_s: mt[i],
            readings: [
                readings[0][i],
                readings[1][i],
                readings[2][i],
                readings[3][i],
                readings[4][i],
            ],
            anchor: TimeAnchor {
                mote_time_s: amt[i],
                utc: autc[i],
            },
        })
        .collect())
}

fn encode_staging(rows: &[StagedRow]) -> Vec<u8> {
    let mut w = TableWriter::new("staging", rows.len());
    write_level0(&mut w, &rows.iter().map(|s| &s.row).collect::<Vec<_>>());
    w.strs(rows.iter().map(|s| s.source.as_str()));
    w.finish()
}

fn decode_staging(bytes: &[u8]) -> Result<Vec<StagedRow>, ColumnError> {
    let mut r = TableReader::open(bytes, "staging")?;
    let rows = read_level0(&mut r)?;
    let src = r.strs()?;
    r.finish()?;
    Ok(rows
        .into_iter()
        .zip(src)
        .map(|(row, source)| StagedRow { row, source })
        .collect())
}

fn encode_quarantine(rows: &[Quarantined]) -> Vec<u8> {
    let mut w = TableWriter::new("quarantine", rows.len());
    write_level0(&mut w, &rows.iter().map(|q| &q.staged.row).collect::<Vec<_>>());
    w.strs(rows.iter().map(|q| q.staged.source.as_str()))
        .strs(rows.iter().map(|q| q.reason.as_str()))
        .u64s(rows.iter().map(|q| q.load_version));
    w.finish()
}

fn decode_quarantine(bytes: &[u8]) -> Result<Vec<Quarantined>, ColumnError> {
    let mut r = TableReader::open(bytes, "quarantine")?;
    let rows = read_level0(&mut r)?;
    let src = r.strs()?;
    let reason = r.strs()?;
    let lv = r.u64s()?;
    r.finish()?;
    Ok(rows
        .into_iter()
        .zip(src)
        .zip(reason)
        .zip(lv)
        .map(|(((row, source), reason), load_version)| Quarantined {
            staged: StagedRow { row, source },
            reason,
            load_version,
        })
        .collect())
}

fn encode_frames(rows: &[Frame]) -> Vec<u8> {
    let mut w = TableWriter::new("frames", rows.len());
    w.u32s(rows.iter().map(|f| f.mote_id))
        .u32s(rows.iter().map(|f| f.epoch))
        .u64s(rows.iter().map(|f| f.seq))
        .u64s(rows.iter().map(|f| f.download_id))
        .u32s(rows.iter().map(|f| f.mote_time_s))
        .i64s(rows.iter().map(|f| ms(&f.utc)))
        .u64s(rows.iter().map(|f| f.load_version));
    w.finish()
}

fn decode_frames(bytes: &[u8]) -> Result<Vec<Frame>, ColumnError> {
    let mut r = TableReader::open(bytes, "frames")?;
    let (mote, epoch, seq, dl, mt) = (r.u32s()?, r.u32s()?, r.u64s()?, r.u64s()?, r.u32s()?);
    let utc = times(r.i64s()?)?;
    let lv = r.u64s()?;
    r.finish()?;
    Ok((0..mote.len())
        .map(|i| Frame {
            mote_id: mote[i],
            epoch: epoch[i],
            seq: seq[i],
            download_id: dl[i],
            mote_time_s: mt[i],
            utc: utc[i],
            load_version: lv[i],
        })
        .collect())
}

fn encode_measurements(rows: &[Measurement]) -> Vec<u8> {
    let mut w = TableWriter::new("measurement", rows.len());
    w.strs(rows.iter().map(|m| m.sensor_id.as_str()))
        .u32s(rows.iter().map(|m| m.mote_id))
        .u32s(rows.iter().map(|m| m.epoch))
        .u64s(rows.iter().map(|m| m.seq))
        .u16s(rows.iter().map(|m| u16::from(m.slot)))
        .i64s(rows.iter().map(|m| ms(&m.utc)))
        .u16s(rows.iter().map(|m| m.raw_value))
        .u32s(rows.iter().map(|m| m.mote_time_s))
        .u64s(rows.iter().map(|m| m.load_version))
        .bools(rows.iter().map(|m| m.processed))
        .bools(rows.iter().map(|m| m.is_bad));
    w.finish()
}

fn decode_measurements(bytes: &[u8]) -> Result<Vec<Measurement>, ColumnError> {
    let mut r = TableReader::open(bytes, "measurement")?;
    let sensor = r.strs()?;
    let (mote, epoch, seq) = (r.u32s()?, r.u32s()?, r.u64s()?);
    let slot = u8s(r.u16s()?);
    let utc = times(r.i64s()?)?;
    let (raw, mt, lv) = (r.u16s()?, r.u32s()?, r.u64s()?);
    let (processed, bad) = (r.bools()?, r.bools()?);
    r.finish()?;
    Ok(sensor
        .into_iter()
        .enumerate()
        .map(|(i, sensor_id)| Measurement {
            sensor_id,
            mote_id: mote[i],
            epoch: epoch[i],
            seq: seq[i],
            slot: slot[i],
            utc: utc[i],
            raw_value: raw[i],
            mote_time_s: mt[i],
            load_version: lv[i],
            processed: processed[i],
            is_bad: bad[i],
        })
        .collect())
}

fn encode_strays(rows: &[StrayReading]) -> Vec<u8> {
    let mut w = TableWriter::new("stray", rows.len());
    w.u32s(rows.iter().map(|s| s.mote_id))
        .u32s(rows.iter().map(|s| s.epoch))
        .u64s(rows.iter().map(|s| s.seq))
        .u16s(rows.iter().map(|s| u16::from(s.slot)))
        .u16s(rows.iter().map(|s| s.raw_value));
    w.finish()
}

fn decode_strays(bytes: &[u8]) -> Result<Vec<StrayReading>, ColumnError> {
    let mut r = TableReader::open(bytes, "stray")?;
    let (mote, epoch, seq) = (r.u32s()?, r.u32s()?, r.u64s()?);
    let slot = u8s(r.u16s()?);
    let raw = r.u16s()?;
    r.finish()?;
    Ok((0..mote.len())
        .map(|i| StrayReading {
            mote_id: mote[i],
            epoch: epoch[i],
            seq: seq[i],
            slot: slot[i],
            raw_value: raw[i],
        })
        .collect())
}

fn encode_anchors(rows: &[AnchorRow]) -> Vec<u8> {
    let mut w = TableWriter::new("anchors", rows.len());
    w.u32s(rows.iter().map(|a| a.mote_id))
        .u64s(rows.iter().map(|a| a.download_id))
        .u32s(rows.iter().map(|a| a.epoch))
        .u32s(rows.iter().map(|a| a.anchor.mote_time_s))
        .i64s(rows.iter().map(|a| ms(&a.anchor.utc)));
    w.finish()
}

fn decode_anchors(bytes: &[u8]) -> Result<Vec<AnchorRow>, ColumnError> {
    let mut r = TableReader::open(bytes, "anchors")?;
    let (mote, dl, epoch, amt) = (r.u32s()?, r.u64s()?, r.u32s()?, r.u32s()?);
    let autc = times(r.i64s()?)?;
    r.finish()?;
    Ok((0..mote.len())
        .map(|i| AnchorRow {
            mote_id: mote[i],
            download_id: dl[i],
            epoch: epoch[i],
            anchor: TimeAnchor {
                mote_time_s: amt[i],
                utc: autc[i],
            },
        })
        .collect())
}

fn encode_calibrated(rows: &[CalibratedValue]) -> Vec<u8> {
    let mut w = TableWriter::new("calibrated", rows.len());
    w.strs(rows.iter().map(|c| c.sensor_id.as_str()))
        .i64s(rows.iter().map(|c| ms(&c.utc)))
        .f64s(rows.iter().map(|c| c.value))
        .f64s(rows.iter().map(|c| c.std_error))
        .u64s(rows.iter().map(|c| c.calib_version));
    w.finish()
}

fn decode_calibrated(bytes: &[u8]) -> Result<Vec<CalibratedValue>, ColumnError> {
    let mut r = TableReader::open(bytes, "calibrated")?;
    let sensor = r.strs()?;
    let utc = times(r.i64s()?)?;
    let (value, se, cv) = (r.f64s()?, r.f64s()?, r.u64s()?);
    r.finish()?;
    Ok(sensor
        .into_iter()
        .enumerate()
        .map(|(i, sensor_id)| CalibratedValue {
            sensor_id,
            utc: utc[i],
            value: value[i],
            std_error: se[i],
            calib_version: cv[i],
        })
        .collect())
}

fn encode_dataseries(rows: &[DataSeriesCell]) -> Vec<u8> {
    let mut w = TableWriter::new("dataseries", rows.len());
    w.strs(rows.iter().map(|c| c.sensor_id.as_str()))
        .u32s(rows.iter().map(|c| c.step_s))
        .i64s(rows.iter().map(|c| c.step_index))
        .f64s(rows.iter().map(|c| c.mean))
        .f64s(rows.iter().map(|c| c.min))
        .f64s(rows.iter().map(|c| c.max))
        .f64s(rows.iter().map(|c| c.stddev))
        .u32s(rows.iter().map(|c| c.count))
        .bools(rows.iter().map(|c| c.interpolated));
    w.finish()
}

fn decode_dataseries(bytes: &[u8]) -> Result<Vec<DataSeriesCell>, ColumnError> {
    let mut r = TableReader::open(bytes, "dataseries")?;
    let sensor = r.strs()?;
    let (step, idx) = (r.u32s()?, r.i64s()?);
    let (mean, min, max, sd) = (r.f64s()?, r.f64s()?, r.f64s()?, r.f64s()?);
    let (count, interp) = (r.u32s()?, r.bools()?);
    r.finish()?;
    Ok(sensor
        .into_iter()
        .enumerate()
        .map(|(i, sensor_id)| DataSeriesCell {
            sensor_id,
            step_s: step[i],
            step_index: idx[i],
            mean: mean[i],
            min: min[i],
            max: max[i],
            stddev: sd[i],
            count: count[i],
            interpolated: interp[i],
        })
        .collect())
}

fn encode_load_history(rows: &[LoadRecord]) -> Vec<u8> {
    let mut w = TableWriter::new("load_history", rows.len());
    w.u64s(rows.iter().map(|l| l.load_version))
        .strs(rows.iter().map(|l| l.filename.as_str()))
        .i64s(rows.iter().map(|l| ms(&l.load_time)))
        .strs(rows.iter().map(|l| l.procedure.as_str()))
        .strs(rows.iter().map(|l| l.error_notes.as_str()));
    w.finish()
}

fn decode_load_history(bytes: &[u8]) -> Result<Vec<LoadRecord>, ColumnError> {
    let mut r = TableReader::open(bytes, "load_history")?;
    let lv = r.u64s()?;
    let file = r.strs()?;
    let time = times(r.i64s()?)?;
    let (proc_, notes) = (r.strs()?, r.strs()?);
    r.finish()?;
    Ok(lv
        .into_iter()
        .zip(file)
        .zip(time)
        .zip(proc_)
        .zip(notes)
        .map(
            |((((load_version, filename), load_time), procedure), error_notes)| LoadRecord {
                load_version,
                filename,
                load_time,
                procedure,
                error_notes,
            },
        )
        .collect())
}

fn encode_bad_data(rows: &[BadDataInterval]) -> Vec<u8> {
    let mut w = TableWriter::new("bad_data", rows.len());
    w.strs(rows.iter().map(|b| b.sensor_id.as_str()))
        .i64s(rows.iter().map(|b| ms(&b.start)))
        .i64s(rows.iter().map(|b| ms(&b.end)))
        .strs(rows.iter().map(|b| b.reason.as_str()));
    w.finish()
}

fn decode_bad_data(bytes: &[u8]) -> Result<Vec<BadDataInterval>, ColumnError> {
    let mut r = TableReader::open(bytes, "bad_data")?;
    let sensor = r.strs()?;
    let start = times(r.i64s()?)?;
    let end = times(r.i64s()?)?;
    let reason = r.strs()?;
    r.finish()?;
    Ok(sensor
        .into_iter()
        .zip(start)
        .zip(end)
        .zip(reason)
        .map(|(((sensor_id, start), end), reason)| BadDataInterval {
            sensor_id,
            start,
            end,
            reason,
        })
        .collect())
}

fn encode_weather(days: &BTreeMap<NaiveDate, WeatherDay>) -> Vec<u8> {
    let rows: Vec<&WeatherDay> = days.values().collect();
    let events: Vec<String> = rows.iter().map(|d| d.events_text()).collect();
    let mut w = TableWriter::new("weather", rows.len());
    w.i64s(rows.iter().map(|d| i64::from(d.date.num_days_from_ce())))
        .f64s(rows.iter().map(|d| d.tmin_c))
        .f64s(rows.iter().map(|d| d.tmax_c))
        .f64s(rows.iter().map(|d| d.tavg_c))
        .f64s(rows.iter().map(|d| d.precipitation_mm))
        .f64s(rows.iter().map(|d| d.humidity_pct))
        .f64s(rows.iter().map(|d| d.pressure_hpa))
        .strs(events.iter().map(String::as_str));
    w.finish()
}

fn decode_weather(bytes: &[u8]) -> Result<BTreeMap<NaiveDate, WeatherDay>, ColumnError> {
    let mut r = TableReader::open(bytes, "weather")?;
    let date = r.i64s()?;
    let (tmin, tmax, tavg) = (r.f64s()?, r.f64s()?, r.f64s()?);
    let (precip, hum, pres) = (r.f64s()?, r.f64s()?, r.f64s()?);
    let events = r.strs()?;
    r.finish()?;
    let mut out = BTreeMap::new();
    for i in 0..date.len() {
        let d = i32::try_from(date[i])
            .ok()
            .and_then(NaiveDate::from_num_days_from_ce_opt)
            .ok_or(ColumnError::Truncated)?;
        out.insert(
            d,
            WeatherDay {
                date: d,
                tmin_c: tmin[i],
                tmax_c: tmax[i],
                tavg_c: tavg[i],
                precipitation_mm: precip[i],
                humidity_pct: hum[i],
                pressure_hpa: pres[i],
                events: events[i].split(';').filter_map(WeatherEvent::parse).collect(),
            },
        );
    }
    Ok(out)
}

fn encode_positions(pos: &BTreeMap<String, SensorLocation>) -> Vec<u8> {
    let rows: Vec<(&String, &SensorLocation)> = pos.iter().collect();
    let mut w = TableWriter::new("positions", rows.len());
    w.strs(rows.iter().map(|(id, _)| id.as_str()))
        .strs(rows.iter().map(|(_, l)| l.site_id.as_str()))
        .strs(rows.iter().map(|(_, l)| l.patch_id.as_str()))
        .f64s(rows.iter().map(|(_, l)| l.latitude))
        .f64s(rows.iter().map(|(_, l)| l.longitude))
        .i64s(rows.iter().map(|(_, l)| i64::from(l.depth_cm)));
    w.finish()
}

fn decode_positions(bytes: &[u8]) -> Result<BTreeMap<String, SensorLocation>, ColumnError> {
    let mut r = TableReader::open(bytes, "positions")?;
    let (id, site, patch) = (r.strs()?, r.strs()?, r.strs()?);
    let (lat, lon, depth) = (r.f64s()?, r.f64s()?, r.i64s()?);
    r.finish()?;
    Ok(id
        .into_iter()
        .zip(site.into_iter().zip(patch))
        .enumerate()
        .map(|(i, (id, (site_id, patch_id)))| {
            (
                id,
                SensorLocation {
                    site_id,
                    patch_id,
                    latitude: lat[i],
                    longitude: lon[i],
                    depth_cm: depth[i] as i32,
                },
            )
        })
        .collect())
}
