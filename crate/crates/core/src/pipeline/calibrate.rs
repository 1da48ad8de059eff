//! Level 1 → Level 2: raw counts to physical units, and bad-data masking.

use std::collections::HashMap;

use chrono::{DateTime, Utc};

use super::convert::{adc_to_resistance, thermistor_celsius, watermark_kpa, ConvertError, ADC_MAX};
use super::store::{BadDataInterval, CalibratedValue, LoadRecord, LoadVersion, Store};
use super::PipelineError;
use crate::registry::{MoteId, Registry, Sensor, SensorType};

/// Grain of the patch-average soil temperature used when a moisture
/// reading has no soil temperature from its own mote.
pub const PATCH_AVERAGE_STEP_S: i64 = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CalibrateReport {
    pub calibrated: usize,
    pub skipped_missing_coeffs: usize,
    pub skipped_open_circuit: usize,
    pub skipped_domain: usize,
    pub skipped_no_temperature: usize,
    /// Moisture values computed with the patch-average temperature.
    pub patch_fallbacks: usize,
}

impl CalibrateReport {
    pub fn skipped(&self) -> usize {
        self.skipped_missing_coeffs + self.skipped_open_circuit + self.skipped_domain + self.skipped_no_temperature
    }
}

enum Outcome {
    Value(f64),
    /// Permanent failure: the row is marked processed.
    Reject(Skip),
    /// May succeed later (coefficients or temperature added): left pending.
    Defer(Skip),
}

#[derive(Clone, Copy)]
enum Skip {
    MissingCoeffs,
    OpenCircuit,
    Domain,
    NoTemperature,
}

fn convert_error(e: ConvertError) -> Skip {
    match e {
        ConvertError::OpenCircuit => Skip::OpenCircuit,
        _ => Skip::Domain,
    }
}

fn temperature(sensor: &Sensor, raw: u16) -> Outcome {
    let cal = &sensor.calibration;
    let Some(coeffs) = cal.thermistor_coeffs else {
        return Outcome::Defer(Skip::MissingCoeffs);
    };
    match adc_to_resistance(raw, cal.reference_resistor_ohms, cal.reference_bias_ohms)
        .and_then(|r| thermistor_celsius(r, &coeffs))
    {
        Ok(v) => Outcome::Value(v),
        Err(e) => Outcome::Reject(convert_error(e)),
    }
}

fn moisture(sensor: &Sensor, raw: u16, soil_c: Option<f64>) -> Outcome {
    let cal = &sensor.calibration;
    let Some(coeffs) = cal.watermark_coeffs else {
        return Outcome::Defer(Skip::MissingCoeffs);
    };
    let r = match adc_to_resistance(raw, cal.reference_resistor_ohms, cal.reference_bias_ohms) {
        Ok(r) => r,
        Err(e) => return Outcome::Reject(convert_error(e)),
    };
    let Some(t) = soil_c else {
        return Outcome::Defer(Skip::NoTemperature);
    };
    let (lo, hi) = cal.moisture_temp_range_c;
    if !(lo..=hi).contains(&t) {
        return Outcome::Reject(Skip::Domain);
    }
    match watermark_kpa(r, t, &coeffs) {
        Ok(v) => Outcome::Value(v),
        Err(e) => Outcome::Reject(convert_error(e)),
    }
}

fn step_of(t: DateTime<Utc>) -> i64 {
    t.timestamp().div_euclid(PATCH_AVERAGE_STEP_S)
}

/// Calibrates every pending, unmasked measurement. Temperatures go first
/// so moisture readings in the same run can use them.
pub fn calibrate_pending(
    store: &mut Store,
    registry: &Registry,
    calib_version: LoadVersion,
    load_time: DateTime<Utc>,
) -> Result<CalibrateReport, PipelineError> {
    store.check_version(calib_version)?;
    let mut pending: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, m) in store.measurements.iter().enumerate() {
        if m.processed || m.is_bad {
            continue;
        }
        let sensor = registry
            .sensor(&m.sensor_id)
            .ok_or_else(|| PipelineError::UnknownSensor(m.sensor_id.clone()))?;
        let pass = usize::from(sensor.sensor_type == SensorType::SoilMoisture);
        pending[pass].push(i);
    }

    let mut report = CalibrateReport::default();
    let mut new_rows = Vec::new();
    let mut notes: Vec<String> = Vec::new();
    let apply = |store: &mut Store,
                 i: usize,
                 outcome: Outcome,
                 sensor: &Sensor,
                 report: &mut CalibrateReport,
                 new_rows: &mut Vec<CalibratedValue>| {
        let m = &mut store.measurements[i];
        let skip = match outcome {
            Outcome::Value(value) => {
                m.processed = true;
                report.calibrated += 1;
                new_rows.push(CalibratedValue {
                    sensor_id: m.sensor_id.clone(),
                    utc: m.utc,
                    value,
                    std_error: sensor.precision,
                    calib_version,
                });
                return;
            }
            Outcome::Reject(s) => {
                m.processed = true;
                s
            }
            Outcome::Defer(s) => s,
        };
        match skip {
            Skip::MissingCoeffs => report.skipped_missing_coeffs += 1,
            Skip::OpenCircuit => report.skipped_open_circuit += 1,
            Skip::Domain => report.skipped_domain += 1,
            Skip::NoTemperature => report.skipped_no_temperature += 1,
        }
    };

    for &i in &pending[0] {
        let m = &store.measurements[i];
        let sensor = registry.sensor(&m.sensor_id).expect("checked above");
        let outcome = match sensor.sensor_type {
            SensorType::SoilTemperature | SensorType::BoxTemperature => temperature(sensor, m.raw_value),
            SensorType::Photo => Outcome::Value(f64::from(m.raw_value)),
            SensorType::BatteryVoltage => {
                Outcome::Value(f64::from(m.raw_value) * sensor.calibration.adc_full_scale_v / f64::from(ADC_MAX))
            }
            SensorType::SoilMoisture => unreachable!("moisture is in the second pass"),
        };
        apply(store, i, outcome, sensor, &mut report, &mut new_rows);
    }
    store.calibrated.append(&mut new_rows);

    if !pending[1].is_empty() {
        let (own, patch) = soil_temperature_lookup(store, registry);
        for &i in &pending[1] {
            let m = &store.measurements[i];
            let sensor = registry.sensor(&m.sensor_id).expect("checked above");
            let mut soil = own.get(&(m.mote_id, m.utc)).copied();
            if soil.is_none() {
                soil = registry
                    .patch_of_mote(m.mote_id)
                    .and_then(|p| patch.get(&(p.patch_id.as_str(), step_of(m.utc))))
                    .map(|(sum, n)| sum / *n as f64);
                if soil.is_some() {
                    report.patch_fallbacks += 1;
                }
            }
            let outcome = moisture(sensor, m.raw_value, soil);
            apply(store, i, outcome, sensor, &mut report, &mut new_rows);
        }
        store.calibrated.append(&mut new_rows);
    }

    for (n, what) in [
        (report.skipped_missing_coeffs, "missing calibration coefficients"),
        (report.skipped_open_circuit, "open circuit"),
        (report.skipped_domain, "outside calibration domain"),
        (report.skipped_no_temperature, "no soil temperature available"),
    ] {
        if n > 0 {
            notes.push(format!("{n} skipped: {what}"));
        }
    }
    store.load_history.push(LoadRecord {
        load_version: calib_version,
        filename: String::new(),
        load_time,
        procedure: "calibrate_pending".into(),
        error_notes: notes.join("; "),
    });
    Ok(report)
}

type OwnTemps = HashMap<(MoteId, DateTime<Utc>), f64>;
type PatchTemps<'r> = HashMap<(&'r str, i64), (f64, usize)>;

/// Latest calibrated soil temperature per (mote, time), and per-patch sums
/// over the fallback grain.
fn soil_temperature_lookup<'r>(store: &Store, registry: &'r Registry) -> (OwnTemps, PatchTemps<'r>) {
    let mut own = HashMap::new();
    let mut patch: PatchTemps = HashMap::new();
    for c in store.latest_calibrated() {
        let Some(sensor) = registry.sensor(&c.sensor_id) else {
            continue;
        };
        if sensor.sensor_type != SensorType::SoilTemperature {
            continue;
        }
        own.insert((sensor.mote_id, c.utc), c.value);
        if let Some(p) = registry.patch_of_mote(sensor.mote_id) {
            let e = patch.entry((p.patch_id.as_str(), step_of(c.utc))).or_default();
            e.0 += c.value;
            e.1 += 1;
        }
    }
    (own, patch)
}

/// Masks `[start, end)` for one sensor: flags measurements, records the
/// interval, and removes derived rows it covers. Returns how many
/// measurements changed from good to bad.
pub fn mark_bad(store: &mut Store, interval: BadDataInterval) -> Result<usize, PipelineError> {
    if interval.start >= interval.end {
        return Err(PipelineError::EmptyInterval);
    }
    let mut affected = 0;
    for m in store.measurements.iter_mut() {
        if !m.is_bad && interval.contains(&m.sensor_id, m.utc) {
            m.is_bad = true;
            affected += 1;
        }
    }
    store.calibrated.retain(|c| !interval.contains(&c.sensor_id, c.utc));
    store
        .dataseries
        .retain(|c| !(c.sensor_id == interval.sensor_id && c.start() < interval.end && c.end() > interval.start));
    let known = store
        .bad_data
        .iter()
        .any(|b| b.sensor_id == interval.sensor_id && b.start == interval.start && b.end == interval.end);
    if !known {
        store.bad_data.push(interval);
    }
    Ok(affected)
}
