//! Level 2 → Level 3: calibrated values averaged onto a fixed time grid.

use std::collections::BTreeMap;

use super::store::{DataSeriesCell, Store};
use super::PipelineError;

pub const DEFAULT_STEP_S: u32 = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapPolicy {
    /// Empty steps produce no cell.
    Missing,
    /// Runs of at most this many empty steps between two populated steps
    /// are filled by linear interpolation of the neighbouring means.
    Interpolate { max_gap_steps: u32 },
}

/// Rebuilds every sensor's cells at `step_s`, replacing existing cells of
/// that step. Only the newest calibration of each value is used.
pub fn grid_dataseries(store: &mut Store, step_s: u32, gaps: GapPolicy) -> Result<usize, PipelineError> {
    if step_s == 0 || 86_400 % step_s != 0 {
        return Err(PipelineError::Step(step_s));
    }
    let step = i64::from(step_s);
    let mut buckets: BTreeMap<(&str, i64), Vec<f64>> = BTreeMap::new();
    for c in store.latest_calibrated() {
        buckets
            .entry((c.sensor_id.as_str(), c.utc.timestamp().div_euclid(step)))
            .or_default()
            .push(c.value);
    }

    let mut cells: Vec<DataSeriesCell> = Vec::with_capacity(buckets.len());
    for ((sensor, idx), values) in &buckets {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let (GapPolicy::Interpolate { max_gap_steps }, Some(prev)) = (gaps, cells.last()) {
            let gap = idx - prev.step_index - 1;
            if prev.sensor_id == *sensor && gap >= 1 && gap <= i64::from(max_gap_steps) {
                let (m0, k0) = (prev.mean, prev.step_index);
                for k in k0 + 1..*idx {
                    let f = (k - k0) as f64 / (idx - k0) as f64;
                    let m = m0 + (mean - m0) * f;
                    cells.push(DataSeriesCell {
                        sensor_id: sensor.to_string(),
                        step_s,
                        step_index: k,
                        mean: m,
                        min: m,
                        max: m,
                        stddev: 0.0,
                        count: 0,
                        interpolated: true,
                    });
                }
            }
        }
        cells.push(DataSeriesCell {
            sensor_id: sensor.to_string(),
            step_s,
            step_index: *idx,
            mean,
            min,
            max,
            stddev,
            count: n as u32,
            interpolated: false,
        });
    }
    let count = cells.len();
    store.dataseries.retain(|c| c.step_s != step_s);
    store.dataseries.extend(cells);
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::store::CalibratedValue;
    use chrono::{DateTime, Duration, TimeZone, Utc};
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2006, 1, 10, 0, 0, 0).unwrap()
    }

    fn cal(sensor: &str, sec: i64, value: f64, version: u64) -> CalibratedValue {
        CalibratedValue {
            sensor_id: sensor.into(),
            utc: t0() + Duration::seconds(sec),
            value,
            std_error: 0.0,
            calib_version: version,
        }
    }

    #[test]
    fn constant_step() {
        let mut s = Store::new();
        for i in 0..10 {
            s.calibrated.push(cal("a", i * 60, 5.0, 1));
        }
        assert_eq!(grid_dataseries(&mut s, 600, GapPolicy::Missing).unwrap(), 1);
        let c = &s.dataseries()[0];
        assert_eq!((c.mean, c.stddev, c.count), (5.0, 0.0, 10));
    }

    #[test]
    fn interpolates_one_gap() {
        let mut s = Store::new();
        s.calibrated.push(cal("a", 0, 4.0, 1));
        s.calibrated.push(cal("a", 1200, 6.0, 1));
        assert_eq!(grid_dataseries(&mut s, 600, GapPolicy::Missing).unwrap(), 2);
        assert_eq!(
            grid_dataseries(&mut s, 600, GapPolicy::Interpolate { max_gap_steps: 1 }).unwrap(),
            3
        );
        let mid = &s.dataseries()[1];
        assert!(mid.interpolated);
        assert_eq!((mid.mean, mid.count), (5.0, 0));
        assert_eq!(s.dataseries().len(), 3);
        // A gap longer than the limit stays empty.
        s.calibrated.push(cal("a", 6000, 1.0, 1));
        grid_dataseries(&mut s, 600, GapPolicy::Interpolate { max_gap_steps: 1 }).unwrap();
        assert_eq!(s.dataseries().len(), 4);
    }

    #[test]
    fn sample_stddev_and_latest_version() {
        let mut s = Store::new();
        s.calibrated.push(cal("a", 0, 1.0, 1));
        s.calibrated.push(cal("a", 0, 2.0, 2));
        s.calibrated.push(cal("a", 60, 4.0, 1));
        grid_dataseries(&mut s, 600, GapPolicy::Missing).unwrap();
        let c = &s.dataseries()[0];
        assert_eq!(c.mean, 3.0);
        assert!((c.stddev - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!((c.min, c.max), (2.0, 4.0));
    }

    #[test]
    fn rejects_steps_not_dividing_a_day() {
        let mut s = Store::new();
        assert!(grid_dataseries(&mut s, 7, GapPolicy::Missing).is_err());
        assert!(grid_dataseries(&mut s, 0, GapPolicy::Missing).is_err());
        assert!(grid_dataseries(&mut s, 21_600, GapPolicy::Missing).is_ok());
    }

    proptest! {
        #[test]
        fn gridding_conserves_sums(
            values in proptest::collection::vec((0i64..20_000, -50.0f64..50.0), 1..200),
            step in prop::sample::select(vec![60u32, 300, 600, 3600]),
        ) {
            let mut s = Store::new();
            let mut seen = std::collections::HashSet::new();
            for (sec, v) in &values {
                if seen.insert(*sec) {
                    s.calibrated.push(cal("x", *sec, *v, 1));
                }
            }
            let total: f64 = s.calibrated().iter().map(|c| c.value).sum();
            grid_dataseries(&mut s, step, GapPolicy::Interpolate { max_gap_steps: 3 }).unwrap();
            let cells = s.dataseries();
            let sum: f64 = cells.iter().filter(|c| !c.interpolated).map(|c| c.mean * f64::from(c.count)).sum();
            let n: u32 = cells.iter().map(|c| c.count).sum();
            prop_assert!((sum - total).abs() < 1e-7 * (1.0 + total.abs()));
            prop_assert_eq!(n as usize, s.calibrated().len());
            for c in cells {
                prop_assert!(c.min <= c.mean + 1e-9 && c.mean <= c.max + 1e-9);
                prop_assert!(c.count >= 1 || c.interpolated);
            }
        }
    }
}
