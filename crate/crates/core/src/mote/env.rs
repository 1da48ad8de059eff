//! Synthetic ground truth the simulated sensors observe.

use chrono::{DateTime, Timelike, Utc};
use thiserror::Error;

use crate::config::{ConfigError, Section};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("soil damping must lie in [0, 1], got {0}")]
    Damping(f64),
    #[error("photoperiod sunrise {sunrise_h} must precede sunset {sunset_h} within the day")]
    Photoperiod { sunrise_h: f64, sunset_h: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainEvent {
    pub at: DateTime<Utc>,
    pub mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentModel {
    /// Origin for the seasonal drift and the initial moisture state.
    pub origin: DateTime<Utc>,
    /// Local solar time = UTC + this many hours.
    pub utc_offset_h: f64,
    pub air_mean_c: f64,
    pub air_daily_amplitude_c: f64,
    pub seasonal_drift_c_per_day: f64,
    /// Local hour of the daily air-temperature maximum.
    pub air_peak_hour: f64,
    /// Mean soil-minus-air difference; winter soil stays warmer than air.
    pub soil_offset_c: f64,
    /// Ratio of soil to air daily amplitude at sensor depth.
    pub soil_damping: f64,
    pub soil_lag_h: f64,
    pub rain: Vec<RainEvent>,
    pub moisture_initial_kpa: f64,
    pub moisture_wet_kpa: f64,
    pub moisture_dry_kpa: f64,
    /// Fraction of the gap to the wet asymptote closed per mm is
    /// `1 - exp(-wetting_per_mm)`.
    pub wetting_per_mm: f64,
    pub drying_tau_h: f64,
    /// Extra drying time constant per mm of the most recent rain.
    pub drying_tau_per_mm_h: f64,
    pub sunrise_h: f64,
    pub sunset_h: f64,
    /// Photo channel count at solar noon.
    pub photo_peak_count: f64,
    pub photo_night_count: f64,
}

impl Default for EnvironmentModel {
    fn default() -> Self {
        Self {
            origin: DateTime::<Utc>::UNIX_EPOCH,
            utc_offset_h: 0.0,
            air_mean_c: 10.0,
            air_daily_amplitude_c: 5.0,
            seasonal_drift_c_per_day: 0.0,
            air_peak_hour: 15.0,
            soil_offset_c: 0.0,
            soil_damping: 0.4,
            soil_lag_h: 3.0,
            rain: Vec::new(),
            moisture_initial_kpa: 20.0,
            moisture_wet_kpa: 8.0,
            moisture_dry_kpa: 150.0,
            wetting_per_mm: 0.15,
            drying_tau_h: 72.0,
            drying_tau_per_mm_h: 4.0,
            sunrise_h: 7.0,
            sunset_h: 17.0,
            photo_peak_count: 800.0,
            photo_night_count: 5.0,
        }
    }
}

const SECTION_KEYS: &[&str] = &[
    "origin",
    "utc_offset_h",
    "air_mean_c",
    "air_daily_amplitude_c",
    "seasonal_drift_c_per_day",
    "air_peak_hour",
    "soil_offset_c",
    "soil_damping",
    "soil_lag_h",
    "moisture_initial_kpa",
    "moisture_wet_kpa",
    "moisture_dry_kpa",
    "wetting_per_mm",
    "drying_tau_h",
    "drying_tau_per_mm_h",
    "sunrise_h",
    "sunset_h",
    "photo_peak_count",
    "photo_night_count",
];

impl EnvironmentModel {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.air_daily_amplitude_c < 0.0 {
            return Err(EnvError::Negative("air_daily_amplitude_c"));
        }
        if !(0.0..=1.0).contains(&self.soil_damping) {
            return Err(EnvError::Damping(self.soil_damping));
        }
        if self.drying_tau_h <= 0.0 {
            return Err(EnvError::NonPositive("drying_tau_h"));
        }
        if self.drying_tau_per_mm_h < 0.0 {
            return Err(EnvError::Negative("drying_tau_per_mm_h"));
        }
        if self.wetting_per_mm < 0.0 {
            return Err(EnvError::Negative("wetting_per_mm"));
        }
        if self.photo_peak_count < 0.0 || self.photo_night_count < 0.0 {
            return Err(EnvError::Negative("photo count"));
        }
        if self.rain.iter().any(|r| r.mm < 0.0) {
            return Err(EnvError::Negative("rain depth"));
        }
        if !(0.0 <= self.sunrise_h && self.sunrise_h < self.sunset_h && self.sunset_h <= 24.0) {
            return Err(EnvError::Photoperiod {
                sunrise_h: self.sunrise_h,
                sunset_h: self.sunset_h,
            });
        }
        Ok(())
    }

    /// Reads an `[environment]` section; absent keys keep their defaults.
    /// Rain comes from separate `[rain]` sections (see [`rain_from_section`]).
    pub fn from_section(section: &Section) -> Result<Self, EnvError> {
        section.check_keys(SECTION_KEYS)?;
        let d = Self::default();
        let origin = match section.get("origin") {
            Some(e) => parse_utc(&e.value).map_err(|m| section.invalid("origin", m))?,
            None => d.origin,
        };
        let model = Self {
            origin,
            utc_offset_h: section.parse_or("utc_offset_h", d.utc_offset_h)?,
            air_mean_c: section.parse_or("air_mean_c", d.air_mean_c)?,
            air_daily_amplitude_c: section.parse_or("air_daily_amplitude_c", d.air_daily_amplitude_c)?,
            seasonal_drift_c_per_day: section.parse_or("seasonal_drift_c_per_day", d.seasonal_drift_c_per_day)?,
            air_peak_hour: section.parse_or("air_peak_hour", d.air_peak_hour)?,
            soil_offset_c: section.parse_or("soil_offset_c", d.soil_offset_c)?,
            soil_damping: section.parse_or("soil_damping", d.soil_damping)?,
            soil_lag_h: section.parse_or("soil_lag_h", d.soil_lag_h)?,
            rain: Vec::new(),
            moisture_initial_kpa: section.parse_or("moisture_initial_kpa", d.moisture_initial_kpa)?,
            moisture_wet_kpa: section.parse_or("moisture_wet_kpa", d.moisture_wet_kpa)?,
            moisture_dry_kpa: section.parse_or("moisture_dry_kpa", d.moisture_dry_kpa)?,
            wetting_per_mm: section.parse_or("wetting_per_mm", d.wetting_per_mm)?,
            drying_tau_h: section.parse_or("drying_tau_h", d.drying_tau_h)?,
            drying_tau_per_mm_h: section.parse_or("drying_tau_per_mm_h", d.drying_tau_per_mm_h)?,
            sunrise_h: section.parse_or("sunrise_h", d.sunrise_h)?,
            sunset_h: section.parse_or("sunset_h", d.sunset_h)?,
            photo_peak_count: section.parse_or("photo_peak_count", d.photo_peak_count)?,
            photo_night_count: section.parse_or("photo_night_count", d.photo_night_count)?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn add_rain(&mut self, event: RainEvent) {
        let idx = self.rain.partition_point(|r| r.at <= event.at);
        self.rain.insert(idx, event);
    }

    fn days_since_origin(&self, t: DateTime<Utc>) -> f64 {
        (t - self.origin).num_milliseconds() as f64 / 86_400_000.0
    }

    fn local_hour(&self, t: DateTime<Utc>) -> f64 {
        let h =
            f64::from(t.num_seconds_from_midnight()) / 3600.0 + f64::from(t.nanosecond()) / 3.6e12 + self.utc_offset_h;
        h.rem_euclid(24.0)
    }

    fn trend_c(&self, t: DateTime<Utc>) -> f64 {
        self.air_mean_c + self.seasonal_drift_c_per_day * self.days_since_origin(t)
    }

    fn daily_phase(&self, hour: f64) -> f64 {
        (2.0 * std::f64::consts::PI * (hour - self.air_peak_hour) / 24.0).cos()
    }

    pub fn air_temp_c(&self, t: DateTime<Utc>) -> f64 {
        self.trend_c(t) + self.air_daily_amplitude_c * self.daily_phase(self.local_hour(t))
    }

    /// Soil temperature at sensor depth: damped, lagged copy of the air cycle.
    pub fn soil_temp_c(&self, t: DateTime<Utc>) -> f64 {
        let hour = self.local_hour(t) - self.soil_lag_h;
        self.trend_c(t) + self.soil_offset_c + self.soil_damping * self.air_daily_amplitude_c * self.daily_phase(hour)
    }

    /// Soil water tension. Each rain event instantly pulls tension toward
    /// the wet asymptote; between events it relaxes exponentially toward
    /// the dry asymptote.
    pub fn soil_moisture_kpa(&self, t: DateTime<Utc>) -> f64 {
        let mut psi = self.moisture_initial_kpa;
        let mut at = self.origin;
        let mut tau_h = self.drying_tau_h;
        for ev in self.rain.iter().take_while(|r| r.at <= t) {
            if ev.at > at {
                psi = self.dry(psi, ev.at - at, tau_h);
                at = ev.at;
            }
            psi = self.moisture_wet_kpa + (psi - self.moisture_wet_kpa) * (-self.wetting_per_mm * ev.mm).exp();
            tau_h = self.drying_tau_h + self.drying_tau_per_mm_h * ev.mm;
        }
        if t > at {
            psi = self.dry(psi, t - at, tau_h);
        }
        psi
    }

    fn dry(&self, psi: f64, dt: chrono::TimeDelta, tau_h: f64) -> f64 {
        let hours = dt.num_milliseconds() as f64 / 3.6e6;
        self.moisture_dry_kpa - (self.moisture_dry_kpa - psi) * (-hours / tau_h).exp()
    }

    /// Photo channel count: half-sine between sunrise and sunset.
    pub fn photo_count(&self, t: DateTime<Utc>) -> f64 {
        let h = self.local_hour(t);
        if h <= self.sunrise_h || h >= self.sunset_h {
            return self.photo_night_count;
        }
        let x = (h - self.sunrise_h) / (self.sunset_h - self.sunrise_h);
        self.photo_night_count + (self.photo_peak_count - self.photo_night_count) * (std::f64::consts::PI * x).sin()
    }

    /// Total rain in `[from, to)`.
    pub fn rain_between(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
        self.rain
            .iter()
            .filter(|r| r.at >= from && r.at < to)
            .fold(0.0, |acc, r| acc + r.mm)
    }
}

/// Reads a `[rain]` section with keys `at` (RFC 3339 UTC) and `mm`.
pub fn rain_from_section(section: &Section) -> Result<RainEvent, EnvError> {
    section.check_keys(&["at", "mm"])?;
    let at_entry = section.require("at")?;
    let at = parse_utc(&at_entry.value).map_err(|m| section.invalid("at", m))?;
    let mm: f64 = section.parse("mm")?;
    if mm < 0.0 {
        return Err(section.invalid("mm", "rain depth must be non-negative").into());
    }
    Ok(RainEvent { at, mm })
}

pub(crate) fn parse_utc(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|d| d.with_timezone(&Utc))
        .map_err(|e| format!("expected an RFC 3339 timestamp: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn jan(day: u32, hour: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2006, 1, day, hour, 0, 0).unwrap()
    }

    #[test]
    fn air_cycle_peaks_at_configured_hour() {
        let env = EnvironmentModel {
            air_mean_c: 2.0,
            air_daily_amplitude_c: 4.0,
            ..Default::default()
        };
        assert!((env.air_temp_c(jan(5, 15)) - 6.0).abs() < 1e-12);
        assert!((env.air_temp_c(jan(5, 3)) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn soil_is_damped_and_lagged() {
        let env = EnvironmentModel {
            air_mean_c: 0.0,
            air_daily_amplitude_c: 10.0,
            soil_damping: 0.3,
            soil_lag_h: 4.0,
            soil_offset_c: 2.0,
            ..Default::default()
        };
        assert!((env.soil_temp_c(jan(5, 19)) - 5.0).abs() < 1e-12);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for m in 0..1440 {
            let v = env.soil_temp_c(jan(5, 0) + Duration::minutes(m));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!((hi - lo - 6.0).abs() < 1e-3);
    }

    #[test]
    fn rain_wets_quickly_and_dries_slowly() {
        let mut env = EnvironmentModel {
            origin: jan(1, 0),
            moisture_initial_kpa: 100.0,
            ..Default::default()
        };
        env.add_rain(RainEvent {
            at: jan(10, 12),
            mm: 18.0,
        });
        let before = env.soil_moisture_kpa(jan(10, 11));
        let after = env.soil_moisture_kpa(jan(10, 12));
        let day_later = env.soil_moisture_kpa(jan(11, 12));
        assert!(after < before * 0.2);
        assert!(day_later > after);
        assert!(day_later < before);
        let just_before = env.soil_moisture_kpa(jan(10, 12) - Duration::milliseconds(1));
        let expect = 8.0 + (just_before - 8.0) * (-0.15f64 * 18.0).exp();
        assert!((expect - after).abs() < 1e-6);
    }

    #[test]
    fn moisture_stays_between_asymptotes() {
        let mut env = EnvironmentModel {
            origin: jan(1, 0),
            ..Default::default()
        };
        for d in [3, 4, 9, 20] {
            env.add_rain(RainEvent {
                at: jan(d, 6),
                mm: 10.0,
            });
        }
        for h in 0..(30 * 24) {
            let v = env.soil_moisture_kpa(jan(1, 0) + Duration::hours(h));
            assert!((8.0..=150.0).contains(&v));
        }
    }

    #[test]
    fn photo_is_dark_at_night() {
        let env = EnvironmentModel::default();
        assert_eq!(env.photo_count(jan(3, 2)), 5.0);
        assert!((env.photo_count(jan(3, 12)) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        let bad = EnvironmentModel {
            drying_tau_h: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EnvironmentModel {
            air_daily_amplitude_c: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(EnvironmentModel::default().validate().is_ok());
    }

    #[test]
    fn parses_section() {
        let doc = crate::config::Document::parse(
            "[environment]\norigin = 2006-01-05T00:00:00Z\nair_mean_c = -1.5\n[rain]\nat = 2006-01-18T06:00:00Z\nmm = 18\n",
        )
        .unwrap();
        let env = EnvironmentModel::from_section(&doc.sections[0]).unwrap();
        assert_eq!(env.air_mean_c, -1.5);
        assert_eq!(env.origin, jan(5, 0));
        let rain = rain_from_section(&doc.sections[1]).unwrap();
        assert_eq!(rain.mm, 18.0);
    }
}
