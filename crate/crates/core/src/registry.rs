//! Deployment metadata: the site → patch → mote → sensor hierarchy, sensor
//! calibration constants and the experiment event log.
//!
//! A registry is loaded once from a site-config file (see [`crate::config`])
//! and is immutable afterwards, except for the append-only event log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Document, Section};
use crate::pipeline::convert::{ThermistorCoeffs, WatermarkCoeffs};

pub type MoteId = u32;

/// Mean Earth radius used by the local equirectangular projection.
const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Highest ADC channel index on the mote.
pub const MAX_ADC_CHANNEL: u8 = 6;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("line {line}: duplicate {what} identifier `{id}`")]
    Duplicate {
        line: usize,
        what: &'static str,
        id: String,
    },
    #[error("line {line}: {what} `{id}` does not resolve")]
    Dangling {
        line: usize,
        what: &'static str,
        id: String,
    },
    #[error("line {line}: {message}")]
    Constraint { line: usize, message: String },
    #[error("unknown sensor `{0}`")]
    UnknownSensor(String),
    #[error("event scope {0} does not resolve")]
    DanglingScope(EventScope),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl RegistryError {
    /// Line of the offending config entry, when the error came from a file.
    pub fn line(&self) -> Option<usize> {
        match self {
            RegistryError::Config(e) => Some(e.line()),
            RegistryError::Duplicate { line, .. }
            | RegistryError::Dangling { line, .. }
            | RegistryError::Constraint { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub site_id: String,
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub patch_id: String,
    pub site_id: String,
    /// (latitude, longitude) of the patch origin, degrees.
    pub reference_coords: (f64, f64),
    /// (width east, height north) in meters.
    pub extent_m: (f64, f64),
    pub land_cover: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mote {
    pub mote_id: MoteId,
    pub patch_id: String,
    /// (east, north) meters from the patch reference.
    pub offset_m: (f64, f64),
    pub mote_type: String,
    pub deploy_date: NaiveDate,
}

/// The five channels every mote samples, in sample-record order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorType {
    SoilTemperature,
    SoilMoisture,
    BoxTemperature,
    Photo,
    BatteryVoltage,
}

impl SensorType {
    pub const ALL: [SensorType; 5] = [
        SensorType::SoilTemperature,
        SensorType::SoilMoisture,
        SensorType::BoxTemperature,
        SensorType::Photo,
        SensorType::BatteryVoltage,
    ];

    /// Stated precision used when a sensor section gives none.
    pub fn default_precision(self) -> f64 {
        match self {
            SensorType::SoilTemperature | SensorType::BoxTemperature => 0.5,
            _ => 0.0,
        }
    }

    /// Index of this channel inside a sample record.
    pub fn reading_slot(self) -> usize {
        match self {
            SensorType::SoilTemperature => 0,
            SensorType::SoilMoisture => 1,
            SensorType::BoxTemperature => 2,
            SensorType::Photo => 3,
            SensorType::BatteryVoltage => 4,
        }
    }

    pub fn unit(self) -> Unit {
        match self {
            SensorType::SoilTemperature | SensorType::BoxTemperature => Unit::Celsius,
            SensorType::SoilMoisture => Unit::Kilopascal,
            SensorType::Photo => Unit::RawCount,
            SensorType::BatteryVoltage => Unit::Volt,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SensorType::SoilTemperature => "soil_temperature",
            SensorType::SoilMoisture => "soil_moisture",
            SensorType::BoxTemperature => "box_temperature",
            SensorType::Photo => "photo",
            SensorType::BatteryVoltage => "battery_voltage",
        }
    }
}

impl fmt::Display for SensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown sensor type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Celsius,
    Kilopascal,
    Volt,
    RawCount,
}

impl Unit {
    pub fn symbol(self) -> &'static str {
        match self {
            Unit::Celsius => "degC",
            Unit::Kilopascal => "kPa",
            Unit::Volt => "V",
            Unit::RawCount => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConstants {
    /// Nominal divider resistor between supply and the ADC pin.
    pub reference_resistor_ohms: f64,
    /// Per-mote measured deviation of the divider resistor from nominal.
    pub reference_bias_ohms: f64,
    pub thermistor_coeffs: Option<ThermistorCoeffs>,
    pub watermark_coeffs: Option<WatermarkCoeffs>,
    /// Voltage that maps to a full-scale count on non-ratiometric channels
    /// (battery monitor).
    pub adc_full_scale_v: f64,
    /// Soil temperature range over which the moisture regression is valid.
    pub moisture_temp_range_c: (f64, f64),
}

impl Default for CalibrationConstants {
    fn default() -> Self {
        Self {
            reference_resistor_ohms: 10_000.0,
            reference_bias_ohms: 0.0,
            thermistor_coeffs: None,
            watermark_coeffs: None,
            adc_full_scale_v: 3.3,
            moisture_temp_range_c: (0.0, 35.0),
        }
    }
}

impl CalibrationConstants {
    /// Actual divider resistance: nominal plus measured bias.
    pub fn divider_ohms(&self) -> f64 {
        self.reference_resistor_ohms + self.reference_bias_ohms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub sensor_id: String,
    pub mote_id: MoteId,
    pub sensor_type: SensorType,
    /// Negative values are above the surface.
    pub depth_cm: i32,
    pub adc_channel: u8,
    pub calibration: CalibrationConstants,
    /// Standard error of a calibrated value, in output units.
    pub precision: f64,
    pub manufacturer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventScope {
    Global,
    Site(String),
    Patch(String),
    Mote(MoteId),
}

impl fmt::Display for EventScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventScope::Global => write!(f, "global"),
            EventScope::Site(id) => write!(f, "site:{id}"),
            EventScope::Patch(id) => write!(f, "patch:{id}"),
            EventScope::Mote(id) => write!(f, "mote:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub timestamp: DateTime<Utc>,
    pub scope: EventScope,
    pub kind: String,
    pub note: String,
}

/// Where a sensor is, resolved through its mote and patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLocation {
    pub site_id: String,
    pub patch_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub depth_cm: i32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registry {
    sites: BTreeMap<String, Site>,
    patches: BTreeMap<String, Patch>,
    motes: BTreeMap<MoteId, Mote>,
    sensors: BTreeMap<String, Sensor>,
    events: Vec<Event>,
}

/// Loads and validates a site-config file. Any violation rejects the whole
/// file.
pub fn load_site_config(path: impl AsRef<Path>) -> Result<Registry, RegistryError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.parse()
}

impl FromStr for Registry {
    type Err = RegistryError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let doc = Document::parse(text)?;
        Registry::from_document(&doc)
    }
}

const SITE_KEYS: &[&str] = &["site_id", "name", "latitude", "longitude", "description"];
const PATCH_KEYS: &[&str] = &["patch_id", "site_id", "reference_coords", "extent_m", "land_cover"];
const MOTE_KEYS: &[&str] = &["mote_id", "patch_id", "offset_m", "mote_type", "deploy_date"];
const SENSOR_KEYS: &[&str] = &[
    "sensor_id",
    "mote_id",
    "sensor_type",
    "depth_cm",
    "adc_channel",
    "precision",
    "manufacturer",
    "reference_resistor_ohms",
    "reference_bias_ohms",
    "thermistor_coeffs",
    "watermark_coeffs",
    "adc_full_scale_v",
    "moisture_temp_range_c",
];
const EVENT_KEYS: &[&str] = &["timestamp", "scope", "scope_id", "kind", "note"];

impl Registry {
    pub fn from_document(doc: &Document) -> Result<Self, RegistryError> {
        let mut reg = Registry::default();
        for section in &doc.sections {
            match section.name.as_str() {
                "site" | "patch" | "mote" | "sensor" | "event" => {}
                other => {
                    return Err(ConfigError::Syntax {
                        line: section.line,
                        message: format!("unexpected section [{other}]"),
                    }
                    .into())
                }
            }
        }

        for s in doc.sections_named("site") {
            s.check_keys(SITE_KEYS)?;
            let site = Site {
                site_id: s.text("site_id")?,
                name: s.text_or("name", ""),
                latitude: s.parse("latitude")?,
                longitude: s.parse("longitude")?,
                description: s.text_or("description", ""),
            };
            insert_unique(&mut reg.sites, site.site_id.clone(), site, s, "site")?;
        }

        for s in doc.sections_named("patch") {
            s.check_keys(PATCH_KEYS)?;
            let [lat, lon] = s.parse_tuple::<2>("reference_coords")?;
            let [w, h] = s.parse_tuple::<2>("extent_m")?;
            let patch = Patch {
                patch_id: s.text("patch_id")?,
                site_id: s.text("site_id")?,
                reference_coords: (lat, lon),
                extent_m: (w, h),
                land_cover: s.text_or("land_cover", "unknown"),
            };
            if !reg.sites.contains_key(&patch.site_id) {
                return Err(dangling(s, "site_id", "site", &patch.site_id));
            }
            if !(w > 0.0 && h > 0.0) {
                return Err(s.invalid("extent_m", "extent must be strictly positive").into());
            }
            insert_unique(&mut reg.patches, patch.patch_id.clone(), patch, s, "patch")?;
        }

        for s in doc.sections_named("mote") {
            s.check_keys(MOTE_KEYS)?;
            let [x, y] = s.parse_tuple::<2>("offset_m")?;
            let deploy = s.text("deploy_date")?;
            let deploy_date = NaiveDate::parse_from_str(&deploy, "%Y-%m-%d")
                .map_err(|e| s.invalid("deploy_date", format!("`{deploy}`: {e}")))?;
            let mote = Mote {
                mote_id: s.parse("mote_id")?,
                patch_id: s.text("patch_id")?,
                offset_m: (x, y),
                mote_type: s.text_or("mote_type", "micaz"),
                deploy_date,
            };
            let Some(patch) = reg.patches.get(&mote.patch_id) else {
                return Err(dangling(s, "patch_id", "patch", &mote.patch_id));
            };
            let (w, h) = patch.extent_m;
            if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
                return Err(s
                    .invalid("offset_m", format!("offset ({x}, {y}) outside patch extent ({w}, {h})"))
                    .into());
            }
            insert_unique(&mut reg.motes, mote.mote_id, mote, s, "mote")?;
        }

        let mut channels: BTreeSet<(MoteId, u8)> = BTreeSet::new();
        let mut types: BTreeSet<(MoteId, SensorType)> = BTreeSet::new();
        for s in doc.sections_named("sensor") {
            s.check_keys(SENSOR_KEYS)?;
            let sensor = parse_sensor(s)?;
            if !reg.motes.contains_key(&sensor.mote_id) {
                return Err(dangling(s, "mote_id", "mote", &sensor.mote_id.to_string()));
            }
            if !channels.insert((sensor.mote_id, sensor.adc_channel)) {
                return Err(RegistryError::Duplicate {
                    line: s.get("adc_channel").map_or(s.line, |e| e.line),
                    what: "adc channel",
                    id: format!("{}:{}", sensor.mote_id, sensor.adc_channel),
                });
            }
            if !types.insert((sensor.mote_id, sensor.sensor_type)) {
                return Err(RegistryError::Duplicate {
                    line: s.get("sensor_type").map_or(s.line, |e| e.line),
                    what: "sensor type on mote",
                    id: format!("{}:{}", sensor.mote_id, sensor.sensor_type),
                });
            }
            insert_unique(&mut reg.sensors, sensor.sensor_id.clone(), sensor, s, "sensor")?;
        }

        for s in doc.sections_named("event") {
            s.check_keys(EVENT_KEYS)?;
            let ts = s.text("timestamp")?;
            let timestamp = DateTime::parse_from_rfc3339(&ts)
                .map_err(|e| s.invalid("timestamp", format!("`{ts}`: {e}")))?
                .with_timezone(&Utc);
            let scope = parse_scope(s)?;
            let event = Event {
                timestamp,
                scope,
                kind: s.text("kind")?,
                note: s.text_or("note", ""),
            };
            reg.record_event(event).map_err(|e| match e {
                RegistryError::DanglingScope(scope) => RegistryError::Dangling {
                    line: s.get("scope_id").map_or(s.line, |e| e.line),
                    what: "event scope",
                    id: scope.to_string(),
                },
                other => other,
            })?;
        }

        if reg.sites.is_empty() {
            return Err(RegistryError::Constraint {
                line: 1,
                message: "configuration declares no [site]".into(),
            });
        }
        Ok(reg)
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.sites.values()
    }

    pub fn patches(&self) -> impl Iterator<Item = &Patch> {
        self.patches.values()
    }

    pub fn motes(&self) -> impl Iterator<Item = &Mote> {
        self.motes.values()
    }

    pub fn sensors(&self) -> impl Iterator<Item = &Sensor> {
        self.sensors.values()
    }

    pub fn site(&self, id: &str) -> Option<&Site> {
        self.sites.get(id)
    }

    pub fn patch(&self, id: &str) -> Option<&Patch> {
        self.patches.get(id)
    }

    pub fn mote(&self, id: MoteId) -> Option<&Mote> {
        self.motes.get(&id)
    }

    pub fn sensor(&self, id: &str) -> Option<&Sensor> {
        self.sensors.get(id)
    }

    pub fn sensors_on(&self, mote_id: MoteId) -> impl Iterator<Item = &Sensor> {
        self.sensors.values().filter(move |s| s.mote_id == mote_id)
    }

    pub fn sensor_of_type(&self, mote_id: MoteId, sensor_type: SensorType) -> Option<&Sensor> {
        self.sensors_on(mote_id).find(|s| s.sensor_type == sensor_type)
    }

    pub fn patch_of_mote(&self, mote_id: MoteId) -> Option<&Patch> {
        self.motes.get(&mote_id).and_then(|m| self.patches.get(&m.patch_id))
    }

    /// Absolute position of a sensor: the patch reference displaced by the
    /// mote offset (x east, y north) under a local equirectangular
    /// approximation.
    pub fn locate_sensor(&self, sensor_id: &str) -> Result<SensorLocation, RegistryError> {
        let sensor = self
            .sensors
            .get(sensor_id)
            .ok_or_else(|| RegistryError::UnknownSensor(sensor_id.to_string()))?;
        // Foreign keys were checked at load time.
        let mote = &self.motes[&sensor.mote_id];
        let patch = &self.patches[&mote.patch_id];
        let (lat0, lon0) = patch.reference_coords;
        let (east, north) = mote.offset_m;
        let dlat = (north / EARTH_RADIUS_M).to_degrees();
        let dlon = (east / (EARTH_RADIUS_M * lat0.to_radians().cos())).to_degrees();
        Ok(SensorLocation {
            site_id: patch.site_id.clone(),
            patch_id: patch.patch_id.clone(),
            latitude: lat0 + dlat,
            longitude: lon0 + dlon,
            depth_cm: sensor.depth_cm,
        })
    }

    pub fn scope_resolves(&self, scope: &EventScope) -> bool {
        match scope {
            EventScope::Global => true,
            EventScope::Site(id) => self.sites.contains_key(id),
            EventScope::Patch(id) => self.patches.contains_key(id),
            EventScope::Mote(id) => self.motes.contains_key(id),
        }
    }

    /// Appends to the event log, kept ordered by timestamp (stable for equal
    /// timestamps).
    pub fn record_event(&mut self, event: Event) -> Result<(), RegistryError> {
        if !self.scope_resolves(&event.scope) {
            return Err(RegistryError::DanglingScope(event.scope));
        }
        let pos = self.events.partition_point(|e| e.timestamp <= event.timestamp);
        self.events.insert(pos, event);
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events with exactly this scope whose timestamp lies in `[from, to)`.
    pub fn events_in<'a>(
        &'a self,
        scope: &'a EventScope,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    ) -> impl Iterator<Item = &'a Event> + 'a {
        self.events
            .iter()
            .filter(move |e| &e.scope == scope && e.timestamp >= from && e.timestamp < to)
    }
}

fn insert_unique<K: Ord + fmt::Display, V>(
    map: &mut BTreeMap<K, V>,
    key: K,
    value: V,
    section: &Section,
    what: &'static str,
) -> Result<(), RegistryError> {
    if map.contains_key(&key) {
        let id_key = format!("{what}_id");
        return Err(RegistryError::Duplicate {
            line: section.get(&id_key).map_or(section.line, |e| e.line),
            what,
            id: key.to_string(),
        });
    }
    map.insert(key, value);
    Ok(())
}

fn dangling(section: &Section, key: &str, what: &'static str, id: &str) -> RegistryError {
    RegistryError::Dangling {
        line: section.get(key).map_or(section.line, |e| e.line),
        what,
        id: id.to_string(),
    }
}

fn parse_sensor(s: &Section) -> Result<Sensor, RegistryError> {
    let sensor_type: SensorType = s.parse("sensor_type")?;
    let adc_channel: u8 = s.parse("adc_channel")?;
    if adc_channel > MAX_ADC_CHANNEL {
        return Err(s
            .invalid(
                "adc_channel",
                format!("channel {adc_channel} outside 0..={MAX_ADC_CHANNEL}"),
            )
            .into());
    }
    let defaults = CalibrationConstants::default();
    let reference_resistor_ohms = s.parse_or("reference_resistor_ohms", defaults.reference_resistor_ohms)?;
    if !(reference_resistor_ohms > 0.0) {
        return Err(s
            .invalid("reference_resistor_ohms", "reference resistor must be positive")
            .into());
    }
    let thermistor_coeffs = s
        .parse_tuple_opt::<3>("thermistor_coeffs")?
        .map(|[a, b, c]| ThermistorCoeffs { a, b, c });
    let watermark_coeffs = s
        .parse_tuple_opt::<4>("watermark_coeffs")?
        .map(|c| WatermarkCoeffs { c });
    let range = s
        .parse_tuple_opt::<2>("moisture_temp_range_c")?
        .map(|[lo, hi]| (lo, hi))
        .unwrap_or(defaults.moisture_temp_range_c);
    if range.0 > range.1 {
        return Err(s
            .invalid("moisture_temp_range_c", "range lower bound exceeds upper bound")
            .into());
    }
    let calibration = CalibrationConstants {
        reference_resistor_ohms,
        reference_bias_ohms: s.parse_or("reference_bias_ohms", 0.0)?,
        thermistor_coeffs,
        watermark_coeffs,
        adc_full_scale_v: s.parse_or("adc_full_scale_v", defaults.adc_full_scale_v)?,
        moisture_temp_range_c: range,
    };
    if !(calibration.divider_ohms() > 0.0) {
        return Err(s
            .invalid("reference_bias_ohms", "bias leaves a nonpositive divider resistance")
            .into());
    }
    let precision: f64 = s.parse_or("precision", sensor_type.default_precision())?;
    if !(precision >= 0.0) {
        return Err(s.invalid("precision", "precision must be nonnegative").into());
    }
    Ok(Sensor {
        sensor_id: s.text("sensor_id")?,
        mote_id: s.parse("mote_id")?,
        sensor_type,
        depth_cm: s.parse_or("depth_cm", 0)?,
        adc_channel,
        calibration,
        precision,
        manufacturer: s.text_or("manufacturer", ""),
    })
}

fn parse_scope(s: &Section) -> Result<EventScope, RegistryError> {
    let kind = s.text("scope")?;
    let id = s.get("scope_id").map(|e| e.value.clone());
    let scope = match (kind.as_str(), id) {
        ("global", None) => EventScope::Global,
        ("global", Some(_)) => return Err(s.invalid("scope_id", "global events carry no identifier").into()),
        ("site", Some(id)) => EventScope::Site(id),
        ("patch", Some(id)) => EventScope::Patch(id),
        ("mote", Some(id)) => EventScope::Mote(id.parse().map_err(|e| s.invalid("scope_id", format!("`{id}`: {e}")))?),
        ("site" | "patch" | "mote", None) => {
            return Err(ConfigError::MissingKey {
                line: s.line,
                section: s.name.clone(),
                key: "scope_id".into(),
            }
            .into())
        }
        (other, _) => return Err(s.invalid("scope", format!("unknown scope `{other}`")).into()),
    };
    Ok(scope)
}
