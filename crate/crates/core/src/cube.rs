//! Dimensional model over gridded data series and daily weather.
//!
//! Facts are data-series cells keyed by time (year, season, ISO week, date,
//! hour, ten-minute slot) and location (site, patch, mote, sensor plus
//! depth, land cover and manufacturer attributes). Weather facts are one
//! row per site per day. All times are UTC.
//!
//! Aggregates over cells are count-weighted: a cell holding `n` values
//! with mean `m` contributes `n` copies of `m` to the median, and the
//! standard deviation is pooled from the cells' own deviations so it
//! equals the deviation of the underlying values. Interpolated cells are
//! excluded unless a query asks for them, in which case each counts as
//! one value.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::pipeline::store::{DataSeriesCell, Store, WeatherDay};
use crate::registry::{MoteId, Registry, SensorType};

/// Grain the cube is built at.
pub const CUBE_STEP_S: u32 = 600;

#[derive(Debug, Error, PartialEq)]
pub enum CubeError {
    #[error("cells mix time steps {0} s and {1} s")]
    MixedSteps(u32, u32),
    #[error("cells at {0} s cannot be placed in ten-minute slots")]
    Step(u32),
    #[error("sensor {0} is not in the registry")]
    UnknownSensor(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("cannot parse `{0}`")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    /// Meteorological season and the year it is filed under; December
    /// belongs to the following year's winter.
    pub fn of(date: NaiveDate) -> (i32, Season) {
        let season = match date.month() {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Autumn,
        };
        let year = if date.month() == 12 {
            date.year() + 1
        } else {
            date.year()
        };
        (year, season)
    }

    pub fn code(self) -> &'static str {
        match self {
            Season::Winter => "DJF",
            Season::Spring => "MAM",
            Season::Summer => "JJA",
            Season::Autumn => "SON",
        }
    }
}

impl FromStr for Season {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DJF" | "WINTER" => Ok(Season::Winter),
            "MAM" | "SPRING" => Ok(Season::Spring),
            "JJA" | "SUMMER" => Ok(Season::Summer),
            "SON" | "AUTUMN" => Ok(Season::Autumn),
            _ => Err(CubeError::Parse(s.into())),
        }
    }
}

/// Every time-dimension attribute of one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeKey {
    pub year: i32,
    pub season: (i32, Season),
    pub iso_week: (i32, u32),
    pub date: NaiveDate,
    pub hour: u32,
    /// Ten-minute slot within the hour, 0..6.
    pub ten_minute_slot: u32,
}

impl TimeKey {
    pub fn of(t: DateTime<Utc>) -> Self {
        let date = t.date_naive();
        let w = date.iso_week();
        Self {
            year: date.year(),
            season: Season::of(date),
            iso_week: (w.year(), w.week()),
            date,
            hour: t.hour(),
            ten_minute_slot: t.minute() / 10,
        }
    }

    pub fn bucket(&self, level: TimeLevel) -> TimeBucket {
        match level {
            TimeLevel::All => TimeBucket::All,
            TimeLevel::Year => TimeBucket::Year(self.year),
            TimeLevel::Season => TimeBucket::Season(self.season.0, self.season.1),
            TimeLevel::Week => TimeBucket::Week(self.iso_week.0, self.iso_week.1),
            TimeLevel::Date => TimeBucket::Date(self.date),
            TimeLevel::Hour => TimeBucket::Hour(self.date, self.hour),
            TimeLevel::TenMinute => TimeBucket::TenMinute(self.date, self.hour, self.ten_minute_slot),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeLevel {
    All,
    Year,
    Season,
    Week,
    Date,
    Hour,
    TenMinute,
}

impl TimeLevel {
    pub const ALL: [TimeLevel; 7] = [
        TimeLevel::All,
        TimeLevel::Year,
        TimeLevel::Season,
        TimeLevel::Week,
        TimeLevel::Date,
        TimeLevel::Hour,
        TimeLevel::TenMinute,
    ];

    fn below_day(self) -> bool {
        matches!(self, TimeLevel::Hour | TimeLevel::TenMinute)
    }
}

impl FromStr for TimeLevel {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all" => TimeLevel::All,
            "year" => TimeLevel::Year,
            "season" => TimeLevel::Season,
            "week" => TimeLevel::Week,
            "date" | "day" => TimeLevel::Date,
            "hour" => TimeLevel::Hour,
            "ten_minute" | "10min" => TimeLevel::TenMinute,
            _ => return Err(CubeError::Parse(s.into())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimeBucket {
    All,
    Year(i32),
    Season(i32, Season),
    Week(i32, u32),
    Date(NaiveDate),
    Hour(NaiveDate, u32),
    TenMinute(NaiveDate, u32, u32),
}

impl TimeBucket {
    /// First instant covered by the bucket; `None` for the whole-time bucket.
    pub fn start(&self) -> Option<DateTime<Utc>> {
        let day = |d: NaiveDate| d.and_hms_opt(0, 0, 0).map(|t| t.and_utc());
        match *self {
            TimeBucket::All => None,
            TimeBucket::Year(y) => NaiveDate::from_ymd_opt(y, 1, 1).and_then(day),
            TimeBucket::Season(y, s) => {
                let (yy, m) = match s {
                    Season::Winter => (y - 1, 12),
                    Season::Spring => (y, 3),
                    Season::Summer => (y, 6),
                    Season::Autumn => (y, 9),
                };
                NaiveDate::from_ymd_opt(yy, m, 1).and_then(day)
            }
            TimeBucket::Week(y, w) => NaiveDate::from_isoywd_opt(y, w, chrono::Weekday::Mon).and_then(day),
            TimeBucket::Date(d) => day(d),
            TimeBucket::Hour(d, h) => d.and_hms_opt(h, 0, 0).map(|t| t.and_utc()),
            TimeBucket::TenMinute(d, h, s) => d.and_hms_opt(h, s * 10, 0).map(|t| t.and_utc()),
        }
    }
}

impl fmt::Display for TimeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeBucket::All => f.write_str("all"),
            TimeBucket::Year(y) => write!(f, "{y}"),
            TimeBucket::Season(y, s) => write!(f, "{y}-{}", s.code()),
            TimeBucket::Week(y, w) => write!(f, "{y}-W{w:02}"),
            TimeBucket::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            TimeBucket::Hour(d, h) => write!(f, "{}T{h:02}", d.format("%Y-%m-%d")),
            TimeBucket::TenMinute(d, h, s) => write!(f, "{}T{h:02}:{:02}", d.format("%Y-%m-%d"), s * 10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LocationLevel {
    All,
    Site,
    Patch,
    Mote,
    Sensor,
    Depth,
    LandCover,
}

impl LocationLevel {
    pub const ALL: [LocationLevel; 7] = [
        LocationLevel::All,
        LocationLevel::Site,
        LocationLevel::Patch,
        LocationLevel::Mote,
        LocationLevel::Sensor,
        LocationLevel::Depth,
        LocationLevel::LandCover,
    ];
}

impl FromStr for LocationLevel {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "all" => LocationLevel::All,
            "site" => LocationLevel::Site,
            "patch" => LocationLevel::Patch,
            "mote" => LocationLevel::Mote,
            "sensor" => LocationLevel::Sensor,
            "depth" => LocationLevel::Depth,
            "land_cover" => LocationLevel::LandCover,
            _ => return Err(CubeError::Parse(s.into())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LocationBucket {
    All,
    Site(String),
    Patch(String),
    Mote(MoteId),
    Sensor(String),
    Depth(i32),
    LandCover(String),
}

impl fmt::Display for LocationBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocationBucket::All => f.write_str("all"),
            LocationBucket::Site(s) | LocationBucket::Patch(s) | LocationBucket::Sensor(s) => f.write_str(s),
            LocationBucket::LandCover(s) => f.write_str(s),
            LocationBucket::Mote(m) => write!(f, "{m}"),
            LocationBucket::Depth(d) => write!(f, "{d}cm"),
        }
    }
}

/// Location attributes of one sensor, or of a site for weather facts.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationKey {
    pub site_id: String,
    pub patch_id: Option<String>,
    pub mote_id: Option<MoteId>,
    pub sensor_id: Option<String>,
    pub sensor_type: Option<SensorType>,
    pub depth_cm: Option<i32>,
    pub land_cover: Option<String>,
    pub manufacturer: Option<String>,
}

impl LocationKey {
    fn bucket(&self, level: LocationLevel) -> LocationBucket {
        const SITE_ONLY: &str = "validated: weather facts roll up to site at most";
        match level {
            LocationLevel::All => LocationBucket::All,
            LocationLevel::Site => LocationBucket::Site(self.site_id.clone()),
            LocationLevel::Patch => LocationBucket::Patch(self.patch_id.clone().expect(SITE_ONLY)),
            LocationLevel::Mote => LocationBucket::Mote(self.mote_id.expect(SITE_ONLY)),
            LocationLevel::Sensor => LocationBucket::Sensor(self.sensor_id.clone().expect(SITE_ONLY)),
            LocationLevel::Depth => LocationBucket::Depth(self.depth_cm.expect(SITE_ONLY)),
            LocationLevel::LandCover => LocationBucket::LandCover(self.land_cover.clone().expect(SITE_ONLY)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CyclicGroup {
    HourOfDay,
    WeekOfYear,
}

impl CyclicGroup {
    fn position(self, key: &TimeKey) -> u32 {
        match self {
            CyclicGroup::HourOfDay => key.hour,
            CyclicGroup::WeekOfYear => key.iso_week.1,
        }
    }
}

impl FromStr for CyclicGroup {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hour_of_day" => Ok(CyclicGroup::HourOfDay),
            "week_of_year" => Ok(CyclicGroup::WeekOfYear),
            _ => Err(CubeError::Parse(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Aggregate {
    Average,
    Min,
    Max,
    Median,
    Stddev,
    Count,
}

impl Aggregate {
    pub const ALL: [Aggregate; 6] = [
        Aggregate::Average,
        Aggregate::Min,
        Aggregate::Max,
        Aggregate::Median,
        Aggregate::Stddev,
        Aggregate::Count,
    ];
}

impl FromStr for Aggregate {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "average" | "avg" | "mean" => Aggregate::Average,
            "min" => Aggregate::Min,
            "max" => Aggregate::Max,
            "median" => Aggregate::Median,
            "stddev" => Aggregate::Stddev,
            "count" => Aggregate::Count,
            _ => return Err(CubeError::Parse(s.into())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WeatherField {
    TminC,
    TmaxC,
    TavgC,
    PrecipitationMm,
    HumidityPct,
    PressureHpa,
}

impl WeatherField {
    pub const ALL: [WeatherField; 6] = [
        WeatherField::TminC,
        WeatherField::TmaxC,
        WeatherField::TavgC,
        WeatherField::PrecipitationMm,
        WeatherField::HumidityPct,
        WeatherField::PressureHpa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherField::TminC => "tmin_c",
            WeatherField::TmaxC => "tmax_c",
            WeatherField::TavgC => "tavg_c",
            WeatherField::PrecipitationMm => "precipitation_mm",
            WeatherField::HumidityPct => "humidity_pct",
            WeatherField::PressureHpa => "pressure_hpa",
        }
    }

    fn read(self, d: &WeatherDay) -> f64 {
        match self {
            WeatherField::TminC => d.tmin_c,
            WeatherField::TmaxC => d.tmax_c,
            WeatherField::TavgC => d.tavg_c,
            WeatherField::PrecipitationMm => d.precipitation_mm,
            WeatherField::HumidityPct => d.humidity_pct,
            WeatherField::PressureHpa => d.pressure_hpa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Measure {
    Sensor(SensorType),
    Weather(WeatherField),
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::Sensor(t) => f.write_str(t.as_str()),
            Measure::Weather(w) => f.write_str(w.as_str()),
        }
    }
}

impl FromStr for Measure {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(t) = s.parse::<SensorType>() {
            return Ok(Measure::Sensor(t));
        }
        let field = s.strip_prefix("weather.").unwrap_or(s);
        WeatherField::ALL
            .into_iter()
            .find(|w| w.as_str() == field)
            .map(Measure::Weather)
            .ok_or_else(|| CubeError::Parse(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Filter {
    Site(String),
    Patch(String),
    Mote(MoteId),
    Sensor(String),
    LandCover(String),
    Manufacturer(String),
    /// Inclusive depth range in cm.
    Depth {
        min_cm: i32,
        max_cm: i32,
    },
    /// Half-open `[start, end)` on the fact's start time.
    Time {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    Year(i32),
    Season(Season),
    /// Inclusive hour-of-day range.
    HourOfDay {
        from: u32,
        to: u32,
    },
}

impl Filter {
    /// Parses `key=value`: `site`, `patch`, `mote`, `sensor`, `land_cover`,
    /// `manufacturer`, `year`, `season`, and ranges `depth=A..B`,
    /// `hour=A..B`, `time=START..END` (RFC 3339).
    pub fn parse(s: &str) -> Result<Self, CubeError> {
        let err = || CubeError::Parse(s.into());
        let (k, v) = s.split_once('=').ok_or_else(err)?;
        let range = || v.split_once("..").ok_or_else(err);
        let num = |x: &str| x.trim().parse::<i64>().map_err(|_| err());
        let time = |x: &str| {
            DateTime::parse_from_rfc3339(x.trim())
                .map(|t| t.with_timezone(&Utc))
                .map_err(|_| err())
        };
        Ok(match k.trim() {
            "site" => Filter::Site(v.into()),
            "patch" => Filter::Patch(v.into()),
            "mote" => Filter::Mote(num(v)?.try_into().map_err(|_| err())?),
            "sensor" => Filter::Sensor(v.into()),
            "land_cover" => Filter::LandCover(v.into()),
            "manufacturer" => Filter::Manufacturer(v.into()),
            "year" => Filter::Year(num(v)? as i32),
            "season" => Filter::Season(v.parse()?),
            "depth" => {
                let (a, b) = range()?;
                Filter::Depth {
                    min_cm: num(a)? as i32,
                    max_cm: num(b)? as i32,
                }
            }
            "hour" => {
                let (a, b) = range()?;
                Filter::HourOfDay {
                    from: num(a)? as u32,
                    to: num(b)? as u32,
                }
            }
            "time" => {
                let (a, b) = range()?;
                Filter::Time {
                    start: time(a)?,
                    end: time(b)?,
                }
            }
            _ => return Err(err()),
        })
    }

    fn applies_to_weather(&self) -> bool {
        matches!(
            self,
            Filter::Site(_) | Filter::Time { .. } | Filter::Year(_) | Filter::Season(_)
        )
    }

    fn accepts(&self, loc: &LocationKey, start: DateTime<Utc>, key: &TimeKey) -> bool {
        match self {
            Filter::Site(s) => loc.site_id == *s,
            Filter::Patch(p) => loc.patch_id.as_deref() == Some(p),
            Filter::Mote(m) => loc.mote_id == Some(*m),
            Filter::Sensor(s) => loc.sensor_id.as_deref() == Some(s),
            Filter::LandCover(l) => loc.land_cover.as_deref() == Some(l),
            Filter::Manufacturer(m) => loc.manufacturer.as_deref() == Some(m),
            Filter::Depth { min_cm, max_cm } => loc.depth_cm.is_some_and(|d| (*min_cm..=*max_cm).contains(&d)),
            Filter::Time { start: a, end: b } => *a <= start && start < *b,
            Filter::Year(y) => key.year == *y,
            Filter::Season(s) => key.season.1 == *s,
            Filter::HourOfDay { from, to } => (*from..=*to).contains(&key.hour),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubeQuery {
    pub measure: Measure,
    pub aggregate: Aggregate,
    pub time_level: TimeLevel,
    pub location_level: LocationLevel,
    pub filters: Vec<Filter>,
    pub cyclic: Option<CyclicGroup>,
    pub include_interpolated: bool,
}

impl CubeQuery {
    pub fn new(measure: Measure, aggregate: Aggregate) -> Self {
        Self {
            measure,
            aggregate,
            time_level: TimeLevel::All,
            location_level: LocationLevel::All,
            filters: Vec::new(),
            cyclic: None,
            include_interpolated: false,
        }
    }

    pub fn by(mut self, time: TimeLevel, location: LocationLevel) -> Self {
        self.time_level = time;
        self.location_level = location;
        self
    }

    pub fn filter(mut self, f: Filter) -> Self {
        self.filters.push(f);
        self
    }

    pub fn cyclic(mut self, c: CyclicGroup) -> Self {
        self.cyclic = Some(c);
        self
    }

    pub fn validate(&self) -> Result<(), CubeError> {
        let bad = |m: String| Err(CubeError::InvalidQuery(m));
        if self.cyclic.is_some() && self.time_level.below_day() {
            return bad("a cyclic grouping cannot be combined with a time level below a day".into());
        }
        if let Measure::Weather(w) = self.measure {
            if !matches!(self.location_level, LocationLevel::All | LocationLevel::Site) {
                return bad(format!(
                    "{} is recorded per site and cannot be split below a site",
                    w.as_str()
                ));
            }
            if self.time_level.below_day() || self.cyclic == Some(CyclicGroup::HourOfDay) {
                return bad(format!("{} is recorded per day", w.as_str()));
            }
            if let Some(f) = self.filters.iter().find(|f| !f.applies_to_weather()) {
                return bad(format!("filter {f:?} does not apply to weather"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub time: TimeBucket,
    pub cycle: Option<u32>,
    pub location: LocationBucket,
    pub value: f64,
    /// Number of values aggregated.
    pub count: u64,
}

/// Flat, serializable form of a result row. Column order: `time`,
/// `cycle`, `location`, `value`, `count`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub time: String,
    pub cycle: Option<u32>,
    pub location: String,
    pub value: f64,
    pub count: u64,
}

impl From<&CellResult> for ResultRow {
    fn from(c: &CellResult) -> Self {
        Self {
            time: c.time.to_string(),
            cycle: c.cycle,
            location: c.location.to_string(),
            value: c.value,
            count: c.count,
        }
    }
}

pub const RESULT_HEADER: &str = "time,cycle,location,value,count";

pub fn results_csv(results: &[CellResult]) -> String {
    let mut out = String::from(RESULT_HEADER);
    out.push('\n');
    for r in results {
        let row = ResultRow::from(r);
        let cycle = row.cycle.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.time,
            cycle,
            csv_field(&row.location),
            row.value,
            row.count
        ));
    }
    out
}

pub fn results_json(results: &[CellResult]) -> String {
    let rows: Vec<ResultRow> = results.iter().map(ResultRow::from).collect();
    serde_json::to_string_pretty(&rows).expect("plain data serializes")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone)]
struct Fact {
    location: usize,
    start: DateTime<Utc>,
    key: TimeKey,
    mean: f64,
    min: f64,
    max: f64,
    stddev: f64,
    count: u32,
    interpolated: bool,
}

#[derive(Debug, Clone)]
struct WeatherFact {
    site: usize,
    start: DateTime<Utc>,
    key: TimeKey,
    day: WeatherDay,
}

/// Summary of one contributing fact: `n` values with this mean, spread
/// and range.
#[derive(Debug, Clone, Copy)]
struct Part {
    n: u64,
    mean: f64,
    min: f64,
    max: f64,
    sd: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Cube {
    sensors: Vec<LocationKey>,
    sites: Vec<LocationKey>,
    facts: Vec<Fact>,
    weather: Vec<WeatherFact>,
}

impl Cube {
    pub fn build<'a>(
        cells: &[DataSeriesCell],
        weather: impl IntoIterator<Item = &'a WeatherDay>,
        registry: &Registry,
    ) -> Result<Self, CubeError> {
        let mut cube = Cube::default();
        if let Some(first) = cells.first() {
            if let Some(other) = cells.iter().find(|c| c.step_s != first.step_s) {
                return Err(CubeError::MixedSteps(first.step_s, other.step_s));
            }
            if first.step_s == 0 || !CUBE_STEP_S.is_multiple_of(first.step_s) {
                return Err(CubeError::Step(first.step_s));
            }
        }
        let mut sensor_index: BTreeMap<&str, usize> = BTreeMap::new();
        for c in cells {
            let location = match sensor_index.get(c.sensor_id.as_str()) {
                Some(&i) => i,
                None => {
                    let s = registry
                        .sensor(&c.sensor_id)
                        .ok_or_else(|| CubeError::UnknownSensor(c.sensor_id.clone()))?;
                    let patch = registry
                        .patch_of_mote(s.mote_id)
                        .ok_or_else(|| CubeError::UnknownSensor(c.sensor_id.clone()))?;
                    cube.sensors.push(LocationKey {
                        site_id: patch.site_id.clone(),
                        patch_id: Some(patch.patch_id.clone()),
                        mote_id: Some(s.mote_id),
                        sensor_id: Some(s.sensor_id.clone()),
                        sensor_type: Some(s.sensor_type),
                        depth_cm: Some(s.depth_cm),
                        land_cover: Some(patch.land_cover.clone()),
                        manufacturer: Some(s.manufacturer.clone()),
                    });
                    sensor_index.insert(&c.sensor_id, cube.sensors.len() - 1);
                    cube.sensors.len() - 1
                }
            };
            let start = c.start();
            cube.facts.push(Fact {
                location,
                start,
                key: TimeKey::of(start),
                mean: c.mean,
                min: c.min,
                max: c.max,
                stddev: c.stddev,
                count: c.count,
                interpolated: c.interpolated,
            });
        }
        cube.sites = registry
            .sites()
            .map(|s| LocationKey {
                site_id: s.site_id.clone(),
                patch_id: None,
                mote_id: None,
                sensor_id: None,
                sensor_type: None,
                depth_cm: None,
                land_cover: None,
                manufacturer: None,
            })
            .collect();
        for day in weather {
            let start = day.date.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
            for site in 0..cube.sites.len() {
                cube.weather.push(WeatherFact {
                    site,
                    start,
                    key: TimeKey::of(start),
                    day: day.clone(),
                });
            }
        }
        Ok(cube)
    }

    /// Cube over the store's ten-minute cells and all its weather.
    pub fn from_store(store: &Store, registry: &Registry) -> Result<Self, CubeError> {
        let cells: Vec<DataSeriesCell> = store
            .dataseries()
            .iter()
            .filter(|c| c.step_s == CUBE_STEP_S)
            .cloned()
            .collect();
        Self::build(&cells, store.weather(), registry)
    }

    /// Number of data-series facts.
    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn weather_len(&self) -> usize {
        self.weather.len()
    }

    pub fn query(&self, q: &CubeQuery) -> Result<Vec<CellResult>, CubeError> {
        q.validate()?;
        type Key = (TimeBucket, Option<u32>, LocationBucket);
        let mut groups: BTreeMap<Key, Vec<Part>> = BTreeMap::new();
        let mut add = |loc: &LocationKey, start: DateTime<Utc>, key: &TimeKey, part: Part| {
            if q.filters.iter().all(|f| f.accepts(loc, start, key)) {
                let k = (
                    key.bucket(q.time_level),
                    q.cyclic.map(|c| c.position(key)),
                    loc.bucket(q.location_level),
                );
                groups.entry(k).or_default().push(part);
            }
        };
        match q.measure {
            Measure::Sensor(t) => {
                for f in &self.facts {
                    let loc = &self.sensors[f.location];
                    if loc.sensor_type != Some(t) || (f.interpolated && !q.include_interpolated) {
                        continue;
                    }
                    let (n, sd) = if f.interpolated {
                        (1, 0.0)
                    } else {
                        (u64::from(f.count), f.stddev)
                    };
                    if n == 0 {
                        continue;
                    }
                    add(
                        loc,
                        f.start,
                        &f.key,
                        Part {
                            n,
                            mean: f.mean,
                            min: f.min,
                            max: f.max,
                            sd,
                        },
                    );
                }
            }
            Measure::Weather(w) => {
                for f in &self.weather {
                    let v = w.read(&f.day);
                    let part = Part {
                        n: 1,
                        mean: v,
                        min: v,
                        max: v,
                        sd: 0.0,
                    };
                    add(&self.sites[f.site], f.start, &f.key, part);
                }
            }
        }
        Ok(groups
            .into_iter()
            .map(|((time, cycle, location), parts)| {
                let (value, count) = aggregate(q.aggregate, parts);
                CellResult {
                    time,
                    cycle,
                    location,
                    value,
                    count,
                }
            })
            .collect())
    }
}

fn aggregate(agg: Aggregate, mut parts: Vec<Part>) -> (f64, u64) {
    let n: u64 = parts.iter().map(|p| p.n).sum();
    let nf = n as f64;
    let mean = parts.iter().map(|p| p.n as f64 * p.mean).sum::<f64>() / nf;
    let value = match agg {
        Aggregate::Count => nf,
        Aggregate::Average => mean,
        Aggregate::Min => parts.iter().map(|p| p.min).fold(f64::INFINITY, f64::min),
        Aggregate::Max => parts.iter().map(|p| p.max).fold(f64::NEG_INFINITY, f64::max),
        Aggregate::Stddev => {
            if n < 2 {
                0.0
            } else {
                let ss: f64 = parts
                    .iter()
                    .map(|p| (p.n as f64 - 1.0) * p.sd * p.sd + p.n as f64 * (p.mean - mean).powi(2))
                    .sum();
                (ss / (nf - 1.0)).sqrt()
            }
        }
        Aggregate::Median => {
            parts.sort_by(|a, b| a.mean.total_cmp(&b.mean));
            // Values at 0-based ranks lo and hi of the count-expanded list.
            let (lo, hi) = ((n - 1) / 2, n / 2);
            let at = |rank: u64| {
                let mut seen = 0;
                for p in &parts {
                    seen += p.n;
                    if rank < seen {
                        return p.mean;
                    }
                }
                unreachable!("rank below total count")
            };
            (at(lo) + at(hi)) / 2.0
        }
    };
    (value, n)
}
