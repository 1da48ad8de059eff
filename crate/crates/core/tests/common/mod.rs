//! Fixtures and brute-force oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Timelike, Utc};
use rand::seq::IndexedRandom;
use rand::Rng;

use soilnet::collector::{level0_csv, TimeAnchor};
use soilnet::cube::{
    Aggregate, CellResult, Cube, CubeQuery, CyclicGroup, Filter, LocationBucket, LocationLevel, Measure, Season,
    TimeKey, TimeLevel, WeatherField,
};
use soilnet::mote::SampleRecord;
use soilnet::pipeline::store::{DataSeriesCell, WeatherDay};
use soilnet::registry::{MoteId, Registry, SensorType};

/// One sensor of the cube fixture, described independently of the
/// registry parser.
#[derive(Debug, Clone)]
pub struct FixtureSensor {
    pub sensor_id: String,
    pub mote_id: MoteId,
    pub patch_id: &'static str,
    pub site_id: &'static str,
    pub land_cover: &'static str,
    pub manufacturer: &'static str,
    pub depth_cm: i32,
    pub sensor_type: SensorType,
}

const PATCHES: [(&str, &str, &str); 3] = [("p1", "s1", "lawn"), ("p2", "s1", "forest"), ("p3", "s2", "forest")];

/// Two sites, three patches, nine motes; every mote carries soil
/// temperature, soil moisture and box temperature at varying depths.
pub fn cube_sensors() -> Vec<FixtureSensor> {
    let mut out = Vec::new();
    for m in 0..9u32 {
        let (patch_id, site_id, land_cover) = PATCHES[(m % 3) as usize];
        let mote_id = 100 + m;
        let shallow = m % 2 == 0;
        out.push(FixtureSensor {
            sensor_id: format!("{mote_id}-t"),
            mote_id,
            patch_id,
            site_id,
            land_cover,
            manufacturer: if m < 5 { "generic-ntc" } else { "acme" },
            depth_cm: if shallow { 10 } else { 20 },
            sensor_type: SensorType::SoilTemperature,
        });
        out.push(FixtureSensor {
            sensor_id: format!("{mote_id}-m"),
            mote_id,
            patch_id,
            site_id,
            land_cover,
            manufacturer: "watermark",
            depth_cm: if shallow { 10 } else { 30 },
            sensor_type: SensorType::SoilMoisture,
        });
        out.push(FixtureSensor {
            sensor_id: format!("{mote_id}-b"),
            mote_id,
            patch_id,
            site_id,
            land_cover,
            manufacturer: "generic-ntc",
            depth_cm: -20,
            sensor_type: SensorType::BoxTemperature,
        });
    }
    out
}

pub fn cube_registry(sensors: &[FixtureSensor]) -> Registry {
    let mut text = String::new();
    for site in ["s1", "s2"] {
        text.push_str(&format!(
            "[site]\nsite_id = {site}\nlatitude = 39.3\nlongitude = -76.6\n\n"
        ));
    }
    for (p, s, lc) in PATCHES {
        text.push_str(&format!(
            "[patch]\npatch_id = {p}\nsite_id = {s}\nreference_coords = (39.3, -76.6)\nextent_m = (10, 10)\nland_cover = {lc}\n\n"
        ));
    }
    let motes: BTreeSet<(MoteId, &str)> = sensors.iter().map(|s| (s.mote_id, s.patch_id)).collect();
    for (m, p) in motes {
        text.push_str(&format!(
            "[mote]\nmote_id = {m}\npatch_id = {p}\noffset_m = (1, 1)\ndeploy_date = 2005-11-01\n\n"
        ));
    }
    for s in sensors {
        text.push_str(&format!(
            "[sensor]\nsensor_id = {}\nmote_id = {}\nsensor_type = {}\ndepth_cm = {}\nadc_channel = {}\nmanufacturer = {}\n\n",
            s.sensor_id,
            s.mote_id,
            s.sensor_type.as_str(),
            s.depth_cm,
            s.sensor_type.reading_slot(),
            s.manufacturer
        ));
    }
    text.parse().expect("fixture registry is valid")
}

/// A gridded cell together with the raw values it summarizes.
#[derive(Debug, Clone)]
pub struct RawCell {
    pub sensor: usize,
    pub start: DateTime<Utc>,
    /// Empty for interpolated cells.
    pub values: Vec<f64>,
    pub interpolated_mean: Option<f64>,
}

pub fn fixture_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2005, 11, 20, 0, 0, 0).unwrap()
}

/// Spans Nov 2005 to Feb 2007 so every year, season and ISO-week
/// boundary case appears.
pub const FIXTURE_SLOTS: i64 = 64_000;

pub fn cube_cells<R: Rng>(rng: &mut R, sensors: &[FixtureSensor], n: usize) -> (Vec<RawCell>, Vec<DataSeriesCell>) {
    let mut used = BTreeSet::new();
    let mut raw = Vec::with_capacity(n);
    let mut cells = Vec::with_capacity(n);
    while raw.len() < n {
        let sensor = rng.random_range(0..sensors.len());
        // Cluster slots so coarse buckets receive many facts.
        let slot = if rng.random_bool(0.5) {
            rng.random_range(0..FIXTURE_SLOTS)
        } else {
            rng.random_range(0..40) * 1600 + rng.random_range(0..6)
        };
        if !used.insert((sensor, slot)) {
            continue;
        }
        let start = fixture_start() + Duration::seconds(slot * 600);
        let step_index = start.timestamp() / 600;
        let sensor_id = sensors[sensor].sensor_id.clone();
        if rng.random_bool(0.05) {
            let m = rng.random_range(1.0..200.0);
            raw.push(RawCell {
                sensor,
                start,
                values: Vec::new(),
                interpolated_mean: Some(m),
            });
            cells.push(DataSeriesCell {
                sensor_id,
                step_s: 600,
                step_index,
                mean: m,
                min: m,
                max: m,
                stddev: 0.0,
                count: 0,
                interpolated: true,
            });
            continue;
        }
        let k = rng.random_range(1..=6);
        let values: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..200.0)).collect();
        let mean = values.iter().sum::<f64>() / k as f64;
        let sd = if k > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        } else {
            0.0
        };
        cells.push(DataSeriesCell {
            sensor_id,
            step_s: 600,
            step_index,
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            stddev: sd,
            count: k as u32,
            interpolated: false,
        });
        raw.push(RawCell {
            sensor,
            start,
            values,
            interpolated_mean: None,
        });
    }
    (raw, cells)
}

pub fn weather_days<R: Rng>(rng: &mut R, n_days: i64) -> Vec<WeatherDay> {
    let mut out = Vec::new();
    for d in 0..n_days {
        if !rng.random_bool(0.9) {
            continue;
        }
        let tmin = rng.random_range(-12.0..10.0);
        let tmax = tmin + rng.random_range(0.0..15.0);
        out.push(WeatherDay {
            date: fixture_start().date_naive() + Duration::days(d),
            tmin_c: tmin,
            tmax_c: tmax,
            tavg_c: (tmin + tmax) / 2.0,
            precipitation_mm: if rng.random_bool(0.3) {
                rng.random_range(0.0..30.0)
            } else {
                0.0
            },
            humidity_pct: rng.random_range(30.0..100.0),
            pressure_hpa: rng.random_range(990.0..1030.0),
            events: BTreeSet::new(),
        });
    }
    out
}

fn season_label(d: NaiveDate) -> (i32, Season, &'static str) {
    match d.month() {
        12 => (d.year() + 1, Season::Winter, "DJF"),
        1 | 2 => (d.year(), Season::Winter, "DJF"),
        3..=5 => (d.year(), Season::Spring, "MAM"),
        6..=8 => (d.year(), Season::Summer, "JJA"),
        _ => (d.year(), Season::Autumn, "SON"),
    }
}

fn time_label(t: DateTime<Utc>, level: TimeLevel) -> String {
    let d = t.date_naive();
    match level {
        TimeLevel::All => "all".into(),
        TimeLevel::Year => d.year().to_string(),
        TimeLevel::Season => {
            let (y, _, code) = season_label(d);
            format!("{y}-{code}")
        }
        TimeLevel::Week => {
            let w = d.iso_week();
            format!("{}-W{:02}", w.year(), w.week())
        }
        TimeLevel::Date => d.to_string(),
        TimeLevel::Hour => format!("{d}T{:02}", t.hour()),
        TimeLevel::TenMinute => format!("{d}T{:02}:{:02}", t.hour(), t.minute() / 10 * 10),
    }
}

fn location_label(s: &FixtureSensor, level: LocationLevel) -> String {
    match level {
        LocationLevel::All => "all".into(),
        LocationLevel::Site => s.site_id.into(),
        LocationLevel::Patch => s.patch_id.into(),
        LocationLevel::Mote => s.mote_id.to_string(),
        LocationLevel::Sensor => s.sensor_id.clone(),
        LocationLevel::Depth => format!("{}cm", s.depth_cm),
        LocationLevel::LandCover => s.land_cover.into(),
    }
}

/// Whether a fact passes `f`. `sensor` is `None` for weather facts, which
/// only carry a site.
fn passes(f: &Filter, site: &str, sensor: Option<&FixtureSensor>, t: DateTime<Utc>) -> bool {
    let d = t.date_naive();
    match f {
        Filter::Site(s) => site == s,
        Filter::Patch(p) => sensor.is_some_and(|x| x.patch_id == p),
        Filter::Mote(m) => sensor.is_some_and(|x| x.mote_id == *m),
        Filter::Sensor(id) => sensor.is_some_and(|x| x.sensor_id == *id),
        Filter::LandCover(l) => sensor.is_some_and(|x| x.land_cover == l),
        Filter::Manufacturer(m) => sensor.is_some_and(|x| x.manufacturer == m),
        Filter::Depth { min_cm, max_cm } => sensor.is_some_and(|x| *min_cm <= x.depth_cm && x.depth_cm <= *max_cm),
        Filter::Time { start, end } => *start <= t && t < *end,
        Filter::Year(y) => d.year() == *y,
        Filter::Season(s) => season_label(d).1 == *s,
        Filter::HourOfDay { from, to } => *from <= t.hour() && t.hour() <= *to,
    }
}

fn cycle(c: Option<CyclicGroup>, t: DateTime<Utc>) -> Option<u32> {
    c.map(|g| match g {
        CyclicGroup::HourOfDay => t.hour(),
        CyclicGroup::WeekOfYear => t.date_naive().iso_week().week(),
    })
}

pub type GroupKey = (String, Option<u32>, String);

/// Raw contributions of one result group.
#[derive(Debug, Default, Clone)]
struct Group {
    values: Vec<f64>,
    /// Each contributing cell's mean, repeated once per value it stands for.
    expanded_means: Vec<f64>,
}

/// Answers `q` by scanning the raw values directly.
pub fn brute_force(
    q: &CubeQuery,
    sensors: &[FixtureSensor],
    raw: &[RawCell],
    weather: &[WeatherDay],
) -> BTreeMap<GroupKey, (f64, u64)> {
    let mut groups: BTreeMap<GroupKey, Group> = BTreeMap::new();
    match q.measure {
        Measure::Sensor(t) => {
            for c in raw {
                let s = &sensors[c.sensor];
                if s.sensor_type != t || !q.filters.iter().all(|f| passes(f, s.site_id, Some(s), c.start)) {
                    continue;
                }
                let (values, mean) = match c.interpolated_mean {
                    Some(_) if !q.include_interpolated => continue,
                    Some(m) => (vec![m], m),
                    None => (c.values.clone(), c.values.iter().sum::<f64>() / c.values.len() as f64),
                };
                let key = (
                    time_label(c.start, q.time_level),
                    cycle(q.cyclic, c.start),
                    location_label(s, q.location_level),
                );
                let g = groups.entry(key).or_default();
                g.expanded_means.extend(std::iter::repeat_n(mean, values.len()));
                g.values.extend(values);
            }
        }
        Measure::Weather(w) => {
            for site in ["s1", "s2"] {
                for d in weather {
                    let t = d.date.and_hms_opt(0, 0, 0).unwrap().and_utc();
                    if !q.filters.iter().all(|f| passes(f, site, None, t)) {
                        continue;
                    }
                    let v = match w {
                        WeatherField::TminC => d.tmin_c,
                        WeatherField::TmaxC => d.tmax_c,
                        WeatherField::TavgC => d.tavg_c,
                        WeatherField::PrecipitationMm => d.precipitation_mm,
                        WeatherField::HumidityPct => d.humidity_pct,
                        WeatherField::PressureHpa => d.pressure_hpa,
                    };
                    let loc = match q.location_level {
                        LocationLevel::All => "all".to_string(),
                        _ => site.to_string(),
                    };
                    let g = groups
                        .entry((time_label(t, q.time_level), cycle(q.cyclic, t), loc))
                        .or_default();
                    g.values.push(v);
                    g.expanded_means.push(v);
                }
            }
        }
    }
    groups
        .into_iter()
        .map(|(k, g)| {
            let n = g.values.len();
            let mean = g.values.iter().sum::<f64>() / n as f64;
            let value = match q.aggregate {
                Aggregate::Count => n as f64,
                Aggregate::Average => mean,
                Aggregate::Min => g.values.iter().copied().fold(f64::INFINITY, f64::min),
                Aggregate::Max => g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Aggregate::Stddev => {
                    if n < 2 {
                        0.0
                    } else {
                        (g.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    }
                }
                Aggregate::Median => {
                    let mut m = g.expanded_means.clone();
                    m.sort_by(f64::total_cmp);
                    if n % 2 == 1 {
                        m[n / 2]
                    } else {
                        (m[n / 2 - 1] + m[n / 2]) / 2.0
                    }
                }
            };
            (k, (value, n as u64))
        })
        .collect()
}

pub fn keyed(results: &[CellResult]) -> BTreeMap<GroupKey, (f64, u64)> {
    results
        .iter()
        .map(|r| {
            (
                (r.time.to_string(), r.cycle, r.location.to_string()),
                (r.value, r.count),
            )
        })
        .collect()
}

/// Exact for min, max, count and median; 1e-9 relative for average and
/// standard deviation.
pub fn agree(
    agg: Aggregate,
    actual: &BTreeMap<GroupKey, (f64, u64)>,
    expected: &BTreeMap<GroupKey, (f64, u64)>,
) -> Result<(), String> {
    if actual.len() != expected.len() || actual.keys().ne(expected.keys()) {
        let a: BTreeSet<_> = actual.keys().collect();
        let e: BTreeSet<_> = expected.keys().collect();
        return Err(format!(
            "group keys differ: only in cube {:?}, only in oracle {:?}",
            a.difference(&e).take(3).collect::<Vec<_>>(),
            e.difference(&a).take(3).collect::<Vec<_>>()
        ));
    }
    for (k, (ev, en)) in expected {
        let (av, an) = actual[k];
        if an != *en {
            return Err(format!("{k:?}: count {an} vs {en}"));
        }
        let ok = match agg {
            Aggregate::Average | Aggregate::Stddev => (av - ev).abs() <= 1e-9 * ev.abs(),
            _ => av == *ev,
        };
        if !ok {
            return Err(format!("{k:?}: {agg:?} {av} vs {ev}"));
        }
    }
    Ok(())
}

/// A random well-formed query over the cube fixture.
pub fn random_query<R: Rng>(rng: &mut R, sensors: &[FixtureSensor]) -> CubeQuery {
    let aggregate = *Aggregate::ALL.choose(rng).unwrap();
    if rng.random_bool(0.2) {
        let field = *WeatherField::ALL.choose(rng).unwrap();
        let time = *[
            TimeLevel::All,
            TimeLevel::Year,
            TimeLevel::Season,
            TimeLevel::Week,
            TimeLevel::Date,
        ]
        .choose(rng)
        .unwrap();
        let loc = *[LocationLevel::All, LocationLevel::Site].choose(rng).unwrap();
        let mut q = CubeQuery::new(Measure::Weather(field), aggregate).by(time, loc);
        for _ in 0..rng.random_range(0..=2) {
            q = q.filter(match rng.random_range(0..4) {
                0 => Filter::Site(["s1", "s2"].choose(rng).unwrap().to_string()),
                1 => Filter::Year(rng.random_range(2005..=2007)),
                2 => Filter::Season(
                    *[Season::Winter, Season::Spring, Season::Summer, Season::Autumn]
                        .choose(rng)
                        .unwrap(),
                ),
                _ => time_filter(rng),
            });
        }
        if rng.random_bool(0.2) {
            q = q.cyclic(CyclicGroup::WeekOfYear);
        }
        return q;
    }
    let t = *[
        SensorType::SoilTemperature,
        SensorType::SoilMoisture,
        SensorType::BoxTemperature,
    ]
    .choose(rng)
    .unwrap();
    let time = *TimeLevel::ALL.choose(rng).unwrap();
    let loc = *LocationLevel::ALL.choose(rng).unwrap();
    let mut q = CubeQuery::new(Measure::Sensor(t), aggregate).by(time, loc);
    for _ in 0..rng.random_range(0..=2) {
        let s = sensors.choose(rng).unwrap();
        q = q.filter(match rng.random_range(0..11) {
            0 => Filter::Site(s.site_id.into()),
            1 => Filter::Patch(s.patch_id.into()),
            2 => Filter::Mote(s.mote_id),
            3 => Filter::Sensor(s.sensor_id.clone()),
            4 => Filter::LandCover(s.land_cover.into()),
            5 => Filter::Manufacturer(s.manufacturer.into()),
            6 => {
                let a = rng.random_range(-30..25);
                Filter::Depth {
                    min_cm: a,
                    max_cm: a + rng.random_range(0..20),
                }
            }
            7 => time_filter(rng),
            8 => Filter::Year(rng.random_range(2005..=2007)),
            9 => Filter::Season(
                *[Season::Winter, Season::Spring, Season::Summer, Season::Autumn]
                    .choose(rng)
                    .unwrap(),
            ),
            _ => {
                let from = rng.random_range(0..24);
                Filter::HourOfDay {
                    from,
                    to: rng.random_range(from..24),
                }
            }
        });
    }
    if !matches!(time, TimeLevel::Hour | TimeLevel::TenMinute) && rng.random_bool(0.25) {
        q = q.cyclic(*[CyclicGroup::HourOfDay, CyclicGroup::WeekOfYear].choose(rng).unwrap());
    }
    q.include_interpolated = rng.random_bool(0.3);
    q
}

fn time_filter<R: Rng>(rng: &mut R) -> Filter {
    let a = fixture_start() + Duration::seconds(rng.random_range(0..FIXTURE_SLOTS) * 600);
    Filter::Time {
        start: a,
        end: a + Duration::days(rng.random_range(1..200)),
    }
}

/// Level-0 CSV files for random downloads from the motes of `registry`:
/// contiguous sequence ranges, rising mote clocks and arbitrary counts.
/// Returns the file texts and the total row count.
pub fn random_level0<R: Rng>(rng: &mut R, registry: &Registry, target_rows: usize) -> (Vec<String>, usize) {
    let motes: Vec<MoteId> = registry.motes().map(|m| m.mote_id).collect();
    let mut next_seq: BTreeMap<(MoteId, u32), u64> = BTreeMap::new();
    let mut files = Vec::new();
    let mut rows = 0;
    let mut download_id = 1;
    let boot = Utc.with_ymd_and_hms(2006, 1, 8, 0, 0, 0).unwrap();
    while rows < target_rows {
        let mote = *motes.choose(rng).unwrap();
        let epoch = rng.random_range(0..2u32);
        let n = rng.random_range(1..=400).min(target_rows - rows);
        let first = next_seq.entry((mote, epoch)).or_insert(0);
        let records: Vec<SampleRecord> = (0..n as u64)
            .map(|i| {
                let seq = *first + i;
                let mut readings = [0u16; 5];
                for r in &mut readings {
                    *r = if rng.random_bool(0.02) {
                        1023
                    } else {
                        rng.random_range(0..=1023)
                    };
                }
                SampleRecord::new(seq, (seq * 60) as u32, readings).unwrap()
            })
            .collect();
        *first += n as u64;
        let last = records.last().unwrap();
        // Each boot has one fixed clock offset, so every download of it
        // maps mote time to the same UTC.
        let mote_time_s = last.mote_time_s + rng.random_range(0..90);
        let anchor = TimeAnchor {
            mote_time_s,
            utc: boot + Duration::days(i64::from(epoch) * 40) + Duration::seconds(i64::from(mote_time_s)),
        };
        files.push(level0_csv(&records, mote, epoch, download_id, anchor).unwrap());
        download_id += 1;
        rows += n;
    }
    (files, rows)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Parent bucket of a time bucket, found through the bucket's first instant.
fn time_parent(r: &CellResult, parent: TimeLevel) -> String {
    let start = r.time.start().expect("child below the whole-time level");
    TimeKey::of(start).bucket(parent).to_string()
}

fn extreme(kids: &[&CellResult], agg: Aggregate) -> f64 {
    let vals = kids.iter().map(|k| k.value);
    match agg {
        Aggregate::Min => vals.fold(f64::INFINITY, f64::min),
        _ => vals.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Checks that every parent node of the soil-moisture cube equals the
/// combination of its children: counts add, extremes propagate and
/// averages are count-weighted.
pub fn check_rollup(cube: &Cube, sensors: &[FixtureSensor], include: bool) -> Result<(), String> {
    let run = |agg, time, loc| {
        let mut q = CubeQuery::new(Measure::Sensor(SensorType::SoilMoisture), agg).by(time, loc);
        q.include_interpolated = include;
        cube.query(&q).unwrap()
    };
    let time_edges = [
        (TimeLevel::TenMinute, TimeLevel::Hour),
        (TimeLevel::Hour, TimeLevel::Date),
        (TimeLevel::Date, TimeLevel::Week),
        (TimeLevel::Date, TimeLevel::Season),
        (TimeLevel::Date, TimeLevel::Year),
        (TimeLevel::Week, TimeLevel::All),
        (TimeLevel::Season, TimeLevel::All),
        (TimeLevel::Year, TimeLevel::All),
    ];
    for (c, p) in time_edges {
        for agg in [Aggregate::Count, Aggregate::Min, Aggregate::Max, Aggregate::Average] {
            let child = run(agg, c, LocationLevel::All);
            let parent = run(agg, p, LocationLevel::All);
            let mut groups: BTreeMap<String, Vec<&CellResult>> = BTreeMap::new();
            for r in &child {
                groups.entry(time_parent(r, p)).or_default().push(r);
            }
            ensure!(
                groups.len() == parent.len(),
                "{c:?}->{p:?}: {} groups, {} parents",
                groups.len(),
                parent.len()
            );
            for pr in &parent {
                let kids = groups
                    .get(&pr.time.to_string())
                    .ok_or_else(|| format!("{c:?}->{p:?}: no children for {}", pr.time))?;
                let n: u64 = kids.iter().map(|k| k.count).sum();
                ensure!(
                    n == pr.count,
                    "{c:?}->{p:?} {agg:?} at {}: count {} vs {n}",
                    pr.time,
                    pr.count
                );
                let ok = match agg {
                    Aggregate::Min | Aggregate::Max => pr.value == extreme(kids, agg),
                    Aggregate::Average => {
                        let w = kids.iter().map(|k| k.value * k.count as f64).fold(0.0, |a, v| a + v) / n as f64;
                        (w - pr.value).abs() <= 1e-9 * pr.value.abs()
                    }
                    _ => pr.value == n as f64,
                };
                ensure!(ok, "{c:?}->{p:?} {agg:?} at {}: value {}", pr.time, pr.value);
            }
        }
    }

    let by_id: BTreeMap<&str, &FixtureSensor> = sensors.iter().map(|s| (s.sensor_id.as_str(), s)).collect();
    let mote_patch: BTreeMap<MoteId, &str> = sensors.iter().map(|s| (s.mote_id, s.patch_id)).collect();
    let patch_site: BTreeMap<&str, &str> = sensors.iter().map(|s| (s.patch_id, s.site_id)).collect();
    let patch_cover: BTreeMap<&str, &str> = sensors.iter().map(|s| (s.patch_id, s.land_cover)).collect();
    let loc_parent = |b: &LocationBucket, p: LocationLevel| -> String {
        match (b, p) {
            (_, LocationLevel::All) => "all".into(),
            (LocationBucket::Sensor(s), LocationLevel::Mote) => by_id[s.as_str()].mote_id.to_string(),
            (LocationBucket::Sensor(s), LocationLevel::Depth) => format!("{}cm", by_id[s.as_str()].depth_cm),
            (LocationBucket::Mote(m), LocationLevel::Patch) => mote_patch[m].to_string(),
            (LocationBucket::Patch(x), LocationLevel::Site) => patch_site[x.as_str()].to_string(),
            (LocationBucket::Patch(x), LocationLevel::LandCover) => patch_cover[x.as_str()].to_string(),
            other => unreachable!("{other:?}"),
        }
    };
    let loc_edges = [
        (LocationLevel::Sensor, LocationLevel::Mote),
        (LocationLevel::Sensor, LocationLevel::Depth),
        (LocationLevel::Mote, LocationLevel::Patch),
        (LocationLevel::Patch, LocationLevel::Site),
        (LocationLevel::Patch, LocationLevel::LandCover),
        (LocationLevel::Site, LocationLevel::All),
        (LocationLevel::LandCover, LocationLevel::All),
        (LocationLevel::Depth, LocationLevel::All),
    ];
    for (c, p) in loc_edges {
        for agg in [Aggregate::Count, Aggregate::Min, Aggregate::Max] {
            let child = run(agg, TimeLevel::Date, c);
            let parent = run(agg, TimeLevel::Date, p);
            let mut groups: BTreeMap<(String, String), Vec<&CellResult>> = BTreeMap::new();
            for r in &child {
                groups
                    .entry((r.time.to_string(), loc_parent(&r.location, p)))
                    .or_default()
                    .push(r);
            }
            ensure!(
                groups.len() == parent.len(),
                "{c:?}->{p:?}: {} groups, {} parents",
                groups.len(),
                parent.len()
            );
            for pr in &parent {
                let kids = groups
                    .get(&(pr.time.to_string(), pr.location.to_string()))
                    .ok_or_else(|| format!("{c:?}->{p:?}: no children for {} {}", pr.time, pr.location))?;
                let n: u64 = kids.iter().map(|k| k.count).sum();
                ensure!(n == pr.count, "{c:?}->{p:?} {agg:?}: count {} vs {n}", pr.count);
                let ok = match agg {
                    Aggregate::Min | Aggregate::Max => pr.value == extreme(kids, agg),
                    _ => pr.value == n as f64,
                };
                ensure!(
                    ok,
                    "{c:?}->{p:?} {agg:?} at {} {}: value {}",
                    pr.time,
                    pr.location,
                    pr.value
                );
            }
        }
    }
    Ok(())
}
