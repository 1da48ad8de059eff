//! End-to-end deployment scenarios: simulate motes and the gateway, run
//! the pipeline, and write every artifact to one output directory.
//!
//! A scenario file uses the sectioned config format with sections
//! `[scenario]`, `[environment]`, `[rain]` (repeatable), `[beacon_link]`
//! (one default plus optional per-mote overrides carrying `mote_id`),
//! `[download_link]`, `[download_policy]` and `[battery]`. The `registry` key names a
//! site file resolved next to the scenario file.
//!
//! Output layout:
//!
//! ```text
//! site.conf                  copy of the registry used
//! level0/d0001_m51.csv       one Level-0 file per successful download
//! weather.csv                synthetic daily weather for the period
//! store/*.tbl                the populated table store
//! downloads.csv              one row per download attempt
//! beacons.csv                beacons sent and heard per mote
//! energy.csv                 per-mote energy ledger against the budget
//! cube/*.csv                 cube query snapshots
//! report/moisture.{csv,svg}  moisture chart with weather overlay
//! ```
//!
//! Every random draw comes from ChaCha streams keyed by the seed and the
//! mote id, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::channel::{Link, LinkModel};
use crate::collector::{level0_csv, run_download, DownloadError, DownloadPolicy, DownloadStats, HealthTable};
use crate::config::{ConfigError, Document, Section};
use crate::cube::{
    results_csv, Aggregate, Cube, CubeQuery, CyclicGroup, LocationLevel, Measure, TimeLevel, WeatherField,
};
use crate::energy::{total_avg_current, BatteryModel, CurrentBudget};
use crate::mote::env::rain_from_section;
use crate::mote::{Emission, EnvironmentModel, MoteState};
use crate::pipeline::store::{Store, WeatherDay, WeatherEvent};
use crate::pipeline::{
    calibrate_pending, grid_dataseries, ingest_weather_text, promote_level1, stage_text, weather_csv, GapPolicy,
};
use crate::registry::{MoteId, Registry, SensorType};
use crate::report::{dataseries_series, render_series, Chart, ReportFormat};

pub const BUNDLED_SCENARIO: &str = include_str!("../scenarios/olin.conf");
pub const BUNDLED_SITE: &str = include_str!("../scenarios/olin-site.conf");
const BUNDLED_SITE_NAME: &str = "olin-site.conf";

/// Gateway attempts per mote per visit; consecutive attempts are one
/// status period apart.
const VISIT_ATTEMPTS: u32 = 15;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    pub fn is_config(&self) -> bool {
        matches!(self, ScenarioError::Config(_))
    }
}

impl From<ConfigError> for ScenarioError {
    fn from(e: ConfigError) -> Self {
        ScenarioError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Runtime(e.to_string())
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub duration: Duration,
    pub sample_interval_s: u32,
    pub download_interval: Duration,
    pub adc_noise_counts: f64,
    pub grid_step_s: u32,
    pub report_step_s: u32,
    pub report_motes: Vec<MoteId>,
    pub registry: Registry,
    /// Site file text, copied to the output so later commands can reuse it.
    pub registry_text: String,
    pub environment: EnvironmentModel,
    pub beacon_link: LinkModel,
    pub beacon_overrides: BTreeMap<MoteId, LinkModel>,
    pub download_link: LinkModel,
    pub policy: DownloadPolicy,
    pub battery: BatteryModel,
    /// Temperature at which the battery voltages hold.
    pub battery_t_ref_c: f64,
}

const SCENARIO_KEYS: &[&str] = &[
    "name",
    "seed",
    "registry",
    "start",
    "duration_days",
    "sample_interval_s",
    "download_interval_days",
    "adc_noise_counts",
    "grid_step_s",
    "report_step_s",
    "report_motes",
];

const LINK_KEYS: &[&str] = &[
    "mote_id",
    "loss_prob",
    "corrupt_prob",
    "duplicate_prob",
    "lqi_mean_good",
    "lqi_mean_bad",
    "lqi_sigma",
    "quality_mixture",
    "state_persistence",
];

fn link_from_section(s: &Section, base: &LinkModel) -> Result<LinkModel, ScenarioError> {
    s.check_keys(LINK_KEYS)?;
    let model = LinkModel {
        loss_prob: s.parse_or("loss_prob", base.loss_prob)?,
        corrupt_prob: s.parse_or("corrupt_prob", base.corrupt_prob)?,
        duplicate_prob: s.parse_or("duplicate_prob", base.duplicate_prob)?,
        lqi_mean_good: s.parse_or("lqi_mean_good", base.lqi_mean_good)?,
        lqi_mean_bad: s.parse_or("lqi_mean_bad", base.lqi_mean_bad)?,
        lqi_sigma: s.parse_or("lqi_sigma", base.lqi_sigma)?,
        quality_mixture: s.parse_or("quality_mixture", base.quality_mixture)?,
        state_persistence: s.parse_or("state_persistence", base.state_persistence)?,
    };
    model
        .validate()
        .map_err(|e| ScenarioError::Config(format!("line {}: [{}] {e}", s.line, s.name)))?;
    Ok(model)
}

fn days(s: &Section, key: &str) -> Result<Duration, ScenarioError> {
    let d: f64 = s.parse(key)?;
    if !(d.is_finite() && d > 0.0) {
        return Err(s.invalid(key, "must be a positive number of days").into());
    }
    Ok(Duration::milliseconds((d * 86_400_000.0).round() as i64))
}

fn single<'a>(doc: &'a Document, name: &'a str) -> Result<Option<&'a Section>, ScenarioError> {
    let mut it = doc.sections_named(name);
    let first = it.next();
    if let Some(dup) = it.next() {
        return Err(ScenarioError::Config(format!(
            "line {}: [{name}] given twice",
            dup.line
        )));
    }
    Ok(first)
}

impl Scenario {
    /// Parses a scenario; `load_registry` returns the text of the site
    /// file named by the `registry` key.
    pub fn parse(
        text: &str,
        load_registry: impl Fn(&str) -> Result<String, ScenarioError>,
    ) -> Result<Self, ScenarioError> {
        let doc = Document::parse(text)?;
        for s in &doc.sections {
            if !matches!(
                s.name.as_str(),
                "scenario" | "environment" | "rain" | "beacon_link" | "download_link" | "download_policy" | "battery"
            ) {
                return Err(ScenarioError::Config(format!(
                    "line {}: unexpected section [{}]",
                    s.line, s.name
                )));
            }
        }
        let sc = single(&doc, "scenario")?.ok_or_else(|| ScenarioError::Config("missing [scenario]".into()))?;
        sc.check_keys(SCENARIO_KEYS)?;
        let start = DateTime::parse_from_rfc3339(&sc.text("start")?)
            .map_err(|e| sc.invalid("start", e.to_string()))?
            .with_timezone(&Utc);
        let registry_name = sc.text("registry")?;
        let registry_text = load_registry(&registry_name)?;
        let registry: Registry = registry_text
            .parse()
            .map_err(|e| ScenarioError::Config(format!("{registry_name}: {e}")))?;
        let sample_interval_s: u32 = sc.parse_or("sample_interval_s", 60)?;
        if sample_interval_s == 0 {
            return Err(sc.invalid("sample_interval_s", "must be at least 1 s").into());
        }
        let grid_step_s: u32 = sc.parse_or("grid_step_s", 600)?;
        let report_step_s: u32 = sc.parse_or("report_step_s", 21_600)?;
        for (key, step) in [("grid_step_s", grid_step_s), ("report_step_s", report_step_s)] {
            if step == 0 || 86_400 % step != 0 {
                return Err(sc.invalid(key, "step must divide a day").into());
            }
        }
        let adc_noise_counts: f64 = sc.parse_or("adc_noise_counts", 0.0)?;
        if !(adc_noise_counts.is_finite() && adc_noise_counts >= 0.0) {
            return Err(sc.invalid("adc_noise_counts", "must be finite and non-negative").into());
        }
        let report_motes = match sc.get("report_motes") {
            None => Vec::new(),
            Some(e) => e
                .value
                .split(',')
                .map(|m| m.trim().parse::<MoteId>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|err| sc.invalid("report_motes", err.to_string()))?,
        };
        if let Some(m) = report_motes.iter().find(|m| registry.mote(**m).is_none()) {
            return Err(sc
                .invalid("report_motes", format!("mote {m} is not in the registry"))
                .into());
        }

        let mut environment = match single(&doc, "environment")? {
            Some(s) => EnvironmentModel::from_section(s).map_err(|e| ScenarioError::Config(e.to_string()))?,
            None => EnvironmentModel {
                origin: start,
                ..EnvironmentModel::default()
            },
        };
        for s in doc.sections_named("rain") {
            environment.add_rain(rain_from_section(s).map_err(|e| ScenarioError::Config(e.to_string()))?);
        }

        let mut beacon_link = LinkModel::default();
        let mut overrides = Vec::new();
        for s in doc.sections_named("beacon_link") {
            if s.get("mote_id").is_some() {
                overrides.push(s);
            } else {
                beacon_link = link_from_section(s, &LinkModel::default())?;
            }
        }
        let mut beacon_overrides = BTreeMap::new();
        for s in overrides {
            let id: MoteId = s.parse("mote_id")?;
            if registry.mote(id).is_none() {
                return Err(s.invalid("mote_id", format!("mote {id} is not in the registry")).into());
            }
            beacon_overrides.insert(id, link_from_section(s, &beacon_link)?);
        }
        let download_link = match single(&doc, "download_link")? {
            Some(s) => link_from_section(s, &LinkModel::default())?,
            None => LinkModel::default(),
        };
        let mut policy = DownloadPolicy::default();
        if let Some(s) = single(&doc, "download_policy")? {
            s.check_keys(&[
                "status_timeout_min",
                "max_retries_per_packet",
                "bulk_packet_s",
                "request_rtt_s",
            ])?;
            let timeout: i64 = s.parse_or("status_timeout_min", policy.status_timeout.num_minutes())?;
            policy.status_timeout = Duration::minutes(timeout);
            policy.max_retries_per_packet = s.parse_or("max_retries_per_packet", policy.max_retries_per_packet)?;
            policy.bulk_packet_s = s.parse_or("bulk_packet_s", policy.bulk_packet_s)?;
            policy.request_rtt_s = s.parse_or("request_rtt_s", policy.request_rtt_s)?;
        }

        let mut battery = BatteryModel::default();
        let mut battery_t_ref_c = 20.0;
        if let Some(s) = single(&doc, "battery")? {
            s.check_keys(&[
                "cells",
                "capacity_mah",
                "v_full_cell",
                "v_cutoff_cell",
                "flash_floor_pack",
                "radio_floor_pack",
                "temp_coeff_mv_per_c",
                "t_ref_c",
            ])?;
            battery = BatteryModel {
                cells: s.parse_or("cells", battery.cells)?,
                capacity_mah: s.parse_or("capacity_mah", battery.capacity_mah)?,
                v_full_cell: s.parse_or("v_full_cell", battery.v_full_cell)?,
                v_cutoff_cell: s.parse_or("v_cutoff_cell", battery.v_cutoff_cell)?,
                flash_floor_pack: s.parse_or("flash_floor_pack", battery.flash_floor_pack)?,
                radio_floor_pack: s.parse_or("radio_floor_pack", battery.radio_floor_pack)?,
                temp_coeff_mv_per_c: s.parse_or("temp_coeff_mv_per_c", battery.temp_coeff_mv_per_c)?,
            };
            battery
                .validate()
                .map_err(|e| ScenarioError::Config(format!("line {}: [battery] {e}", s.line)))?;
            battery_t_ref_c = s.parse_or("t_ref_c", battery_t_ref_c)?;
        }

        Ok(Scenario {
            name: sc.text_or("name", "scenario"),
            seed: sc.parse("seed")?,
            start,
            duration: days(sc, "duration_days")?,
            sample_interval_s,
            download_interval: days(sc, "download_interval_days")?,
            adc_noise_counts,
            grid_step_s,
            report_step_s,
            report_motes,
            registry,
            registry_text,
            environment,
            beacon_link,
            beacon_overrides,
            download_link,
            policy,
            battery,
            battery_t_ref_c,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, |name| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| ScenarioError::Config(format!("{}: {e}", p.display())))
        })
    }

    /// The bundled two-week olin deployment.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_SCENARIO, |name| match name {
            BUNDLED_SITE_NAME => Ok(BUNDLED_SITE.to_string()),
            other => Err(ScenarioError::Config(format!("no bundled site file {other}"))),
        })
        .expect("bundled scenario is valid")
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + self.duration
    }

    fn beacon_link_for(&self, mote: MoteId) -> &LinkModel {
        self.beacon_overrides.get(&mote).unwrap_or(&self.beacon_link)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_SENSING: u64 = 0;
const STREAM_BEACON: u64 = 1;
const STREAM_DOWNLOAD: u64 = 2;
const STREAM_WEATHER: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadLog {
    pub download_id: u64,
    pub mote_id: MoteId,
    pub at: DateTime<Utc>,
    pub since_seq: u64,
    pub records: usize,
    pub outcome: String,
    pub stats: DownloadStats,
    /// Records overwritten in flash before the gateway got to them.
    pub evicted: u64,
    pub file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BeaconLog {
    pub sent: u64,
    pub heard: u64,
}

impl BeaconLog {
    pub fn delivery_ratio(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.heard as f64 / self.sent as f64
        }
    }
}

/// Everything the field side of a scenario produces.
#[derive(Debug, Clone)]
pub struct Simulation {
    /// `(file name, contents)` in download order.
    pub level0: Vec<(String, String)>,
    pub downloads: Vec<DownloadLog>,
    pub beacons: BTreeMap<MoteId, BeaconLog>,
    pub motes: Vec<MoteState>,
    pub health: HealthTable,
    pub weather: Vec<WeatherDay>,
}

/// Runs every mote and the visiting gateway over the scenario period.
pub fn simulate(sc: &Scenario) -> Result<Simulation, ScenarioError> {
    let end = sc.end();
    let mut motes = Vec::new();
    let mut sense_rngs = Vec::new();
    let mut beacon_links = Vec::new();
    let mut beacon_rngs = Vec::new();
    for m in sc.registry.motes() {
        let id = u64::from(m.mote_id);
        let mut state = MoteState::from_registry(&sc.registry, m.mote_id, sc.start)
            .and_then(|s| s.with_adc_noise(sc.adc_noise_counts))
            .map_err(runtime)?;
        state.set_sample_interval(sc.sample_interval_s).map_err(runtime)?;
        state.battery_model = sc.battery.clone();
        state.battery_t_ref_c = sc.battery_t_ref_c;
        state.battery.voltage = sc.battery.pack_full();
        motes.push(state);
        sense_rngs.push(stream(sc.seed, id * 4 + STREAM_SENSING));
        beacon_rngs.push(stream(sc.seed, id * 4 + STREAM_BEACON));
        beacon_links.push(Link::new(sc.beacon_link_for(m.mote_id).clone()).map_err(runtime)?);
    }
    let mut download_link = Link::new(sc.download_link.clone()).map_err(runtime)?;
    let mut download_rng = stream(sc.seed, STREAM_DOWNLOAD);
    let mut health = HealthTable::default();
    let mut beacons: BTreeMap<MoteId, BeaconLog> = motes.iter().map(|m| (m.mote_id, BeaconLog::default())).collect();

    let mut visits = Vec::new();
    let mut t = sc.start + sc.download_interval;
    while t < end {
        visits.push(t);
        t += sc.download_interval;
    }
    visits.push(end);

    let mut level0 = Vec::new();
    let mut downloads = Vec::new();
    let mut next_download_id = 1u64;
    let period = Duration::seconds(i64::from(motes.first().map_or(120, |m| m.radio.status_period_s)));

    let run_until = |i: usize,
                     until: DateTime<Utc>,
                     motes: &mut Vec<MoteState>,
                     health: &mut HealthTable,
                     beacons: &mut BTreeMap<MoteId, BeaconLog>,
                     sense: &mut Vec<ChaCha8Rng>,
                     links: &mut Vec<Link>,
                     brngs: &mut Vec<ChaCha8Rng>| {
        let emissions = motes[i].advance(&sc.environment, &mut sense[i], until);
        let log = beacons.get_mut(&motes[i].mote_id).expect("every mote logged");
        for e in emissions {
            if let Emission::Beacon { at, status, .. } = e {
                log.sent += 1;
                let d = links[i].transmit(&mut brngs[i]);
                if let (true, Some(lqi)) = (d.is_intact(), d.lqi) {
                    log.heard += 1;
                    health.handle_status(&status, lqi, at);
                }
            }
        }
    };

    for visit in visits {
        for i in 0..motes.len() {
            run_until(
                i,
                visit,
                &mut motes,
                &mut health,
                &mut beacons,
                &mut sense_rngs,
                &mut beacon_links,
                &mut beacon_rngs,
            );
            let mote_id = motes[i].mote_id;
            let mut since = motes[i].downloaded_through();
            let mut evicted = 0;
            let mut attempt = 0;
            loop {
                let at = motes[i].now_utc();
                let result = run_download(
                    &health,
                    &mut motes[i],
                    since,
                    &mut download_link,
                    &mut download_rng,
                    &sc.policy,
                );
                let mut log = DownloadLog {
                    download_id: 0,
                    mote_id,
                    at,
                    since_seq: since,
                    records: 0,
                    outcome: String::new(),
                    stats: DownloadStats::default(),
                    evicted,
                    file: None,
                };
                match result {
                    Ok(dl) => {
                        log.download_id = next_download_id;
                        next_download_id += 1;
                        log.records = dl.records.len();
                        log.stats = *dl.stats();
                        log.outcome = "ok".into();
                        if !dl.records.is_empty() {
                            let name = format!("d{:04}_m{}.csv", log.download_id, mote_id);
                            let text = level0_csv(&dl.records, mote_id, dl.epoch, log.download_id, dl.anchor)
                                .map_err(runtime)?;
                            level0.push((name.clone(), text));
                            log.file = Some(name);
                        }
                        downloads.push(log);
                        break;
                    }
                    Err(DownloadError::Evicted { tail_seq, lost }) => {
                        evicted += lost;
                        since = tail_seq;
                        continue;
                    }
                    Err(DownloadError::Unreachable { .. }) if attempt + 1 < VISIT_ATTEMPTS && at < end => {
                        attempt += 1;
                        let until = (at + period).min(end);
                        run_until(
                            i,
                            until,
                            &mut motes,
                            &mut health,
                            &mut beacons,
                            &mut sense_rngs,
                            &mut beacon_links,
                            &mut beacon_rngs,
                        );
                        continue;
                    }
                    Err(e) => {
                        log.outcome = match &e {
                            DownloadError::Unreachable { .. } => "unreachable".into(),
                            DownloadError::BeyondHead { .. } => "nothing new".into(),
                            DownloadError::Aborted { seq, session, .. } => {
                                log.stats = session.stats;
                                format!("aborted at seq {seq}")
                            }
                            DownloadError::Evicted { .. } => unreachable!("handled above"),
                        };
                        downloads.push(log);
                        break;
                    }
                }
            }
        }
    }
    let weather = synthesize_weather(sc);
    Ok(Simulation {
        level0,
        downloads,
        beacons,
        motes,
        health,
        weather,
    })
}

/// Daily weather consistent with the environment model: temperature range
/// from the air cycle, precipitation from the rain events, humidity and
/// pressure with seeded jitter.
pub fn synthesize_weather(sc: &Scenario) -> Vec<WeatherDay> {
    let mut rng = stream(sc.seed, STREAM_WEATHER);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let env = &sc.environment;
    let first = sc.start.date_naive();
    let last = (sc.end() - Duration::seconds(1)).date_naive();
    let mut out = Vec::new();
    let mut d: NaiveDate = first;
    while d <= last {
        let midnight = d.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
        let temps: Vec<f64> = (0..144)
            .map(|k| env.air_temp_c(midnight + Duration::minutes(10 * k)))
            .collect();
        let tmin = temps.iter().copied().fold(f64::INFINITY, f64::min);
        let tmax = temps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tavg = temps.iter().sum::<f64>() / temps.len() as f64;
        let precip = env.rain_between(midnight, midnight + Duration::days(1));
        let humidity = (62.0 + 1.5 * precip + 4.0 * jitter.sample(&mut rng)).clamp(20.0, 100.0);
        let pressure = 1016.0 - 0.6 * precip + 3.0 * jitter.sample(&mut rng);
        let mut events = std::collections::BTreeSet::new();
        if precip > 0.0 {
            events.insert(if tavg < 0.0 {
                WeatherEvent::Snow
            } else {
                WeatherEvent::Rain
            });
        }
        if precip >= 15.0 {
            events.insert(WeatherEvent::Thunderstorm);
        }
        if precip == 0.0 && humidity >= 85.0 && rng.random::<f64>() < 0.5 {
            events.insert(WeatherEvent::Fog);
        }
        out.push(WeatherDay {
            date: d,
            tmin_c: tmin,
            tmax_c: tmax,
            tavg_c: tavg,
            precipitation_mm: precip,
            humidity_pct: humidity,
            pressure_hpa: pressure,
            events,
        });
        d += Duration::days(1);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineSummary {
    pub staged: usize,
    pub duplicates_dropped: usize,
    pub promoted: usize,
    pub quarantined: usize,
    pub calibrated: usize,
    pub calibration_skipped: usize,
    pub cells: usize,
    pub report_cells: usize,
    pub weather_days: usize,
}

/// Loads the simulation's Level-0 files and weather into a fresh store,
/// then calibrates and grids. Load times are the download times, never
/// the wall clock.
pub fn run_pipeline(sc: &Scenario, sim: &Simulation) -> Result<(Store, PipelineSummary), ScenarioError> {
    let mut store = Store::new();
    let mut summary = PipelineSummary::default();
    let load_times: BTreeMap<&str, DateTime<Utc>> = sim
        .downloads
        .iter()
        .filter_map(|d| d.file.as_deref().map(|f| (f, d.at)))
        .collect();
    for (name, text) in &sim.level0 {
        let staged = stage_text(text, name, &mut store).map_err(runtime)?;
        summary.staged += staged.staged;
        summary.duplicates_dropped += staged.duplicates_dropped;
        if staged.staged == 0 {
            continue;
        }
        let v = store.next_load_version();
        let at = load_times.get(name.as_str()).copied().unwrap_or(sc.end());
        let p = promote_level1(&mut store, &sc.registry, v, at).map_err(runtime)?;
        summary.promoted += p.promoted;
        summary.quarantined += p.quarantined;
    }
    let v = store.next_load_version();
    let cal = calibrate_pending(&mut store, &sc.registry, v, sc.end()).map_err(runtime)?;
    summary.calibrated = cal.calibrated;
    summary.calibration_skipped = cal.skipped();
    let w = ingest_weather_text(&weather_csv(&sim.weather), &mut store).map_err(runtime)?;
    summary.weather_days = w.days;
    summary.cells = grid_dataseries(&mut store, sc.grid_step_s, GapPolicy::Missing).map_err(runtime)?;
    if sc.report_step_s != sc.grid_step_s {
        summary.report_cells = grid_dataseries(&mut store, sc.report_step_s, GapPolicy::Missing).map_err(runtime)?;
    }
    Ok((store, summary))
}

pub const DOWNLOADS_HEADER: &str = "download_id,mote_id,at,since_seq,records,outcome,evicted,packets_expected,\
packets_received_bulk,bulk_losses,retransmission_requests,max_retries_for_one_packet,control_retries,duration_s,file";

pub fn downloads_csv(logs: &[DownloadLog]) -> String {
    let mut out = String::from(DOWNLOADS_HEADER);
    out.push('\n');
    for d in logs {
        let s = &d.stats;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{}",
            d.download_id,
            d.mote_id,
            d.at.format("%Y-%m-%dT%H:%M:%SZ"),
            d.since_seq,
            d.records,
            d.outcome,
            d.evicted,
            s.packets_expected,
            s.packets_received_bulk,
            s.bulk_losses,
            s.retransmission_requests,
            s.max_retries_for_one_packet,
            s.control_retries,
            s.duration_s,
            d.file.as_deref().unwrap_or("")
        );
    }
    out
}

pub fn beacons_csv(beacons: &BTreeMap<MoteId, BeaconLog>) -> String {
    let mut out = String::from("mote_id,sent,heard,delivery_ratio\n");
    for (id, b) in beacons {
        let _ = writeln!(out, "{id},{},{},{:.4}", b.sent, b.heard, b.delivery_ratio());
    }
    out
}

/// Per-mote ledger next to the closed-form budget for the same period.
/// `budget_mah` covers sampling and beaconing only; downloads are extra.
pub fn energy_csv(sc: &Scenario, motes: &[MoteState]) -> String {
    let budget = CurrentBudget::for_schedule(f64::from(sc.sample_interval_s), 120.0);
    let hours = sc.duration.num_milliseconds() as f64 / 3.6e6;
    let budget_mah = total_avg_current(&budget) * hours;
    let days = hours / 24.0;
    let mut out = String::from(
        "mote_id,samples,windows,sensing_mah,radio_mah,download_mah,total_mah,budget_mah,ledger_vs_budget,radio_on_min_per_day,battery_v\n",
    );
    for m in motes {
        let l = &m.ledger;
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.5},{:.3},{:.4}",
            m.mote_id,
            l.samples_taken,
            l.windows_opened,
            l.sensing_mah,
            l.radio_mah,
            l.download_mah,
            l.total_mah(),
            budget_mah,
            (l.sensing_mah + l.radio_mah) / budget_mah,
            l.radio_on_s / 60.0 / days,
            m.battery.voltage
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub downloads_ok: usize,
    pub downloads_failed: usize,
    pub records_downloaded: usize,
    pub beacons_sent: u64,
    pub beacons_heard: u64,
    pub pipeline: PipelineSummary,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<PathBuf>,
}

/// Simulates, ingests and reports, writing everything under `out_dir`.
pub fn run_scenario(sc: &Scenario, out_dir: impl AsRef<Path>) -> Result<ScenarioReport, ScenarioError> {
    let out = out_dir.as_ref();
    let sim = simulate(sc)?;
    let (store, pipeline) = run_pipeline(sc, &sim)?;
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let mut write = |rel: &str, bytes: &str| -> Result<(), ScenarioError> {
        let p = out.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&p, bytes)?;
        artifacts.push(PathBuf::from(rel));
        Ok(())
    };
    for (name, text) in &sim.level0 {
        write(&format!("level0/{name}"), text)?;
    }
    write("site.conf", &sc.registry_text)?;
    write("weather.csv", &weather_csv(&sim.weather))?;
    write("downloads.csv", &downloads_csv(&sim.downloads))?;
    write("beacons.csv", &beacons_csv(&sim.beacons))?;
    write("energy.csv", &energy_csv(sc, &sim.motes))?;

    let cube = Cube::from_store(&store, &sc.registry).map_err(runtime)?;
    let snapshots = [
        (
            "cube/soil_moisture_daily_by_mote.csv",
            CubeQuery::new(Measure::Sensor(SensorType::SoilMoisture), Aggregate::Average)
                .by(TimeLevel::Date, LocationLevel::Mote),
        ),
        (
            "cube/soil_temperature_hour_of_day.csv",
            CubeQuery::new(Measure::Sensor(SensorType::SoilTemperature), Aggregate::Average)
                .cyclic(CyclicGroup::HourOfDay),
        ),
        (
            "cube/box_temperature_weekly_stddev.csv",
            CubeQuery::new(Measure::Sensor(SensorType::BoxTemperature), Aggregate::Stddev)
                .by(TimeLevel::Week, LocationLevel::Patch),
        ),
        (
            "cube/precipitation_daily.csv",
            CubeQuery::new(Measure::Weather(WeatherField::PrecipitationMm), Aggregate::Max)
                .by(TimeLevel::Date, LocationLevel::Site),
        ),
    ];
    for (rel, q) in snapshots {
        write(rel, &results_csv(&cube.query(&q).map_err(runtime)?))?;
    }

    let chart = Chart {
        title: format!("Soil moisture, {} h averages, {}", sc.report_step_s / 3600, sc.name),
        y_label: "soil water tension (kPa)".into(),
        series: dataseries_series(
            &store,
            &sc.registry,
            SensorType::SoilMoisture,
            sc.report_step_s,
            &sc.report_motes,
        ),
        weather: store.weather().cloned().collect(),
    };
    write("report/moisture.csv", &render_series(&chart, ReportFormat::Csv))?;
    write("report/moisture.svg", &render_series(&chart, ReportFormat::Svg))?;

    store.save(out.join("store")).map_err(runtime)?;
    let mut tables: Vec<PathBuf> = std::fs::read_dir(out.join("store"))?
        .filter_map(|e| e.ok())
        .map(|e| PathBuf::from("store").join(e.file_name()))
        .collect();
    artifacts.append(&mut tables);
    artifacts.sort();

    let ok = sim.downloads.iter().filter(|d| d.outcome == "ok").count();
    Ok(ScenarioReport {
        downloads_ok: ok,
        downloads_failed: sim.downloads.len() - ok,
        records_downloaded: sim.downloads.iter().map(|d| d.records).sum(),
        beacons_sent: sim.beacons.values().map(|b| b.sent).sum(),
        beacons_heard: sim.beacons.values().map(|b| b.heard).sum(),
        pipeline,
        artifacts,
    })
}
