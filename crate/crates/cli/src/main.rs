//! `soilnet`: simulate a deployment, load and calibrate its data, and query
//! or plot the results.
//!
//! Exit status is 0 on success, 1 for configuration or usage errors and 2
//! for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use soilnet::cube::{
    results_csv, results_json, Aggregate, Cube, CubeQuery, CyclicGroup, Filter, LocationLevel, Measure, TimeLevel,
};
use soilnet::energy::{
    consumed_from_voltage, consumed_mah, predict_lifetime_days, total_avg_current, CurrentBudget, LifetimeStop,
};
use soilnet::pipeline::store::{BadDataInterval, WeatherDay};
use soilnet::pipeline::{
    calibrate_pending, grid_dataseries, ingest_weather, mark_bad, promote_level1, stage_and_dedup, GapPolicy, Store,
};
use soilnet::registry::{load_site_config, MoteId, Registry, SensorType};
use soilnet::report::{dataseries_series, render_results, render_series, Chart, ReportFormat};
use soilnet::scenario::{run_scenario, Scenario, BUNDLED_SITE};

#[derive(Parser)]
#[command(
    name = "soilnet",
    version,
    about = "Soil sensing network simulator and data pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and write every artifact to --out.
    Simulate {
        /// Scenario file; the bundled olin deployment when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage Level-0 CSV files and promote them to Level 1.
    Ingest {
        #[command(flatten)]
        store: StoreArgs,
        /// Load time recorded with this batch; defaults to the newest
        /// download anchor in the files.
        #[arg(long)]
        load_time: Option<DateTime<Utc>>,
        /// Level-0 CSV files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Convert pending measurements to physical units.
    Calibrate {
        #[command(flatten)]
        store: StoreArgs,
        /// Calibration time recorded with this run; defaults to the newest
        /// measurement time.
        #[arg(long)]
        load_time: Option<DateTime<Utc>>,
        /// Flag an interval as bad before calibrating, as
        /// SENSOR@START..END with RFC 3339 times. Repeatable.
        #[arg(long, value_name = "SENSOR@START..END")]
        mark_bad: Vec<String>,
    },
    /// Average calibrated values onto a fixed time grid.
    Grid {
        #[command(flatten)]
        store: StoreArgs,
        /// Grid step in seconds; must divide a day.
        #[arg(long, default_value_t = 600)]
        step: u32,
        /// Fill runs of up to this many empty steps by interpolation.
        #[arg(long, value_name = "MAX_GAP_STEPS")]
        interpolate: Option<u32>,
    },
    /// Load a daily weather CSV.
    Weather {
        #[command(flatten)]
        store: StoreArgs,
        /// Weather CSV file.
        file: PathBuf,
    },
    /// Aggregate gridded cells and weather through the cube.
    Query {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// csv or json.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the current budget, consumption and lifetime estimates.
    Energy {
        /// Scenario file supplying the schedule and battery; the bundled
        /// scenario when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the sampling interval in seconds.
        #[arg(long)]
        sample_interval: Option<f64>,
        /// Status beacon window period in seconds.
        #[arg(long, default_value_t = 120.0)]
        status_interval: f64,
        /// csv or json.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render query results or per-mote series as CSV, JSON or SVG.
    Report {
        #[command(flatten)]
        store: StoreArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// Plot the raw grid of these motes (comma separated) instead of a
        /// cube query; uses --measure and --step.
        #[arg(long, value_delimiter = ',')]
        motes: Vec<MoteId>,
        /// Grid step for --motes, in seconds.
        #[arg(long, default_value_t = 600)]
        step: u32,
        /// Overlay daily precipitation and temperature.
        #[arg(long)]
        weather: bool,
        /// Chart title; the measure name when omitted.
        #[arg(long)]
        title: Option<String>,
        /// csv, json or svg.
        #[arg(long, default_value = "svg")]
        format: String,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StoreArgs {
    /// Store directory.
    #[arg(long)]
    store: PathBuf,
    /// Site registry file; the bundled olin site when omitted.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    /// Sensor type (soil_moisture, soil_temperature, box_temperature,
    /// photo, battery_voltage) or weather field (tmin_c, tmax_c, tavg_c,
    /// precipitation_mm, humidity_pct, pressure_hpa; optional `weather.`
    /// prefix).
    #[arg(long)]
    measure: String,
    /// average, min, max, median, stddev or count.
    #[arg(long, default_value = "average")]
    aggregate: String,
    /// all, year, season, week, date, hour or ten_minute.
    #[arg(long, default_value = "all")]
    time: String,
    /// all, site, patch, mote, sensor, depth or land_cover.
    #[arg(long, default_value = "all")]
    location: String,
    /// Predicate KEY=VALUE; repeatable. Keys: site, patch, mote, sensor,
    /// land_cover, manufacturer, depth=A..B, time=START..END, year,
    /// season, hour=A..B.
    #[arg(long = "filter", value_name = "KEY=VALUE")]
    filters: Vec<String>,
    /// Group by hour_of_day or week_of_year.
    #[arg(long)]
    cyclic: Option<String>,
    /// Include interpolated cells.
    #[arg(long)]
    include_interpolated: bool,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Outcome<()> {
    match command {
        Command::Simulate {
            config: path,
            seed,
            out,
        } => simulate(path.as_deref(), seed, &out),
        Command::Ingest {
            store,
            load_time,
            files,
        } => ingest(&store, load_time, &files),
        Command::Calibrate {
            store,
            load_time,
            mark_bad,
        } => calibrate(&store, load_time, &mark_bad),
        Command::Grid {
            store,
            step,
            interpolate,
        } => {
            let mut s = open_store(&store.store)?;
            let gaps = match interpolate {
                Some(max_gap_steps) => GapPolicy::Interpolate { max_gap_steps },
                None => GapPolicy::Missing,
            };
            if step == 0 || 86_400 % step != 0 {
                return Err(config(anyhow!("--step {step} does not divide a day")));
            }
            let n = grid_dataseries(&mut s, step, gaps).map_err(runtime)?;
            s.save(&store.store).map_err(runtime)?;
            println!("{n} cells at {step} s");
            Ok(())
        }
        Command::Weather { store, file } => {
            let mut s = open_store(&store.store)?;
            let r = ingest_weather(&file, &mut s)
                .with_context(|| file.display().to_string())
                .map_err(config)?;
            s.save(&store.store).map_err(runtime)?;
            println!("{} days loaded, {} rows rejected", r.days, r.rejected);
            Ok(())
        }
        Command::Query {
            store,
            query,
            format,
            out,
        } => {
            let format: ReportFormat = format.parse().map_err(config)?;
            let q = build_query(&query)?;
            let results = cube_for(&store)?.query(&q).map_err(config)?;
            let text = match format {
                ReportFormat::Csv => results_csv(&results),
                ReportFormat::Json => results_json(&results),
                ReportFormat::Svg => return Err(config(anyhow!("query writes csv or json; use report for svg"))),
            };
            emit(out.as_deref(), &text)
        }
        Command::Energy {
            config: path,
            sample_interval,
            status_interval,
            format,
            out,
        } => energy(
            path.as_deref(),
            sample_interval,
            status_interval,
            &format,
            out.as_deref(),
        ),
        Command::Report {
            store,
            query,
            motes,
            step,
            weather,
            title,
            format,
            out,
        } => report(&store, &query, &motes, step, weather, title, &format, &out),
    }
}

fn registry(args: &StoreArgs) -> Outcome<Registry> {
    match &args.registry {
        Some(p) => load_site_config(p).map_err(config),
        None => BUNDLED_SITE.parse().map_err(config),
    }
}

fn open_store(dir: &Path) -> Outcome<Store> {
    Store::open(dir)
        .with_context(|| format!("opening store {}", dir.display()))
        .map_err(runtime)
}

fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(runtime)?;
            }
            std::fs::write(p, text)
                .with_context(|| p.display().to_string())
                .map_err(runtime)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(path: Option<&Path>, seed: Option<u64>, out: &Path) -> Outcome<()> {
    let mut sc = match path {
        Some(p) => Scenario::from_file(p).map_err(config)?,
        None => Scenario::bundled(),
    };
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    let r = run_scenario(&sc, out).map_err(|e| if e.is_config() { config(e) } else { runtime(e) })?;
    println!("scenario {} seed {}", sc.name, sc.seed);
    println!(
        "downloads: {} ok, {} failed, {} records",
        r.downloads_ok, r.downloads_failed, r.records_downloaded
    );
    println!(
        "beacons: {} heard of {} ({:.3})",
        r.beacons_heard,
        r.beacons_sent,
        r.beacons_heard as f64 / r.beacons_sent.max(1) as f64
    );
    let p = &r.pipeline;
    println!(
        "pipeline: {} promoted, {} quarantined, {} calibrated, {} skipped, {} cells",
        p.promoted, p.quarantined, p.calibrated, p.calibration_skipped, p.cells
    );
    println!("{} artifacts in {}", r.artifacts.len(), out.display());
    Ok(())
}

fn ingest(args: &StoreArgs, load_time: Option<DateTime<Utc>>, files: &[PathBuf]) -> Outcome<()> {
    let reg = registry(args)?;
    let mut store = open_store(&args.store)?;
    let (mut staged, mut dups, mut malformed) = (0, 0, 0);
    for f in files {
        let r = stage_and_dedup(f, &mut store)
            .with_context(|| f.display().to_string())
            .map_err(config)?;
        staged += r.staged;
        dups += r.duplicates_dropped;
        malformed += r.malformed_dropped;
    }
    println!("{staged} staged, {dups} duplicates dropped, {malformed} malformed");
    if staged == 0 {
        store.save(&args.store).map_err(runtime)?;
        return Ok(());
    }
    let at = load_time
        .or_else(|| store.staging().iter().map(|s| s.row.anchor.utc).max())
        .expect("rows are staged");
    let v = store.next_load_version();
    let p = promote_level1(&mut store, &reg, v, at).map_err(runtime)?;
    store.save(&args.store).map_err(runtime)?;
    println!(
        "load version {}: {} promoted, {} quarantined",
        v, p.promoted, p.quarantined
    );
    Ok(())
}

fn parse_bad(spec: &str) -> Outcome<BadDataInterval> {
    let err = || config(anyhow!("--mark-bad expects SENSOR@START..END, got `{spec}`"));
    let (sensor, range) = spec.split_once('@').ok_or_else(err)?;
    let (a, b) = range.split_once("..").ok_or_else(err)?;
    let t = |s: &str| s.trim().parse::<DateTime<Utc>>().map_err(|_| err());
    Ok(BadDataInterval {
        sensor_id: sensor.trim().to_string(),
        start: t(a)?,
        end: t(b)?,
        reason: "marked from the command line".into(),
    })
}

fn calibrate(args: &StoreArgs, load_time: Option<DateTime<Utc>>, bad: &[String]) -> Outcome<()> {
    let reg = registry(args)?;
    let mut store = open_store(&args.store)?;
    for spec in bad {
        let interval = parse_bad(spec)?;
        if reg.sensor(&interval.sensor_id).is_none() {
            return Err(config(anyhow!("sensor {} is not in the registry", interval.sensor_id)));
        }
        let n = mark_bad(&mut store, interval).map_err(config)?;
        println!("{spec}: {n} measurements flagged");
    }
    let at = load_time
        .or_else(|| store.measurements().iter().map(|m| m.utc).max())
        .unwrap_or(DateTime::UNIX_EPOCH);
    let v = store.next_load_version();
    let r = calibrate_pending(&mut store, &reg, v, at).map_err(runtime)?;
    store.save(&args.store).map_err(runtime)?;
    println!(
        "calibration version {}: {} calibrated, {} deferred or rejected, {} used the patch temperature",
        v,
        r.calibrated,
        r.skipped(),
        r.patch_fallbacks
    );
    Ok(())
}

fn build_query(args: &QueryArgs) -> Outcome<CubeQuery> {
    let measure: Measure = args.measure.parse().map_err(config)?;
    let aggregate: Aggregate = args.aggregate.parse().map_err(config)?;
    let time: TimeLevel = args.time.parse().map_err(config)?;
    let location: LocationLevel = args.location.parse().map_err(config)?;
    let mut q = CubeQuery::new(measure, aggregate).by(time, location);
    for f in &args.filters {
        q = q.filter(Filter::parse(f).map_err(config)?);
    }
    if let Some(c) = &args.cyclic {
        q = q.cyclic(c.parse::<CyclicGroup>().map_err(config)?);
    }
    q.include_interpolated = args.include_interpolated;
    q.validate().map_err(config)?;
    Ok(q)
}

fn cube_for(args: &StoreArgs) -> Outcome<Cube> {
    let reg = registry(args)?;
    let store = open_store(&args.store)?;
    Cube::from_store(&store, &reg).map_err(runtime)
}

fn energy(
    path: Option<&Path>,
    sample_interval: Option<f64>,
    status_interval: f64,
    format: &str,
    out: Option<&Path>,
) -> Outcome<()> {
    let sc = match path {
        Some(p) => Scenario::from_file(p).map_err(config)?,
        None => Scenario::bundled(),
    };
    let sample_s = sample_interval.unwrap_or(f64::from(sc.sample_interval_s));
    if !(sample_s > 0.0 && status_interval > 0.0) {
        return Err(config(anyhow!("intervals must be positive")));
    }
    let budget = CurrentBudget::for_schedule(sample_s, status_interval);
    let i_avg = total_avg_current(&budget);
    let battery = &sc.battery;
    let lifetime = |stop| predict_lifetime_days(battery, i_avg, stop).map_err(runtime);
    let mut rows: Vec<(String, f64, &str)> = Vec::new();
    for c in &budget.components {
        rows.push((format!("{}_avg_current", c.name), c.average_ma(), "mA"));
    }
    rows.push(("total_avg_current".into(), i_avg, "mA"));
    rows.push((
        "consumed_per_day".into(),
        consumed_mah(i_avg, 24.0).map_err(runtime)?,
        "mAh",
    ));
    rows.push((
        "consumed_per_week".into(),
        consumed_mah(i_avg, 168.0).map_err(runtime)?,
        "mAh",
    ));
    rows.push((
        "mah_per_0.1v_cell_drop".into(),
        consumed_from_voltage(0.1, battery).map_err(runtime)?,
        "mAh",
    ));
    rows.push((
        "lifetime_to_flash_floor".into(),
        lifetime(LifetimeStop::FlashFloor)?,
        "days",
    ));
    rows.push((
        "lifetime_to_radio_floor".into(),
        lifetime(LifetimeStop::RadioFloor)?,
        "days",
    ));
    rows.push((
        "lifetime_to_pack_cutoff".into(),
        lifetime(LifetimeStop::PackCutoff)?,
        "days",
    ));

    let text = match format.parse::<ReportFormat>().map_err(config)? {
        ReportFormat::Csv => {
            let mut s = String::from("item,value,unit\n");
            for (name, v, unit) in &rows {
                s.push_str(&format!("{name},{v:.4},{unit}\n"));
            }
            s
        }
        ReportFormat::Json => {
            let items: Vec<serde_json::Value> = rows
                .iter()
                .map(|(name, v, unit)| serde_json::json!({"item": name, "value": v, "unit": unit}))
                .collect();
            let mut s = serde_json::to_string_pretty(&items).map_err(runtime)?;
            s.push('\n');
            s
        }
        ReportFormat::Svg => return Err(config(anyhow!("energy writes csv or json"))),
    };
    emit(out, &text)
}

#[allow(clippy::too_many_arguments)]
fn report(
    args: &StoreArgs,
    query: &QueryArgs,
    motes: &[MoteId],
    step: u32,
    weather: bool,
    title: Option<String>,
    format: &str,
    out: &Path,
) -> Outcome<()> {
    let format: ReportFormat = format.parse().map_err(config)?;
    let reg = registry(args)?;
    let store = open_store(&args.store)?;
    let overlay: Vec<WeatherDay> = if weather {
        store.weather().cloned().collect()
    } else {
        Vec::new()
    };
    let title = title.unwrap_or_else(|| query.measure.clone());
    let y_label = query.measure.clone();
    let text = if motes.is_empty() {
        let q = build_query(query)?;
        let results = Cube::from_store(&store, &reg)
            .map_err(runtime)?
            .query(&q)
            .map_err(config)?;
        render_results(&results, format, &title, &y_label, &overlay).map_err(config)?
    } else {
        let sensor_type: SensorType = query.measure.parse().map_err(|e: String| config(anyhow!(e)))?;
        if let Some(m) = motes.iter().find(|m| reg.mote(**m).is_none()) {
            return Err(config(anyhow!("mote {m} is not in the registry")));
        }
        let chart = Chart {
            title,
            y_label,
            series: dataseries_series(&store, &reg, sensor_type, step, motes),
            weather: overlay,
        };
        render_series(&chart, format)
    };
    emit(Some(out), &text)
}
