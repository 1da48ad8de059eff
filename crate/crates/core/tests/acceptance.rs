//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use soilnet::channel::{Link, LinkModel};
use soilnet::collector::{level0_csv, run_download, DownloadPolicy, HealthTable};
use soilnet::cube::Cube;
use soilnet::energy::{
    consumed_from_voltage, consumed_mah, predict_lifetime_days, total_avg_current, BatteryModel, CurrentBudget,
    LifetimeStop,
};
use soilnet::mote::{ChannelModel, Emission, EnvironmentModel, MoteState};
use soilnet::pipeline::convert::{fit_watermark, watermark_kpa, WatermarkCoeffs, WatermarkPoint};
use soilnet::pipeline::store::BadDataInterval;
use soilnet::pipeline::{calibrate_pending, grid_dataseries, mark_bad, promote_level1, stage_text, GapPolicy, Store};
use soilnet::registry::{Registry, SensorType};
use soilnet::scenario::{run_scenario, Scenario, BUNDLED_SITE};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2006, 1, 8, 0, 0, 0).unwrap()
}

fn photo_mote() -> (MoteState, EnvironmentModel) {
    let env = EnvironmentModel {
        origin: t0(),
        ..EnvironmentModel::default()
    };
    (MoteState::new(51, t0(), [ChannelModel::Photo; 5]), env)
}

fn c1_download_completeness() -> Verdict {
    const RECORDS: i64 = 11_811;
    let started = Instant::now();
    let (mut mote, env) = photo_mote();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    mote.advance(&env, &mut rng, t0() + Duration::minutes(RECORDS));
    let mut table = HealthTable::default();
    table.handle_status(&mote.make_status(), 100.0, mote.now_utc());
    let policy = DownloadPolicy {
        max_retries_per_packet: u32::MAX,
        ..DownloadPolicy::default()
    };
    let want: Vec<u64> = (0..RECORDS as u64).collect();
    let mut failures = Vec::new();
    let mut losses_0058 = Vec::new();
    for loss in [0.0, 0.058, 0.3, 0.67] {
        for seed in 0..20u64 {
            let mut m = mote.clone();
            let mut link = Link::new(LinkModel::with_loss(loss)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match run_download(&table, &mut m, 0, &mut link, &mut rng, &policy) {
                Ok(d) => {
                    let got: Vec<u64> = d.records.iter().map(|r| r.seq).collect();
                    if got != want {
                        failures.push(format!(
                            "loss {loss} seed {seed}: {} records, not 0..{RECORDS}",
                            got.len()
                        ));
                    }
                    if loss == 0.058 {
                        losses_0058.push(d.stats().bulk_losses as f64);
                    }
                }
                Err(e) => failures.push(format!("loss {loss} seed {seed}: {e}")),
            }
        }
    }
    let mean = losses_0058.iter().sum::<f64>() / losses_0058.len().max(1) as f64;
    let secs = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && (mean - 689.0).abs() <= 76.0 && secs < 30.0;
    verdict(
        pass,
        format!(
            "80 downloads gap-free: {}; mean bulk losses at 5.8% = {mean:.1} (689 +/- 76); {secs:.2} s{}",
            failures.is_empty(),
            failures
                .first()
                .map(|f| format!("; first failure: {f}"))
                .unwrap_or_default()
        ),
    )
}

fn c2_delivery_ratio() -> Verdict {
    let started = Instant::now();
    let link = Scenario::bundled().beacon_link;
    let (mut mote, env) = photo_mote();
    let mut sense = ChaCha8Rng::seed_from_u64(1);
    let mut air = ChaCha8Rng::seed_from_u64(2);
    let mut link = Link::new(link).unwrap();
    let mut table = HealthTable::default();
    let mut sent = 0u64;
    for day in 1..=24 {
        for e in mote.advance(&env, &mut sense, t0() + Duration::days(day)) {
            if let Emission::Beacon { at, status, .. } = e {
                sent += 1;
                let d = link.transmit(&mut air);
                if let (true, Some(lqi)) = (d.is_intact(), d.lqi) {
                    table.handle_status(&status, lqi, at);
                }
            }
        }
    }
    let heard = table.get(51).map_or(0, |h| h.beacons_received);
    let ratio = heard as f64 / sent as f64;
    let secs = started.elapsed().as_secs_f64();
    let loss = link.model().loss_prob;
    verdict(
        sent >= 100_000 && (0.29..=0.34).contains(&ratio) && loss == 0.67 && secs < 10.0,
        format!("{heard} of {sent} beacons heard at loss {loss}: ratio {ratio:.4} in [0.29, 0.34]; {secs:.2} s"),
    )
}

fn c3_flash_arithmetic() -> Verdict {
    let (mut mote, env) = photo_mote();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    mote.advance(&env, &mut rng, t0() + Duration::days(1));
    let daily = mote.flash.bytes_used();
    let full_at = t0() + Duration::minutes(32_768);
    mote.advance(&env, &mut rng, full_at);
    let records_full = mote.flash.head_seq();
    let clean_when_full = mote.flash.overwritten_count() == 0;
    mote.advance(&env, &mut rng, full_at + Duration::minutes(1));
    let first_overwrite = mote.flash.overwritten_count() == 1 && mote.flash.tail_seq() == 1;
    let days = 32_768.0 * 60.0 / 86_400.0;
    verdict(
        daily == 23_040 && records_full == 32_768 && clean_when_full && first_overwrite,
        format!(
            "daily growth {daily} bytes; {records_full} records without overwrite, first overwrite at record 32769: {first_overwrite}; buffer spans {days:.2} days"
        ),
    )
}

fn c4_energy_closed_form() -> Verdict {
    let total = total_avg_current(&CurrentBudget::deployed());
    let shown = format!("{total:.3}");
    let i: f64 = shown.parse().unwrap();
    let battery = BatteryModel::default();
    let c70 = consumed_mah(i, 70.0 * 24.0).unwrap();
    let v70 = consumed_from_voltage(0.2, &battery).unwrap();
    let c7 = consumed_mah(i, 7.0 * 24.0).unwrap();
    let v7 = consumed_from_voltage(0.02, &battery).unwrap();
    let r1 = format!("{c70:.1}") == "618.2" && format!("{v70:.1}") == "628.6";
    let rel70 = (c70 - v70).abs() / 629.0;
    let quoted70 = (v70 - 629.0).abs() / 629.0;
    let rel7 = (c7 - v7).abs() / 62.8;
    let quoted7 = (v7 - 62.8).abs() / 62.8;
    verdict(
        shown == "0.368" && r1 && rel70 <= 0.02 && quoted70 <= 0.02 && rel7 <= 0.02 && quoted7 <= 0.02,
        format!(
            "total {shown} mA ({total:.6}); 70 d {c70:.1} vs {v70:.1} mAh ({:.2}% of 629); week {c7:.1} vs {v7:.1} mAh ({:.2}%)",
            100.0 * rel70,
            100.0 * rel7
        ),
    )
}

fn c5_ledger() -> Verdict {
    let reg: Registry = BUNDLED_SITE.parse().unwrap();
    let env = Scenario::bundled().environment;
    let mut mote = MoteState::from_registry(&reg, 51, t0()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    mote.advance(&env, &mut rng, t0() + Duration::days(1));
    let ledger = mote.ledger.total_mah();
    let closed = total_avg_current(&CurrentBudget::deployed()) * 24.0;
    let rel = (ledger - closed).abs() / closed;
    let radio_min = mote.ledger.radio_on_s / 60.0;
    verdict(
        rel <= 0.005 && (22.8..=22.8 * 1.05).contains(&radio_min),
        format!(
            "ledger {ledger:.4} mAh vs closed form {closed:.4} mAh ({:.3}%); radio on {radio_min:.2} min/day",
            100.0 * rel
        ),
    )
}

fn c6_lifetime() -> Verdict {
    let i = total_avg_current(&CurrentBudget::deployed());
    let days = predict_lifetime_days(&BatteryModel::default(), i, LifetimeStop::FlashFloor).unwrap();
    verdict(
        (130.0..=155.0).contains(&days),
        format!("{days:.1} days to the 2.2 V flash floor, band [130, 155]"),
    )
}

/// Largest moisture error a reading can carry: the regression evaluated at
/// the corners of half a count either side of the ideal reading and the
/// temperature error either side of the truth.
fn moisture_bound(ideal: f64, divider: f64, true_t: f64, t_err: f64, k: &WatermarkCoeffs, truth: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for dc in [-0.5, 0.5] {
        let c = (ideal + dc).clamp(0.0, 1022.999);
        let r = divider * c / (1023.0 - c);
        for dt in [-t_err, t_err] {
            if let Ok(v) = watermark_kpa(r, true_t + dt, k) {
                worst = worst.max((v - truth).abs());
            }
        }
    }
    worst
}

/// Soil and air temperature, moisture, and the ideal moisture and soil
/// temperature counts at a sample instant.
type Truth = (f64, f64, f64, f64, f64);

fn c7_calibration_round_trip() -> Verdict {
    let sc = Scenario::bundled();
    let reg = &sc.registry;
    let env = &sc.environment;
    let start = sc.start;
    let end = start + Duration::days(7);
    let mut store = Store::new();
    let mut truth: BTreeMap<(u32, DateTime<Utc>), Truth> = BTreeMap::new();
    let soil_slot = SensorType::SoilTemperature.reading_slot();
    let moist_slot = SensorType::SoilMoisture.reading_slot();
    for (k, m) in reg.motes().enumerate() {
        let mut mote = MoteState::from_registry(reg, m.mote_id, start).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for e in mote.advance(env, &mut rng, end) {
            if let Emission::Sample { at, .. } = e {
                truth.insert(
                    (m.mote_id, at),
                    (
                        env.soil_temp_c(at),
                        env.air_temp_c(at),
                        env.soil_moisture_kpa(at),
                        mote.ideal_count(moist_slot, env, at),
                        mote.ideal_count(soil_slot, env, at),
                    ),
                );
            }
        }
        let recs = mote.flash.read_range(0, mote.flash.head_seq()).unwrap();
        let anchor = soilnet::collector::TimeAnchor {
            mote_time_s: mote.clock_s(),
            utc: mote.now_utc(),
        };
        let text = level0_csv(&recs, m.mote_id, 0, k as u64 + 1, anchor).unwrap();
        stage_text(&text, "week", &mut store).unwrap();
    }
    let v = store.next_load_version();
    promote_level1(&mut store, reg, v, end).unwrap();
    let v = store.next_load_version();
    calibrate_pending(&mut store, reg, v, end).unwrap();

    let mut soil_t: BTreeMap<(u32, DateTime<Utc>), f64> = BTreeMap::new();
    let (mut n_t, mut n_m, mut worst_t, mut worst_m_excess) = (0usize, 0usize, 0.0f64, f64::NEG_INFINITY);
    let mut failures = Vec::new();
    for c in store.calibrated() {
        let s = reg.sensor(&c.sensor_id).unwrap();
        let (ts, ta, _, _, _) = truth[&(s.mote_id, c.utc)];
        let want = match s.sensor_type {
            SensorType::SoilTemperature => ts,
            SensorType::BoxTemperature => ta,
            _ => continue,
        };
        n_t += 1;
        worst_t = worst_t.max((c.value - want).abs());
        if s.sensor_type == SensorType::SoilTemperature {
            soil_t.insert((s.mote_id, c.utc), c.value);
        }
    }
    let mut patch_t: BTreeMap<(String, i64), (f64, usize)> = BTreeMap::new();
    for (&(mote, at), &t) in &soil_t {
        let patch = reg.patch_of_mote(mote).unwrap().patch_id.clone();
        let e = patch_t.entry((patch, at.timestamp().div_euclid(600))).or_default();
        e.0 += t;
        e.1 += 1;
    }
    for c in store.calibrated() {
        let s = reg.sensor(&c.sensor_id).unwrap();
        if s.sensor_type != SensorType::SoilMoisture {
            continue;
        }
        let (ts, _, kpa, ideal, _) = truth[&(s.mote_id, c.utc)];
        // Motes without a soil thermistor borrow the patch mean over the
        // surrounding ten-minute step.
        let used = soil_t.get(&(s.mote_id, c.utc)).copied().or_else(|| {
            let patch = reg.patch_of_mote(s.mote_id)?.patch_id.clone();
            let (sum, n) = patch_t.get(&(patch, c.utc.timestamp().div_euclid(600)))?;
            Some(sum / *n as f64)
        });
        let t_err = used.map_or(f64::NAN, |t| (t - ts).abs());
        let k = s.calibration.watermark_coeffs.unwrap_or(WatermarkCoeffs::STANDARD);
        let bound = moisture_bound(ideal, s.calibration.divider_ohms(), ts, t_err, &k, kpa);
        let err = (c.value - kpa).abs();
        let bound = if t_err.is_nan() { f64::NAN } else { bound };
        n_m += 1;
        worst_m_excess = worst_m_excess.max(err - bound);
        let within = err <= bound + 1e-9;
        if !within && failures.len() < 3 {
            failures.push(format!(
                "{} at {}: error {err:.4} > bound {bound:.4}",
                c.sensor_id, c.utc
            ));
        }
    }
    let expected_t = reg
        .sensors()
        .filter(|s| matches!(s.sensor_type, SensorType::SoilTemperature | SensorType::BoxTemperature))
        .count()
        * 7
        * 1440;
    let expected_m = reg
        .sensors()
        .filter(|s| s.sensor_type == SensorType::SoilMoisture)
        .count()
        * 7
        * 1440;

    // Generate-then-fit on seeded synthetic grids.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_fit: f64 = 0.0;
    for _ in 0..50 {
        let base = WatermarkCoeffs::STANDARD.c;
        let k = WatermarkCoeffs {
            c: base.map(|c| c * rng.random_range(0.7..1.3)),
        };
        let temps = [
            rng.random_range(0.0..8.0),
            rng.random_range(14.0..22.0),
            rng.random_range(28.0..35.0),
        ];
        let rs = [
            rng.random_range(1_000.0..4_000.0),
            rng.random_range(6_000.0..12_000.0),
            rng.random_range(18_000.0..30_000.0),
        ];
        let pts: Vec<WatermarkPoint> = temps
            .iter()
            .flat_map(|&t| rs.iter().map(move |&r| (r, t)))
            .map(|(r, t)| WatermarkPoint {
                r_ohms: r,
                temp_c: t,
                kpa: watermark_kpa(r, t, &k).unwrap(),
            })
            .collect();
        let fit = fit_watermark(&pts).unwrap();
        for (g, w) in fit.coeffs.c.iter().zip(k.c) {
            worst_fit = worst_fit.max((g - w).abs() / w.abs());
        }
    }
    verdict(
        n_t == expected_t && n_m == expected_m && worst_t <= 0.25 && failures.is_empty() && worst_fit <= 1e-6,
        format!(
            "{n_t} temperatures, worst error {worst_t:.4} C (<= 0.25); {n_m} moisture values, worst excess over slope bound {worst_m_excess:.2e} kPa; worst fit error {worst_fit:.1e} relative{}",
            failures.first().map(|f| format!("; {f}")).unwrap_or_default()
        ),
    )
}

/// Calibrated values and measured cells touching masked measurements.
fn bad_leaks(store: &Store) -> usize {
    let bad: BTreeSet<(&str, DateTime<Utc>)> = store
        .measurements()
        .iter()
        .filter(|m| m.is_bad)
        .map(|m| (m.sensor_id.as_str(), m.utc))
        .collect();
    let cal = store
        .calibrated()
        .iter()
        .filter(|c| bad.contains(&(c.sensor_id.as_str(), c.utc)))
        .count();
    let cells = store
        .dataseries()
        .iter()
        .filter(|c| !c.interpolated)
        .filter(|c| {
            bad.range((c.sensor_id.as_str(), c.start())..(c.sensor_id.as_str(), c.end()))
                .next()
                .is_some()
        })
        .count();
    cal + cells
}

fn c8_pipeline_hygiene() -> Verdict {
    let reg: Registry = BUNDLED_SITE.parse().unwrap();
    let load = Utc.with_ymd_and_hms(2006, 6, 1, 0, 0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (files, rows) = random_level0(&mut rng, &reg, 10_000);

    let mut store = Store::new();
    let mut staged = 0;
    for f in &files {
        staged += stage_text(f, "first", &mut store).unwrap().staged;
    }
    let v = store.next_load_version();
    promote_level1(&mut store, &reg, v, load).unwrap();
    let purged = store.staging().is_empty();
    let before = store.clone();
    let mut restaged = 0;
    for f in &files {
        restaged += stage_text(f, "again", &mut store).unwrap().staged;
    }
    let noop = restaged == 0 && store == before;

    let rebuilt = store.reconstruct_level0().unwrap();
    let mut by_download: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for r in &rebuilt {
        by_download.entry(r.download_id).or_default().push(*r);
    }
    let exact = rebuilt.len() == rows
        && files.iter().all(|f| {
            let id: u64 = f.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
            let rs = &by_download[&id];
            let recs: Vec<_> = rs
                .iter()
                .map(|r| soilnet::mote::SampleRecord::new(r.seq, r.mote_time_s, r.readings).unwrap())
                .collect();
            level0_csv(&recs, rs[0].mote_id, rs[0].epoch, id, rs[0].anchor).unwrap() == *f
        });

    // Masking interleaved with calibration and gridding, over many seeds.
    let sensors: Vec<String> = reg.sensors().map(|s| s.sensor_id.clone()).collect();
    let mut leaks = 0;
    let mut ops = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (files, _) = random_level0(&mut rng, &reg, 1500);
        let mut s = Store::new();
        let mut pending = files.iter();
        for _ in 0..16 {
            ops += 1;
            match rng.random_range(0..4) {
                0 => {
                    if let Some(f) = pending.next() {
                        if stage_text(f, "f", &mut s).unwrap().staged > 0 {
                            let v = s.next_load_version();
                            promote_level1(&mut s, &reg, v, load).unwrap();
                        }
                    }
                }
                1 => {
                    let from = t0() + Duration::minutes(rng.random_range(0..60 * 24 * 90));
                    mark_bad(
                        &mut s,
                        BadDataInterval {
                            sensor_id: sensors[rng.random_range(0..sensors.len())].clone(),
                            start: from,
                            end: from + Duration::minutes(rng.random_range(1..3000)),
                            reason: "acceptance".into(),
                        },
                    )
                    .unwrap();
                }
                2 => {
                    let v = s.next_load_version();
                    calibrate_pending(&mut s, &reg, v, load).unwrap();
                }
                _ => {
                    let step = [600, 3600, 86_400][rng.random_range(0..3)];
                    grid_dataseries(&mut s, step, GapPolicy::Interpolate { max_gap_steps: 2 }).unwrap();
                }
            }
            leaks += bad_leaks(&s);
        }
    }
    verdict(
        purged && noop && exact && leaks == 0 && staged == rows,
        format!(
            "second ingest staged {restaged} rows, store unchanged: {noop}; staging purged: {purged}; {rows} rows rebuilt byte-exact: {exact}; {leaks} masked rows leaked over {ops} operations"
        ),
    )
}

fn c9_cube_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sensors = cube_sensors();
    let registry = cube_registry(&sensors);
    let (raw, cells) = cube_cells(&mut rng, &sensors, 10_000);
    let weather = weather_days(&mut rng, 450);
    let cube = Cube::build(&cells, &weather, &registry).unwrap();
    let mut mismatches = Vec::new();
    let mut aggregates = BTreeSet::new();
    for _ in 0..200 {
        let q = random_query(&mut rng, &sensors);
        aggregates.insert(format!("{:?}", q.aggregate));
        let got = keyed(&cube.query(&q).unwrap());
        let want = brute_force(&q, &sensors, &raw, &weather);
        if let Err(e) = agree(q.aggregate, &got, &want) {
            mismatches.push(format!("{q:?}: {e}"));
        }
    }
    let rollup = check_rollup(&cube, &sensors, false).and_then(|_| check_rollup(&cube, &sensors, true));
    verdict(
        mismatches.is_empty() && rollup.is_ok(),
        format!(
            "200 queries over {} cells ({} aggregates): {} mismatches; rollup: {}",
            cells.len(),
            aggregates.len(),
            mismatches.len(),
            rollup.as_ref().map_or_else(|e| e.clone(), |_| "conserved".into())
        ),
    )
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let sc = Scenario::bundled();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_scenario(&sc, &a).unwrap();
    run_scenario(&sc, &b).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let kinds = |ext: &str| {
        ta.iter()
            .filter(|(p, _)| p.extension().is_some_and(|e| e == ext))
            .count()
    };
    let bytes: usize = ta.iter().map(|(_, b)| b.len()).sum();
    let differing = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .next();
    verdict(
        ta == tb && kinds("svg") > 0 && kinds("tbl") > 0,
        format!(
            "{} files ({} CSV, {} SVG, {} store tables, {bytes} bytes) identical across runs: {}{}",
            ta.len(),
            kinds("csv"),
            kinds("svg"),
            kinds("tbl"),
            ta == tb,
            differing.map(|d| format!("; first difference {d}")).unwrap_or_default()
        ),
    )
}

fn main() {
    type Check = (&'static str, fn() -> Verdict);
    let criteria: [Check; 10] = [
        ("download completeness", c1_download_completeness),
        ("beacon delivery ratio", c2_delivery_ratio),
        ("flash and throughput arithmetic", c3_flash_arithmetic),
        ("energy closed form", c4_energy_closed_form),
        ("ledger vs closed form", c5_ledger),
        ("lifetime band", c6_lifetime),
        ("calibration round trip", c7_calibration_round_trip),
        ("pipeline hygiene", c8_pipeline_hygiene),
        ("cube oracle equivalence", c9_cube_oracle),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
