//! Result tables and time-series charts.
//!
//! Charts are plain SVG on a fixed 1200 × 400 canvas so the same inputs
//! always give the same bytes. Axis rules:
//!
//! * The plot area spans x 70..1130 and y 30..350.
//! * The time axis covers the earliest to the latest point, widened to
//!   whole days when a weather overlay is drawn. A single instant is
//!   widened by one hour each side. Ticks sit at UTC midnights, labelled
//!   every `ceil(days / 12)` days.
//! * The value axis uses a step of 1, 2, 2.5 or 5 × 10^k chosen so about
//!   five steps cover the data, with both ends rounded outward to a step.
//!   A flat series is widened by one unit each side.
//! * Precipitation bars fill at most the bottom quarter of the plot, scaled
//!   to the wettest day. The daily temperature band uses its own scale,
//!   labelled on the right edge.

use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::cube::{results_csv, results_json, CellResult};
use crate::pipeline::store::{Store, WeatherDay};
use crate::registry::{MoteId, Registry, SensorType};

pub const WIDTH: f64 = 1200.0;
pub const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 1130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 350.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#ff7f0e",
];

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected csv, json or svg)")]
    Format(String),
    #[error("cyclic or whole-period results have no time axis to chart")]
    NoTimeAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(ReportError::Format(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(DateTime<Utc>, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Days drawn as precipitation bars and a temperature band; empty
    /// for no overlay.
    pub weather: Vec<WeatherDay>,
}

/// One series per sensor of `sensor_type` on the given motes (all motes
/// when empty), from the store's cells at `step_s`, stamped at each cell's
/// midpoint.
pub fn dataseries_series(
    store: &Store,
    registry: &Registry,
    sensor_type: SensorType,
    step_s: u32,
    motes: &[MoteId],
) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    let mut sensors: Vec<_> = registry
        .sensors()
        .filter(|s| s.sensor_type == sensor_type && (motes.is_empty() || motes.contains(&s.mote_id)))
        .collect();
    sensors.sort_by(|a, b| (a.mote_id, &a.sensor_id).cmp(&(b.mote_id, &b.sensor_id)));
    let half = Duration::seconds(i64::from(step_s) / 2);
    for s in sensors {
        let mut points: Vec<(DateTime<Utc>, f64)> = store
            .dataseries()
            .iter()
            .filter(|c| c.step_s == step_s && c.sensor_id == s.sensor_id)
            .map(|c| (c.start() + half, c.mean))
            .collect();
        points.sort_by_key(|p| p.0);
        out.push(Series {
            label: format!("mote {}", s.mote_id),
            points,
        });
    }
    out
}

/// One series per location bucket, stamped at each time bucket's start.
pub fn results_series(results: &[CellResult]) -> Result<Vec<Series>, ReportError> {
    let mut out: Vec<Series> = Vec::new();
    for r in results {
        if r.cycle.is_some() {
            return Err(ReportError::NoTimeAxis);
        }
        let t = r.time.start().ok_or(ReportError::NoTimeAxis)?;
        let label = r.location.to_string();
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((t, r.value)),
            None => out.push(Series {
                label,
                points: vec![(t, r.value)],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by_key(|p| p.0);
    }
    Ok(out)
}

pub const SERIES_HEADER: &str = "series,time,value";

pub fn series_csv(series: &[Series]) -> String {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for s in series {
        for (t, v) in &s.points {
            let _ = writeln!(out, "{},{},{}", s.label, t.format("%Y-%m-%dT%H:%M:%SZ"), v);
        }
    }
    out
}

pub fn series_json(series: &[Series]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        series: &'a str,
        time: String,
        value: f64,
    }
    let rows: Vec<Row> = series
        .iter()
        .flat_map(|s| {
            s.points.iter().map(|(t, v)| Row {
                series: &s.label,
                time: t.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                value: *v,
            })
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("plain data serializes")
}

/// Renders query results in `format`; charts use `title` and the weather
/// overlay.
pub fn render_results(
    results: &[CellResult],
    format: ReportFormat,
    title: &str,
    y_label: &str,
    weather: &[WeatherDay],
) -> Result<String, ReportError> {
    Ok(match format {
        ReportFormat::Csv => results_csv(results),
        ReportFormat::Json => results_json(results),
        ReportFormat::Svg => render_svg(&Chart {
            title: title.into(),
            y_label: y_label.into(),
            series: results_series(results)?,
            weather: weather.to_vec(),
        }),
    })
}

pub fn render_series(chart: &Chart, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => series_csv(&chart.series),
        ReportFormat::Json => series_json(&chart.series),
        ReportFormat::Svg => render_svg(chart),
    }
}

/// Axis step of 1, 2, 2.5 or 5 × 10^k giving about five steps over `span`.
pub fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let m = raw / mag;
    let f = if m <= 1.0 {
        1.0
    } else if m <= 2.0 {
        2.0
    } else if m <= 2.5 {
        2.5
    } else if m <= 5.0 {
        5.0
    } else {
        10.0
    };
    f * mag
}

/// Value-axis range and step for data spanning `lo..=hi`.
pub fn value_axis(lo: f64, hi: f64) -> (f64, f64, f64) {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let step = nice_step(hi - lo);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn midnight(d: NaiveDate) -> DateTime<Utc> {
    d.and_hms_opt(0, 0, 0).expect("midnight").and_utc()
}

pub fn render_svg(chart: &Chart) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        esc(&chart.title)
    );

    let mut times: Vec<DateTime<Utc>> = chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    for d in &chart.weather {
        times.push(midnight(d.date));
        times.push(midnight(d.date) + Duration::days(1));
    }
    let values: Vec<f64> = chart
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .collect();
    let (Some(&t_min), Some(&t_max)) = (times.iter().min(), times.iter().max()) else {
        let _ = writeln!(
            svg,
            r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            RIGHT - LEFT,
            BOTTOM - TOP
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#,
            (LEFT + RIGHT) / 2.0,
            (TOP + BOTTOM) / 2.0
        );
        svg.push_str("</svg>\n");
        return svg;
    };
    let (t0, t1) = if t_max > t_min {
        (t_min, t_max)
    } else {
        (t_min - Duration::hours(1), t_max + Duration::hours(1))
    };
    let span_ms = (t1 - t0).num_milliseconds() as f64;
    let x_of = |t: DateTime<Utc>| LEFT + (RIGHT - LEFT) * (t - t0).num_milliseconds() as f64 / span_ms;

    let v_lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let v_hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1, ystep) = if values.is_empty() {
        value_axis(0.0, 1.0)
    } else {
        value_axis(v_lo, v_hi)
    };
    let y_of = |v: f64| BOTTOM - (BOTTOM - TOP) * (v - y0) / (y1 - y0);

    // Weather underlay first so series draw on top.
    if !chart.weather.is_empty() {
        let t_lo = chart.weather.iter().map(|d| d.tmin_c).fold(f64::INFINITY, f64::min);
        let t_hi = chart.weather.iter().map(|d| d.tmax_c).fold(f64::NEG_INFINITY, f64::max);
        let (c0, c1, cstep) = value_axis(t_lo, t_hi);
        let c_of = |v: f64| BOTTOM - (BOTTOM - TOP) * (v - c0) / (c1 - c0);
        let p_max = chart.weather.iter().map(|d| d.precipitation_mm).fold(0.0, f64::max);
        for d in &chart.weather {
            let xa = x_of(midnight(d.date));
            let xb = x_of(midnight(d.date) + Duration::days(1));
            let _ = writeln!(
                svg,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#ff7f0e" fill-opacity="0.12"/>"##,
                xa,
                c_of(d.tmax_c),
                xb - xa,
                c_of(d.tmin_c) - c_of(d.tmax_c)
            );
            if p_max > 0.0 && d.precipitation_mm > 0.0 {
                let h = (BOTTOM - TOP) * 0.25 * d.precipitation_mm / p_max;
                let _ = writeln!(
                    svg,
                    r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a90d9" fill-opacity="0.6"><title>{} {:.1} mm</title></rect>"##,
                    xa + 1.0,
                    BOTTOM - h,
                    (xb - xa - 2.0).max(1.0),
                    h,
                    d.date.format("%Y-%m-%d"),
                    d.precipitation_mm
                );
            }
        }
        let mut c = c0;
        while c <= c1 + cstep * 1e-9 {
            let _ = writeln!(
                svg,
                r##"<text x="{:.2}" y="{:.2}" fill="#c0600a">{}</text>"##,
                RIGHT + 6.0,
                c_of(c) + 4.0,
                tick_label(c, cstep)
            );
            c += cstep;
        }
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" fill="#c0600a" text-anchor="middle" transform="rotate(90 {:.2} {:.2})">air °C (band), rain mm (bars, max {:.1})</text>"##,
            WIDTH - 14.0,
            (TOP + BOTTOM) / 2.0,
            WIDTH - 14.0,
            (TOP + BOTTOM) / 2.0,
            p_max
        );
    }

    // Grid and value axis.
    let mut v = y0;
    while v <= y1 + ystep * 1e-9 {
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{RIGHT}" y2="{y:.2}" stroke="#e0e0e0"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            tick_label(v, ystep)
        );
        v += ystep;
    }
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0,
        esc(&chart.y_label)
    );

    // Time axis.
    let first_day = t0.date_naive() + Duration::days(i64::from(midnight(t0.date_naive()) < t0));
    let days = (t1.date_naive() - first_day).num_days() + 1;
    let every = ((days as f64) / 12.0).ceil().max(1.0) as i64;
    let mut k = 0;
    let mut d = first_day;
    while midnight(d) <= t1 {
        let x = x_of(midnight(d));
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{BOTTOM}" x2="{x:.2}" y2="{:.2}" stroke="#444"/>"##,
            BOTTOM + 4.0
        );
        if k % every == 0 {
            let _ = writeln!(
                svg,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                BOTTOM + 18.0,
                d.format("%b %d")
            );
        }
        k += 1;
        d += Duration::days(1);
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        RIGHT - LEFT,
        BOTTOM - TOP
    );

    for (i, s) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(t, v)| format!("{:.2},{:.2}", x_of(t), y_of(v)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                esc(&s.label)
            );
        }
        let ly = TOP + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            RIGHT - 110.0,
            RIGHT - 92.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            RIGHT - 88.0,
            ly + 4.0,
            esc(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = (0..6)
        .find(|&d| {
            let scaled = step * 10f64.powi(d as i32);
            (scaled - scaled.round()).abs() < 1e-9 * scaled.max(1.0)
        })
        .unwrap_or(6);
    let s = format!("{v:.decimals$}");
    // Avoid "-0".
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}
