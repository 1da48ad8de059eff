//! Daily weather summaries loaded from CSV files.

use std::path::Path;

use chrono::{Datelike, NaiveDate};

use super::store::{Store, WeatherDay, WeatherEvent};
use super::PipelineError;

pub const WEATHER_HEADER: [&str; 8] = [
    "date",
    "tmin_c",
    "tmax_c",
    "tavg_c",
    "precipitation_mm",
    "humidity_pct",
    "pressure_hpa",
    "events",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WeatherReport {
    pub days: usize,
    pub rejected: usize,
}

pub fn ingest_weather(path: impl AsRef<Path>, store: &mut Store) -> Result<WeatherReport, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    ingest_weather_text(&text, store)
}

/// Loads one row per date; a later row for the same date replaces the
/// earlier one. Rows whose temperatures are inconsistent or whose fields
/// fail to parse are rejected.
pub fn ingest_weather_text(text: &str, store: &mut Store) -> Result<WeatherReport, PipelineError> {
    if text.trim().is_empty() {
        return Ok(WeatherReport::default());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| PipelineError::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != WEATHER_HEADER {
        return Err(PipelineError::SchemaMismatch {
            expected: WEATHER_HEADER.join(","),
            found: header.join(","),
        });
    }
    let mut days = std::collections::BTreeMap::new();
    let mut report = WeatherReport::default();
    for record in reader.records() {
        let record = record.map_err(|e| PipelineError::Csv(e.to_string()))?;
        match parse_day(&record) {
            Some(day) => {
                days.insert(day.date, day);
            }
            None => report.rejected += 1,
        }
    }
    report.days = days.len();
    store.weather.extend(days);
    Ok(report)
}

fn parse_day(record: &csv::StringRecord) -> Option<WeatherDay> {
    if record.len() != WEATHER_HEADER.len() {
        return None;
    }
    let num = |i: usize| record[i].trim().parse::<f64>().ok().filter(|v| v.is_finite());
    let date = NaiveDate::parse_from_str(record[0].trim(), "%Y-%m-%d").ok()?;
    let (tmin_c, tmax_c, tavg_c) = (num(1)?, num(2)?, num(3)?);
    if tmin_c > tmax_c || !(tmin_c..=tmax_c).contains(&tavg_c) {
        return None;
    }
    let mut events = std::collections::BTreeSet::new();
    for token in record[7].split(';').map(str::trim).filter(|t| !t.is_empty()) {
        events.insert(WeatherEvent::parse(token)?);
    }
    Some(WeatherDay {
        date,
        tmin_c,
        tmax_c,
        tavg_c,
        precipitation_mm: num(4)?,
        humidity_pct: num(5)?,
        pressure_hpa: num(6)?,
        events,
    })
}

/// Weather CSV text for the given days, in date order.
pub fn weather_csv<'a>(days: impl IntoIterator<Item = &'a WeatherDay>) -> String {
    let mut out = WEATHER_HEADER.join(",");
    out.push('\n');
    for d in days {
        out.push_str(&format!(
            "{},{:.1},{:.1},{:.1},{:.1},{:.0},{:.1},{}\n",
            d.date.format("%Y-%m-%d"),
            d.tmin_c,
            d.tmax_c,
            d.tavg_c,
            d.precipitation_mm,
            d.humidity_pct,
            d.pressure_hpa,
            d.events_text()
        ));
    }
    out
}

/// Wettest day of a month; earliest date wins a tie.
pub fn max_precipitation_day(store: &Store, year: i32, month: u32) -> Option<&WeatherDay> {
    store
        .weather()
        .filter(|d| d.date.year() == year && d.date.month() == month)
        .fold(None, |best: Option<&WeatherDay>, d| match best {
            Some(b) if b.precipitation_mm >= d.precipitation_mm => Some(b),
            _ => Some(d),
        })
}
