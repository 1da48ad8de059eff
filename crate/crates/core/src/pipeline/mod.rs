//! Level-0 ingest through calibrated, gridded data series.

pub mod calibrate;
pub mod columnar;
pub mod convert;
pub mod grid;
pub mod level1;
pub mod store;
pub mod weather;

use thiserror::Error;

use crate::registry::{MoteId, RegistryError};

pub use calibrate::{calibrate_pending, mark_bad, CalibrateReport};
pub use grid::{grid_dataseries, GapPolicy};
pub use level1::{promote_level1, stage_and_dedup, stage_text, PromoteReport, StageReport};
pub use store::Store;
pub use weather::{
    ingest_weather, ingest_weather_text, max_precipitation_day, weather_csv, WeatherReport, WEATHER_HEADER,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("schema mismatch: expected header `{expected}`, found `{found}`")]
    SchemaMismatch { expected: String, found: String },
    #[error("CSV error: {0}")]
    Csv(String),
    #[error("mote {0} is not in the registry")]
    UnknownMote(MoteId),
    #[error("sensor {0} is not in the registry")]
    UnknownSensor(String),
    #[error("load version {given} is not above the latest version {last}")]
    VersionNotMonotone { given: u64, last: u64 },
    #[error("nothing staged")]
    NothingStaged,
    #[error("interval start must precede its end")]
    EmptyInterval,
    #[error("step of {0} s does not divide a day")]
    Step(u32),
    #[error("table {table} is corrupt: {source}")]
    Corrupt {
        table: &'static str,
        source: columnar::ColumnError,
    },
    #[error("store integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
