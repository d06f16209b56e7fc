//! Command-line layer over `vidyn`: configuration, checkpoints, the
//! individual commands and the desk-scale pipeline.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod desk;

use vidyn::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Range(_) | Error::Shape { .. } => EXIT_USAGE,
        Error::Io(_) | Error::Json(_) | Error::Format(_) => EXIT_IO,
        Error::IntegrationDiverged { .. }
        | Error::DegenerateDimension { .. }
        | Error::PoisonedGradient { .. }
        | Error::TrainingFailure { .. }
        | Error::ForecastDiverged { .. } => EXIT_NUMERIC,
    }
}
