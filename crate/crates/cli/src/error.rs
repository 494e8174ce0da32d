use std::fmt;

use spn_core::SpnError;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn core_code(e: &SpnError) -> i32 {
    match e {
        SpnError::InvalidArgument(_) => EXIT_USAGE,
        SpnError::Shape(_) | SpnError::Io { .. } | SpnError::Format { .. } | SpnError::Data(_) => EXIT_DATA,
        SpnError::Domain(_) | SpnError::NonFinite(_) => EXIT_NUMERIC,
    }
}

/// Exit code for the first classified error in the chain; unclassified
/// errors count as data errors.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return match c {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Data(_) => EXIT_DATA,
                CliError::Numeric(_) => EXIT_NUMERIC,
            };
        }
        if let Some(e) = cause.downcast_ref::<SpnError>() {
            return core_code(e);
        }
    }
    EXIT_DATA
}
