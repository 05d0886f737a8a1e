use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("duplicate unit `{0}`")]
    DuplicateUnit(String),

    #[error("unit `{0}` references no household")]
    MissingHousehold(String),

    #[error("non-numeric value `{value}` in column `{column}` (row {row})")]
    NonNumeric { column: String, row: usize, value: String },

    #[error("unknown unit `{0}` in edge list")]
    UnknownUnit(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("assignment is not in the support of the design")]
    OutOfSupport,

    #[error("support size {size} exceeds the enumeration cap {cap}")]
    SupportCap { size: u128, cap: u128 },

    #[error("exposure mapping `{mapping}` requires {needed}")]
    MissingStructure { mapping: String, needed: &'static str },

    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),

    #[error("household `{0}` has a single unit; the spillover exposure is undefined there")]
    SingletonHousehold(String),

    #[error("household `{0}` has no unit eligible to be focal")]
    NoEligibleFocal(String),

    #[error("mechanism `{mechanism}` is incompatible: {reason}")]
    IncompatibleMechanism { mechanism: String, reason: String },

    #[error("no conditional sampler for mechanism `{mechanism}`: {reason}; use exact mode")]
    SamplerUnavailable { mechanism: String, reason: String },

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("singular regression design; dependent columns: {}", columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("grid [{low}, {high}] does not bracket the estimating equation; widen the grid")]
    NoBracket { low: f64, high: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("draw {index}: {source}")]
    Draw {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidDesign(_)
            | Error::InvalidHypothesis(_)
            | Error::IncompatibleMechanism { .. }
            | Error::SamplerUnavailable { .. }
            | Error::MissingStructure { .. } => 2,
            Error::EmptyFile(_)
            | Error::MissingColumn { .. }
            | Error::DuplicateUnit(_)
            | Error::MissingHousehold(_)
            | Error::NonNumeric { .. }
            | Error::UnknownUnit(_)
            | Error::InvalidNetwork(_)
            | Error::InvalidData(_)
            | Error::OutOfSupport
            | Error::SingletonHousehold(_)
            | Error::NoEligibleFocal(_)
            | Error::SingularDesign { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 3,
            Error::SupportCap { .. } => 4,
            Error::Draw { source, .. } => source.exit_code(),
            Error::Infeasible(_) | Error::NoBracket { .. } => 1,
        }
    }
}
