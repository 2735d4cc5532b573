use std::path::PathBuf;

use crate::calendar::MonthId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("{file}:{line}: duplicate entry for {key}")]
    Conflict { file: String, line: u64, key: String },

    #[error("{file}:{line}: date {date} is not in the trading calendar")]
    UnknownDate { file: String, line: u64, date: String },

    #[error("{file}:{line}: month {month} is not covered by the trading calendar")]
    UnknownMonth {
        file: String,
        line: u64,
        month: String,
    },

    #[error("trading calendar is not strictly increasing at position {position}")]
    UnorderedCalendar { position: usize },

    #[error("window of {q} month(s) before {end} leaves the calendar [{first}, {last}]")]
    WindowOutOfRange {
        end: MonthId,
        q: u32,
        first: MonthId,
        last: MonthId,
    },

    #[error("cross-section has {companies} companies but needs at least {required}")]
    Underdetermined { companies: usize, required: usize },

    #[error("singular cross-sectional fit: {block} block is not identified (factor {factor})")]
    SingularFit { block: String, factor: String },

    #[error("constraint matrix does not have full row rank ({rank} < {rows})")]
    RankDeficientConstraints { rank: usize, rows: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("negative variance {value:e} on diagonal entry {index}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("internal consistency failure: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
