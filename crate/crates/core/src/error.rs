use std::fmt;

use thiserror::Error;

use crate::taxonomy::Attribute;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: u64, column: u64, message: String },
    #[error("age bins {first} and {second} overlap")]
    BinOverlap { first: String, second: String },
    #[error("duplicate {attribute} subgroup {label:?}")]
    DuplicateSubgroup { attribute: Attribute, label: String },
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("unknown taxonomy preset {0:?}")]
    UnknownPreset(String),
    #[error("age {0} is not covered by any age bin")]
    UnbinnableAge(u32),
    #[error("{}unknown {attribute} subgroup {label:?}", row_prefix(*.row))]
    UnknownSubgroup {
        row: Option<u64>,
        attribute: Attribute,
        label: String,
    },
    #[error("row {row}: duplicate id {id:?}")]
    DuplicateId { row: u64, id: String },
    #[error("row {row}: neither age_years nor age_bin is present")]
    MissingAge { row: u64 },
    #[error("row {row}: column {column} must be 0 or 1, got {value:?}")]
    MalformedLabel {
        row: u64,
        column: &'static str,
        value: String,
    },
    #[error("manifests do not share an identical taxonomy")]
    TaxonomyMismatch,
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("every lattice cell is empty")]
    EmptyLattice,
    #[error("sources do not match the plan: {0}")]
    SourceMismatch(String),
    #[error("invalid quota policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("prediction log is empty")]
    EmptyLog,
    #[error("undefined rate: {0}")]
    UndefinedRate(String),
    #[error("reference group {0:?} does not occur in the log")]
    UnknownReference(String),
    #[error("reference group {0:?} has a positive outcome ratio of zero")]
    DegenerateReference(String),
    #[error("group {0:?} has zero accuracy")]
    DegenerateAccuracy(String),
    #[error("invalid grouping {0:?}")]
    InvalidGrouping(String),
    #[error("incompatible reports: {0}")]
    IncompatibleReports(String),
    #[error("derived value does not match its inputs: {0}")]
    VerificationFailed(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn row_prefix(row: Option<u64>) -> String {
    row.map(|r| format!("row {r}: ")).unwrap_or_default()
}

impl Error {
    pub(crate) fn from_csv(err: csv::Error) -> Self {
        let (line, column) = match err.position() {
            Some(pos) => (pos.line(), 0),
            None => (0, 0),
        };
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Parse {
                line,
                column,
                message: format!("{kind:?}"),
            },
        }
    }
}

/// A non-fatal diagnostic. Rendered as `WARN <code> <detail>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub code: &'static str,
    pub detail: String,
}

impl Warning {
    pub fn new(code: &'static str, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WARN {} {}", self.code, self.detail)
    }
}
