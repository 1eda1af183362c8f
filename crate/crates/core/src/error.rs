use std::fmt;

use crate::tensor::Key;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    Invalid(#[from] ValidationReport),
    #[error("offset arithmetic overflows the index type ({dimension} x n_dirs)")]
    ArithmeticOverflow { dimension: &'static str },
    #[error("dense oracle would need {entries} entries (limit {limit})")]
    OracleTooLarge { entries: u128, limit: u128 },
    #[error("tensor is not sorted by {0}")]
    NotSorted(Key),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("partition strategy requires a tensor sorted by {required}")]
    StrategyRequiresSorted { required: Key },
    #[error("execution plan does not match tensor: {0}")]
    PlanTensorMismatch(String),
    #[error("step size denominator is zero")]
    DegenerateStep,
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
    #[error("problem has no signal vector")]
    MissingSignal,
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Which array a validation issue refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Atoms,
    Voxels,
    Fibers,
    Values,
    Dictionary,
    Signal,
    Weights,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Field::Atoms => "atoms",
            Field::Voxels => "voxels",
            Field::Fibers => "fibers",
            Field::Values => "values",
            Field::Dictionary => "dictionary",
            Field::Signal => "signal",
            Field::Weights => "weights",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationIssue {
    /// An index array entry at `position` is out of range for `dimension`.
    IndexOutOfRange { dimension: Key, position: usize },
    LengthMismatch { field: Field, expected: usize, found: usize },
    NonFiniteValue { field: Field, position: usize },
    /// A zero-sized dimension, or more coefficients than cells.
    BadDims(String),
    /// Ordering tag claims a sort that the key array does not satisfy.
    OrderingViolated { key: Key, position: usize },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::IndexOutOfRange { dimension, position } => {
                write!(f, "{dimension} index out of range at position {position}")
            }
            ValidationIssue::LengthMismatch { field, expected, found } => {
                write!(f, "{field} has length {found}, expected {expected}")
            }
            ValidationIssue::NonFiniteValue { field, position } => {
                write!(f, "{field} has a non-finite entry at position {position}")
            }
            ValidationIssue::BadDims(msg) => write!(f, "bad dims: {msg}"),
            ValidationIssue::OrderingViolated { key, position } => {
                write!(f, "{key} array decreases at position {position}")
            }
        }
    }
}

/// Every issue found by validation, at most one per (kind, field) category.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn first(&self) -> Option<&ValidationIssue> {
        self.issues.first()
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub(crate) fn push(&mut self, issue: ValidationIssue) {
        self.issues.push(issue);
    }

    pub(crate) fn into_result(self) -> std::result::Result<(), ValidationReport> {
        if self.issues.is_empty() {
            Ok(())
        } else {
            Err(self)
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}
