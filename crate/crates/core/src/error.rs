use alloc::boxed::Box;
use alloc::string::String;

/// Errors produced by the training and inference routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix data has length {found}, expected {expected} ({rows}x{cols})")]
    InvalidLength {
        rows: usize,
        cols: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("normal equations are singular at dimension {dimension}")]
    SolverSingular { dimension: usize },
    #[error("column {column} is degenerate (zero norm)")]
    DegenerateAtom { column: usize },
    #[error("{matrix} has a negative entry at ({row}, {col})")]
    NonNegativityViolation {
        matrix: &'static str,
        row: usize,
        col: usize,
    },
    #[error("label {value} at sample {index} is outside the allowed domain")]
    LabelDomain { index: usize, value: i64 },
    #[error("class {class} has no training samples")]
    ClassCoverage { class: usize },
    #[error("class {class} has no allocated atoms")]
    AllocationGap { class: usize },
    #[error("label {value} is not one of the network's classes")]
    UnknownLabel { value: i64 },
    #[error("invalid configuration: {0}")]
    InvalidSpec(String),
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_layer(self, index: usize) -> Error {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
