use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("volume is constant (min == max == {0})")]
    ConstantVolume(f64),
    #[error("non-finite value at voxel {0}")]
    NonFiniteInput(usize),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("i/o failure on {path:?}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid shape {0:?}: {1}")]
    InvalidShape([usize; 3], &'static str),
    #[error("invalid label {index} for K = {k}")]
    InvalidLabel { index: usize, k: usize },
    #[error("lesion site {0} does not fit inside the volume")]
    LesionOutOfBounds(usize),
    #[error("invalid phantom spec: {0}")]
    InvalidPhantomSpec(String),
    #[error("too few subjects ({subjects}) to fill every split")]
    TooFewSubjects { subjects: usize },
    #[error("invalid split fractions {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("spatial shape {0:?} is not divisible by {1}")]
    ShapeNotDivisible([usize; 3], usize),
    #[error("volume {0:?} is too small: {1}")]
    VolumeTooSmall([usize; 3], String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss term {term} = {value}")]
    NonFiniteTerm { term: &'static str, value: f64 },
    #[error("non-finite loss at step {step}: {term} = {value}")]
    NonFiniteLoss {
        step: u64,
        term: &'static str,
        value: f64,
    },
    #[error("K = {0} needs at least two classes")]
    DegenerateK(usize),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("input is constant")]
    ConstantInput,
    #[error("only one class present")]
    SingleClass,
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint does not match the model: {0}")]
    SpecMismatch(String),
    #[error("slice {index} out of range for axis of length {len}")]
    SliceOutOfRange { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty batch")]
    EmptyBatch,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }

    /// Short machine-readable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ConstantVolume(_) => "ConstantVolume",
            Error::NonFiniteInput(_) => "NonFiniteInput",
            Error::CorruptHeader(_) => "CorruptHeader",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::IoFailure { .. } => "IoFailure",
            Error::InvalidShape(..) => "InvalidShape",
            Error::InvalidLabel { .. } => "InvalidLabel",
            Error::LesionOutOfBounds(_) => "LesionOutOfBounds",
            Error::InvalidPhantomSpec(_) => "InvalidPhantomSpec",
            Error::TooFewSubjects { .. } => "TooFewSubjects",
            Error::InvalidFractions(_) => "InvalidFractions",
            Error::ShapeNotDivisible(..) => "ShapeNotDivisible",
            Error::VolumeTooSmall(..) => "VolumeTooSmall",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFiniteTerm { .. } => "NonFiniteTerm",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DegenerateK(_) => "DegenerateK",
            Error::EmptyClass(_) => "EmptyClass",
            Error::ConstantInput => "ConstantInput",
            Error::SingleClass => "SingleClass",
            Error::VersionMismatch(_) => "VersionMismatch",
            Error::SpecMismatch(_) => "SpecMismatch",
            Error::SliceOutOfRange { .. } => "SliceOutOfRange",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::EmptyBatch => "EmptyBatch",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
