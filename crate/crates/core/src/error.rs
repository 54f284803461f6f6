use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),

    #[error("cache produced by {cache} cannot be used to backpropagate through {layer}")]
    CacheMismatch { layer: String, cache: String },

    #[error("parameter set is frozen and must not be passed to the optimizer")]
    FrozenParams,

    #[error("invalid backbone spec: field `{field}`: {reason}")]
    InvalidBackboneSpec { field: &'static str, reason: String },

    #[error("backbone must be frozen before {0}")]
    BackboneNotFrozen(&'static str),

    #[error("backbone is frozen; {0} is not allowed")]
    BackboneFrozen(&'static str),

    #[error("invalid model configuration: {0}")]
    InvalidModel(String),

    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("simulation grid size {0} is not a power of two")]
    GridNotPowerOfTwo(usize),

    #[error("simulation became non-finite at step {step}")]
    SimulationDiverged { step: usize },

    #[error("scaler used before fit")]
    NotFitted,

    #[error("resize from {from:?} to {to:?} is not an integer downsampling")]
    NonIntegerResize { from: (usize, usize), to: (usize, usize) },

    #[error("manifest {path}: row {row}: {reason}")]
    Manifest {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("image file {path}: {reason}")]
    ImageFormat { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("experiment: {0}")]
    Experiment(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
