use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("flow time {s} is singular: sigma = {sigma:e} is at or below the floor {floor:e}")]
    Singularity { s: f64, sigma: f64, floor: f64 },

    #[error("non-finite loss at step {step} (lr {lr:e}, batch mean {batch_mean}, batch std {batch_std})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        batch_mean: f64,
        batch_std: f64,
    },

    #[error("grid cell (layer {layer}, s {s}): {source}")]
    Cell {
        layer: usize,
        s: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
