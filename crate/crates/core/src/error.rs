use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called on node {node} which was never forwarded (graph has {len} nodes)")]
    NotForwarded { node: usize, len: usize },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("duplicate segment name `{0}`")]
    DuplicateSegment(String),

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("degenerate gradient: |g_perp| = {norm_perp:e} vs |g_main| = {norm_main:e}")]
    DegenerateGradient { norm_main: f64, norm_perp: f64 },

    #[error("feature gradient is zero; capacity undefined")]
    ZeroFeatureGradient,

    #[error("adapter already attached to layer `{0}`")]
    DuplicateAdapter(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("probe has not been calibrated")]
    Uncalibrated,

    #[error("probe calibration failed: held-out accuracy {accuracy:.4} < {required}")]
    CalibrationFailed { accuracy: f64, required: f64 },

    #[error("training diverged at step {step}: loss {loss:e} exceeded 10x initial {initial:e} for {run} consecutive steps")]
    Diverged { step: usize, loss: f64, initial: f64, run: usize },

    #[error("attack loss became non-finite at step {step} (lr {lr:e}, last finite loss {last_loss:e})")]
    AttackNonFinite { step: usize, lr: f64, last_loss: f64 },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
