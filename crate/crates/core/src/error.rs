use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter in {op}: {detail}")]
    Parameter { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("batch norm requires batch size >= 2 in train mode, got {0}")]
    BatchSize(usize),

    #[error("degenerate channel {channel}: no gain defined for an all-zero channel")]
    DegenerateChannel { channel: usize },

    #[error("inpainting impossible: hair mask covers the entire image")]
    InpaintImpossible,

    #[error("degenerate metric: need at least one positive and one negative label")]
    DegenerateMetric,

    #[error("stratification error: class {class} has {count} members, need at least k = {k}")]
    Stratification { class: u8, count: usize, k: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error at {path}:{row}: {detail}")]
    Manifest {
        path: String,
        row: usize,
        detail: String,
    },

    #[error("optimizer wiring error: {0}")]
    Wiring(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("diversity failure: emitted {accepted} of {requested} samples after {attempts} draws (acceptance rate {rate:.4}); raise the retry budget or lower mse_floor")]
    DiversityFailure {
        requested: usize,
        accepted: usize,
        attempts: usize,
        rate: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {detail}")]
    Png { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
