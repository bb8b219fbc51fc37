//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shape")]
    EmptyShape,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{what} out of range: {got} not in [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        got: i64,
        lo: i64,
        hi: i64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schedule incompatible with bridge: {0}")]
    BridgeIncompatible(String),

    #[error("degenerate step at t={0}: m_{{t-1}} vanishes")]
    DegenerateStep(usize),

    #[error("DAN singular at t={0}")]
    DanSingular(usize),

    #[error("z0 recovery singular at t={t}: m_t={m:.3e} below guard {guard:.3e}")]
    RecoverySingular { t: usize, m: f64, guard: f64 },

    #[error("invalid stochasticity: {0}")]
    InvalidStochasticity(String),

    #[error("model/schedule mismatch: {0}")]
    ModelMismatch(String),

    #[error("non-finite loss at iteration {iteration} (t={t}): elbo={elbo}, ic={ic}")]
    NonFiniteLoss {
        iteration: u64,
        t: usize,
        elbo: f64,
        ic: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
