use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside the schedule domain {domain}")]
    Domain { t: f64, domain: &'static str },

    #[error("log-SNR is infinite at t = 0 (sigma vanishes)")]
    InfiniteLogSnr,

    #[error("invalid noise schedule: beta0 = {beta0}, beta1 = {beta1} (need 0 < beta0 < beta1)")]
    InvalidSchedule { beta0: f64, beta1: f64 },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("solver step requires t_prev < t, got t = {t}, t_prev = {t_prev}")]
    Ordering { t: f64, t_prev: f64 },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown condition label {0}")]
    UnknownLabel(u16),

    #[error("bad container format: {0}")]
    Format(String),

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected: vec![expected],
            actual: vec![actual],
        })
    }
}
