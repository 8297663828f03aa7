//! Crate-wide error type. Recoverable conditions carry enough context to act on
//! (paths, class ids, step indices); programming errors panic instead.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value. The message names the offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// The ODE state went non-finite during integration.
    #[error("integration diverged at step {step}: non-finite state")]
    IntegrationDiverged { step: usize },

    /// The adaptive controller could not find an acceptable step size.
    #[error("integration stalled at t={t}: step size underflow")]
    StepSizeUnderflow { t: f64 },

    /// A requested class id is absent from every support mask of an episode.
    #[error("class {class} missing from all support masks")]
    MissingClass { class: u8 },

    /// Ground-truth labels fall outside the episode's class set.
    #[error("class mismatch: {0}")]
    ClassMismatch(String),

    /// Episode sampling cannot satisfy the request; names the deficient class.
    #[error("insufficient slices for class {class}: need {needed}, have {available}")]
    InsufficientSlices { class: u8, needed: usize, available: usize },

    /// Not enough distinct classes in the split for the requested way count.
    #[error("insufficient classes: need {needed}, split has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    /// Malformed or inconsistent on-disk dataset.
    #[error("dataset error at {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    /// Training produced a non-finite loss; the episode seed reproduces it.
    #[error("non-finite loss at step {step} (episode seed {episode_seed}): {detail}")]
    NonFiniteLoss { step: usize, episode_seed: u64, detail: String },

    /// Tensor shape disagreement surfaced through a public entry point.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { context: String, expected: Vec<usize>, got: Vec<usize> },

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An operation that needs at least one episode received none.
    #[error("empty episode list")]
    EmptyEpisodes,

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
