//! Crate-wide error type.

use crate::volume::FieldKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received a field of the wrong kind.
    #[error("field kind mismatch: expected {expected}, got {got}")]
    KindMismatch {
        expected: &'static str,
        got: FieldKind,
    },

    /// An argument violated a precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Resolutions or tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Volume file does not start with the `VOLF` magic.
    #[error("bad magic: expected \"VOLF\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    /// Volume or checkpoint file with an unknown format version.
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    /// Volume file with an unknown kind byte.
    #[error("unknown field kind byte {0}")]
    UnknownKind(u8),

    /// Payload shorter (or longer) than the header promises.
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: u64, got: u64 },

    /// A NaN or infinity where only finite values are legal.
    #[error("non-finite value in payload at element {index}")]
    NonFinitePayload { index: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint/config combination that cannot be loaded together.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Refusal to overwrite existing outputs without `--force`.
    #[error("output already exists (use --force to overwrite): {0}")]
    OutputExists(String),

    /// Procedural generation failed an invariant (e.g. grid margin).
    #[error("generation error: {0}")]
    Generation(String),

    /// Dataset on disk is malformed or missing entries.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training loss became non-finite; carries the abort diagnostic.
    #[error(
        "non-finite loss at step {step} (grad_norm {grad_norm}); t histogram {t_histogram:?}"
    )]
    NonFiniteLoss {
        step: u64,
        grad_norm: f64,
        /// Counts of sampled timesteps per decile of [1, T].
        t_histogram: Vec<u64>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
