//! Conditional normalizing-flow super-resolution with a learned latent prior.
//!
//! The toolkit pairs invertible conditional flows (a fixed-scale whole-image
//! variant and an arbitrary-scale 3x3 patch variant) with a latent module that
//! predicts the flow's latent code from the low-resolution image in a single
//! pass, replacing random temperature sampling at inference. It also ships the
//! diagnostics this family of models needs in practice: exploding-inverse
//! accounting, grid-artifact scoring, LR-consistency, and an exhaustive
//! per-pixel best-temperature-map search.

pub mod data;
pub mod fixed_scale;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod temperature;
#[doc(hidden)]
pub mod oracle;

use thiserror::Error;

/// Toolkit-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("non-finite inverse at layer {layer_index} ({kind}): max |value| = {max_abs}")]
    NonFiniteInverse {
        layer_index: usize,
        kind: &'static str,
        max_abs: f32,
    },
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Version string embedded in run manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
