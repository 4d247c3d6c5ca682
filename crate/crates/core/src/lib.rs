//! Desk-scale adversarial robustness laboratory.
//!
//! Builds everything from a dense f64 autodiff tape upward: toy vision
//! transformers and CNNs, gradient attacks with an optional DCT frequency
//! constraint, denoised randomized smoothing certification, and adversarial
//! training.

pub mod attacks;
pub mod frequency;
pub mod models;
pub mod rng;
pub mod tensor;

pub use tensor::{Tape, Tensor, Var};

/// Numeric-path choices baked into this build, echoed into checkpoints and
/// reports.
pub fn op_choices() -> serde_json::Value {
    serde_json::json!({
        "gelu": "erf",
        "dct": "orthonormal",
        "sign_at_zero": 0.0,
        "layer_norm_eps": models::LAYER_NORM_EPS,
    })
}
