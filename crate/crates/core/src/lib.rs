//! Trigger-image fingerprinting workbench for vision-language models.
//!
//! A watermark key biases a toy model's decoding toward a green token list;
//! trigger images are then optimized so that plain decoding reproduces the
//! bias, and ownership is verified by z-score detection against per-query
//! thresholds calibrated on unrelated models.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the double-precision instantiation used by artifacts and the CLI.

pub mod bundle;
pub mod error;
pub mod json;
pub mod mutate;
pub mod rfo;
pub mod rng;
pub mod safd;
pub mod scalar;
pub mod sda;
pub mod synth;
pub mod tokenizer;
pub mod verify;
pub mod vlm;
pub mod wmark;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Params = vlm::ModelParams<f64>;
pub type Params32 = vlm::ModelParams<f32>;
pub type Image = vlm::ImageTensor<f64>;
pub type Image32 = vlm::ImageTensor<f32>;
pub type Trace = vlm::ForwardTrace<f64>;
pub type Activations = vlm::ActivationSet<f64>;
