//! On-the-fly inference machinery for mixture-of-experts models whose
//! experts live in host memory.
//!
//! Each expert is compressed two ways at once: the up projection is
//! quantized to very few bits, while the gate and down projections stay
//! dense but are only touched on the channels whose up-projection
//! activation clears a calibrated magnitude threshold. Around that sit
//! the pieces needed to study the scheme at desk scale:
//!
//! - [`la`]: dense f32 substrate (GEMV, SiLU, softmax, top-k, cosine).
//! - [`sparsify`]: the magnitude sparsity function and per-expert threshold calibration.
//! - [`quant`]: group-wise affine low-bit quantization with bit-packed codes.
//! - [`model`]: SwiGLU experts, routing, MoE layers, the masked sparse kernel and file formats.
//! - [`predictors`]: the learned expert lookahead and the reuse-based channel-mask predictor.
//! - [`offload`]: compact transfer layout, LRU expert cache and the pipelined decode simulator.
//! - [`bench`]: host timing of the masked kernel and of expert compute.
//! - [`theory`]: closed forms and Monte-Carlo checks for truncated second moments.

pub mod bench;
pub mod error;
pub mod la;
pub mod model;
pub mod offload;
pub mod predictors;
pub mod quant;
pub mod sparsify;
pub mod theory;

pub(crate) mod binio;

pub use error::{Error, Result};
pub use la::{Matrix, Order};
