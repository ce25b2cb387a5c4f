//! Knowledge-distillation-guided quantization-aware training for small
//! Transformer encoders.
//!
//! - [`tensor`] / [`tape`]: dense `f32` tensors and reverse-mode autodiff.
//! - [`encoder`]: the encoder, its attention traces and quantized views.
//! - [`quant`]: ternary weights, 8-bit activations, straight-through nodes.
//! - [`kd`]: the distillation objectives and presets.
//! - [`gradcheck`] / [`gradsuite`] / [`reference`]: central-difference checks
//!   of every op and every loss against a straight-line f64 oracle.
//! - [`diagnostics`]: attention-order metrics and Hessian power iteration.
//! - [`batch`]: per-example gradients merged into batch gradients.
//! - [`exec`]: ordered parallel map used for batches, seeds and sweeps.

pub mod batch;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod gradsuite;
pub mod kd;
pub mod quant;
pub mod reference;
pub mod tape;
pub mod tensor;

pub use encoder::{AttentionTrace, EncoderConfig, EncoderModel, ForwardVars, QuantizedView};
pub use error::{Error, Result};
pub use exec::Exec;
pub use kd::{KdConfig, LossBreakdown, Preset, Target};
pub use quant::QuantSpec;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
