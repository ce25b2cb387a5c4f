//! Fake quantization for quantization-aware training.
//!
//! Weights are ternarized with a magnitude threshold
//! `Δ = k_t · mean|w|` and a scale `α = mean{|w| : |w| > Δ}` computed per
//! group (the whole tensor, or each row of an embedding table). Activations
//! use symmetric max-abs scaling recomputed on every call. Gradients reach the
//! latent full-precision values through straight-through nodes on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    TernaryLayerwise,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    #[default]
    TernaryRowwise,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSpec {
    pub weight_mode: WeightMode,
    pub embedding_mode: EmbeddingMode,
    /// `Some(8)` enables 8-bit activations; `None` leaves them in f32.
    pub activation_bits: Option<u8>,
    pub threshold_factor: f32,
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec {
            weight_mode: WeightMode::TernaryLayerwise,
            embedding_mode: EmbeddingMode::TernaryRowwise,
            activation_bits: Some(8),
            threshold_factor: 0.7,
        }
    }
}

impl QuantSpec {
    pub fn off() -> Self {
        QuantSpec {
            weight_mode: WeightMode::Off,
            embedding_mode: EmbeddingMode::Off,
            activation_bits: None,
            threshold_factor: 0.7,
        }
    }

    pub fn is_off(&self) -> bool {
        self.weight_mode == WeightMode::Off
            && self.embedding_mode == EmbeddingMode::Off
            && self.activation_bits.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_factor > 0.0 && self.threshold_factor.is_finite()) {
            return Err(Error::Config(format!(
                "ternary threshold factor must be positive, got {}",
                self.threshold_factor
            )));
        }
        match self.activation_bits {
            None | Some(8) => Ok(()),
            Some(b) => Err(Error::Config(format!("unsupported activation bit width {b}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One threshold and scale for the whole tensor.
    Tensor,
    /// One threshold and scale per last-axis row.
    Row,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryResult {
    pub shape: Vec<usize>,
    /// One of -1, 0, +1 per weight.
    pub codes: Vec<i8>,
    /// One nonnegative scale per group.
    pub scales: Vec<f32>,
    /// Number of consecutive weights sharing each scale.
    pub group_len: usize,
}

impl TernaryResult {
    pub fn dequantize(&self) -> Tensor {
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.scales[i / self.group_len.max(1)] * c as f32)
            .collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }
}

pub fn ternarize(w: &Tensor, granularity: Granularity, threshold_factor: f32) -> Result<TernaryResult> {
    if w.is_empty() {
        return Err(Error::Input("cannot ternarize an empty tensor".into()));
    }
    if !w.is_finite() {
        return Err(Error::Numeric("cannot ternarize non-finite weights".into()));
    }
    let group_len = match granularity {
        Granularity::Tensor => w.len(),
        Granularity::Row => w.cols(),
    };
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(w.len() / group_len);
    for group in w.data().chunks(group_len) {
        let mean_abs = group.iter().map(|v| v.abs() as f64).sum::<f64>() / group.len() as f64;
        let delta = threshold_factor as f64 * mean_abs;
        let mut kept = 0usize;
        let mut kept_sum = 0.0f64;
        for &v in group {
            let mag = v.abs() as f64;
            if mag > delta {
                kept += 1;
                kept_sum += mag;
                codes.push(if v > 0.0 { 1 } else { -1 });
            } else {
                codes.push(0);
            }
        }
        scales.push(if kept == 0 { 0.0 } else { (kept_sum / kept as f64) as f32 });
    }
    Ok(TernaryResult {
        shape: w.shape().to_vec(),
        codes,
        scales,
        group_len,
    })
}

/// Symmetric max-abs fake quantization to `bits` (levels ±(2^(bits-1) - 1)).
///
/// Rounds half away from zero. An all-zero input maps to zeros.
pub fn quantize_activation(x: &Tensor, bits: u8) -> Tensor {
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let scale = x.max_abs() as f64 / levels;
    if scale == 0.0 || !scale.is_finite() {
        return Tensor::zeros(x.shape());
    }
    x.map(|v| {
        let q = (v as f64 / scale).round().clamp(-levels, levels);
        (q * scale) as f32
    })
}

/// Tape node whose forward value is `quantized` and whose gradient flows to
/// `latent` unchanged.
pub fn ste_wrap(tape: &mut Tape, latent: Var, quantized: Tensor) -> Result<Var> {
    tape.ste(latent, quantized)
}

/// Activation fake-quantization with a straight-through gradient.
pub fn fake_quant_activation(tape: &mut Tape, x: Var, bits: u8) -> Result<Var> {
    let q = quantize_activation(tape.value(x), bits);
    tape.ste(x, q)
}

/// Storage accounting for a BERT-shaped encoder under ternary weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderFootprint {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    /// Whether a d×d pooler sits on top of the encoder.
    pub pooler: bool,
}

impl EncoderFootprint {
    pub fn bert_base() -> Self {
        EncoderFootprint {
            vocab: 30522,
            hidden: 768,
            layers: 12,
            ffn: 3072,
            max_positions: 512,
            type_vocab: 2,
            pooler: true,
        }
    }

    pub fn bert_large() -> Self {
        EncoderFootprint {
            vocab: 30522,
            hidden: 1024,
            layers: 24,
            ffn: 4096,
            max_positions: 512,
            type_vocab: 2,
            pooler: true,
        }
    }

    /// Full-precision size over ternary size. Word embedding rows and every
    /// weight matrix (layers and pooler) carry 2-bit codes plus one 32-bit
    /// scale per group; position/type embeddings, biases and LayerNorm stay
    /// 32-bit.
    pub fn compression_ratio(&self) -> f64 {
        let d = self.hidden as u64;
        let ff = self.ffn as u64;
        let word = self.vocab as u64 * d;
        let layer_mats = 4 * d * d + 2 * d * ff;
        let layer_vecs = 4 * d + ff + d + 4 * d;
        let pooler_mat = if self.pooler { d * d } else { 0 };
        let pooler_vec = if self.pooler { d } else { 0 };
        let fp_only = (self.max_positions as u64 + self.type_vocab as u64) * d
            + 2 * d
            + self.layers as u64 * layer_vecs
            + pooler_vec;
        let ternary = word + self.layers as u64 * layer_mats + pooler_mat;
        let groups = self.vocab as u64 + 6 * self.layers as u64 + u64::from(self.pooler);
        let total = ternary + fp_only;
        let fp_bits = 32 * total;
        let q_bits = 2 * ternary + 32 * groups + 32 * fp_only;
        fp_bits as f64 / q_bits as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn ternarize_hand_case() {
        let r = ternarize(&t(&[0.5, -0.8, 0.05, 0.0]), Granularity::Tensor, 0.7).unwrap();
        // mean|w| = 0.3375, Δ = 0.23625
        assert_eq!(r.codes, vec![1, -1, 0, 0]);
        assert!((r.scales[0] - 0.65).abs() < 1e-7);
    }

    #[test]
    fn ternarize_constant_and_zero() {
        let r = ternarize(&t(&[0.3, 0.3, 0.3]), Granularity::Tensor, 0.7).unwrap();
        assert_eq!(r.codes, vec![1, 1, 1]);
        assert_eq!(r.scales[0], 0.3);
        let r = ternarize(&t(&[0.0; 5]), Granularity::Tensor, 0.7).unwrap();
        assert_eq!(r.codes, vec![0; 5]);
        assert_eq!(r.scales[0], 0.0);
    }

    #[test]
    fn ternarize_rejects_empty() {
        assert!(matches!(
            ternarize(&Tensor::zeros(&[0]), Granularity::Tensor, 0.7),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn row_granularity_scales_each_row() {
        let w = Tensor::from_rows(&[&[1.0, -1.0], &[0.0, 0.2]]).unwrap();
        let r = ternarize(&w, Granularity::Row, 0.7).unwrap();
        assert_eq!(r.scales, vec![1.0, 0.2]);
        assert_eq!(r.codes, vec![1, -1, 0, 1]);
        assert_eq!(r.dequantize().data(), &[1.0, -1.0, 0.0, 0.2]);
    }

    #[test]
    fn activation_quantization_hand_case() {
        let q = quantize_activation(&t(&[-1.0, 0.5]), 8);
        assert_eq!(q.data()[0], -1.0);
        // round(63.5) = 64 under half-away-from-zero
        assert!((q.data()[1] - 64.0 / 127.0).abs() < 1e-7);
        assert!((q.data()[1] - 0.503_937).abs() < 1e-6);
        assert_eq!(quantize_activation(&t(&[0.0; 3]), 8).data(), &[0.0; 3]);
    }

    #[test]
    fn spec_validation() {
        assert!(QuantSpec::default().validate().is_ok());
        let mut s = QuantSpec::default();
        s.activation_bits = Some(4);
        assert!(s.validate().is_err());
        s = QuantSpec::default();
        s.threshold_factor = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn bert_compression_ratios() {
        let base = EncoderFootprint::bert_base().compression_ratio();
        let large = EncoderFootprint::bert_large().compression_ratio();
        assert!((base - 14.9).abs() < 0.05, "{base}");
        assert!((large - 15.4).abs() < 0.05, "{large}");
    }
}
