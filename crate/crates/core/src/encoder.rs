//! L-layer Transformer encoder with post-LayerNorm residual blocks.
//!
//! Per layer and head: `AS = Q Kᵀ`, `AM = softmax(AS / s)`, `AC = AM V`,
//! `MHA = Concat(AC) Wᴼ + bᴼ`, `Y = LN(X + MHA)`, `X' = LN(Y + FFN(Y))`.
//! The softmax scale `s` is `√d` by default (see [`ScoreScale`]).
//!
//! Because every attention row sums to one, the MHA output of token `i`
//! decomposes exactly into `Σ_h Σ_j AM_h[i,j] · f_h(x_j) + bᴼ` with the value
//! path `f_h(x) = (x Wⱽ_h + bⱽ_h) Wᴼ_h`. Activation quantization is kept off
//! that value path so the identity survives quantized forwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, EmbeddingMode, Granularity, QuantSpec, WeightMode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreScale {
    /// `√d`, the hidden size.
    #[default]
    SqrtHidden,
    /// `√d_h`, the per-head size.
    SqrtHeadDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Task head width; 1 means a regression head.
    pub classes: usize,
    pub score_scale: ScoreScale,
    pub ln_eps: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 128,
            vocab: 64,
            max_len: 24,
            classes: 2,
            score_scale: ScoreScale::SqrtHidden,
            ln_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn softmax_scale(&self) -> f32 {
        match self.score_scale {
            ScoreScale::SqrtHidden => (self.hidden as f32).sqrt(),
            ScoreScale::SqrtHeadDim => (self.head_dim() as f32).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::Config("layer norm eps must be nonnegative".into()));
        }
        Ok(())
    }

    /// Total scalar parameter count implied by the shapes.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let per_layer = 4 * (d * d + d) + (d * self.ffn + self.ffn) + (self.ffn * d + d) + 4 * d;
        self.vocab * d + self.max_len * d + self.layers * per_layer + d * self.classes + self.classes
    }
}

/// Which quantizer a parameter passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    TokenEmbedding,
    Weight,
    FullPrecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const LAYER_FIELDS: [(&str, ParamRole); 16] = [
    ("attn.wq", ParamRole::Weight),
    ("attn.bq", ParamRole::FullPrecision),
    ("attn.wk", ParamRole::Weight),
    ("attn.bk", ParamRole::FullPrecision),
    ("attn.wv", ParamRole::Weight),
    ("attn.bv", ParamRole::FullPrecision),
    ("attn.wo", ParamRole::Weight),
    ("attn.bo", ParamRole::FullPrecision),
    ("ln1.gain", ParamRole::FullPrecision),
    ("ln1.bias", ParamRole::FullPrecision),
    ("ffn.w1", ParamRole::Weight),
    ("ffn.b1", ParamRole::FullPrecision),
    ("ffn.w2", ParamRole::Weight),
    ("ffn.b2", ParamRole::FullPrecision),
    ("ln2.gain", ParamRole::FullPrecision),
    ("ln2.bias", ParamRole::FullPrecision),
];

impl LayerParams {
    fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, std: f32, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let ff = cfg.ffn;
        LayerParams {
            wq: Tensor::randn(&[d, d], std, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], std, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], std, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], std, rng),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[d, ff], std, rng),
            b1: Tensor::zeros(&[ff]),
            w2: Tensor::randn(&[ff, d], std, rng),
            b2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl EncoderModel {
    /// Gaussian init with standard deviation `std`; biases zero, LayerNorm
    /// gains one.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, std: f32, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let token_embedding = Tensor::randn(&[config.vocab, d], std, rng);
        let position_embedding = Tensor::randn(&[config.max_len, d], std, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(&config, std, rng))
            .collect();
        let head_weight = Tensor::randn(&[d, config.classes], std, rng);
        Ok(EncoderModel {
            config,
            token_embedding,
            position_embedding,
            layers,
            head_weight,
            head_bias: Tensor::zeros(&[config.classes]),
        })
    }

    /// Parameter names in canonical order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embeddings.token".to_string(), "embeddings.position".to_string()];
        for l in 0..self.layers.len() {
            names.extend(LAYER_FIELDS.iter().map(|(n, _)| format!("layers.{l}.{n}")));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn param_roles(&self) -> Vec<ParamRole> {
        let mut roles = vec![ParamRole::TokenEmbedding, ParamRole::FullPrecision];
        for _ in &self.layers {
            roles.extend(LAYER_FIELDS.iter().map(|(_, r)| *r));
        }
        roles.push(ParamRole::FullPrecision);
        roles.push(ParamRole::FullPrecision);
        roles
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Rebuilds a model from tensors in canonical order, checking shapes.
    pub fn from_params(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut template = EncoderModel::zeros(config);
        let slots = template.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter shape {:?} does not match config shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(template)
    }

    fn zeros(config: EncoderConfig) -> Self {
        let d = config.hidden;
        let ff = config.ffn;
        let layer = LayerParams {
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, ff]),
            b1: Tensor::zeros(&[ff]),
            w2: Tensor::zeros(&[ff, d]),
            b2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        };
        EncoderModel {
            config,
            token_embedding: Tensor::zeros(&[config.vocab, d]),
            position_embedding: Tensor::zeros(&[config.max_len, d]),
            layers: vec![layer; config.layers],
            head_weight: Tensor::zeros(&[d, config.classes]),
            head_bias: Tensor::zeros(&[config.classes]),
        }
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.count_params() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} values, model has {}",
                flat.len(),
                self.count_params()
            )));
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Effective (possibly fake-quantized) parameter values in canonical
    /// order. `None` entries mean the latent value is used as-is.
    pub fn effective_params(&self, spec: &QuantSpec) -> Result<Vec<Option<Tensor>>> {
        spec.validate()?;
        self.params()
            .into_iter()
            .zip(self.param_roles())
            .map(|(t, role)| {
                let granularity = match (role, spec.weight_mode, spec.embedding_mode) {
                    (ParamRole::Weight, WeightMode::TernaryLayerwise, _) => Granularity::Tensor,
                    (ParamRole::TokenEmbedding, _, EmbeddingMode::TernaryRowwise) => Granularity::Row,
                    _ => return Ok(None),
                };
                Ok(Some(
                    quant::ternarize(t, granularity, spec.threshold_factor)?.dequantize(),
                ))
            })
            .collect()
    }

    /// Places the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        self.bind_inner(tape, trainable, None)
    }

    fn bind_inner(
        &self,
        tape: &mut Tape,
        trainable: bool,
        effective: Option<&[Option<Tensor>]>,
    ) -> Result<BoundModel> {
        let mut leaves = Vec::new();
        let mut used = Vec::new();
        for (i, t) in self.params().into_iter().enumerate() {
            let leaf = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            leaves.push(leaf);
            let eff = match effective.and_then(|e| e[i].as_ref()) {
                Some(q) => quant::ste_wrap(tape, leaf, q.clone())?,
                None => leaf,
            };
            used.push(eff);
        }
        Ok(BoundModel::from_vars(self.config, leaves, &used))
    }

    pub fn sa_prop_values(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        sa_prop_values(self, x, layer)
    }

    pub fn quantized_view(&self, spec: &QuantSpec) -> Result<QuantizedView<'_>> {
        QuantizedView::new(self, spec)
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Model parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: EncoderConfig,
    /// Latent leaves in canonical order; gradients land here.
    pub leaves: Vec<Var>,
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BoundModel {
    /// Uses `leaves` (canonical order, as produced by
    /// [`EncoderModel::param_names`]) directly as the forward parameters.
    pub fn from_leaves(config: EncoderConfig, leaves: Vec<Var>) -> Result<Self> {
        let expected = 4 + 16 * config.layers;
        if leaves.len() != expected {
            return Err(Error::Contract(format!(
                "{} parameter handles for a model with {expected}",
                leaves.len()
            )));
        }
        let used = leaves.clone();
        Ok(Self::from_vars(config, leaves, &used))
    }

    fn from_vars(config: EncoderConfig, leaves: Vec<Var>, used: &[Var]) -> Self {
        let layers = used[2..used.len() - 2]
            .chunks(16)
            .map(|c| LayerVars {
                wq: c[0],
                bq: c[1],
                wk: c[2],
                bk: c[3],
                wv: c[4],
                bv: c[5],
                wo: c[6],
                bo: c[7],
                ln1_gain: c[8],
                ln1_bias: c[9],
                w1: c[10],
                b1: c[11],
                w2: c[12],
                b2: c[13],
                ln2_gain: c[14],
                ln2_bias: c[15],
            })
            .collect();
        BoundModel {
            config,
            leaves,
            token_embedding: used[0],
            position_embedding: used[1],
            layers,
            head_weight: used[used.len() - 2],
            head_bias: used[used.len() - 1],
        }
    }

    /// Leaf gradients in canonical order (zeros where none arrived).
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f32>> {
        self.leaves
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).len()], <[f32]>::to_vec)
            })
            .collect()
    }
}

/// Tape handles for everything a forward pass exposes to the losses.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    pub input: Var,
    /// Input to the Q/K/V projections after any activation quantization.
    pub value_input: Var,
    pub scores: Vec<Var>,
    pub maps: Vec<Var>,
    pub contexts: Vec<Var>,
    pub mha: Var,
    pub attn_out: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub embedding: Var,
    pub layers: Vec<LayerOutputs>,
    pub logits: Var,
    pub score_scale: f32,
}

fn maybe_quant(tape: &mut Tape, x: Var, bits: Option<u8>) -> Result<Var> {
    match bits {
        Some(b) => quant::fake_quant_activation(tape, x, b),
        None => Ok(x),
    }
}

fn check_tokens(cfg: &EncoderConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds maximum {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Input(format!("token id {bad} out of range for vocab {}", cfg.vocab)));
    }
    Ok(())
}

/// Runs the encoder on `tape` with already-bound parameters.
///
/// `activation_bits` fake-quantizes the inputs of the Q/K/V projections,
/// the score product, and both FFN projections.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &BoundModel,
    tokens: &[usize],
    activation_bits: Option<u8>,
) -> Result<ForwardVars> {
    let cfg = &model.config;
    check_tokens(cfg, tokens)?;
    let n = tokens.len();
    let dh = cfg.head_dim();
    let scale = cfg.softmax_scale();
    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.gather(model.token_embedding, tokens)?;
    let pos = tape.gather(model.position_embedding, &positions)?;
    let embedding = tape.add(tok, pos)?;

    let mut x = embedding;
    let mut layers = Vec::with_capacity(model.layers.len());
    for p in &model.layers {
        let xin = maybe_quant(tape, x, activation_bits)?;
        let q = tape.matmul(xin, p.wq)?;
        let q = tape.add_row_bias(q, p.bq)?;
        let k = tape.matmul(xin, p.wk)?;
        let k = tape.add_row_bias(k, p.bk)?;
        let v = tape.matmul(xin, p.wv)?;
        let v = tape.add_row_bias(v, p.bv)?;
        let q = maybe_quant(tape, q, activation_bits)?;
        let k = maybe_quant(tape, k, activation_bits)?;

        let mut scores = Vec::with_capacity(cfg.heads);
        let mut maps = Vec::with_capacity(cfg.heads);
        let mut contexts = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_bt(qh, kh)?;
            let m = tape.softmax_rows(s, scale)?;
            let c = tape.matmul(m, vh)?;
            scores.push(s);
            maps.push(m);
            contexts.push(c);
        }
        let concat = tape.concat_cols(&contexts)?;
        let mha = tape.matmul(concat, p.wo)?;
        let mha = tape.add_row_bias(mha, p.bo)?;
        let res = tape.add(x, mha)?;
        let attn_out = tape.layer_norm(res, p.ln1_gain, p.ln1_bias, cfg.ln_eps)?;

        let yin = maybe_quant(tape, attn_out, activation_bits)?;
        let hid = tape.matmul(yin, p.w1)?;
        let hid = tape.add_row_bias(hid, p.b1)?;
        let hid = tape.gelu(hid);
        let hin = maybe_quant(tape, hid, activation_bits)?;
        let ffn = tape.matmul(hin, p.w2)?;
        let ffn = tape.add_row_bias(ffn, p.b2)?;
        let res2 = tape.add(attn_out, ffn)?;
        let output = tape.layer_norm(res2, p.ln2_gain, p.ln2_bias, cfg.ln_eps)?;

        layers.push(LayerOutputs {
            input: x,
            value_input: xin,
            scores,
            maps,
            contexts,
            mha,
            attn_out,
            output,
        });
        x = output;
    }
    let cls = tape.select_row(x, 0)?;
    let logits = tape.matmul(cls, model.head_weight)?;
    let logits = tape.add_row_bias(logits, model.head_bias)?;
    Ok(ForwardVars {
        embedding,
        layers,
        logits,
        score_scale: scale,
    })
}

/// Per-layer record of attention internals.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `X_l`.
    pub input: Tensor,
    /// Per head `AS_h`, n×n, unscaled.
    pub scores: Vec<Tensor>,
    /// Per head `AM_h`, n×n, row-stochastic; entries are the `α_{i,j}`.
    pub maps: Vec<Tensor>,
    /// Per head `AC_h`, n×d_h.
    pub contexts: Vec<Tensor>,
    pub mha: Tensor,
    /// `Y_l`.
    pub attn_out: Tensor,
    /// `X_{l+1}`.
    pub output: Tensor,
    /// Per head value path `f_h(x_j) = (x_j Wⱽ_h + bⱽ_h) Wᴼ_h`, n×d.
    pub prop: Vec<Tensor>,
    /// `bᴼ` as used in the forward.
    pub out_bias: Tensor,
}

impl LayerTrace {
    /// `f(x_j) = (x_j Wⱽ + bⱽ) Wᴼ` summed over heads, n×d.
    pub fn prop_total(&self) -> Tensor {
        let mut total = Tensor::zeros(self.mha.shape());
        for p in &self.prop {
            for (t, v) in total.data_mut().iter_mut().zip(p.data()) {
                *t += v;
            }
        }
        total
    }

    /// `Σ_h Σ_j α^h_{i,j} f_h(x_j) + bᴼ` for every token `i`.
    pub fn recompose_mha(&self) -> Result<Tensor> {
        let mut out = Tensor::zeros(self.mha.shape());
        for (map, prop) in self.maps.iter().zip(&self.prop) {
            let part = map.matmul(prop)?;
            for (o, v) in out.data_mut().iter_mut().zip(part.data()) {
                *o += v;
            }
        }
        out.add_row_bias(&self.out_bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Embedding output `X_0`.
    pub embedding: Tensor,
    pub layers: Vec<LayerTrace>,
    pub logits: Tensor,
    /// Softmax scale used to turn scores into maps.
    pub score_scale: f32,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.maps.len())
    }

    pub fn seq_len(&self) -> usize {
        self.embedding.rows()
    }
}

impl ForwardVars {
    /// Copies the captured values off the tape.
    pub fn to_trace(&self, tape: &Tape, model: &BoundModel) -> Result<AttentionTrace> {
        let cfg = &model.config;
        let dh = cfg.head_dim();
        let layers = self
            .layers
            .iter()
            .zip(&model.layers)
            .map(|(out, p)| {
                let xin = tape.value(out.value_input);
                let wv = tape.value(p.wv);
                let bv = tape.value(p.bv);
                let wo = tape.value(p.wo);
                let v = xin.matmul(wv)?.add_row_bias(bv)?;
                let prop = (0..cfg.heads)
                    .map(|h| {
                        let vh = v.slice_cols(h * dh, dh)?;
                        vh.matmul(&wo.slice_rows(h * dh, dh)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerTrace {
                    input: tape.value(out.input).clone(),
                    scores: out.scores.iter().map(|&v| tape.value(v).clone()).collect(),
                    maps: out.maps.iter().map(|&v| tape.value(v).clone()).collect(),
                    contexts: out.contexts.iter().map(|&v| tape.value(v).clone()).collect(),
                    mha: tape.value(out.mha).clone(),
                    attn_out: tape.value(out.attn_out).clone(),
                    output: tape.value(out.output).clone(),
                    prop,
                    out_bias: tape.value(p.bo).clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionTrace {
            embedding: tape.value(self.embedding).clone(),
            layers,
            logits: tape.value(self.logits).clone(),
            score_scale: self.score_scale,
        })
    }
}

/// Forward pass on a fresh tape. Returns the logits row and, when `capture`
/// is set, the full attention trace. With `quant`, designated parameters and
/// activation sites are fake-quantized.
pub fn forward(
    model: &EncoderModel,
    tokens: &[usize],
    capture: bool,
    quant: Option<&QuantSpec>,
) -> Result<(Tensor, Option<AttentionTrace>)> {
    match quant {
        Some(spec) => QuantizedView::new(model, spec)?.forward(tokens, capture),
        None => run_forward(model, tokens, capture, None, None),
    }
}

fn run_forward(
    model: &EncoderModel,
    tokens: &[usize],
    capture: bool,
    effective: Option<&[Option<Tensor>]>,
    activation_bits: Option<u8>,
) -> Result<(Tensor, Option<AttentionTrace>)> {
    let mut tape = Tape::new();
    let bound = model.bind_inner(&mut tape, false, effective)?;
    let vars = forward_on_tape(&mut tape, &bound, tokens, activation_bits)?;
    let trace = if capture {
        Some(vars.to_trace(&tape, &bound)?)
    } else {
        None
    };
    Ok((tape.value(vars.logits).clone(), trace))
}

/// A forward-compatible view of a model whose designated parameters are
/// ternarized. Latent parameters stay in the borrowed model.
#[derive(Debug, Clone)]
pub struct QuantizedView<'a> {
    pub model: &'a EncoderModel,
    pub spec: QuantSpec,
    effective: Vec<Option<Tensor>>,
}

impl<'a> QuantizedView<'a> {
    pub fn new(model: &'a EncoderModel, spec: &QuantSpec) -> Result<Self> {
        Ok(QuantizedView {
            model,
            spec: *spec,
            effective: model.effective_params(spec)?,
        })
    }

    /// Binds latent leaves plus straight-through nodes carrying the
    /// quantized values.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        self.model.bind_inner(tape, trainable, Some(&self.effective))
    }

    pub fn forward(&self, tokens: &[usize], capture: bool) -> Result<(Tensor, Option<AttentionTrace>)> {
        run_forward(
            self.model,
            tokens,
            capture,
            Some(&self.effective),
            self.spec.activation_bits,
        )
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundModel, tokens: &[usize]) -> Result<ForwardVars> {
        forward_on_tape(tape, bound, tokens, self.spec.activation_bits)
    }

    /// The model with every quantized parameter replaced by its
    /// dequantized value.
    pub fn effective_model(&self) -> EncoderModel {
        let mut m = self.model.clone();
        for (slot, eff) in m.params_mut().into_iter().zip(&self.effective) {
            if let Some(q) = eff {
                *slot = q.clone();
            }
        }
        m
    }
}

pub fn quantized_view<'a>(model: &'a EncoderModel, spec: &QuantSpec) -> Result<QuantizedView<'a>> {
    QuantizedView::new(model, spec)
}

/// Value path `(x_j Wⱽ + bⱽ) Wᴼ` of layer `layer` for every row of `x`.
pub fn sa_prop_values(model: &EncoderModel, x: &Tensor, layer: usize) -> Result<Tensor> {
    let p = model.layers.get(layer).ok_or_else(|| {
        Error::Index(format!("layer {layer} of {}", model.layers.len()))
    })?;
    x.matmul(&p.wv)?.add_row_bias(&p.bv)?.matmul(&p.wo)
}
