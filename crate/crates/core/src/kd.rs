//! Distillation objectives between a teacher trace and a student forward.
//!
//! Every loss exists at two levels: a tape-level builder that differentiates
//! into the student, and a value-level function over two captured traces.
//! The value-level functions place the student trace on a scratch tape and
//! call the builder, so both levels share one implementation.
//!
//! MSE terms average over all elements of the compared tensor and sum over
//! the distilled layers. The attention-map term is a natural-log KL between
//! τ-softened maps, averaged over heads and rows and scaled by τ².

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionTrace, ForwardVars, LayerOutputs};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    SoftLabel,
    TrmOutput,
    Score,
    Map,
    Output,
    MhaOnly,
    /// Cross-entropy (or MSE for regression heads) against gold targets.
    HardLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UnifiedMode {
    #[default]
    Off,
    /// `map + γ·output`
    Sm1,
    /// `output + γ·map`
    Sm2,
}

impl UnifiedMode {
    pub fn combine(self, map: f64, output: f64, gamma: f64) -> f64 {
        match self {
            UnifiedMode::Off => 0.0,
            UnifiedMode::Sm1 => map + gamma * output,
            UnifiedMode::Sm2 => output + gamma * map,
        }
    }
}

/// The mixing grid {0.1, 0.2, …, 0.9}.
pub fn gamma_grid() -> [f32; 9] {
    [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
}

pub fn check_gamma(gamma: f32) -> Result<()> {
    let tenths = gamma as f64 * 10.0;
    let k = tenths.round();
    if (1.0..=9.0).contains(&k) && (tenths - k).abs() < 1e-5 {
        Ok(())
    } else {
        Err(Error::Config(format!("γ = {gamma} is not on the grid {{0.1, …, 0.9}}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerStrategy {
    All,
    Uniform,
}

/// Distilled layer indices. `uniform` picks `⌈(i+1)·L/k⌉ − 1` for `i < k`.
pub fn select_layers(num_layers: usize, k: usize, strategy: LayerStrategy) -> Result<Vec<usize>> {
    if k == 0 || k > num_layers {
        return Err(Error::Config(format!(
            "cannot distill {k} of {num_layers} layers"
        )));
    }
    Ok(match strategy {
        LayerStrategy::All => (0..num_layers).collect(),
        LayerStrategy::Uniform => (0..k).map(|i| ((i + 1) * num_layers).div_ceil(k) - 1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelection {
    #[default]
    All,
    Uniform(usize),
    Explicit(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::All => Ok((0..num_layers).collect()),
            LayerSelection::Uniform(k) => select_layers(num_layers, *k, LayerStrategy::Uniform),
            LayerSelection::Explicit(ls) => {
                if let Some(bad) = ls.iter().find(|&&l| l >= num_layers) {
                    return Err(Error::Config(format!("layer {bad} of {num_layers}")));
                }
                Ok(ls.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    pub soft_label: f32,
    pub trm_output: f32,
    pub score: f32,
    pub map: f32,
    pub output: f32,
    pub mha_only: f32,
    pub unified: f32,
    pub hard_label: f32,
}

impl Default for TermWeights {
    fn default() -> Self {
        TermWeights {
            soft_label: 1.0,
            trm_output: 1.0,
            score: 1.0,
            map: 1.0,
            output: 1.0,
            mha_only: 1.0,
            unified: 1.0,
            hard_label: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub terms: Vec<Term>,
    pub unified: UnifiedMode,
    pub tau: f32,
    pub gamma: f32,
    pub layers: LayerSelection,
    /// Whether the Transformer-output term also matches the embedding output.
    pub include_embedding: bool,
    pub weights: TermWeights,
}

impl Default for KdConfig {
    fn default() -> Self {
        Preset::Baseline.config()
    }
}

impl KdConfig {
    pub fn has(&self, term: Term) -> bool {
        self.terms.contains(&term)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("τ must be positive, got {}", self.tau)));
        }
        if self.unified != UnifiedMode::Off {
            check_gamma(self.gamma)?;
        }
        if self.terms.is_empty() && self.unified == UnifiedMode::Off {
            return Err(Error::Config("no loss terms are active".into()));
        }
        self.layers.resolve(num_layers).map(|_| ())
    }
}

/// The four named KD options compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "map")]
    Map,
    #[serde(rename = "output")]
    Output,
    #[serde(rename = "map+output")]
    MapOutput,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Map, Preset::Output, Preset::MapOutput];

    /// Soft labels and Transformer outputs always; the attention term varies.
    pub fn config(self) -> KdConfig {
        let mut terms = vec![Term::SoftLabel, Term::TrmOutput];
        let mut unified = UnifiedMode::Off;
        match self {
            Preset::Baseline => terms.push(Term::Score),
            Preset::Map => terms.push(Term::Map),
            Preset::Output => terms.push(Term::Output),
            Preset::MapOutput => unified = UnifiedMode::Sm1,
        }
        KdConfig {
            terms,
            unified,
            tau: 1.0,
            gamma: 0.5,
            layers: LayerSelection::All,
            include_embedding: true,
            weights: TermWeights::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "Baseline",
            Preset::Map => "Map",
            Preset::Output => "Output",
            Preset::MapOutput => "Map+Output",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Preset::Baseline),
            "map" => Ok(Preset::Map),
            "output" => Ok(Preset::Output),
            "map+output" => Ok(Preset::MapOutput),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Supervision target for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Class(usize),
    Value(f32),
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_label: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trm_output: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mha_only: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unified: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_label: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns (absent terms stay absent).
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = items.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        LossBreakdown {
            soft_label: avg(|b| b.soft_label),
            trm_output: avg(|b| b.trm_output),
            score: avg(|b| b.score),
            map: avg(|b| b.map),
            output: avg(|b| b.output),
            mha_only: avg(|b| b.mha_only),
            unified: avg(|b| b.unified),
            hard_label: avg(|b| b.hard_label),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        }
    }

    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        [
            ("soft_label", self.soft_label),
            ("trm_output", self.trm_output),
            ("score", self.score),
            ("map", self.map),
            ("output", self.output),
            ("mha_only", self.mha_only),
            ("unified", self.unified),
            ("hard_label", self.hard_label),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

fn check_layers(teacher: &AttentionTrace, student: &ForwardVars, layers: &[usize]) -> Result<()> {
    if teacher.layers.len() != student.layers.len() {
        return Err(Error::Contract(format!(
            "teacher has {} layers, student {}",
            teacher.layers.len(),
            student.layers.len()
        )));
    }
    if let Some(bad) = layers.iter().find(|&&l| l >= teacher.layers.len()) {
        return Err(Error::Contract(format!(
            "layer {bad} out of range for {} layers",
            teacher.layers.len()
        )));
    }
    Ok(())
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn sum_or_zero(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        Ok(zero(tape))
    } else {
        tape.add_scalars(terms)
    }
}

fn layer_mse(
    tape: &mut Tape,
    teacher: &AttentionTrace,
    student: &ForwardVars,
    layers: &[usize],
    pick_t: impl Fn(&crate::encoder::LayerTrace) -> &Tensor,
    pick_s: impl Fn(&LayerOutputs) -> Var,
) -> Result<Var> {
    check_layers(teacher, student, layers)?;
    let terms = layers
        .iter()
        .map(|&l| tape.mse(pick_s(&student.layers[l]), pick_t(&teacher.layers[l])))
        .collect::<Result<Vec<_>>>()?;
    sum_or_zero(tape, &terms)
}

pub mod tape_loss {
    //! Loss builders that differentiate into the student forward.

    use super::*;

    /// `Σ_l MSE(AS_l^T, AS_l^S)`, averaging over every head's elements.
    pub fn score(tape: &mut Tape, teacher: &AttentionTrace, student: &ForwardVars, layers: &[usize]) -> Result<Var> {
        check_layers(teacher, student, layers)?;
        let mut terms = Vec::new();
        for &l in layers {
            let (t, s) = (&teacher.layers[l], &student.layers[l]);
            if t.scores.len() != s.scores.len() {
                return Err(Error::Contract("head counts differ".into()));
            }
            let heads = t.scores.len().max(1) as f32;
            let per_head = t
                .scores
                .iter()
                .zip(&s.scores)
                .map(|(ts, &sv)| tape.mse(sv, ts))
                .collect::<Result<Vec<_>>>()?;
            let layer_sum = sum_or_zero(tape, &per_head)?;
            terms.push(tape.scale(layer_sum, 1.0 / heads));
        }
        sum_or_zero(tape, &terms)
    }

    /// `Σ_l τ²/(N_H·n) · Σ_{h,t} KL(AM^T_{l,h,t}(τ) ‖ AM^S_{l,h,t}(τ))`.
    pub fn map(
        tape: &mut Tape,
        teacher: &AttentionTrace,
        student: &ForwardVars,
        layers: &[usize],
        tau: f32,
    ) -> Result<Var> {
        check_layers(teacher, student, layers)?;
        if !(tau > 0.0) {
            return Err(Error::Config(format!("τ must be positive, got {tau}")));
        }
        let scale = student.score_scale * tau;
        let mut terms = Vec::new();
        for &l in layers {
            let (t, s) = (&teacher.layers[l], &student.layers[l]);
            if t.scores.len() != s.scores.len() {
                return Err(Error::Contract("head counts differ".into()));
            }
            let heads = t.scores.len().max(1);
            let rows = t.scores.first().map_or(1, |m| m.rows()).max(1);
            let per_head = t
                .scores
                .iter()
                .zip(&s.scores)
                .map(|(ts, &sv)| {
                    let target = tensor::softmax_rows(ts, teacher.score_scale * tau)?;
                    tape.kl_rows(sv, &target, scale)
                })
                .collect::<Result<Vec<_>>>()?;
            let layer_sum = sum_or_zero(tape, &per_head)?;
            terms.push(tape.scale(layer_sum, tau * tau / (heads * rows) as f32));
        }
        sum_or_zero(tape, &terms)
    }

    /// `Σ_l MSE(Y_l^T, Y_l^S)` on the attention outputs.
    pub fn output(tape: &mut Tape, teacher: &AttentionTrace, student: &ForwardVars, layers: &[usize]) -> Result<Var> {
        layer_mse(tape, teacher, student, layers, |t| &t.attn_out, |s| s.attn_out)
    }

    /// `Σ_l MSE(MHA_l^T, MHA_l^S)`, the attention output without residual
    /// and LayerNorm.
    pub fn mha_only(tape: &mut Tape, teacher: &AttentionTrace, student: &ForwardVars, layers: &[usize]) -> Result<Var> {
        layer_mse(tape, teacher, student, layers, |t| &t.mha, |s| s.mha)
    }

    /// `Σ_l MSE(X_{l+1}^T, X_{l+1}^S)`, plus the embedding output when asked.
    pub fn trm_output(
        tape: &mut Tape,
        teacher: &AttentionTrace,
        student: &ForwardVars,
        layers: &[usize],
        include_embedding: bool,
    ) -> Result<Var> {
        let body = layer_mse(tape, teacher, student, layers, |t| &t.output, |s| s.output)?;
        if include_embedding {
            let emb = tape.mse(student.embedding, &teacher.embedding)?;
            tape.add(body, emb)
        } else {
            Ok(body)
        }
    }

    /// KL between teacher and student class distributions at τ = 1, or the
    /// logit MSE for single-output regression heads.
    pub fn soft_label(tape: &mut Tape, teacher_logits: &Tensor, student_logits: Var) -> Result<Var> {
        if teacher_logits.shape() != tape.value(student_logits).shape() {
            return Err(Error::Contract(format!(
                "logit shapes differ: {:?} vs {:?}",
                teacher_logits.shape(),
                tape.value(student_logits).shape()
            )));
        }
        if teacher_logits.cols() == 1 {
            return tape.mse(student_logits, teacher_logits);
        }
        let target = tensor::softmax_rows(teacher_logits, 1.0)?;
        tape.kl_rows(student_logits, &target, 1.0)
    }

    pub fn hard_label(tape: &mut Tape, student_logits: Var, target: Target) -> Result<Var> {
        match target {
            Target::Class(c) => tape.cross_entropy(student_logits, c),
            Target::Value(v) => tape.mse(student_logits, &Tensor::new(vec![1, 1], vec![v])?),
        }
    }

    /// Weighted sum of every active term.
    pub fn total(
        tape: &mut Tape,
        cfg: &KdConfig,
        teacher: &AttentionTrace,
        student: &ForwardVars,
        target: Option<Target>,
    ) -> Result<(Var, LossBreakdown)> {
        let layers = cfg.layers.resolve(student.layers.len())?;
        let mut br = LossBreakdown::default();
        let mut weighted = Vec::new();
        let mut add = |tape: &mut Tape, var: Var, weight: f32, slot: &mut Option<f64>| {
            *slot = Some(tape.value(var).data()[0] as f64);
            weighted.push(if weight == 1.0 { var } else { tape.scale(var, weight) });
        };
        let w = cfg.weights;
        if cfg.has(Term::SoftLabel) {
            let v = soft_label(tape, &teacher.logits, student.logits)?;
            add(tape, v, w.soft_label, &mut br.soft_label);
        }
        if cfg.has(Term::TrmOutput) {
            let v = trm_output(tape, teacher, student, &layers, cfg.include_embedding)?;
            add(tape, v, w.trm_output, &mut br.trm_output);
        }
        if cfg.has(Term::Score) {
            let v = score(tape, teacher, student, &layers)?;
            add(tape, v, w.score, &mut br.score);
        }
        if cfg.has(Term::Map) {
            let v = map(tape, teacher, student, &layers, cfg.tau)?;
            add(tape, v, w.map, &mut br.map);
        }
        if cfg.has(Term::Output) {
            let v = output(tape, teacher, student, &layers)?;
            add(tape, v, w.output, &mut br.output);
        }
        if cfg.has(Term::MhaOnly) {
            let v = mha_only(tape, teacher, student, &layers)?;
            add(tape, v, w.mha_only, &mut br.mha_only);
        }
        if cfg.unified != UnifiedMode::Off {
            check_gamma(cfg.gamma)?;
            let m = map(tape, teacher, student, &layers, cfg.tau)?;
            let o = output(tape, teacher, student, &layers)?;
            let v = match cfg.unified {
                UnifiedMode::Sm1 => {
                    let o = tape.scale(o, cfg.gamma);
                    tape.add(m, o)?
                }
                UnifiedMode::Sm2 => {
                    let m = tape.scale(m, cfg.gamma);
                    tape.add(o, m)?
                }
                UnifiedMode::Off => unreachable!(),
            };
            add(tape, v, w.unified, &mut br.unified);
        }
        if cfg.has(Term::HardLabel) {
            let target = target.ok_or_else(|| {
                Error::Contract("hard-label term requested without a target".into())
            })?;
            let v = hard_label(tape, student.logits, target)?;
            add(tape, v, w.hard_label, &mut br.hard_label);
        }
        if weighted.is_empty() {
            return Err(Error::Contract("no loss terms are active".into()));
        }
        let total = tape.add_scalars(&weighted)?;
        br.total = tape.value(total).data()[0] as f64;
        if !br.total.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        Ok((total, br))
    }
}

/// Places a captured trace on `tape` as leaves so the value-level losses can
/// reuse the tape builders. With `trainable`, the leaves receive gradients.
pub fn trace_on_tape(tape: &mut Tape, trace: &AttentionTrace, trainable: bool) -> ForwardVars {
    let mut leaf = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let embedding = leaf(&trace.embedding);
    let layers = trace
        .layers
        .iter()
        .map(|l| {
            let input = leaf(&l.input);
            LayerOutputs {
                input,
                value_input: input,
                scores: l.scores.iter().map(&mut leaf).collect(),
                maps: l.maps.iter().map(&mut leaf).collect(),
                contexts: l.contexts.iter().map(&mut leaf).collect(),
                mha: leaf(&l.mha),
                attn_out: leaf(&l.attn_out),
                output: leaf(&l.output),
            }
        })
        .collect();
    let logits = leaf(&trace.logits);
    ForwardVars {
        embedding,
        layers,
        logits,
        score_scale: trace.score_scale,
    }
}

fn eval(
    student: &AttentionTrace,
    f: impl FnOnce(&mut Tape, &ForwardVars) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = trace_on_tape(&mut tape, student, false);
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item()? as f64)
}

pub fn score_loss(teacher: &AttentionTrace, student: &AttentionTrace, layers: &[usize]) -> Result<f64> {
    eval(student, |t, s| tape_loss::score(t, teacher, s, layers))
}

pub fn map_loss(teacher: &AttentionTrace, student: &AttentionTrace, layers: &[usize], tau: f32) -> Result<f64> {
    eval(student, |t, s| tape_loss::map(t, teacher, s, layers, tau))
}

pub fn output_loss(teacher: &AttentionTrace, student: &AttentionTrace, layers: &[usize]) -> Result<f64> {
    eval(student, |t, s| tape_loss::output(t, teacher, s, layers))
}

pub fn mha_only_loss(teacher: &AttentionTrace, student: &AttentionTrace, layers: &[usize]) -> Result<f64> {
    eval(student, |t, s| tape_loss::mha_only(t, teacher, s, layers))
}

pub fn trm_output_loss(
    teacher: &AttentionTrace,
    student: &AttentionTrace,
    layers: &[usize],
    include_embedding: bool,
) -> Result<f64> {
    eval(student, |t, s| tape_loss::trm_output(t, teacher, s, layers, include_embedding))
}

pub fn soft_label_loss(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student_logits.clone());
    let out = tape_loss::soft_label(&mut tape, teacher_logits, s)?;
    Ok(tape.value(out).item()? as f64)
}

/// SM1 = map + γ·output, SM2 = output + γ·map, with γ on the 0.1 grid.
pub fn unified_loss(
    teacher: &AttentionTrace,
    student: &AttentionTrace,
    layers: &[usize],
    mode: UnifiedMode,
    gamma: f32,
    tau: f32,
) -> Result<f64> {
    if mode == UnifiedMode::Off {
        return Err(Error::Config("unified loss needs mode SM1 or SM2".into()));
    }
    check_gamma(gamma)?;
    let m = map_loss(teacher, student, layers, tau)?;
    let o = output_loss(teacher, student, layers)?;
    Ok(mode.combine(m, o, gamma as f64))
}

pub fn total_loss(
    cfg: &KdConfig,
    teacher: &AttentionTrace,
    student: &AttentionTrace,
    target: Option<Target>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = trace_on_tape(&mut tape, student, false);
    tape_loss::total(&mut tape, cfg, teacher, &vars, target).map(|(_, b)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LayerTrace;

    fn one_layer(score: f32, y: &[f32], mha: &[f32]) -> AttentionTrace {
        let d = y.len();
        let row = |v: &[f32]| Tensor::new(vec![1, v.len()], v.to_vec()).unwrap();
        AttentionTrace {
            embedding: row(&vec![0.0; d]),
            layers: vec![LayerTrace {
                input: row(&vec![0.0; d]),
                scores: vec![Tensor::new(vec![1, 1], vec![score]).unwrap()],
                maps: vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap()],
                contexts: vec![row(&vec![0.0; d])],
                mha: row(mha),
                attn_out: row(y),
                output: row(y),
                prop: vec![row(&vec![0.0; d])],
                out_bias: Tensor::zeros(&[d]),
            }],
            logits: row(&[0.0, 0.0]),
            score_scale: 1.0,
        }
    }

    #[test]
    fn score_loss_hand_case() {
        let t = one_layer(2.0, &[0.0, 0.0], &[0.0, 0.0]);
        let s = one_layer(1.0, &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(score_loss(&t, &s, &[0]).unwrap(), 1.0);
        assert_eq!(score_loss(&t, &t, &[0]).unwrap(), 0.0);
        assert_eq!(score_loss(&t, &s, &[]).unwrap(), 0.0);
    }

    #[test]
    fn output_and_mha_hand_cases() {
        let t = one_layer(0.0, &[1.0, 1.0], &[1.0, 1.0]);
        let s = one_layer(0.0, &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(output_loss(&t, &s, &[0]).unwrap(), 1.0);
        assert_eq!(mha_only_loss(&t, &s, &[0]).unwrap(), 1.0);
        assert_eq!(trm_output_loss(&t, &s, &[0], false).unwrap(), 1.0);
        assert_eq!(trm_output_loss(&t, &s, &[0], true).unwrap(), 1.0);
    }

    #[test]
    fn map_loss_single_row_hand_case() {
        let mut t = one_layer(0.0, &[0.0], &[0.0]);
        let mut s = t.clone();
        // Teacher [0.9, 0.1]: scores [ln 9, 0]; student uniform.
        t.layers[0].scores = vec![Tensor::new(vec![1, 2], vec![9f32.ln(), 0.0]).unwrap()];
        s.layers[0].scores = vec![Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()];
        let v = map_loss(&t, &s, &[0], 1.0).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        assert!((expected - 0.368_064).abs() < 1e-6);
    }

    #[test]
    fn soft_label_hand_case_and_shift_invariance() {
        let t = Tensor::new(vec![1, 2], vec![2f32.ln(), 0.0]).unwrap();
        let s = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let v = soft_label_loss(&t, &s).unwrap();
        let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-6);
        assert!((expected - 0.05663).abs() < 1e-5);
        let shifted = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        assert!((soft_label_loss(&t, &shifted).unwrap() - v).abs() < 1e-6);
        assert!(soft_label_loss(&s, &s).unwrap().abs() < 1e-9);
    }

    #[test]
    fn gamma_grid_enforced() {
        for g in gamma_grid() {
            assert!(check_gamma(g).is_ok());
        }
        assert!(check_gamma(0.0).is_err());
        assert!(check_gamma(0.55).is_err());
        assert!(check_gamma(1.0).is_err());
    }

    #[test]
    fn layer_selection_formula() {
        assert_eq!(select_layers(12, 12, LayerStrategy::Uniform).unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(select_layers(12, 12, LayerStrategy::All).unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(select_layers(12, 4, LayerStrategy::Uniform).unwrap(), vec![2, 5, 8, 11]);
        assert_eq!(select_layers(12, 1, LayerStrategy::Uniform).unwrap(), vec![11]);
        assert!(matches!(select_layers(4, 5, LayerStrategy::Uniform), Err(Error::Config(_))));
        assert_eq!(LayerSelection::Explicit(vec![9]).resolve(12).unwrap(), vec![9]);
        assert!(LayerSelection::Explicit(vec![12]).resolve(12).is_err());
    }

    #[test]
    fn presets_parse_and_compose() {
        assert_eq!("map+output".parse::<Preset>().unwrap(), Preset::MapOutput);
        assert_eq!("Baseline".parse::<Preset>().unwrap(), Preset::Baseline);
        assert!("score".parse::<Preset>().is_err());
        let b = Preset::Baseline.config();
        assert_eq!(b.terms, vec![Term::SoftLabel, Term::TrmOutput, Term::Score]);
        assert_eq!(Preset::Map.config().terms[2], Term::Map);
        assert_eq!(Preset::Output.config().terms[2], Term::Output);
        assert_eq!(Preset::MapOutput.config().unified, UnifiedMode::Sm1);
        let names: Vec<_> = Preset::ALL.iter().map(|p| p.to_string()).collect();
        assert_eq!(names, ["Baseline", "Map", "Output", "Map+Output"]);
    }

    #[test]
    fn hard_label_needs_target() {
        let t = one_layer(0.0, &[0.0], &[0.0]);
        let cfg = KdConfig {
            terms: vec![Term::HardLabel],
            ..KdConfig::default()
        };
        assert!(matches!(total_loss(&cfg, &t, &t, None), Err(Error::Contract(_))));
        assert!(total_loss(&cfg, &t, &t, Some(Target::Class(1))).is_ok());
    }
}
