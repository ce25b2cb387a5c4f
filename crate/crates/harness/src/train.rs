//! Training loops for the full-precision teacher and the quantized student.
//!
//! One optimizer step per mini-batch. Each example is differentiated on its
//! own tape and the gradients are merged in example order, so the result is
//! independent of the execution mode. Shuffling is seeded per epoch, which
//! lets a run resume from an epoch boundary with an identical continuation.

use std::path::{Path, PathBuf};

use kdqat_core::batch::{kd_batch, predict, supervised_batch, Example};
use kdqat_core::{EncoderModel, Exec, KdConfig, LossBreakdown, QuantSpec, Target, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::OptimConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{DevMetrics, Metrics, Record};
use crate::optim::{clip_global_norm, learning_rate, Adam};
use crate::task::Dataset;

/// Where a run writes, and how it executes.
#[derive(Debug)]
pub struct RunCtx {
    pub dir: Option<PathBuf>,
    pub resume: bool,
    pub exec: Exec,
    pub metrics: Metrics,
    /// Fail with `Halted` after this many completed epochs of any stage, as
    /// if the process had been killed there.
    pub halt_after: Option<usize>,
}

impl RunCtx {
    pub fn memory(exec: Exec) -> Self {
        RunCtx {
            dir: None,
            resume: false,
            exec,
            metrics: Metrics::memory(),
            halt_after: None,
        }
    }

    /// Creates `dir` and opens its `metrics.jsonl`, appending when resuming.
    pub fn in_dir(dir: &Path, resume: bool, exec: Exec) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(RunCtx {
            dir: Some(dir.to_path_buf()),
            resume,
            exec,
            metrics: Metrics::open(&dir.join("metrics.jsonl"), resume)?,
            halt_after: None,
        })
    }

    /// A context for a nested run: `name` below this one, or in memory.
    pub fn child(&self, name: &str) -> Result<Self> {
        match &self.dir {
            Some(d) => RunCtx::in_dir(&d.join(name), self.resume, self.exec),
            None => Ok(RunCtx::memory(self.exec)),
        }
    }

    pub fn path(&self, file: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(file))
    }
}

/// What a stage minimizes.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Cross-entropy (or squared error) on the labels, full precision.
    Supervised,
    /// Distillation from `teacher` into the quantized view of the model.
    Distill {
        teacher: &'a EncoderModel,
        quant: &'a QuantSpec,
        kd: &'a KdConfig,
    },
}

impl Objective<'_> {
    fn stream(&self) -> u64 {
        match self {
            Objective::Supervised => 1,
            Objective::Distill { .. } => 2,
        }
    }
}

pub fn dev_metrics(logits: &[Tensor], examples: &[Example]) -> DevMetrics {
    let n = examples.len().max(1) as f64;
    match examples.first().map(|e| e.target) {
        Some(Target::Value(_)) => {
            let se: f64 = logits
                .iter()
                .zip(examples)
                .map(|(l, e)| match e.target {
                    Target::Value(v) => (l.data()[0] as f64 - v as f64).powi(2),
                    Target::Class(_) => f64::NAN,
                })
                .sum();
            DevMetrics { accuracy: None, mse: Some(se / n) }
        }
        _ => {
            let hits = logits
                .iter()
                .zip(examples)
                .filter(|(l, e)| {
                    let d = l.data();
                    let arg = (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b });
                    e.target == Target::Class(arg)
                })
                .count();
            DevMetrics { accuracy: Some(hits as f64 / n), mse: None }
        }
    }
}

/// Dev metrics of `model`, through the quantized view when `quant` is given.
pub fn evaluate(model: &EncoderModel, quant: Option<&QuantSpec>, dev: &[Example], exec: Exec) -> Result<DevMetrics> {
    let logits = match quant {
        Some(q) => {
            let view = model.quantized_view(q)?;
            predict(model, Some(&view), dev, exec)?
        }
        None => predict(model, None, dev, exec)?,
    };
    Ok(dev_metrics(&logits, dev))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    stage: String,
    seed: u64,
    epochs_done: usize,
    step: u64,
    total_steps: u64,
}

fn state_files(dir: &Path, stage: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stage}.state.ckpt")), dir.join(format!("{stage}.state.json")))
}

fn save_state(dir: &Path, meta: &StateMeta, model: &EncoderModel, adam: &Adam) -> Result<()> {
    let (ckpt, json) = state_files(dir, &meta.stage);
    let names = model.param_names();
    let mut tensors = checkpoint::model_tensors(model);
    for (prefix, bufs) in [("adam.m", &adam.m), ("adam.v", &adam.v)] {
        for ((name, buf), p) in names.iter().zip(bufs).zip(model.params()) {
            tensors.push((format!("{prefix}/{name}"), Tensor::new(p.shape().to_vec(), buf.clone())?));
        }
    }
    checkpoint::save(&ckpt, &tensors)?;
    let tmp = json.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_string(meta)?).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, &json).map_err(io_err(&json))
}

fn load_state(dir: &Path, stage: &str, model: &EncoderModel) -> Result<Option<(StateMeta, EncoderModel, Adam)>> {
    let (ckpt, json) = state_files(dir, stage);
    if !json.exists() {
        return Ok(None);
    }
    let meta: StateMeta = serde_json::from_str(&std::fs::read_to_string(&json).map_err(io_err(&json))?)?;
    let mut tensors = checkpoint::load(&ckpt)?;
    let k = model.params().len();
    if tensors.len() != 3 * k {
        return Err(HarnessError::Checkpoint(format!("{}: expected {} tensors", ckpt.display(), 3 * k)));
    }
    let v: Vec<Vec<f32>> = tensors.split_off(2 * k).into_iter().map(|(_, t)| t.into_data()).collect();
    let m: Vec<Vec<f32>> = tensors.split_off(k).into_iter().map(|(_, t)| t.into_data()).collect();
    let restored = checkpoint::model_from_tensors(model.config, tensors)?;
    let adam = Adam { m, v, t: meta.step };
    Ok(Some((meta, restored, adam)))
}

/// Trains `init` on `data.train` under `objective` and reports dev metrics
/// after every epoch. Zero epochs returns `init` unchanged.
pub fn fit(
    ctx: &mut RunCtx,
    stage: &str,
    seed: u64,
    optim: &OptimConfig,
    init: EncoderModel,
    data: &Dataset,
    objective: Objective<'_>,
) -> Result<(EncoderModel, DevMetrics)> {
    let exec = ctx.exec;
    let quant = match objective {
        Objective::Supervised => None,
        Objective::Distill { quant, .. } => Some(quant),
    };
    let steps_per_epoch = data.train.len().div_ceil(optim.batch_size) as u64;
    let total = steps_per_epoch * optim.epochs as u64;
    let mut model = init;
    let mut adam = Adam::new(&model.params());
    let mut step = 0u64;
    let mut start = 0usize;

    if let (true, Some(dir)) = (ctx.resume, ctx.dir.clone()) {
        if let Some((meta, m, a)) = load_state(&dir, stage, &model)? {
            if meta.seed != seed || meta.total_steps != total {
                return Err(HarnessError::Config(format!(
                    "saved {stage} state in {} belongs to a different run",
                    dir.display()
                )));
            }
            (model, adam, step, start) = (m, a, meta.step, meta.epochs_done);
        }
    }

    let mut dev = evaluate(&model, quant, &data.dev, exec)?;
    for epoch in start..optim.epochs {
        if ctx.halt_after.is_some_and(|h| epoch >= h) {
            return Err(HarnessError::Halted { stage: stage.into(), epochs: epoch });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(objective.stream() << 32 | epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(steps_per_epoch as usize);
        for chunk in order.chunks(optim.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let diverged = |e: kdqat_core::Error| match e {
                kdqat_core::Error::Numeric(message) => HarnessError::Diverged { step, message },
                other => other.into(),
            };
            let (mut grads, br) = match objective {
                Objective::Supervised => {
                    let (g, loss) = supervised_batch(&model, &batch, exec).map_err(diverged)?;
                    (g, LossBreakdown { hard_label: Some(loss), total: loss, ..Default::default() })
                }
                Objective::Distill { teacher, quant, kd } => {
                    let view = model.quantized_view(quant)?;
                    kd_batch(teacher, &view, kd, &batch, exec).map_err(diverged)?
                }
            };
            let norm = clip_global_norm(&mut grads, optim.clip_norm);
            if !norm.is_finite() {
                return Err(HarnessError::Diverged { step, message: "gradient is not finite".into() });
            }
            let lr = learning_rate(optim, step, total);
            adam.step(optim, model.params_mut(), &grads, lr);
            step += 1;
            losses.push(br);
        }
        dev = evaluate(&model, quant, &data.dev, exec)?;
        ctx.metrics.emit(Record::Epoch {
            stage: stage.into(),
            seed,
            epoch,
            step,
            lr: learning_rate(optim, step.saturating_sub(1), total),
            train: LossBreakdown::mean(&losses),
            dev,
        })?;
        if let Some(dir) = ctx.dir.clone() {
            let meta = StateMeta {
                stage: stage.into(),
                seed,
                epochs_done: epoch + 1,
                step,
                total_steps: total,
            };
            save_state(&dir, &meta, &model, &adam)?;
        }
    }
    ctx.metrics.emit(Record::Final { stage: stage.into(), seed, dev })?;
    Ok((model, dev))
}
