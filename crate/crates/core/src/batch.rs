//! Per-example gradients and their ordered merge into batch gradients.
//!
//! Every example gets its own tape. The per-example gradients are summed in
//! example order with f64 accumulators, so a batch gradient does not depend
//! on which [`Exec`] mode produced the pieces.

use serde::{Deserialize, Serialize};

use crate::encoder::{forward, forward_on_tape, EncoderModel, QuantizedView};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kd::{self, KdConfig, LossBreakdown, Target};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

/// Gradient of the supervised loss (cross-entropy for classes, squared error
/// for values) of a full-precision model on one example.
pub fn supervised_grad(model: &EncoderModel, ex: &Example) -> Result<(Vec<Vec<f32>>, f64)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let vars = forward_on_tape(&mut tape, &bound, &ex.tokens, None)?;
    let loss = kd::tape_loss::hard_label(&mut tape, vars.logits, ex.target)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("supervised loss is not finite".into()));
    }
    tape.backward(loss)?;
    Ok((bound.grads(&tape), value))
}

/// Gradient of the distillation objective for the latent weights behind
/// `student` on one example. The teacher runs at full precision.
pub fn kd_grad(
    teacher: &EncoderModel,
    student: &QuantizedView<'_>,
    cfg: &KdConfig,
    ex: &Example,
) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
    let (_, trace) = forward(teacher, &ex.tokens, true, None)?;
    let trace = trace.expect("capture requested");
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, true)?;
    let vars = student.forward_on_tape(&mut tape, &bound, &ex.tokens)?;
    let (loss, breakdown) = kd::tape_loss::total(&mut tape, cfg, &trace, &vars, Some(ex.target))?;
    tape.backward(loss)?;
    Ok((bound.grads(&tape), breakdown))
}

/// Mean of per-example gradients, accumulated in input order.
pub fn mean_grads(parts: &[Vec<Vec<f32>>]) -> Vec<Vec<f32>> {
    let Some(first) = parts.first() else {
        return Vec::new();
    };
    let mut acc: Vec<Vec<f64>> = first.iter().map(|g| vec![0.0; g.len()]).collect();
    for p in parts {
        for (a, g) in acc.iter_mut().zip(p) {
            for (x, &v) in a.iter_mut().zip(g) {
                *x += v as f64;
            }
        }
    }
    let n = parts.len() as f64;
    acc.into_iter()
        .map(|a| a.into_iter().map(|v| (v / n) as f32).collect())
        .collect()
}

pub fn supervised_batch(model: &EncoderModel, batch: &[Example], exec: Exec) -> Result<(Vec<Vec<f32>>, f64)> {
    let parts = exec.try_map(batch, |ex| supervised_grad(model, ex))?;
    let loss = parts.iter().map(|p| p.1).sum::<f64>() / parts.len().max(1) as f64;
    let grads: Vec<_> = parts.into_iter().map(|p| p.0).collect();
    Ok((mean_grads(&grads), loss))
}

pub fn kd_batch(
    teacher: &EncoderModel,
    student: &QuantizedView<'_>,
    cfg: &KdConfig,
    batch: &[Example],
    exec: Exec,
) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
    let parts = exec.try_map(batch, |ex| kd_grad(teacher, student, cfg, ex))?;
    let breakdowns: Vec<_> = parts.iter().map(|p| p.1.clone()).collect();
    let grads: Vec<_> = parts.into_iter().map(|p| p.0).collect();
    Ok((mean_grads(&grads), LossBreakdown::mean(&breakdowns)))
}

/// Logit rows for every example; `quant` selects the quantized forward.
pub fn predict(model: &EncoderModel, quant: Option<&QuantizedView<'_>>, batch: &[Example], exec: Exec) -> Result<Vec<Tensor>> {
    exec.try_map(batch, |ex| {
        let (logits, _) = match quant {
            Some(v) => v.forward(&ex.tokens, false)?,
            None => forward(model, &ex.tokens, false, None)?,
        };
        Ok(logits)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kd::Preset;
    use crate::quant::QuantSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (EncoderModel, Vec<Example>) {
        let cfg = EncoderConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            vocab: 10,
            max_len: 6,
            classes: 3,
            ..EncoderConfig::default()
        };
        let model = EncoderModel::init(cfg, 0.2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let batch = (0..9)
            .map(|i| Example {
                tokens: (0..1 + i % 6).map(|j| (i + j) % 10).collect(),
                target: Target::Class(i % 3),
            })
            .collect();
        (model, batch)
    }

    #[test]
    fn batch_gradients_are_mode_independent() {
        let (model, batch) = setup();
        let a = supervised_batch(&model, &batch, Exec::Sequential).unwrap();
        let b = supervised_batch(&model, &batch, Exec::default()).unwrap();
        assert_eq!(a, b);
        let view = model.quantized_view(&QuantSpec::default()).unwrap();
        let cfg = Preset::MapOutput.config();
        let a = kd_batch(&model, &view, &cfg, &batch, Exec::Sequential).unwrap();
        let b = kd_batch(&model, &view, &cfg, &batch, Exec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_of_single_example_is_that_example() {
        let (model, batch) = setup();
        let (g, loss) = supervised_grad(&model, &batch[4]).unwrap();
        let (m, l) = supervised_batch(&model, &batch[4..5], Exec::Sequential).unwrap();
        assert_eq!(g, m);
        assert_eq!(loss, l);
    }

    #[test]
    fn self_distillation_has_zero_gradient() {
        let (model, batch) = setup();
        let view = model.quantized_view(&QuantSpec::off()).unwrap();
        let (g, br) = kd_batch(&model, &view, &Preset::Map.config(), &batch, Exec::Sequential).unwrap();
        assert!(br.total.abs() < 1e-6);
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-5));
    }
}
