//! Adam with bias correction, decoupled weight decay, global-norm clipping
//! and a warmup-then-linear-decay learning rate.

use kdqat_core::Tensor;

use crate::config::OptimConfig;

/// Linear warmup to `peak` over the first `warmup` fraction of `total`
/// steps, then linear decay to 0 at `total`.
pub fn learning_rate(cfg: &OptimConfig, step: u64, total: u64) -> f32 {
    if total == 0 {
        return 0.0;
    }
    // f32 fractions such as 0.1 sit just above the decimal value
    let warm = ((cfg.warmup as f64) * total as f64 - 1e-6).ceil().max(0.0) as u64;
    let s = step as f64 + 1.0;
    let f = if step < warm {
        s / warm as f64
    } else {
        ((total - step) as f64 / (total - warm).max(1) as f64).max(0.0)
    };
    (cfg.lr as f64 * f) as f32
}

/// Scales `grads` in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max: f32) -> f64 {
    let norm = grads.iter().flatten().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
    if max > 0.0 && norm > max as f64 {
        let s = (max as f64 / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Adam {
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, cfg: &OptimConfig, params: Vec<&mut Tensor>, grads: &[Vec<f32>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(self.t as i32);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m as f64 / bc1;
                let vh = *v as f64 / bc2;
                let update = mh / (vh.sqrt() + cfg.eps as f64) + cfg.weight_decay as f64 * *w as f64;
                *w = (*w as f64 - lr as f64 * update) as f32;
            }
        }
    }
}
