//! Straight-line f64 re-implementation of the encoder forward pass and the
//! distillation losses. Shares no code with the tape; used as the
//! finite-difference oracle for gradient checks and as a value cross-check.

use crate::{AttentionTrace, EncoderConfig, EncoderModel};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &crate::Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn vec1(t: &[f64]) -> Vec<f64> {
    t.to_vec()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let p = b[0].len();
    a.iter()
        .map(|row| (0..p).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / scale));
    let e: Vec<f64> = row.iter().map(|&v| (v / scale - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn layer_norm(a: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = if var + eps == 0.0 { 0.0 } else { 1.0 / (var + eps).sqrt() };
            r.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Parameters as f64 blocks in canonical order.
#[derive(Clone)]
pub struct RefParams {
    pub blocks: Vec<(Vec<usize>, Vec<f64>)>,
}

impl RefParams {
    pub fn from_model(m: &EncoderModel) -> Self {
        RefParams {
            blocks: m
                .params()
                .into_iter()
                .map(|t| (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()))
                .collect(),
        }
    }

    fn mat(&self, i: usize) -> Mat {
        let (shape, data) = &self.blocks[i];
        data.chunks(shape[1]).map(<[f64]>::to_vec).collect()
    }

    fn vec(&self, i: usize) -> Vec<f64> {
        vec1(&self.blocks[i].1)
    }
}

pub struct RefLayer {
    pub scores: Vec<Mat>,
    pub maps: Vec<Mat>,
    pub mha: Mat,
    pub attn_out: Mat,
    pub output: Mat,
}

pub struct RefTrace {
    pub embedding: Mat,
    pub layers: Vec<RefLayer>,
    pub logits: Vec<f64>,
}

pub fn forward(cfg: &EncoderConfig, p: &RefParams, tokens: &[usize]) -> RefTrace {
    let tok = p.mat(0);
    let pos = p.mat(1);
    let emb: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    let dh = cfg.hidden / cfg.heads;
    let scale = cfg.softmax_scale() as f64;
    let eps = cfg.ln_eps as f64;
    let mut x = emb.clone();
    let mut layers = Vec::new();
    for l in 0..cfg.layers {
        let b = 2 + 16 * l;
        let q = add_bias(&matmul(&x, &p.mat(b)), &p.vec(b + 1));
        let k = add_bias(&matmul(&x, &p.mat(b + 2)), &p.vec(b + 3));
        let v = add_bias(&matmul(&x, &p.mat(b + 4)), &p.vec(b + 5));
        let mut scores = Vec::new();
        let mut maps = Vec::new();
        let mut concat: Mat = vec![Vec::new(); x.len()];
        for h in 0..cfg.heads {
            let (qh, kh, vh) = (cols(&q, h * dh, dh), cols(&k, h * dh, dh), cols(&v, h * dh, dh));
            let s: Mat = qh
                .iter()
                .map(|qi| kh.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum()).collect())
                .collect();
            let m: Mat = s.iter().map(|r| softmax(r, scale)).collect();
            let c = matmul(&m, &vh);
            for (row, cr) in concat.iter_mut().zip(c) {
                row.extend(cr);
            }
            scores.push(s);
            maps.push(m);
        }
        let mha = add_bias(&matmul(&concat, &p.mat(b + 6)), &p.vec(b + 7));
        let y = layer_norm(&add(&x, &mha), &p.vec(b + 8), &p.vec(b + 9), eps);
        let hid: Mat = add_bias(&matmul(&y, &p.mat(b + 10)), &p.vec(b + 11))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let ffn = add_bias(&matmul(&hid, &p.mat(b + 12)), &p.vec(b + 13));
        let out = layer_norm(&add(&y, &ffn), &p.vec(b + 14), &p.vec(b + 15), eps);
        layers.push(RefLayer {
            scores,
            maps,
            mha,
            attn_out: y,
            output: out.clone(),
        });
        x = out;
    }
    let nb = p.blocks.len();
    let logits = add_bias(&matmul(&vec![x[0].clone()], &p.mat(nb - 2)), &p.vec(nb - 1)).remove(0);
    RefTrace {
        embedding: emb,
        layers,
        logits,
    }
}

fn mse(a: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (r, t) in a.iter().zip(b) {
        for (x, y) in r.iter().zip(t) {
            s += (x - y).powi(2);
            n += 1;
        }
    }
    s / n as f64
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(1e-12).ln()))
        .sum()
}

/// Which distillation objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefLoss {
    Score,
    Map(f64),
    Output,
    MhaOnly,
    TrmOutput { include_embedding: bool },
    SoftLabel,
    HardLabel(usize),
    Sm1 { gamma: f64, tau: f64 },
    Sm2 { gamma: f64, tau: f64 },
}

pub fn loss(cfg: &EncoderConfig, teacher: &AttentionTrace, s: &RefTrace, layers: &[usize], which: RefLoss) -> f64 {
    let scale = cfg.softmax_scale() as f64;
    let t_scale = teacher.score_scale as f64;
    let map = |tau: f64| -> f64 {
        layers
            .iter()
            .map(|&l| {
                let (tl, sl) = (&teacher.layers[l], &s.layers[l]);
                let heads = tl.scores.len();
                let rows = sl.scores[0].len();
                let mut total = 0.0;
                for (ts, ss) in tl.scores.iter().zip(&sl.scores) {
                    for (tr, sr) in to_mat(ts).iter().zip(ss) {
                        total += kl(&softmax(tr, t_scale * tau), &softmax(sr, scale * tau));
                    }
                }
                total * tau * tau / (heads * rows) as f64
            })
            .sum()
    };
    let output = || -> f64 {
        layers
            .iter()
            .map(|&l| mse(&to_mat(&teacher.layers[l].attn_out), &s.layers[l].attn_out))
            .sum()
    };
    match which {
        RefLoss::Score => layers
            .iter()
            .map(|&l| {
                let tl = &teacher.layers[l];
                let heads = tl.scores.len() as f64;
                tl.scores
                    .iter()
                    .zip(&s.layers[l].scores)
                    .map(|(ts, ss)| mse(&to_mat(ts), ss))
                    .sum::<f64>()
                    / heads
            })
            .sum(),
        RefLoss::Map(tau) => map(tau),
        RefLoss::Output => output(),
        RefLoss::MhaOnly => layers
            .iter()
            .map(|&l| mse(&to_mat(&teacher.layers[l].mha), &s.layers[l].mha))
            .sum(),
        RefLoss::TrmOutput { include_embedding } => {
            let body: f64 = layers
                .iter()
                .map(|&l| mse(&to_mat(&teacher.layers[l].output), &s.layers[l].output))
                .sum();
            if include_embedding {
                body + mse(&to_mat(&teacher.embedding), &s.embedding)
            } else {
                body
            }
        }
        RefLoss::SoftLabel => {
            let t: Vec<f64> = teacher.logits.data().iter().map(|&v| v as f64).collect();
            kl(&softmax(&t, 1.0), &softmax(&s.logits, 1.0))
        }
        RefLoss::HardLabel(c) => -softmax(&s.logits, 1.0)[c].ln(),
        RefLoss::Sm1 { gamma, tau } => map(tau) + gamma * output(),
        RefLoss::Sm2 { gamma, tau } => output() + gamma * map(tau),
    }
}

/// Central differences of the f64 reference loss with respect to every
/// parameter coordinate.
pub fn numeric_grad(
    cfg: &EncoderConfig,
    params: &RefParams,
    tokens: &[usize],
    f: impl Fn(&RefTrace) -> f64,
    step: f64,
) -> Vec<Vec<f64>> {
    let mut probe = params.clone();
    params
        .blocks
        .iter()
        .enumerate()
        .map(|(bi, (_, data))| {
            (0..data.len())
                .map(|i| {
                    let orig = data[i];
                    probe.blocks[bi].1[i] = orig + step;
                    let plus = f(&forward(cfg, &probe, tokens));
                    probe.blocks[bi].1[i] = orig - step;
                    let minus = f(&forward(cfg, &probe, tokens));
                    probe.blocks[bi].1[i] = orig;
                    (plus - minus) / (2.0 * step)
                })
                .collect()
        })
        .collect()
}
