//! Gradient-check cases: every differentiable tape op and the composite
//! encoder under every distillation loss, each paired with an f64 oracle.

use crate::encoder::{forward, forward_on_tape, BoundModel};
use crate::gradcheck::{gradcheck_oracle, Floor, GradcheckReport};
use crate::kd::{tape_loss, Target};
use crate::{EncoderConfig, EncoderModel, Exec, Result, Tape, Tensor, Var};
use serde::Serialize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reference::{self, RefLoss, RefParams};

type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type OracleFn = Box<dyn Fn(&[Vec<f64>]) -> f64>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub tape: TapeFn,
    pub oracle: OracleFn,
}

impl Case {
    pub fn check(&self, step: f64, floor: Floor) -> Result<GradcheckReport> {
        gradcheck_oracle(&self.tape, &self.oracle, &self.inputs, step, floor)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn weights(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(0.5f32..1.5)).collect()
}

/// `Σ w ⊙ y` on the tape.
fn wsum(tape: &mut Tape, y: Var, w: &[f32]) -> Result<Var> {
    let wt = Tensor::new(tape.value(y).shape().to_vec(), w.to_vec())?;
    let wv = tape.constant(wt);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn dot(w: &[f32], y: &[f64]) -> f64 {
    w.iter().zip(y).map(|(&a, b)| a as f64 * b).sum()
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            out[i * p + j] = (0..k).map(|t| a[i * k + t] * b[t * p + j]).sum();
        }
    }
    out
}

fn softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / scale));
    let e: Vec<f64> = row.iter().map(|v| (v / scale - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub const OP_NAMES: [&str; 17] = [
    "matmul",
    "matmul_bt",
    "add",
    "sub",
    "mul",
    "add_row_bias",
    "scale",
    "sum",
    "add_scalars",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "slice_cols",
    "concat_cols",
    "gather",
    "select_row",
    "mse",
];

pub const LOSS_OP_NAMES: [&str; 2] = ["kl_rows", "cross_entropy"];

pub fn all_op_names() -> Vec<&'static str> {
    OP_NAMES.iter().chain(&LOSS_OP_NAMES).copied().collect()
}

/// One randomized instance of op `name`.
pub fn op_case(name: &str, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "matmul" => {
            let (a, b) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2]));
            let w = weights(&mut rng, 6);
            let w2 = w.clone();
            Case {
                inputs: vec![a, b],
                tape: Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| dot(&w2, &mm(&p[0], &p[1], 3, 4, 2))),
            }
        }
        "matmul_bt" => {
            let (a, b) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[2, 4]));
            let w = weights(&mut rng, 6);
            let w2 = w.clone();
            Case {
                inputs: vec![a, b],
                tape: Box::new(move |t, v| {
                    let y = t.matmul_bt(v[0], v[1])?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = (0..3)
                        .flat_map(|i| (0..2).map(move |j| (i, j)))
                        .map(|(i, j)| (0..4).map(|k| p[0][i * 4 + k] * p[1][j * 4 + k]).sum())
                        .collect();
                    dot(&w2, &y)
                }),
            }
        }
        "add" | "sub" | "mul" => {
            let (a, b) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 4]));
            let w = weights(&mut rng, 12);
            let w2 = w.clone();
            let op = name.to_string();
            let op2 = op.clone();
            Case {
                inputs: vec![a, b],
                tape: Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = p[0]
                        .iter()
                        .zip(&p[1])
                        .map(|(a, b)| match op2.as_str() {
                            "add" => a + b,
                            "sub" => a - b,
                            _ => a * b,
                        })
                        .collect();
                    dot(&w2, &y)
                }),
            }
        }
        "add_row_bias" => {
            let (x, b) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[4]));
            let w = weights(&mut rng, 12);
            let w2 = w.clone();
            Case {
                inputs: vec![x, b],
                tape: Box::new(move |t, v| {
                    let y = t.add_row_bias(v[0], v[1])?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = p[0].iter().enumerate().map(|(i, x)| x + p[1][i % 4]).collect();
                    dot(&w2, &y)
                }),
            }
        }
        "scale" => {
            let x = randn(&mut rng, &[3, 4]);
            let w = weights(&mut rng, 12);
            let w2 = w.clone();
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| {
                    let y = t.scale(v[0], 0.7);
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = p[0].iter().map(|x| x * 0.7f32 as f64).collect();
                    dot(&w2, &y)
                }),
            }
        }
        "sum" => {
            let x = randn(&mut rng, &[3, 4]);
            Case {
                inputs: vec![x],
                tape: Box::new(|t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                }),
                oracle: Box::new(|p| p[0].iter().map(|x| x * x).sum()),
            }
        }
        "add_scalars" => {
            let (a, b) = (randn(&mut rng, &[4]), randn(&mut rng, &[2, 2]));
            Case {
                inputs: vec![a, b],
                tape: Box::new(|t, v| {
                    let sa = t.mul(v[0], v[0])?;
                    let sa = t.sum(sa);
                    let sb = t.sum(v[1]);
                    let sb = t.scale(sb, 3.0);
                    t.add_scalars(&[sa, sb])
                }),
                oracle: Box::new(|p| p[0].iter().map(|x| x * x).sum::<f64>() + 3.0 * p[1].iter().sum::<f64>()),
            }
        }
        "softmax_rows" => {
            let x = randn(&mut rng, &[3, 5]);
            let w = weights(&mut rng, 15);
            let w2 = w.clone();
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| {
                    let y = t.softmax_rows(v[0], 1.7)?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = p[0].chunks(5).flat_map(|r| softmax(r, 1.7f32 as f64)).collect();
                    dot(&w2, &y)
                }),
            }
        }
        "layer_norm" => {
            let x = randn(&mut rng, &[3, 6]);
            let g = Tensor::uniform(&[6], 0.5, 1.5, &mut rng);
            let b = randn(&mut rng, &[6]);
            let w = weights(&mut rng, 18);
            let w2 = w.clone();
            Case {
                inputs: vec![x, g, b],
                tape: Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = p[0]
                        .chunks(6)
                        .flat_map(|r| {
                            let mean = r.iter().sum::<f64>() / 6.0;
                            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
                            let inv = 1.0 / (var + 1e-12f32 as f64).sqrt();
                            r.iter()
                                .enumerate()
                                .map(|(i, x)| (x - mean) * inv * p[1][i] + p[2][i])
                                .collect::<Vec<_>>()
                        })
                        .collect();
                    dot(&w2, &y)
                }),
            }
        }
        "gelu" => {
            let x = randn(&mut rng, &[12]);
            let w = weights(&mut rng, 12);
            let w2 = w.clone();
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| {
                    let y = t.gelu(v[0]);
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = p[0]
                        .iter()
                        .map(|&x| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
                        .collect();
                    dot(&w2, &y)
                }),
            }
        }
        "slice_cols" => {
            let x = randn(&mut rng, &[3, 6]);
            let w = weights(&mut rng, 9);
            let w2 = w.clone();
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| {
                    let y = t.slice_cols(v[0], 1, 3)?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = p[0].chunks(6).flat_map(|r| r[1..4].to_vec()).collect();
                    dot(&w2, &y)
                }),
            }
        }
        "concat_cols" => {
            let (a, b) = (randn(&mut rng, &[3, 2]), randn(&mut rng, &[3, 3]));
            let w = weights(&mut rng, 15);
            let w2 = w.clone();
            Case {
                inputs: vec![a, b],
                tape: Box::new(move |t, v| {
                    let y = t.concat_cols(&[v[0], v[1]])?;
                    let sq = t.mul(y, y)?;
                    wsum(t, sq, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = (0..3)
                        .flat_map(|r| {
                            let mut row = p[0][r * 2..r * 2 + 2].to_vec();
                            row.extend_from_slice(&p[1][r * 3..r * 3 + 3]);
                            row
                        })
                        .map(|x| x * x)
                        .collect();
                    dot(&w2, &y)
                }),
            }
        }
        "gather" => {
            let table = randn(&mut rng, &[5, 3]);
            let w = weights(&mut rng, 9);
            let w2 = w.clone();
            let ids = [1usize, 3, 1];
            Case {
                inputs: vec![table],
                tape: Box::new(move |t, v| {
                    let y = t.gather(v[0], &ids)?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| {
                    let y: Vec<f64> = ids.iter().flat_map(|&i| p[0][i * 3..i * 3 + 3].to_vec()).collect();
                    dot(&w2, &y)
                }),
            }
        }
        "select_row" => {
            let x = randn(&mut rng, &[3, 4]);
            let w = weights(&mut rng, 4);
            let w2 = w.clone();
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| {
                    let y = t.select_row(v[0], 2)?;
                    wsum(t, y, &w)
                }),
                oracle: Box::new(move |p| dot(&w2, &p[0][8..12])),
            }
        }
        "mse" => {
            let x = randn(&mut rng, &[3, 4]);
            let target = randn(&mut rng, &[3, 4]);
            let tg: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| t.mse(v[0], &target)),
                oracle: Box::new(move |p| p[0].iter().zip(&tg).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0),
            }
        }
        "kl_rows" => {
            let x = randn(&mut rng, &[3, 4]);
            let target = crate::tensor::softmax_rows(&randn(&mut rng, &[3, 4]), 1.0).unwrap();
            let tg: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| t.kl_rows(v[0], &target, 1.3)),
                oracle: Box::new(move |p| {
                    p[0].chunks(4)
                        .zip(tg.chunks(4))
                        .map(|(r, pr)| {
                            let q = softmax(r, 1.3f32 as f64);
                            pr.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>()
                        })
                        .sum()
                }),
            }
        }
        "cross_entropy" => {
            let x = randn(&mut rng, &[1, 4]);
            let label = rng.random_range(0..4usize);
            Case {
                inputs: vec![x],
                tape: Box::new(move |t, v| t.cross_entropy(v[0], label)),
                oracle: Box::new(move |p| -softmax(&p[0], 1.0)[label].ln()),
            }
        }
        other => panic!("no gradient case for op {other}"),
    }
}

/// Two-layer micro encoder used for composite checks.
pub fn micro_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab: 6,
        max_len: 4,
        classes: 3,
        ..Default::default()
    }
}

pub const COMPOSITE_LOSSES: [&str; 11] = [
    "score",
    "map",
    "map-tau4",
    "output",
    "mha-only",
    "trm-output",
    "soft-label",
    "hard-label",
    "sm1",
    "sm2",
    "baseline",
];

/// Encoder forward plus distillation loss `loss` against a random teacher,
/// differentiated with respect to every student parameter.
pub fn composite_case(loss: &'static str, seed: u64) -> Case {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = EncoderModel::init(cfg, 0.5, &mut rng).unwrap();
    let teacher = EncoderModel::init(cfg, 0.5, &mut rng).unwrap();
    let tokens: Vec<usize> = vec![0, rng.random_range(1..cfg.vocab)];
    let label = rng.random_range(0..cfg.classes);
    let (_, trace) = forward(&teacher, &tokens, true, None).unwrap();
    let trace = trace.unwrap();
    let layers = vec![0usize, 1];
    let inputs: Vec<Tensor> = student.params().into_iter().cloned().collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();

    let (tt, tk, tl) = (trace.clone(), tokens.clone(), layers.clone());
    let tape_fn: TapeFn = Box::new(move |t, v| {
        let bound = BoundModel::from_leaves(cfg, v.to_vec())?;
        let s = forward_on_tape(t, &bound, &tk, None)?;
        match loss {
            "score" => tape_loss::score(t, &tt, &s, &tl),
            "map" => tape_loss::map(t, &tt, &s, &tl, 1.0),
            "map-tau4" => tape_loss::map(t, &tt, &s, &tl, 4.0),
            "output" => tape_loss::output(t, &tt, &s, &tl),
            "mha-only" => tape_loss::mha_only(t, &tt, &s, &tl),
            "trm-output" => tape_loss::trm_output(t, &tt, &s, &tl, true),
            "soft-label" => tape_loss::soft_label(t, &tt.logits, s.logits),
            "hard-label" => tape_loss::hard_label(t, s.logits, Target::Class(label)),
            "sm1" | "sm2" | "baseline" => {
                let mut kd = match loss {
                    "baseline" => crate::Preset::Baseline.config(),
                    _ => crate::KdConfig {
                        terms: vec![],
                        ..Default::default()
                    },
                };
                if loss != "baseline" {
                    kd.unified = if loss == "sm1" {
                        crate::kd::UnifiedMode::Sm1
                    } else {
                        crate::kd::UnifiedMode::Sm2
                    };
                    kd.gamma = 0.3;
                }
                tape_loss::total(t, &kd, &tt, &s, None).map(|(v, _)| v)
            }
            other => panic!("unknown loss {other}"),
        }
    });
    let oracle: OracleFn = Box::new(move |p| {
        let params = RefParams {
            blocks: shapes.iter().cloned().zip(p.iter().cloned()).collect(),
        };
        let s = reference::forward(&cfg, &params, &tokens);
        let l = |which| reference::loss(&cfg, &trace, &s, &layers, which);
        match loss {
            "score" => l(RefLoss::Score),
            "map" => l(RefLoss::Map(1.0)),
            "map-tau4" => l(RefLoss::Map(4.0)),
            "output" => l(RefLoss::Output),
            "mha-only" => l(RefLoss::MhaOnly),
            "trm-output" => l(RefLoss::TrmOutput {
                include_embedding: true,
            }),
            "soft-label" => l(RefLoss::SoftLabel),
            "hard-label" => l(RefLoss::HardLabel(label)),
            "sm1" => l(RefLoss::Sm1 { gamma: 0.3f32 as f64, tau: 1.0 }),
            "sm2" => l(RefLoss::Sm2 { gamma: 0.3f32 as f64, tau: 1.0 }),
            "baseline" => {
                l(RefLoss::SoftLabel)
                    + l(RefLoss::TrmOutput {
                        include_embedding: true,
                    })
                    + l(RefLoss::Score)
            }
            other => panic!("unknown loss {other}"),
        }
    });
    Case {
        inputs,
        tape: tape_fn,
        oracle,
    }
}

pub const OP_STEP: f64 = 1e-6;
pub const OP_FLOOR: Floor = Floor::Absolute(1e-8);
pub const COMPOSITE_STEP: f64 = 1e-5;
/// Coordinates below 1e-4 of the largest gradient are judged on absolute
/// error: the key bias, for one, has an exactly zero gradient under every
/// softmax-based loss and its f32 value is pure rounding residue.
pub const COMPOSITE_FLOOR: Floor = Floor::Scaled(1e-4);

/// Error summary of one case family over a range of seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRecord {
    pub kind: &'static str,
    pub name: &'static str,
    pub seeds: u64,
    pub floor: String,
    pub worst_rel: f64,
    pub median_rel: f64,
    pub worst_abs: f64,
}

/// Runs every op case and every composite case on seeds `0..seeds`.
/// `composite_floor` overrides the composite denominator floor.
pub fn run(seeds: u64, composite_floor: Option<Floor>, exec: Exec) -> Result<Vec<SuiteRecord>> {
    let mut jobs: Vec<(&'static str, &'static str)> = all_op_names().into_iter().map(|n| ("op", n)).collect();
    jobs.extend(COMPOSITE_LOSSES.iter().map(|&n| ("composite", n)));
    let cfloor = composite_floor.unwrap_or(COMPOSITE_FLOOR);
    exec.try_map(&jobs, |&(kind, name)| {
        let (step, floor) = if kind == "op" { (OP_STEP, OP_FLOOR) } else { (COMPOSITE_STEP, cfloor) };
        let mut rel = Vec::new();
        let mut worst_abs = 0.0f64;
        for seed in 0..seeds {
            let case = if kind == "op" { op_case(name, seed) } else { composite_case(name, seed) };
            let r = case.check(step, floor)?;
            rel.push(r.max_rel_error);
            worst_abs = worst_abs.max(r.max_abs_error);
        }
        rel.sort_by(f64::total_cmp);
        Ok(SuiteRecord {
            kind,
            name,
            seeds,
            floor: format!("{floor:?}"),
            worst_rel: rel.last().copied().unwrap_or(0.0),
            median_rel: rel.get(rel.len() / 2).copied().unwrap_or(0.0),
            worst_abs,
        })
    })
}
