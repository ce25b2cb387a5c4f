use kdqat_core::encoder::{AttentionTrace, LayerTrace};
use kdqat_core::kd;
use kdqat_core::quant::{quantize_activation, ternarize, Granularity};
use kdqat_core::tensor::softmax_rows;
use kdqat_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor_strategy(max_rows: usize, max_cols: usize, range: f32) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-range..range, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

/// Naive restatement of the ternary rule, one group at a time.
fn brute_ternary(group: &[f32], k: f32) -> (Vec<i8>, f32) {
    let mut total = 0.0f64;
    for v in group {
        total += (*v as f64).abs();
    }
    let delta = k as f64 * (total / group.len() as f64);
    let mut codes = Vec::new();
    let (mut kept, mut sum) = (0u32, 0.0f64);
    for &v in group {
        let m = (v as f64).abs();
        if m > delta {
            codes.push(if v < 0.0 { -1 } else { 1 });
            kept += 1;
            sum += m;
        } else {
            codes.push(0);
        }
    }
    let alpha = if kept == 0 { 0.0 } else { (sum / kept as f64) as f32 };
    (codes, alpha)
}

#[test]
fn ternarize_matches_brute_force_on_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let (r, c) = (rng.random_range(1..8usize), rng.random_range(1..12usize));
        let scale = rng.random_range(0.01f32..3.0);
        let data: Vec<f32> = if i == 0 {
            vec![0.0; r * c]
        } else {
            (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()
        };
        let w = Tensor::new(vec![r, c], data).unwrap();
        for (g, len) in [(Granularity::Tensor, r * c), (Granularity::Row, c)] {
            let got = ternarize(&w, g, 0.7).unwrap();
            let (mut codes, mut scales) = (Vec::new(), Vec::new());
            for chunk in w.data().chunks(len) {
                let (cd, a) = brute_ternary(chunk, 0.7);
                codes.extend(cd);
                scales.push(a);
            }
            assert_eq!(got.codes, codes);
            assert_eq!(got.scales, scales);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in tensor_strategy(5, 9, 30.0), scale in 0.1f32..10.0) {
        let p = softmax_rows(&x, scale).unwrap();
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ternary_scale_is_l2_optimal_for_its_codes(x in tensor_strategy(1, 12, 2.0)) {
        let t = ternarize(&x, Granularity::Tensor, 0.7).unwrap();
        let err = |a: f64| -> f64 {
            x.data().iter().zip(&t.codes).map(|(&w, &c)| (w as f64 - a * c as f64).powi(2)).sum()
        };
        let alpha = t.scales[0] as f64;
        let best = err(alpha);
        for k in -20..=20 {
            let a = alpha * (1.0 + k as f64 * 0.01);
            prop_assert!(err(a) >= best - 1e-9);
        }
    }

    #[test]
    fn ternary_values_dequantize_to_three_levels(x in tensor_strategy(4, 6, 2.0)) {
        for g in [Granularity::Tensor, Granularity::Row] {
            let t = ternarize(&x, g, 0.7).unwrap();
            prop_assert!(t.scales.iter().all(|&a| a >= 0.0));
            let d = t.dequantize();
            for (i, (&v, &c)) in d.data().iter().zip(&t.codes).enumerate() {
                prop_assert_eq!(v, t.scales[i / t.group_len] * c as f32);
            }
        }
    }

    #[test]
    fn activation_quantization_is_idempotent_and_bounded(x in tensor_strategy(4, 8, 50.0)) {
        let q = quantize_activation(&x, 8);
        let qq = quantize_activation(&q, 8);
        prop_assert!(q.data().iter().zip(qq.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let s = x.max_abs() as f64 / 127.0;
        for (a, b) in x.data().iter().zip(q.data()) {
            prop_assert!((*a as f64 - *b as f64).abs() <= s / 2.0 * (1.0 + 1e-6) + 1e-12);
        }
    }

    #[test]
    fn map_loss_ignores_row_shifts_but_score_loss_does_not(
        t in prop::collection::vec(-3.0f32..3.0, 16),
        s in prop::collection::vec(-3.0f32..3.0, 16),
        shifts in prop::collection::vec(-5.0f32..5.0, 4),
    ) {
        let mk = |v: &[f32]| Tensor::new(vec![4, 4], v.to_vec()).unwrap();
        let shift = |v: &[f32]| -> Vec<f32> { v.iter().enumerate().map(|(i, x)| x + shifts[i / 4]).collect() };
        let (tt, st) = (one_head(mk(&t)), one_head(mk(&s)));
        let (tt2, st2) = (one_head(mk(&shift(&t))), one_head(mk(&shift(&s))));
        let a = kd::map_loss(&tt, &st, &[0], 1.0).unwrap();
        let b = kd::map_loss(&tt2, &st2, &[0], 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-5 * a.max(1.0), "{} vs {}", a, b);
        // Shifting only the student moves the score loss but not the map loss.
        let moved = kd::score_loss(&tt, &st2, &[0]).unwrap();
        let map_moved = kd::map_loss(&tt, &st2, &[0], 1.0).unwrap();
        prop_assert!((map_moved - a).abs() < 1e-5 * a.max(1.0));
        if shifts.iter().any(|s| s.abs() > 0.1) {
            prop_assert!(moved != kd::score_loss(&tt, &st, &[0]).unwrap());
        }
    }
}

fn one_head(scores: Tensor) -> AttentionTrace {
    let n = scores.rows();
    let maps = softmax_rows(&scores, 1.0).unwrap();
    let z = Tensor::zeros(&[n, 2]);
    AttentionTrace {
        embedding: z.clone(),
        layers: vec![LayerTrace {
            input: z.clone(),
            scores: vec![scores],
            maps: vec![maps],
            contexts: vec![z.clone()],
            mha: z.clone(),
            attn_out: z.clone(),
            output: z.clone(),
            prop: vec![z.clone()],
            out_bias: Tensor::zeros(&[2]),
        }],
        logits: Tensor::zeros(&[1, 2]),
        score_scale: 1.0,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Gradient of the τ-softened map loss with respect to the student scores.
pub fn map_grad(t: &Tensor, s: &Tensor, tau: f32) -> Vec<f64> {
    let (tt, st) = (one_head(t.clone()), one_head(s.clone()));
    let mut tape = Tape::new();
    let vars = kd::trace_on_tape(&mut tape, &st, true);
    let loss = kd::tape_loss::map(&mut tape, &tt, &vars, &[0], tau).unwrap();
    tape.backward(loss).unwrap();
    tape.grad(vars.layers[0].scores[0]).unwrap().iter().map(|&v| v as f64).collect()
}

#[test]
fn high_temperature_map_gradient_aligns_with_centered_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 1.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..10usize);
        let t = Tensor::randn(&[n, n], 1.0, &mut rng);
        let s = Tensor::randn(&[n, n], 1.0, &mut rng);
        let g = map_grad(&t, &s, 1e3);
        let centered: Vec<f64> = (0..n)
            .flat_map(|r| {
                let d: Vec<f64> = s.row(r).iter().zip(t.row(r)).map(|(a, b)| (*a - *b) as f64).collect();
                let m = d.iter().sum::<f64>() / n as f64;
                d.into_iter().map(move |v| v - m)
            })
            .collect();
        worst = worst.min(cosine(&g, &centered));
    }
    assert!(worst > 0.98, "worst cosine {worst}");
}
