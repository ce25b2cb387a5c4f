use kdqat_core::batch::{kd_batch, Example};
use kdqat_core::diagnostics::{
    cover_length_ratio, diagnose_pair, hessian_max_eig, hessian_spectrum, hessian_vector_product, random_unit_vector,
    ranking_loss_row, ranking_ratio, sa_distance, DiagnosticsConfig,
};
use kdqat_core::encoder::{forward, AttentionTrace, LayerTrace};
use kdqat_core::{EncoderConfig, EncoderModel, Exec, Preset, QuantSpec, Result, Target, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Descending order by exhaustive pairwise comparison.
fn rank_of(row: &[f32], i: usize) -> usize {
    (0..row.len()).filter(|&j| row[j] > row[i] || (row[j] == row[i] && j < i)).count()
}

fn brute_cover(t: &[f32], s: &[f32], k: usize) -> f64 {
    let n = t.len();
    let top: Vec<usize> = (0..n).filter(|&i| rank_of(t, i) < k).collect();
    for len in 1..=n {
        let prefix: Vec<usize> = (0..n).filter(|&i| rank_of(s, i) < len).collect();
        if top.iter().all(|i| prefix.contains(i)) {
            return len as f64 / n as f64;
        }
    }
    1.0
}

fn brute_ranking_loss(t: &[f32], s: &[f32]) -> f64 {
    let mut total = 0.0;
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            let sign = match t[i].partial_cmp(&t[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => -1.0,
                std::cmp::Ordering::Equal => 0.0,
            };
            let x = (s[i] as f64 - s[j] as f64) * sign;
            total += if x < 0.0 { -x } else { 0.0 };
        }
    }
    total
}

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    // Coarse values so ties occur regularly.
    let raw: Vec<f32> = (0..n).map(|_| rng.random_range(0..6) as f32).collect();
    let total: f32 = raw.iter().sum::<f32>().max(1.0);
    raw.iter().map(|v| v / total).collect()
}

#[test]
fn metrics_match_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for _ in 0..500 {
        let n = rng.random_range(1..=16usize);
        let (t, s) = (random_row(&mut rng, n), random_row(&mut rng, n));
        let k = rng.random_range(1..=n);
        assert_eq!(cover_length_ratio(&t, &s, k).unwrap(), brute_cover(&t, &s, k));
        assert_eq!(ranking_loss_row(&t, &s), brute_ranking_loss(&t, &s));
        let tok = rng.random_range(0..n);
        assert_eq!(ranking_ratio(&s, tok).unwrap(), (rank_of(&s, tok) + 1) as f64 / n as f64);
    }
}

proptest! {
    #[test]
    fn cover_ratio_bounds(t in prop::collection::vec(0.0f32..1.0, 1..16), seed in any::<u64>()) {
        let n = t.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let k = rng.random_range(1..=n);
        let r = cover_length_ratio(&t, &s, k).unwrap();
        prop_assert!(r >= k as f64 / n as f64 && r <= 1.0);
        prop_assert_eq!(cover_length_ratio(&t, &t, k).unwrap(), k as f64 / n as f64);
    }

    #[test]
    fn ranking_ratio_survives_monotone_transforms(row in prop::collection::vec(0.001f32..1.0, 1..16), t in 0usize..16) {
        let t = t % row.len();
        let r = ranking_ratio(&row, t).unwrap();
        prop_assert!(r > 0.0 && r <= 1.0);
        let moved: Vec<f32> = row.iter().map(|v| v.ln() * 3.0 + 1.0).collect();
        prop_assert_eq!(ranking_ratio(&moved, t).unwrap(), r);
    }

    #[test]
    fn ranking_loss_zero_iff_order_consistent(t in prop::collection::vec(0.0f32..1.0, 2..10)) {
        prop_assert_eq!(ranking_loss_row(&t, &t), 0.0);
        let reversed: Vec<f32> = t.iter().map(|v| 1.0 - v).collect();
        let strict = t.iter().enumerate().any(|(i, a)| t[i + 1..].iter().any(|b| b != a));
        prop_assert_eq!(ranking_loss_row(&t, &reversed) > 0.0, strict);
    }
}

fn tiny_trace(maps: Vec<Vec<f32>>, prop: Vec<f32>) -> AttentionTrace {
    let map = Tensor::new(vec![2, 2], maps.concat()).unwrap();
    let p = Tensor::new(vec![2, 2], prop).unwrap();
    let z = Tensor::zeros(&[2, 2]);
    AttentionTrace {
        embedding: z.clone(),
        layers: vec![LayerTrace {
            input: z.clone(),
            scores: vec![z.clone()],
            maps: vec![map],
            contexts: vec![z.clone()],
            mha: z.clone(),
            attn_out: z.clone(),
            output: z.clone(),
            prop: vec![p],
            out_bias: Tensor::zeros(&[2]),
        }],
        logits: Tensor::zeros(&[1, 2]),
        score_scale: 1.0,
    }
}

#[test]
fn sa_distance_hand_case() {
    let t = tiny_trace(vec![vec![0.5, 0.5], vec![1.0, 0.0]], vec![1.0, 0.0, 0.0, 1.0]);
    let s = tiny_trace(vec![vec![0.8, 0.2], vec![1.0, 0.0]], vec![1.0, 0.0, 3.0, 1.0]);
    let d0 = sa_distance(&t, &s, 0).unwrap()[0];
    // ‖(0.3, −0.3)‖/2 and ‖(0, 0)‖/2
    assert!((d0.gen_dist - (0.18f64).sqrt() / 2.0).abs() < 1e-7);
    assert_eq!(d0.prop_dist, 0.0);
    let d1 = sa_distance(&t, &s, 1).unwrap()[0];
    assert_eq!(d1.gen_dist, 0.0);
    assert!((d1.prop_dist - 1.5).abs() < 1e-7);
    assert!(sa_distance(&t, &s, 2).is_err());
}

#[test]
fn teacher_against_itself_is_clean() {
    let cfg = EncoderConfig::default();
    let model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let tokens: Vec<usize> = (0..10).collect();
    let (_, t) = forward(&model, &tokens, true, None).unwrap();
    let t = t.unwrap();
    let dc = DiagnosticsConfig::default();
    let r = diagnose_pair(&t, &t, &dc).unwrap();
    assert_eq!(r.heads.len(), cfg.layers * cfg.heads);
    for h in &r.heads {
        assert_eq!(h.ranking_loss, 0.0);
        assert!((h.cover_length_ratio - dc.top_k as f64 / tokens.len() as f64).abs() < 1e-12);
    }
    assert!(r.distances.iter().all(|d| d.gen_dist == 0.0 && d.prop_dist == 0.0));

    let (_, q) = forward(&model, &tokens, true, Some(&QuantSpec::default())).unwrap();
    let rq = diagnose_pair(&t, &q.unwrap(), &dc).unwrap();
    assert!(rq.heads.iter().any(|h| h.ranking_loss > 0.0));
    assert!(rq.ranges.iter().all(|r| r.student.0 <= r.student.1));
}

fn quadratic_grad(a: DMatrix<f64>) -> impl Fn(&[f64]) -> Result<Vec<f64>> + Sync {
    move |t: &[f64]| Ok((&a * nalgebra::DVector::from_column_slice(t)).as_slice().to_vec())
}

fn dominant(a: &DMatrix<f64>) -> f64 {
    let e = SymmetricEigen::new(a.clone()).eigenvalues;
    e.iter().copied().fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m })
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() / n as f64
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [2usize, 6, 12, 25, 50] {
        for trial in 0..4 {
            let a = if n == 6 && trial % 2 == 0 {
                let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
                (&m + m.transpose()) / 2.0
            } else {
                random_psd(&mut rng, n)
            };
            let want = dominant(&a);
            let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grad = quadratic_grad(a);
            let est = hessian_max_eig(&grad, &theta, &random_unit_vector(n, trial), 5000, 1e-12).unwrap();
            assert!(((est.eigenvalue - want) / want).abs() < 0.01, "n {n}: {} vs {want}", est.eigenvalue);
        }
    }
}

#[test]
fn quadratic_estimates_are_theta_independent_and_scale_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_psd(&mut rng, 10);
    let v0 = random_unit_vector(10, 1);
    let grad = quadratic_grad(a.clone());
    let base = hessian_max_eig(&grad, &[0.0; 10], &v0, 3000, 1e-12).unwrap().eigenvalue;
    for _ in 0..5 {
        let theta: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let e = hessian_max_eig(&grad, &theta, &v0, 3000, 1e-12).unwrap().eigenvalue;
        assert!(((e - base) / base).abs() < 0.01);
    }
    let scaled = quadratic_grad(a * 3.0);
    let e = hessian_max_eig(&scaled, &[0.0; 10], &v0, 3000, 1e-12).unwrap().eigenvalue;
    assert!(((e - 3.0 * base) / (3.0 * base)).abs() < 0.01);
}

#[test]
fn spectrum_is_identical_sequential_and_parallel() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grad = quadratic_grad(random_psd(&mut rng, 8));
    let theta = vec![0.1; 8];
    let seeds = [1, 2, 3, 4];
    let a = hessian_spectrum(&grad, &theta, &seeds, 200, 1e-10, Exec::Sequential).unwrap();
    let b = hessian_spectrum(&grad, &theta, &seeds, 200, 1e-10, Exec::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn micro_encoder_hessian_matches_dense_finite_difference_oracle() {
    let cfg = EncoderConfig {
        layers: 1,
        hidden: 4,
        heads: 2,
        ffn: 8,
        vocab: 4,
        max_len: 2,
        classes: 2,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher = EncoderModel::init(cfg, 0.5, &mut rng).unwrap();
    let student = EncoderModel::init(cfg, 0.5, &mut rng).unwrap();
    let batch = [Example { tokens: vec![0, 3], target: Target::Class(1) }];
    let kd = Preset::MapOutput.config();
    let grad = |t: &[f64]| -> Result<Vec<f64>> {
        let mut m = student.clone();
        m.load_flat(&t.iter().map(|&v| v as f32).collect::<Vec<_>>())?;
        let view = m.quantized_view(&QuantSpec::off())?;
        let (g, _) = kd_batch(&teacher, &view, &kd, &batch, Exec::Sequential)?;
        Ok(g.into_iter().flatten().map(|v| v as f64).collect())
    };
    let theta: Vec<f64> = student.flatten().iter().map(|&v| v as f64).collect();
    let n = theta.len();
    let mut cols = Vec::with_capacity(n * n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        cols.extend(hessian_vector_product(&grad, &theta, &e).unwrap());
    }
    let h = DMatrix::from_column_slice(n, n, &cols);
    let want = dominant(&((&h + h.transpose()) / 2.0));
    let est = hessian_max_eig(&grad, &theta, &random_unit_vector(n, 0), 3000, 1e-9).unwrap();
    assert!(((est.eigenvalue - want) / want).abs() < 0.01, "{} vs {want}", est.eigenvalue);
}
