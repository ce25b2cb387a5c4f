use kdqat_core::encoder::forward;
use kdqat_core::kd::{self, Target};
use kdqat_core::{EncoderConfig, EncoderModel, Preset, QuantSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use kdqat_core::gradsuite::micro_config;
use kdqat_core::reference;

fn random_tokens(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Vec<usize> {
    let n = rng.random_range(1..=cfg.max_len);
    (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect()
}

#[test]
fn mha_recomposes_from_alpha_and_value_path() {
    let cfg = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10u64 {
        let model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tokens = random_tokens(&mut rng, &cfg);
        for quant in [None, Some(QuantSpec::default())] {
            let (_, trace) = forward(&model, &tokens, true, quant.as_ref()).unwrap();
            for layer in &trace.unwrap().layers {
                let err = layer.recompose_mha().unwrap().max_abs_diff(&layer.mha);
                assert!(err < 1e-4, "seed {seed} quant {}: {err}", quant.is_some());
                for map in &layer.maps {
                    for r in 0..map.rows() {
                        let s: f64 = map.row(r).iter().map(|&v| v as f64).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                        assert!(map.row(r).iter().all(|&v| v >= 0.0));
                    }
                }
            }
        }
    }
}

#[test]
fn sa_prop_values_match_trace_value_path() {
    let cfg = EncoderConfig::default();
    let model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let tokens = [0, 7, 9, 3, 1];
    let (_, trace) = forward(&model, &tokens, true, None).unwrap();
    for (l, layer) in trace.unwrap().layers.iter().enumerate() {
        let f = model.sa_prop_values(&layer.input, l).unwrap();
        assert!(f.max_abs_diff(&layer.prop_total()) < 1e-5);
    }
}

#[test]
fn forward_matches_f64_reference() {
    let cfg = micro_config();
    for seed in 0..5u64 {
        let model = EncoderModel::init(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tokens = [0, 3, 5, 1];
        let (logits, trace) = forward(&model, &tokens, true, None).unwrap();
        let r = reference::forward(&cfg, &reference::RefParams::from_model(&model), &tokens);
        for (a, b) in logits.data().iter().zip(&r.logits) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
        let trace = trace.unwrap();
        for (l, rl) in trace.layers.iter().zip(&r.layers) {
            for (x, y) in l.output.data().iter().zip(rl.output.iter().flatten()) {
                assert!((*x as f64 - y).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn forward_is_deterministic_and_capture_free() {
    let cfg = EncoderConfig::default();
    let model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let tokens = [0, 1, 2, 3, 4, 5];
    for quant in [None, Some(QuantSpec::default())] {
        let (a, _) = forward(&model, &tokens, false, quant.as_ref()).unwrap();
        let (b, _) = forward(&model, &tokens, true, quant.as_ref()).unwrap();
        let (c, _) = forward(&model, &tokens, false, quant.as_ref()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn self_distillation_is_zero_for_every_term() {
    let cfg = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..5u64 {
        let model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tokens = random_tokens(&mut rng, &cfg);
        let (_, t) = forward(&model, &tokens, true, None).unwrap();
        let (_, s) = forward(&model, &tokens, true, Some(&QuantSpec::off())).unwrap();
        let (t, s) = (t.unwrap(), s.unwrap());
        let all: Vec<usize> = (0..cfg.layers).collect();
        let values = [
            kd::score_loss(&t, &s, &all).unwrap(),
            kd::map_loss(&t, &s, &all, 1.0).unwrap(),
            kd::map_loss(&t, &s, &all, 10.0).unwrap(),
            kd::output_loss(&t, &s, &all).unwrap(),
            kd::mha_only_loss(&t, &s, &all).unwrap(),
            kd::trm_output_loss(&t, &s, &all, true).unwrap(),
            kd::soft_label_loss(&t.logits, &s.logits).unwrap(),
            kd::unified_loss(&t, &s, &all, kd::UnifiedMode::Sm1, 0.5, 1.0).unwrap(),
            kd::unified_loss(&t, &s, &all, kd::UnifiedMode::Sm2, 0.5, 1.0).unwrap(),
        ];
        for v in values {
            assert!(v.abs() < 1e-6, "{v}");
        }
        for p in Preset::ALL {
            assert!(kd::total_loss(&p.config(), &t, &s, None).unwrap().total.abs() < 1e-6);
        }
    }
}

#[test]
fn baseline_total_is_sum_of_its_terms() {
    let cfg = EncoderConfig::default();
    let t_model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let s_model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let tokens = [0, 4, 8, 15, 16, 23, 42];
    let (_, t) = forward(&t_model, &tokens, true, None).unwrap();
    let (_, s) = forward(&s_model, &tokens, true, Some(&QuantSpec::default())).unwrap();
    let (t, s) = (t.unwrap(), s.unwrap());
    let all: Vec<usize> = (0..cfg.layers).collect();
    let br = kd::total_loss(&Preset::Baseline.config(), &t, &s, None).unwrap();
    let manual = kd::soft_label_loss(&t.logits, &s.logits).unwrap()
        + kd::trm_output_loss(&t, &s, &all, true).unwrap()
        + kd::score_loss(&t, &s, &all).unwrap();
    assert!((br.total - manual).abs() <= 1e-6 * manual.max(1.0), "{} vs {manual}", br.total);
    let sum: f64 = br.terms().iter().map(|(_, v)| v).sum();
    assert!((br.total - sum).abs() <= 1e-6 * sum.max(1.0));

    let sm1 = kd::unified_loss(&t, &s, &all, kd::UnifiedMode::Sm1, 0.4, 1.0).unwrap();
    let map = kd::map_loss(&t, &s, &all, 1.0).unwrap();
    let out = kd::output_loss(&t, &s, &all).unwrap();
    assert!((sm1 - map - 0.4f32 as f64 * out).abs() < 1e-9);

    let mut hard = Preset::Baseline.config();
    hard.terms.push(kd::Term::HardLabel);
    assert!(kd::total_loss(&hard, &t, &s, None).is_err());
    assert!(kd::total_loss(&hard, &t, &s, Some(Target::Class(1))).is_ok());
}

#[test]
fn mha_only_differs_from_output_loss_on_residual_mismatch() {
    // Equal MHA outputs but different residual inputs: only the output loss
    // sees the difference.
    let cfg = EncoderConfig::default();
    let model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (_, t) = forward(&model, &[0, 1, 2], true, None).unwrap();
    let t = t.unwrap();
    let mut s = t.clone();
    let l = &mut s.layers[0];
    l.input = l.input.map(|v| v + 1.0);
    let shifted = Tensor::new(l.attn_out.shape().to_vec(), l.attn_out.data().iter().map(|v| v + 0.5).collect()).unwrap();
    l.attn_out = shifted;
    assert_eq!(kd::mha_only_loss(&t, &s, &[0]).unwrap(), 0.0);
    assert!(kd::output_loss(&t, &s, &[0]).unwrap() > 0.0);
}

#[test]
fn restricting_layers_never_increases_losses() {
    let cfg = EncoderConfig::default();
    let t_model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let s_model = EncoderModel::init(cfg, 0.1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let tokens = [0, 3, 6, 9];
    let (_, t) = forward(&t_model, &tokens, true, None).unwrap();
    let (_, s) = forward(&s_model, &tokens, true, None).unwrap();
    let (t, s) = (t.unwrap(), s.unwrap());
    let all: Vec<usize> = (0..cfg.layers).collect();
    let sub = kd::select_layers(cfg.layers, 2, kd::LayerStrategy::Uniform).unwrap();
    type LossFn = fn(&kdqat_core::AttentionTrace, &kdqat_core::AttentionTrace, &[usize]) -> kdqat_core::Result<f64>;
    let fns: [LossFn; 3] = [kd::score_loss, kd::output_loss, kd::mha_only_loss];
    for f in fns {
        assert!(f(&t, &s, &sub).unwrap() <= f(&t, &s, &all).unwrap());
    }
    assert!(kd::map_loss(&t, &s, &sub, 1.0).unwrap() <= kd::map_loss(&t, &s, &all, 1.0).unwrap());
    assert!(kd::trm_output_loss(&t, &s, &sub, false).unwrap() <= kd::trm_output_loss(&t, &s, &all, false).unwrap());
}
