use kdqat_core::encoder::{forward, forward_on_tape};
use kdqat_core::gradcheck::gradcheck;
use kdqat_core::quant::{quantize_activation, QuantSpec};
use kdqat_core::{EncoderModel, Tape, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use kdqat_core::gradsuite::{
    all_op_names, composite_case, micro_config, op_case, COMPOSITE_FLOOR, COMPOSITE_LOSSES, COMPOSITE_STEP, OP_FLOOR, OP_STEP,
};

const SEEDS: u64 = 20;

#[test]
fn every_op_matches_f64_central_differences() {
    for name in all_op_names() {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let r = op_case(name, seed).check(OP_STEP, OP_FLOOR).unwrap();
            worst = worst.max(r.max_rel_error);
        }
        assert!(worst < 1e-3, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn composite_encoder_losses_match_reference() {
    for loss in COMPOSITE_LOSSES {
        let mut per_seed: Vec<f64> = (0..SEEDS)
            .map(|seed| composite_case(loss, seed).check(COMPOSITE_STEP, COMPOSITE_FLOOR).unwrap().max_rel_error)
            .collect();
        per_seed.sort_by(f64::total_cmp);
        let worst = per_seed[per_seed.len() - 1];
        let median = per_seed[per_seed.len() / 2];
        assert!(worst < 1e-2, "{loss}: max relative error {worst:e}");
        assert!(median < 1e-3, "{loss}: median relative error {median:e}");
    }
}

#[test]
fn spec_gradcheck_examples() {
    let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
    let err = gradcheck(
        |t, a| {
            let bv = t.constant(b.clone());
            let y = t.matmul(a, bv)?;
            Ok(t.sum(y))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let cfg = micro_config();
    let model = EncoderModel::init(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let teacher = EncoderModel::init(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let tokens = [0, 2, 5];
    let (_, trace) = forward(&teacher, &tokens, true, None).unwrap();
    let trace = trace.unwrap();
    let run = || {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true).unwrap();
        let s = forward_on_tape(&mut tape, &bound, &tokens, None).unwrap();
        let kd = kdqat_core::Preset::MapOutput.config();
        let (loss, _) = kdqat_core::kd::tape_loss::total(&mut tape, &kd, &trace, &s, None).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.visit_counts().iter().all(|&c| c <= 1));
        bound.grads(&tape)
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn ste_gradient_equals_graph_with_quantized_leaves() {
    let cfg = micro_config();
    let mut spec = QuantSpec::default();
    spec.activation_bits = None;
    for seed in 0..5u64 {
        let model = EncoderModel::init(cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let view = model.quantized_view(&spec).unwrap();
        let tokens = [0, 1, 4];
        let target = Tensor::new(vec![1, cfg.classes], vec![0.3, -0.2, 0.1]).unwrap();

        let mut t1 = Tape::new();
        let b1 = view.bind(&mut t1, true).unwrap();
        let out1 = view.forward_on_tape(&mut t1, &b1, &tokens).unwrap();
        let l1 = t1.mse(out1.logits, &target).unwrap();
        t1.backward(l1).unwrap();

        let swapped = view.effective_model();
        let mut t2 = Tape::new();
        let b2 = swapped.bind(&mut t2, true).unwrap();
        let out2 = forward_on_tape(&mut t2, &b2, &tokens, None).unwrap();
        let l2 = t2.mse(out2.logits, &target).unwrap();
        t2.backward(l2).unwrap();

        assert_eq!(t1.value(l1).data()[0].to_bits(), t2.value(l2).data()[0].to_bits());
        for (g1, g2) in b1.grads(&t1).iter().zip(&b2.grads(&t2)) {
            assert!(g1.iter().zip(g2).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn activation_ste_passes_gradient_unchanged() {
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.05, 2.0, 0.7, -0.4]).unwrap();
    let q = quantize_activation(&x, 8);
    let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();

    let mut t1 = Tape::new();
    let v1 = t1.param(x.clone());
    let s = kdqat_core::quant::fake_quant_activation(&mut t1, v1, 8).unwrap();
    assert_eq!(t1.value(s), &q);
    let sq = t1.mul(s, s).unwrap();
    let wv = t1.constant(w.clone());
    let y = t1.mul(sq, wv).unwrap();
    let l1 = t1.sum(y);
    t1.backward(l1).unwrap();

    // Same graph with the quantized values fed in as the leaf.
    let mut t2 = Tape::new();
    let v2 = t2.param(q);
    let sq = t2.mul(v2, v2).unwrap();
    let wv = t2.constant(w);
    let y = t2.mul(sq, wv).unwrap();
    let l2 = t2.sum(y);
    t2.backward(l2).unwrap();
    assert_eq!(t1.grad(v1).unwrap(), t2.grad(v2).unwrap());
}
