use std::collections::HashMap;

use ecc_core::eccnet::{first_layer_prefixes, is_running_stat, load_weights, EccNet, EccNetConfig, ModelWeights};
use ecc_core::synthdata::{generate_dataset, SampleSet};
use ecc_core::tensor::Tensor;
use ecc_core::training::*;
use ecc_core::EccError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net(widths: [usize; 3]) -> EccNet {
    EccNet::new(EccNetConfig {
        encoder_channels: widths.to_vec(),
        ..EccNetConfig::default()
    })
    .unwrap()
}

fn config(iters: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch_size: batch,
        ..TrainConfig::default()
    }
}

fn batch(sets: &[SampleSet], n: usize, seed: u64) -> PairBatch {
    PairBatch::sample(sets, n, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn bits(w: &ModelWeights) -> Vec<(String, Vec<u32>)> {
    w.iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Plain f64 Adam on one scalar.
fn reference_adam(grads: &[f64], p0: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}

fn scalar_weights(v: f32) -> ModelWeights {
    let mut w = ModelWeights::new();
    w.insert("p", Tensor::full([1], v)).unwrap();
    w
}

#[test]
fn adam_first_step_is_heavily_damped() {
    let cfg = TrainConfig::default();
    let mut w = scalar_weights(1.0);
    let mut s = AdamState::new();
    let g = HashMap::from([("p".to_string(), Tensor::full([1], 0.001f32))]);
    adam_update(&mut w, &g, &mut s, 0.01, &cfg).unwrap();
    let step = 1.0 - w.get("p").unwrap().data()[0] as f64;
    let hand = 0.01 * 0.001 / (0.001 + 0.1);
    assert!((step - hand).abs() < 1e-8, "step {step}, hand {hand}");
}

#[test]
fn adam_matches_scalar_reference_trace() {
    let cfg = TrainConfig::default();
    let grads = [0.3, -0.1, 0.05, 0.2, -0.4, 0.0, 0.01, 0.15, -0.05, 0.25];
    let want = reference_adam(&grads, 0.5, 0.006, 0.9, 0.999, 0.1);
    let mut w = scalar_weights(0.5);
    let mut s = AdamState::new();
    for (k, &g) in grads.iter().enumerate() {
        let gm = HashMap::from([("p".to_string(), Tensor::full([1], g as f32))]);
        adam_update(&mut w, &gm, &mut s, 0.006, &cfg).unwrap();
        let got = w.get("p").unwrap().data()[0] as f64;
        assert!((got - want[k]).abs() < 1e-6, "step {k}: {got} vs {}", want[k]);
    }
    assert_eq!(s.step, 10);
}

#[test]
fn lr_stays_in_bounds() {
    let cfg = TrainConfig {
        lr_cycle_len: 37,
        ..TrainConfig::default()
    };
    for it in 0..500 {
        let lr = cyclic_lr(it, &cfg);
        assert!((cfg.lr_min..=cfg.lr_max).contains(&lr), "{it}: {lr}");
    }
}

#[test]
fn degenerate_pair_costs_only_the_brightness_blend() {
    let net = small_net([4, 4, 8]);
    let mut w = net.init_weights(3);
    let sets = generate_dataset(7, 1, 2).unwrap();
    let img = sets[0].samples[0].image.clone();
    let b = PairBatch {
        input: Tensor::stack(std::slice::from_ref(&img)).unwrap(),
        target: Tensor::stack(std::slice::from_ref(&img)).unwrap(),
        input_gaze: vec![sets[0].samples[0].gaze],
        target_gaze: vec![sets[0].samples[0].gaze],
    };
    let cfg = TrainConfig::default();
    let report = bidirectional_step(&net, &mut w, &mut AdamState::new(), &b, &cfg, 0).unwrap();
    let m = 1.0 / (1.0 + 6.0f64.exp());
    let baseline = img
        .data()
        .iter()
        .map(|&x| (m * (1.0 - x as f64)).powi(2))
        .sum::<f64>()
        / img.len() as f64;
    assert!(
        (report.l_c as f64 - baseline).abs() <= 1e-6 * baseline.max(1e-9) + 1e-9,
        "L_c {} vs {baseline}",
        report.l_c
    );
}

#[test]
fn loss_weights_change_the_update() {
    let net = small_net([4, 4, 8]);
    let sets = generate_dataset(1, 2, 4).unwrap();
    let b = batch(&sets, 2, 0);
    let run = |wc: f32| {
        let mut w = net.init_weights(0);
        let cfg = TrainConfig {
            loss_weight_correction: wc,
            loss_weight_reconstruction: 1.0 - wc,
            ..TrainConfig::default()
        };
        let r = bidirectional_step(&net, &mut w, &mut AdamState::new(), &b, &cfg, 0).unwrap();
        (bits(&w), r)
    };
    let (a, ra) = run(1.0);
    let (b, rb) = run(0.8);
    assert_ne!(a, b);
    assert_eq!(ra.l_total, ra.l_c);
    assert!((rb.l_total - (0.8 * rb.l_c + 0.2 * rb.l_r)).abs() <= 1e-6);
}

#[test]
fn reconstruction_gradient_reaches_the_first_pass() {
    let net = small_net([4, 4, 8]);
    let sets = generate_dataset(2, 2, 4).unwrap();
    let b = batch(&sets, 2, 1);
    let cfg = TrainConfig {
        loss_weight_correction: 0.0,
        loss_weight_reconstruction: 1.0,
        ..TrainConfig::default()
    };
    let grads = |coupling| {
        let mut w = net.init_weights(4);
        bidirectional_gradients(&net, &mut w, &b, &cfg, coupling).unwrap().2
    };
    let unrolled = grads(PassCoupling::Unrolled);
    let detached = grads(PassCoupling::Detached);
    let diff: f32 = unrolled
        .iter()
        .map(|(n, g)| g.max_abs_diff(&detached[n]))
        .fold(0.0, f32::max);
    assert!(diff > 0.0);
    assert_eq!(unrolled.len(), detached.len());
}

#[test]
fn nan_input_aborts_with_diagnostics() {
    let net = small_net([4, 4, 8]);
    let sets = generate_dataset(3, 2, 3).unwrap();
    let mut b = batch(&sets, 1, 2);
    b.input.data_mut()[17] = f32::NAN;
    let mut w = net.init_weights(0);
    let err = bidirectional_step(&net, &mut w, &mut AdamState::new(), &b, &TrainConfig::default(), 42).unwrap_err();
    match err {
        EccError::Diverged { iteration, detail } => {
            assert_eq!(iteration, 42);
            assert!(detail.contains("L_c"), "{detail}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn too_few_sets_are_rejected() {
    let net = small_net([4, 4, 8]);
    let one = generate_dataset(1, 1, 3).unwrap();
    assert!(train(&net, &one, &config(1, 1), &TrainOutputs::default()).is_err());
    assert!(train(&net, &[], &config(1, 1), &TrainOutputs::default()).is_err());
}

#[test]
fn training_is_deterministic() {
    let net = small_net([4, 8, 8]);
    let sets = generate_dataset(5, 3, 4).unwrap();
    let cfg = config(15, 2);
    let (a, la) = train(&net, &sets, &cfg, &TrainOutputs::default()).unwrap();
    let (b, lb) = train(&net, &sets, &cfg, &TrainOutputs::default()).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(la.steps, lb.steps);
}

#[test]
fn finetuning_freezes_everything_after_the_first_block() {
    let net = small_net([4, 8, 8]);
    let sets = generate_dataset(6, 2, 4).unwrap();
    // a fresh head is all zeros and would block every upstream gradient
    let mut start = net.init_weights(9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in start.get_mut("head.weight").unwrap().data_mut() {
        *v = rng.random_range(-0.1..0.1);
    }
    let cfg = TrainConfig {
        finetune_first_layers_only: true,
        ..config(10, 2)
    };
    let (end, _) = train_from(&net, start.clone(), &sets, &cfg, &TrainOutputs::default()).unwrap();
    let prefixes = first_layer_prefixes();
    let mut changed = Vec::new();
    for ((name, a), (_, b)) in start.iter().zip(end.iter()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        let inside = prefixes.iter().any(|p| name.starts_with(p.as_str()));
        if !inside {
            assert!(same, "{name} changed");
        } else if !same {
            changed.push(name.to_string());
        }
    }
    let expected: Vec<String> = start
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .map(String::from)
        .collect();
    assert_eq!(changed, expected);
    assert!(changed.iter().any(|n| is_running_stat(n)));
}

#[test]
fn log_lines_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_net([2, 2, 4]);
    let sets = generate_dataset(8, 2, 3).unwrap();
    let cfg = TrainConfig {
        lr_cycle_len: 100,
        ..config(200, 1)
    };
    let outputs = TrainOutputs {
        log: Some(dir.path().join("log.jsonl")),
        checkpoint_dir: Some(dir.path().join("ckpt")),
    };
    let (w, log) = train(&net, &sets, &cfg, &outputs).unwrap();
    let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, window) in lines.iter().zip(&log.windows) {
        let r: LossReport = serde_json::from_str(line).unwrap();
        assert_eq!(&r, window);
        assert!((r.l_total - (0.8 * r.l_c + 0.2 * r.l_r)).abs() <= 1e-6);
    }
    assert_eq!(log.windows[1].iteration, 199);
    assert!(dir.path().join("ckpt/ckpt_100.eccw").is_file());
    let last = load_weights(dir.path().join("ckpt/ckpt_200.eccw")).unwrap();
    assert_eq!(bits(&last), bits(&w));
}

#[test]
fn smoke_training_reduces_the_loss() {
    let net = small_net([8, 16, 32]);
    let sets = generate_dataset(10, 2, 10).unwrap();
    let (_, log) = train(&net, &sets, &config(500, 16), &TrainOutputs::default()).unwrap();
    let mean = |s: &[LossReport]| s.iter().map(|r| r.l_total as f64).sum::<f64>() / s.len() as f64;
    let first = mean(&log.steps[..100]);
    let last = mean(&log.steps[400..]);
    assert!(last < first, "first-100 mean {first}, last-100 mean {last}");
}
