//! End-to-end acceptance run. Prints one line per criterion and exits
//! nonzero if any fails. The two training experiments dominate the runtime
//! (roughly an hour on one core).
//!
//! `ECC_ACCEPT_ITERS` shortens the main training run for local iteration;
//! the reported line always shows the count actually used.

use std::process::ExitCode;
use std::time::Instant;

use ecc_cli::selfcheck::{registry, run_checks};
use ecc_core::control::{alpha_beta_update, process_frame, AlphaBetaState, ControlConfig, EyeObservation, FaceSignals, OutputFilter};
use ecc_core::eccnet::*;
use ecc_core::metrics::{evaluate, mse, relative_error, tolerant_mse, EvalOptions};
use ecc_core::synthdata::*;
use ecc_core::tensor::{Graph, Tensor};
use ecc_core::training::{train_from, TrainConfig, TrainOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADIENT_BUDGET_SECS: f64 = 120.0;
const TRAIN_ITERS: usize = 20_000;
const TRAIN_SETS: usize = 200;
const HELD_OUT_SETS: usize = 50;
const GAZES: usize = 10;
const REL_ERROR_GATE: f64 = 0.6;
const COLLAPSE_ITERS: usize = 2_000;
const COLLAPSE_FLOW_GATE: f64 = 0.1;
const COLLAPSE_RATIO_GATE: f64 = 5.0;
const OFF_CENTER: f32 = 0.3;
const PEARSON_GATE: f64 = 0.7;
const RAMP_GATE: f32 = 1e-3;
const OUTLIER_FRAMES: usize = 10;
const OUTLIER_FRACTION: f32 = 0.05;
const SHIFT_GATE: f64 = 1e-12;
const FRAME_BUDGET_MS: f64 = 33.0;
const ADAM_EPS: f32 = 1e-4;
const WIDTHS: [usize; 3] = [8, 16, 32];

struct Line {
    name: &'static str,
    passed: bool,
}

fn report(lines: &mut Vec<Line>, name: &'static str, passed: bool, detail: String) {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { name, passed });
}

fn gradient_suite() -> (bool, String) {
    let t = Instant::now();
    let checks: Vec<_> = registry().into_iter().filter(|c| c.name.starts_with("gradient:")).collect();
    let r = run_checks(&checks);
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    (
        r.passed && secs < GRADIENT_BUDGET_SECS,
        format!("{} checks at rel tol 1e-3, failed {failed:?}, {secs:.1}s (budget {GRADIENT_BUDGET_SECS}s)", r.checks.len()),
    )
}

fn random_patch(seed: u64) -> EyePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EyePatch::new(Tensor::from_fn([3, PATCH_HEIGHT, PATCH_WIDTH], |_| rng.random::<f32>())).unwrap()
}

fn warp_suite(net: &EccNet, weights: &ModelWeights) -> (bool, String) {
    let p = random_patch(1);
    let mut g = Graph::<f32>::new();
    let img = p.pixels().clone().reshape([1, 3, PATCH_HEIGHT, PATCH_WIDTH]).unwrap();
    let x = g.constant(img.clone());
    let f = g.constant(Tensor::zeros([1, 2, PATCH_HEIGHT, PATCH_WIDTH]));
    let y = g.grid_warp(x, f).unwrap();
    let zero_flow = g.value(y) == &img && apply_correction(&p, &EccOutput::identity(0.0), 1.0) == p;

    let out = net.forward(weights, &p, GazeVector::new(0.4, -0.3), Mode::Infer).unwrap();
    let strength_zero = apply_correction(&p, &out, 0.0).pixels() == p.pixels();
    let involution = p.flipped().flipped() == p && out.mirrored().mirrored() == out;

    let target = GazeVector::new(0.5, 0.2);
    let left = net.forward_left_eye(weights, &p, target).unwrap();
    let flipped = net.forward(weights, &p.flipped(), target.mirrored(), Mode::Infer).unwrap();
    let (h, w) = (PATCH_HEIGHT, PATCH_WIDTH);
    let mut equivariant = true;
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (y * w + x, y * w + (w - 1 - x));
            equivariant &= left.flow.data()[a] == -flipped.flow.data()[b];
            equivariant &= left.flow.data()[h * w + a] == flipped.flow.data()[h * w + b];
            equivariant &= left.brightness.data()[a] == flipped.brightness.data()[b];
        }
    }
    (
        zero_flow && strength_zero && involution && equivariant,
        format!("exact: zero flow {zero_flow}, strength 0 {strength_zero}, flip involution {involution}, left/right equivariance {equivariant}"),
    )
}

/// Independent scalar alpha-beta filter in f64.
fn scalar_alpha_beta(zs: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let (mut x, mut v) = (zs[0], 0.0);
    let mut out = vec![x];
    for &z in &zs[1..] {
        let pred = x + v;
        let r = z - pred;
        x = pred + alpha * r;
        v += beta * r;
        out.push(x);
    }
    out
}

fn run_filter(zs: &[f32], alpha: f32, beta: f32) -> Vec<f32> {
    let mut s = AlphaBetaState::new();
    zs.iter()
        .map(|&z| alpha_beta_update(&mut s, &Tensor::full([1], z), alpha, beta).data()[0])
        .collect()
}

fn filter_suite() -> (bool, String) {
    let (alpha, beta) = (0.5, 0.1);
    let constant = run_filter(&[0.37; 40], alpha, beta).iter().all(|&x| x == 0.37);

    let ramp: Vec<f32> = (0..300).map(|t| 0.5 * t as f32).collect();
    let xs = run_filter(&ramp, alpha, beta);
    let ramp_err = (100..300).map(|t| (xs[t] - ramp[t]).abs()).fold(0.0, f32::max);

    let (base, spike, k) = (1.0f32, 4.0f32, 30);
    let mut zs = vec![base; 80];
    zs[k] = base + spike;
    let xs = run_filter(&zs, alpha, beta);
    let late = xs[k + OUTLIER_FRAMES..].iter().map(|x| (x - base).abs()).fold(0.0, f32::max);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy: Vec<f32> = (0..200).map(|t| (t as f32 * 0.1).sin() + rng.random_range(-0.2..0.2)).collect();
    let oracle = scalar_alpha_beta(&noisy.iter().map(|&z| z as f64).collect::<Vec<_>>(), alpha as f64, beta as f64);
    let ours = run_filter(&noisy, alpha, beta);
    let oracle_err = ours.iter().zip(&oracle).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);

    (
        constant && ramp_err < RAMP_GATE && late <= OUTLIER_FRACTION * spike && oracle_err < 1e-5,
        format!(
            "constant exact {constant}, ramp err {ramp_err:.1e} (< {RAMP_GATE:.0e}), outlier residue after {OUTLIER_FRAMES} frames {:.2}% (<= {}%), vs scalar oracle {oracle_err:.1e} (< 1e-5)",
            100.0 * late / spike,
            100.0 * OUTLIER_FRACTION
        ),
    )
}

fn random_image(rng: &mut impl Rng, shape: [usize; 3]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

fn metric_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut below, mut asym) = (true, 0.0f64);
    for _ in 0..1000 {
        let (a, b) = (random_image(&mut rng, [3, 8, 12]), random_image(&mut rng, [3, 8, 12]));
        let t = tolerant_mse(&a, &b).unwrap();
        below &= t <= mse(&a, &b).unwrap();
        asym = asym.max((t - tolerant_mse(&b, &a).unwrap()).abs());
    }
    let a = random_image(&mut rng, [3, 32, 64]);
    let shifted = Tensor::from_fn([3, 32, 64], |i| a.data()[i - i % 64 + (i % 64).saturating_sub(1)]);
    let shift = tolerant_mse(&a, &shifted).unwrap();
    let truth = random_image(&mut rng, [3, 32, 64]);
    let identity = relative_error(&a, &truth, &a).unwrap() == Some(1.0);
    (
        below && shift < SHIFT_GATE && asym <= 1e-12 && identity,
        format!("tolerant <= mse on 1000 pairs {below}, 1-px shift {shift:.1e} (< {SHIFT_GATE:.0e}), asymmetry {asym:.1e}, identity corrector 1.0 {identity}"),
    )
}

fn format_suite() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let net = EccNet::new(EccNetConfig::default()).unwrap();
    let mut w = net.init_weights(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (_, t) in w.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-1e-3..1e-3));
    }
    let path = dir.path().join("w.eccw");
    save_weights(&w, &path).unwrap();
    let back = load_weights(&path).unwrap();
    let weights_ok = back == w && std::fs::read(&path).unwrap() == w.to_bytes();

    let sets = generate_dataset(11, 3, 6).unwrap();
    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    write_dataset(&sets, &d1).unwrap();
    let read = read_dataset(&d1).unwrap();
    write_dataset(&read, &d2).unwrap();
    let mut same_bytes = true;
    let mut files = 0;
    for e in std::fs::read_dir(&d1).unwrap() {
        let p = e.unwrap().path();
        for f in walk(&p) {
            let rel = f.strip_prefix(&d1).unwrap();
            same_bytes &= std::fs::read(&f).unwrap() == std::fs::read(d2.join(rel)).unwrap();
            files += 1;
        }
    }
    let data_ok = read == sets && same_bytes;
    (
        weights_ok && data_ok,
        format!("ECCW bitwise {weights_ok} ({} tensors), dataset bitwise {data_ok} ({files} files)", w.len()),
    )
}

fn walk(p: &std::path::Path) -> Vec<std::path::PathBuf> {
    if p.is_file() {
        return vec![p.to_path_buf()];
    }
    std::fs::read_dir(p).unwrap().flat_map(|e| walk(&e.unwrap().path())).collect()
}

fn throughput() -> (bool, String) {
    let net = EccNet::new(EccNetConfig::default()).unwrap();
    let mut weights = net.init_weights(0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in weights.get_mut("head.weight").unwrap().data_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    let set = generate_set(6, 4).unwrap();
    let cfg = ControlConfig::default();
    let mut state = OutputFilter::new();
    let mut times = Vec::new();
    for i in 0..60 {
        let s = &set.samples[i % set.len()];
        let patch = EyePatch::new(s.image.clone()).unwrap();
        let obs = EyeObservation {
            face: FaceSignals::NOMINAL,
            landmarks: s.landmarks,
        };
        let t = Instant::now();
        let out = net.forward(&weights, &patch, GazeVector::CENTER, Mode::Infer).unwrap();
        let r = process_frame(&patch, &out, Some(&obs), &mut state, &cfg, GazeCalibration::default()).unwrap();
        std::hint::black_box(r);
        if i >= 10 {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let p90 = times[times.len() * 9 / 10];
    (
        median <= FRAME_BUDGET_MS,
        format!("median {median:.2} ms, p90 {p90:.2} ms per eye at widths {:?} (gate {FRAME_BUDGET_MS} ms)", EccNetConfig::default().encoder_channels),
    )
}

fn desk_net() -> EccNet {
    EccNet::new(EccNetConfig {
        encoder_channels: WIDTHS.to_vec(),
        ..EccNetConfig::default()
    })
    .unwrap()
}

fn train_config(iters: usize, wc: f32) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch_size: 16,
        loss_weight_correction: wc,
        loss_weight_reconstruction: 1.0 - wc,
        adam_eps: ADAM_EPS,
        rng_seed: 0,
        ..TrainConfig::default()
    }
}

/// Mean per-pixel flow magnitude toward the camera over held-out samples
/// whose gaze is at least `OFF_CENTER` from it.
fn off_center_flow(net: &EccNet, w: &ModelWeights, sets: &[SampleSet]) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for s in sets.iter().flat_map(|s| &s.samples) {
        if s.gaze.horizontal.hypot(s.gaze.vertical) < OFF_CENTER {
            continue;
        }
        let out = net.forward(w, &EyePatch::new(s.image.clone()).unwrap(), GazeVector::CENTER, Mode::Infer).unwrap();
        sum += out.flow_magnitudes().0 as f64;
        n += 1;
    }
    sum / n.max(1) as f64
}

fn mode_collapse(train: &[SampleSet], held: &[SampleSet]) -> (bool, String) {
    let net = desk_net();
    let t = Instant::now();
    let run = |wc: f32| {
        let (w, _) = train_from(&net, net.init_weights(0), train, &train_config(COLLAPSE_ITERS, wc), &TrainOutputs::default()).unwrap();
        off_center_flow(&net, &w, held)
    };
    let collapsed = run(0.0);
    let mixed = run(0.8);
    let ratio = mixed / collapsed.max(1e-12);
    (
        collapsed < COLLAPSE_FLOW_GATE && ratio >= COLLAPSE_RATIO_GATE,
        format!(
            "{COLLAPSE_ITERS} iters: weights (0, 1) mean |flow| {collapsed:.4} px (< {COLLAPSE_FLOW_GATE}), (0.8, 0.2) {mixed:.4} px, ratio {ratio:.1} (>= {COLLAPSE_RATIO_GATE}), {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    )
}

/// Scenes the control gates should refuse: gazes far outside the training
/// range, and nearly closed eyes.
fn out_of_range_sets(seed: u64, n: usize) -> Vec<SampleSet> {
    let extreme = [
        GazeVector::new(-1.6, 0.0),
        GazeVector::new(1.6, 0.0),
        GazeVector::new(0.0, 1.6),
        GazeVector::new(0.0, -1.6),
        GazeVector::new(1.6, 1.6),
        GazeVector::new(-1.6, -1.6),
    ];
    let mut sets = Vec::new();
    for i in 0..n {
        let s = set_seed(seed, i);
        let mut gazes = set_gazes(s, 4);
        gazes.extend(extreme);
        sets.push(build_set(scene_params(s), &gazes).unwrap());
        let mut closed = scene_params(s ^ 0xc105ed);
        closed.aperture = 0.2;
        sets.push(build_set(closed, &set_gazes(s ^ 0xc105ed, GAZES)).unwrap());
    }
    sets
}

fn main() -> ExitCode {
    ecc_cli::tune_allocator();
    let iters = std::env::var("ECC_ACCEPT_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(TRAIN_ITERS);
    let mut lines = Vec::new();

    let (ok, d) = gradient_suite();
    report(&mut lines, "gradient suite", ok, d);
    let probe = EccNet::new(EccNetConfig::default()).unwrap();
    let mut probe_w = probe.init_weights(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in probe_w.get_mut("head.weight").unwrap().data_mut() {
        *v = rng.random_range(-0.1..0.1);
    }
    let (ok, d) = warp_suite(&probe, &probe_w);
    report(&mut lines, "warp and identity suite", ok, d);
    let (ok, d) = filter_suite();
    report(&mut lines, "alpha-beta filter suite", ok, d);
    let (ok, d) = metric_suite();
    report(&mut lines, "metric suite", ok, d);
    let (ok, d) = format_suite();
    report(&mut lines, "format round trips", ok, d);
    let (ok, d) = throughput();
    report(&mut lines, "throughput", ok, d);

    let train = generate_dataset(1, TRAIN_SETS, GAZES).unwrap();
    let held = generate_dataset(2, HELD_OUT_SETS, GAZES).unwrap();
    let (ok, d) = mode_collapse(&train, &held);
    report(&mut lines, "mode collapse", ok, d);

    let net = desk_net();
    let t = Instant::now();
    let (w, log) = train_from(&net, net.init_weights(0), &train, &train_config(iters, 0.8), &TrainOutputs::default()).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let last = log.windows.last().unwrap();
    let r = evaluate(&net, &w, &held, &EvalOptions::default()).unwrap();
    report(
        &mut lines,
        "desk-scale training",
        r.relative_error < REL_ERROR_GATE,
        format!(
            "{iters} iters in {:.1} min, final L_c {:.5} L_r {:.5}, held-out relative error {:.4} over {} pairs (< {REL_ERROR_GATE})",
            train_secs / 60.0,
            last.l_c,
            last.l_r,
            r.relative_error,
            r.n_pairs
        ),
    );
    let g = r.gaze.unwrap();
    report(
        &mut lines,
        "implicit gaze prediction",
        g.pearson_horizontal > PEARSON_GATE && g.pearson_vertical > PEARSON_GATE,
        format!(
            "pearson h {:.3} v {:.3} (> {PEARSON_GATE}), k {:.3} {:.3}, {} samples",
            g.pearson_horizontal, g.pearson_vertical, g.k_horizontal, g.k_vertical, g.n_samples
        ),
    );

    let mut mixed = held.clone();
    mixed.extend(out_of_range_sets(3, 10));
    let off = evaluate(&net, &w, &mixed, &EvalOptions::default()).unwrap();
    let on = evaluate(
        &net,
        &w,
        &mixed,
        &EvalOptions {
            with_control: true,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    report(
        &mut lines,
        "control direction of effect",
        on.relative_error <= off.relative_error,
        format!(
            "with control {:.4} ({} pairs, {} gated out) <= without {:.4} ({} pairs)",
            on.relative_error, on.n_pairs, on.n_gated_out, off.relative_error, off.n_pairs
        ),
    );

    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name).collect();
    println!("{}/{} criteria passed", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
