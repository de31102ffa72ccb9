use ecc_core::control::*;
use ecc_core::eccnet::{apply_correction, EccOutput, EyePatch, GazeCalibration};
use ecc_core::synthdata::generate_set;
use ecc_core::tensor::Tensor;
use proptest::prelude::*;

fn scalar_filter(zs: &[f32], alpha: f32, beta: f32) -> Vec<f32> {
    let mut s = AlphaBetaState::new();
    zs.iter()
        .map(|&z| alpha_beta_update(&mut s, &Tensor::full([1], z), alpha, beta).data()[0])
        .collect()
}

#[test]
fn ramp_is_tracked_without_lag() {
    let zs: Vec<f32> = (0..300).map(|t| t as f32).collect();
    let xs = scalar_filter(&zs, 0.5, 0.1);
    for t in 101..300 {
        assert!((xs[t] - t as f32).abs() < 1e-3, "t {t}: {}", xs[t]);
    }
}

#[test]
fn single_outlier_is_damped_and_forgotten() {
    let (base, s, k) = (2.0f32, 10.0f32, 20);
    let mut zs = vec![base; 60];
    zs[k] = base + s;
    let xs = scalar_filter(&zs, 0.5, 0.1);
    let dev: Vec<f32> = xs.iter().map(|x| (x - base).abs()).collect();
    assert!(dev.iter().all(|&d| d <= 0.5 * s + 1e-5));
    for (t, d) in dev.iter().enumerate().skip(k + 10) {
        assert!(*d <= 0.05 * s, "frame {t}: deviation {d}");
    }
}

#[test]
fn steady_state_is_idempotent() {
    let xs = scalar_filter(&[0.3; 50], 0.7, 0.4);
    assert!(xs.iter().all(|&x| x == 0.3));
}

#[test]
fn gates_are_monotone_over_their_bands() {
    let sweep = |spec: GateSpec, lo: f32, hi: f32| -> Vec<f32> {
        (0..100).map(|i| gate(lo + (hi - lo) * i as f32 / 99.0, &spec)).collect()
    };
    let up = sweep(GateSpec::lower(0.15, 0.25), 0.1, 0.3);
    assert!(up.windows(2).all(|w| w[0] <= w[1]));
    let down = sweep(GateSpec::upper(4.0, 6.0), 3.0, 7.0);
    assert!(down.windows(2).all(|w| w[0] >= w[1]));
    let band = GateSpec::band(0.08, 0.12, 0.45, 0.6);
    let rising = sweep(band, 0.0, 0.12);
    let falling = sweep(band, 0.45, 0.7);
    assert!(rising.windows(2).all(|w| w[0] <= w[1]));
    assert!(falling.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(gate(0.3, &band), 1.0);
}

fn signals_strategy() -> impl Strategy<Value = ControlSignals> {
    (
        0.0f32..0.8,
        0.0f32..0.6,
        -40.0f32..40.0,
        -40.0f32..40.0,
        -40.0f32..40.0,
        0.0f32..0.6,
        0.0f32..10.0,
        0.0f32..16.0,
    )
        .prop_map(|(f, c, p, r, y, e, m, x)| ControlSignals {
            face_size: f,
            center_offset: c,
            pitch: p,
            roll: r,
            yaw: y,
            eye_open_ratio: e,
            mean_flow_mag: m,
            max_flow_mag: x,
        })
}

proptest! {
    #[test]
    fn strength_is_the_order_free_product_of_gates(s in signals_strategy(), rot in 0usize..8) {
        let c = GateConfig::default();
        let st = strength(&s, &c);
        prop_assert!((0.0..=1.0).contains(&st));
        let f = c.factors(&s);
        let mut reordered: Vec<f32> = f.iter().map(|(_, v)| *v).collect();
        reordered.rotate_left(rot);
        reordered.reverse();
        let p: f32 = reordered.iter().product();
        prop_assert!((p - st).abs() <= 1e-6);
        prop_assert!(f.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gate_output_is_bounded(v in -100.0f32..100.0, a in -10.0f32..10.0, w in 0.01f32..5.0) {
        for spec in [GateSpec::lower(a, a + w), GateSpec::upper(a, a + w), GateSpec::symmetric(w, w + 1.0)] {
            let g = gate(v, &spec);
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }
}

fn stream() -> (EyePatch, EyeObservation) {
    let set = generate_set(31, 2).unwrap();
    let s = &set.samples[0];
    (
        EyePatch::new(s.image.clone()).unwrap(),
        EyeObservation {
            face: FaceSignals::NOMINAL,
            landmarks: s.landmarks,
        },
    )
}

#[test]
fn static_in_range_video_runs_at_full_strength() {
    let (patch, obs) = stream();
    let cfg = ControlConfig::default();
    let mut state = OutputFilter::new();
    let out = EccOutput::constant_flow(0.8, -0.4, 0.05);
    for _ in 0..10 {
        let r = process_frame(&patch, &out, Some(&obs), &mut state, &cfg, GazeCalibration::default()).unwrap();
        assert_eq!(r.strength, 1.0);
        assert_eq!(r.patch, apply_correction(&patch, &out, 1.0));
    }
}

#[test]
fn leaving_the_center_fades_to_pass_through() {
    let (patch, mut obs) = stream();
    let cfg = ControlConfig::default();
    let mut state = OutputFilter::new();
    let out = EccOutput::constant_flow(1.0, 0.0, 0.1);
    let mut strengths = Vec::new();
    let mut last = None;
    for t in 0..10 {
        obs.face.center_offset = 0.45 * t as f32 / 9.0;
        let r = process_frame(&patch, &out, Some(&obs), &mut state, &cfg, GazeCalibration::default()).unwrap();
        strengths.push(r.strength);
        last = Some(r.patch);
    }
    assert!(strengths.windows(2).all(|w| w[1] <= w[0]), "{strengths:?}");
    assert!(strengths[0] > strengths[9]);
    assert_eq!(strengths[9], 0.0);
    assert_eq!(last.unwrap().pixels(), patch.pixels());
}

#[test]
fn missing_landmarks_pass_through_and_keep_state() {
    let (patch, obs) = stream();
    let cfg = ControlConfig::default();
    let mut state = OutputFilter::new();
    let cal = GazeCalibration::default();
    process_frame(&patch, &EccOutput::constant_flow(1.0, 0.0, 0.1), Some(&obs), &mut state, &cfg, cal).unwrap();
    let before = state.clone();
    let r = process_frame(&patch, &EccOutput::constant_flow(3.0, 1.0, 0.4), None, &mut state, &cfg, cal).unwrap();
    assert_eq!(r.strength, 0.0);
    assert!(r.gaze.is_none());
    assert_eq!(r.patch.pixels(), patch.pixels());
    assert_eq!(state, before);
}

#[test]
fn closed_eye_frames_are_bitwise_unchanged() {
    let (patch, mut obs) = stream();
    let [l, r] = [obs.landmarks[0], obs.landmarks[3]];
    let mid = (l[1] + r[1]) / 2.0;
    // squash all landmarks onto the eye axis
    for p in &mut obs.landmarks {
        p[1] = mid;
    }
    let mut state = OutputFilter::new();
    let res = process_frame(
        &patch,
        &EccOutput::constant_flow(2.0, 0.0, 0.3),
        Some(&obs),
        &mut state,
        &ControlConfig::default(),
        GazeCalibration::default(),
    )
    .unwrap();
    assert_eq!(res.strength, 0.0);
    assert_eq!(res.patch.pixels(), patch.pixels());
}

#[test]
fn flow_is_filtered_before_warping() {
    let (patch, obs) = stream();
    let cfg = ControlConfig::default();
    let mut state = OutputFilter::new();
    let a = EccOutput::constant_flow(-2.0, 0.0, 0.0);
    let b = EccOutput::constant_flow(2.0, 0.0, 0.0);
    let cal = GazeCalibration::default();
    process_frame(&patch, &a, Some(&obs), &mut state, &cfg, cal).unwrap();
    let second = process_frame(&patch, &b, Some(&obs), &mut state, &cfg, cal).unwrap();

    // with zero initial velocity the estimate sits halfway between frames
    let filtered = EccOutput::constant_flow(0.0, 0.0, 0.0);
    assert_eq!(second.patch, apply_correction(&patch, &filtered, 1.0));

    let wa = apply_correction(&patch, &a, 1.0);
    let wb = apply_correction(&patch, &b, 1.0);
    let averaged = Tensor::from_fn(patch.pixels().shape().to_vec(), |i| {
        0.5 * wa.pixels().data()[i] + 0.5 * wb.pixels().data()[i]
    });
    let diff = second.patch.pixels().max_abs_diff(&averaged);
    assert!(diff > 0.05, "filtered warp matches averaged pixels (diff {diff})");
}

#[test]
fn left_eye_gaze_is_reported_unmirrored() {
    let (patch, obs) = stream();
    let flipped = patch.flipped();
    let out = EccOutput::constant_flow(2.0, 0.0, 0.0);
    let cal = GazeCalibration::default();
    let mut state = OutputFilter::new();
    let right = process_frame(&patch, &out, Some(&obs), &mut state, &ControlConfig::default(), cal).unwrap();
    let mut state = OutputFilter::new();
    let left = process_frame(&flipped, &out, Some(&obs), &mut state, &ControlConfig::default(), cal).unwrap();
    let (gr, gl) = (right.gaze.unwrap(), left.gaze.unwrap());
    assert_eq!(gl.horizontal, -gr.horizontal);
    assert_eq!(gl.vertical, gr.vertical);
}
