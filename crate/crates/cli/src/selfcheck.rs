//! Registry of quick internal consistency checks run by `ecc selfcheck`.

use std::time::Instant;

use ecc_core::control::{alpha_beta_update, gate, AlphaBetaState, GateSpec};
use ecc_core::eccnet::{
    correct_graph, is_running_stat, EccNet, EccNetConfig, ForwardOptions, GazeVector, ModelWeights, PATCH_HEIGHT, PATCH_WIDTH,
};
use ecc_core::metrics::{mse, relative_error, tolerant_mse};
use ecc_core::tensor::{gradient_check, BatchNormStats, GradCheckOptions, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

type CheckFn = Box<dyn Fn() -> Result<String, String> + Send + Sync>;

pub struct Check {
    pub name: String,
    run: CheckFn,
}

impl Check {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<String, String> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfcheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

pub fn run_checks(checks: &[Check]) -> SelfcheckReport {
    let results: Vec<CheckResult> = checks
        .iter()
        .map(|c| {
            let t = Instant::now();
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (c.run)()))
                .unwrap_or_else(|_| Err("panicked".into()));
            let millis = t.elapsed().as_secs_f64() * 1e3;
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name: c.name.clone(),
                passed,
                detail,
                millis,
            }
        })
        .collect();
    SelfcheckReport {
        passed: results.iter().all(|r| r.passed),
        checks: results,
    }
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Send + Sync;

/// Finite-difference check of the graph built by `build` over `inputs`.
pub fn gradient(name: &str, shapes: &[&[usize]], seed: u64, build: Box<Build>) -> Check {
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    let label = name.to_string();
    Check::new(format!("gradient:{name}"), move || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                Tensor::from_fn(s.clone(), |_| {
                    let m: f64 = rng.random_range(0.05..1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
            })
            .collect();
        let opts = GradCheckOptions {
            step: 1e-4,
            ..GradCheckOptions::default()
        };
        let r = gradient_check(&label, &inputs, |g, v| build(g, v), &opts).map_err(|e| e.to_string())?;
        let detail = format!("max rel error {:.2e} over {} coordinates", r.max_rel_error, r.checked);
        if r.passed {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

fn loss(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let t = g.constant(Tensor::from_fn(shape, |i| ((i * 37) % 11) as f64 / 11.0 - 0.5));
    g.mse(y, t)
}

fn ensure(ok: bool, detail: impl Into<String>) -> Result<String, String> {
    let d = detail.into();
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn random_image(seed: u64, shape: [usize; 3]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

/// Flow inside the image so bilinear cells are never crossed by the
/// finite-difference step.
fn interior_flow_loss(g: &mut Graph<f64>, v: &[Var]) -> Result<Var, TensorError> {
    let f = g.scale(v[1], 0.3);
    let y = g.grid_warp(v[0], f)?;
    loss(g, y)
}

pub fn registry() -> Vec<Check> {
    let mut checks = vec![
        gradient(
            "conv2d",
            &[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]],
            1,
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                loss(g, y)
            }),
        ),
        gradient(
            "depthwise_separable_conv",
            &[&[2, 3, 6, 8], &[3, 1, 3, 3], &[3], &[4, 3, 1, 1], &[4]],
            2,
            Box::new(|g, v| {
                let y = g.depthwise_separable_conv(v[0], (v[1], v[2]), (v[3], v[4]))?;
                loss(g, y)
            }),
        ),
        gradient(
            "batch_norm",
            &[&[3, 4, 4, 4], &[4], &[4]],
            3,
            Box::new(|g, v| {
                let mut stats = BatchNormStats::new(4);
                let y = g.batch_norm(v[0], v[1], v[2], &mut stats, true)?;
                loss(g, y)
            }),
        ),
        gradient(
            "relu_sigmoid",
            &[&[2, 2, 4, 4]],
            4,
            Box::new(|g, v| {
                let r = g.relu(v[0]);
                let s = g.sigmoid(r);
                loss(g, s)
            }),
        ),
        gradient(
            "avg_pool2",
            &[&[2, 3, 4, 6]],
            5,
            Box::new(|g, v| {
                let y = g.avg_pool2(v[0])?;
                loss(g, y)
            }),
        ),
        gradient(
            "up_conv",
            &[&[2, 3, 3, 4], &[3, 2, 2, 2], &[2]],
            6,
            Box::new(|g, v| {
                let y = g.up_conv(v[0], v[1], Some(v[2]))?;
                loss(g, y)
            }),
        ),
        gradient(
            "concat_slice",
            &[&[2, 2, 3, 3], &[2, 3, 3, 3]],
            7,
            Box::new(|g, v| {
                let c = g.concat_channels(v[0], v[1])?;
                let s = g.slice_channels(c, 1, 3)?;
                loss(g, s)
            }),
        ),
        gradient("grid_warp", &[&[1, 3, 6, 8], &[1, 2, 6, 8]], 8, Box::new(interior_flow_loss)),
        gradient(
            "blend_white",
            &[&[2, 3, 4, 4], &[2, 1, 4, 4]],
            9,
            Box::new(|g, v| {
                let m = g.sigmoid(v[1]);
                let y = g.blend_white(v[0], m, 0.7)?;
                loss(g, y)
            }),
        ),
        Check::new("gradient:network", || {
            let net = EccNet::new(EccNetConfig {
                encoder_channels: vec![3, 4, 4],
                ..EccNetConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let mut weights: ModelWeights<f64> = net.init_weights(3).cast();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            // a live head and off-default BN terms keep the check away from kinks
            for (name, t) in weights.iter_mut() {
                if name.starts_with("head.") {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
                } else if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with("bias") {
                    t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
                }
            }
            let image = Tensor::from_fn([2, 3, PATCH_HEIGHT, PATCH_WIDTH], |_| rng.random_range(0.1..0.9));
            let target = Tensor::from_fn([2, 3, PATCH_HEIGHT, PATCH_WIDTH], |_| rng.random::<f64>());
            let gazes = [GazeVector::new(0.3, -0.2), GazeVector::new(-0.5, 0.4)];
            let names: Vec<String> = weights
                .iter()
                .filter(|(n, _)| !is_running_stat(n))
                .map(|(n, _)| n.to_string())
                .collect();
            let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| weights.get(n).unwrap().clone()).collect();
            inputs.push(image);
            let opts = GradCheckOptions {
                step: 1e-6,
                max_coords: Some(4),
                seed: 5,
                ..GradCheckOptions::default()
            };
            let r = gradient_check(
                "network",
                &inputs,
                |g, v| -> ecc_core::Result<Var> {
                    let params = names.iter().cloned().zip(v.iter().copied()).collect();
                    let x = *v.last().unwrap();
                    let mut stats = weights.clone();
                    let out = net.forward_graph(g, &params, &mut stats, x, &gazes, &ForwardOptions::train())?;
                    let y = correct_graph(g, x, out.flow, out.brightness, 0.9)?;
                    let t = g.constant(target.clone());
                    Ok(g.mse(y, t)?)
                },
                &opts,
            )
            .map_err(|e| e.to_string())?;
            ensure(
                r.passed,
                format!("max rel error {:.2e} over {} coordinates of {} tensors", r.max_rel_error, r.checked, inputs.len()),
            )
        }),
        Check::new("warp:zero_flow_is_identity", || {
            let img = random_image(10, [3, 8, 12]).reshape([1, 3, 8, 12]).map_err(|e| e.to_string())?;
            let mut g = Graph::<f32>::new();
            let x = g.constant(img.clone());
            let f = g.constant(Tensor::zeros([1, 2, 8, 12]));
            let y = g.grid_warp(x, f).map_err(|e| e.to_string())?;
            let same = g.value(y) == &img;
            ensure(same, format!("bitwise identity {same}"))
        }),
        Check::new("warp:unit_shift_translates", || {
            let img = random_image(11, [3, 6, 9]).reshape([1, 3, 6, 9]).map_err(|e| e.to_string())?;
            let mut g = Graph::<f32>::new();
            let x = g.constant(img.clone());
            let f = g.constant(Tensor::from_fn([1, 2, 6, 9], |i| if i < 54 { 1.0 } else { 0.0 }));
            let y = g.grid_warp(x, f).map_err(|e| e.to_string())?;
            let out = g.value(y);
            let mut worst = 0.0f32;
            for c in 0..3 {
                for r in 0..6 {
                    for col in 0..8 {
                        let i = (c * 6 + r) * 9 + col;
                        worst = worst.max((out.data()[i] - img.data()[i + 1]).abs());
                    }
                }
            }
            ensure(worst < 1e-6, format!("max deviation {worst:.2e}"))
        }),
        Check::new("filter:constant_and_ramp", || {
            let mut s = AlphaBetaState::new();
            for _ in 0..10 {
                let x = alpha_beta_update(&mut s, &Tensor::full([1], 0.25), 0.5, 0.1).data()[0];
                if x != 0.25 {
                    return Err(format!("constant input drifted to {x}"));
                }
            }
            let mut s = AlphaBetaState::new();
            let mut err = 0.0f32;
            for t in 0..200 {
                let x = alpha_beta_update(&mut s, &Tensor::full([1], t as f32), 0.5, 0.1).data()[0];
                if t > 100 {
                    err = err.max((x - t as f32).abs());
                }
            }
            ensure(err < 1e-3, format!("ramp lag {err:.2e}"))
        }),
        Check::new("gate:smoothstep_anchors", || {
            let g = GateSpec::lower(0.15, 0.25);
            let (a, b, c) = (gate(0.1, &g), gate(0.2, &g), gate(0.3, &g));
            ensure(a == 0.0 && (b - 0.5).abs() < 1e-6 && c == 1.0, format!("{a} {b} {c}"))
        }),
        Check::new("metric:properties", || {
            let mut worst = 0.0f64;
            for seed in 0..50 {
                let (a, b) = (random_image(seed, [3, 6, 8]), random_image(seed + 100, [3, 6, 8]));
                let (t, m) = (tolerant_mse(&a, &b).map_err(|e| e.to_string())?, mse(&a, &b).map_err(|e| e.to_string())?);
                if t > m {
                    return Err(format!("tolerant {t} above plain {m}"));
                }
                let ba = tolerant_mse(&b, &a).map_err(|e| e.to_string())?;
                worst = worst.max((t - ba).abs());
                if relative_error(&a, &b, &a).map_err(|e| e.to_string())? != Some(1.0) {
                    return Err("identity corrector is not 1.0".into());
                }
            }
            ensure(worst < 1e-12, format!("asymmetry {worst:.1e}"))
        }),
        Check::new("weights:eccw_round_trip", || {
            let net = EccNet::new(EccNetConfig::default()).map_err(|e| e.to_string())?;
            let w = net.init_weights(3);
            let back = ModelWeights::from_bytes(&w.to_bytes()).map_err(|e| e.to_string())?;
            ensure(back == w, format!("{} tensors", w.len()))
        }),
    ];
    checks.shrink_to_fit();
    checks
}
