//! Image error measures and held-out evaluation against the identity
//! baseline.

use serde::{Deserialize, Serialize};

use crate::control::{strength, FaceSignals, GateConfig};
use crate::eccnet::{apply_correction, EccNet, EccOutput, EyePatch, GazeVector, ModelWeights, Mode};
use crate::error::{EccError, Result};
use crate::par;
use crate::synthdata::{eye_open_ratio, SampleSet};
use crate::tensor::{Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())).into());
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("mse", a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

fn planes(op: &'static str, t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [rest @ .., h, w] => Ok((rest.iter().product(), *h, *w)),
        s => Err(TensorError::shape(op, format!("expected an image, got shape {s:?}")).into()),
    }
}

/// MSE between `a` and `b` shifted by `(dx, dy)`, over the overlap only.
pub fn shifted_mse(a: &Tensor<f32>, b: &Tensor<f32>, dx: isize, dy: isize) -> Result<f64> {
    same_shape("shifted_mse", a, b)?;
    let (c, h, w) = planes("shifted_mse", a)?;
    let (ad, bd) = (a.data(), b.data());
    let ys = (dy.max(0) as usize)..((h as isize + dy.min(0)).max(0) as usize);
    let xs = (dx.max(0) as usize)..((w as isize + dx.min(0)).max(0) as usize);
    if ys.is_empty() || xs.is_empty() {
        return Err(TensorError::shape("shifted_mse", format!("shift ({dx}, {dy}) leaves no overlap")).into());
    }
    let mut sum = 0.0f64;
    for ch in 0..c {
        let base = ch * h * w;
        for y in ys.clone() {
            let by = (y as isize - dy) as usize;
            for x in xs.clone() {
                let bx = (x as isize - dx) as usize;
                let d = ad[base + y * w + x] as f64 - bd[base + by * w + bx] as f64;
                sum += d * d;
            }
        }
    }
    Ok(sum / (c * ys.len() * xs.len()) as f64)
}

/// Smallest overlap MSE over integer shifts of up to `radius` pixels per
/// axis. Radius 1 is the 3x3 slack window.
pub fn tolerant_mse_with(a: &Tensor<f32>, b: &Tensor<f32>, radius: usize) -> Result<f64> {
    let r = radius as isize;
    let mut best = f64::INFINITY;
    for dy in -r..=r {
        for dx in -r..=r {
            best = best.min(shifted_mse(a, b, dx, dy)?);
        }
    }
    Ok(best)
}

pub fn tolerant_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    tolerant_mse_with(a, b, 1)
}

/// Slack window edge to shift radius: 3 means shifts in {-1, 0, 1}.
pub fn slack_radius(window: usize) -> Result<usize> {
    if window % 2 == 1 {
        Ok(window / 2)
    } else {
        Err(EccError::Config(format!("slack window must be odd, got {window}")))
    }
}

/// Tolerant error of the correction over that of the uncorrected input.
/// `None` when the input already matches the ground truth.
pub fn relative_error_with(
    corrected: &Tensor<f32>,
    ground_truth: &Tensor<f32>,
    input: &Tensor<f32>,
    radius: usize,
) -> Result<Option<f64>> {
    let den = tolerant_mse_with(input, ground_truth, radius)?;
    if den == 0.0 {
        return Ok(None);
    }
    Ok(Some(tolerant_mse_with(corrected, ground_truth, radius)? / den))
}

pub fn relative_error(corrected: &Tensor<f32>, ground_truth: &Tensor<f32>, input: &Tensor<f32>) -> Result<Option<f64>> {
    relative_error_with(corrected, ground_truth, input, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub set: usize,
    pub input: usize,
    pub target: usize,
    pub strength: f32,
    /// `None` for zero-denominator pairs, which are left out of the mean.
    pub relative_error: Option<f64>,
}

/// Least-squares fit of `gaze ≈ -k * mean_flow` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeFit {
    pub k_horizontal: f64,
    pub k_vertical: f64,
    pub pearson_horizontal: f64,
    pub pearson_vertical: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub relative_error: f64,
    pub n_pairs: usize,
    /// Pairs the control gates switched off entirely.
    pub n_gated_out: usize,
    pub n_zero_denominator: usize,
    pub with_control: bool,
    pub gaze: Option<GazeFit>,
    pub pairs: Vec<PairError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub with_control: bool,
    pub gates: GateConfig,
    /// Face-level signals assumed for every generated frame.
    pub face: FaceSignals,
    pub slack_window: usize,
    pub fit_gaze: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            with_control: false,
            gates: GateConfig::default(),
            face: FaceSignals::NOMINAL,
            slack_window: 3,
            fit_gaze: true,
        }
    }
}

impl Default for FaceSignals {
    fn default() -> Self {
        FaceSignals::NOMINAL
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Scale `k` minimizing `sum (y + k x)^2`.
fn fit_negated_scale(x: &[f64], y: &[f64]) -> f64 {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    -x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sxx
}

/// Fits the per-axis gaze calibration on outputs computed with target `(0, 0)`.
pub fn fit_gaze(mean_flows: &[(f32, f32)], gazes: &[GazeVector]) -> GazeFit {
    let u: Vec<f64> = mean_flows.iter().map(|f| f.0 as f64).collect();
    let v: Vec<f64> = mean_flows.iter().map(|f| f.1 as f64).collect();
    let gh: Vec<f64> = gazes.iter().map(|g| g.horizontal as f64).collect();
    let gv: Vec<f64> = gazes.iter().map(|g| g.vertical as f64).collect();
    let (kh, kv) = (fit_negated_scale(&u, &gh), fit_negated_scale(&v, &gv));
    let ph: Vec<f64> = u.iter().map(|a| -kh * a).collect();
    let pv: Vec<f64> = v.iter().map(|a| -kv * a).collect();
    GazeFit {
        k_horizontal: kh,
        k_vertical: kv,
        pearson_horizontal: pearson(&ph, &gh),
        pearson_vertical: pearson(&pv, &gv),
        n_samples: gazes.len(),
    }
}

struct SetResult {
    pairs: Vec<PairError>,
    flows: Vec<(f32, f32)>,
    gazes: Vec<GazeVector>,
}

fn eval_set(net: &EccNet, weights: &ModelWeights, k: usize, set: &SampleSet, opts: &EvalOptions) -> Result<SetResult> {
    let radius = slack_radius(opts.slack_window)?;
    let n = set.len();
    let images: Vec<Tensor<f32>> = set.samples.iter().map(|s| s.image.clone()).collect();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        let targets: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        if targets.is_empty() {
            continue;
        }
        let batch = Tensor::stack(&vec![images[i].clone(); targets.len()])?;
        let gazes: Vec<GazeVector> = targets.iter().map(|&j| set.samples[j].gaze).collect();
        let outs = net.forward_batch(weights, &batch, &gazes, Mode::Infer)?;
        let patch = EyePatch::new(images[i].clone())?;
        let open = eye_open_ratio(&set.samples[i].landmarks);
        for (&j, out) in targets.iter().zip(&outs) {
            let s = if opts.with_control {
                strength(&opts.face.with_output(open, out), &opts.gates)
            } else {
                1.0
            };
            let relative_error = if s == 0.0 {
                None
            } else {
                let corrected = apply_correction(&patch, out, s);
                relative_error_with(corrected.pixels(), &images[j], &images[i], radius)?
            };
            pairs.push(PairError {
                set: k,
                input: i,
                target: j,
                strength: s,
                relative_error,
            });
        }
    }
    let (mut flows, mut gazes) = (Vec::new(), Vec::new());
    if opts.fit_gaze {
        let batch = Tensor::stack(&images)?;
        let outs: Vec<EccOutput> = net.forward_batch(weights, &batch, &vec![GazeVector::CENTER; n], Mode::Infer)?;
        flows = outs.iter().map(|o| o.mean_flow()).collect();
        gazes = set.samples.iter().map(|s| s.gaze).collect();
    }
    Ok(SetResult { pairs, flows, gazes })
}

/// Corrects every ordered pair of every set and averages the per-pair
/// relative errors. With control on, pairs whose input is gated to zero
/// strength are excluded.
pub fn evaluate(net: &EccNet, weights: &ModelWeights, dataset: &[SampleSet], opts: &EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(EccError::Dataset("evaluation needs at least one sample set".into()));
    }
    net.check_weights(weights)?;
    opts.gates.validate()?;
    let results: Vec<Result<SetResult>> = par::map_collect(dataset.len(), |k| eval_set(net, weights, k, &dataset[k], opts));
    let mut pairs = Vec::new();
    let (mut flows, mut gazes) = (Vec::new(), Vec::new());
    for r in results {
        let r = r?;
        pairs.extend(r.pairs);
        flows.extend(r.flows);
        gazes.extend(r.gazes);
    }
    let n_gated_out = pairs.iter().filter(|p| p.strength == 0.0).count();
    let n_zero_denominator = pairs
        .iter()
        .filter(|p| p.strength > 0.0 && p.relative_error.is_none())
        .count();
    let scored: Vec<f64> = pairs.iter().filter_map(|p| p.relative_error).collect();
    if scored.is_empty() {
        return Err(EccError::Dataset("no pair could be scored".into()));
    }
    Ok(EvalReport {
        relative_error: scored.iter().sum::<f64>() / scored.len() as f64,
        n_pairs: scored.len(),
        n_gated_out,
        n_zero_denominator,
        with_control: opts.with_control,
        gaze: opts.fit_gaze.then(|| fit_gaze(&flows, &gazes)),
        pairs,
    })
}
