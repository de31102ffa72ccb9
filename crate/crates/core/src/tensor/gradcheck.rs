//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input (randomly chosen).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

fn evaluate<F, E>(inputs: &[Tensor<f64>], build: &F) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok(g.value(loss).data()[0])
}

/// Compares the tape gradient of the scalar produced by `build` against
/// central differences over every (or a sampled subset of) input coordinate.
/// Any error type that tensor errors convert into may be used by `build`.
pub fn gradient_check<F, E>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: F,
    opts: &GradCheckOptions,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perturbed = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            perturbed[k].data_mut()[i] = orig + opts.step;
            let up = evaluate(&perturbed, &build)?;
            perturbed[k].data_mut()[i] = orig - opts.step;
            let down = evaluate(&perturbed, &build)?;
            perturbed[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            checked += 1;
            if err > max_err || err.is_nan() {
                max_err = if err.is_nan() { f64::INFINITY } else { err };
                worst = Some((k, i));
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_err,
        worst,
        checked,
        passed: max_err <= opts.tolerance,
    })
}
