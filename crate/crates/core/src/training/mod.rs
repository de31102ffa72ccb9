//! Bi-directional training: a correction pass toward the target gaze, then a
//! reconstruction pass back to the input gaze, optimized jointly with Adam
//! under a triangular cyclic learning rate.

mod adam;

pub use adam::{adam_update, AdamState};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eccnet::{
    correct_graph, first_layer_prefixes, save_weights, EccNet, ForwardOptions,
    GazeVector, ModelWeights, Mode,
};
use crate::error::{EccError, Result};
use crate::synthdata::{augment, PairSampler, SampleSet};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_weight_correction: f32,
    pub loss_weight_reconstruction: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub lr_min: f32,
    pub lr_max: f32,
    pub lr_cycle_len: usize,
    pub batch_size: usize,
    pub total_iters: usize,
    pub finetune_first_layers_only: bool,
    pub rng_seed: u64,
    /// Distort both images of every pair on the fly.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weight_correction: 0.8,
            loss_weight_reconstruction: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 0.1,
            lr_min: 0.002,
            lr_max: 0.01,
            lr_cycle_len: 2000,
            batch_size: 16,
            total_iters: 20_000,
            finetune_first_layers_only: false,
            rng_seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (wc, wr) = (self.loss_weight_correction, self.loss_weight_reconstruction);
        let bad = |msg: String| Err(EccError::Config(msg));
        if !(wc >= 0.0 && wr >= 0.0) || (wc + wr - 1.0).abs() > 1e-6 {
            return bad(format!("loss weights must be non-negative and sum to 1, got {wc} and {wr}"));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return bad(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.lr_cycle_len < 2 || self.batch_size == 0 {
            return bad("lr_cycle_len must be at least 2 and batch_size positive".into());
        }
        Ok(())
    }

    fn trainable_prefixes(&self) -> Option<Vec<String>> {
        self.finetune_first_layers_only.then(first_layer_prefixes)
    }
}

/// Triangular wave from `lr_min` at the start of each cycle to `lr_max` at
/// its middle.
pub fn cyclic_lr(iteration: usize, config: &TrainConfig) -> f32 {
    let len = config.lr_cycle_len as f64;
    let pos = (iteration % config.lr_cycle_len) as f64;
    let half = len / 2.0;
    let tri = if pos <= half { pos / half } else { (len - pos) / half };
    let (lo, hi) = (config.lr_min as f64, config.lr_max as f64);
    (lo + (hi - lo) * tri).clamp(lo, hi) as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "iter")]
    pub iteration: usize,
    #[serde(rename = "L_c")]
    pub l_c: f32,
    #[serde(rename = "L_r")]
    pub l_r: f32,
    #[serde(rename = "L_total")]
    pub l_total: f32,
    pub lr: f32,
}

/// Training pairs stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct PairBatch {
    /// `[n, 3, h, w]`
    pub input: Tensor<f32>,
    /// `[n, 3, h, w]`
    pub target: Tensor<f32>,
    pub input_gaze: Vec<GazeVector>,
    pub target_gaze: Vec<GazeVector>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.input_gaze.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_gaze.is_empty()
    }

    /// Draws `n` pairs: a uniform set, then a uniform ordered pair inside it.
    pub fn sample(sets: &[SampleSet], n: usize, augmented: bool, rng: &mut impl Rng) -> Result<Self> {
        if sets.is_empty() {
            return Err(EccError::Dataset("no sample sets to draw pairs from".into()));
        }
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut input_gaze = Vec::with_capacity(n);
        let mut target_gaze = Vec::with_capacity(n);
        for _ in 0..n {
            let set = &sets[rng.random_range(0..sets.len())];
            let (i, j) = PairSampler::new(set.len())?.sample(rng);
            let (a, b) = (&set.samples[i], &set.samples[j]);
            if augmented {
                inputs.push(augment(&a.image, rng));
                targets.push(augment(&b.image, rng));
            } else {
                inputs.push(a.image.clone());
                targets.push(b.image.clone());
            }
            input_gaze.push(a.gaze);
            target_gaze.push(b.gaze);
        }
        Ok(Self {
            input: Tensor::stack(&inputs)?,
            target: Tensor::stack(&targets)?,
            input_gaze,
            target_gaze,
        })
    }
}

/// How the reconstruction pass sees the corrected image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PassCoupling {
    /// Gradients of pass 2 flow back through the corrected image into pass 1.
    Unrolled,
    /// The corrected image enters pass 2 as a constant.
    Detached,
}

/// Losses and parameter gradients of one bi-directional step. Running
/// statistics in `weights` are updated in place.
pub fn bidirectional_gradients(
    net: &EccNet,
    weights: &mut ModelWeights,
    batch: &PairBatch,
    config: &TrainConfig,
    coupling: PassCoupling,
) -> Result<(f32, f32, HashMap<String, Tensor<f32>>)> {
    let opts = ForwardOptions {
        mode: Mode::Train,
        trainable_prefixes: config.trainable_prefixes(),
        update_running_stats: true,
    };
    let mut g = Graph::<f32>::new();
    let params = net.bind(&mut g, weights, |n| opts.is_trainable(n));
    let input = g.constant(batch.input.clone());
    let target = g.constant(batch.target.clone());

    let out1 = net.forward_graph(&mut g, &params, weights, input, &batch.target_gaze, &opts)?;
    let corrected = correct_graph(&mut g, input, out1.flow, out1.brightness, 1.0)?;
    let l_c = g.mse(corrected, target)?;

    let second = match coupling {
        PassCoupling::Unrolled => corrected,
        PassCoupling::Detached => {
            let v = g.value(corrected).clone();
            g.constant(v)
        }
    };
    let out2 = net.forward_graph(&mut g, &params, weights, second, &batch.input_gaze, &opts)?;
    let reconstructed = correct_graph(&mut g, second, out2.flow, out2.brightness, 1.0)?;
    let l_r = g.mse(reconstructed, input)?;

    let wc = g.scale(l_c, config.loss_weight_correction);
    let wr = g.scale(l_r, config.loss_weight_reconstruction);
    let total = g.add(wc, wr)?;
    let (lc, lr) = (g.value(l_c).data()[0], g.value(l_r).data()[0]);
    if !lc.is_finite() || !lr.is_finite() {
        return Err(EccError::Diverged {
            iteration: 0,
            detail: format!("non-finite loss: L_c = {lc}, L_r = {lr}"),
        });
    }
    g.backward(total)?;
    let mut grads = HashMap::new();
    for (name, var) in params.iter() {
        if g.requires_grad(var) {
            let grad = g
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(g.shape(var).to_vec()));
            grads.insert(name.to_string(), grad);
        }
    }
    Ok((lc, lr, grads))
}

/// One correction + reconstruction pass pair followed by one Adam update.
pub fn bidirectional_step(
    net: &EccNet,
    weights: &mut ModelWeights,
    adam: &mut AdamState,
    batch: &PairBatch,
    config: &TrainConfig,
    iteration: usize,
) -> Result<LossReport> {
    let lr = cyclic_lr(iteration, config);
    let (l_c, l_r, grads) =
        bidirectional_gradients(net, weights, batch, config, PassCoupling::Unrolled).map_err(|e| match e {
            EccError::Diverged { detail, .. } => EccError::Diverged {
                iteration,
                detail: format!("{detail} at lr {lr}"),
            },
            other => other,
        })?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
        return Err(EccError::Diverged {
            iteration,
            detail: format!("non-finite gradient for {name} (L_c = {l_c}, L_r = {l_r}, lr {lr})"),
        });
    }
    adam_update(weights, &grads, adam, lr, config)?;
    Ok(LossReport {
        iteration,
        l_c,
        l_r,
        l_total: config.loss_weight_correction * l_c + config.loss_weight_reconstruction * l_r,
        lr,
    })
}

/// Where `train` writes its log and checkpoints. Both are optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// JSON lines, one per 100 iterations.
    pub log: Option<PathBuf>,
    /// Directory for `ckpt_{iter}.eccw` at the end of every learning-rate cycle.
    pub checkpoint_dir: Option<PathBuf>,
}

pub const LOG_EVERY: usize = 100;

/// Per-iteration reports and the mean of every logging window.
#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub steps: Vec<LossReport>,
    pub windows: Vec<LossReport>,
}

fn window_mean(steps: &[LossReport]) -> LossReport {
    let n = steps.len() as f64;
    let mean = |f: fn(&LossReport) -> f32| (steps.iter().map(|s| f(s) as f64).sum::<f64>() / n) as f32;
    let last = steps.last().expect("non-empty window");
    LossReport {
        iteration: last.iteration,
        l_c: mean(|s| s.l_c),
        l_r: mean(|s| s.l_r),
        l_total: mean(|s| s.l_total),
        lr: last.lr,
    }
}

/// Continues training from `weights`; see [`train`].
pub fn train_from(
    net: &EccNet,
    mut weights: ModelWeights,
    dataset: &[SampleSet],
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(ModelWeights, TrainingLog)> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(EccError::Dataset(format!(
            "training needs at least 2 sample sets, got {}",
            dataset.len()
        )));
    }
    net.check_weights(&weights)?;
    let mut log_file = match &outputs.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| EccError::io(p, e))?),
        None => None,
    };
    if let Some(d) = &outputs.checkpoint_dir {
        fs::create_dir_all(d).map_err(|e| EccError::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut adam = AdamState::new();
    let mut log = TrainingLog::default();
    for it in 0..config.total_iters {
        let batch = PairBatch::sample(dataset, config.batch_size, config.augment, &mut rng)?;
        let report = bidirectional_step(net, &mut weights, &mut adam, &batch, config, it)?;
        log.steps.push(report);
        if (it + 1) % LOG_EVERY == 0 {
            let w = window_mean(&log.steps[it + 1 - LOG_EVERY..]);
            if let (Some(f), Some(p)) = (log_file.as_mut(), &outputs.log) {
                let line = serde_json::to_string(&w).expect("report serializes");
                writeln!(f, "{line}").map_err(|e| EccError::io(p, e))?;
            }
            log.windows.push(w);
        }
        if (it + 1) % config.lr_cycle_len == 0 {
            if let Some(d) = &outputs.checkpoint_dir {
                save_weights(&weights, checkpoint_path(d, it + 1))?;
            }
        }
    }
    Ok((weights, log))
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration}.eccw"))
}

/// Trains freshly initialized weights (seeded by `rng_seed`).
pub fn train(
    net: &EccNet,
    dataset: &[SampleSet],
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(ModelWeights, TrainingLog)> {
    train_from(net, net.init_weights(config.rng_seed), dataset, config, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_wave_hits_its_bounds() {
        let c = TrainConfig::default();
        assert_eq!(cyclic_lr(0, &c), 0.002);
        assert!((cyclic_lr(1000, &c) - 0.01).abs() < 1e-9);
        assert_eq!(cyclic_lr(2000, &c), 0.002);
        assert!((cyclic_lr(500, &c) - 0.006).abs() < 1e-7);
        assert!((cyclic_lr(1500, &c) - 0.006).abs() < 1e-7);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            loss_weight_correction: 0.7,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_min: 0.02,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let ok = TrainConfig {
            loss_weight_correction: 0.0,
            loss_weight_reconstruction: 1.0,
            ..TrainConfig::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"lr_mn": 0.1}"#);
        assert!(err.is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"total_iters": 5}"#).unwrap();
        assert_eq!(c.total_iters, 5);
        assert_eq!(c.adam_eps, 0.1);
    }

    #[test]
    fn report_serializes_with_short_loss_keys() {
        let r = LossReport {
            iteration: 100,
            l_c: 0.5,
            l_r: 0.25,
            l_total: 0.45,
            lr: 0.002,
        };
        let s = serde_json::to_string(&r).unwrap();
        for key in ["\"iter\"", "\"L_c\"", "\"L_r\"", "\"L_total\"", "\"lr\""] {
            assert!(s.contains(key), "{s}");
        }
    }
}
