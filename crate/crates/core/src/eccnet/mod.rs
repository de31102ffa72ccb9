//! The correction network and everything applied to its output.
//!
//! Topology (widths from [`EccNetConfig::encoder_channels`] `[c1, c2, c3]`):
//!
//! ```text
//! [rgb | tiled gaze] -> enc1(c1) -> pool -> enc2(c2) -> pool -> enc3(c3) -> mid(c3)
//!   -> up1(c2) ++ enc2 -> dec2(c2) -> up2(c1) ++ enc1 -> dec1(c1) -> head(3)
//! ```
//!
//! Every block is three depthwise-separable layers (batch norm + ReLU) with a
//! residual connection around the middle one. Head channels 0-1 are the
//! sampling flow in pixels, channel 2 goes through a sigmoid to become the
//! brightness map.

mod weights;

pub use weights::{is_running_stat, load_weights, save_weights, ModelWeights, MAGIC, VERSION};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EccError, Result};
use crate::tensor::{BatchNormStats, Graph, Real, Tensor, Var};

pub const PATCH_WIDTH: usize = 64;
pub const PATCH_HEIGHT: usize = 32;
/// RGB plus two tiled gaze channels.
pub const INPUT_CHANNELS: usize = 5;

/// Gaze in normalized units; `(0, 0)` looks into the camera. Positive
/// horizontal is toward the viewer's right, positive vertical is up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GazeVector {
    pub horizontal: f32,
    pub vertical: f32,
}

impl GazeVector {
    pub const CENTER: GazeVector = GazeVector {
        horizontal: 0.0,
        vertical: 0.0,
    };

    pub fn new(horizontal: f32, vertical: f32) -> Self {
        Self {
            horizontal,
            vertical,
        }
    }

    /// Gaze as seen in a horizontally mirrored image.
    pub fn mirrored(self) -> Self {
        Self {
            horizontal: -self.horizontal,
            vertical: self.vertical,
        }
    }

    pub fn is_finite(self) -> bool {
        self.horizontal.is_finite() && self.vertical.is_finite()
    }
}

/// A 64x32 RGB eye patch, values in `[0, 1]`, channel-major `[3, 32, 64]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EyePatch {
    pixels: Tensor<f32>,
    /// Set when a left eye has been mirrored so the model sees a right eye.
    pub is_flipped: bool,
}

impl EyePatch {
    /// Wraps `[3, 32, 64]` (or `[1, 3, 32, 64]`) pixels, clamping to `[0, 1]`.
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        let pixels = match pixels.shape() {
            [3, PATCH_HEIGHT, PATCH_WIDTH] => pixels,
            [1, 3, PATCH_HEIGHT, PATCH_WIDTH] => {
                pixels.reshape([3, PATCH_HEIGHT, PATCH_WIDTH])?
            }
            other => {
                return Err(EccError::Config(format!(
                    "eye patch must be 3x{PATCH_HEIGHT}x{PATCH_WIDTH}, got {other:?}"
                )))
            }
        };
        Ok(Self {
            pixels: pixels.map(|v| v.clamp(0.0, 1.0)),
            is_flipped: false,
        })
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<f32> {
        self.pixels
    }

    /// Mirror horizontally and toggle `is_flipped`.
    pub fn flipped(&self) -> Self {
        Self {
            pixels: self.pixels.flip_horizontal(),
            is_flipped: !self.is_flipped,
        }
    }
}

/// Network output for one patch: flow `[2, h, w]` (u then v, pixels) and
/// brightness `[1, h, w]` in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EccOutput {
    pub flow: Tensor<f32>,
    pub brightness: Tensor<f32>,
}

impl EccOutput {
    /// Output that leaves a patch untouched when applied with zero brightness.
    pub fn identity(brightness: f32) -> Self {
        Self {
            flow: Tensor::zeros([2, PATCH_HEIGHT, PATCH_WIDTH]),
            brightness: Tensor::full([1, PATCH_HEIGHT, PATCH_WIDTH], brightness),
        }
    }

    pub fn constant_flow(u: f32, v: f32, brightness: f32) -> Self {
        let plane = PATCH_HEIGHT * PATCH_WIDTH;
        Self {
            flow: Tensor::from_fn([2, PATCH_HEIGHT, PATCH_WIDTH], |i| {
                if i < plane {
                    u
                } else {
                    v
                }
            }),
            brightness: Tensor::full([1, PATCH_HEIGHT, PATCH_WIDTH], brightness),
        }
    }

    fn plane(&self) -> usize {
        self.flow.len() / 2
    }

    /// Mean of `(u, v)` over all pixels.
    pub fn mean_flow(&self) -> (f32, f32) {
        let p = self.plane();
        let d = self.flow.data();
        let mean = |s: &[f32]| (s.iter().map(|&x| x as f64).sum::<f64>() / p as f64) as f32;
        (mean(&d[..p]), mean(&d[p..]))
    }

    /// `(mean, max)` of the per-pixel flow magnitude.
    pub fn flow_magnitudes(&self) -> (f32, f32) {
        let p = self.plane();
        let d = self.flow.data();
        let (mut sum, mut max) = (0.0f64, 0.0f32);
        for i in 0..p {
            let m = d[i].hypot(d[p + i]);
            sum += m as f64;
            max = max.max(m);
        }
        ((sum / p as f64) as f32, max)
    }

    /// The same field expressed in mirrored image coordinates.
    pub fn mirrored(&self) -> Self {
        let p = self.plane();
        let mut flow = self.flow.flip_horizontal();
        flow.data_mut()[..p].iter_mut().for_each(|u| *u = -*u);
        Self {
            flow,
            brightness: self.brightness.flip_horizontal(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EccNetConfig {
    /// Widths of the three encoder scales.
    pub encoder_channels: Vec<usize>,
    /// Depthwise-separable layers per block.
    pub block_layers: usize,
    /// Initial pre-sigmoid brightness bias, so an untrained model starts
    /// close to the identity.
    pub brightness_bias_init: f32,
}

impl Default for EccNetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64],
            block_layers: 3,
            brightness_bias_init: -6.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Infer,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// When set, only layers under these name prefixes run batch norm in
    /// training mode; all others behave as in inference.
    pub trainable_prefixes: Option<Vec<String>>,
    /// Fold batch statistics into the stored running statistics.
    pub update_running_stats: bool,
}

impl ForwardOptions {
    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            trainable_prefixes: None,
            update_running_stats: false,
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            trainable_prefixes: None,
            update_running_stats: true,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match &self.trainable_prefixes {
            None => true,
            Some(prefixes) => prefixes.iter().any(|p| name.starts_with(p.as_str())),
        }
    }

    fn batch_stats(&self, layer: &str) -> bool {
        self.mode == Mode::Train && self.is_trainable(layer)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    He(usize),
    Zeros,
    Ones,
    Const(f32),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Graph handles for every entry of a [`ModelWeights`].
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| EccError::Weight {
            name: name.to_string(),
            detail: "not bound".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Graph handles of a network evaluation.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    /// `[n, 2, h, w]`
    pub flow: Var,
    /// `[n, 1, h, w]`, after the sigmoid
    pub brightness: Var,
}

/// Name prefixes of the layers before the first skip connection.
pub fn first_layer_prefixes() -> Vec<String> {
    vec!["enc1.".to_string()]
}

#[derive(Clone, Debug)]
pub struct EccNet {
    config: EccNetConfig,
}

impl EccNet {
    pub fn new(config: EccNetConfig) -> Result<Self> {
        if config.encoder_channels.len() != 3 || config.encoder_channels.contains(&0) {
            return Err(EccError::Config(format!(
                "encoder_channels must list three positive widths, got {:?}",
                config.encoder_channels
            )));
        }
        if config.block_layers < 3 {
            return Err(EccError::Config(format!(
                "block_layers must be at least 3 for the residual skip, got {}",
                config.block_layers
            )));
        }
        Ok(Self { config })
    }

    /// Recovers the architecture from stored weights. The brightness bias
    /// initializer is not stored and takes its default.
    pub fn from_weights<T: Real>(weights: &ModelWeights<T>) -> Result<Self> {
        let width = |block: &str| -> Result<usize> {
            Ok(weights.get(&format!("{block}.l0.pw.weight"))?.shape()[0])
        };
        let encoder_channels = vec![width("enc1")?, width("enc2")?, width("enc3")?];
        let block_layers = (0..)
            .take_while(|k| weights.get(&format!("enc1.l{k}.dw.weight")).is_ok())
            .count();
        let net = Self::new(EccNetConfig {
            encoder_channels,
            block_layers,
            ..EccNetConfig::default()
        })?;
        net.check_weights(weights)?;
        Ok(net)
    }

    pub fn config(&self) -> &EccNetConfig {
        &self.config
    }

    fn widths(&self) -> (usize, usize, usize) {
        let c = &self.config.encoder_channels;
        (c[0], c[1], c[2])
    }

    /// Every parameter and running statistic, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (c1, c2, c3) = self.widths();
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init })
        };
        let bn = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, c: usize| {
            push(format!("{name}.bn.gamma"), vec![c], Init::Ones);
            push(format!("{name}.bn.beta"), vec![c], Init::Zeros);
            push(format!("{name}.bn.running_mean"), vec![c], Init::Zeros);
            push(format!("{name}.bn.running_var"), vec![c], Init::Ones);
        };
        let blocks = [
            ("enc1", INPUT_CHANNELS, c1),
            ("enc2", c1, c2),
            ("enc3", c2, c3),
            ("mid", c3, c3),
        ];
        let decoder = [("dec2", 2 * c2, c2), ("dec1", 2 * c1, c1)];
        let block = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, cin: usize, cout: usize| {
            for k in 0..self.config.block_layers {
                let ci = if k == 0 { cin } else { cout };
                let l = format!("{name}.l{k}");
                push(format!("{l}.dw.weight"), vec![ci, 1, 3, 3], Init::He(9));
                push(format!("{l}.dw.bias"), vec![ci], Init::Zeros);
                push(format!("{l}.pw.weight"), vec![cout, ci, 1, 1], Init::He(ci));
                push(format!("{l}.pw.bias"), vec![cout], Init::Zeros);
                bn(push, &l, cout);
            }
        };
        for (name, cin, cout) in blocks {
            block(&mut push, name, cin, cout);
        }
        let ups = [("up1", c3, c2), ("up2", c2, c1)];
        for (i, (name, cin, cout)) in ups.into_iter().enumerate() {
            push(format!("{name}.weight"), vec![cin, cout, 2, 2], Init::He(cin));
            push(format!("{name}.bias"), vec![cout], Init::Zeros);
            bn(&mut push, name, cout);
            let (dname, dcin, dcout) = decoder[i];
            block(&mut push, dname, dcin, dcout);
        }
        push("head.weight".into(), vec![3, c1, 3, 3], Init::Zeros);
        push(
            "head.bias".into(),
            vec![3],
            Init::Const(self.config.brightness_bias_init),
        );
        specs
    }

    /// Deterministic initialization: He-normal convolution weights, zero head
    /// weights (zero flow) and the configured brightness bias.
    pub fn init_weights(&self, seed: u64) -> ModelWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::new();
        for spec in self.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.init {
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(_) => {
                    // only the head bias: flow channels zero, brightness channel biased
                    let mut v = vec![0.0; n];
                    if let Init::Const(b) = spec.init {
                        v[n - 1] = b;
                    }
                    v
                }
            };
            w.insert(spec.name, Tensor::new(spec.shape, data).expect("spec shape"))
                .expect("unique names");
        }
        w
    }

    /// Rejects weights whose names or shapes do not match this configuration.
    pub fn check_weights<T: Real>(&self, weights: &ModelWeights<T>) -> Result<()> {
        let specs = self.param_specs();
        for spec in &specs {
            let t = weights.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(EccError::Weight {
                    name: spec.name.clone(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                });
            }
        }
        if weights.len() != specs.len() {
            let extra = weights
                .names()
                .find(|n| !specs.iter().any(|s| s.name == *n))
                .unwrap_or("?");
            return Err(EccError::Weight {
                name: extra.to_string(),
                detail: "not part of this configuration".into(),
            });
        }
        Ok(())
    }

    /// Puts every trainable entry on the graph. Entries for which `trainable`
    /// is false become constants and receive no gradient.
    pub fn bind<T: Real>(
        &self,
        g: &mut Graph<T>,
        weights: &ModelWeights<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> ParamVars {
        let vars = weights
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(n, t)| (n.to_string(), g.leaf(t.clone(), trainable(n))))
            .collect();
        ParamVars { vars }
    }

    fn batch_norm<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        stats_store: &mut ModelWeights<T>,
        layer: &str,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let mean_name = format!("{layer}.bn.running_mean");
        let var_name = format!("{layer}.bn.running_var");
        let mut stats = BatchNormStats {
            mean: stats_store.get(&mean_name)?.data().to_vec(),
            var: stats_store.get(&var_name)?.data().to_vec(),
        };
        let training = opts.batch_stats(layer);
        let y = g.batch_norm(
            x,
            p.get(&format!("{layer}.bn.gamma"))?,
            p.get(&format!("{layer}.bn.beta"))?,
            &mut stats,
            training,
        )?;
        if training && opts.update_running_stats {
            stats_store.get_mut(&mean_name)?.data_mut().copy_from_slice(&stats.mean);
            stats_store.get_mut(&var_name)?.data_mut().copy_from_slice(&stats.var);
        }
        Ok(y)
    }

    fn ds_layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        stats: &mut ModelWeights<T>,
        layer: &str,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let y = g.depthwise_separable_conv(
            x,
            (
                p.get(&format!("{layer}.dw.weight"))?,
                p.get(&format!("{layer}.dw.bias"))?,
            ),
            (
                p.get(&format!("{layer}.pw.weight"))?,
                p.get(&format!("{layer}.pw.bias"))?,
            ),
        )?;
        let y = self.batch_norm(g, p, stats, layer, y, opts)?;
        Ok(g.relu(y))
    }

    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        stats: &mut ModelWeights<T>,
        name: &str,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let last = self.config.block_layers - 1;
        let first = self.ds_layer(g, p, stats, &format!("{name}.l0"), x, opts)?;
        let mut h = first;
        for k in 1..last {
            h = self.ds_layer(g, p, stats, &format!("{name}.l{k}"), h, opts)?;
        }
        let skip = g.add(h, first)?;
        self.ds_layer(g, p, stats, &format!("{name}.l{last}"), skip, opts)
    }

    fn up<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        stats: &mut ModelWeights<T>,
        name: &str,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let y = g.up_conv(
            x,
            p.get(&format!("{name}.weight"))?,
            Some(p.get(&format!("{name}.bias"))?),
        )?;
        let y = self.batch_norm(g, p, stats, name, y, opts)?;
        Ok(g.relu(y))
    }

    /// Records a forward pass. `image` is `[n, 3, h, w]` with `h` and `w`
    /// divisible by four; `targets` holds one gaze per batch item.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        stats: &mut ModelWeights<T>,
        image: Var,
        targets: &[GazeVector],
        opts: &ForwardOptions,
    ) -> Result<OutputVars> {
        let (n, c, h, w) = g.value(image).dims4("eccnet")?;
        if c != 3 || n != targets.len() || h % 4 != 0 || w % 4 != 0 {
            return Err(EccError::Config(format!(
                "network input must be [n, 3, h, w] with h, w divisible by 4 and one target per item; got {:?} with {} targets",
                g.shape(image),
                targets.len()
            )));
        }
        let plane = h * w;
        let mut tiles = Tensor::<T>::zeros([n, 2, h, w]);
        for (s, t) in targets.iter().enumerate() {
            let d = tiles.data_mut();
            let hv = T::from_f32(t.horizontal).expect("gaze");
            let vv = T::from_f32(t.vertical).expect("gaze");
            d[s * 2 * plane..(s * 2 + 1) * plane].fill(hv);
            d[(s * 2 + 1) * plane..(s * 2 + 2) * plane].fill(vv);
        }
        let tiles = g.constant(tiles);
        let x = g.concat_channels(image, tiles)?;

        let e1 = self.block(g, p, stats, "enc1", x, opts)?;
        let x = g.avg_pool2(e1)?;
        let e2 = self.block(g, p, stats, "enc2", x, opts)?;
        let x = g.avg_pool2(e2)?;
        let x = self.block(g, p, stats, "enc3", x, opts)?;
        let x = self.block(g, p, stats, "mid", x, opts)?;
        let x = self.up(g, p, stats, "up1", x, opts)?;
        let x = g.concat_channels(x, e2)?;
        let x = self.block(g, p, stats, "dec2", x, opts)?;
        let x = self.up(g, p, stats, "up2", x, opts)?;
        let x = g.concat_channels(x, e1)?;
        let x = self.block(g, p, stats, "dec1", x, opts)?;
        let head = g.conv2d(x, p.get("head.weight")?, Some(p.get("head.bias")?), 1, 1)?;
        let flow = g.slice_channels(head, 0, 2)?;
        let raw = g.slice_channels(head, 2, 1)?;
        let brightness = g.sigmoid(raw);
        Ok(OutputVars { flow, brightness })
    }

    /// Batched evaluation without gradients. `images` is `[n, 3, h, w]`.
    /// Train mode normalizes with batch statistics but leaves `weights`
    /// untouched.
    pub fn forward_batch(
        &self,
        weights: &ModelWeights,
        images: &Tensor<f32>,
        targets: &[GazeVector],
        mode: Mode,
    ) -> Result<Vec<EccOutput>> {
        self.check_weights(weights)?;
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, weights, |_| false);
        let image = g.constant(images.clone());
        let opts = ForwardOptions {
            mode,
            trainable_prefixes: None,
            update_running_stats: false,
        };
        // Running statistics are only read, but the signature wants a mutable store.
        let mut stats = weights.clone();
        let out = self.forward_graph(&mut g, &p, &mut stats, image, targets, &opts)?;
        let flow = g.value(out.flow);
        let bright = g.value(out.brightness);
        (0..targets.len())
            .map(|i| {
                let f = flow.batch_item(i)?;
                let b = bright.batch_item(i)?;
                let (_, _, h, w) = f.dims4("eccnet")?;
                Ok(EccOutput {
                    flow: f.reshape([2, h, w])?,
                    brightness: b.reshape([1, h, w])?,
                })
            })
            .collect()
    }

    pub fn forward(
        &self,
        weights: &ModelWeights,
        patch: &EyePatch,
        target: GazeVector,
        mode: Mode,
    ) -> Result<EccOutput> {
        let images = patch
            .pixels()
            .clone()
            .reshape([1, 3, PATCH_HEIGHT, PATCH_WIDTH])?;
        Ok(self
            .forward_batch(weights, &images, &[target], mode)?
            .remove(0))
    }

    /// Left eyes are mirrored, corrected as right eyes, and mirrored back.
    pub fn correct_left_eye(
        &self,
        weights: &ModelWeights,
        patch: &EyePatch,
        target: GazeVector,
    ) -> Result<EyePatch> {
        let flipped = patch.flipped();
        let out = self.forward(weights, &flipped, target.mirrored(), Mode::Infer)?;
        Ok(apply_correction(&flipped, &out, 1.0))
    }

    /// Left-eye network output expressed in the unmirrored patch frame.
    pub fn forward_left_eye(
        &self,
        weights: &ModelWeights,
        patch: &EyePatch,
        target: GazeVector,
    ) -> Result<EccOutput> {
        let flipped = patch.flipped();
        Ok(self
            .forward(weights, &flipped, target.mirrored(), Mode::Infer)?
            .mirrored())
    }
}

/// Records `blend_white(grid_warp(image, strength * flow), brightness, strength)`.
pub fn correct_graph<T: Real>(
    g: &mut Graph<T>,
    image: Var,
    flow: Var,
    brightness: Var,
    strength: T,
) -> Result<Var> {
    let flow = if strength == T::one() {
        flow
    } else {
        g.scale(flow, strength)
    };
    let warped = g.grid_warp(image, flow)?;
    Ok(g.blend_white(warped, brightness, strength)?)
}

/// Warps the patch by `strength * flow`, blends toward white by
/// `strength * brightness` and clamps to `[0, 1]`. A flipped patch is
/// mirrored back, so the result is always in the original orientation.
pub fn apply_correction(patch: &EyePatch, out: &EccOutput, strength: f32) -> EyePatch {
    let strength = strength.clamp(0.0, 1.0);
    let pixels = if strength == 0.0 {
        patch.pixels().clone()
    } else {
        let (h, w) = (PATCH_HEIGHT, PATCH_WIDTH);
        let mut g = Graph::<f32>::new();
        let image = g.constant(patch.pixels().clone().reshape([1, 3, h, w]).expect("patch"));
        let flow = g.constant(out.flow.clone().reshape([1, 2, h, w]).expect("flow shape"));
        let bright = g.constant(
            out.brightness
                .clone()
                .reshape([1, 1, h, w])
                .expect("brightness shape"),
        );
        let y = correct_graph(&mut g, image, flow, bright, strength).expect("validated shapes");
        g.value(y)
            .clone()
            .reshape([3, h, w])
            .expect("patch")
            .map(|v| v.clamp(0.0, 1.0))
    };
    let pixels = if patch.is_flipped {
        pixels.flip_horizontal()
    } else {
        pixels
    };
    EyePatch {
        pixels,
        is_flipped: false,
    }
}

/// Per-axis scale from mean flow to gaze units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeCalibration {
    pub horizontal: f32,
    pub vertical: f32,
}

impl GazeCalibration {
    pub fn uniform(k: f32) -> Self {
        Self {
            horizontal: k,
            vertical: k,
        }
    }
}

impl Default for GazeCalibration {
    fn default() -> Self {
        // Sampling flow points from the target iris position back toward the
        // observed one: +x for a rightward gaze, -y (image down) for upward.
        Self {
            horizontal: -0.25,
            vertical: 0.25,
        }
    }
}

/// Coarse input gaze from an output computed with target `(0, 0)`: the
/// negated, scaled mean flow.
pub fn predict_gaze(out: &EccOutput, k: GazeCalibration) -> GazeVector {
    let (u, v) = out.mean_flow();
    GazeVector::new(-k.horizontal * u, -k.vertical * v)
}
