//! Procedurally generated, perfectly labeled gaze sets.
//!
//! A set is one random scene rendered at several gazes. All images of a set
//! are cropped with one shared 2:1 box and resampled to the network's patch
//! size, so pixels only differ where the gaze moves something.

mod augment;
mod io;
mod render;

pub use augment::{augment, AugmentParams, Distortion};
pub use io::{read_dataset, read_manifest, read_ppm, write_dataset, write_ppm, Manifest, ManifestSample};
pub use render::{
    iris_centroid, render_eye, render_eye_layers, EyeSceneParams, Glasses, Point, Rendered, Rgb,
    SCENE_HEIGHT, SCENE_WIDTH,
};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eccnet::{GazeVector, PATCH_HEIGHT, PATCH_WIDTH};
use crate::error::{EccError, Result};
use crate::par;
use crate::tensor::Tensor;

/// Gaze draws are N(0, GAZE_SIGMA^2) per axis, truncated to [-1, 1].
pub const GAZE_SIGMA: f32 = 0.4;
pub const DEFAULT_GAZES_PER_SET: usize = 40;

/// Axis-aligned crop rectangle in scene pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl CropBox {
    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x && p[0] <= self.x + self.w && p[1] >= self.y && p[1] <= self.y + self.h
    }

    /// Maps a scene point into patch pixel coordinates.
    pub fn to_patch(&self, p: Point) -> Point {
        [
            (p[0] - self.x) * PATCH_WIDTH as f32 / self.w,
            (p[1] - self.y) * PATCH_HEIGHT as f32 / self.h,
        ]
    }

    /// Scene pixels per patch pixel.
    pub fn scale(&self) -> f32 {
        self.w / PATCH_WIDTH as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, PATCH_HEIGHT, PATCH_WIDTH]`, values multiples of 1/255.
    pub image: Tensor<f32>,
    pub gaze: GazeVector,
    /// Scene coordinates.
    pub landmarks: [Point; 6],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub params: EyeSceneParams,
    pub crop_box: CropBox,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn seed(&self) -> u64 {
        self.params.seed
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// Scene parameters drawn from `seed`. Apertures stay wide enough that the
/// generated eyes are never gated as blinking.
pub fn scene_params(seed: u64) -> EyeSceneParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random::<f32>();
    let light = [0.94, 0.80, 0.70];
    let dark = [0.42, 0.28, 0.20];
    let skin = std::array::from_fn(|k| light[k] + (dark[k] - light[k]) * t);
    let s = uniform(&mut rng, 0.9, 0.98);
    let sclera = [s, s * uniform(&mut rng, 0.95, 0.99), s * uniform(&mut rng, 0.92, 0.97)];
    let irises: [Rgb; 4] = [
        [0.36, 0.22, 0.12],
        [0.25, 0.42, 0.62],
        [0.30, 0.45, 0.28],
        [0.52, 0.40, 0.20],
    ];
    let base = irises[rng.random_range(0..irises.len())];
    let k = uniform(&mut rng, 0.7, 1.2);
    let iris = base.map(|c| (c * k).min(1.0));
    let eye_width = uniform(&mut rng, 56.0, 72.0);
    let eye_height = eye_width * uniform(&mut rng, 0.55, 0.7);
    let iris_radius = eye_width * uniform(&mut rng, 0.19, 0.22);
    let aperture = uniform(&mut rng, 0.65, 1.0);
    let head_offset = [uniform(&mut rng, -4.0, 4.0), uniform(&mut rng, -4.0, 4.0)];
    let glasses = (rng.random::<f32>() < 0.3).then(|| {
        let g = uniform(&mut rng, 0.05, 0.4);
        Glasses {
            thickness: uniform(&mut rng, 1.5, 3.0),
            color: [g, g * uniform(&mut rng, 0.8, 1.0), g * uniform(&mut rng, 0.7, 1.0)],
            inset: [uniform(&mut rng, 1.15, 1.35), uniform(&mut rng, 1.3, 1.7)],
        }
    });
    let render_jitter = uniform(&mut rng, 0.01, 0.05);
    EyeSceneParams {
        seed,
        skin_color: skin,
        sclera_color: sclera,
        iris_color: iris,
        eye_width,
        eye_height,
        iris_radius,
        aperture,
        head_offset,
        glasses,
        render_jitter,
    }
}

/// One truncated-Gaussian gaze draw.
pub fn sample_gaze(rng: &mut impl Rng) -> GazeVector {
    let normal = Normal::new(0.0f32, GAZE_SIGMA).expect("sigma");
    let mut axis = || loop {
        let v = normal.sample(rng);
        if (-1.0..=1.0).contains(&v) {
            break v;
        }
    };
    let h = axis();
    let v = axis();
    GazeVector::new(h, v)
}

fn bbox(points: &[Point]) -> [f32; 4] {
    let mut b = [f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY];
    for p in points {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    b
}

/// The shared set crop: twice the mean landmark-box width, 2:1, centered on
/// the union of all landmark boxes.
pub fn set_crop_box(landmarks: &[[Point; 6]]) -> Result<CropBox> {
    if landmarks.is_empty() {
        return Err(EccError::Dataset("crop box of an empty set".into()));
    }
    let mean_w = landmarks
        .iter()
        .map(|l| {
            let b = bbox(l);
            (b[2] - b[0]) as f64
        })
        .sum::<f64>()
        / landmarks.len() as f64;
    let all: Vec<Point> = landmarks.iter().flatten().copied().collect();
    let u = bbox(&all);
    let w = (2.0 * mean_w) as f32;
    let h = w / 2.0;
    let cx = (u[0] + u[2]) / 2.0;
    let cy = (u[1] + u[3]) / 2.0;
    let cb = CropBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
    };
    if !all.iter().all(|&p| cb.contains(p)) {
        return Err(EccError::Dataset(
            "landmarks do not fit the set crop box".into(),
        ));
    }
    Ok(cb)
}

fn bilinear(img: &Tensor<f32>, ch: usize, x: f32, y: f32) -> f32 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    // pixel centers sit at integer + 0.5
    let sx = (x - 0.5).clamp(0.0, (w - 1) as f32);
    let sy = (y - 0.5).clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
    let p = &img.data()[ch * h * w..(ch + 1) * h * w];
    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
    let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resamples the crop to the patch size (4x4 supersampled bilinear) and
/// quantizes to 8 bits so the result survives a PPM round trip exactly.
pub fn crop_to_patch(scene: &Tensor<f32>, crop: &CropBox) -> Tensor<f32> {
    const SS: usize = 4;
    let (pw, ph) = (PATCH_WIDTH, PATCH_HEIGHT);
    let (sx, sy) = (crop.w / pw as f32, crop.h / ph as f32);
    Tensor::from_fn([3, ph, pw], |i| {
        let (ch, rest) = (i / (ph * pw), i % (ph * pw));
        let (oy, ox) = (rest / pw, rest % pw);
        let mut acc = 0.0;
        for jy in 0..SS {
            for jx in 0..SS {
                let x = crop.x + (ox as f32 + (jx as f32 + 0.5) / SS as f32) * sx;
                let y = crop.y + (oy as f32 + (jy as f32 + 0.5) / SS as f32) * sy;
                acc += bilinear(scene, ch, x, y);
            }
        }
        quantize(acc / (SS * SS) as f32)
    })
}

pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders `params` at each gaze and crops with the shared box.
pub fn build_set(params: EyeSceneParams, gazes: &[GazeVector]) -> Result<SampleSet> {
    params.validate()?;
    if gazes.len() < 2 {
        return Err(EccError::Dataset(format!(
            "a set needs at least 2 gazes, got {}",
            gazes.len()
        )));
    }
    let scenes: Vec<_> = gazes.iter().map(|&g| render_eye(&params, g)).collect();
    let lms: Vec<[Point; 6]> = scenes.iter().map(|s| s.1).collect();
    let crop_box = set_crop_box(&lms)?;
    let samples = scenes
        .into_iter()
        .zip(gazes)
        .map(|((img, landmarks), &gaze)| Sample {
            image: crop_to_patch(&img, &crop_box),
            gaze,
            landmarks,
        })
        .collect();
    Ok(SampleSet {
        params,
        crop_box,
        samples,
    })
}

/// Gazes of set `seed`; a separate stream from the scene parameters.
pub fn set_gazes(seed: u64, n_gazes: usize) -> Vec<GazeVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..n_gazes).map(|_| sample_gaze(&mut rng)).collect()
}

pub fn generate_set(seed: u64, n_gazes: usize) -> Result<SampleSet> {
    build_set(scene_params(seed), &set_gazes(seed, n_gazes))
}

/// Seed of the `index`-th set of a dataset seeded with `seed`.
pub fn set_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + index as u64);
    rng.next_u64()
}

/// `n_sets` sets; generated in parallel, identical to a sequential run.
pub fn generate_dataset(seed: u64, n_sets: usize, n_gazes: usize) -> Result<Vec<SampleSet>> {
    par::map_collect(n_sets, |i| generate_set(set_seed(seed, i), n_gazes))
        .into_iter()
        .collect()
}

/// Uniform sampler over ordered pairs of distinct indices.
#[derive(Clone, Copy, Debug)]
pub struct PairSampler {
    n: usize,
}

impl PairSampler {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(EccError::Dataset(format!(
                "pairs need at least 2 samples, got {n}"
            )));
        }
        Ok(Self { n })
    }

    /// Number of distinct ordered pairs.
    pub fn ordered_pairs(&self) -> usize {
        self.n * (self.n - 1)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (usize, usize) {
        let i = rng.random_range(0..self.n);
        let j = rng.random_range(0..self.n - 1);
        (i, if j >= i { j + 1 } else { j })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamplePair<'a> {
    pub input: &'a Sample,
    pub target: &'a Sample,
}

/// Endless stream of uniformly drawn ordered pairs from one set.
pub fn make_pairs<'a, R: Rng>(
    set: &'a SampleSet,
    rng: &'a mut R,
) -> Result<impl Iterator<Item = SamplePair<'a>> + 'a> {
    let sampler = PairSampler::new(set.len())?;
    Ok(std::iter::repeat_with(move || {
        let (i, j) = sampler.sample(rng);
        SamplePair {
            input: &set.samples[i],
            target: &set.samples[j],
        }
    }))
}

/// Eye opening ratio (height over width of the landmark box).
pub fn eye_open_ratio(landmarks: &[Point; 6]) -> f32 {
    let b = bbox(landmarks);
    let w = b[2] - b[0];
    if w <= 0.0 {
        0.0
    } else {
        (b[3] - b[1]) / w
    }
}
