//! On-the-fly training distortions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Noise,
    BrightnessContrast,
    Blur,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub order: [Distortion; 3],
    pub noise_sigma: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub blur_sigma: f32,
}

impl AugmentParams {
    pub const NONE: AugmentParams = AugmentParams {
        order: [Distortion::Noise, Distortion::BrightnessContrast, Distortion::Blur],
        noise_sigma: 0.0,
        brightness: 0.0,
        contrast: 1.0,
        blur_sigma: 0.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut order = Self::NONE.order;
        order.shuffle(rng);
        Self {
            order,
            noise_sigma: rng.random_range(0.0..=0.03),
            brightness: rng.random_range(-0.1..=0.1),
            contrast: rng.random_range(0.85..=1.15),
            blur_sigma: rng.random_range(0.0..=1.0),
        }
    }

    /// Applies the distortions in order; noise draws come from `rng`.
    pub fn apply(&self, image: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
        let mut out = image.clone();
        for d in self.order {
            match d {
                Distortion::Noise if self.noise_sigma > 0.0 => {
                    for v in out.data_mut() {
                        let z: f32 = StandardNormal.sample(rng);
                        *v += self.noise_sigma * z;
                    }
                }
                Distortion::BrightnessContrast => {
                    let (c, b) = (self.contrast, self.brightness);
                    // contrast pivots around mid-gray
                    let offset = 0.5 * (1.0 - c) + b;
                    for v in out.data_mut() {
                        *v = *v * c + offset;
                    }
                }
                Distortion::Blur if self.blur_sigma > 0.0 => out = gaussian_blur(&out, self.blur_sigma),
                _ => {}
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Random distortion of one image; the result stays in `[0, 1]`.
pub fn augment(image: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    AugmentParams::sample(rng).apply(image, rng)
}

/// Separable Gaussian blur of a `[c, h, w]` image with replicated edges.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => panic!("gaussian_blur expects [c, h, w], got {other:?}"),
    };
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    let mut out = vec![0.0f32; src.len()];
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        let t = &mut tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                t[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * p[y * w + clampi(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                o[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * t[clampi(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}
