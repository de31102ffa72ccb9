//! Flat-shaded procedural eye renderer.
//!
//! The scene is a fixed-size canvas with the eye centered (plus a small head
//! offset). Only the iris position and the upper lid depend on gaze, so every
//! pixel away from the iris and lid is identical across a set.

use serde::{Deserialize, Serialize};

use crate::eccnet::GazeVector;
use crate::error::{EccError, Result};
use crate::tensor::Tensor;

pub const SCENE_WIDTH: usize = 160;
pub const SCENE_HEIGHT: usize = 100;
/// Supersamples per pixel along each axis.
const SUPERSAMPLE: usize = 4;
/// Fraction of the upper lid height added per unit of vertical gaze.
const LID_FOLLOW: f32 = 0.1;

pub type Rgb = [f32; 3];
pub type Point = [f32; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glasses {
    pub thickness: f32,
    pub color: Rgb,
    /// Half-size of the frame's inner rectangle relative to the eye's
    /// half-width and half-height.
    pub inset: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeSceneParams {
    pub seed: u64,
    pub skin_color: Rgb,
    pub sclera_color: Rgb,
    pub iris_color: Rgb,
    pub eye_width: f32,
    pub eye_height: f32,
    pub iris_radius: f32,
    /// Eyelid opening as a fraction of `eye_height`.
    pub aperture: f32,
    pub head_offset: Point,
    pub glasses: Option<Glasses>,
    /// Amplitude of the per-pixel skin noise and the lid-edge wobble.
    pub render_jitter: f32,
}

impl EyeSceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EccError::Config(format!("eye scene {}: {msg}", self.seed)));
        if !(0.2..=1.0).contains(&self.aperture) {
            return bad(format!("aperture {} outside [0.2, 1]", self.aperture));
        }
        if !(self.eye_width > 0.0 && self.eye_height > 0.0 && self.iris_radius > 0.0) {
            return bad("eye and iris sizes must be positive".into());
        }
        if self.eye_height > self.eye_width || 2.0 * self.iris_radius > self.eye_height {
            return bad("iris must fit the eye and the eye must be wider than tall".into());
        }
        // the set crop is twice the eye width wide and half that tall
        let (hx, hy) = (self.eye_width, self.eye_width / 2.0);
        let [cx, cy] = self.center();
        if cx - hx < 0.0 || cx + hx > SCENE_WIDTH as f32 || cy - hy < 0.0 || cy + hy > SCENE_HEIGHT as f32 {
            return bad("eye plus crop margin leaves the canvas".into());
        }
        if !(0.0..=0.2).contains(&self.render_jitter) {
            return bad(format!("render_jitter {} outside [0, 0.2]", self.render_jitter));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        [
            SCENE_WIDTH as f32 / 2.0 + self.head_offset[0],
            SCENE_HEIGHT as f32 / 2.0 + self.head_offset[1],
        ]
    }

    /// Iris displacement at full horizontal gaze.
    pub fn dx_max(&self) -> f32 {
        0.5 * (self.eye_width / 2.0 - self.iris_radius)
    }

    /// Iris displacement at full vertical gaze.
    pub fn dy_max(&self) -> f32 {
        0.3 * self.eye_height / 2.0
    }

    /// Iris center offset from the eye center, image coordinates (y down).
    pub fn iris_offset(&self, gaze: GazeVector) -> Point {
        [gaze.horizontal * self.dx_max(), -gaze.vertical * self.dy_max()]
    }

    fn upper_half_height(&self, gaze: GazeVector) -> f32 {
        let lift = (1.0 + LID_FOLLOW * gaze.vertical.clamp(-1.5, 1.5)).max(0.0);
        self.eye_height / 2.0 * self.aperture * lift
    }

    fn lower_half_height(&self) -> f32 {
        self.eye_height / 2.0 * self.aperture
    }

    /// The six lid landmarks: outer corner, upper-outer, upper-inner, inner
    /// corner, lower-inner, lower-outer. Scene coordinates.
    pub fn landmarks(&self, gaze: GazeVector) -> [Point; 6] {
        let [cx, cy] = self.center();
        let a = self.eye_width / 2.0;
        let (hu, hl) = (self.upper_half_height(gaze), self.lower_half_height());
        let s = 0.75f32.sqrt();
        [
            [cx - a, cy],
            [cx - a / 2.0, cy - hu * s],
            [cx + a / 2.0, cy - hu * s],
            [cx + a, cy],
            [cx + a / 2.0, cy + hl * s],
            [cx - a / 2.0, cy + hl * s],
        ]
    }
}

/// A rendered scene: `[3, SCENE_HEIGHT, SCENE_WIDTH]` image, its landmarks
/// and the per-pixel coverage of the visible iris (pupil included).
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Tensor<f32>,
    pub landmarks: [Point; 6],
    pub iris_coverage: Vec<f32>,
}

fn hash(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ceb9fe1a85ec53);
    x ^ (x >> 33)
}

fn unit_noise(seed: u64, a: u64, b: u64) -> f32 {
    let h = hash(seed ^ hash(a.wrapping_mul(0x9E37_79B9) ^ hash(b.wrapping_add(0x51ED))));
    (h >> 40) as f32 / (1u64 << 24) as f32 * 2.0 - 1.0
}

fn scale(c: Rgb, s: f32) -> Rgb {
    [c[0] * s, c[1] * s, c[2] * s]
}

struct Geometry {
    center: Point,
    a: f32,
    hu: f32,
    hl: f32,
    iris: Point,
    r: f32,
    pupil_r: f32,
    wobble: [f32; 3],
    jitter: f32,
    lash: f32,
}

enum Surface {
    Skin,
    Lash,
    Sclera,
    Caruncle,
    Iris(f32),
    Pupil,
    Frame,
}

impl Geometry {
    fn new(p: &EyeSceneParams, gaze: GazeVector) -> Self {
        let off = p.iris_offset(gaze);
        let center = p.center();
        let phase = |k: u64| unit_noise(p.seed, 91, k) * std::f32::consts::PI;
        Self {
            center,
            a: p.eye_width / 2.0,
            hu: p.upper_half_height(gaze),
            hl: p.lower_half_height(),
            iris: [center[0] + off[0], center[1] + off[1]],
            r: p.iris_radius,
            pupil_r: 0.42 * p.iris_radius,
            wobble: [phase(1), phase(2), 2.0 + unit_noise(p.seed, 91, 3)],
            jitter: p.render_jitter,
            lash: 0.8 + 0.02 * p.eye_width,
        }
    }

    fn lid_profile(&self, u: f32) -> f32 {
        // u = x / a in (-1, 1); a smooth per-seed wobble on the lid edge
        let base = (1.0 - u * u).max(0.0).sqrt();
        base * (1.0 + self.jitter * (self.wobble[2] * u + self.wobble[0]).sin())
    }

    fn surface(&self, p: &EyeSceneParams, x: f32, y: f32) -> Surface {
        if let Some(g) = &p.glasses {
            let (fx, fy) = (g.inset[0] * self.a, g.inset[1] * p.eye_height / 2.0);
            let (dx, dy) = ((x - self.center[0]).abs(), (y - self.center[1]).abs());
            let inner = dx < fx && dy < fy;
            let outer = dx < fx + g.thickness && dy < fy + g.thickness;
            if outer && !inner {
                return Surface::Frame;
            }
        }
        let xr = x - self.center[0];
        let yr = y - self.center[1];
        let u = xr / self.a;
        if u.abs() >= 1.0 {
            return Surface::Skin;
        }
        let prof = self.lid_profile(u);
        let top = -self.hu * prof;
        let bottom = self.hl * (1.0 - u * u).max(0.0).sqrt();
        if yr <= top {
            return if yr > top - self.lash { Surface::Lash } else { Surface::Skin };
        }
        if yr >= bottom {
            return Surface::Skin;
        }
        let (ix, iy) = (x - self.iris[0], y - self.iris[1]);
        let d2 = ix * ix + iy * iy;
        if d2 <= self.pupil_r * self.pupil_r {
            return Surface::Pupil;
        }
        if d2 <= self.r * self.r {
            return Surface::Iris(d2.sqrt() / self.r);
        }
        // caruncle at the inner corner, image right for a right eye
        let (cu, cv) = ((u - 0.9) / 0.1, yr / (0.5 * self.hl.max(1.0)));
        if cu * cu + cv * cv <= 1.0 {
            return Surface::Caruncle;
        }
        Surface::Sclera
    }
}

/// Renders the scene for one gaze. Deterministic in `(params, gaze)`.
pub fn render_eye_layers(params: &EyeSceneParams, gaze: GazeVector) -> Rendered {
    let geo = Geometry::new(params, gaze);
    let (w, h) = (SCENE_WIDTH, SCENE_HEIGHT);
    let plane = w * h;
    let mut img = vec![0.0f32; 3 * plane];
    let mut coverage = vec![0.0f32; plane];
    let lash_color = scale(params.skin_color, 0.35);
    let caruncle = [
        0.5 * params.skin_color[0] + 0.45,
        0.5 * params.skin_color[1] + 0.2,
        0.5 * params.skin_color[2] + 0.22,
    ];
    let frame = params
        .glasses
        .as_ref()
        .map_or([0.0; 3], |g| g.color);
    let pupil = scale(params.iris_color, 0.15);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in 0..h {
        for px in 0..w {
            let grain = params.render_jitter * unit_noise(params.seed, px as u64, py as u64);
            let mut acc = [0.0f32; 3];
            let mut iris_hits = 0.0f32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                    let c = match geo.surface(params, x, y) {
                        Surface::Skin => scale(params.skin_color, 1.0 + grain),
                        Surface::Lash => lash_color,
                        Surface::Sclera => scale(params.sclera_color, 1.0 + 0.3 * grain),
                        Surface::Caruncle => caruncle,
                        Surface::Iris(t) => {
                            iris_hits += 1.0;
                            // darker limbal ring toward the edge
                            scale(params.iris_color, if t > 0.82 { 0.7 } else { 1.0 })
                        }
                        Surface::Pupil => {
                            iris_hits += 1.0;
                            pupil
                        }
                        Surface::Frame => frame,
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                img[k * plane + py * w + px] = (acc[k] / n).clamp(0.0, 1.0);
            }
            coverage[py * w + px] = iris_hits / n;
        }
    }
    Rendered {
        image: Tensor::new([3, h, w], img).expect("scene shape"),
        landmarks: params.landmarks(gaze),
        iris_coverage: coverage,
    }
}

/// Rendered image `[3, SCENE_HEIGHT, SCENE_WIDTH]` and its six landmarks.
pub fn render_eye(params: &EyeSceneParams, gaze: GazeVector) -> (Tensor<f32>, [Point; 6]) {
    let r = render_eye_layers(params, gaze);
    (r.image, r.landmarks)
}

/// Coverage-weighted centroid of the visible iris, scene coordinates.
pub fn iris_centroid(rendered: &Rendered) -> Option<Point> {
    let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
    for (i, &c) in rendered.iris_coverage.iter().enumerate() {
        if c > 0.0 {
            let (x, y) = ((i % SCENE_WIDTH) as f64 + 0.5, (i / SCENE_WIDTH) as f64 + 0.5);
            sx += c as f64 * x;
            sy += c as f64 * y;
            sw += c as f64;
        }
    }
    (sw > 0.0).then(|| [(sx / sw) as f32, (sy / sw) as f32])
}
