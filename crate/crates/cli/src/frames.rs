//! Whole-frame correction: per-eye crops from landmarks, the control
//! pipeline per eye, and feathered paste-back.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ecc_core::control::{process_frame_with, ControlConfig, EyeObservation, FaceSignals, OutputFilter};
use ecc_core::eccnet::{EccNet, EccOutput, EyePatch, GazeCalibration, GazeVector, ModelWeights, Mode};
use ecc_core::synthdata::{crop_to_patch, render_eye, set_crop_box, CropBox, EyeSceneParams, Point};
use ecc_core::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const FEATHER_PX: f32 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeLandmarks {
    pub left: Vec<Point>,
    pub right: Vec<Point>,
}

/// One entry of `landmarks.json`. Eyes are named from the subject's point
/// of view; the right eye is the one on the image left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameLandmarks {
    pub index: usize,
    /// `[x, y, w, h]` in frame pixels.
    pub face_box: [f32; 4],
    /// `[pitch, roll, yaw]` in degrees.
    #[serde(default)]
    pub pose: [f32; 3],
    /// Absent when the tracker lost the eyes.
    #[serde(default)]
    pub eyes: Option<EyeLandmarks>,
}

fn six(points: &[Point], frame: usize, eye: &str) -> Result<[Point; 6]> {
    points
        .try_into()
        .ok()
        .with_context(|| format!("frame {frame}: {eye} eye needs 6 landmarks, got {}", points.len()))
}

impl FrameLandmarks {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = &self.eyes {
            six(&e.left, self.index, "left")?;
            six(&e.right, self.index, "right")?;
        }
        if !(self.face_box[2] > 0.0 && self.face_box[3] > 0.0) {
            bail!("frame {}: face box must have positive size", self.index);
        }
        Ok(())
    }

    pub fn face_signals(&self, frame_w: usize, frame_h: usize) -> FaceSignals {
        let [x, y, w, h] = self.face_box;
        let (fw, fh) = (frame_w as f32, frame_h as f32);
        let (dx, dy) = (x + w / 2.0 - fw / 2.0, y + h / 2.0 - fh / 2.0);
        FaceSignals {
            face_size: w / fw,
            center_offset: (dx * dx + dy * dy).sqrt() / fw,
            pitch: self.pose[0],
            roll: self.pose[1],
            yaw: self.pose[2],
        }
    }
}

pub fn read_landmarks(path: &Path) -> Result<Vec<FrameLandmarks>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let frames: Vec<FrameLandmarks> =
        serde_json::from_str(&text).with_context(|| format!("malformed landmarks in {}", path.display()))?;
    for f in &frames {
        f.validate()?;
    }
    Ok(frames)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// 2:1 crop around one eye and the patch cut from it. Left eyes come back
/// mirrored, ready for the network.
pub fn eye_patch(frame: &Tensor<f32>, landmarks: &[Point; 6], side: Side) -> Result<(CropBox, EyePatch)> {
    let crop = set_crop_box(std::slice::from_ref(landmarks))?;
    let patch = EyePatch::new(crop_to_patch(frame, &crop))?;
    Ok(match side {
        Side::Right => (crop, patch),
        Side::Left => (crop, patch.flipped()),
    })
}

fn sample(img: &Tensor<f32>, ch: usize, x: f32, y: f32) -> f32 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
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

/// Adds the upsampled change `corrected - original` to the frame inside
/// `crop`, fading it in over `feather` pixels from the crop edge. Pixels
/// outside the crop are never touched, nor are any pixels when the patches
/// are equal.
pub fn paste_back(frame: &mut Tensor<f32>, crop: &CropBox, original: &Tensor<f32>, corrected: &Tensor<f32>, feather: f32) {
    let delta = Tensor::from_fn(original.shape().to_vec(), |i| corrected.data()[i] - original.data()[i]);
    if delta.data().iter().all(|&d| d == 0.0) {
        return;
    }
    let (fh, fw) = (frame.shape()[1], frame.shape()[2]);
    let (ph, pw) = (original.shape()[1] as f32, original.shape()[2] as f32);
    let x0 = crop.x.floor().max(0.0) as usize;
    let y0 = crop.y.floor().max(0.0) as usize;
    let x1 = ((crop.x + crop.w).ceil() as usize).min(fw);
    let y1 = ((crop.y + crop.h).ceil() as usize).min(fh);
    let data = frame.data_mut();
    for y in y0..y1 {
        for x in x0..x1 {
            let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
            let edge = (cx - crop.x)
                .min(crop.x + crop.w - cx)
                .min(cy - crop.y)
                .min(crop.y + crop.h - cy);
            if edge <= 0.0 {
                continue;
            }
            let alpha = (edge / feather).min(1.0);
            let (px, py) = ((cx - crop.x) / crop.w * pw, (cy - crop.y) / crop.h * ph);
            for ch in 0..3 {
                let i = (ch * fh + y) * fw + x;
                data[i] = (data[i] + alpha * sample(&delta, ch, px, py)).clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EyeReport {
    pub side: Side,
    pub strength: f32,
    pub gaze: Option<[f32; 2]>,
    /// Mean filtered flow `(u, v)` in patch pixels.
    pub filtered_mean_flow: Option<[f32; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameReport {
    pub index: usize,
    pub eyes: Vec<EyeReport>,
}

/// Per-stream state: one filter per eye.
pub struct SequenceCorrector<'a> {
    pub net: &'a EccNet,
    pub weights: &'a ModelWeights,
    pub control: ControlConfig,
    pub calibration: GazeCalibration,
    pub strength_override: Option<f32>,
    left: OutputFilter,
    right: OutputFilter,
    /// Last filtered output per eye, left then right.
    pub last_filtered: [Option<EccOutput>; 2],
}

impl<'a> SequenceCorrector<'a> {
    pub fn new(net: &'a EccNet, weights: &'a ModelWeights, control: ControlConfig) -> Self {
        Self {
            net,
            weights,
            control,
            calibration: GazeCalibration::default(),
            strength_override: None,
            left: OutputFilter::new(),
            right: OutputFilter::new(),
            last_filtered: [None, None],
        }
    }

    /// Corrects both eyes of one `[3, h, w]` frame toward gaze `(0, 0)`.
    pub fn process(&mut self, frame: &Tensor<f32>, lm: Option<&FrameLandmarks>) -> Result<(Tensor<f32>, FrameReport)> {
        let index = lm.map_or(0, |l| l.index);
        let (fh, fw) = match frame.shape() {
            [3, h, w] => (*h, *w),
            s => bail!("frame {index}: expected an RGB image, got shape {s:?}"),
        };
        let mut out = frame.clone();
        let mut eyes = Vec::new();
        let Some((lm, points)) = lm.and_then(|l| l.eyes.as_ref().map(|e| (l, e))) else {
            self.last_filtered = [None, None];
            for side in [Side::Left, Side::Right] {
                eyes.push(EyeReport {
                    side,
                    strength: 0.0,
                    gaze: None,
                    filtered_mean_flow: None,
                });
            }
            return Ok((out, FrameReport { index, eyes }));
        };
        let face = lm.face_signals(fw, fh);
        for (k, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            let pts = six(if side == Side::Left { &points.left } else { &points.right }, index, "eye")?;
            let (crop, patch) = eye_patch(frame, &pts, side).with_context(|| format!("frame {index}: {side:?} eye"))?;
            let target = if side == Side::Left { GazeVector::CENTER.mirrored() } else { GazeVector::CENTER };
            let raw = self.net.forward(self.weights, &patch, target, Mode::Infer)?;
            let obs = EyeObservation { face, landmarks: pts };
            let state = if side == Side::Left { &mut self.left } else { &mut self.right };
            let r = process_frame_with(
                &patch,
                &raw,
                Some(&obs),
                state,
                &self.control,
                self.calibration,
                self.strength_override,
            )?;
            let original = if side == Side::Left { patch.flipped() } else { patch.clone() };
            paste_back(&mut out, &crop, original.pixels(), r.patch.pixels(), FEATHER_PX);
            eyes.push(EyeReport {
                side,
                strength: r.strength,
                gaze: r.gaze.map(|g| [g.horizontal, g.vertical]),
                filtered_mean_flow: r.filtered.as_ref().map(|f| {
                    let (u, v) = f.mean_flow();
                    [u, v]
                }),
            });
            self.last_filtered[k] = r.filtered;
        }
        Ok((out, FrameReport { index, eyes }))
    }
}

/// Input and output side by side.
pub fn side_by_side(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    Tensor::from_fn([3, h, 2 * w], |i| {
        let (ch, y, x) = (i / (h * 2 * w), (i / (2 * w)) % h, i % (2 * w));
        let src = if x < w { a } else { b };
        src.data()[(ch * h + y) * w + x % w]
    })
}

pub const SYNTH_FRAME_WIDTH: usize = 640;
pub const SYNTH_FRAME_HEIGHT: usize = 240;

/// A flat face-colored frame with two rendered eyes of one scene looking at
/// `gaze`, plus its landmark entry. Optional Gaussian sensor noise.
pub fn synthetic_frame(
    params: &EyeSceneParams,
    gaze: GazeVector,
    index: usize,
    noise_sigma: f32,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, FrameLandmarks)> {
    let (fw, fh) = (SYNTH_FRAME_WIDTH, SYNTH_FRAME_HEIGHT);
    let (scene_r, lm_r) = render_eye(params, gaze);
    let (scene_l, lm_l) = render_eye(params, gaze.mirrored());
    let scene_l = scene_l.flip_horizontal();
    let (sh, sw) = (scene_r.shape()[1], scene_r.shape()[2]);
    // right eye on the image left, left eye mirrored on the image right
    let (xr, xl, y0) = (fw / 2 - sw, fw / 2, (fh - sh) / 2);
    let skin = params.skin_color;
    let mut frame = Tensor::from_fn([3, fh, fw], |i| skin[i / (fh * fw)]);
    {
        let d = frame.data_mut();
        for ch in 0..3 {
            for y in 0..sh {
                for x in 0..sw {
                    let s = (ch * sh + y) * sw + x;
                    d[(ch * fh + y0 + y) * fw + xr + x] = scene_r.data()[s];
                    d[(ch * fh + y0 + y) * fw + xl + x] = scene_l.data()[s];
                }
            }
        }
    }
    if noise_sigma > 0.0 {
        let n = Normal::new(0.0f32, noise_sigma)?;
        for v in frame.data_mut() {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let frame = frame.map(ecc_core::synthdata::quantize);
    let shift = |p: Point, dx: usize| [p[0] + dx as f32, p[1] + y0 as f32];
    let right: Vec<Point> = lm_r.iter().map(|&p| shift(p, xr)).collect();
    let left: Vec<Point> = lm_l.iter().map(|&p| shift([sw as f32 - p[0], p[1]], xl)).collect();
    let face_w = 0.375 * fw as f32;
    let face_h = 0.9 * fh as f32;
    Ok((
        frame,
        FrameLandmarks {
            index,
            face_box: [(fw as f32 - face_w) / 2.0, (fh as f32 - face_h) / 2.0, face_w, face_h],
            pose: [0.0; 3],
            eyes: Some(EyeLandmarks { left, right }),
        },
    ))
}
