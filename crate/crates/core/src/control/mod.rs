//! Correction strength from smooth multiplicative gates, and per-pixel
//! alpha-beta filtering of the network output before warping.

mod filter;

pub use filter::{alpha_beta_update, AlphaBetaState, FilterConfig, OutputFilter};

use serde::{Deserialize, Serialize};

use crate::eccnet::{apply_correction, predict_gaze, EccOutput, EyePatch, GazeCalibration, GazeVector};
use crate::error::{EccError, Result};
use crate::synthdata::{eye_open_ratio, Point};

/// Per-frame inputs to the gates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSignals {
    /// Face width over frame width.
    pub face_size: f32,
    /// Distance of the face center from the frame center, over frame width.
    pub center_offset: f32,
    /// Degrees.
    pub pitch: f32,
    pub roll: f32,
    pub yaw: f32,
    pub eye_open_ratio: f32,
    /// Patch pixels, from the unfiltered output.
    pub mean_flow_mag: f32,
    pub max_flow_mag: f32,
}

impl ControlSignals {
    pub fn is_valid(&self) -> bool {
        [
            self.face_size,
            self.center_offset,
            self.pitch,
            self.roll,
            self.yaw,
            self.eye_open_ratio,
            self.mean_flow_mag,
            self.max_flow_mag,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.eye_open_ratio >= 0.0
    }
}

/// Face-level measurements a landmark tracker provides for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSignals {
    pub face_size: f32,
    pub center_offset: f32,
    #[serde(default)]
    pub pitch: f32,
    #[serde(default)]
    pub roll: f32,
    #[serde(default)]
    pub yaw: f32,
}

impl FaceSignals {
    /// A frontal, centered face of moderate size.
    pub const NOMINAL: FaceSignals = FaceSignals {
        face_size: 0.25,
        center_offset: 0.0,
        pitch: 0.0,
        roll: 0.0,
        yaw: 0.0,
    };

    pub fn with_output(self, eye_open_ratio: f32, out: &EccOutput) -> ControlSignals {
        let (mean, max) = out.flow_magnitudes();
        ControlSignals {
            face_size: self.face_size,
            center_offset: self.center_offset,
            pitch: self.pitch,
            roll: self.roll,
            yaw: self.yaw,
            eye_open_ratio,
            mean_flow_mag: mean,
            max_flow_mag: max,
        }
    }
}

/// Smooth gate shapes. Thresholds are the edges of the transition regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GateSpec {
    /// Off below `thresholds[0]`, on above `thresholds[1]`.
    Lower { thresholds: [f32; 2] },
    /// On below `thresholds[0]`, off above `thresholds[1]`.
    Upper { thresholds: [f32; 2] },
    /// On between `thresholds[1]` and `thresholds[2]`.
    Band { thresholds: [f32; 4] },
}

impl GateSpec {
    pub fn lower(off: f32, on: f32) -> Self {
        GateSpec::Lower { thresholds: [off, on] }
    }

    pub fn upper(on: f32, off: f32) -> Self {
        GateSpec::Upper { thresholds: [on, off] }
    }

    pub fn band(a: f32, b: f32, c: f32, d: f32) -> Self {
        GateSpec::Band {
            thresholds: [a, b, c, d],
        }
    }

    /// Symmetric band around zero for signed angles.
    pub fn symmetric(on: f32, off: f32) -> Self {
        Self::band(-off, -on, on, off)
    }

    fn edges(&self) -> &[f32] {
        match self {
            GateSpec::Lower { thresholds } | GateSpec::Upper { thresholds } => thresholds,
            GateSpec::Band { thresholds } => thresholds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.edges();
        if e.iter().all(|v| v.is_finite()) && e.windows(2).all(|w| w[0] < w[1]) {
            Ok(())
        } else {
            Err(EccError::Config(format!("gate thresholds must be strictly increasing, got {e:?}")))
        }
    }
}

pub fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn rise(v: f32, a: f32, b: f32) -> f32 {
    smoothstep((v - a) / (b - a))
}

/// Gate output in `[0, 1]`. NaN inputs gate off.
pub fn gate(value: f32, spec: &GateSpec) -> f32 {
    if value.is_nan() {
        return 0.0;
    }
    match *spec {
        GateSpec::Lower { thresholds: [a, b] } => rise(value, a, b),
        GateSpec::Upper { thresholds: [a, b] } => 1.0 - rise(value, a, b),
        GateSpec::Band {
            thresholds: [a, b, c, d],
        } => rise(value, a, b) * (1.0 - rise(value, c, d)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub face_size: GateSpec,
    pub center_offset: GateSpec,
    pub pitch: GateSpec,
    pub roll: GateSpec,
    pub yaw: GateSpec,
    pub eye_open_ratio: GateSpec,
    pub mean_flow_mag: GateSpec,
    pub max_flow_mag: GateSpec,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            face_size: GateSpec::band(0.08, 0.12, 0.45, 0.6),
            center_offset: GateSpec::upper(0.25, 0.4),
            pitch: GateSpec::symmetric(15.0, 25.0),
            roll: GateSpec::symmetric(20.0, 30.0),
            yaw: GateSpec::symmetric(15.0, 25.0),
            eye_open_ratio: GateSpec::lower(0.15, 0.25),
            mean_flow_mag: GateSpec::upper(4.0, 6.0),
            max_flow_mag: GateSpec::upper(8.0, 12.0),
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        for (_, spec) in self.gates() {
            spec.validate()?;
        }
        Ok(())
    }

    fn gates(&self) -> [(&'static str, &GateSpec); 8] {
        [
            ("face_size", &self.face_size),
            ("center_offset", &self.center_offset),
            ("pitch", &self.pitch),
            ("roll", &self.roll),
            ("yaw", &self.yaw),
            ("eye_open_ratio", &self.eye_open_ratio),
            ("mean_flow_mag", &self.mean_flow_mag),
            ("max_flow_mag", &self.max_flow_mag),
        ]
    }

    /// Each gate output, in the order of [`ControlSignals`] fields.
    pub fn factors(&self, s: &ControlSignals) -> [(&'static str, f32); 8] {
        let values = [
            s.face_size,
            s.center_offset,
            s.pitch,
            s.roll,
            s.yaw,
            s.eye_open_ratio,
            s.mean_flow_mag,
            s.max_flow_mag,
        ];
        let gates = self.gates();
        std::array::from_fn(|i| (gates[i].0, gate(values[i], gates[i].1)))
    }
}

/// Product of every gate output.
pub fn strength(signals: &ControlSignals, config: &GateConfig) -> f32 {
    config.factors(signals).iter().map(|(_, f)| f).product()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub gates: GateConfig,
    pub filter: FilterConfig,
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        self.gates.validate()?;
        self.filter.validate()
    }
}

/// What the tracker knows about one eye in one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeObservation {
    pub face: FaceSignals,
    /// Six eye landmarks in any consistent pixel frame.
    pub landmarks: [Point; 6],
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub patch: EyePatch,
    pub strength: f32,
    /// From the unfiltered output; `None` when the frame had no landmarks.
    pub gaze: Option<GazeVector>,
    pub signals: Option<ControlSignals>,
    /// Filtered output the patch was warped with.
    pub filtered: Option<EccOutput>,
}

/// Gates, filters and applies one frame's network output. `output` must be
/// in the same orientation as `patch`. Without landmarks the frame passes
/// through unchanged and the filter state is kept as it was.
pub fn process_frame(
    patch: &EyePatch,
    output: &EccOutput,
    observation: Option<&EyeObservation>,
    state: &mut OutputFilter,
    config: &ControlConfig,
    calibration: GazeCalibration,
) -> Result<FrameResult> {
    process_frame_with(patch, output, observation, state, config, calibration, None)
}

/// [`process_frame`] with the gated strength optionally replaced by a fixed
/// value (frames without landmarks still pass through).
pub fn process_frame_with(
    patch: &EyePatch,
    output: &EccOutput,
    observation: Option<&EyeObservation>,
    state: &mut OutputFilter,
    config: &ControlConfig,
    calibration: GazeCalibration,
    strength_override: Option<f32>,
) -> Result<FrameResult> {
    let Some(obs) = observation else {
        return Ok(FrameResult {
            patch: apply_correction(patch, output, 0.0),
            strength: 0.0,
            gaze: None,
            signals: None,
            filtered: None,
        });
    };
    let signals = obs.face.with_output(eye_open_ratio(&obs.landmarks), output);
    let filtered = state.update(output, &config.filter)?;
    let s = strength_override.map_or_else(|| strength(&signals, &config.gates), |v| v.clamp(0.0, 1.0));
    let gaze = predict_gaze(output, calibration);
    Ok(FrameResult {
        patch: apply_correction(patch, &filtered, s),
        strength: s,
        gaze: Some(if patch.is_flipped { gaze.mirrored() } else { gaze }),
        signals: Some(signals),
        filtered: Some(filtered),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn on_signals() -> ControlSignals {
        FaceSignals::NOMINAL.with_output(0.4, &EccOutput::identity(0.0))
    }

    #[test]
    fn saturation_and_midpoint() {
        let g = GateSpec::lower(0.15, 0.25);
        assert_eq!(gate(0.25, &g), 1.0);
        assert_eq!(gate(3.0, &g), 1.0);
        assert_eq!(gate(0.15, &g), 0.0);
        assert!((gate(0.2, &g) - 0.5).abs() < 1e-6);
        let u = GateSpec::upper(4.0, 6.0);
        assert_eq!(gate(1.0, &u), 1.0);
        assert!((gate(5.0, &u) - 0.5).abs() < 1e-6);
        assert_eq!(gate(f32::NAN, &u), 0.0);
    }

    #[test]
    fn in_range_signals_give_full_strength() {
        assert_eq!(strength(&on_signals(), &GateConfig::default()), 1.0);
    }

    #[test]
    fn closed_eye_annihilates() {
        let s = ControlSignals {
            eye_open_ratio: 0.0,
            ..on_signals()
        };
        assert_eq!(strength(&s, &GateConfig::default()), 0.0);
    }

    #[test]
    fn one_midpoint_signal_halves_strength() {
        let c = GateConfig::default();
        let cases = [
            ControlSignals { center_offset: 0.325, ..on_signals() },
            ControlSignals { yaw: -20.0, ..on_signals() },
            ControlSignals { roll: 25.0, ..on_signals() },
            ControlSignals { face_size: 0.1, ..on_signals() },
            ControlSignals { face_size: 0.525, ..on_signals() },
            ControlSignals { eye_open_ratio: 0.2, ..on_signals() },
            ControlSignals { max_flow_mag: 10.0, ..on_signals() },
        ];
        for s in cases {
            assert!((strength(&s, &c) - 0.5).abs() < 1e-6, "{s:?}");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ControlConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"kind\":\"band\""));
        let back: ControlConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let bad: ControlConfig = serde_json::from_str(
            r#"{"gates": {"center_offset": {"kind": "upper", "thresholds": [0.4, 0.25]}}}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err());
    }
}
