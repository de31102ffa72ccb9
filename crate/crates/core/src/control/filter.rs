use serde::{Deserialize, Serialize};

use crate::eccnet::EccOutput;
use crate::error::{EccError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub alpha: f32,
    pub beta: f32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.1 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha <= 1.0 && (0.0..=2.0).contains(&self.beta) {
            Ok(())
        } else {
            Err(EccError::Config(format!(
                "filter needs 0 < alpha <= 1 and 0 <= beta <= 2, got {} and {}",
                self.alpha, self.beta
            )))
        }
    }
}

/// Per-element position and velocity estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlphaBetaState {
    pub position: Vec<f32>,
    pub velocity: Vec<f32>,
    pub shape: Vec<usize>,
    pub initialized: bool,
}

impl AlphaBetaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Advances the filter by one frame and returns the position estimate. A
/// first observation, or one whose shape differs from the last, is adopted
/// as is with zero velocity.
pub fn alpha_beta_update(
    state: &mut AlphaBetaState,
    observation: &Tensor<f32>,
    alpha: f32,
    beta: f32,
) -> Tensor<f32> {
    let z = observation.data();
    if !state.initialized || state.shape != observation.shape() {
        state.position = z.to_vec();
        state.velocity = vec![0.0; z.len()];
        state.shape = observation.shape().to_vec();
        state.initialized = true;
    } else {
        for ((x, v), &zi) in state.position.iter_mut().zip(state.velocity.iter_mut()).zip(z) {
            let pred = *x + *v;
            let r = zi - pred;
            *x = pred + alpha * r;
            *v += beta * r;
        }
    }
    Tensor::new(state.shape.clone(), state.position.clone()).expect("state shape")
}

/// Filter state for one stream: flow and brightness filtered alike.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputFilter {
    pub flow: AlphaBetaState,
    pub brightness: AlphaBetaState,
}

impl OutputFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, out: &EccOutput, config: &FilterConfig) -> Result<EccOutput> {
        config.validate()?;
        Ok(EccOutput {
            flow: alpha_beta_update(&mut self.flow, &out.flow, config.alpha, config.beta),
            brightness: alpha_beta_update(&mut self.brightness, &out.brightness, config.alpha, config.beta)
                .map(|b| b.clamp(0.0, 1.0)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::full([1], v)
    }

    #[test]
    fn constant_input_passes_unchanged() {
        let mut s = AlphaBetaState::new();
        for _ in 0..20 {
            assert_eq!(alpha_beta_update(&mut s, &scalar(0.7), 0.5, 0.1).data()[0], 0.7);
        }
    }

    #[test]
    fn shape_change_resets() {
        let mut s = AlphaBetaState::new();
        alpha_beta_update(&mut s, &scalar(1.0), 0.5, 0.1);
        alpha_beta_update(&mut s, &scalar(2.0), 0.5, 0.1);
        let out = alpha_beta_update(&mut s, &Tensor::full([2], 5.0), 0.5, 0.1);
        assert_eq!(out.data(), &[5.0, 5.0]);
        assert_eq!(s.velocity, vec![0.0, 0.0]);
    }
}
