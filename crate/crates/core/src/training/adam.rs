use std::collections::HashMap;

use indexmap::IndexMap;

use super::TrainConfig;
use crate::eccnet::ModelWeights;
use crate::error::{EccError, Result};
use crate::tensor::Tensor;

/// First and second moment buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam step over every parameter that has a gradient.
/// Parameters without one are left alone.
pub fn adam_update(
    params: &mut ModelWeights,
    grads: &HashMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f32,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(EccError::Weight {
                name: name.clone(),
                detail: format!("gradient shape {:?} does not match {:?}", g.shape(), p.shape()),
            });
        }
        if let Some(m) = state.m.get(name) {
            if m.len() != p.len() {
                return Err(EccError::Weight {
                    name: name.clone(),
                    detail: format!("optimizer state holds {} values, parameter {}", m.len(), p.len()),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
    let c1 = (1.0 - (b1 as f64).powf(t)) as f32;
    let c2 = (1.0 - (b2 as f64).powf(t)) as f32;
    // Fixed iteration order keeps updates independent of hash order.
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
