use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Array, Param};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Biases and normalization parameters are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".norm."))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Array,
    pub second: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamWConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            step: 0,
            config,
            moments: BTreeMap::new(),
        }
    }
}

/// One AdamW update of `params`. A parameter without an entry in `grads`
/// is updated with a zero gradient. Every gradient is checked before any
/// parameter changes.
pub fn adamw_step(
    params: &mut [&mut Param],
    grads: &BTreeMap<String, Array>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    for p in params.iter() {
        if let Some(g) = grads.get(&p.name) {
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { name: p.name.clone() });
            }
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for p in params.iter_mut() {
        let shape = p.value.shape().to_vec();
        let m = state.moments.entry(p.name.clone()).or_insert_with(|| Moments {
            first: Array::zeros(&shape),
            second: Array::zeros(&shape),
        });
        let decay = if decays(&p.name) { 1.0 - lr * weight_decay } else { 1.0 };
        let grad = grads.get(&p.name).map(Array::data);
        let values = p.value.data_mut();
        let (first, second) = (m.first.data_mut(), m.second.data_mut());
        for i in 0..values.len() {
            let g = grad.map_or(0.0, |g| g[i]);
            first[i] = beta1 * first[i] + (1.0 - beta1) * g;
            second[i] = beta2 * second[i] + (1.0 - beta2) * g * g;
            let m_hat = first[i] / c1;
            let v_hat = second[i] / c2;
            values[i] = values[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Euclidean norm of all gradients together.
pub fn global_norm(grads: &BTreeMap<String, Array>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
