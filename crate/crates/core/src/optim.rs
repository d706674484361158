//! Adam optimizer with per-parameter moment slots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
}

/// First/second moment estimates and the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over named parameters and their gradients.
///
/// The step is atomic: all gradients are validated before anything mutates,
/// so a non-finite gradient rejects the whole step.
pub fn adam_step<S: Scalar>(
    state: &mut AdamState<S>,
    params: &mut [(String, &mut Tensor<S>)],
    grads: &BTreeMap<String, Vec<S>>,
    learning_rate: f64,
) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::attr(
            "adam",
            format!("learning rate {learning_rate} must be positive and finite"),
        ));
    }
    for (name, param) in params.iter() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient supplied for parameter {name}")))?;
        if grad.len() != param.numel() {
            return Err(Error::shape(
                "adam",
                format!(
                    "gradient of length {} does not match parameter {name} with {} elements",
                    grad.len(),
                    param.numel()
                ),
            ));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.clone() });
        }
    }

    state.step += 1;
    let t = state.step;
    let cfg = state.config;
    let beta1 = S::of(cfg.beta1);
    let beta2 = S::of(cfg.beta2);
    let one_minus_beta1 = S::of(1.0 - cfg.beta1);
    let one_minus_beta2 = S::of(1.0 - cfg.beta2);
    // Bias corrections computed in f64 and applied as inverse factors.
    let corr1 = S::of(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let corr2 = S::of(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let eps = S::of(cfg.epsilon);
    let lr = S::of(learning_rate);

    for (name, param) in params.iter_mut() {
        let grad = &grads[name];
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![S::zero(); param.numel()],
            v: vec![S::zero(); param.numel()],
        });
        if slot.m.len() != param.numel() {
            return Err(Error::shape(
                "adam",
                format!("stale moment slot for {name}: {} vs {}", slot.m.len(), param.numel()),
            ));
        }
        let values = param.values_mut();
        for i in 0..values.len() {
            let g = grad[i];
            slot.m[i] = beta1 * slot.m[i] + one_minus_beta1 * g;
            slot.v[i] = beta2 * slot.v[i] + one_minus_beta2 * g * g;
            let m_hat = slot.m[i] * corr1;
            let v_hat = slot.v[i] * corr2;
            values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
