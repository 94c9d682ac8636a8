use std::f64::consts::PI;

use super::params::{Gradients, ParamGroup, ParamStore};
use super::NumError;

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// `lr` maps each parameter group to its current learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<(), NumError> {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let entry = store.entry(id);
            if !entry.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let rate = lr(entry.group);
            let n = g.len();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adam_update(
                store.value_mut(id).data_mut(),
                g.data(),
                m,
                v,
                self.step,
                rate,
                self.beta1,
                self.beta2,
                self.eps,
            )?;
        }
        Ok(())
    }
}

/// One bias-corrected Adam update at 1-based step `t`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), NumError> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(NumError::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || m.len() != grads.len() || v.len() != grads.len() {
        return Err(NumError::Shape { op: "adam_step", detail: "parameter/gradient/state lengths differ".into() });
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(NumError::NonFinite { op: "adam_step" });
    }
    Ok(())
}

/// Cosine decay: `lr(t) = lr₀ · ½(1 + cos(πt/T))`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        0.5 * (1.0 + (PI * step as f64 / self.total_steps as f64).cos())
    }

    pub fn lr(&self, base: f64, step: usize) -> f64 {
        base * self.factor(step)
    }
}
