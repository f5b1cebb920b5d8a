//! Adam optimizer with bias correction, plus the two-phase learning-rate
//! schedule used by both training stages (flat, then linear decay).

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub step_count: u64,
    /// Per-parameter moment tensors, in the order of `param_ids`.
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    param_ids: Vec<ParamId>,
}

impl AdamState {
    pub fn new(store: &ParamStore, param_ids: Vec<ParamId>, lr: f64) -> Self {
        let first_moment = param_ids
            .iter()
            .map(|id| Tensor::zeros(store.get(*id).shape()))
            .collect();
        let second_moment = param_ids
            .iter()
            .map(|id| Tensor::zeros(store.get(*id).shape()))
            .collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            step_count: 0,
            first_moment,
            second_moment,
            param_ids,
        }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// One bias-corrected Adam step. `grads` must align with `param_ids`;
    /// a `None` gradient leaves that parameter untouched by the gradient but
    /// still advances its moments with zeros.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.param_ids.len() {
            return Err(Error::invalid(
                "adam_update",
                format!("{} grads for {} params", grads.len(), self.param_ids.len()),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, id) in self.param_ids.iter().enumerate() {
            let param = store.get_mut(*id);
            if let Some(g) = &grads[slot] {
                if g.shape() != param.shape() {
                    return Err(Error::shape("adam_update", param.shape(), g.shape()));
                }
            }
            let m = self.first_moment[slot].data_mut();
            let v = self.second_moment[slot].data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                let gi = grads[slot].as_ref().map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps_adam);
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based `epoch`: `lr0` through `flat_epochs`, then
/// linear decay reaching `lr_final` at `total_epochs`.
pub fn lr_schedule(epoch: usize, lr0: f64, lr_final: f64, flat_epochs: usize, total_epochs: usize) -> f64 {
    if epoch <= flat_epochs || total_epochs <= flat_epochs {
        return lr0;
    }
    let e = epoch.min(total_epochs);
    let frac = (e - flat_epochs) as f64 / (total_epochs - flat_epochs) as f64;
    lr0 + (lr_final - lr0) * frac
}
