use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ParamId, ParamSet};
use crate::numerics::{Real, Tensor};

/// Learning-rate schedule applied per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Step,
    Constant,
}

pub const STEP_EPOCHS: usize = 50;
pub const STEP_FACTOR: f64 = 0.1;

/// `cosine`: `lr₀ ½(1 + cos(π e / total))`; `step`: `lr₀ 0.1^⌊e/50⌋`.
pub fn lr_at(kind: LrSchedule, epoch: usize, total: usize, lr0: f64) -> f64 {
    match kind {
        LrSchedule::Cosine => lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total.max(1) as f64).cos()),
        LrSchedule::Step => lr0 * STEP_FACTOR.powi((epoch / STEP_EPOCHS) as i32),
        LrSchedule::Constant => lr0,
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of the parameters listed in `grads`. Non-finite gradients
    /// abort before anything is modified.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        let next = self.step + 1;
        for (id, g) in grads {
            if g.shape() != params.get(*id).shape() {
                return Err(Error::shape("adam_update", &[g.shape(), params.get(*id).shape()]));
            }
            if !g.is_finite() {
                return Err(Error::NumericalAbort {
                    step: next,
                    reason: format!("non-finite gradient for `{}`", params.name(*id)),
                });
            }
        }
        self.step = next;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(next as i32));
        let c2 = T::of(1.0 - self.beta2.powi(next as i32));
        let eps = T::of(self.eps);
        let lr_t = T::of(lr);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (id, g) in grads {
            let i = id.index();
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            let p = params.get_mut(*id).data_mut();
            for k in 0..n {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] = p[k] * decay - lr_t * mh / (vh.sqrt() + eps);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericalAbort {
                    step: next,
                    reason: format!("parameter `{}` became non-finite", params.name(*id)),
                });
            }
        }
        Ok(())
    }
}
