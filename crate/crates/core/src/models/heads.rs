//! Image projection head, learnable temperature and the linear classifier
//! used when the text branch is disabled.

use super::params::{ParamId, ParamSet};
use crate::numerics::{Real, Tensor};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// Temperature stored as `log(1/τ)` in a one-element tensor.
#[derive(Clone, Copy, Debug)]
pub struct Temperature {
    pub id: ParamId,
}

impl Temperature {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str) -> Self {
        let id = ps.add(name, Tensor::full(vec![1], T::of((1.0 / TAU_INIT).ln())));
        Self { id }
    }

    pub fn tau<T: Real>(&self, ps: &ParamSet<T>) -> f64 {
        (-ps.get(self.id).data()[0].f64()).exp()
    }

    /// Clamps `τ` into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp<T: Real>(&self, ps: &mut ParamSet<T>) {
        let (lo, hi) = ((1.0 / TAU_MAX).ln(), (1.0 / TAU_MIN).ln());
        let v = &mut ps.get_mut(self.id).data_mut()[0];
        *v = T::of(v.f64().clamp(lo, hi));
    }

    pub fn set_tau<T: Real>(&self, ps: &mut ParamSet<T>, tau: f64) {
        ps.get_mut(self.id).data_mut()[0] = T::of((1.0 / tau).ln());
        self.clamp(ps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_starts_at_init_and_clamps() {
        let mut ps = ParamSet::<f64>::new();
        let t = Temperature::new(&mut ps, "logit_scale");
        assert!((t.tau(&ps) - TAU_INIT).abs() < 1e-12);
        ps.get_mut(t.id).data_mut()[0] = 50.0;
        t.clamp(&mut ps);
        assert!((t.tau(&ps) - TAU_MIN).abs() < 1e-12);
        t.set_tau(&mut ps, 1e6);
        assert!((t.tau(&ps) - TAU_MAX).abs() < 1e-9);
    }
}
