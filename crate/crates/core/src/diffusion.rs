//! Noise schedule, token masking, the forward noising marginal, the
//! Gaussian posterior of the reverse step and an ancestral sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaDirection {
    #[default]
    Increasing,
    Decreasing,
}

/// Serializable schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_direction: BetaDirection,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            beta_direction: BetaDirection::Increasing,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::build(self.steps, self.beta_start, self.beta_end, self.beta_direction)
    }
}

/// Linear β schedule and its derived products. Index `t` runs over `1..=T`;
/// `ᾱ₀ = 1` by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn build(steps: usize, beta_start: f64, beta_end: f64, direction: BetaDirection) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("diffusion needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start)
                }
            })
            .collect();
        if direction == BetaDirection::Decreasing {
            beta.reverse();
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// Cumulative product up to `t`, with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior variance `β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 1 {
            return 0.0;
        }
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients of `x₀` and `x_t` in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        if t == 1 {
            // ᾱ₀ = 1: the posterior is a point mass at x₀
            return (1.0, 0.0);
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }
}

/// Partition of `total` token positions into visible and masked sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    total: usize,
    visible: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskPlan {
    /// Validates that `visible` and `masked` partition `0..total`.
    pub fn new(total: usize, mut visible: Vec<usize>, mut masked: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        masked.sort_unstable();
        let mut seen = vec![false; total];
        for &i in visible.iter().chain(&masked) {
            if i >= total || seen[i] {
                return Err(Error::invalid(format!("position {i} breaks the mask partition of {total}")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || visible.is_empty() {
            return Err(Error::invalid("mask partition must cover all positions with at least one visible"));
        }
        Ok(Self {
            total,
            visible,
            masked,
        })
    }

    pub fn unmasked(total: usize) -> Self {
        Self {
            total,
            visible: (0..total).collect(),
            masked: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.total as f64
    }
}

/// Number of masked tokens for ratio `ratio` over `total` tokens.
pub fn masked_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).floor() as usize
}

/// Masks `floor(ratio · total)` positions chosen uniformly without replacement.
pub fn sample_mask(total: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if total == 0 {
        return Err(Error::invalid("mask over zero tokens"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let n = masked_count(total, ratio);
    let mut masked = rng.choose(total, n);
    masked.sort_unstable();
    let mut is_masked = vec![false; total];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..total).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        total,
        visible,
        masked,
    })
}

/// Closed-form noising marginal `√ᾱ_t x₀ + √(1-ᾱ_t) ε`.
pub fn forward_diffuse<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &Schedule) -> Result<Tensor<T>> {
    schedule.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse", &[x0.shape(), eps.shape()]));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Mean and variance of `q(x_{t-1} | x_t, x₀)`.
pub fn posterior_params<T: Real>(x0: &Tensor<T>, xt: &Tensor<T>, t: usize, schedule: &Schedule) -> Result<(Tensor<T>, f64)> {
    schedule.check(t)?;
    if x0.shape() != xt.shape() {
        return Err(Error::shape("posterior_params", &[x0.shape(), xt.shape()]));
    }
    let (c0, ct) = schedule.posterior_coefficients(t);
    let (c0, ct) = (T::of(c0), T::of(ct));
    let data = x0.data().iter().zip(xt.data()).map(|(&a, &b)| c0 * a + ct * b).collect();
    Ok((Tensor::new(x0.shape().to_vec(), data)?, schedule.posterior_variance(t)))
}

/// A network predicting the clean sample from noisy visible tokens.
pub trait Denoiser {
    /// `x_t` holds the visible tokens `[visible, channels]`; returns the full
    /// reconstruction `[total, channels]` in grid order.
    fn predict_x0(&mut self, x_t: &Tensor<f64>, t: usize, plan: &MaskPlan) -> Result<Tensor<f64>>;
}

impl<F> Denoiser for F
where
    F: FnMut(&Tensor<f64>, usize, &MaskPlan) -> Result<Tensor<f64>>,
{
    fn predict_x0(&mut self, x_t: &Tensor<f64>, t: usize, plan: &MaskPlan) -> Result<Tensor<f64>> {
        self(x_t, t, plan)
    }
}

#[derive(Clone, Debug)]
pub struct ReverseStep {
    pub t: usize,
    pub mean: Tensor<f64>,
    pub variance: f64,
}

#[derive(Clone, Debug)]
pub struct ReverseOutput {
    /// Final `[total, channels]` reconstruction.
    pub reconstruction: Tensor<f64>,
    pub steps: Vec<ReverseStep>,
}

/// Ancestral sampling with x₀-prediction, starting from `x_start` (the
/// visible tokens at step `T`): at each `t` predict `x̂₀ = f(x_t, t)` and draw
/// `x_{t-1} ~ N(μ̃_t(x_t, x̂₀), β̃_t I)`. The step `t = 1` returns `x̂₀`.
pub fn sample_reverse<D: Denoiser>(
    model: &mut D,
    schedule: &Schedule,
    plan: &MaskPlan,
    x_start: Tensor<f64>,
    rng: &mut Rng,
) -> Result<ReverseOutput> {
    if x_start.shape().len() != 2 || x_start.shape()[0] != plan.visible().len() {
        return Err(Error::shape("sample_reverse", &[x_start.shape(), &[plan.visible().len()]]));
    }
    let c = x_start.shape()[1];
    let mut x = x_start;
    let mut steps = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let full = model.predict_x0(&x, t, plan)?;
        if full.shape() != [plan.total(), c] {
            return Err(Error::shape("sample_reverse", &[full.shape(), &[plan.total(), c]]));
        }
        if t == 1 {
            return Ok(ReverseOutput {
                reconstruction: full,
                steps,
            });
        }
        let vis: Vec<f64> = plan
            .visible()
            .iter()
            .flat_map(|&p| full.row(p).to_vec())
            .collect();
        let x0_hat = Tensor::new(vec![plan.visible().len(), c], vis)?;
        let (mean, variance) = posterior_params(&x0_hat, &x, t, schedule)?;
        let sd = variance.sqrt();
        let noise: Tensor<f64> = rng.gaussian(mean.shape());
        let next = mean
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&m, &z)| m + sd * z)
            .collect();
        x = Tensor::new(mean.shape().to_vec(), next)?;
        steps.push(ReverseStep { t, mean, variance });
    }
    unreachable!("schedule has at least one step")
}

/// [`sample_reverse`] from `x_T ~ N(0, I)`.
pub fn sample_reverse_from_noise<D: Denoiser>(
    model: &mut D,
    schedule: &Schedule,
    plan: &MaskPlan,
    channels: usize,
    rng: &mut Rng,
) -> Result<ReverseOutput> {
    let start = rng.gaussian(&[plan.visible().len(), channels]);
    sample_reverse(model, schedule, plan, start, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> Schedule {
        Schedule::build(50, 1e-4, 0.02, BetaDirection::Increasing).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = Schedule::build(1, 1e-4, 0.02, BetaDirection::Increasing).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn linear_interpolation_value() {
        let s = default_schedule();
        let want = 1e-4 + 24.0 / 49.0 * (0.02 - 1e-4);
        assert!((s.beta(25) - want).abs() < 1e-15);
        assert!((s.beta(25) - 0.009847).abs() < 1e-6);
    }

    #[test]
    fn alpha_bar_matches_independent_product() {
        let s = default_schedule();
        let mut prod = 1.0;
        for t in 1..=50 {
            prod *= 1.0 - (1e-4 + (t - 1) as f64 / 49.0 * (0.02 - 1e-4));
        }
        assert!((s.alpha_bar(50) - prod).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn decreasing_direction_reverses_betas() {
        let s = Schedule::build(5, 0.01, 0.05, BetaDirection::Decreasing).unwrap();
        assert!((s.beta(1) - 0.05).abs() < 1e-15);
        assert!((s.beta(5) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(Schedule::build(0, 1e-4, 0.02, BetaDirection::Increasing).is_err());
        assert!(Schedule::build(10, 0.0, 0.02, BetaDirection::Increasing).is_err());
        assert!(Schedule::build(10, 0.03, 0.02, BetaDirection::Increasing).is_err());
        assert!(Schedule::build(10, 0.01, 1.0, BetaDirection::Increasing).is_err());
    }

    #[test]
    fn posterior_variance_is_bounded_by_beta() {
        let s = default_schedule();
        for t in 1..=50 {
            let v = s.posterior_variance(t);
            assert!((0.0..=s.beta(t)).contains(&v));
        }
    }

    #[test]
    fn mask_of_121_at_seventy_percent() {
        let plan = sample_mask(121, 0.7, &mut Rng::new(0)).unwrap();
        assert_eq!(plan.masked().len(), 84);
        assert_eq!(plan.visible().len(), 37);
        let all = sample_mask(10, 0.0, &mut Rng::new(0)).unwrap();
        assert_eq!(all.visible().len(), 10);
        assert!(sample_mask(10, 1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn mask_plan_validation() {
        assert!(MaskPlan::new(4, vec![0, 1], vec![2, 3]).is_ok());
        assert!(MaskPlan::new(4, vec![0, 1], vec![1, 3]).is_err());
        assert!(MaskPlan::new(4, vec![0, 1], vec![3]).is_err());
        assert!(MaskPlan::new(4, vec![0, 1], vec![2, 4]).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = default_schedule();
        let x0 = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let zero = Tensor::zeros(vec![3]);
        let eps = Tensor::new(vec![3], vec![0.3, 0.1, -1.0]).unwrap();
        let ab = s.alpha_bar(7);
        let a = forward_diffuse(&x0, 7, &zero, &s).unwrap();
        assert!(a.data().iter().zip(x0.data()).all(|(y, x)| (y - ab.sqrt() * x).abs() < 1e-15));
        let b = forward_diffuse(&zero, 7, &eps, &s).unwrap();
        assert!(b.data().iter().zip(eps.data()).all(|(y, e)| (y - (1.0 - ab).sqrt() * e).abs() < 1e-15));
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 51, &eps, &s).is_err());
    }

    #[test]
    fn posterior_collapses_at_first_step() {
        let s = default_schedule();
        let x0 = Tensor::new(vec![2], vec![0.7, -0.2]).unwrap();
        let xt = Tensor::new(vec![2], vec![5.0, 3.0]).unwrap();
        let (mean, var) = posterior_params(&x0, &xt, 1, &s).unwrap();
        assert_eq!(mean, x0);
        assert_eq!(var, 0.0);
        let z: Tensor<f64> = Tensor::zeros(vec![2]);
        let (m0, _) = posterior_params(&z, &z, 30, &s).unwrap();
        assert!(m0.data().iter().all(|&v| v == 0.0));
    }
}
