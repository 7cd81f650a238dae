//! Closed-form diffusion arithmetic.
//!
//! Steps are 1-based throughout: `t = 1` is the least noisy step and `t = T`
//! the terminal one. `alpha_bar(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Noise coefficients for `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serialized schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Mean coefficients and variance of `q(x_{prev} | x_t, x_0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Schedule from explicit betas, which must lie in (0, 1) and be
    /// non-decreasing.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Invalid(format!("beta {b} outside (0, 1)")));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// Cumulative product up to and including `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `sqrt(alpha_bar_T)`: how much signal survives to the terminal step.
    pub fn terminal_signal(&self) -> f64 {
        self.alpha_bars.last().copied().unwrap_or(1.0).sqrt()
    }

    /// Weight of the clean estimate in the guidance input blend,
    /// `sqrt(1 - alpha_bar_t)`.
    pub fn blend_weight(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// `x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps`
    pub fn forward_sample<T: Real>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(self.check(t)? + 1)?;
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// `x_0 = (x_t - sqrt(1 - ab) eps) / sqrt(ab)`
    pub fn recover_x0<T: Real>(&self, xt: &Tensor<T>, t: usize, eps_hat: &Tensor<T>) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(self.check(t)? + 1)?;
        let (s, inv) = (T::lit((1.0 - ab).sqrt()), T::lit(1.0 / ab.sqrt()));
        xt.zip_map(eps_hat, |x, e| (x - s * e) * inv)
    }

    /// `x_in = w x0_hat + (1 - w) x_t` with `w = sqrt(1 - ab)`.
    pub fn reparam_input<T: Real>(&self, xt: &Tensor<T>, x0_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        reparam_with_weight(xt, x0_hat, self.blend_weight(t)?)
    }

    /// Posterior of the reverse step from `t` to `t_prev < t` (respaced when
    /// `t_prev != t - 1`); `t_prev = 0` yields zero variance.
    pub fn posterior(&self, t: usize, t_prev: usize) -> Result<Posterior> {
        if t_prev >= t {
            return Err(Error::Invalid(format!("posterior needs t_prev < t, got {t_prev} >= {t}")));
        }
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        let beta = 1.0 - ab / ab_prev;
        let alpha = 1.0 - beta;
        Ok(Posterior {
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
            coef_xt: alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            variance: beta * (1.0 - ab_prev) / (1.0 - ab),
        })
    }
}

/// Blend `w x0_hat + (1 - w) x_t`. `w` must lie in `[0, 1]`.
pub fn reparam_with_weight<T: Real>(xt: &Tensor<T>, x0_hat: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Invalid(format!("blend weight {w} outside [0, 1]")));
    }
    let (a, b) = (T::lit(w), T::lit(1.0 - w));
    x0_hat.zip_map(xt, |x0, x| a * x0 + b * x)
}

/// Evenly strided descending timesteps from `T` down to 1 (inclusive).
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Invalid(format!("cannot take {steps} sampling steps from a {total}-step schedule")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| 1 + ((total - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}
