//! Discretized variance-preserving noise schedule.
//!
//! The schedule carries `alpha_t`, `sigma_t` with `alpha_t^2 + sigma_t^2 = 1`
//! on the grid `t = 0..=T`, the per-step variance increments `beta_t`, and
//! finite-difference SDE drift/diffusion rates for the verification harness.
//! Bridge kernels consume only SNR ratios, which stay well-conditioned
//! because `sigma_0` is floored away from zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on `sigma_0`; keeps `SNR_0` finite while leaving `alpha_0 = 1 - 5e-9`.
pub const SIGMA_MIN: f64 = 1e-4;

/// Constructor parameters of a linear-beta VP schedule, as serialized in
/// configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::vp_linear(self.t_max, self.beta_min, self.beta_max)
    }
}

/// Variance-preserving noise schedule on `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct Schedule {
    t_max: usize,
    /// `beta[t]` for `t = 1..=T`; `beta[0]` is unused and set to zero.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl Schedule {
    /// Linear-beta VP schedule: `beta_t` ramps from `beta_min` at `t = 1` to
    /// `beta_max` at `t = T`, `alpha_t = prod_{s<=t} sqrt(1 - beta_s)`.
    pub fn vp_linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2, got {t_max}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut beta = vec![0.0; t_max + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            *b = beta_min + (t - 1) as f64 / (t_max - 1) as f64 * (beta_max - beta_min);
        }
        let mut alpha = vec![0.0; t_max + 1];
        alpha[0] = (1.0 - SIGMA_MIN * SIGMA_MIN).sqrt();
        let mut prod = 1.0;
        for t in 1..=t_max {
            prod *= (1.0 - beta[t]).sqrt();
            alpha[t] = prod;
        }
        Self::assemble(t_max, beta, alpha)
    }

    /// Build a schedule from explicit `alpha_t` values, `t = 0..=T`. Betas are
    /// derived from consecutive ratios; `alpha_0` is capped so that `sigma_0`
    /// respects [`SIGMA_MIN`]. Used for hand-built small instances.
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        if alphas.len() < 3 {
            return Err(Error::InvalidArgument(
                "need at least alpha_0..=alpha_2".into(),
            ));
        }
        let t_max = alphas.len() - 1;
        let mut alpha = alphas.to_vec();
        let cap = (1.0 - SIGMA_MIN * SIGMA_MIN).sqrt();
        if alpha[0] > cap {
            alpha[0] = cap;
        }
        let mut beta = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            let ratio = alpha[t] / alpha[t - 1];
            beta[t] = 1.0 - ratio * ratio;
        }
        Self::assemble(t_max, beta, alpha)
    }

    fn assemble(t_max: usize, beta: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        let mut sigma = vec![0.0; t_max + 1];
        sigma[0] = SIGMA_MIN.max((1.0 - alpha[0] * alpha[0]).max(0.0).sqrt());
        for t in 1..=t_max {
            sigma[t] = (1.0 - alpha[t] * alpha[t]).sqrt();
        }
        let s = Schedule {
            t_max,
            beta,
            alpha,
            sigma,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for t in 0..=self.t_max {
            let vp = self.alpha[t] * self.alpha[t] + self.sigma[t] * self.sigma[t] - 1.0;
            if vp.abs() > 1e-12 {
                return bad(format!("VP identity violated at t={t}: {vp:e}"));
            }
            if t > 0 {
                if self.alpha[t] >= self.alpha[t - 1] {
                    return bad(format!("alpha not strictly decreasing at t={t}"));
                }
                if self.sigma[t] <= self.sigma[t - 1] {
                    return bad(format!("sigma not strictly increasing at t={t}"));
                }
                if !(0.0..1.0).contains(&self.beta[t]) || self.beta[t] == 0.0 {
                    return bad(format!("beta_{t} = {} outside (0, 1)", self.beta[t]));
                }
            }
        }
        if self.sigma[0] < SIGMA_MIN {
            return bad(format!("sigma_0 = {} below floor", self.sigma[0]));
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `alpha_t`. Panics if `t > T`; range errors on user input are raised by
    /// the fallible operations instead.
    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.beta[t]
    }

    /// `SNR_t = alpha_t^2 / sigma_t^2`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0, self.t_max)?;
        Ok(self.alpha[t] * self.alpha[t] / (self.sigma[t] * self.sigma[t]))
    }

    /// `SNR_T / SNR_t`, computed so that the value at `t = T` is exactly 1.
    #[inline]
    pub fn snr_ratio_to_end(&self, t: usize) -> f64 {
        let num = self.alpha[self.t_max] * self.sigma[t];
        let den = self.alpha[t] * self.sigma[self.t_max];
        let r = num / den;
        r * r
    }

    /// Discrete drift scale and diffusion variance rate of the underlying
    /// SDE at interior grid point `t`, via central differences with step
    /// `1/T` on the unit time interval. One Euler step with these rates
    /// reproduces the VP transition kernel to O(dt^2).
    pub fn sde_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t, 1, self.t_max - 1)?;
        Ok(self.sde_coeffs_central(t))
    }

    fn sde_coeffs_central(&self, t: usize) -> (f64, f64) {
        let dt = 1.0 / self.t_max as f64;
        let dlog_alpha = (self.alpha[t + 1].ln() - self.alpha[t - 1].ln()) / (2.0 * dt);
        let var = |u: usize| self.sigma[u] * self.sigma[u];
        let dvar = (var(t + 1) - var(t - 1)) / (2.0 * dt);
        let g2 = dvar - 2.0 * dlog_alpha * var(t);
        (dlog_alpha, g2)
    }

    /// Like [`Schedule::sde_coeffs`] but defined on the full grid, using
    /// one-sided differences at the boundaries. Only the SDE simulator in the
    /// verification suite consumes this.
    pub(crate) fn sde_coeffs_any(&self, t: usize) -> (f64, f64) {
        let dt = 1.0 / self.t_max as f64;
        let var = |u: usize| self.sigma[u] * self.sigma[u];
        if t == 0 {
            let dlog_alpha = (self.alpha[1].ln() - self.alpha[0].ln()) / dt;
            let dvar = (var(1) - var(0)) / dt;
            (dlog_alpha, dvar - 2.0 * dlog_alpha * var(0))
        } else if t >= self.t_max {
            let tm = self.t_max;
            let dlog_alpha = (self.alpha[tm].ln() - self.alpha[tm - 1].ln()) / dt;
            let dvar = (var(tm) - var(tm - 1)) / dt;
            (dlog_alpha, dvar - 2.0 * dlog_alpha * var(tm))
        } else {
            self.sde_coeffs_central(t)
        }
    }

    fn check_t(&self, t: usize, lo: usize, hi: usize) -> Result<()> {
        if t < lo || t > hi {
            return Err(Error::OutOfRange {
                what: "timestep",
                got: t as i64,
                lo: lo as i64,
                hi: hi as i64,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> Schedule {
        Schedule::vp_linear(1000, 1e-4, 0.02).unwrap()
    }

    // Independent product oracle (mpmath, 50 digits):
    //   alpha_1000 = 0.006352818087570022113 for beta linear in [1e-4, 0.02].
    const ALPHA_1000_ORACLE: f64 = 0.006352818087570022;

    #[test]
    fn default_terminal_alpha_matches_product_oracle() {
        let s = default_schedule();
        let rel = (s.alpha(1000) - ALPHA_1000_ORACLE).abs() / ALPHA_1000_ORACLE;
        assert!(rel < 1e-11, "alpha_T = {}, rel err {rel:e}", s.alpha(1000));
    }

    #[test]
    fn alpha_matches_log_space_recomputation() {
        // Same formula, different accumulation route.
        let s = default_schedule();
        let t_max = 1000usize;
        let mut log_sum = 0.0;
        for t in 1..=t_max {
            let beta = 1e-4 + (t - 1) as f64 / (t_max - 1) as f64 * (0.02 - 1e-4);
            log_sum += 0.5 * (1.0 - beta).ln();
            let alpha = log_sum.exp();
            assert!(
                (alpha - s.alpha(t)).abs() < 1e-14 + 1e-13 * alpha,
                "t={t}: {} vs {}",
                alpha,
                s.alpha(t)
            );
        }
    }

    #[test]
    fn construction_guards() {
        assert!(Schedule::vp_linear(1, 1e-4, 0.02).is_err());
        assert!(Schedule::vp_linear(100, 0.0, 0.02).is_err());
        assert!(Schedule::vp_linear(100, 0.02, 1e-4).is_err());
        assert!(Schedule::vp_linear(100, 1e-4, 1.0).is_err());
    }

    #[test]
    fn t0_guard_keeps_snr_finite_and_maximal() {
        let s = default_schedule();
        assert!(s.alpha(0) < 1.0);
        assert!(s.sigma(0) >= SIGMA_MIN && (s.sigma(0) - SIGMA_MIN).abs() < 1e-12);
        let snr0 = s.snr(0).unwrap();
        assert!(snr0.is_finite());
        for t in 1..=1000 {
            assert!(s.snr(t).unwrap() < snr0);
        }
    }

    #[test]
    fn vp_identity_holds_everywhere() {
        let s = default_schedule();
        for t in 0..=1000 {
            let r = s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) - 1.0;
            assert!(r.abs() < 1e-12, "t={t}: {r:e}");
        }
    }

    #[test]
    fn snr_strictly_decreasing_and_ratio_in_unit_interval() {
        let s = default_schedule();
        for t in 1..=1000 {
            assert!(s.snr(t).unwrap() < s.snr(t - 1).unwrap(), "t={t}");
        }
        for t in 0..=1000 {
            let r = s.snr_ratio_to_end(t);
            assert!(r > 0.0 && r <= 1.0, "t={t}: {r}");
        }
        assert_eq!(s.snr_ratio_to_end(1000), 1.0);
    }

    #[test]
    fn snr_arithmetic_example() {
        // alpha = 0.8, sigma = 0.6 -> SNR = 16/9.
        let s = Schedule::from_alphas(&[1.0, 0.9, 0.8, 0.7]).unwrap();
        assert!((s.snr(2).unwrap() - 0.64 / 0.36).abs() < 1e-12);
    }

    #[test]
    fn snr_matches_beta_recomputation() {
        let s = default_schedule();
        // Recompute SNR_t from the beta array alone.
        let mut prod2 = 1.0;
        for t in 1..=1000 {
            prod2 *= 1.0 - s.beta(t);
            let snr = prod2 / (1.0 - prod2);
            let got = s.snr(t).unwrap();
            assert!(
                (got - snr).abs() / snr < 1e-10,
                "t={t}: {got} vs {snr}"
            );
        }
    }

    #[test]
    fn snr_range_errors() {
        let s = default_schedule();
        assert!(s.snr(1001).is_err());
        assert!(s.sde_coeffs(0).is_err());
        assert!(s.sde_coeffs(1000).is_err());
    }

    #[test]
    fn sde_coeff_signs() {
        let s = default_schedule();
        for t in 1..1000 {
            let (f, g2) = s.sde_coeffs(t).unwrap();
            assert!(f <= 0.0, "drift scale positive at t={t}");
            assert!(g2 >= 0.0, "diffusion rate negative at t={t}");
        }
    }

    #[test]
    fn euler_variance_propagation_matches_closed_form() {
        // Propagate Var(z_t | z_0) through the Euler recursion
        //   v <- (1 + f*dt)^2 v + g^2 dt
        // and compare with sigma_t^2 at a few checkpoints. O(dt) scheme at
        // dt = 1/T, so 2% tolerance.
        let s = default_schedule();
        let t_max = 1000;
        let dt = 1.0 / t_max as f64;
        let mut v: f64 = 0.0;
        let mut mean_scale: f64 = 1.0;
        for t in 0..t_max {
            let (f, g2) = s.sde_coeffs_any(t);
            let a = 1.0 + f * dt;
            v = a * a * v + g2 * dt;
            mean_scale *= a;
            let tt = t + 1;
            if tt % 250 == 0 {
                let want = s.sigma(tt) * s.sigma(tt);
                assert!(
                    (v - want).abs() / want < 0.02,
                    "var at t={tt}: {v} vs {want}"
                );
                let want_a = s.alpha(tt);
                assert!(
                    (mean_scale - want_a).abs() / want_a < 0.02,
                    "mean scale at t={tt}: {mean_scale} vs {want_a}"
                );
            }
        }
    }

    #[test]
    fn from_alphas_small_instance() {
        let s = Schedule::from_alphas(&[1.0, 0.8, 0.6, 0.4]).unwrap();
        assert_eq!(s.t_max(), 3);
        for t in 0..=3 {
            let vp = s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t);
            assert!((vp - 1.0).abs() < 1e-12);
        }
        assert!((s.alpha(2) - 0.6).abs() < 1e-15);
    }
}
