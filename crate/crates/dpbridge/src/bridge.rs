//! Closed-form bridge mathematics over a VP reference process.
//!
//! A bridge pins the process to hit `z_T` exactly at the terminal step. Its
//! forward kernel is Gaussian,
//!
//! ```text
//! q(z_t | z_0, z_T) = N(m_t z_0 + n_t z_T, sbar_t^2 I)
//! m_t = alpha_t (1 - r_t),   n_t = r_t alpha_t / alpha_T,
//! sbar_t = sigma_t sqrt(1 - r_t),   r_t = SNR_T / SNR_t
//! ```
//!
//! and everything else here is exact Gaussian algebra on top of it: the
//! stepwise transition `q(z_t | z_{t-1}, z_T)`, the reverse posterior
//! `q(z_{t-1} | z_t, z_0, z_T)` with mean `k1 z_t + k2 z_0 + k3 z_T` and
//! std `post_std`, the distribution-aligned normalization that maps a bridge
//! state onto a unit-marginal VP state, the `z0` recovery from a noise
//! prediction, and the conditioning drift that steers the reference SDE into
//! its terminal point. The verification suite re-derives all of it by
//! independent routes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

/// Smallest `m_t` for which `z0` recovery is attempted.
pub const M_GUARD: f64 = 1e-4;
/// Smallest normalization denominator accepted by DAN.
pub const DAN_GUARD: f64 = 1e-8;
/// Negative `delta_t^2` beyond this magnitude aborts coefficient
/// construction; smaller excursions are clamped to zero as float noise.
pub const DELTA_CLAMP: f64 = 1e-12;

/// Per-timestep coefficient tables of the bridge kernels.
///
/// Index conventions: marginals (`m`, `n`, `sbar`) live on `t = 0..=T`;
/// stepwise (`a`, `b`, `delta`) and posterior (`k1..k3`, `post_std`) entries
/// at index `t` describe the pair `(t-1, t)` and are valid for `t = 1..=T`
/// (index 0 unused).
#[derive(Debug, Clone)]
pub struct BridgeCoefficients {
    t_max: usize,
    pub(crate) m: Vec<f64>,
    pub(crate) n: Vec<f64>,
    pub(crate) sbar: Vec<f64>,
    pub(crate) a: Vec<f64>,
    pub(crate) b: Vec<f64>,
    pub(crate) delta: Vec<f64>,
    pub(crate) k1: Vec<f64>,
    pub(crate) k2: Vec<f64>,
    pub(crate) k3: Vec<f64>,
    pub(crate) post_std: Vec<f64>,
}

impl BridgeCoefficients {
    pub fn from_schedule(s: &Schedule) -> Result<Self> {
        let t_max = s.t_max();
        let alpha_t_max = s.alpha(t_max);

        let mut m = vec![0.0; t_max + 1];
        let mut n = vec![0.0; t_max + 1];
        let mut sbar = vec![0.0; t_max + 1];
        for t in 0..=t_max {
            let r = s.snr_ratio_to_end(t);
            m[t] = s.alpha(t) * (1.0 - r);
            n[t] = r * s.alpha(t) / alpha_t_max;
            sbar[t] = s.sigma(t) * (1.0 - r).max(0.0).sqrt();
        }
        // Terminal pinning must be exact, not merely close.
        m[t_max] = 0.0;
        n[t_max] = 1.0;
        sbar[t_max] = 0.0;

        let mut a = vec![0.0; t_max + 1];
        let mut b = vec![0.0; t_max + 1];
        let mut delta = vec![0.0; t_max + 1];
        let mut k1 = vec![0.0; t_max + 1];
        let mut k2 = vec![0.0; t_max + 1];
        let mut k3 = vec![0.0; t_max + 1];
        let mut post_std = vec![0.0; t_max + 1];

        for t in 1..=t_max {
            if m[t - 1] == 0.0 {
                return Err(Error::DegenerateStep(t));
            }
            a[t] = m[t] / m[t - 1];
            b[t] = n[t] - a[t] * n[t - 1];
            let mut d2 = sbar[t] * sbar[t] - a[t] * a[t] * sbar[t - 1] * sbar[t - 1];
            if d2 < 0.0 {
                if d2 < -DELTA_CLAMP {
                    return Err(Error::BridgeIncompatible(format!(
                        "delta_t^2 = {d2:e} at t={t}"
                    )));
                }
                d2 = 0.0;
            }
            delta[t] = d2.sqrt();

            if t == t_max {
                // z_T is pinned, so conditioning on it is vacuous: the
                // posterior over z_{T-1} is the forward marginal itself.
                k1[t] = 0.0;
                k2[t] = m[t - 1];
                k3[t] = n[t - 1];
                post_std[t] = sbar[t - 1];
            } else {
                let sb2 = sbar[t] * sbar[t];
                let sb2_prev = sbar[t - 1] * sbar[t - 1];
                k1[t] = sb2_prev / sb2 * a[t];
                k2[t] = d2 / sb2 * m[t - 1];
                k3[t] = d2 / sb2 * n[t - 1] - sb2_prev / sb2 * a[t] * b[t];
                post_std[t] = (sb2_prev / sb2 * d2).sqrt();
            }
        }

        Ok(BridgeCoefficients {
            t_max,
            m,
            n,
            sbar,
            a,
            b,
            delta,
            k1,
            k2,
            k3,
            post_std,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    #[inline]
    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    #[inline]
    pub fn n(&self, t: usize) -> f64 {
        self.n[t]
    }

    /// Bridge marginal std at `t`.
    #[inline]
    pub fn sbar(&self, t: usize) -> f64 {
        self.sbar[t]
    }

    #[inline]
    pub fn k1(&self, t: usize) -> f64 {
        self.k1[t]
    }

    #[inline]
    pub fn k2(&self, t: usize) -> f64 {
        self.k2[t]
    }

    #[inline]
    pub fn k3(&self, t: usize) -> f64 {
        self.k3[t]
    }

    #[inline]
    pub fn post_std(&self, t: usize) -> f64 {
        self.post_std[t]
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

    /// Mean of the forward kernel, `m_t z0 + n_t zT`.
    pub fn forward_mean(&self, t: usize, z0: &Tensor, z_end: &Tensor) -> Result<Tensor> {
        self.check_t(t, 0, self.t_max)?;
        Tensor::lincomb(&[(self.m[t], z0), (self.n[t], z_end)])
    }

    /// Draw `z_t ~ q(z_t | z0, zT)`; returns the state and the noise that
    /// produced it (the regression target of the likelihood loss). At
    /// `t = T` the state is `zT` bit-exactly.
    pub fn forward_sample(
        &self,
        t: usize,
        z0: &Tensor,
        z_end: &Tensor,
        rng: &mut Rng,
    ) -> Result<(Tensor, Tensor)> {
        self.check_t(t, 1, self.t_max)?;
        if !z0.same_shape(z_end) {
            return Err(Error::ShapeMismatch(format!(
                "forward_sample: z0 {:?} vs zT {:?}",
                z0.shape(),
                z_end.shape()
            )));
        }
        let eps = Tensor::randn(rng, z0.shape())?;
        if t == self.t_max {
            return Ok((z_end.clone(), eps));
        }
        let z_t = Tensor::lincomb(&[(self.m[t], z0), (self.n[t], z_end), (self.sbar[t], &eps)])?;
        Ok((z_t, eps))
    }

    /// Coefficients `(a_t, b_t, delta_t)` of the stepwise transition
    /// `q(z_t | z_{t-1}, zT) = N(a_t z_{t-1} + b_t zT, delta_t^2 I)`.
    pub fn step_kernel(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t, 1, self.t_max)?;
        if self.m[t - 1] == 0.0 {
            return Err(Error::DegenerateStep(t));
        }
        Ok((self.a[t], self.b[t], self.delta[t]))
    }

    /// Posterior coefficients `(k1, k2, k3, post_std)` for the transition
    /// `t -> t-1`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64, f64, f64)> {
        self.check_t(t, 1, self.t_max)?;
        Ok((self.k1[t], self.k2[t], self.k3[t], self.post_std[t]))
    }

    /// Gaussian parameters of `q(z_{t-1} | z_t, z0, zT)` with `z0` replaced
    /// by an estimate.
    pub fn posterior(
        &self,
        t: usize,
        z_t: &Tensor,
        z0_hat: &Tensor,
        z_end: &Tensor,
    ) -> Result<(Tensor, f64)> {
        let (k1, k2, k3, std) = self.posterior_coeffs(t)?;
        let mean = Tensor::lincomb(&[(k1, z_t), (k2, z0_hat), (k3, z_end)])?;
        Ok((mean, std))
    }

    /// Posterior coefficients for an arbitrary gap `t_lo < t_hi`: the same
    /// algebra as [`BridgeCoefficients::posterior_coeffs`] applied to
    /// `q(z_{t_lo} | z_{t_hi}, z0, zT)`. Thinned-grid sampling uses the std
    /// as its maximal stochasticity.
    pub fn gap_posterior_coeffs(
        &self,
        t_lo: usize,
        t_hi: usize,
    ) -> Result<(f64, f64, f64, f64)> {
        self.check_t(t_hi, 1, self.t_max)?;
        if t_lo >= t_hi {
            return Err(Error::InvalidArgument(format!(
                "gap posterior needs t_lo < t_hi, got {t_lo} >= {t_hi}"
            )));
        }
        if self.m[t_lo] == 0.0 {
            return Err(Error::DegenerateStep(t_hi));
        }
        let a = self.m[t_hi] / self.m[t_lo];
        let b = self.n[t_hi] - a * self.n[t_lo];
        let sb2_lo = self.sbar[t_lo] * self.sbar[t_lo];
        let sb2_hi = self.sbar[t_hi] * self.sbar[t_hi];
        let mut d2 = sb2_hi - a * a * sb2_lo;
        if d2 < 0.0 {
            if d2 < -DELTA_CLAMP {
                return Err(Error::BridgeIncompatible(format!(
                    "gap delta^2 = {d2:e} for ({t_lo}, {t_hi})"
                )));
            }
            d2 = 0.0;
        }
        if t_hi == self.t_max {
            return Ok((0.0, self.m[t_lo], self.n[t_lo], self.sbar[t_lo]));
        }
        let k1 = sb2_lo / sb2_hi * a;
        let k2 = d2 / sb2_hi * self.m[t_lo];
        let k3 = d2 / sb2_hi * self.n[t_lo] - sb2_lo / sb2_hi * a * b;
        let std = (sb2_lo / sb2_hi * d2).sqrt();
        Ok((k1, k2, k3, std))
    }

    /// DAN coefficients `(c_t, s_t)` with `c_t^2 + s_t^2 = 1`: the normalized
    /// state is distributed as `c_t z0 + s_t eps`, i.e. a unit-marginal VP
    /// state.
    pub fn dan_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t, 1, self.t_max - 1)?;
        let den = (self.m[t] * self.m[t] + self.sbar[t] * self.sbar[t]).sqrt();
        if den < DAN_GUARD {
            return Err(Error::DanSingular(t));
        }
        Ok((self.m[t] / den, self.sbar[t] / den))
    }

    /// Distribution-aligned normalization: map a bridge state onto the form
    /// a VP-trained denoiser expects, `z' = (z_t - n_t zT) / sqrt(m_t^2 +
    /// sbar_t^2)`.
    pub fn dan_normalize(&self, t: usize, z_t: &Tensor, z_end: &Tensor) -> Result<Tensor> {
        self.check_t(t, 1, self.t_max - 1)?;
        let den = (self.m[t] * self.m[t] + self.sbar[t] * self.sbar[t]).sqrt();
        if den < DAN_GUARD {
            return Err(Error::DanSingular(t));
        }
        Tensor::lincomb(&[(1.0 / den, z_t), (-self.n[t] / den, z_end)])
    }

    /// Invert the forward kernel given a noise estimate:
    /// `z0_hat = (z_t - n_t zT - sbar_t eps_hat) / m_t`.
    pub fn recover_z0(
        &self,
        t: usize,
        z_t: &Tensor,
        z_end: &Tensor,
        eps_hat: &Tensor,
    ) -> Result<Tensor> {
        self.check_t(t, 1, self.t_max)?;
        let m = self.m[t];
        if m < M_GUARD {
            return Err(Error::RecoverySingular {
                t,
                m,
                guard: M_GUARD,
            });
        }
        Tensor::lincomb(&[
            (1.0 / m, z_t),
            (-self.n[t] / m, z_end),
            (-self.sbar[t] / m, eps_hat),
        ])
    }
}

/// Conditioning drift `h(z_t, t, x, T) = grad_{z_t} log q(z_T = x | z_t)` of
/// the VP reference process, in closed form:
/// `h = c (x - c z_t) / (sigma_T^2 - c^2 sigma_t^2)` with `c = alpha_T /
/// alpha_t`. Adding `g^2 h` to the drift steers every trajectory into `x`.
pub fn h_drift(s: &Schedule, t: usize, z_t: &Tensor, x: &Tensor) -> Result<Tensor> {
    if t >= s.t_max() {
        return Err(Error::OutOfRange {
            what: "timestep",
            got: t as i64,
            lo: 0,
            hi: s.t_max() as i64 - 1,
        });
    }
    if !z_t.same_shape(x) {
        return Err(Error::ShapeMismatch(format!(
            "h_drift: z_t {:?} vs x {:?}",
            z_t.shape(),
            x.shape()
        )));
    }
    let c = s.alpha(s.t_max()) / s.alpha(t);
    let den = s.sigma(s.t_max()) * s.sigma(s.t_max()) - c * c * s.sigma(t) * s.sigma(t);
    if den <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "h_drift denominator {den:e} at t={t}"
        )));
    }
    Tensor::lincomb(&[(c / den, x), (-c * c / den, z_t)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_pair() -> (Schedule, BridgeCoefficients) {
        let s = Schedule::vp_linear(1000, 1e-4, 0.02).unwrap();
        let bc = BridgeCoefficients::from_schedule(&s).unwrap();
        (s, bc)
    }

    #[test]
    fn terminal_coefficients_pin_endpoint() {
        let (_, bc) = default_pair();
        assert_eq!(bc.m(1000), 0.0);
        assert_eq!(bc.n(1000), 1.0);
        assert_eq!(bc.sbar(1000), 0.0);
    }

    #[test]
    fn small_t_limit_recovers_vp_marginal() {
        let (s, bc) = default_pair();
        // r_0 is ~4e-13, so m_0 ~ alpha_0 and n_0 ~ 0.
        assert!((bc.m(0) - s.alpha(0)).abs() < 1e-9);
        assert!(bc.n(0) < 1e-9);
    }

    #[test]
    fn direct_substitution_example() {
        // A VP point with alpha_t = 0.9 and r_t = 1/2 gives m_t = 0.45 and
        // sbar_t = sigma_t / sqrt(2). Build a 2-step schedule achieving that
        // ratio exactly at t = 1 by solving for the terminal alpha.
        let alpha1: f64 = 0.9;
        let sigma1_sq = 1.0 - alpha1 * alpha1;
        // r = (alpha2^2 / (1 - alpha2^2)) / (alpha1^2 / sigma1^2) = 1/2
        let snr1 = alpha1 * alpha1 / sigma1_sq;
        let target = 0.5 * snr1;
        let alpha2 = (target / (1.0 + target)).sqrt();
        let s = Schedule::from_alphas(&[1.0, alpha1, alpha2]).unwrap();
        let bc = BridgeCoefficients::from_schedule(&s).unwrap();
        assert!((s.snr_ratio_to_end(1) - 0.5).abs() < 1e-12);
        assert!((bc.m(1) - 0.45).abs() < 1e-12);
        assert!((bc.sbar(1) - sigma1_sq.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn coefficients_match_independent_recomputation() {
        // Second implementation of the same formulas, written against the
        // schedule directly rather than the table builder.
        let (s, bc) = default_pair();
        let t_max = s.t_max();
        for t in 0..=t_max {
            let snr_t = s.alpha(t) * s.alpha(t) / (s.sigma(t) * s.sigma(t));
            let snr_end = s.alpha(t_max) * s.alpha(t_max) / (s.sigma(t_max) * s.sigma(t_max));
            let r = snr_end / snr_t;
            let m = s.alpha(t) * (1.0 - r);
            let n = r * s.alpha(t) / s.alpha(t_max);
            let sbar = s.sigma(t) * (1.0 - r).sqrt();
            assert!((bc.m(t) - m).abs() < 1e-14 + 1e-12 * m.abs(), "m at t={t}");
            assert!((bc.n(t) - n).abs() < 1e-14 + 1e-12 * n.abs(), "n at t={t}");
            assert!(
                (bc.sbar(t) - sbar).abs() < 1e-14 + 1e-12 * sbar.abs(),
                "sbar at t={t}"
            );
        }
    }

    #[test]
    fn forward_sample_endpoint_is_bit_exact() {
        let (_, bc) = default_pair();
        let mut rng = Rng::new(1);
        let z0 = Tensor::randn(&mut rng, &[8]).unwrap();
        let z_end = Tensor::randn(&mut rng, &[8]).unwrap();
        let (z_t, _) = bc.forward_sample(1000, &z0, &z_end, &mut rng).unwrap();
        assert_eq!(z_t, z_end);
    }

    #[test]
    fn forward_mean_is_noise_free_state() {
        let (_, bc) = default_pair();
        let mut rng = Rng::new(2);
        let z0 = Tensor::randn(&mut rng, &[8]).unwrap();
        let z_end = Tensor::randn(&mut rng, &[8]).unwrap();
        let t = 400;
        let mean = bc.forward_mean(t, &z0, &z_end).unwrap();
        for i in 0..8 {
            let want = bc.m(t) * z0.data()[i] + bc.n(t) * z_end.data()[i];
            assert_eq!(mean.data()[i], want);
        }
    }

    #[test]
    fn forward_sample_moments_match_kernel() {
        // Monte-Carlo check of mean and variance at a mid timestep.
        let (_, bc) = default_pair();
        let mut rng = Rng::new(3);
        let dim = 4;
        let z0 = Tensor::from_vec(&[dim], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let z_end = Tensor::from_vec(&[dim], vec![-0.5, 1.0, 0.0, 1.5]).unwrap();
        let t = 500;
        let n_draws = 100_000;
        let mut sums = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for _ in 0..n_draws {
            let (z_t, _) = bc.forward_sample(t, &z0, &z_end, &mut rng).unwrap();
            for i in 0..dim {
                sums[i] += z_t.data()[i];
                sq[i] += z_t.data()[i] * z_t.data()[i];
            }
        }
        let se_mean = bc.sbar(t) / (n_draws as f64).sqrt();
        let var_want = bc.sbar(t) * bc.sbar(t);
        let se_var = var_want * (2.0 / n_draws as f64).sqrt();
        for i in 0..dim {
            let mean = sums[i] / n_draws as f64;
            let want = bc.m(t) * z0.data()[i] + bc.n(t) * z_end.data()[i];
            assert!((mean - want).abs() < 3.0 * se_mean, "mean dim {i}");
            let var = sq[i] / n_draws as f64 - mean * mean;
            assert!((var - var_want).abs() < 3.0 * se_var, "var dim {i}");
        }
    }

    #[test]
    fn step_kernel_chain_identities() {
        let (_, bc) = default_pair();
        for t in 1..=1000 {
            let (a, b, delta) = bc.step_kernel(t).unwrap();
            let m_err = bc.m(t) - a * bc.m(t - 1);
            let n_err = bc.n(t) - (a * bc.n(t - 1) + b);
            let v_err =
                bc.sbar(t) * bc.sbar(t) - (a * a * bc.sbar(t - 1) * bc.sbar(t - 1) + delta * delta);
            assert!(m_err.abs() < 1e-12, "m chain at t={t}: {m_err:e}");
            assert!(n_err.abs() < 1e-12, "n chain at t={t}: {n_err:e}");
            assert!(v_err.abs() < 1e-12, "var chain at t={t}: {v_err:e}");
            assert!(delta >= 0.0);
        }
    }

    #[test]
    fn step_kernel_composition_reproduces_marginals() {
        // Iterate mean/variance through the stepwise kernel from t=0.
        let (_, bc) = default_pair();
        let mut coef_z0 = bc.m(0);
        let mut coef_end = bc.n(0);
        let mut var = bc.sbar(0) * bc.sbar(0);
        for t in 1..=1000 {
            let (a, b, delta) = bc.step_kernel(t).unwrap();
            coef_z0 *= a;
            coef_end = a * coef_end + b;
            var = a * a * var + delta * delta;
            assert!((coef_z0 - bc.m(t)).abs() < 1e-10, "t={t}");
            assert!((coef_end - bc.n(t)).abs() < 1e-10, "t={t}");
            assert!((var - bc.sbar(t) * bc.sbar(t)).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn posterior_noiseless_fixed_line() {
        // States on the noise-free line map onto the line at t-1.
        let (_, bc) = default_pair();
        let mut rng = Rng::new(4);
        let z0 = Tensor::randn(&mut rng, &[6]).unwrap();
        let z_end = Tensor::randn(&mut rng, &[6]).unwrap();
        for t in 1..=1000 {
            let z_t = bc.forward_mean(t, &z0, &z_end).unwrap();
            let (mean, _) = bc.posterior(t, &z_t, &z0, &z_end).unwrap();
            let want = bc.forward_mean(t - 1, &z0, &z_end).unwrap();
            let err = mean.max_abs_diff(&want).unwrap();
            assert!(err < 1e-10, "t={t}: {err:e}");
        }
    }

    #[test]
    fn posterior_marginalization_closure() {
        let (_, bc) = default_pair();
        for t in 1..=1000 {
            let (k1, k2, k3, std) = bc.posterior_coeffs(t).unwrap();
            let m_err = k1 * bc.m(t) + k2 - bc.m(t - 1);
            let n_err = k1 * bc.n(t) + k3 - bc.n(t - 1);
            let v_err =
                k1 * k1 * bc.sbar(t) * bc.sbar(t) + std * std - bc.sbar(t - 1) * bc.sbar(t - 1);
            assert!(m_err.abs() < 1e-10, "t={t}");
            assert!(n_err.abs() < 1e-10, "t={t}");
            assert!(v_err.abs() < 1e-10, "t={t}");
            assert!(std >= 0.0);
        }
        // post_std at t=1 is small: little residual freedom next to the data.
        assert!(bc.post_std(1) < 0.02);
    }

    #[test]
    fn posterior_range_errors() {
        let (_, bc) = default_pair();
        let z = Tensor::zeros(&[2]).unwrap();
        assert!(bc.posterior(0, &z, &z, &z).is_err());
        assert!(bc.posterior(1001, &z, &z, &z).is_err());
    }

    #[test]
    fn dan_unit_norm_everywhere() {
        let (_, bc) = default_pair();
        for t in 1..1000 {
            let (c, s) = bc.dan_coeffs(t).unwrap();
            assert!((c * c + s * s - 1.0).abs() < 1e-12, "t={t}");
        }
        assert!(bc.dan_coeffs(1000).is_err());
    }

    #[test]
    fn dan_noise_free_case() {
        let (_, bc) = default_pair();
        let mut rng = Rng::new(5);
        let z0 = Tensor::randn(&mut rng, &[8]).unwrap();
        let z_end = Tensor::randn(&mut rng, &[8]).unwrap();
        let t = 300;
        let z_t = bc.forward_mean(t, &z0, &z_end).unwrap();
        let z_prime = bc.dan_normalize(t, &z_t, &z_end).unwrap();
        let (c, _) = bc.dan_coeffs(t).unwrap();
        let want = z0.scale(c);
        assert!(z_prime.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn dan_unit_marginal_monte_carlo() {
        let (_, bc) = default_pair();
        let mut rng = Rng::new(6);
        let dim = 16;
        let n_draws = 6_250; // 1e5 scalar samples
        for &t in &[1usize, 250, 500, 750, 999] {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let count = (n_draws * dim) as f64;
            for _ in 0..n_draws {
                let z0 = Tensor::randn(&mut rng, &[dim]).unwrap();
                let z_end = Tensor::randn(&mut rng, &[dim]).unwrap();
                let (z_t, _) = bc.forward_sample(t, &z0, &z_end, &mut rng).unwrap();
                let z_prime = bc.dan_normalize(t, &z_t, &z_end).unwrap();
                for v in z_prime.data() {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / count;
            let var = sq / count - mean * mean;
            let se = (2.0 / count).sqrt();
            assert!((var - 1.0).abs() < 3.0 * se, "t={t}: var {var}");
        }
    }

    #[test]
    fn recover_z0_round_trip() {
        let (_, bc) = default_pair();
        let mut rng = Rng::new(7);
        let z0 = Tensor::randn(&mut rng, &[8]).unwrap();
        let z_end = Tensor::randn(&mut rng, &[8]).unwrap();
        for &t in &[1usize, 100, 500, 900, 999] {
            let (z_t, eps) = bc.forward_sample(t, &z0, &z_end, &mut rng).unwrap();
            let back = bc.recover_z0(t, &z_t, &z_end, &eps).unwrap();
            let err = back.max_abs_diff(&z0).unwrap();
            assert!(err < 1e-10, "t={t}: {err:e}");
        }
    }

    #[test]
    fn recover_z0_noise_free() {
        let (_, bc) = default_pair();
        let mut rng = Rng::new(8);
        let z0 = Tensor::randn(&mut rng, &[4]).unwrap();
        let z_end = Tensor::randn(&mut rng, &[4]).unwrap();
        let t = 500;
        let z_t = bc.forward_mean(t, &z0, &z_end).unwrap();
        let zero = Tensor::zeros(&[4]).unwrap();
        let back = bc.recover_z0(t, &z_t, &z_end, &zero).unwrap();
        assert!(back.max_abs_diff(&z0).unwrap() < 1e-12);
    }

    #[test]
    fn recover_z0_error_amplification() {
        // Output error is (sbar/m) * noise error, exactly.
        let (_, bc) = default_pair();
        let mut rng = Rng::new(9);
        let z0 = Tensor::randn(&mut rng, &[16]).unwrap();
        let z_end = Tensor::randn(&mut rng, &[16]).unwrap();
        let t = 700;
        let (z_t, eps) = bc.forward_sample(t, &z0, &z_end, &mut rng).unwrap();
        let perturbation = Tensor::randn(&mut rng, &[16]).unwrap();
        let eps_hat = Tensor::lincomb(&[(1.0, &eps), (0.01, &perturbation)]).unwrap();
        let back = bc.recover_z0(t, &z_t, &z_end, &eps_hat).unwrap();
        let diff = back.sub(&z0).unwrap();
        let expected = perturbation.scale(0.01 * bc.sbar(t) / bc.m(t));
        // diff = -(sbar/m) * (eps_hat - eps)
        assert!(diff.max_abs_diff(&expected.scale(-1.0)).unwrap() < 1e-10);
    }

    #[test]
    fn recover_z0_guard_at_terminal() {
        let (_, bc) = default_pair();
        let z = Tensor::zeros(&[2]).unwrap();
        assert!(matches!(
            bc.recover_z0(1000, &z, &z, &z),
            Err(Error::RecoverySingular { .. })
        ));
    }

    #[test]
    fn gap_posterior_reduces_to_adjacent() {
        let (_, bc) = default_pair();
        for &t in &[2usize, 10, 500, 999, 1000] {
            let (k1, k2, k3, std) = bc.posterior_coeffs(t).unwrap();
            let (g1, g2, g3, gstd) = bc.gap_posterior_coeffs(t - 1, t).unwrap();
            assert!((k1 - g1).abs() < 1e-14);
            assert!((k2 - g2).abs() < 1e-14);
            assert!((k3 - g3).abs() < 1e-14);
            assert!((std - gstd).abs() < 1e-14);
        }
    }

    #[test]
    fn gap_posterior_marginalization() {
        // Same closure identity across arbitrary gaps.
        let (_, bc) = default_pair();
        for &(lo, hi) in &[(1usize, 21usize), (100, 500), (0, 999), (480, 520)] {
            let (k1, k2, k3, std) = bc.gap_posterior_coeffs(lo, hi).unwrap();
            assert!((k1 * bc.m(hi) + k2 - bc.m(lo)).abs() < 1e-10);
            assert!((k1 * bc.n(hi) + k3 - bc.n(lo)).abs() < 1e-10);
            let v = k1 * k1 * bc.sbar(hi) * bc.sbar(hi) + std * std;
            assert!((v - bc.sbar(lo) * bc.sbar(lo)).abs() < 1e-10);
        }
    }

    #[test]
    fn h_drift_zero_residual_and_sign() {
        let (s, _) = default_pair();
        let t = 400;
        let c = s.alpha(1000) / s.alpha(t);
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let z_t = x.scale(1.0 / c);
        let h = h_drift(&s, t, &z_t, &x).unwrap();
        for v in h.data() {
            assert!(v.abs() < 1e-12);
        }
        // Moving z_t below the line makes h positive (points toward x).
        let z_lo = z_t.scale(0.9);
        let h = h_drift(&s, t, &z_lo, &x).unwrap();
        for (i, v) in h.data().iter().enumerate() {
            let residual = x.data()[i] - c * z_lo.data()[i];
            assert!(v * residual >= 0.0, "dim {i}");
        }
        assert!(h_drift(&s, 1000, &z_t, &x).is_err());
    }

    #[test]
    fn hand_built_three_step_schedule() {
        let s = Schedule::from_alphas(&[1.0, 0.8, 0.6, 0.4]).unwrap();
        let bc = BridgeCoefficients::from_schedule(&s).unwrap();
        for t in 1..=3 {
            let (k1, k2, k3, std) = bc.posterior_coeffs(t).unwrap();
            assert!((k1 * bc.m(t) + k2 - bc.m(t - 1)).abs() < 1e-12);
            assert!((k1 * bc.n(t) + k3 - bc.n(t - 1)).abs() < 1e-12);
            let v = k1 * k1 * bc.sbar(t) * bc.sbar(t) + std * std;
            assert!((v - bc.sbar(t - 1) * bc.sbar(t - 1)).abs() < 1e-12);
        }
        assert_eq!(bc.m(3), 0.0);
        assert_eq!(bc.n(3), 1.0);
    }
}
