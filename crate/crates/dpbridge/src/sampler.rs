//! Inference: stepwise posterior sampling and the reduced-grid accelerated
//! sampler with a stochasticity knob.
//!
//! Both samplers start from the encoded input at `t_start = T - 1` (the
//! terminal coefficients are singular by construction) and walk a strictly
//! increasing grid ending at 0. Every step normalizes the state, predicts
//! the noise, recovers a `z0` estimate, and moves one grid point down; the
//! final transition draws no noise and the decoded output comes from the
//! last `z0` estimate.
//!
//! On the full grid with the posterior std as stochasticity, the accelerated
//! update coincides with stepwise sampling coefficient-for-coefficient; with
//! zero stochasticity it is deterministic. The verification suite checks
//! both claims.

use crate::bridge::BridgeCoefficients;
use crate::codec::LinearCodec;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Anything that predicts noise from a (normalized) state, a conditioning
/// latent, and a timestep. Implemented by the trained model and by test
/// oracles.
pub trait NoisePredictor {
    fn predict(&self, z_in: &Tensor, z_cond: &Tensor, t: usize) -> Result<Tensor>;

    /// Schedule length the predictor was built for.
    fn t_max(&self) -> usize;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_in: &Tensor, z_cond: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(z_in, z_cond, t)
    }

    fn t_max(&self) -> usize {
        self.config().t_max
    }
}

/// Stochasticity of the reverse transitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GMode {
    /// Posterior std of the grid gap: the Markovian bridge.
    Markov,
    /// Zero noise everywhere.
    Deterministic,
    /// `eta` times the posterior std, `eta` in [0, 1].
    Scaled(f64),
}

impl GMode {
    fn g(&self, markov_std: f64) -> Result<f64> {
        match self {
            GMode::Markov => Ok(markov_std),
            GMode::Deterministic => Ok(0.0),
            GMode::Scaled(eta) => {
                if !(0.0..=1.0).contains(eta) {
                    return Err(Error::InvalidStochasticity(format!(
                        "eta {eta} outside [0, 1]"
                    )));
                }
                Ok(eta * markov_std)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of model evaluations (= transitions on the grid).
    pub n_steps: usize,
    pub g_mode: GMode,
    pub seed: u64,
    /// Whether the model expects normalized inputs (from the checkpoint).
    pub dan_enabled: bool,
}

impl SamplerConfig {
    /// Full-grid Markov configuration for a schedule of length `t_max`.
    pub fn ancestral(t_max: usize, seed: u64, dan_enabled: bool) -> Self {
        SamplerConfig {
            n_steps: t_max - 1,
            g_mode: GMode::Markov,
            seed,
            dan_enabled,
        }
    }
}

/// Strictly increasing timestep grid `0 = t_0 < ... < t_N = t_start` with
/// `n_steps` transitions, uniform in `t`.
pub fn build_grid(t_start: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_start {
        return Err(Error::InvalidArgument(format!(
            "n_steps {n_steps} outside [1, {t_start}]"
        )));
    }
    let grid: Vec<usize> = (0..=n_steps)
        .map(|i| ((i * t_start) as f64 / n_steps as f64).round() as usize)
        .collect();
    for w in grid.windows(2) {
        debug_assert!(w[0] < w[1], "grid not strictly increasing");
    }
    Ok(grid)
}

fn check_model(
    model: &dyn NoisePredictor,
    bridge: &BridgeCoefficients,
    codec: &LinearCodec,
) -> Result<()> {
    if model.t_max() != bridge.t_max() {
        return Err(Error::ModelMismatch(format!(
            "model trained for T={}, schedule has T={}",
            model.t_max(),
            bridge.t_max()
        )));
    }
    let _ = codec;
    Ok(())
}

/// Output of a sampling run: the decoded dense map, the final latent
/// estimate, and (for verification) every intermediate state visited, as
/// `(t, z_t)` in descending `t`.
pub struct SampleTrace {
    pub y_hat: Tensor,
    pub z0_hat: Tensor,
    pub states: Vec<(usize, Tensor)>,
}

/// Stepwise posterior sampling over the full grid.
pub fn ancestral_sample(
    model: &dyn NoisePredictor,
    bridge: &BridgeCoefficients,
    codec: &LinearCodec,
    x: &Tensor,
    cfg: &SamplerConfig,
) -> Result<(Tensor, Tensor)> {
    let trace = ancestral_sample_traced(model, bridge, codec, x, cfg)?;
    Ok((trace.y_hat, trace.z0_hat))
}

pub fn ancestral_sample_traced(
    model: &dyn NoisePredictor,
    bridge: &BridgeCoefficients,
    codec: &LinearCodec,
    x: &Tensor,
    cfg: &SamplerConfig,
) -> Result<SampleTrace> {
    check_model(model, bridge, codec)?;
    let t_start = bridge.t_max() - 1;
    if cfg.g_mode != GMode::Markov || cfg.n_steps != t_start {
        return Err(Error::InvalidArgument(
            "stepwise sampling is defined on the full grid with Markov stochasticity".into(),
        ));
    }
    let z_end = codec.encode(x)?;
    let mut rng = Rng::with_stream(cfg.seed, streams::SAMPLER);
    let mut z = z_end.clone();
    let mut z0_hat = z_end.clone();
    let mut states = Vec::with_capacity(t_start + 1);
    states.push((t_start, z.clone()));
    for t in (1..=t_start).rev() {
        let z_in = if cfg.dan_enabled {
            bridge.dan_normalize(t, &z, &z_end)?
        } else {
            z.clone()
        };
        let eps_hat = model.predict(&z_in, &z_end, t)?;
        z0_hat = bridge.recover_z0(t, &z, &z_end, &eps_hat)?;
        let (mut mean, std) = bridge.posterior(t, &z, &z0_hat, &z_end)?;
        if t > 1 {
            let eps = Tensor::randn(&mut rng, mean.shape())?;
            mean.axpy(std, &eps)?;
        }
        z = mean;
        states.push((t - 1, z.clone()));
    }
    Ok(SampleTrace {
        y_hat: codec.decode(&z0_hat)?,
        z0_hat,
        states,
    })
}

/// Reduced-grid sampling: each transition rebuilds the state at the lower
/// grid point from the current `z0` estimate, the conditioning latent, and
/// the rescaled residual, plus `g` noise.
pub fn accelerated_sample(
    model: &dyn NoisePredictor,
    bridge: &BridgeCoefficients,
    codec: &LinearCodec,
    x: &Tensor,
    cfg: &SamplerConfig,
) -> Result<(Tensor, Tensor)> {
    let trace = accelerated_sample_traced(model, bridge, codec, x, cfg)?;
    Ok((trace.y_hat, trace.z0_hat))
}

pub fn accelerated_sample_traced(
    model: &dyn NoisePredictor,
    bridge: &BridgeCoefficients,
    codec: &LinearCodec,
    x: &Tensor,
    cfg: &SamplerConfig,
) -> Result<SampleTrace> {
    check_model(model, bridge, codec)?;
    let t_start = bridge.t_max() - 1;
    let grid = build_grid(t_start, cfg.n_steps)?;
    let z_end = codec.encode(x)?;
    let mut rng = Rng::with_stream(cfg.seed, streams::SAMPLER);
    let mut z = z_end.clone();
    let mut z0_hat = z_end.clone();
    let mut states = Vec::with_capacity(grid.len());
    states.push((t_start, z.clone()));
    for n in (1..grid.len()).rev() {
        let (t_lo, t_hi) = (grid[n - 1], grid[n]);
        let z_in = if cfg.dan_enabled {
            bridge.dan_normalize(t_hi, &z, &z_end)?
        } else {
            z.clone()
        };
        let eps_hat = model.predict(&z_in, &z_end, t_hi)?;
        z0_hat = bridge.recover_z0(t_hi, &z, &z_end, &eps_hat)?;

        let (_, _, _, markov_std) = bridge.gap_posterior_coeffs(t_lo, t_hi)?;
        let g = cfg.g_mode.g(markov_std)?;
        if g > bridge.sbar(t_lo) + 1e-15 {
            return Err(Error::InvalidStochasticity(format!(
                "g = {g} exceeds marginal std {} at t={t_lo}",
                bridge.sbar(t_lo)
            )));
        }
        let sbar_lo = bridge.sbar(t_lo);
        let sbar_hi = bridge.sbar(t_hi);
        let resid_coef = (sbar_lo * sbar_lo - g * g).max(0.0).sqrt() / sbar_hi;
        let mut next = Tensor::lincomb(&[
            (resid_coef, &z),
            (bridge.m(t_lo) - resid_coef * bridge.m(t_hi), &z0_hat),
            (bridge.n(t_lo) - resid_coef * bridge.n(t_hi), &z_end),
        ])?;
        if n > 1 && g > 0.0 {
            let eps = Tensor::randn(&mut rng, next.shape())?;
            next.axpy(g, &eps)?;
        }
        z = next;
        states.push((t_lo, z.clone()));
    }
    Ok(SampleTrace {
        y_hat: codec.decode(&z0_hat)?,
        z0_hat,
        states,
    })
}

/// Test double that returns the exact noise consistent with the observed
/// state, given oracle access to the true `z0`. With it, `z0` recovery is
/// exact at every step.
pub struct OraclePredictor<'a> {
    pub z0: &'a Tensor,
    pub bridge: &'a BridgeCoefficients,
    pub dan_enabled: bool,
}

impl NoisePredictor for OraclePredictor<'_> {
    fn predict(&self, z_in: &Tensor, z_cond: &Tensor, t: usize) -> Result<Tensor> {
        if self.dan_enabled {
            // z_in = c_t z0 + s_t eps
            let (c, s) = self.bridge.dan_coeffs(t)?;
            Tensor::lincomb(&[(1.0 / s, z_in), (-c / s, self.z0)])
        } else {
            // z_in = m z0 + n zT + sbar eps
            let sbar = self.bridge.sbar(t);
            Tensor::lincomb(&[
                (1.0 / sbar, z_in),
                (-self.bridge.m(t) / sbar, self.z0),
                (-self.bridge.n(t) / sbar, z_cond),
            ])
        }
    }

    fn t_max(&self) -> usize {
        self.bridge.t_max()
    }
}
