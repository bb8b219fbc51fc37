//! Brute-force and independent-route validation of every closed form in the
//! bridge stack: Gaussian-composition identities, stochastic simulation of
//! the conditioned SDE, normalization marginals, sampler equivalences, and a
//! finite-difference audit of the training gradient.
//!
//! Tolerance policy: 1e-10 for closed-form identities (pure float error),
//! 3 standard errors for Monte-Carlo statistics, and 2% for Euler
//! discretization effects at step 1/T. Negative controls are first-class:
//! each check is re-run against a deliberately broken variant and must catch
//! it. A control report stores the inverse violation ratio, so the shared
//! rule "pass iff max_residual <= tolerance" holds for controls too.

use std::time::Instant;

use serde::Serialize;

use crate::bridge::BridgeCoefficients;
use crate::codec::LinearCodec;
use crate::dataset::{SamplePair, Task};
use crate::denoiser::{Denoiser, DenoiserConfig, GradientBuffer};
use crate::error::Result;
use crate::rng::{streams, Rng};
use crate::sampler::{
    accelerated_sample_traced, ancestral_sample_traced, OraclePredictor, SamplerConfig,
};
use crate::schedule::Schedule;
use crate::tensor::Tensor;
use crate::trainer::{sample_loss_grad, LossConfig};

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub name: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub n_samples: u64,
    pub wall_ms: f64,
}

impl VerificationReport {
    fn finish(name: &str, max_residual: f64, tolerance: f64, n_samples: u64, t0: Instant) -> Self {
        VerificationReport {
            name: name.to_string(),
            max_residual,
            tolerance,
            pass: max_residual <= tolerance,
            n_samples,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        }
    }

    /// Wrap an inner residual as a negative control: the control passes iff
    /// the broken variant violates its tolerance.
    fn control(name: &str, inner_residual: f64, inner_tolerance: f64, t0: Instant) -> Self {
        let ratio = if inner_residual > 0.0 {
            inner_tolerance / inner_residual
        } else {
            f64::INFINITY
        };
        VerificationReport {
            name: name.to_string(),
            max_residual: ratio,
            tolerance: 1.0,
            pass: ratio <= 1.0,
            n_samples: 0,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        }
    }
}

const CLOSED_FORM_TOL: f64 = 1e-10;

/// Max residual of the posterior identities over `t in [2, T-1]`, computed
/// by the independent precision-form route (complete the square in the
/// exponent) rather than the table builder's formulas.
fn composition_residual(bc: &BridgeCoefficients) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 2..bc.t_max() {
        let (a, b, delta) = (bc.a[t], bc.b[t], bc.delta[t]);
        let (sb_prev, sb) = (bc.sbar(t - 1), bc.sbar(t));
        let d2 = delta * delta;

        // Precision form: 1/var = a^2/d^2 + 1/sb_prev^2.
        let var_alt = 1.0 / (a * a / d2 + 1.0 / (sb_prev * sb_prev));
        let k1_alt = var_alt * a / d2;
        let k2_alt = var_alt * bc.m(t - 1) / (sb_prev * sb_prev);
        let k3_alt = var_alt * (-a * b / d2 + bc.n(t - 1) / (sb_prev * sb_prev));

        let (k1, k2, k3, std) = (bc.k1(t), bc.k2(t), bc.k3(t), bc.post_std(t));
        worst = worst
            .max((k1 - k1_alt).abs())
            .max((k2 - k2_alt).abs())
            .max((k3 - k3_alt).abs())
            .max((std * std - var_alt).abs());

        // Marginalization closure: composing the posterior with the forward
        // marginal at t reproduces the marginal at t-1.
        worst = worst
            .max((k1 * bc.m(t) + k2 - bc.m(t - 1)).abs())
            .max((k1 * bc.n(t) + k3 - bc.n(t - 1)).abs())
            .max((k1 * k1 * sb * sb + std * std - sb_prev * sb_prev).abs());
        let _ = sb;
    }
    worst
}

/// Posterior coefficient identities plus a corrupted-coefficient control.
pub fn check_composition(bc: &BridgeCoefficients) -> Vec<VerificationReport> {
    let t0 = Instant::now();
    let residual = composition_residual(bc);
    let main = VerificationReport::finish(
        "composition.identities",
        residual,
        CLOSED_FORM_TOL,
        (bc.t_max() - 2) as u64,
        t0,
    );

    let t1 = Instant::now();
    let mut corrupted = bc.clone();
    for v in corrupted.k1.iter_mut() {
        *v *= 1.01;
    }
    let broken_residual = composition_residual(&corrupted);
    let control = VerificationReport::control(
        "composition.corrupted_k1_control",
        broken_residual,
        CLOSED_FORM_TOL,
        t1,
    );
    vec![main, control]
}

struct SdeSimResult {
    terminal_mean_rms: f64,
    /// Max checkpoint deviation normalized by max(3 SE, 2% scale).
    checkpoint_residual: f64,
}

fn simulate_bridge_sde(
    s: &Schedule,
    bc: &BridgeCoefficients,
    z0: &Tensor,
    x: &Tensor,
    n_traj: usize,
    rng: &mut Rng,
    h_gain: f64,
) -> SdeSimResult {
    let t_max = s.t_max();
    let dim = z0.len();
    let dt = 1.0 / t_max as f64;
    let checkpoints = [t_max / 4, t_max / 2, 3 * t_max / 4];

    let mut states = vec![0.0f64; n_traj * dim];
    for traj in 0..n_traj {
        states[traj * dim..(traj + 1) * dim].copy_from_slice(z0.data());
    }

    let mut checkpoint_residual: f64 = 0.0;
    for t in 0..t_max {
        let (f_scale, g2) = s.sde_coeffs_any(t);
        let c = s.alpha(t_max) / s.alpha(t);
        let den = s.sigma(t_max) * s.sigma(t_max) - c * c * s.sigma(t) * s.sigma(t);
        let noise_scale = (g2 * dt).sqrt();
        for traj in 0..n_traj {
            let row = &mut states[traj * dim..(traj + 1) * dim];
            for (d, z) in row.iter_mut().enumerate() {
                let h = h_gain * c * (x.data()[d] - c * *z) / den;
                *z += (f_scale * *z + g2 * h) * dt + noise_scale * rng.normal();
            }
        }

        let tt = t + 1;
        if checkpoints.contains(&tt) {
            let want_var = bc.sbar(tt) * bc.sbar(tt);
            let se_mean = bc.sbar(tt) / (n_traj as f64).sqrt();
            let se_var = want_var * (2.0 / n_traj as f64).sqrt();
            for d in 0..dim {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for traj in 0..n_traj {
                    let v = states[traj * dim + d];
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / n_traj as f64;
                let var = sq / n_traj as f64 - mean * mean;
                let want_mean = bc.m(tt) * z0.data()[d] + bc.n(tt) * x.data()[d];
                let mean_tol = (3.0 * se_mean).max(0.02 * (want_mean.abs() + bc.sbar(tt)));
                let var_tol = (3.0 * se_var).max(0.02 * want_var);
                checkpoint_residual = checkpoint_residual
                    .max((mean - want_mean).abs() / mean_tol)
                    .max((var - want_var).abs() / var_tol);
            }
        }
    }

    let mut rms = 0.0;
    for d in 0..dim {
        let mut sum = 0.0;
        for traj in 0..n_traj {
            sum += states[traj * dim + d];
        }
        let dev = sum / n_traj as f64 - x.data()[d];
        rms += dev * dev;
    }
    SdeSimResult {
        terminal_mean_rms: (rms / dim as f64).sqrt(),
        checkpoint_residual,
    }
}

/// Euler-Maruyama simulation of the conditioned SDE against the closed-form
/// kernel: terminal pinning of the mean, checkpoint marginals, and an
/// unbridged control that must diverge from the endpoint.
pub fn check_sde_bridge(
    s: &Schedule,
    bc: &BridgeCoefficients,
    z0: &Tensor,
    x: &Tensor,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<VerificationReport>> {
    let t0 = Instant::now();
    let mut rng = Rng::with_stream(seed, streams::VERIFY);
    let sim = simulate_bridge_sde(s, bc, z0, x, n_traj, &mut rng, 1.0);
    let terminal = VerificationReport::finish(
        "sde_bridge.terminal_mean_rms",
        sim.terminal_mean_rms,
        0.02,
        n_traj as u64,
        t0,
    );
    let marginals = VerificationReport {
        name: "sde_bridge.checkpoint_marginals".into(),
        max_residual: sim.checkpoint_residual,
        tolerance: 1.0,
        pass: sim.checkpoint_residual <= 1.0,
        n_samples: n_traj as u64,
        wall_ms: terminal.wall_ms,
    };

    // Unbridged control: drop the conditioning drift entirely; the process
    // must no longer land on x.
    let t1 = Instant::now();
    let mut rng = Rng::with_stream(seed, streams::VERIFY + 1);
    let free = simulate_bridge_sde(s, bc, z0, x, (n_traj / 10).max(100), &mut rng, 0.0);
    let control = VerificationReport::control(
        "sde_bridge.unbridged_control",
        free.terminal_mean_rms,
        0.02,
        t1,
    );
    Ok(vec![terminal, marginals, control])
}

/// Normalization marginals: the analytic unit square-sum, the Monte-Carlo
/// unit variance, and the swapped-coefficient variant as a control.
pub fn check_dan(bc: &BridgeCoefficients, n_samples: usize, seed: u64) -> Result<Vec<VerificationReport>> {
    let t0 = Instant::now();
    let mut analytic: f64 = 0.0;
    for t in 1..bc.t_max() {
        let (c, s) = bc.dan_coeffs(t)?;
        analytic = analytic.max((c * c + s * s - 1.0).abs());
    }
    let analytic_report = VerificationReport::finish(
        "dan.unit_square_sum",
        analytic,
        1e-12,
        (bc.t_max() - 1) as u64,
        t0,
    );

    let t1 = Instant::now();
    let dim = 16usize;
    let n_draws = (n_samples / dim).max(1);
    let count = (n_draws * dim) as f64;
    let mut rng = Rng::with_stream(seed, streams::VERIFY + 2);
    let mut mc_residual: f64 = 0.0;
    let probe_ts = [1, bc.t_max() / 4, bc.t_max() / 2, 3 * bc.t_max() / 4, bc.t_max() - 1];
    for &t in &probe_ts {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n_draws {
            let z0 = Tensor::randn(&mut rng, &[dim])?;
            let z_end = Tensor::randn(&mut rng, &[dim])?;
            let (z_t, _) = bc.forward_sample(t, &z0, &z_end, &mut rng)?;
            let z_prime = bc.dan_normalize(t, &z_t, &z_end)?;
            for v in z_prime.data() {
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / count;
        let var = sq / count - mean * mean;
        let se = (2.0 / count).sqrt();
        mc_residual = mc_residual.max((var - 1.0).abs() / (3.0 * se));
    }
    let mc_report = VerificationReport::finish(
        "dan.mc_variance",
        mc_residual,
        1.0,
        (n_draws * dim * probe_ts.len()) as u64,
        t1,
    );

    // Literal swapped form: divide (z_t - m_t zT) by sqrt(n_t^2 + sbar_t^2).
    // Its marginal variance is far from 1 at mid timesteps.
    let t2 = Instant::now();
    let t = bc.t_max() / 2;
    let mut rng = Rng::with_stream(seed, streams::VERIFY + 3);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n_draws {
        let z0 = Tensor::randn(&mut rng, &[dim])?;
        let z_end = Tensor::randn(&mut rng, &[dim])?;
        let (z_t, _) = bc.forward_sample(t, &z0, &z_end, &mut rng)?;
        let den = (bc.n(t) * bc.n(t) + bc.sbar(t) * bc.sbar(t)).sqrt();
        let z_lit = Tensor::lincomb(&[(1.0 / den, &z_t), (-bc.m(t) / den, &z_end)])?;
        for v in z_lit.data() {
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / count;
    let var = sq / count - mean * mean;
    let se = (2.0 / count).sqrt();
    let literal_residual = (var - 1.0).abs() / (3.0 * se);
    let control = VerificationReport::control("dan.literal_form_control", literal_residual, 1.0, t2);

    Ok(vec![analytic_report, mc_report, control])
}

/// Full-grid accelerated sampling with posterior-std stochasticity must
/// reproduce stepwise sampling exactly: trajectory-level with a shared noise
/// stream, and coefficient-level at every step.
pub fn check_sampler_equivalence(bc: &BridgeCoefficients, seed: u64) -> Result<Vec<VerificationReport>> {
    let t0 = Instant::now();
    let dim_side = 4usize; // 4x4x1 latents through an 8x8 codec
    let mut cal_rng = Rng::with_stream(0xC0DEC, streams::CODEC_CALIBRATION);
    let codec = LinearCodec::calibrated(2 * dim_side, 2 * dim_side, 1, 2, &mut cal_rng, 500)?;
    let mut rng = Rng::with_stream(seed, streams::VERIFY + 4);
    let y = Tensor::randn(&mut rng, &[2 * dim_side, 2 * dim_side, 1])?;
    let x = Tensor::randn(&mut rng, &[2 * dim_side, 2 * dim_side, 1])?;
    let z0 = codec.encode(&y)?;
    let model = OraclePredictor {
        z0: &z0,
        bridge: bc,
        dan_enabled: true,
    };
    let cfg = SamplerConfig::ancestral(bc.t_max(), seed, true);
    let anc = ancestral_sample_traced(&model, bc, &codec, &x, &cfg)?;
    let acc = accelerated_sample_traced(&model, bc, &codec, &x, &cfg)?;
    let mut trajectory_dev: f64 = 0.0;
    for ((ta, za), (tb, zb)) in anc.states.iter().zip(&acc.states) {
        debug_assert_eq!(ta, tb);
        trajectory_dev = trajectory_dev.max(za.max_abs_diff(zb)?);
    }
    let trajectory = VerificationReport::finish(
        "sampler.markov_equivalence",
        trajectory_dev,
        CLOSED_FORM_TOL,
        anc.states.len() as u64,
        t0,
    );

    // Coefficient identity at every adjacent step: the accelerated update
    // with g = posterior std has exactly the posterior coefficients.
    let t1 = Instant::now();
    let mut coeff_dev: f64 = 0.0;
    for t in 1..=bc.t_max() - 1 {
        let (k1, k2, k3, std) = bc.posterior_coeffs(t)?;
        let g = std;
        let rc = (bc.sbar(t - 1) * bc.sbar(t - 1) - g * g).max(0.0).sqrt() / bc.sbar(t);
        coeff_dev = coeff_dev
            .max((rc - k1).abs())
            .max((bc.m(t - 1) - rc * bc.m(t) - k2).abs())
            .max((bc.n(t - 1) - rc * bc.n(t) - k3).abs());
    }
    let coeffs = VerificationReport::finish(
        "sampler.coefficient_identity",
        coeff_dev,
        CLOSED_FORM_TOL,
        (bc.t_max() - 1) as u64,
        t1,
    );

    // Deterministic mode must not depend on the seed.
    let t2 = Instant::now();
    let det = |seed: u64| -> Result<Tensor> {
        let cfg = SamplerConfig {
            n_steps: 10.min(bc.t_max() - 1),
            g_mode: crate::sampler::GMode::Deterministic,
            seed,
            dan_enabled: true,
        };
        Ok(accelerated_sample_traced(&model, bc, &codec, &x, &cfg)?.z0_hat)
    };
    let d1 = det(1)?;
    let d2 = det(2)?;
    let det_dev = d1.max_abs_diff(&d2)?;
    let determinism = VerificationReport::finish(
        "sampler.deterministic_seed_invariance",
        det_dev,
        0.0,
        2,
        t2,
    );

    // Mismatched grids are not equivalent; the comparison must say so.
    let t3 = Instant::now();
    let thin_cfg = SamplerConfig {
        n_steps: (bc.t_max() - 1) / 2,
        g_mode: crate::sampler::GMode::Markov,
        seed,
        dan_enabled: true,
    };
    let thin = accelerated_sample_traced(&model, bc, &codec, &x, &thin_cfg)?;
    let mut grid_dev: f64 = 0.0;
    // Compare states at shared timesteps; fewer noise draws shift the
    // stream, so trajectories must differ.
    for (t, z) in &thin.states {
        if let Some((_, za)) = anc.states.iter().find(|(ta, _)| ta == t) {
            grid_dev = grid_dev.max(za.max_abs_diff(z)?);
        }
    }
    let grid_control = VerificationReport::control(
        "sampler.mismatched_grid_control",
        grid_dev,
        CLOSED_FORM_TOL,
        t3,
    );

    Ok(vec![trajectory, coeffs, determinism, grid_control])
}

#[allow(clippy::too_many_arguments)]
fn fd_gradient_residual(
    denoiser: &mut Denoiser,
    bc: &BridgeCoefficients,
    codec: &LinearCodec,
    loss_cfg: &LossConfig,
    pair: &SamplePair,
    t: usize,
    eps: &Tensor,
    n_probe: usize,
    rng: &mut Rng,
    break_ic_gradient: bool,
) -> Result<f64> {
    let mut grad = GradientBuffer::zeros(denoiser.n_params());
    if break_ic_gradient {
        // Deliberately wrong path: the image-consistency term contributes to
        // the loss but its gradient is dropped.
        let elbo_only = LossConfig {
            omega2: 0.0,
            ..*loss_cfg
        };
        sample_loss_grad(denoiser, bc, codec, &elbo_only, pair, t, eps, Some(&mut grad))?;
    } else {
        sample_loss_grad(denoiser, bc, codec, loss_cfg, pair, t, eps, Some(&mut grad))?;
    }

    let loss_of = |d: &Denoiser| -> Result<f64> {
        let l = sample_loss_grad(d, bc, codec, loss_cfg, pair, t, eps, None)?;
        Ok(loss_cfg.omega1 * l.elbo + loss_cfg.omega2 * l.ic)
    };

    let h = 1e-5;
    let n = denoiser.n_params();
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    while probed < n_probe {
        let idx = rng.index(n);
        let orig = denoiser.theta()[idx];
        denoiser.theta_mut()[idx] = orig + h;
        let lp = loss_of(denoiser)?;
        denoiser.theta_mut()[idx] = orig - h;
        let lm = loss_of(denoiser)?;
        denoiser.theta_mut()[idx] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grad.data()[idx];
        probed += 1;
        // Central differences resolve nothing below ~eps * L / h; skip
        // components under that floor.
        if fd.abs() < 1e-5 && an.abs() < 1e-5 {
            continue;
        }
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
    }
    Ok(worst)
}

/// Finite-difference audit of the composite training gradient on a small
/// model: the weighted noise-matching term, the gated image-consistency term
/// through the codec decode, and a dropped-gradient control.
pub fn check_gradients(bc: &BridgeCoefficients, seed: u64) -> Result<Vec<VerificationReport>> {
    let mut cal_rng = Rng::with_stream(0xC0DEC, streams::CODEC_CALIBRATION);
    let codec = LinearCodec::calibrated(8, 8, 1, 2, &mut cal_rng, 500)?;
    let model_cfg = DenoiserConfig {
        latent_len: codec.latent_len(),
        hidden: 24,
        blocks: 2,
        time_embed: 8,
        t_max: bc.t_max(),
    };
    debug_assert!(model_cfg.n_params() <= 10_000);
    let mut rng = Rng::with_stream(seed, streams::VERIFY + 5);
    let mut denoiser = Denoiser::init(model_cfg, &mut rng)?;
    // Randomize the zero-initialized output layer so every parameter carries
    // gradient during the audit.
    let n = denoiser.n_params();
    let tail = codec.latent_len() * 24 + codec.latent_len();
    for v in denoiser.theta_mut()[n - tail..].iter_mut() {
        *v = 0.1 * rng.normal();
    }

    let mut x = Tensor::randn(&mut rng, &[8, 8, 1])?;
    let mut y = Tensor::randn(&mut rng, &[8, 8, 1])?;
    for v in x.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    for v in y.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    let pair = SamplePair {
        x,
        y,
        task: Task::Depth,
        seed,
    };
    let eps = Tensor::randn(&mut rng, &codec.latent_shape())?;
    // Mid-schedule timestep: the IC gate (m_t >= 0.05) is open there.
    let t = bc.t_max() / 2;
    let full_cfg = LossConfig {
        omega1: 1.0,
        omega2: 0.1,
        ic_m_threshold: 0.05,
        dan_enabled: true,
    };
    debug_assert!(bc.m(t) >= full_cfg.ic_m_threshold);

    let t0 = Instant::now();
    let residual = fd_gradient_residual(
        &mut denoiser,
        bc,
        &codec,
        &full_cfg,
        &pair,
        t,
        &eps,
        200,
        &mut rng,
        false,
    )?;
    let composite =
        VerificationReport::finish("gradients.composite", residual, 1e-5, 200, t0);

    let t1 = Instant::now();
    let elbo_cfg = LossConfig {
        omega2: 0.0,
        ..full_cfg
    };
    let residual = fd_gradient_residual(
        &mut denoiser,
        bc,
        &codec,
        &elbo_cfg,
        &pair,
        t,
        &eps,
        200,
        &mut rng,
        false,
    )?;
    let elbo_only = VerificationReport::finish("gradients.elbo_only", residual, 1e-5, 200, t1);

    let t2 = Instant::now();
    let broken_residual = fd_gradient_residual(
        &mut denoiser,
        bc,
        &codec,
        &full_cfg,
        &pair,
        t,
        &eps,
        200,
        &mut rng,
        true,
    )?;
    let control =
        VerificationReport::control("gradients.dropped_ic_control", broken_residual, 1e-5, t2);

    Ok(vec![composite, elbo_only, control])
}

/// Run the whole suite at default sizes (T = 1000, dim 4 SDE with 1e4
/// trajectories, 1e5 normalization samples).
pub fn run_all(seed: u64) -> Result<Vec<VerificationReport>> {
    let s = Schedule::vp_linear(1000, 1e-4, 0.02)?;
    let bc = BridgeCoefficients::from_schedule(&s)?;
    let mut reports = Vec::new();

    reports.extend(check_composition(&bc));

    let mut rng = Rng::with_stream(seed, streams::VERIFY + 6);
    let z0 = Tensor::randn(&mut rng, &[4])?;
    let x = Tensor::randn(&mut rng, &[4])?;
    reports.extend(check_sde_bridge(&s, &bc, &z0, &x, 10_000, seed)?);
    reports.extend(check_dan(&bc, 100_000, seed)?);
    reports.extend(check_sampler_equivalence(&bc, seed)?);
    reports.extend(check_gradients(&bc, seed)?);
    Ok(reports)
}
