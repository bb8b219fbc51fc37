//! Dense-prediction metrics: affine-invariant depth evaluation and angular
//! normal accuracy, plus the input-noise robustness sweep.
//!
//! Depth predictions are least-squares aligned to the ground truth before
//! scoring, so any affine transform of a prediction scores identically.
//! Ground-truth maps arrive in `[-1, 1]` and are decoded to a positive depth
//! range first; AbsRel divides by ground truth, which must stay positive.

use crate::bridge::BridgeCoefficients;
use crate::codec::LinearCodec;
use crate::dataset::{perturb, NoiseKind, SamplePair, Task};
use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::sampler::{accelerated_sample, NoisePredictor, SamplerConfig};
use crate::tensor::Tensor;

/// Positive range the unit-encoded depth decodes into. The affine protocol
/// makes the specific choice immaterial.
pub const DEPTH_DECODE_MIN: f64 = 0.1;
pub const DEPTH_DECODE_MAX: f64 = 10.0;

/// Map a `[-1, 1]` value into the positive depth range.
pub fn depth_from_unit(v: f64) -> f64 {
    DEPTH_DECODE_MIN + (v + 1.0) / 2.0 * (DEPTH_DECODE_MAX - DEPTH_DECODE_MIN)
}

#[derive(Debug, Clone, Copy)]
pub struct DepthEvalResult {
    pub absrel: f64,
    pub delta1: f64,
    /// Least-squares alignment applied to the prediction.
    pub scale: f64,
    pub shift: f64,
    pub n_valid: usize,
    /// Alignment fell back to a constant (prediction had no variance).
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NormalEvalResult {
    pub mean_angle_deg: f64,
    pub pct_below_11_25: f64,
    pub n_valid: usize,
    /// Pixels excluded for having a zero-norm prediction.
    pub n_excluded: usize,
}

fn masked<'a>(values: &'a [f64], mask: Option<&'a [bool]>) -> impl Iterator<Item = usize> + 'a {
    (0..values.len()).filter(move |i| mask.is_none_or(|m| m[*i]))
}

/// Least-squares `(s, b)` minimizing `sum (s * pred + b - gt)^2` over valid
/// pixels. A constant prediction degenerates to `s = 0, b = mean(gt)`.
pub fn align_affine(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<(f64, f64, bool)> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "align: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(Error::ShapeMismatch("mask length".into()));
        }
    }
    let p = pred.data();
    let g = gt.data();
    let mut n = 0.0;
    let (mut sp, mut sg, mut spp, mut spg) = (0.0, 0.0, 0.0, 0.0);
    for i in masked(p, mask) {
        n += 1.0;
        sp += p[i];
        sg += g[i];
        spp += p[i] * p[i];
        spg += p[i] * g[i];
    }
    if n < 2.0 {
        return Err(Error::InvalidArgument(
            "affine alignment needs at least 2 valid pixels".into(),
        ));
    }
    let det = n * spp - sp * sp;
    // Variance of the prediction in float terms; constant inputs make the
    // normal equations singular.
    if det.abs() < 1e-12 * n * n {
        return Ok((0.0, sg / n, true));
    }
    let s = (n * spg - sp * sg) / det;
    let b = (sg - s * sp) / n;
    Ok((s, b, false))
}

/// AbsRel and delta-threshold accuracy on aligned, positively decoded depth.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<DepthEvalResult> {
    let gt_depth = Tensor::from_vec(
        gt.shape(),
        gt.data().iter().map(|v| depth_from_unit(*v)).collect(),
    )?;
    let (s, b, degenerate) = align_affine(pred, &gt_depth, mask)?;
    let p = pred.data();
    let g = gt_depth.data();
    let mut n_valid = 0usize;
    let mut absrel_sum = 0.0;
    let mut delta_hits = 0usize;
    for i in masked(p, mask) {
        let d_gt = g[i];
        if d_gt <= 0.0 {
            continue;
        }
        let d_pred = s * p[i] + b;
        n_valid += 1;
        absrel_sum += (d_gt - d_pred).abs() / d_gt;
        if d_pred > 0.0 {
            let ratio = (d_gt / d_pred).max(d_pred / d_gt);
            if ratio < 1.25 {
                delta_hits += 1;
            }
        }
    }
    if n_valid == 0 {
        return Err(Error::InvalidArgument("empty valid mask".into()));
    }
    Ok(DepthEvalResult {
        absrel: absrel_sum / n_valid as f64,
        delta1: delta_hits as f64 / n_valid as f64,
        scale: s,
        shift: b,
        n_valid,
        degenerate,
    })
}

/// Mean angular error (degrees) and the fraction of pixels under 11.25
/// degrees. Both vectors are re-normalized per pixel; zero-norm predictions
/// are excluded and counted.
pub fn normal_metrics(
    pred: &Tensor,
    gt: &Tensor,
    mask: Option<&[bool]>,
) -> Result<NormalEvalResult> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "normal_metrics: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.shape().len() != 3 || pred.shape()[2] != 3 {
        return Err(Error::ShapeMismatch(
            "normal maps must be H x W x 3".into(),
        ));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::ShapeMismatch("mask length".into()));
        }
    }
    let mut angle_sum = 0.0;
    let mut below = 0usize;
    let mut n_valid = 0usize;
    let mut n_excluded = 0usize;
    for i in 0..h {
        for j in 0..w {
            if let Some(m) = mask {
                if !m[i * w + j] {
                    continue;
                }
            }
            let pv = [pred.at3(i, j, 0), pred.at3(i, j, 1), pred.at3(i, j, 2)];
            let gv = [gt.at3(i, j, 0), gt.at3(i, j, 1), gt.at3(i, j, 2)];
            let pn = (pv[0] * pv[0] + pv[1] * pv[1] + pv[2] * pv[2]).sqrt();
            let gn = (gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2]).sqrt();
            if pn < 1e-12 || gn < 1e-12 {
                n_excluded += 1;
                continue;
            }
            let cosine =
                ((pv[0] * gv[0] + pv[1] * gv[1] + pv[2] * gv[2]) / (pn * gn)).clamp(-1.0, 1.0);
            let angle = cosine.acos().to_degrees();
            angle_sum += angle;
            if angle < 11.25 {
                below += 1;
            }
            n_valid += 1;
        }
    }
    if n_valid == 0 {
        return Err(Error::InvalidArgument("no valid normal pixels".into()));
    }
    Ok(NormalEvalResult {
        mean_angle_deg: angle_sum / n_valid as f64,
        pct_below_11_25: below as f64 / n_valid as f64,
        n_valid,
        n_excluded,
    })
}

/// One row of an evaluation table.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub task: Task,
    pub n_steps: usize,
    pub noise_kind: Option<NoiseKind>,
    pub noise_level: f64,
    pub absrel: f64,
    pub delta1: f64,
    pub mean_angle: f64,
    pub pct11_25: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalRow {
    pub fn csv_header() -> &'static str {
        "task,n_steps,noise_kind,noise_level,absrel,delta1,mean_angle,pct11_25,n_samples,seed"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task.as_str(),
            self.n_steps,
            self.noise_kind.map_or("none", |k| k.as_str()),
            self.noise_level,
            fmt_opt(self.absrel),
            fmt_opt(self.delta1),
            fmt_opt(self.mean_angle),
            fmt_opt(self.pct11_25),
            self.n_samples,
            self.seed
        )
    }
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Run the sampler over `pairs` (optionally perturbing inputs first) and
/// average the task metrics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_set(
    model: &dyn NoisePredictor,
    bridge: &BridgeCoefficients,
    codec: &LinearCodec,
    pairs: &[SamplePair],
    task: Task,
    sampler_cfg: &SamplerConfig,
    noise: Option<(NoiseKind, f64)>,
    seed: u64,
) -> Result<EvalRow> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut absrel = 0.0;
    let mut delta1 = 0.0;
    let mut angle = 0.0;
    let mut pct = 0.0;
    for (idx, pair) in pairs.iter().enumerate() {
        let mut x = pair.x.clone();
        if let Some((kind, level)) = noise {
            let mut rng = Rng::with_stream(seed, streams::EVAL + idx as u64);
            x = perturb(&x, kind, level, &mut rng)?;
        }
        let per_sample_cfg = SamplerConfig {
            seed: seed.wrapping_add(idx as u64),
            ..sampler_cfg.clone()
        };
        let (y_hat, _) = accelerated_sample(model, bridge, codec, &x, &per_sample_cfg)?;
        match task {
            Task::Depth => {
                let r = depth_metrics(&y_hat, &pair.y, None)?;
                absrel += r.absrel;
                delta1 += r.delta1;
            }
            Task::Normal => {
                let r = normal_metrics(&y_hat, &pair.y, None)?;
                angle += r.mean_angle_deg;
                pct += r.pct_below_11_25;
            }
        }
    }
    let n = pairs.len() as f64;
    Ok(EvalRow {
        task,
        n_steps: sampler_cfg.n_steps,
        noise_kind: noise.map(|(k, _)| k),
        noise_level: noise.map_or(0.0, |(_, l)| l),
        absrel: if task == Task::Depth {
            absrel / n
        } else {
            f64::NAN
        },
        delta1: if task == Task::Depth {
            delta1 / n
        } else {
            f64::NAN
        },
        mean_angle: if task == Task::Normal {
            angle / n
        } else {
            f64::NAN
        },
        pct11_25: if task == Task::Normal { pct / n } else { f64::NAN },
        n_samples: pairs.len(),
        seed,
    })
}

/// AbsRel of predicting a constant map: under the affine protocol this
/// collapses to the per-image mean depth, the natural uninformed baseline.
pub fn constant_baseline_absrel(pairs: &[SamplePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        let constant = Tensor::zeros(pair.y.shape())?;
        let r = depth_metrics(&constant, &pair.y, None)?;
        total += r.absrel;
    }
    Ok(total / pairs.len() as f64)
}

/// The full noise grid (level 0 first), one row per setting.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    model: &dyn NoisePredictor,
    bridge: &BridgeCoefficients,
    codec: &LinearCodec,
    pairs: &[SamplePair],
    task: Task,
    sampler_cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    rows.push(evaluate_set(
        model,
        bridge,
        codec,
        pairs,
        task,
        sampler_cfg,
        None,
        seed,
    )?);
    for (kind, level) in NoiseKind::sweep_grid() {
        rows.push(evaluate_set(
            model,
            bridge,
            codec,
            pairs,
            task,
            sampler_cfg,
            Some((kind, level)),
            seed,
        )?);
    }
    Ok(rows)
}
