//! Per-batch scale alignment of prior depths.
//!
//! Prior inverse depths `d_hat` from one batch are related to the already
//! scaled patch inverse depths `d` by a single factor, `d ~ s * d_hat`. The
//! factor is initialized with a confidence-weighted median of `d / d_hat` and
//! refined by Huber IRLS on `sum_i c_i * rho(d_i - s * d_hat_i)`.

use thiserror::Error;

use crate::provider::PriorFrameData;

pub const DEFAULT_MIN_SAMPLES: usize = 10;
pub const DEFAULT_T_SIGMA: f64 = 0.5;
/// Huber threshold as a multiple of the residual MAD.
pub const HUBER_MAD_FACTOR: f64 = 1.345;
const DELTA_FLOOR: f64 = 1e-12;
const MAX_IRLS_ITERS: usize = 100;
const IRLS_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("only {available} samples survive gating (need {required})")]
    InsufficientSamples { available: usize, required: usize },
    #[error("scale estimate failed: {0}")]
    EstimateFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSample {
    /// Inverse depth from the current estimate.
    pub d: f64,
    /// Prior inverse depth sampled at the patch center.
    pub d_hat: f64,
    pub confidence: f64,
    pub rel_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleProblem {
    pub samples: Vec<ScaleSample>,
    pub t_sigma: f64,
    pub min_samples: usize,
}

impl ScaleProblem {
    pub fn new(samples: Vec<ScaleSample>, t_sigma: f64) -> Self {
        Self {
            samples,
            t_sigma,
            min_samples: DEFAULT_MIN_SAMPLES,
        }
    }

    /// Confidence-weighted Huber objective at scale `s` with threshold `delta`.
    pub fn objective(&self, s: f64, delta: f64) -> f64 {
        self.samples
            .iter()
            .map(|x| x.confidence * huber(x.d - s * x.d_hat, delta))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleEstimate {
    pub s_star: f64,
    /// Samples whose final residual lies inside the Huber threshold.
    pub inlier_count: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Huber threshold in effect at the final iterate.
    pub huber_delta: f64,
}

/// `rho(r) = r^2 / 2` for `|r| <= delta`, `delta * (|r| - delta / 2)` beyond.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn sample_ok(x: &ScaleSample) -> bool {
    x.d > 0.0
        && x.d.is_finite()
        && x.d_hat > 0.0
        && x.d_hat.is_finite()
        && x.confidence >= 0.0
        && x.confidence.is_finite()
}

/// Drops samples with invalid depths or with `rel_std > t_sigma` (NaN counts
/// as exceeding).
pub fn gate_samples(problem: &ScaleProblem) -> Result<ScaleProblem, ScaleError> {
    let samples: Vec<ScaleSample> = problem
        .samples
        .iter()
        .filter(|x| sample_ok(x) && x.rel_std <= problem.t_sigma)
        .copied()
        .collect();
    if samples.len() < problem.min_samples.max(1) {
        return Err(ScaleError::InsufficientSamples {
            available: samples.len(),
            required: problem.min_samples.max(1),
        });
    }
    Ok(ScaleProblem {
        samples,
        t_sigma: problem.t_sigma,
        min_samples: problem.min_samples,
    })
}

/// First ratio (ascending) at which the normalized cumulative weight reaches
/// one half. With zero total weight, the lower unweighted median.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Some(values[order[(order.len() - 1) / 2]]);
    }
    let mut acc = 0.0;
    for &i in &order {
        acc += weights[i];
        if acc / total >= 0.5 {
            return Some(values[i]);
        }
    }
    Some(values[*order.last().unwrap()])
}

/// Lower median (fixed tie rule for even counts).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

pub fn init_scale_weighted_median(problem: &ScaleProblem) -> Result<f64, ScaleError> {
    let ratios: Vec<f64> = problem.samples.iter().map(|x| x.d / x.d_hat).collect();
    let weights: Vec<f64> = problem.samples.iter().map(|x| x.confidence).collect();
    weighted_median(&ratios, &weights)
        .filter(|s| *s > 0.0 && s.is_finite())
        .ok_or_else(|| ScaleError::EstimateFailed("no usable samples".into()))
}

fn mad_delta(problem: &ScaleProblem, s: f64) -> f64 {
    let residuals: Vec<f64> = problem.samples.iter().map(|x| x.d - s * x.d_hat).collect();
    let med = lower_median(&residuals).unwrap_or(0.0);
    let dev: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
    (HUBER_MAD_FACTOR * lower_median(&dev).unwrap_or(0.0)).max(DELTA_FLOOR)
}

/// Huber IRLS on the scalar scale, re-deriving the threshold from the MAD of
/// the residuals at every iterate.
pub fn estimate_scale_irls(problem: &ScaleProblem, init: f64) -> Result<ScaleEstimate, ScaleError> {
    if !(init > 0.0 && init.is_finite()) {
        return Err(ScaleError::EstimateFailed(format!("bad initial scale {init}")));
    }
    if problem.samples.is_empty() {
        return Err(ScaleError::EstimateFailed("no samples".into()));
    }
    let mut s = init;
    let mut delta = mad_delta(problem, s);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_IRLS_ITERS {
        iterations += 1;
        let mut num = 0.0;
        let mut den = 0.0;
        for x in &problem.samples {
            let r = x.d - s * x.d_hat;
            let omega = if r.abs() <= delta { 1.0 } else { delta / r.abs() };
            num += omega * x.confidence * x.d * x.d_hat;
            den += omega * x.confidence * x.d_hat * x.d_hat;
        }
        let next = num / den;
        if !(next > 0.0 && next.is_finite()) {
            return Err(ScaleError::EstimateFailed(format!(
                "iterate {iterations} produced {next}"
            )));
        }
        let step = (next - s).abs() / s;
        s = next;
        delta = mad_delta(problem, s);
        if step < IRLS_TOL {
            converged = true;
            break;
        }
    }
    let inlier_count = problem
        .samples
        .iter()
        .filter(|x| (x.d - s * x.d_hat).abs() <= delta)
        .count();
    Ok(ScaleEstimate {
        s_star: s,
        inlier_count,
        iterations,
        converged,
        huber_delta: delta,
    })
}

/// Gate, initialize, and refine in one call.
pub fn estimate_scale(problem: &ScaleProblem) -> Result<ScaleEstimate, ScaleError> {
    let gated = gate_samples(problem)?;
    let init = init_scale_weighted_median(&gated)?;
    estimate_scale_irls(&gated, init)
}

/// Divides valid depths by `s_star`, so that sampled inverse depths become
/// `s_star * d_hat`. Invalid (non-positive) pixels are left untouched.
pub fn apply_scale(prior: &PriorFrameData, s_star: f64) -> PriorFrameData {
    let mut out = prior.clone();
    out.depth = prior
        .depth
        .map_exact(|d| if d > 0.0 { d / s_star } else { d });
    out.applied_scale = prior.applied_scale * s_star;
    out
}
