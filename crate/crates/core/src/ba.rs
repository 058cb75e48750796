//! Sliding-window bundle adjustment over frame poses and patch inverse depths.
//!
//! The linearized problem has the block structure
//!
//! ```text
//! [ B   E ] [dxi]   [v]
//! [ E^T C ] [dd ] = [w]
//! ```
//!
//! with `C` diagonal (one inverse depth per patch). Depths are eliminated with
//! the Schur complement `S = B - E C^-1 E^T`, which is also what the marginal
//! covariances are read from: `Sigma_T = S^-1` and
//! `Sigma_d = C^-1 + C^-1 E^T Sigma_T E C^-1`.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, Vector6};
use thiserror::Error;

use crate::geometry::{reproject, reproject_with_jacobians, se3_retract, CameraIntrinsics, Se3Pose};
use crate::provider::{FlowObservation, FrameId, Patch, PatchId};
use crate::scale::lower_median;

/// Frame weight used when a frame's uncertainty cannot be computed.
pub const W_MAX: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("window has no frames")]
    EmptyWindow,
    #[error("no valid observations: the window is underconstrained")]
    Underconstrained,
    #[error("observation of patch {0} references a patch outside the window")]
    UnknownPatch(PatchId),
    #[error("observation or patch references frame {0} outside the window")]
    UnknownFrame(FrameId),
    #[error("patch {0} has non-positive inverse depth")]
    BadDepth(PatchId),
    #[error("damped depth block is not positive (entry {0})")]
    SingularDepthBlock(usize),
    #[error("Schur complement is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<(FrameId, Se3Pose)>,
    /// Depth-prior weight per frame, aligned with `frames`.
    pub frame_weights: Vec<f64>,
    pub fixed_frames: BTreeSet<FrameId>,
    pub patches: Vec<Patch>,
    pub observations: Vec<FlowObservation>,
    /// Patches whose inverse depth is held constant (scale gauge).
    pub frozen_patches: BTreeSet<PatchId>,
    /// Holds every inverse depth constant (pose-only refinement).
    pub depths_frozen: bool,
}

impl Window {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            frames: Vec::new(),
            frame_weights: Vec::new(),
            fixed_frames: BTreeSet::new(),
            patches: Vec::new(),
            observations: Vec::new(),
            frozen_patches: BTreeSet::new(),
            depths_frozen: false,
        }
    }

    pub fn pose(&self, frame: FrameId) -> Option<&Se3Pose> {
        self.frames.iter().find(|(f, _)| *f == frame).map(|(_, p)| p)
    }

    fn depth_frozen(&self, patch: &Patch) -> bool {
        self.depths_frozen || self.frozen_patches.contains(&patch.patch_id)
    }
}

/// Frame and patch positions of a window, plus the resolved residual list.
struct Layout {
    frame_fixed: Vec<bool>,
    patch_frame: Vec<usize>,
    /// (observation index, patch index, source frame index, target frame index)
    edges: Vec<(usize, usize, usize, usize)>,
}

impl Layout {
    fn new(window: &Window) -> Result<Self, BaError> {
        if window.frames.is_empty() {
            return Err(BaError::EmptyWindow);
        }
        let frame_index: HashMap<FrameId, usize> = window
            .frames
            .iter()
            .enumerate()
            .map(|(i, (f, _))| (*f, i))
            .collect();
        let patch_index: HashMap<PatchId, usize> = window
            .patches
            .iter()
            .enumerate()
            .map(|(i, p)| (p.patch_id, i))
            .collect();
        let mut patch_frame = Vec::with_capacity(window.patches.len());
        for p in &window.patches {
            if !(p.inv_depth > 0.0) {
                return Err(BaError::BadDepth(p.patch_id));
            }
            patch_frame.push(
                *frame_index
                    .get(&p.owner_frame)
                    .ok_or(BaError::UnknownFrame(p.owner_frame))?,
            );
        }
        let mut edges = Vec::with_capacity(window.observations.len());
        for (n, obs) in window.observations.iter().enumerate() {
            let k = *patch_index
                .get(&obs.patch_id)
                .ok_or(BaError::UnknownPatch(obs.patch_id))?;
            let j = *frame_index
                .get(&obs.target_frame)
                .ok_or(BaError::UnknownFrame(obs.target_frame))?;
            let i = patch_frame[k];
            if obs.valid && i != j {
                edges.push((n, k, i, j));
            }
        }
        let frame_fixed = window
            .frames
            .iter()
            .map(|(f, _)| window.fixed_frames.contains(f))
            .collect();
        Ok(Self {
            frame_fixed,
            patch_frame,
            edges,
        })
    }
}

/// Block normal equations. `b`, `c`, `e` are undamped; `lambda` is added to
/// the diagonals of `b` and `c` by every solve and covariance routine.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSystem {
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub e: DMatrix<f64>,
    pub v: DVector<f64>,
    pub w: DVector<f64>,
    pub lambda: f64,
    /// Pose blocks clamped to identity (fixed frames).
    pub fixed_poses: Vec<bool>,
    /// Depth entries clamped to one (frozen or unobserved patches).
    pub fixed_depths: Vec<bool>,
}

impl NormalSystem {
    pub fn num_frames(&self) -> usize {
        self.b.nrows() / 6
    }

    pub fn num_patches(&self) -> usize {
        self.c.len()
    }

    /// Wraps raw blocks with no clamped entries.
    pub fn from_blocks(
        b: DMatrix<f64>,
        c: DVector<f64>,
        e: DMatrix<f64>,
        v: DVector<f64>,
        w: DVector<f64>,
        lambda: f64,
    ) -> Self {
        let fixed_poses = vec![false; b.nrows() / 6];
        let fixed_depths = vec![false; c.len()];
        Self {
            b,
            c,
            e,
            v,
            w,
            lambda,
            fixed_poses,
            fixed_depths,
        }
    }

    fn damped_b(&self) -> DMatrix<f64> {
        let mut b = self.b.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += self.lambda;
        }
        b
    }

    fn damped_c_inv(&self) -> Result<DVector<f64>, BaError> {
        let mut out = DVector::zeros(self.c.len());
        for (k, &c) in self.c.iter().enumerate() {
            let damped = c + self.lambda;
            if !(damped > 0.0) || !damped.is_finite() {
                return Err(BaError::SingularDepthBlock(k));
            }
            out[k] = 1.0 / damped;
        }
        Ok(out)
    }

    fn schur(&self, c_inv: &DVector<f64>) -> DMatrix<f64> {
        let mut e_scaled = self.e.clone();
        for (k, mut col) in e_scaled.column_iter_mut().enumerate() {
            col *= c_inv[k];
        }
        let mut s = self.damped_b() - &e_scaled * self.e.transpose();
        // Symmetrize to remove round-off asymmetry before factorization.
        let st = s.transpose();
        s += st;
        s *= 0.5;
        s
    }
}

/// Robust cost `rho(|r|)`: quadratic up to `delta`, linear beyond.
fn huber_norm_cost(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        0.5 * norm * norm
    } else {
        delta * (norm - 0.5 * delta)
    }
}

fn huber_norm_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

/// Assembles `J^T W J` and `-J^T W r` over all valid flow residuals, plus the
/// quadratic prior rows `w_f * (d_k - d_hat_k)^2` when `prior_enabled`.
pub fn build_normal_system(
    window: &Window,
    huber_px: f64,
    prior_enabled: bool,
) -> Result<NormalSystem, BaError> {
    let layout = Layout::new(window)?;
    assemble(window, &layout, huber_px, prior_enabled)
}

fn assemble(
    window: &Window,
    layout: &Layout,
    huber_px: f64,
    prior_enabled: bool,
) -> Result<NormalSystem, BaError> {
    let nf = window.frames.len();
    let np = window.patches.len();
    let mut b = DMatrix::<f64>::zeros(6 * nf, 6 * nf);
    let mut e = DMatrix::<f64>::zeros(6 * nf, np);
    let mut c = DVector::<f64>::zeros(np);
    let mut v = DVector::<f64>::zeros(6 * nf);
    let mut w = DVector::<f64>::zeros(np);
    let frozen: Vec<bool> = window
        .patches
        .iter()
        .map(|p| window.depth_frozen(p))
        .collect();
    let intr = &window.intrinsics;
    let mut n_valid = 0usize;

    for &(n, k, i, j) in &layout.edges {
        let obs = &window.observations[n];
        let patch = &window.patches[k];
        let Ok(jac) = reproject_with_jacobians(
            &window.frames[i].1,
            &window.frames[j].1,
            intr,
            &patch.center,
            patch.inv_depth,
        ) else {
            continue;
        };
        n_valid += 1;
        let r = jac.pixel.to_vector() - obs.observed.to_vector();
        let omega = huber_norm_weight(r.norm(), huber_px);
        let blocks = [(i, jac.d_pose_i), (j, jac.d_pose_j)];
        for &(a, ja) in &blocks {
            if layout.frame_fixed[a] {
                continue;
            }
            let g = -(ja.transpose() * r) * omega;
            for t in 0..6 {
                v[6 * a + t] += g[t];
            }
            for &(bb, jb) in &blocks {
                if layout.frame_fixed[bb] {
                    continue;
                }
                let h = ja.transpose() * jb * omega;
                let mut view = b.fixed_view_mut::<6, 6>(6 * a, 6 * bb);
                view += h;
            }
            if !frozen[k] {
                let h = ja.transpose() * jac.d_inv_depth * omega;
                for t in 0..6 {
                    e[(6 * a + t, k)] += h[t];
                }
            }
        }
        if !frozen[k] {
            c[k] += omega * jac.d_inv_depth.norm_squared();
            w[k] -= omega * jac.d_inv_depth.dot(&r);
        }
    }
    if n_valid == 0 {
        return Err(BaError::Underconstrained);
    }

    if prior_enabled {
        for (k, patch) in window.patches.iter().enumerate() {
            let wf = window.frame_weights[layout.patch_frame[k]];
            if frozen[k] || wf == 0.0 {
                continue;
            }
            c[k] += wf;
            w[k] -= wf * (patch.inv_depth - patch.prior_inv_depth);
        }
    }

    let mut fixed_depths = frozen;
    for k in 0..np {
        if fixed_depths[k] || c[k] == 0.0 {
            fixed_depths[k] = true;
            c[k] = 1.0;
            w[k] = 0.0;
            e.column_mut(k).fill(0.0);
        }
    }
    for (a, &fixed) in layout.frame_fixed.iter().enumerate() {
        if fixed {
            b.fixed_view_mut::<6, 6>(6 * a, 6 * a)
                .copy_from(&nalgebra::Matrix6::identity());
        }
    }

    Ok(NormalSystem {
        b,
        c,
        e,
        v,
        w,
        lambda: 0.0,
        fixed_poses: layout.frame_fixed.clone(),
        fixed_depths,
    })
}

/// Total robust cost: `sum rho(|r|) + 1/2 sum_f w_f sum_k (d_k - d_hat_k)^2`.
pub fn window_cost(window: &Window, huber_px: f64, prior_enabled: bool) -> Result<f64, BaError> {
    let layout = Layout::new(window)?;
    Ok(cost_with_layout(window, &layout, huber_px, prior_enabled))
}

fn cost_with_layout(window: &Window, layout: &Layout, huber_px: f64, prior_enabled: bool) -> f64 {
    let mut cost = 0.0;
    for &(n, k, i, j) in &layout.edges {
        let patch = &window.patches[k];
        if let Ok(px) = reproject(
            &window.frames[i].1,
            &window.frames[j].1,
            &window.intrinsics,
            &patch.center,
            patch.inv_depth,
        ) {
            cost += huber_norm_cost(px.distance(&window.observations[n].observed), huber_px);
        }
    }
    if prior_enabled {
        for (k, patch) in window.patches.iter().enumerate() {
            let wf = window.frame_weights[layout.patch_frame[k]];
            if window.depth_frozen(patch) || wf == 0.0 {
                continue;
            }
            let r = patch.inv_depth - patch.prior_inv_depth;
            cost += 0.5 * wf * r * r;
        }
    }
    cost
}

/// Mean reprojection error norm of each patch over its valid observations.
pub fn patch_mean_residuals(window: &Window) -> Result<Vec<Option<f64>>, BaError> {
    let layout = Layout::new(window)?;
    let mut sum = vec![0.0; window.patches.len()];
    let mut count = vec![0usize; window.patches.len()];
    for &(n, k, i, j) in &layout.edges {
        let patch = &window.patches[k];
        if let Ok(px) = reproject(
            &window.frames[i].1,
            &window.frames[j].1,
            &window.intrinsics,
            &patch.center,
            patch.inv_depth,
        ) {
            sum[k] += px.distance(&window.observations[n].observed);
            count[k] += 1;
        }
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// Solves the damped block system through the Schur complement on the depths.
pub fn solve_schur(sys: &NormalSystem) -> Result<(DVector<f64>, DVector<f64>), BaError> {
    let c_inv = sys.damped_c_inv()?;
    let s = sys.schur(&c_inv);
    let rhs = &sys.v - &sys.e * sys.w.component_mul(&c_inv);
    let chol = s.cholesky().ok_or(BaError::NotPositiveDefinite)?;
    let dxi = chol.solve(&rhs);
    let dd = (&sys.w - sys.e.transpose() * &dxi).component_mul(&c_inv);
    Ok((dxi, dd))
}

/// `Sigma_T = (B - E C^-1 E^T)^-1`, with fixed-frame blocks reported as zero.
pub fn pose_covariance(sys: &NormalSystem) -> Result<DMatrix<f64>, BaError> {
    let c_inv = sys.damped_c_inv()?;
    let s = sys.schur(&c_inv);
    let chol = s.cholesky().ok_or(BaError::NotPositiveDefinite)?;
    let mut cov = chol.inverse();
    for (a, &fixed) in sys.fixed_poses.iter().enumerate() {
        if fixed {
            cov.rows_mut(6 * a, 6).fill(0.0);
            cov.columns_mut(6 * a, 6).fill(0.0);
        }
    }
    Ok(cov)
}

/// Per-patch `diag(C^-1 + C^-1 E^T Sigma_T E C^-1)`, without forming the
/// full depth covariance. Clamped depths are reported with zero variance.
pub fn depth_marginal_covariance(
    sys: &NormalSystem,
    pose_cov: &DMatrix<f64>,
) -> Result<Vec<f64>, BaError> {
    let c_inv = sys.damped_c_inv()?;
    let cov_e = pose_cov * &sys.e;
    Ok((0..sys.num_patches())
        .map(|k| {
            if sys.fixed_depths[k] {
                return 0.0;
            }
            let quad = sys.e.column(k).dot(&cov_e.column(k));
            (c_inv[k] + c_inv[k] * c_inv[k] * quad).max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDepthStd {
    pub per_patch: Vec<f64>,
    /// Lower median over each frame's live patches; `None` without any.
    pub per_frame_median: Vec<Option<f64>>,
}

/// `sigma_rel = sqrt(var) / d`, i.e. `sigma_z / z` for `z = 1/d`.
/// `live` marks patches that participate in the per-frame statistic.
pub fn relative_depth_std(
    inv_depths: &[f64],
    depth_var: &[f64],
    patch_frame: &[usize],
    live: &[bool],
    num_frames: usize,
) -> RelativeDepthStd {
    let per_patch: Vec<f64> = inv_depths
        .iter()
        .zip(depth_var)
        .map(|(&d, &var)| var.max(0.0).sqrt() / d)
        .collect();
    let mut buckets = vec![Vec::new(); num_frames];
    for (k, &f) in patch_frame.iter().enumerate() {
        if live[k] && per_patch[k].is_finite() {
            buckets[f].push(per_patch[k]);
        }
    }
    RelativeDepthStd {
        per_patch,
        per_frame_median: buckets.iter().map(|b| lower_median(b)).collect(),
    }
}

/// Sigmoid frame weight `1 / (1 + exp(-alpha (sigma - beta)))`; an undefined
/// uncertainty maps to [`W_MAX`].
pub fn frame_weight(sigma_med: Option<f64>, alpha: f64, beta: f64) -> f64 {
    match sigma_med {
        Some(s) if !s.is_nan() => 1.0 / (1.0 + (-alpha * (s - beta)).exp()),
        _ => W_MAX,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub pose_cov: DMatrix<f64>,
    /// Aligned with `Window::patches`.
    pub depth_var: Vec<f64>,
    pub rel_depth_std: Vec<f64>,
    /// Aligned with `Window::frames`.
    pub frame_median_rel_std: Vec<Option<f64>>,
}

pub fn covariance_report(window: &Window, config: &LmConfig) -> Result<CovarianceReport, BaError> {
    let layout = Layout::new(window)?;
    let mut sys = assemble(window, &layout, config.huber_px, config.prior_enabled)?;
    sys.lambda = config.cov_damping;
    report_from_system(window, &layout, &sys)
}

fn report_from_system(
    window: &Window,
    layout: &Layout,
    sys: &NormalSystem,
) -> Result<CovarianceReport, BaError> {
    let pose_cov = pose_covariance(sys)?;
    let depth_var = depth_marginal_covariance(sys, &pose_cov)?;
    let inv_depths: Vec<f64> = window.patches.iter().map(|p| p.inv_depth).collect();
    let live: Vec<bool> = sys.fixed_depths.iter().map(|f| !f).collect();
    let mut depth_var = depth_var;
    // Unobserved patches carry no information at all.
    for (k, p) in window.patches.iter().enumerate() {
        if sys.fixed_depths[k] && !window.depth_frozen(p) {
            depth_var[k] = f64::INFINITY;
        }
    }
    let rel = relative_depth_std(
        &inv_depths,
        &depth_var,
        &layout.patch_frame,
        &live,
        window.frames.len(),
    );
    Ok(CovarianceReport {
        pose_cov,
        depth_var,
        rel_depth_std: rel.per_patch,
        frame_median_rel_std: rel.per_frame_median,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub huber_px: f64,
    pub prior_enabled: bool,
    pub lambda0: f64,
    pub lm_down: f64,
    pub lm_up: f64,
    pub max_iters: usize,
    pub eps_cost: f64,
    pub eps_step: f64,
    pub d_min: f64,
    /// Damping used when reading covariances off the final system.
    pub cov_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            huber_px: 2.0,
            prior_enabled: true,
            lambda0: 1e-4,
            lm_down: 0.5,
            lm_up: 4.0,
            max_iters: 50,
            eps_cost: 1e-8,
            eps_step: 1e-8,
            d_min: 1e-6,
            cov_damping: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmStats {
    /// Linear solves attempted.
    pub iterations: usize,
    pub accepted: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub lambda: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub window: Window,
    /// `None` when the final Schur complement is not positive definite.
    pub covariance: Option<CovarianceReport>,
    pub stats: LmStats,
}

fn apply_step(
    window: &Window,
    sys: &NormalSystem,
    dxi: &DVector<f64>,
    dd: &DVector<f64>,
    d_min: f64,
) -> Window {
    let mut next = window.clone();
    for (a, (_, pose)) in next.frames.iter_mut().enumerate() {
        if sys.fixed_poses[a] {
            continue;
        }
        let delta = Vector6::from_iterator(dxi.rows(6 * a, 6).iter().copied());
        *pose = se3_retract(pose, &delta);
    }
    for (k, patch) in next.patches.iter_mut().enumerate() {
        if sys.fixed_depths[k] {
            continue;
        }
        patch.inv_depth = (patch.inv_depth + dd[k]).max(d_min);
    }
    next
}

/// Costs below this are treated as an exact fit.
const COST_FLOOR: f64 = 1e-24;

/// Levenberg-Marquardt over the window. Steps are accepted only when they
/// reduce the total robust cost.
pub fn lm_optimize(window: Window, config: &LmConfig) -> Result<LmOutcome, BaError> {
    let layout = Layout::new(&window)?;
    let mut current = window;
    let mut cost = cost_with_layout(&current, &layout, config.huber_px, config.prior_enabled);
    let initial_cost = cost;
    let mut lambda = config.lambda0;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut converged = cost <= COST_FLOOR;

    let mut sys = assemble(&current, &layout, config.huber_px, config.prior_enabled)?;
    while !converged && iterations < config.max_iters {
        iterations += 1;
        sys.lambda = lambda;
        let (dxi, dd) = match solve_schur(&sys) {
            Ok(step) => step,
            Err(_) => {
                lambda *= config.lm_up;
                continue;
            }
        };
        let step_norm = dxi.amax().max(dd.amax());
        let candidate = apply_step(&current, &sys, &dxi, &dd, config.d_min);
        let new_cost = cost_with_layout(&candidate, &layout, config.huber_px, config.prior_enabled);
        if new_cost < cost {
            let rel_decrease = (cost - new_cost) / cost;
            current = candidate;
            cost = new_cost;
            accepted += 1;
            lambda *= config.lm_down;
            if rel_decrease < config.eps_cost || step_norm < config.eps_step || cost <= COST_FLOOR {
                converged = true;
            } else {
                sys = assemble(&current, &layout, config.huber_px, config.prior_enabled)?;
            }
        } else {
            if step_norm < config.eps_step {
                converged = true;
            }
            lambda *= config.lm_up;
        }
    }

    let covariance = {
        let mut cov_sys = assemble(&current, &layout, config.huber_px, config.prior_enabled)?;
        cov_sys.lambda = config.cov_damping;
        report_from_system(&current, &layout, &cov_sys).ok()
    };
    Ok(LmOutcome {
        window: current,
        covariance,
        stats: LmStats {
            iterations,
            accepted,
            initial_cost,
            final_cost: cost,
            lambda,
            converged,
        },
    })
}

/// Dense assembly of the damped full Hessian `[[B + lambda I, E], [E^T, C + lambda I]]`
/// and right-hand side, for verification against the block routines.
pub fn dense_system(sys: &NormalSystem) -> (DMatrix<f64>, DVector<f64>) {
    let n6 = sys.b.nrows();
    let np = sys.c.len();
    let mut h = DMatrix::zeros(n6 + np, n6 + np);
    h.view_mut((0, 0), (n6, n6)).copy_from(&sys.damped_b());
    h.view_mut((0, n6), (n6, np)).copy_from(&sys.e);
    h.view_mut((n6, 0), (np, n6)).copy_from(&sys.e.transpose());
    for k in 0..np {
        h[(n6 + k, n6 + k)] = sys.c[k] + sys.lambda;
    }
    let mut rhs = DVector::zeros(n6 + np);
    rhs.rows_mut(0, n6).copy_from(&sys.v);
    rhs.rows_mut(n6, np).copy_from(&sys.w);
    (h, rhs)
}
