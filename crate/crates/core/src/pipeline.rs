//! Online tracking and mapping loop.
//!
//! Every frame is tracked pose-only against the patches of the current window.
//! Frames that move far enough (or after a fixed gap) become keyframes: they
//! trigger a prior request for the recent keyframes plus themselves, a scale
//! alignment of that batch, patch spawning on the static region, and a
//! windowed bundle adjustment. Non-keyframe poses are stored relative to the
//! keyframe they were tracked from and follow it until it leaves the window.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ba::{
    covariance_report, frame_weight, lm_optimize, patch_mean_residuals, BaError,
    CovarianceReport, LmConfig, LmOutcome, Window,
};
use crate::eval::{write_tum, TrajectoryEntry};
use crate::geometry::{reproject, Se3Pose};
use crate::provider::{
    sample_static_patches, FlowObservation, FrameId, Patch, PatchId, PriorFrameData,
    ProviderError, SequenceProvider, DEFAULT_BORDER_PX,
};
use crate::raster::Raster;
use crate::scale::{
    apply_scale, estimate_scale, ScaleError, ScaleEstimate, ScaleProblem, ScaleSample,
};

/// Keyframes sampling fewer static pixels than this spawn no patches.
pub const MIN_SPAWN_PATCHES: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("bundle adjustment failed: {0}")]
    Ba(#[from] BaError),
    #[error("tracking lost at frame {0}: no valid observations")]
    TrackingLost(FrameId),
    #[error("frames must arrive in order: expected {expected}, got {got}")]
    OutOfOrder { expected: FrameId, got: FrameId },
}

/// Levenberg-Marquardt settings exposed through the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSettings {
    pub lambda0: f64,
    pub lm_down: f64,
    pub lm_up: f64,
    pub max_iters: usize,
    pub eps_cost: f64,
    pub eps_step: f64,
    pub d_min: f64,
    pub cov_damping: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        let d = LmConfig::default();
        Self {
            lambda0: d.lambda0,
            lm_down: d.lm_down,
            lm_up: d.lm_up,
            max_iters: d.max_iters,
            eps_cost: d.eps_cost,
            eps_step: d.eps_step,
            d_min: d.d_min,
            cov_damping: d.cov_damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Patches spawned per keyframe.
    pub k_patches: usize,
    /// Keyframes kept in the optimization window.
    pub f_window: usize,
    /// Frames per prior request, current frame included.
    pub n_batch: usize,
    /// Motion-probability threshold for static sampling.
    pub s_d: f64,
    /// Relative depth std gate for scale samples.
    pub t_sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub huber_px: f64,
    pub lm: LmSettings,
    pub use_mask: bool,
    pub use_prior: bool,
    pub use_uncertainty: bool,
    /// Prior weight used when `use_uncertainty` is off.
    pub fixed_weight: f64,
    pub kf_flow_px: f64,
    pub kf_max_gap: u32,
    pub bootstrap_px: f64,
    pub max_bootstrap_frames: u32,
    pub border_px: u32,
    /// Patches whose mean residual exceeds `retire_factor * huber_px` are dropped.
    pub retire_factor: f64,
    pub min_scale_samples: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_patches: 96,
            f_window: 10,
            n_batch: 6,
            s_d: 0.5,
            t_sigma: crate::scale::DEFAULT_T_SIGMA,
            alpha: 10.0,
            beta: 0.2,
            huber_px: 2.0,
            lm: LmSettings::default(),
            use_mask: true,
            use_prior: true,
            use_uncertainty: true,
            fixed_weight: 1.0,
            kf_flow_px: 8.0,
            kf_max_gap: 5,
            bootstrap_px: 4.0,
            max_bootstrap_frames: 30,
            border_px: DEFAULT_BORDER_PX,
            retire_factor: 4.0,
            min_scale_samples: crate::scale::DEFAULT_MIN_SAMPLES,
            seed: 0,
        }
    }
}

/// The five ablation settings: (mask, prior, uncertainty).
pub const ABLATIONS: [(&str, bool, bool, bool); 5] = [
    ("a", false, false, false),
    ("b", false, true, true),
    ("c", true, false, false),
    ("d", true, true, false),
    ("e", true, true, true),
];

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.k_patches < 8 {
            return fail("k_patches must be at least 8");
        }
        if self.f_window < 3 {
            return fail("f_window must be at least 3");
        }
        if self.n_batch < 2 {
            return fail("n_batch must be at least 2");
        }
        if !(self.s_d > 0.0 && self.s_d <= 1.0) {
            return fail("s_d must lie in (0, 1]");
        }
        if !(self.t_sigma > 0.0) {
            return fail("t_sigma must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return fail("alpha must be non-negative and beta finite");
        }
        if !(self.huber_px > 0.0) {
            return fail("huber_px must be positive");
        }
        if !(self.fixed_weight >= 0.0 && self.fixed_weight.is_finite()) {
            return fail("fixed_weight must be non-negative");
        }
        if !(self.kf_flow_px > 0.0 && self.bootstrap_px > 0.0) {
            return fail("flow thresholds must be positive");
        }
        if self.kf_max_gap == 0 {
            return fail("kf_max_gap must be positive");
        }
        if !(self.retire_factor > 0.0) {
            return fail("retire_factor must be positive");
        }
        let lm = &self.lm;
        if !(lm.lambda0 > 0.0 && lm.lm_down > 0.0 && lm.lm_down < 1.0 && lm.lm_up > 1.0) {
            return fail("LM damping schedule must satisfy lambda0 > 0, 0 < down < 1 < up");
        }
        if lm.max_iters == 0 || !(lm.d_min > 0.0) || lm.cov_damping < 0.0 {
            return fail("LM needs max_iters > 0, d_min > 0 and cov_damping >= 0");
        }
        Ok(())
    }

    /// Applies ablation row `name` ("a" to "e").
    pub fn with_ablation(mut self, name: &str) -> Option<Self> {
        let &(_, mask, prior, unc) = ABLATIONS.iter().find(|r| r.0 == name)?;
        self.use_mask = mask;
        self.use_prior = prior;
        self.use_uncertainty = unc;
        Some(self)
    }

    pub fn lm_config(&self) -> LmConfig {
        let lm = &self.lm;
        LmConfig {
            huber_px: self.huber_px,
            prior_enabled: self.use_prior,
            lambda0: lm.lambda0,
            lm_down: lm.lm_down,
            lm_up: lm.lm_up,
            max_iters: lm.max_iters,
            eps_cost: lm.eps_cost,
            eps_step: lm.eps_step,
            d_min: lm.d_min,
            cov_damping: lm.cov_damping,
        }
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of `value`'s compact JSON form. Field order follows the struct
/// definitions, so equal configs always hash equally.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&json))
}

/// The `n_batch - 1` most recent keyframes, oldest first.
pub fn select_keyframes(history: &[FrameId], n_batch: usize) -> Vec<FrameId> {
    let keep = n_batch.saturating_sub(1);
    history[history.len().saturating_sub(keep)..].to_vec()
}

/// Keyframe rule: median flow since the last keyframe above `kf_flow_px`, or
/// an index gap of at least `kf_max_gap`.
pub fn is_keyframe(median_flow: f64, gap: u32, config: &PipelineConfig) -> bool {
    median_flow > config.kf_flow_px || gap >= config.kf_max_gap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Waiting for enough parallax to create the second keyframe.
    Bootstrapping,
    /// `max_bootstrap_frames` frames seen without enough parallax.
    NotInitialized,
    Tracking,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeDiagnostics {
    pub frame_id: FrameId,
    pub batch_id: u64,
    pub s_star: f64,
    /// True when scale estimation fell back to 1 and the prior is unused.
    pub unscaled: bool,
    /// Inliers of the accepted scale fit (0 on fallback).
    pub scale_inliers: usize,
    /// Median relative depth std of this keyframe's patches after BA.
    pub sigma_med: f64,
    /// Prior weight `sigma_med` assigns this keyframe in later solves.
    pub w_f: f64,
    pub n_patches: usize,
    pub n_retired: usize,
}

impl KeyframeDiagnostics {
    /// `frame_id s_star sigma_med w_f n_patches n_retired`
    pub fn line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.frame_id, self.s_star, self.sigma_med, self.w_f, self.n_patches, self.n_retired
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame_id: FrameId,
    pub keyframe: Option<KeyframeDiagnostics>,
    /// Scale-aligned prior depth of a new keyframe.
    pub aligned_depth: Option<Raster>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEstimate {
    /// `(frame_id, timestamp, world-to-camera pose)` in frame order.
    pub poses: Vec<(FrameId, f64, Se3Pose)>,
}

impl TrajectoryEstimate {
    pub fn entries(&self) -> Vec<TrajectoryEntry> {
        self.poses
            .iter()
            .map(|&(_, timestamp, pose)| TrajectoryEntry { timestamp, pose })
            .collect()
    }

    pub fn poses_only(&self) -> Vec<Se3Pose> {
        self.poses.iter().map(|p| p.2).collect()
    }

    pub fn write_tum(&self, path: &Path, config_hash: &str) -> std::io::Result<()> {
        write_tum(path, &self.entries(), &[&format!("config_hash {config_hash}")])
    }
}

#[derive(Debug, Clone, Copy)]
enum PoseRecord {
    Keyframe,
    Relative { reference: FrameId, rel: Se3Pose },
}

pub struct Pipeline<P: SequenceProvider> {
    provider: P,
    config: PipelineConfig,
    lm: LmConfig,
    rng: ChaCha8Rng,
    status: Status,
    next_frame: FrameId,
    timestamps: Vec<f64>,
    records: Vec<PoseRecord>,
    window: Window,
    keyframes: Vec<FrameId>,
    finalized: HashMap<FrameId, Se3Pose>,
    unscaled: BTreeSet<FrameId>,
    prev_sigma: BTreeMap<FrameId, Option<f64>>,
    has_report: bool,
    last_s_star: Option<f64>,
    next_patch_id: PatchId,
    diagnostics: Vec<KeyframeDiagnostics>,
}

impl<P: SequenceProvider> Pipeline<P> {
    pub fn new(provider: P, config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let intr = provider.intrinsics();
        Ok(Self {
            lm: config.lm_config(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            provider,
            config,
            status: Status::Bootstrapping,
            next_frame: 0,
            timestamps: Vec::new(),
            records: Vec::new(),
            window: Window::new(intr),
            keyframes: Vec::new(),
            finalized: HashMap::new(),
            unscaled: BTreeSet::new(),
            prev_sigma: BTreeMap::new(),
            has_report: false,
            last_s_star: None,
            next_patch_id: 0,
            diagnostics: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn provider(&self) -> &P {
        &self.provider
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn keyframes(&self) -> &[FrameId] {
        &self.keyframes
    }

    pub fn diagnostics(&self) -> &[KeyframeDiagnostics] {
        &self.diagnostics
    }

    /// Processes every remaining frame of the provider.
    pub fn run(&mut self) -> Result<Vec<FrameReport>, PipelineError> {
        let n = self.provider.frame_count() as FrameId;
        (self.next_frame..n).map(|f| self.process_frame(f)).collect()
    }

    pub fn process_frame(&mut self, frame: FrameId) -> Result<FrameReport, PipelineError> {
        if frame != self.next_frame {
            return Err(PipelineError::OutOfOrder {
                expected: self.next_frame,
                got: frame,
            });
        }
        let timestamp = self.provider.timestamp(frame)?;
        let report = if frame == 0 {
            self.start(timestamp)?
        } else {
            let (pose, obs, flow) = self.track(frame)?;
            let gap = frame - self.keyframes.last().copied().unwrap_or(0);
            let promote = match self.status {
                Status::Tracking => is_keyframe(flow, gap, &self.config),
                _ => flow > self.config.bootstrap_px,
            };
            self.timestamps.push(timestamp);
            if promote {
                let report = self.add_keyframe(frame, pose, obs)?;
                self.status = Status::Tracking;
                report
            } else {
                let reference = *self.keyframes.last().expect("frame 0 is a keyframe");
                let ref_pose = self.keyframe_pose(reference);
                self.records.push(PoseRecord::Relative {
                    reference,
                    rel: pose.compose(&ref_pose.inverse()),
                });
                if self.status == Status::Bootstrapping
                    && frame >= self.config.max_bootstrap_frames
                {
                    self.status = Status::NotInitialized;
                }
                FrameReport {
                    frame_id: frame,
                    keyframe: None,
                    aligned_depth: None,
                }
            }
        };
        self.next_frame += 1;
        Ok(report)
    }

    /// Poses of all processed frames under the current estimate.
    pub fn trajectory(&self) -> TrajectoryEstimate {
        let poses = (0..self.records.len())
            .map(|f| (f as FrameId, self.timestamps[f], self.frame_pose(f as FrameId)))
            .collect();
        TrajectoryEstimate { poses }
    }

    fn keyframe_pose(&self, frame: FrameId) -> Se3Pose {
        self.window
            .pose(frame)
            .copied()
            .or_else(|| self.finalized.get(&frame).copied())
            .expect("keyframes are either in the window or finalized")
    }

    fn frame_pose(&self, frame: FrameId) -> Se3Pose {
        match self.records[frame as usize] {
            PoseRecord::Keyframe => self.keyframe_pose(frame),
            PoseRecord::Relative { reference, rel } => rel.compose(&self.keyframe_pose(reference)),
        }
    }

    fn start(&mut self, timestamp: f64) -> Result<FrameReport, PipelineError> {
        let resp = self.provider.request_priors(&[0])?;
        let prior = resp.frames.into_iter().next().expect("one frame requested");
        let patches = self.spawn_patches(&prior)?;
        let n_patches = patches.len();
        self.window.frames.push((0, Se3Pose::identity()));
        self.window.frame_weights.push(0.0);
        self.window.patches = patches;
        self.keyframes.push(0);
        self.records.push(PoseRecord::Keyframe);
        self.timestamps.push(timestamp);
        self.last_s_star = Some(1.0);
        let diag = KeyframeDiagnostics {
            frame_id: 0,
            batch_id: resp.batch_id,
            s_star: 1.0,
            unscaled: false,
            scale_inliers: 0,
            sigma_med: f64::NAN,
            w_f: f64::NAN,
            n_patches,
            n_retired: 0,
        };
        self.diagnostics.push(diag.clone());
        Ok(FrameReport {
            frame_id: 0,
            keyframe: Some(diag),
            aligned_depth: Some(prior.depth),
        })
    }

    fn spawn_patches(&mut self, prior: &PriorFrameData) -> Result<Vec<Patch>, PipelineError> {
        let s_d = if self.config.use_mask {
            self.config.s_d
        } else {
            f64::INFINITY
        };
        let k = self.config.k_patches;
        let border = self.config.border_px;
        let samples = match sample_static_patches(prior, s_d, k, border, &mut self.rng) {
            Ok(s) => s,
            Err(ProviderError::NoStaticRegion(n)) if n >= MIN_SPAWN_PATCHES => {
                sample_static_patches(prior, s_d, n, border, &mut self.rng)?
            }
            Err(ProviderError::NoStaticRegion(_)) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(samples
            .into_iter()
            .map(|s| {
                let id = self.next_patch_id;
                self.next_patch_id += 1;
                s.into_patch(id)
            })
            .collect())
    }

    /// Pose-only tracking of `frame` against the window's patches. Returns the
    /// pose, the observations, and the median flow since the last keyframe.
    fn track(
        &mut self,
        frame: FrameId,
    ) -> Result<(Se3Pose, Vec<FlowObservation>, f64), PipelineError> {
        let prev = self.frame_pose(frame - 1);
        let predicted = if frame >= 2 {
            let before = self.frame_pose(frame - 2);
            prev.compose(&before.inverse()).compose(&prev)
        } else {
            prev
        };
        let obs = self.provider.track_patches(&self.window.patches, frame)?;

        let mut local = self.window.clone();
        local.fixed_frames = local.frames.iter().map(|f| f.0).collect();
        local.frames.push((frame, predicted));
        local.frame_weights.push(0.0);
        local.observations = obs.clone();
        local.depths_frozen = true;
        local.frozen_patches.clear();
        let lm = LmConfig {
            prior_enabled: false,
            ..self.lm
        };
        let outcome = match lm_optimize(local, &lm) {
            Ok(o) => o,
            Err(BaError::Underconstrained) => return Err(PipelineError::TrackingLost(frame)),
            Err(e) => return Err(e.into()),
        };
        let pose = *outcome.window.pose(frame).expect("frame was added");

        let last_kf = *self.keyframes.last().expect("frame 0 is a keyframe");
        let kf_pose = self.keyframe_pose(last_kf);
        let patch_index: HashMap<PatchId, usize> = self
            .window
            .patches
            .iter()
            .enumerate()
            .map(|(k, p)| (p.patch_id, k))
            .collect();
        let mut flows: Vec<f64> = obs
            .iter()
            .filter(|o| o.valid)
            .filter_map(|o| {
                let patch = &self.window.patches[patch_index[&o.patch_id]];
                let at_kf = if patch.owner_frame == last_kf {
                    patch.center
                } else {
                    let owner = self.window.pose(patch.owner_frame)?;
                    reproject(owner, &kf_pose, &self.window.intrinsics, &patch.center, patch.inv_depth)
                        .ok()?
                };
                Some(at_kf.distance(&o.observed))
            })
            .collect();
        if flows.is_empty() {
            return Err(PipelineError::TrackingLost(frame));
        }
        flows.sort_by(f64::total_cmp);
        let median = flows[(flows.len() - 1) / 2];
        Ok((pose, obs, median))
    }

    fn scale_samples(
        &self,
        historical: &BTreeMap<FrameId, &PriorFrameData>,
    ) -> Vec<ScaleSample> {
        let gate = self.config.use_uncertainty && self.has_report;
        self.window
            .patches
            .iter()
            .filter_map(|p| {
                let prior = historical.get(&p.owner_frame)?;
                let (u, v) = (p.center.u as u32, p.center.v as u32);
                if !prior.depth_valid(u, v) {
                    return None;
                }
                Some(ScaleSample {
                    d: p.inv_depth,
                    d_hat: 1.0 / prior.depth.get(u, v),
                    confidence: prior.confidence.get(u, v),
                    rel_std: if gate { p.rel_depth_std } else { 0.0 },
                })
            })
            .collect()
    }

    fn add_keyframe(
        &mut self,
        frame: FrameId,
        pose: Se3Pose,
        obs: Vec<FlowObservation>,
    ) -> Result<FrameReport, PipelineError> {
        let hist = select_keyframes(&self.keyframes, self.config.n_batch);
        let mut request = hist.clone();
        request.push(frame);
        let resp = self.provider.request_priors(&request)?;

        // One scale for the whole batch, fitted on the historical frames.
        let historical: BTreeMap<FrameId, &PriorFrameData> = resp
            .frames
            .iter()
            .filter(|f| f.frame_id != frame)
            .map(|f| (f.frame_id, f))
            .collect();
        let t_sigma = if self.config.use_uncertainty && self.has_report {
            self.config.t_sigma
        } else {
            f64::INFINITY
        };
        let mut problem = ScaleProblem::new(self.scale_samples(&historical), t_sigma);
        problem.min_samples = self.config.min_scale_samples;
        let (s_star, fitted, scale_inliers) = match fit_batch_scale(&problem) {
            Ok(est) => (est.s_star, true, est.inlier_count),
            Err(_) => (self.last_s_star.unwrap_or(1.0), false, 0),
        };
        let unscaled = !fitted && self.last_s_star.is_none();
        if fitted {
            self.last_s_star = Some(s_star);
        }
        let scaled: Vec<PriorFrameData> =
            resp.frames.iter().map(|f| apply_scale(f, s_star)).collect();
        let current = scaled
            .iter()
            .find(|f| f.frame_id == frame)
            .expect("current frame was requested");

        if unscaled {
            self.unscaled.insert(frame);
        }

        let new_patches = self.spawn_patches(current)?;
        let aligned_depth = current.depth.clone();
        let others: Vec<FrameId> = self.window.frames.iter().map(|f| f.0).collect();
        let mut new_obs = Vec::new();
        if !new_patches.is_empty() {
            for &f in &others {
                new_obs.extend(self.provider.track_patches(&new_patches, f)?);
            }
        }
        let n_new = new_patches.len();
        self.window.frames.push((frame, pose));
        self.window.frame_weights.push(0.0);
        self.window.patches.extend(new_patches);
        self.window.observations.extend(obs);
        self.window.observations.extend(new_obs);
        self.keyframes.push(frame);
        self.records.push(PoseRecord::Keyframe);
        self.slide_window();

        let weights: Vec<f64> = self
            .window
            .frames
            .iter()
            .map(|&(f, _)| self.prior_weight(f))
            .collect();
        self.window.frame_weights = weights;
        self.fix_gauge();

        let outcome = lm_optimize(self.window.clone(), &self.lm)?;
        self.window = outcome.window.clone();
        let mut sigma_med = f64::NAN;
        if let Some(report) = self.gauge_covariance(&outcome) {
            self.has_report = true;
            for (p, &s) in self.window.patches.iter_mut().zip(&report.rel_depth_std) {
                p.rel_depth_std = s;
            }
            self.prev_sigma = self
                .window
                .frames
                .iter()
                .zip(&report.frame_median_rel_std)
                .map(|(&(f, _), &s)| (f, s))
                .collect();
            sigma_med = self.prev_sigma[&frame].unwrap_or(f64::NAN);
        }
        let w_f = self.prior_weight(frame);
        let n_retired = self.retire_outliers()?;

        let diag = KeyframeDiagnostics {
            frame_id: frame,
            batch_id: resp.batch_id,
            s_star,
            unscaled,
            scale_inliers,
            sigma_med,
            w_f,
            n_patches: n_new,
            n_retired,
        };
        self.diagnostics.push(diag.clone());
        Ok(FrameReport {
            frame_id: frame,
            keyframe: Some(diag),
            aligned_depth: Some(aligned_depth),
        })
    }

    fn prior_weight(&self, frame: FrameId) -> f64 {
        if self.unscaled.contains(&frame) {
            0.0
        } else if self.config.use_uncertainty {
            let sigma = self.prev_sigma.get(&frame).copied().flatten();
            frame_weight(sigma, self.config.alpha, self.config.beta)
        } else {
            self.config.fixed_weight
        }
    }

    /// Drops the oldest keyframes beyond the window length together with
    /// their patches and every observation touching them.
    fn slide_window(&mut self) {
        while self.window.frames.len() > self.config.f_window {
            let (old, pose) = self.window.frames.remove(0);
            self.window.frame_weights.remove(0);
            self.finalized.insert(old, pose);
            let gone: BTreeSet<PatchId> = self
                .window
                .patches
                .iter()
                .filter(|p| p.owner_frame == old)
                .map(|p| p.patch_id)
                .collect();
            self.window.patches.retain(|p| p.owner_frame != old);
            self.window
                .observations
                .retain(|o| o.target_frame != old && !gone.contains(&o.patch_id));
            self.prev_sigma.remove(&old);
        }
    }

    /// First patch of the oldest frame, else the first patch overall.
    fn anchor_patch(&self) -> Option<PatchId> {
        let oldest = self.window.frames[0].0;
        self.window
            .patches
            .iter()
            .filter(|p| p.owner_frame == oldest)
            .chain(self.window.patches.iter())
            .map(|p| p.patch_id)
            .next()
    }

    /// Freezes the oldest pose; without any active prior also freezes the
    /// anchor patch depth to pin the scale.
    fn fix_gauge(&mut self) {
        let oldest = self.window.frames[0].0;
        self.window.fixed_frames = BTreeSet::from([oldest]);
        self.window.frozen_patches.clear();
        let prior_active =
            self.config.use_prior && self.window.frame_weights.iter().any(|&w| w > 0.0);
        if !prior_active {
            self.window.frozen_patches.extend(self.anchor_patch());
        }
    }

    /// Covariances in the gauge "oldest pose and anchor depth held", whatever
    /// gauge the optimization used, so that uncertainties are comparable
    /// across configurations and exclude the global scale freedom.
    fn gauge_covariance(&self, outcome: &LmOutcome) -> Option<CovarianceReport> {
        let anchor = self.anchor_patch()?;
        if self.window.frozen_patches.contains(&anchor) {
            return outcome.covariance.clone();
        }
        let mut held = self.window.clone();
        held.frozen_patches.insert(anchor);
        covariance_report(&held, &self.lm).ok()
    }

    fn retire_outliers(&mut self) -> Result<usize, PipelineError> {
        let limit = self.config.retire_factor * self.config.huber_px;
        let residuals = patch_mean_residuals(&self.window)?;
        let retired: BTreeSet<PatchId> = self
            .window
            .patches
            .iter()
            .zip(&residuals)
            .filter(|(_, r)| r.is_some_and(|r| r > limit))
            .map(|(p, _)| p.patch_id)
            .collect();
        if !retired.is_empty() {
            self.window.patches.retain(|p| !retired.contains(&p.patch_id));
            self.window
                .observations
                .retain(|o| !retired.contains(&o.patch_id));
        }
        Ok(retired.len())
    }
}

/// Scale for one prior batch. When the uncertainty gate leaves too few
/// samples, the gate is relaxed to the `min_samples` best-conditioned ones
/// before giving up.
pub fn fit_batch_scale(problem: &ScaleProblem) -> Result<ScaleEstimate, ScaleError> {
    match estimate_scale(problem) {
        Err(ScaleError::InsufficientSamples { .. }) if problem.t_sigma.is_finite() => {
            let mut stds: Vec<f64> = problem.samples.iter().map(|s| s.rel_std).collect();
            stds.sort_by(f64::total_cmp);
            let Some(&cutoff) = stds.get(problem.min_samples.max(1) - 1) else {
                return estimate_scale(problem);
            };
            estimate_scale(&ScaleProblem {
                t_sigma: cutoff,
                ..problem.clone()
            })
        }
        other => other,
    }
}

/// Runs the whole sequence. On failure the error is returned together with
/// the trajectory of the frames processed so far.
pub fn run_sequence<P: SequenceProvider>(
    provider: P,
    config: PipelineConfig,
) -> Result<Pipeline<P>, (PipelineError, Option<TrajectoryEstimate>)> {
    let mut pipeline = Pipeline::new(provider, config).map_err(|e| (e, None))?;
    match pipeline.run() {
        Ok(_) => Ok(pipeline),
        Err(e) => Err((e, Some(pipeline.trajectory()))),
    }
}
