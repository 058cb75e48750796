//! Deterministic synthetic dynamic scenes used as ground truth.
//!
//! A scene is a camera path over static points plus rigid point clusters that
//! translate and spin at constant rates. Depth rasters are point splats with a
//! z-buffer (pixels without a point are invalid). Every random quantity is
//! drawn from a generator keyed on `(seed, purpose, indices)`, so values do not
//! depend on the order in which they are requested.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{write_tum, TrajectoryEntry};
use crate::geometry::{backproject, project, CameraIntrinsics, Pixel, Se3Pose};
use crate::provider::{
    flow_file_name, pixel_key, write_flow_lines, write_sequence_header, BatchId, FlowObservation,
    FrameId, Patch, PriorBatchResponse, PriorFrameData, ProviderError, SequenceProvider,
};
use crate::raster::{Raster, RasterKind};

/// Inter-frame world displacement above which a point counts as moving.
pub const EPS_MOTION: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene has no points")]
    EmptyScene,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("export failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Orbit,
    Forward,
    RotationDominant,
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSpec {
    pub kind: PathKind,
    /// Translation per frame, scene units.
    pub speed: f64,
    /// Peak rotation rate, radians per frame.
    pub rotation_rate: f64,
    /// Oscillation period in frames.
    pub period: f64,
    /// Distance to the orbit pivot.
    pub pivot_depth: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self {
            kind: PathKind::Orbit,
            speed: 0.05,
            rotation_rate: 0.01,
            period: 40.0,
            pivot_depth: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub sigma_flow: f64,
    /// Log-space depth noise scale.
    pub sigma_depth: f64,
    pub p_outlier: f64,
    pub mask_error_rate: f64,
    /// Wavelength in pixels of spatially correlated depth noise; 0 draws it
    /// independently per pixel.
    pub depth_noise_wavelength_px: f64,
    /// Per-batch depth scale is log-uniform in this range.
    pub batch_scale_range: [f64; 2],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_flow: 0.0,
            sigma_depth: 0.0,
            p_outlier: 0.0,
            mask_error_rate: 0.0,
            depth_noise_wavelength_px: 0.0,
            batch_scale_range: [0.25, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub n_frames: usize,
    pub fps: f64,
    pub intrinsics: CameraIntrinsics,
    pub n_static_points: usize,
    pub static_box_min: [f64; 3],
    pub static_box_max: [f64; 3],
    pub n_moving_objects: usize,
    pub points_per_object: usize,
    pub object_radius: f64,
    pub object_box_min: [f64; 3],
    pub object_box_max: [f64; 3],
    /// Linear speed range, units per frame.
    pub object_speed: [f64; 2],
    /// Peak angular speed, radians per frame.
    pub object_spin: f64,
    pub path: PathSpec,
    pub mask_by_motion: bool,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Frame pairs further apart than this are not exported.
    pub max_pair_span: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_frames: 40,
            fps: 30.0,
            intrinsics: CameraIntrinsics {
                fx: 140.0,
                fy: 140.0,
                cx: 80.0,
                cy: 60.0,
                width: 160,
                height: 120,
            },
            n_static_points: 2000,
            static_box_min: [-8.0, -4.0, 5.0],
            static_box_max: [8.0, 4.0, 14.0],
            n_moving_objects: 0,
            points_per_object: 300,
            object_radius: 0.8,
            object_box_min: [-2.0, -1.0, 5.0],
            object_box_max: [2.0, 1.0, 8.0],
            object_speed: [0.01, 0.03],
            object_spin: 0.01,
            path: PathSpec::default(),
            mask_by_motion: false,
            noise: NoiseSpec::default(),
            seed: 0,
            max_pair_span: 64,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        self.intrinsics
            .validate()
            .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        let n = &self.noise;
        let bad = |msg: &str| Err(SimError::InvalidSpec(msg.to_string()));
        if self.n_frames == 0 {
            return bad("n_frames must be positive");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if n.sigma_flow < 0.0 || n.sigma_depth < 0.0 || n.depth_noise_wavelength_px < 0.0 {
            return bad("noise scales must be non-negative");
        }
        if !(0.0..=1.0).contains(&n.p_outlier) || !(0.0..=1.0).contains(&n.mask_error_rate) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(n.batch_scale_range[0] > 0.0 && n.batch_scale_range[1] >= n.batch_scale_range[0]) {
            return bad("batch scale range must be positive and ordered");
        }
        if self.object_speed[0] < 0.0 || self.object_speed[1] < self.object_speed[0] {
            return bad("object speed range must be non-negative and ordered");
        }
        if self.object_radius < 0.0 || self.object_spin < 0.0 {
            return bad("object radius and spin must be non-negative");
        }
        for a in 0..3 {
            if self.static_box_min[a] > self.static_box_max[a]
                || self.object_box_min[a] > self.object_box_max[a]
            {
                return bad("box bounds must be ordered");
            }
        }
        if self.n_static_points + self.n_moving_objects * self.points_per_object == 0 {
            return Err(SimError::EmptyScene);
        }
        Ok(())
    }
}

/// Rigid cluster moving with constant linear and angular velocity:
/// `X(t) = c0 + v t + exp(omega t) p_body`.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingObject {
    pub center: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub spin: Vector3<f64>,
    pub body_points: Vec<Vector3<f64>>,
}

impl MovingObject {
    /// World-from-body transform at frame `t`.
    pub fn pose_at(&self, t: f64) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.center + self.velocity * t),
            UnitQuaternion::from_scaled_axis(self.spin * t),
        )
    }

    pub fn point_at(&self, index: usize, t: f64) -> Vector3<f64> {
        self.pose_at(t).transform_point(&self.body_points[index].into()).coords
    }
}

/// Pixel ownership in a rendered frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Empty,
    Static(usize),
    Object { object: usize, point: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub intrinsics: CameraIntrinsics,
    /// World-to-camera pose per frame.
    pub poses: Vec<Se3Pose>,
    pub timestamps: Vec<f64>,
    /// Camera-frame depth per pixel, 0 where no point lands.
    pub depth: Vec<Vec<f64>>,
    pub owner: Vec<Vec<Owner>>,
    /// Ground-truth moving-object mask (before any injected label errors).
    pub motion_mask: Vec<Vec<bool>>,
    pub static_points: Vec<Vector3<f64>>,
    pub objects: Vec<MovingObject>,
}

impl GroundTruth {
    pub fn n_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn depth_raster(&self, frame: usize) -> Raster {
        let i = &self.intrinsics;
        Raster::from_vec(i.width, i.height, self.depth[frame].clone())
            .expect("ground-truth rasters match the intrinsics")
    }

    pub fn world_point(&self, owner: Owner, frame: usize) -> Option<Vector3<f64>> {
        match owner {
            Owner::Empty => None,
            Owner::Static(k) => Some(self.static_points[k]),
            Owner::Object { object, point } => Some(self.objects[object].point_at(point, frame as f64)),
        }
    }
}

// Stream tags for keyed random draws.
const TAG_SCENE: u64 = 1;
const TAG_DEPTH: u64 = 2;
const TAG_MASK: u64 = 3;
const TAG_BATCH: u64 = 4;
const TAG_FLOW: u64 = 5;
const TAG_DEPTH_FIELD: u64 = 6;
const FIELD_WAVES: usize = 16;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn keyed_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn uniform_in_box(rng: &mut ChaCha8Rng, lo: &[f64; 3], hi: &[f64; 3]) -> Vector3<f64> {
    Vector3::from_fn(|a, _| {
        if hi[a] > lo[a] {
            rng.random_range(lo[a]..hi[a])
        } else {
            lo[a]
        }
    })
}

fn rot_y(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), a)
}

fn rot_x(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), a)
}

/// World-to-camera pose from camera center and camera-to-world rotation.
fn pose_from_center(center: Vector3<f64>, r_wc: UnitQuaternion<f64>) -> Se3Pose {
    let r = r_wc.inverse();
    Se3Pose::new(r, -(r * center))
}

fn camera_path(spec: &SceneSpec) -> Vec<Se3Pose> {
    let p = &spec.path;
    let n = spec.n_frames;
    let omega = 2.0 * std::f64::consts::PI / p.period.max(1.0);
    // Peak rate of `amp * sin(omega t)` is `amp * omega`.
    let amp = p.rotation_rate / omega;
    match p.kind {
        PathKind::Forward => (0..n)
            .map(|t| {
                let t = t as f64;
                let yaw = amp * (omega * t).sin();
                pose_from_center(Vector3::new(0.0, 0.0, p.speed * t), rot_y(yaw))
            })
            .collect(),
        PathKind::Orbit => (0..n)
            .map(|t| {
                let phi = p.speed * t as f64 / p.pivot_depth;
                let pivot = Vector3::new(0.0, 0.0, p.pivot_depth);
                let c = pivot + p.pivot_depth * Vector3::new(phi.sin(), 0.0, -phi.cos());
                pose_from_center(c, rot_y(-phi))
            })
            .collect(),
        PathKind::RotationDominant => (0..n)
            .map(|t| {
                let t = t as f64;
                let yaw = amp * (omega * t).sin();
                let pitch = 0.3 * amp * (0.61 * omega * t).sin();
                // Translation pulses between standstill and twice `speed`.
                let w2 = 0.37 * omega;
                let s = p.speed * (t + (w2 * t).sin() / w2);
                let c = Vector3::new(s, 0.2 * s, 0.0);
                pose_from_center(c, rot_y(yaw) * rot_x(pitch))
            })
            .collect(),
        PathKind::RandomWalk => {
            let mut rng = keyed_rng(spec.seed, &[TAG_SCENE, 99]);
            let mut c = Vector3::zeros();
            let mut vel = Vector3::new(p.speed, 0.0, 0.0);
            let (mut yaw, mut pitch, mut yaw_rate, mut pitch_rate) = (0.0, 0.0, 0.0, 0.0);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(pose_from_center(c, rot_y(yaw) * rot_x(pitch)));
                let kick = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                vel = 0.9 * vel + 0.1 * p.speed * kick.normalize_or_zero();
                if vel.norm() > 0.0 {
                    vel *= p.speed / vel.norm();
                }
                c += vel;
                yaw_rate = 0.9 * yaw_rate + 0.1 * p.rotation_rate * rng.random_range(-1.0..1.0);
                pitch_rate =
                    0.9 * pitch_rate + 0.05 * p.rotation_rate * rng.random_range(-1.0..1.0);
                yaw += yaw_rate;
                pitch += pitch_rate;
            }
            out
        }
    }
}

trait NormalizeOrZero {
    fn normalize_or_zero(&self) -> Self;
}

impl NormalizeOrZero for Vector3<f64> {
    fn normalize_or_zero(&self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            *self
        }
    }
}

fn sample_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
    loop {
        let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if p.norm_squared() <= 1.0 {
            return p * radius;
        }
    }
}

/// Builds the ground truth for `spec`.
pub fn generate(spec: &SceneSpec) -> Result<GroundTruth, SimError> {
    spec.validate()?;
    let mut rng = keyed_rng(spec.seed, &[TAG_SCENE]);
    let static_points: Vec<Vector3<f64>> = (0..spec.n_static_points)
        .map(|_| uniform_in_box(&mut rng, &spec.static_box_min, &spec.static_box_max))
        .collect();
    let objects: Vec<MovingObject> = (0..spec.n_moving_objects)
        .map(|_| {
            let center = uniform_in_box(&mut rng, &spec.object_box_min, &spec.object_box_max);
            let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize_or_zero();
            let speed = if spec.object_speed[1] > spec.object_speed[0] {
                rng.random_range(spec.object_speed[0]..spec.object_speed[1])
            } else {
                spec.object_speed[0]
            };
            let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize_or_zero();
            let spin = axis * spec.object_spin * rng.random_range(0.0..1.0);
            let body_points = (0..spec.points_per_object)
                .map(|_| sample_ball(&mut rng, spec.object_radius))
                .collect();
            MovingObject {
                center,
                velocity: dir * speed,
                spin,
                body_points,
            }
        })
        .collect();

    let poses = camera_path(spec);
    let timestamps = (0..spec.n_frames).map(|t| t as f64 / spec.fps).collect();
    let intr = spec.intrinsics;
    let n_px = intr.width as usize * intr.height as usize;

    let mut depth = Vec::with_capacity(spec.n_frames);
    let mut owner = Vec::with_capacity(spec.n_frames);
    let mut motion_mask = Vec::with_capacity(spec.n_frames);
    for (t, pose) in poses.iter().enumerate() {
        let mut zbuf = vec![0.0f64; n_px];
        let mut own = vec![Owner::Empty; n_px];
        let mut splat = |world: Vector3<f64>, who: Owner| {
            let pc = pose.transform_point(&world);
            let Ok(px) = project(&intr, &pc) else { return };
            let (u, v) = (px.u.round(), px.v.round());
            if u < 0.0 || v < 0.0 || u >= intr.width as f64 || v >= intr.height as f64 {
                return;
            }
            let idx = v as usize * intr.width as usize + u as usize;
            if zbuf[idx] == 0.0 || pc[2] < zbuf[idx] {
                zbuf[idx] = pc[2];
                own[idx] = who;
            }
        };
        for (k, p) in static_points.iter().enumerate() {
            splat(*p, Owner::Static(k));
        }
        for (o, obj) in objects.iter().enumerate() {
            for point in 0..obj.body_points.len() {
                splat(obj.point_at(point, t as f64), Owner::Object { object: o, point });
            }
        }
        let mask = own
            .iter()
            .map(|w| match *w {
                Owner::Object { object, point } if spec.mask_by_motion => {
                    let obj = &objects[object];
                    let (a, b) = if t + 1 < spec.n_frames {
                        (t as f64, t as f64 + 1.0)
                    } else {
                        (t as f64 - 1.0, t as f64)
                    };
                    (obj.point_at(point, b) - obj.point_at(point, a)).norm() > EPS_MOTION
                }
                Owner::Object { .. } => true,
                _ => false,
            })
            .collect();
        depth.push(zbuf);
        owner.push(own);
        motion_mask.push(mask);
    }

    Ok(GroundTruth {
        intrinsics: intr,
        poses,
        timestamps,
        depth,
        owner,
        motion_mask,
        static_points,
        objects,
    })
}

/// A generated scene together with the noise model of its provider.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub gt: GroundTruth,
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec) -> Result<Arc<Self>, SimError> {
        let gt = generate(&spec)?;
        Ok(Arc::new(Self { spec, gt }))
    }

    /// Multiplier applied to depths returned for inference batch `batch`.
    pub fn batch_scale(&self, batch: BatchId) -> f64 {
        let [lo, hi] = self.spec.noise.batch_scale_range;
        if hi <= lo {
            return lo;
        }
        let mut rng = keyed_rng(self.spec.seed, &[TAG_BATCH, batch]);
        rng.random_range(lo.ln()..hi.ln()).exp()
    }

    /// Prior rasters of `frame` at unit batch scale: noisy depth, confidence,
    /// and the (possibly corrupted) motion probability.
    pub fn unit_prior(&self, frame: usize) -> PriorFrameData {
        let intr = &self.gt.intrinsics;
        let noise = &self.spec.noise;
        let n_px = intr.width as usize * intr.height as usize;
        let mut depth_rng = keyed_rng(self.spec.seed, &[TAG_DEPTH, frame as u64]);
        let mut mask_rng = keyed_rng(self.spec.seed, &[TAG_MASK, frame as u64]);
        let field = self.noise_field(frame);
        let width = intr.width as usize;
        let mut depth = Vec::with_capacity(n_px);
        let mut conf = Vec::with_capacity(n_px);
        let mut motion = Vec::with_capacity(n_px);
        for idx in 0..n_px {
            let level = noise.sigma_depth * depth_rng.random_range(0.25..1.75);
            let mut n: f64 = StandardNormal.sample(&mut depth_rng);
            if !field.is_empty() {
                let (x, y) = ((idx % width) as f64, (idx / width) as f64);
                let sum: f64 = field.iter().map(|w| (w[0] * x + w[1] * y + w[2]).cos()).sum();
                n = sum * (2.0 / FIELD_WAVES as f64).sqrt();
            }
            let z = self.gt.depth[frame][idx];
            depth.push(if z > 0.0 { z * (level * n).exp() } else { 0.0 });
            conf.push(1.0 / (level + 0.01));
            let flip = mask_rng.random_bool(noise.mask_error_rate);
            let moving = self.gt.motion_mask[frame][idx] != flip;
            motion.push(if moving { 1.0 } else { 0.0 });
        }
        let (w, h) = (intr.width, intr.height);
        PriorFrameData {
            frame_id: frame as FrameId,
            depth: Raster::from_vec(w, h, depth).expect("shape"),
            confidence: Raster::from_vec(w, h, conf).expect("shape"),
            motion_prob: Raster::from_vec(w, h, motion).expect("shape"),
            batch_id: 0,
            applied_scale: 1.0,
        }
    }

    /// Plane waves `[kx, ky, phase]` whose normalized sum is a unit-variance
    /// smooth field; empty when noise is per-pixel.
    fn noise_field(&self, frame: usize) -> Vec<[f64; 3]> {
        let wavelength = self.spec.noise.depth_noise_wavelength_px;
        if !(wavelength > 0.0) {
            return Vec::new();
        }
        let mut rng = keyed_rng(self.spec.seed, &[TAG_DEPTH_FIELD, frame as u64]);
        (0..FIELD_WAVES)
            .map(|_| {
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / (wavelength * rng.random_range(0.5..1.5));
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                [k * dir.cos(), k * dir.sin(), phase]
            })
            .collect()
    }

    /// Noise-free correspondence of the surface point under pixel `key` of
    /// `source`, followed to `target` (along its object's motion if it has one).
    pub fn true_flow(&self, source: usize, target: usize, key: usize) -> Option<Pixel> {
        let intr = &self.gt.intrinsics;
        let z = self.gt.depth[source][key];
        if !(z > 0.0) {
            return None;
        }
        let w = intr.width as usize;
        let center = Pixel::new((key % w) as f64, (key / w) as f64);
        let x_c = backproject(intr, &center, 1.0 / z).ok()?;
        let mut x_w = self.gt.poses[source].inverse().transform_point(&x_c);
        if let Owner::Object { object, .. } = self.gt.owner[source][key] {
            let obj = &self.gt.objects[object];
            let body = obj.pose_at(source as f64).inverse_transform_point(&x_w.into());
            x_w = obj.pose_at(target as f64).transform_point(&body).coords;
        }
        project(intr, &self.gt.poses[target].transform_point(&x_w)).ok()
    }

    /// Tracked observation (noise and outliers included) and its validity.
    pub fn observe(&self, source: usize, target: usize, key: usize) -> (Pixel, bool) {
        let intr = &self.gt.intrinsics;
        let noise = &self.spec.noise;
        let mut rng = keyed_rng(
            self.spec.seed,
            &[TAG_FLOW, source as u64, target as u64, key as u64],
        );
        let nu: f64 = StandardNormal.sample(&mut rng);
        let nv: f64 = StandardNormal.sample(&mut rng);
        let outlier = rng.random_bool(noise.p_outlier);
        let ou = rng.random_range(0.0..(intr.width - 1) as f64);
        let ov = rng.random_range(0.0..(intr.height - 1) as f64);
        let Some(px) = self.true_flow(source, target, key) else {
            return (Pixel::new(f64::NAN, f64::NAN), false);
        };
        let observed = if outlier {
            Pixel::new(ou, ov)
        } else {
            Pixel::new(
                px.u + noise.sigma_flow * nu,
                px.v + noise.sigma_flow * nv,
            )
        };
        let valid = intr.contains(&observed);
        (observed, valid)
    }

    pub fn provider(self: &Arc<Self>) -> SyntheticProvider {
        SyntheticProvider {
            scene: Arc::clone(self),
            next_batch: 0,
        }
    }

    /// Writes the sequence directory read by [`crate::provider::FileProvider`],
    /// plus `gt_traj.tum`, `gt_depth/<id>.dpr`, and `scales.txt`.
    pub fn export(&self, dir: &Path) -> Result<(), SimError> {
        let gt = &self.gt;
        let n = gt.n_frames();
        write_sequence_header(dir, &gt.intrinsics, &gt.timestamps)?;

        let mut scales = BufWriter::new(fs::File::create(dir.join("scales.txt"))?);
        // At most one prior request per frame.
        for b in 0..=n as u64 {
            writeln!(scales, "{} {}", b, self.batch_scale(b))?;
        }
        scales.flush()?;

        fs::create_dir_all(dir.join("gt_depth"))?;
        for f in 0..n {
            let fdir = dir.join("frames").join(f.to_string());
            fs::create_dir_all(&fdir)?;
            let prior = self.unit_prior(f);
            prior.depth.save(&fdir.join("depth.dpr"), RasterKind::Depth)?;
            prior
                .confidence
                .save(&fdir.join("confidence.prb"), RasterKind::Probability)?;
            prior
                .motion_prob
                .save(&fdir.join("motion.prb"), RasterKind::Probability)?;
            gt.depth_raster(f)
                .save(&dir.join("gt_depth").join(format!("{f}.dpr")), RasterKind::Depth)?;
        }

        let flows = dir.join("flows");
        fs::create_dir_all(&flows)?;
        for i in 0..n {
            let keys: Vec<usize> = (0..gt.depth[i].len())
                .filter(|&k| gt.depth[i][k] > 0.0)
                .collect();
            for j in 0..n {
                if i == j || i.abs_diff(j) > self.spec.max_pair_span {
                    continue;
                }
                let mut w = BufWriter::new(fs::File::create(
                    flows.join(flow_file_name(i as FrameId, j as FrameId)),
                )?);
                write_flow_lines(
                    &mut w,
                    keys.iter().map(|&k| {
                        let (px, valid) = self.observe(i, j, k);
                        (k as u64, px, valid)
                    }),
                )?;
                w.flush()?;
            }
        }

        let entries: Vec<TrajectoryEntry> = (0..n)
            .map(|f| TrajectoryEntry {
                timestamp: gt.timestamps[f],
                pose: gt.poses[f],
            })
            .collect();
        write_tum(&dir.join("gt_traj.tum"), &entries, &["ground truth"])?;
        Ok(())
    }
}

/// Provider backed directly by a [`SyntheticScene`].
pub struct SyntheticProvider {
    scene: Arc<SyntheticScene>,
    next_batch: BatchId,
}

impl SyntheticProvider {
    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    /// Batch id the next request will receive.
    pub fn next_batch_id(&self) -> BatchId {
        self.next_batch
    }
}

impl SequenceProvider for SyntheticProvider {
    fn intrinsics(&self) -> CameraIntrinsics {
        self.scene.gt.intrinsics
    }

    fn frame_count(&self) -> usize {
        self.scene.gt.n_frames()
    }

    fn timestamp(&self, frame: FrameId) -> Result<f64, ProviderError> {
        self.scene
            .gt
            .timestamps
            .get(frame as usize)
            .copied()
            .ok_or(ProviderError::UnknownFrame(frame))
    }

    fn request_priors(&mut self, frames: &[FrameId]) -> Result<PriorBatchResponse, ProviderError> {
        if frames.is_empty() {
            return Err(ProviderError::EmptyRequest);
        }
        if let Some(&bad) = frames.iter().find(|&&f| f as usize >= self.frame_count()) {
            return Err(ProviderError::UnknownFrame(bad));
        }
        let batch_id = self.next_batch;
        let scale = self.scene.batch_scale(batch_id);
        let out = frames
            .iter()
            .map(|&f| {
                let mut data = self.scene.unit_prior(f as usize);
                // Same arithmetic as the file provider, so both agree bitwise.
                data.depth = data.depth.map(|d| if d > 0.0 { d * scale } else { d });
                data.batch_id = batch_id;
                data
            })
            .collect();
        self.next_batch += 1;
        Ok(PriorBatchResponse {
            batch_id,
            frames: out,
        })
    }

    fn track_patches(
        &mut self,
        patches: &[Patch],
        target: FrameId,
    ) -> Result<Vec<FlowObservation>, ProviderError> {
        let n = self.frame_count();
        if target as usize >= n {
            return Err(ProviderError::UnknownFrame(target));
        }
        let intr = self.intrinsics();
        patches
            .iter()
            .map(|patch| {
                if patch.owner_frame as usize >= n {
                    return Err(ProviderError::UnknownFrame(patch.owner_frame));
                }
                let key = pixel_key(&intr, patch)? as usize;
                let (observed, valid) =
                    self.scene
                        .observe(patch.owner_frame as usize, target as usize, key);
                Ok(FlowObservation {
                    patch_id: patch.patch_id,
                    source_frame: patch.owner_frame,
                    target_frame: target,
                    observed,
                    valid,
                })
            })
            .collect()
    }
}
