//! Trajectory and depth accuracy metrics, plus TUM trajectory I/O.
//!
//! Poses passed to the metrics are world-to-camera, like everywhere else in
//! the crate. Trajectory files and all relative-motion arithmetic use the
//! camera-to-world form.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Se3Pose;
use crate::raster::Raster;

/// Nearest-timestamp association tolerance, seconds.
pub const ASSOC_TOL_S: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 matched poses, got {0}")]
    TooFewMatches(usize),
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate alignment: estimate positions have no spread")]
    DegenerateAlignment,
    #[error("no valid depth pixels overlap")]
    NoDepthOverlap,
    #[error("depth raster shapes differ")]
    ShapeMismatch,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    None,
    Se3,
    #[default]
    Sim3,
}

impl std::str::FromStr for AlignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "se3" => Ok(Self::Se3),
            "sim3" => Ok(Self::Sim3),
            other => Err(format!("unknown alignment mode {other:?}")),
        }
    }
}

/// `y = scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

/// Closed-form least-squares similarity mapping `src` onto `dst`.
/// With `with_scale == false` the scale is pinned to 1.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity, EvalError> {
    if src.len() != dst.len() {
        return Err(EvalError::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len();
    if n < 2 {
        return Err(EvalError::TooFewMatches(n));
    }
    let nf = n as f64;
    let mu_x = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_y = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in src.iter().zip(dst) {
        let (dx, dy) = (x - mu_x, y - mu_y);
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= nf;
    var_x /= nf;
    if with_scale && var_x <= f64::EPSILON * mu_x.norm_squared().max(1.0) {
        return Err(EvalError::DegenerateAlignment);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (svd.singular_values[0] * s[(0, 0)]
            + svd.singular_values[1] * s[(1, 1)]
            + svd.singular_values[2] * s[(2, 2)])
            / var_x
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(EvalError::DegenerateAlignment);
    }
    Ok(Similarity {
        rotation,
        translation: mu_y - scale * rotation * mu_x,
        scale,
    })
}

/// Matched estimate/ground-truth poses with the alignment fitted between them.
#[derive(Debug, Clone)]
pub struct AlignedTrajectoryPair {
    pub estimate: Vec<Se3Pose>,
    pub ground_truth: Vec<Se3Pose>,
    pub alignment: Similarity,
    pub mode: AlignMode,
}

impl AlignedTrajectoryPair {
    pub fn new(
        estimate: Vec<Se3Pose>,
        ground_truth: Vec<Se3Pose>,
        mode: AlignMode,
    ) -> Result<Self, EvalError> {
        if estimate.len() != ground_truth.len() {
            return Err(EvalError::LengthMismatch(estimate.len(), ground_truth.len()));
        }
        if estimate.len() < 2 {
            return Err(EvalError::TooFewMatches(estimate.len()));
        }
        let alignment = match mode {
            AlignMode::None => Similarity::identity(),
            AlignMode::Se3 | AlignMode::Sim3 => {
                let src: Vec<_> = estimate.iter().map(Se3Pose::camera_center).collect();
                let dst: Vec<_> = ground_truth.iter().map(Se3Pose::camera_center).collect();
                umeyama(&src, &dst, mode == AlignMode::Sim3)?
            }
        };
        Ok(Self {
            estimate,
            ground_truth,
            alignment,
            mode,
        })
    }

    pub fn ate_rmse(&self) -> f64 {
        let sq: f64 = self
            .estimate
            .iter()
            .zip(&self.ground_truth)
            .map(|(e, g)| {
                (self.alignment.apply(&e.camera_center()) - g.camera_center()).norm_squared()
            })
            .sum();
        (sq / self.estimate.len() as f64).sqrt()
    }

    /// Mean translation norm and mean rotation angle (degrees) of the
    /// consecutive relative-motion errors. Estimated relative translations are
    /// multiplied by the alignment scale.
    pub fn rpe(&self) -> RpeResult {
        let s = self.alignment.scale;
        let mut rte = 0.0;
        let mut rre = 0.0;
        let pairs = self.estimate.len() - 1;
        for k in 0..pairs {
            let est_rel = relative_motion(&self.estimate[k], &self.estimate[k + 1]);
            let gt_rel = relative_motion(&self.ground_truth[k], &self.ground_truth[k + 1]);
            let est_rel = Se3Pose::new(est_rel.rotation, est_rel.translation * s);
            let err = gt_rel.inverse().compose(&est_rel);
            rte += err.translation.norm();
            rre += err.rotation_angle().to_degrees();
        }
        RpeResult {
            rte: rte / pairs as f64,
            rre_deg: rre / pairs as f64,
        }
    }
}

/// Motion of camera `b` expressed in camera `a`: `P_a^{-1} P_b` with
/// camera-to-world `P`. In world-to-camera terms this is `T_a T_b^{-1}`.
pub fn relative_motion(a: &Se3Pose, b: &Se3Pose) -> Se3Pose {
    a.compose(&b.inverse())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpeResult {
    pub rte: f64,
    pub rre_deg: f64,
}

pub fn ate_rmse(est: &[Se3Pose], gt: &[Se3Pose], mode: AlignMode) -> Result<f64, EvalError> {
    Ok(AlignedTrajectoryPair::new(est.to_vec(), gt.to_vec(), mode)?.ate_rmse())
}

pub fn rpe(est: &[Se3Pose], gt: &[Se3Pose], mode: AlignMode) -> Result<RpeResult, EvalError> {
    Ok(AlignedTrajectoryPair::new(est.to_vec(), gt.to_vec(), mode)?.rpe())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    /// Multiplier applied to predictions (1 without per-sequence scaling).
    pub scale: f64,
    pub valid_pixels: usize,
}

fn depth_ok(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// AbsRel and the `max(p/g, g/p) < 1.25` ratio over pixels valid in both
/// rasters of every pair. With `per_sequence_scale` a single median of
/// `gt / pred` over the whole sequence rescales the predictions first.
pub fn depth_metrics(
    pairs: &[(&Raster, &Raster)],
    per_sequence_scale: bool,
) -> Result<DepthMetrics, EvalError> {
    let mut matched = Vec::new();
    for (pred, gt) in pairs {
        if !pred.same_shape(gt) {
            return Err(EvalError::ShapeMismatch);
        }
        matched.extend(
            pred.data()
                .iter()
                .zip(gt.data())
                .filter(|(p, g)| depth_ok(**p) && depth_ok(**g))
                .map(|(p, g)| (*p, *g)),
        );
    }
    if matched.is_empty() {
        return Err(EvalError::NoDepthOverlap);
    }
    let scale = if per_sequence_scale {
        let mut ratios: Vec<f64> = matched.iter().map(|(p, g)| g / p).collect();
        ratios.sort_by(f64::total_cmp);
        ratios[(ratios.len() - 1) / 2]
    } else {
        1.0
    };
    let n = matched.len() as f64;
    let mut abs_rel = 0.0;
    let mut within = 0usize;
    for &(p, g) in &matched {
        let p = p * scale;
        abs_rel += (p - g).abs() / g;
        if (p / g).max(g / p) < 1.25 {
            within += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        delta_125: within as f64 / n,
        scale,
        valid_pixels: matched.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    /// World-to-camera.
    pub pose: Se3Pose,
}

/// Formats `x` with 9 significant digits in plain decimal notation.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.8}");
    }
    let decimals = (8 - x.abs().log10().floor() as i32).clamp(0, 30) as usize;
    format!("{x:.decimals$}")
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines (camera-to-world), preceded
/// by one `# ` comment line per header entry.
pub fn write_tum(path: &Path, entries: &[TrajectoryEntry], header: &[&str]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for h in header {
        writeln!(w, "# {h}")?;
    }
    for e in entries {
        let c2w = e.pose.inverse();
        let t = c2w.translation;
        let q = c2w.quaternion_xyzw();
        let fields: Vec<String> = [e.timestamp, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
            .iter()
            .map(|&v| format_sig9(v))
            .collect();
        writeln!(w, "{}", fields.join(" "))?;
    }
    w.flush()
}

pub fn parse_tum(text: &str, path: &Path) -> Result<Vec<TrajectoryEntry>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let q = [vals[4], vals[5], vals[6], vals[7]];
        if q.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
            return Err(err("zero quaternion".into()));
        }
        let c2w = Se3Pose::from_parts(q, [vals[1], vals[2], vals[3]]);
        out.push(TrajectoryEntry {
            timestamp: vals[0],
            pose: c2w.inverse(),
        });
    }
    Ok(out)
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajectoryEntry>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_tum(&text, path)
}

/// Pairs each estimate with the ground-truth entry nearest in time, keeping
/// pairs within `tol` seconds. Returns `(est_index, gt_index)` in estimate
/// order; each ground-truth entry is used at most once.
pub fn associate(
    est: &[TrajectoryEntry],
    gt: &[TrajectoryEntry],
    tol: f64,
) -> Result<Vec<(usize, usize)>, EvalError> {
    let mut used = vec![false; gt.len()];
    let mut out = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, g)| (j, (g.timestamp - e.timestamp).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, dt)) = best {
            if dt <= tol {
                used[j] = true;
                out.push((i, j));
            }
        }
    }
    if out.len() < 2 {
        return Err(EvalError::TooFewMatches(out.len()));
    }
    Ok(out)
}

/// Associates two trajectories and returns the matched pose lists.
pub fn matched_poses(
    est: &[TrajectoryEntry],
    gt: &[TrajectoryEntry],
    tol: f64,
) -> Result<(Vec<Se3Pose>, Vec<Se3Pose>), EvalError> {
    let pairs = associate(est, gt, tol)?;
    Ok(pairs
        .into_iter()
        .map(|(i, j)| (est[i].pose, gt[j].pose))
        .unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector6};

    fn c2w(center: Vector3<f64>, rot: UnitQuaternion<f64>) -> Se3Pose {
        Se3Pose::new(rot, center).inverse()
    }

    fn sample_traj(n: usize) -> Vec<Se3Pose> {
        (0..n)
            .map(|k| {
                let t = k as f64;
                Se3Pose::exp(&Vector6::new(
                    0.3 * t,
                    0.1 * t.sin(),
                    0.05 * t * t,
                    0.02 * t,
                    0.1 * (0.5 * t).cos(),
                    -0.03 * t,
                ))
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = sample_traj(10);
        assert!(ate_rmse(&gt, &gt, AlignMode::Sim3).unwrap() < 1e-12);
        let r = rpe(&gt, &gt, AlignMode::Se3).unwrap();
        assert!(r.rte < 1e-12 && r.rre_deg < 1e-6);
    }

    #[test]
    fn two_pose_unaligned_rmse() {
        let eps = 0.37;
        let id = UnitQuaternion::identity();
        let gt = [c2w(Vector3::zeros(), id), c2w(Vector3::x(), id)];
        let est = [c2w(Vector3::zeros(), id), c2w(Vector3::new(1.0, 0.0, eps), id)];
        let v = ate_rmse(&est, &gt, AlignMode::None).unwrap();
        assert!((v - eps / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sim3_absorbs_similarity() {
        let gt = sample_traj(12);
        let g = Se3Pose::exp(&Vector6::new(1.0, -2.0, 0.5, 0.3, -0.2, 0.9));
        // Camera-to-world P -> S P with S a similarity of scale 3.
        let est: Vec<Se3Pose> = gt
            .iter()
            .map(|t| {
                let p = t.inverse();
                let q = g.compose(&p);
                let q = Se3Pose::new(q.rotation, q.translation * 3.0);
                q.inverse()
            })
            .collect();
        let pair = AlignedTrajectoryPair::new(est.clone(), gt.clone(), AlignMode::Sim3).unwrap();
        assert!(pair.ate_rmse() < 1e-12);
        assert!((pair.alignment.scale - 1.0 / 3.0).abs() < 1e-12);
        assert!(pair.rpe().rte < 1e-12);
        assert!(ate_rmse(&est, &gt, AlignMode::Se3).unwrap() > 0.1);
    }

    #[test]
    fn one_degree_rotation_perturbation() {
        let gt = sample_traj(9);
        let axis = Vector3::new(0.2, -0.7, 0.4).normalize();
        let d = UnitQuaternion::from_scaled_axis(axis * 1f64.to_radians());
        // est_rel = gt_rel with its rotation post-multiplied by d.
        let mut est_c2w = vec![gt[0].inverse()];
        for k in 0..gt.len() - 1 {
            let rel = relative_motion(&gt[k], &gt[k + 1]);
            let rel = Se3Pose::new(rel.rotation * d, rel.translation);
            let next = est_c2w[k].compose(&rel);
            est_c2w.push(next);
        }
        let est: Vec<Se3Pose> = est_c2w.iter().map(Se3Pose::inverse).collect();
        let r = rpe(&est, &gt, AlignMode::None).unwrap();
        assert!((r.rre_deg - 1.0).abs() < 1e-9, "{}", r.rre_deg);
        assert!(r.rte < 1e-12);
    }

    #[test]
    fn stretched_translation() {
        let gt = sample_traj(7);
        let mut est_c2w = vec![gt[0].inverse()];
        for k in 0..gt.len() - 1 {
            let rel = relative_motion(&gt[k], &gt[k + 1]);
            let dir = rel.translation.normalize();
            let rel = Se3Pose::new(rel.rotation, rel.translation + 0.01 * dir);
            let next = est_c2w[k].compose(&rel);
            est_c2w.push(next);
        }
        let est: Vec<Se3Pose> = est_c2w.iter().map(Se3Pose::inverse).collect();
        let r = rpe(&est, &gt, AlignMode::Se3).unwrap();
        assert!((r.rte - 0.01).abs() < 1e-12, "{}", r.rte);
    }

    #[test]
    fn rpe_ignores_rigid_world_change() {
        let gt = sample_traj(8);
        let est = sample_traj(8)
            .into_iter()
            .enumerate()
            .map(|(k, p)| p.compose(&Se3Pose::exp(&Vector6::repeat(0.01 * k as f64))))
            .collect::<Vec<_>>();
        let g = Se3Pose::exp(&Vector6::new(3.0, 1.0, -2.0, 0.4, 0.1, -0.6));
        let moved: Vec<Se3Pose> = est.iter().map(|t| t.compose(&g.inverse())).collect();
        let a = rpe(&est, &gt, AlignMode::Se3).unwrap();
        let b = rpe(&moved, &gt, AlignMode::Se3).unwrap();
        assert!((a.rte - b.rte).abs() < 1e-9 && (a.rre_deg - b.rre_deg).abs() < 1e-9);
    }

    #[test]
    fn too_few_matches() {
        let gt = sample_traj(1);
        assert!(matches!(
            ate_rmse(&gt, &gt, AlignMode::Sim3),
            Err(EvalError::TooFewMatches(1))
        ));
        assert!(rpe(&gt, &gt, AlignMode::None).is_err());
    }

    #[test]
    fn depth_metric_examples() {
        let gt = Raster::from_vec(2, 2, vec![1.0, 2.0, 0.0, 4.0]).unwrap();
        let same = depth_metrics(&[(&gt, &gt)], false).unwrap();
        assert_eq!((same.abs_rel, same.delta_125, same.valid_pixels), (0.0, 1.0, 3));
        let double = gt.map(|d| 2.0 * d);
        let m = depth_metrics(&[(&double, &gt)], true).unwrap();
        assert_eq!((m.abs_rel, m.delta_125), (0.0, 1.0));
        let up = Raster::from_vec(2, 2, vec![1.3, 2.6, 5.0, 5.2]).unwrap();
        let m = depth_metrics(&[(&up, &gt)], false).unwrap();
        assert!((m.abs_rel - 0.3).abs() < 1e-6);
        assert_eq!(m.delta_125, 0.0);
        let empty = Raster::filled(2, 2, 0.0);
        assert!(matches!(
            depth_metrics(&[(&empty, &gt)], true),
            Err(EvalError::NoDepthOverlap)
        ));
    }

    #[test]
    fn tum_round_trip_and_association() {
        let poses = sample_traj(5);
        let entries: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| TrajectoryEntry {
                timestamp: k as f64 / 30.0,
                pose: *p,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tum");
        write_tum(&path, &entries, &["hdr"]).unwrap();
        let back = read_tum(&path).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in back.iter().zip(&entries) {
            assert!((a.timestamp - b.timestamp).abs() < 1e-8);
            assert!((a.pose.camera_center() - b.pose.camera_center()).norm() < 1e-7);
        }
        let pairs = associate(&back, &entries, ASSOC_TOL_S).unwrap();
        assert_eq!(pairs, (0..5).map(|k| (k, k)).collect::<Vec<_>>());
        let shifted: Vec<_> = entries
            .iter()
            .map(|e| TrajectoryEntry {
                timestamp: e.timestamp + 100.0,
                ..*e
            })
            .collect();
        assert!(associate(&shifted, &entries, ASSOC_TOL_S).is_err());
        let bad = parse_tum("0 1 2 3\n", Path::new("x"));
        assert!(matches!(bad, Err(EvalError::Parse { line: 1, .. })));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(-0.001234), "-0.00123400000");
    }
}
