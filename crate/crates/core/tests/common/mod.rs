//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use dslam_core::ba::{NormalSystem, Window};
use dslam_core::geometry::{CameraIntrinsics, Pixel, Se3Pose};
use dslam_core::provider::{FrameId, Patch, SequenceProvider};
use dslam_core::sim::{Owner, PathKind, PathSpec, SceneSpec, SyntheticScene};
use nalgebra::{DMatrix, DVector, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian6(rng: &mut impl Rng, scale: f64) -> Vector6<f64> {
    Vector6::from_fn(|_, _| {
        let x: f64 = StandardNormal.sample(rng);
        scale * x
    })
}

/// Normal equations of a random sparse least-squares problem: every patch is
/// seen from two to four frames with Gaussian Jacobians, so `B` and `C` are
/// positive definite and `E` follows patch-frame incidence.
pub fn random_block_system(rng: &mut impl Rng, frames: usize, patches: usize, lambda: f64) -> NormalSystem {
    let n6 = 6 * frames;
    let mut b = DMatrix::<f64>::identity(n6, n6) * 0.1;
    let mut c = DVector::<f64>::zeros(patches);
    let mut e = DMatrix::<f64>::zeros(n6, patches);
    let mut v = DVector::<f64>::zeros(n6);
    let mut w = DVector::<f64>::zeros(patches);
    for k in 0..patches {
        let views = rng.random_range(2..=4.min(frames));
        let picked = rand::seq::index::sample(rng, frames, views);
        for f in picked {
            for _ in 0..2 {
                let jp = gaussian6(rng, 1.0);
                let jd: f64 = StandardNormal.sample(rng);
                let r: f64 = StandardNormal.sample(rng);
                let mut block = b.view_mut((6 * f, 6 * f), (6, 6));
                block += jp * jp.transpose();
                c[k] += jd * jd;
                for i in 0..6 {
                    e[(6 * f + i, k)] += jp[i] * jd;
                    v[6 * f + i] -= jp[i] * r;
                }
                w[k] -= jd * r;
            }
        }
    }
    NormalSystem::from_blocks(b, c, e, v, w, lambda)
}

/// Orbit scene with no dynamics and no noise unless the caller adds it.
pub fn static_spec(n_frames: usize, seed: u64) -> SceneSpec {
    SceneSpec {
        n_frames,
        seed,
        path: PathSpec {
            kind: PathKind::Orbit,
            speed: 0.1,
            ..PathSpec::default()
        },
        ..SceneSpec::default()
    }
}

/// Window over `frames` with ground-truth poses, `per_frame` static patches
/// at their true inverse depth and provider observations in every other
/// window frame. The first frame is fixed.
pub fn scene_window(
    scene: &Arc<SyntheticScene>,
    frames: &[usize],
    per_frame: usize,
    rng: &mut impl Rng,
) -> Window {
    let gt = &scene.gt;
    let intr = gt.intrinsics;
    let w = intr.width as usize;
    let mut window = Window::new(intr);
    let mut next_id = 0;
    for &f in frames {
        window.frames.push((f as FrameId, gt.poses[f]));
        window.frame_weights.push(1.0);
        let candidates: Vec<usize> = (0..gt.depth[f].len())
            .filter(|&idx| {
                let (u, v) = (idx % w, idx / w);
                gt.depth[f][idx] > 0.0
                    && matches!(gt.owner[f][idx], Owner::Static(_))
                    && (8..w - 8).contains(&u)
                    && (8..intr.height as usize - 8).contains(&v)
            })
            .collect();
        assert!(candidates.len() >= per_frame, "frame {f} has too few static pixels");
        for i in rand::seq::index::sample(rng, candidates.len(), per_frame) {
            let idx = candidates[i];
            let d = 1.0 / gt.depth[f][idx];
            window.patches.push(Patch {
                patch_id: next_id,
                owner_frame: f as FrameId,
                center: Pixel::new((idx % w) as f64, (idx / w) as f64),
                inv_depth: d,
                prior_inv_depth: d,
                prior_confidence: 1.0,
                rel_depth_std: f64::NAN,
            });
            next_id += 1;
        }
    }
    let mut provider = scene.provider();
    for &f in frames {
        let obs = provider
            .track_patches(&window.patches, f as FrameId)
            .expect("tracking");
        window
            .observations
            .extend(obs.into_iter().filter(|o| o.source_frame != f as FrameId));
    }
    window.fixed_frames = BTreeSet::from([frames[0] as FrameId]);
    window
}

/// Left-perturbs every non-fixed pose by a random twist whose rotation and
/// translation parts are each bounded by `magnitude`.
pub fn perturb_poses(window: &mut Window, magnitude: f64, rng: &mut impl Rng) {
    for (f, pose) in window.frames.iter_mut() {
        if window.fixed_frames.contains(f) {
            continue;
        }
        let mut delta = gaussian6(rng, 1.0);
        let (t, r) = (delta.fixed_rows::<3>(0).norm(), delta.fixed_rows::<3>(3).norm());
        let (st, sr) = (magnitude * rng.random::<f64>() / t, magnitude * rng.random::<f64>() / r);
        delta.fixed_rows_mut::<3>(0).scale_mut(st);
        delta.fixed_rows_mut::<3>(3).scale_mut(sr);
        *pose = Se3Pose::exp(&delta).compose(pose);
    }
}

pub fn window_poses(window: &Window) -> Vec<Se3Pose> {
    window.frames.iter().map(|(_, p)| *p).collect()
}

pub fn gt_poses(scene: &SyntheticScene, frames: impl IntoIterator<Item = FrameId>) -> Vec<Se3Pose> {
    frames.into_iter().map(|f| scene.gt.poses[f as usize]).collect()
}

pub fn random_intrinsics(rng: &mut impl Rng) -> CameraIntrinsics {
    let f = rng.random_range(80.0..600.0);
    let (w, h) = (rng.random_range(120..800u32), rng.random_range(100..600u32));
    CameraIntrinsics::new(
        f * rng.random_range(0.9..1.1),
        f,
        w as f64 * rng.random_range(0.4..0.6),
        h as f64 * rng.random_range(0.4..0.6),
        w,
        h,
    )
    .expect("valid intrinsics")
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Random reprojection configuration with the point in front of both cameras:
/// `(pose_i, pose_j, intrinsics, pixel, inverse depth)`.
pub fn random_reprojection_case(
    rng: &mut impl Rng,
) -> (Se3Pose, Se3Pose, CameraIntrinsics, Pixel, f64) {
    loop {
        let intr = random_intrinsics(rng);
        let pose_i = Se3Pose::exp(&gaussian6(rng, 0.5));
        let pose_j = Se3Pose::exp(&gaussian6(rng, 0.15)).compose(&pose_i);
        let px = Pixel::new(
            rng.random_range(0.0..intr.width as f64),
            rng.random_range(0.0..intr.height as f64),
        );
        let inv_depth = rng.random_range(0.1..1.0);
        let Ok(j) = dslam_core::geometry::reproject_with_jacobians(&pose_i, &pose_j, &intr, &px, inv_depth)
        else {
            continue;
        };
        if j.point_j[2] > 0.5 {
            return (pose_i, pose_j, intr, px, inv_depth);
        }
    }
}

/// Central-difference Jacobians of `reproject` with respect to left
/// perturbations of pose i, pose j and the inverse depth, as one 2x13 matrix.
pub fn numeric_reprojection_jacobian(
    pose_i: &Se3Pose,
    pose_j: &Se3Pose,
    intr: &CameraIntrinsics,
    px: &Pixel,
    inv_depth: f64,
    h: f64,
) -> nalgebra::SMatrix<f64, 2, 13> {
    use dslam_core::geometry::{reproject, se3_retract};
    let eval = |pi: &Se3Pose, pj: &Se3Pose, d: f64| {
        reproject(pi, pj, intr, px, d).expect("valid reprojection").to_vector()
    };
    let mut out = nalgebra::SMatrix::<f64, 2, 13>::zeros();
    for a in 0..6 {
        let mut delta = Vector6::zeros();
        delta[a] = h;
        let col = (eval(&se3_retract(pose_i, &delta), pose_j, inv_depth)
            - eval(&se3_retract(pose_i, &-delta), pose_j, inv_depth))
            / (2.0 * h);
        out.set_column(a, &col);
        let col = (eval(pose_i, &se3_retract(pose_j, &delta), inv_depth)
            - eval(pose_i, &se3_retract(pose_j, &-delta), inv_depth))
            / (2.0 * h);
        out.set_column(6 + a, &col);
    }
    let col = (eval(pose_i, pose_j, inv_depth + h) - eval(pose_i, pose_j, inv_depth - h)) / (2.0 * h);
    out.set_column(12, &col);
    out
}

/// Largest relative deviation of the analytic reprojection Jacobian from
/// central differences, each block normalized by its own magnitude.
pub fn jacobian_relative_error(
    pose_i: &Se3Pose,
    pose_j: &Se3Pose,
    intr: &CameraIntrinsics,
    px: &Pixel,
    inv_depth: f64,
) -> f64 {
    let analytic = dslam_core::geometry::reproject_with_jacobians(pose_i, pose_j, intr, px, inv_depth)
        .expect("valid reprojection");
    let numeric = numeric_reprojection_jacobian(pose_i, pose_j, intr, px, inv_depth, 1e-6);
    let blocks = [
        (analytic.d_pose_i.as_slice().to_vec(), numeric.columns(0, 6).iter().copied().collect::<Vec<_>>()),
        (analytic.d_pose_j.as_slice().to_vec(), numeric.columns(6, 6).iter().copied().collect()),
        (analytic.d_inv_depth.as_slice().to_vec(), numeric.column(12).iter().copied().collect()),
    ];
    blocks
        .iter()
        .map(|(a, n)| {
            let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let scale = n.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-12);
            diff / scale
        })
        .fold(0.0, f64::max)
}

/// Dense oracle: solve of the full damped system and its inverse.
pub fn dense_solution(sys: &NormalSystem) -> (DVector<f64>, DMatrix<f64>) {
    let (h, rhs) = dslam_core::ba::dense_system(sys);
    let inv = h.clone().try_inverse().expect("invertible dense system");
    (&inv * rhs, inv)
}

/// Scale batch with true scale `s_true`: inliers carry log-normal noise whose
/// spread is inversely proportional to their confidence, and a fraction
/// `outliers` sits at a gross ratio of 100.
pub fn scale_batch(
    rng: &mut impl Rng,
    s_true: f64,
    n: usize,
    outliers: f64,
) -> dslam_core::scale::ScaleProblem {
    use dslam_core::scale::{ScaleProblem, ScaleSample};
    let samples = (0..n)
        .map(|_| {
            let d_hat = rng.random_range(0.05..2.0);
            let confidence = rng.random_range(1.0..10.0);
            let d = if rng.random_bool(outliers) {
                100.0 * d_hat
            } else {
                let noise: f64 = StandardNormal.sample(rng);
                s_true * d_hat * (0.01 * noise / confidence).exp()
            };
            ScaleSample { d, d_hat, confidence, rel_std: 0.0 }
        })
        .collect();
    ScaleProblem::new(samples, f64::INFINITY)
}

/// Brute-force minimizer of the confidence-weighted Huber objective at fixed
/// threshold: a log-spaced scan of [0.01, 100] refined by golden section.
pub fn grid_scale_oracle(problem: &dslam_core::scale::ScaleProblem, delta: f64) -> f64 {
    let f = |ln_s: f64| problem.objective(ln_s.exp(), delta);
    let (lo, hi) = (0.01f64.ln(), 100.0f64.ln());
    let n = 20_000;
    let step = (hi - lo) / n as f64;
    let best = (0..=n)
        .map(|i| lo + i as f64 * step)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("non-empty grid");
    let (mut a, mut b) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (0.5 * (a + b)).exp()
}
