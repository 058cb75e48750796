mod common;

use common::*;
use dslam_core::ba::*;
use dslam_core::eval::{ate_rmse, umeyama, AlignMode};
use dslam_core::geometry::{reproject, Se3Pose};
use dslam_core::sim::SyntheticScene;
use nalgebra::{DMatrix, UnitQuaternion, Vector3};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_jacobians_match_central_differences(seed in any::<u64>()) {
        let (pi, pj, intr, px, d) = random_reprojection_case(&mut rng(seed));
        let err = jacobian_relative_error(&pi, &pj, &intr, &px, d);
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn schur_solution_equals_dense_solve(seed in any::<u64>(), lambda in 0.0..1.0f64) {
        let sys = random_block_system(&mut rng(seed), 5, 50, lambda);
        let (dxi, dd) = solve_schur(&sys).unwrap();
        let (dense, _) = dense_solution(&sys);
        let n6 = dxi.len();
        let err = (dxi - dense.rows(0, n6)).amax().max((dd - dense.rows(n6, sys.num_patches())).amax());
        prop_assert!(err <= 1e-8, "inf-norm gap {err}");
    }

    #[test]
    fn covariances_match_dense_inverse(seed in any::<u64>(), frames in 2usize..=6, patches in 10usize..=120) {
        let sys = random_block_system(&mut rng(seed), frames, patches, 1e-6);
        let (_, inv) = dense_solution(&sys);
        let cov = pose_covariance(&sys).unwrap();
        let var = depth_marginal_covariance(&sys, &cov).unwrap();
        let n6 = 6 * frames;
        for k in 0..patches {
            let want = inv[(n6 + k, n6 + k)];
            prop_assert!((var[k] - want).abs() <= 1e-6 * want.abs(), "patch {k}: {} vs {want}", var[k]);
        }
        let pose_block = inv.view((0, 0), (n6, n6));
        let rel = (&cov - pose_block).amax() / pose_block.amax();
        prop_assert!(rel <= 1e-6, "pose block relative gap {rel}");
    }

    #[test]
    fn frame_weight_is_monotone_in_unit_interval(a in 0.0..2.0f64, b in 0.0..2.0f64, alpha in 0.1..10.0f64, beta in 0.0..1.0f64) {
        let (wa, wb) = (frame_weight(Some(a), alpha, beta), frame_weight(Some(b), alpha, beta));
        prop_assert!(wa > 0.0 && wa < 1.0);
        if a < b {
            prop_assert!(wa <= wb);
        }
    }

    #[test]
    fn accepted_steps_never_raise_the_cost(seed in 0u64..1000) {
        let scene = SyntheticScene::new(noisy_spec(seed, 0.5, 0.1)).unwrap();
        let mut r = rng(seed);
        let mut window = scene_window(&scene, &[0, 3, 6, 9], 30, &mut r);
        perturb_poses(&mut window, 0.01, &mut r);
        let cfg = LmConfig::default();
        let before = window_cost(&window, cfg.huber_px, cfg.prior_enabled).unwrap();
        let out = lm_optimize(window, &cfg).unwrap();
        prop_assert!(out.stats.final_cost <= before);
        prop_assert!((window_cost(&out.window, cfg.huber_px, cfg.prior_enabled).unwrap() - out.stats.final_cost).abs() <= 1e-12 * before.max(1.0));
    }
}

fn noisy_spec(seed: u64, sigma_flow: f64, p_outlier: f64) -> dslam_core::sim::SceneSpec {
    let mut spec = static_spec(12, seed);
    spec.noise.sigma_flow = sigma_flow;
    spec.noise.p_outlier = p_outlier;
    spec
}

#[test]
fn normal_equations_match_finite_difference_oracle() {
    let scene = SyntheticScene::new(static_spec(4, 3)).unwrap();
    let mut window = scene_window(&scene, &[0, 3], 1, &mut rng(3));
    window.observations.retain(|o| o.source_frame == 0);
    window.fixed_frames.clear();
    assert_eq!(window.observations.len(), 1);
    // Move the observation off the prediction so the residual is nonzero.
    window.observations[0].observed.u += 0.7;
    window.observations[0].observed.v -= 0.4;
    let sys = build_normal_system(&window, 2.0, false).unwrap();

    let p = window.patches[0];
    let (pi, pj) = (window.frames[0].1, window.frames[1].1);
    let j = numeric_reprojection_jacobian(&pi, &pj, &window.intrinsics, &p.center, p.inv_depth, 1e-6);
    let jp = j.columns(0, 12).into_owned();
    let jd = j.column(12).into_owned();
    let b = jp.transpose() * &jp;
    let e = jp.transpose() * jd;
    let c = jd.dot(&jd);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
    assert!(rel(sys.c[0], c) < 1e-6, "{} vs {c}", sys.c[0]);
    for r in 0..12 {
        assert!(rel(sys.e[(r, 0)], e[r]) < 1e-6, "E[{r}]");
        for col in 0..12 {
            assert!((sys.b[(r, col)] - b[(r, col)]).abs() < 1e-6 * b.amax(), "B[{r},{col}]");
        }
    }
    let pred = reproject(&pi, &pj, &window.intrinsics, &p.center, p.inv_depth).unwrap();
    let res = pred.to_vector() - window.observations[0].observed.to_vector();
    let v_fd = -(jp.transpose() * res);
    for r in 0..12 {
        assert!((sys.v[r] - v_fd[r]).abs() < 1e-6 * v_fd.amax());
    }
    assert!((sys.w[0] + jd.dot(&res)).abs() < 1e-6 * jd.dot(&res).abs());
}

#[test]
fn gradient_vanishes_at_zero_residual() {
    let scene = SyntheticScene::new(static_spec(8, 1)).unwrap();
    let window = scene_window(&scene, &[0, 2, 4, 7], 20, &mut rng(1));
    let sys = build_normal_system(&window, 2.0, true).unwrap();
    assert!(sys.v.amax() < 1e-9 && sys.w.amax() < 1e-9);
}

#[test]
fn zero_prior_weight_equals_disabled_prior() {
    let scene = SyntheticScene::new(static_spec(8, 2)).unwrap();
    let mut window = scene_window(&scene, &[0, 3, 7], 20, &mut rng(2));
    for p in &mut window.patches {
        p.prior_inv_depth *= 1.3;
    }
    window.frame_weights.iter_mut().for_each(|w| *w = 0.0);
    assert_eq!(
        build_normal_system(&window, 2.0, true).unwrap(),
        build_normal_system(&window, 2.0, false).unwrap()
    );
}

#[test]
fn zero_weights_make_the_solve_blind_to_priors() {
    let scene = SyntheticScene::new(noisy_spec(4, 0.3, 0.0)).unwrap();
    let mut r = rng(4);
    let mut window = scene_window(&scene, &[0, 3, 6, 9], 25, &mut r);
    perturb_poses(&mut window, 0.01, &mut r);
    window.frame_weights.iter_mut().for_each(|w| *w = 0.0);
    window.frozen_patches.insert(0);
    let mut other = window.clone();
    for p in &mut other.patches {
        p.prior_inv_depth = 7.0 * p.prior_inv_depth + 0.2;
    }
    let cfg = LmConfig::default();
    let a = lm_optimize(window, &cfg).unwrap().window;
    let b = lm_optimize(other, &cfg).unwrap().window;
    assert_eq!(a.frames, b.frames);
    let da: Vec<f64> = a.patches.iter().map(|p| p.inv_depth).collect();
    let db: Vec<f64> = b.patches.iter().map(|p| p.inv_depth).collect();
    assert_eq!(da, db);
}

#[test]
fn ground_truth_window_is_already_optimal() {
    let scene = SyntheticScene::new(static_spec(10, 5)).unwrap();
    let window = scene_window(&scene, &[0, 3, 6, 9], 40, &mut rng(5));
    let out = lm_optimize(window, &LmConfig::default()).unwrap();
    assert!(out.stats.iterations <= 1, "{:?}", out.stats);
    assert!(out.stats.final_cost < 1e-18, "{:?}", out.stats);
    assert!(out.stats.converged);
}

#[test]
fn perturbed_noise_free_window_recovers_ground_truth() {
    for seed in 0..5 {
        let scene = SyntheticScene::new(static_spec(12, seed)).unwrap();
        let mut r = rng(seed);
        let mut window = scene_window(&scene, &[0, 2, 4, 6, 8, 11], 40, &mut r);
        perturb_poses(&mut window, 0.01, &mut r);
        let frames: Vec<_> = window.frames.iter().map(|(f, _)| *f).collect();
        let out = lm_optimize(window, &LmConfig::default()).unwrap();
        let ate = ate_rmse(&window_poses(&out.window), &gt_poses(&scene, frames), AlignMode::Sim3).unwrap();
        assert!(ate < 1e-5, "seed {seed}: ATE {ate}");
    }
}

#[test]
fn huber_beats_quadratic_loss_under_outliers() {
    let mut huber = Vec::new();
    let mut quadratic = Vec::new();
    for seed in 0..10 {
        let scene = SyntheticScene::new(noisy_spec(seed, 0.5, 0.2)).unwrap();
        let mut r = rng(100 + seed);
        let mut window = scene_window(&scene, &[0, 2, 4, 6, 8, 11], 40, &mut r);
        perturb_poses(&mut window, 0.01, &mut r);
        let frames: Vec<_> = window.frames.iter().map(|(f, _)| *f).collect();
        let gt = gt_poses(&scene, frames);
        for (huber_px, out) in [(2.0, &mut huber), (1e12, &mut quadratic)] {
            let cfg = LmConfig { huber_px, ..LmConfig::default() };
            let solved = lm_optimize(window.clone(), &cfg).unwrap().window;
            out.push(ate_rmse(&window_poses(&solved), &gt, AlignMode::Sim3).unwrap());
        }
    }
    let (h, q) = (median(&mut huber), median(&mut quadratic));
    assert!(h < q, "huber {h} quadratic {q}");
}

/// World-frame similarity `X' = s R X + t` applied to world-to-camera poses.
fn transform_pose(pose: &Se3Pose, rot: &UnitQuaternion<f64>, t: &Vector3<f64>, s: f64) -> Se3Pose {
    let r = pose.rotation * rot.inverse();
    Se3Pose::new(r, s * pose.translation - (r * t))
}

#[test]
fn solution_is_similarity_equivariant_without_priors() {
    let scene = SyntheticScene::new(static_spec(12, 8)).unwrap();
    let mut r = rng(8);
    let mut window = scene_window(&scene, &[0, 3, 6, 9, 11], 30, &mut r);
    window.frozen_patches.insert(0);
    perturb_poses(&mut window, 0.01, &mut r);

    let rot = UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.2, 0.5));
    let t = Vector3::new(1.0, -2.0, 0.5);
    let s = 2.5;
    let mut moved = window.clone();
    for (_, pose) in &mut moved.frames {
        *pose = transform_pose(pose, &rot, &t, s);
    }
    for p in &mut moved.patches {
        p.inv_depth /= s;
        p.prior_inv_depth /= s;
    }
    let cfg = LmConfig { prior_enabled: false, ..LmConfig::default() };
    let a = lm_optimize(window, &cfg).unwrap().window;
    let b = lm_optimize(moved, &cfg).unwrap().window;

    let centers = |w: &Window| w.frames.iter().map(|(_, p)| p.camera_center()).collect::<Vec<_>>();
    let sim = umeyama(&centers(&a), &centers(&b), true).unwrap();
    assert!((sim.scale - s).abs() < 1e-9, "scale {}", sim.scale);
    for ((_, pa), (_, pb)) in a.frames.iter().zip(&b.frames) {
        let expect = transform_pose(pa, &rot, &t, s);
        assert!((expect.translation - pb.translation).amax() < 1e-9);
        assert!(expect.rotation.angle_to(&pb.rotation) < 1e-9);
    }
    for (pa, pb) in a.patches.iter().zip(&b.patches) {
        assert!((pa.inv_depth / s - pb.inv_depth).abs() < 1e-9 * pa.inv_depth);
    }
}

#[test]
fn scene_window_covariance_matches_dense_inverse() {
    let scene = SyntheticScene::new(noisy_spec(9, 0.3, 0.0)).unwrap();
    let window = scene_window(&scene, &[0, 2, 5, 8, 11], 24, &mut rng(9));
    let mut sys = build_normal_system(&window, 2.0, true).unwrap();
    sys.lambda = 1e-6;
    let (_, inv) = dense_solution(&sys);
    let cov = pose_covariance(&sys).unwrap();
    let var = depth_marginal_covariance(&sys, &cov).unwrap();
    let n6 = cov.nrows();
    for (k, v) in var.iter().enumerate() {
        let want = inv[(n6 + k, n6 + k)];
        assert!((v - want).abs() <= 1e-6 * want, "patch {k}");
    }
    // Frame 0 is fixed and reported as zero; every other block matches.
    let dense: DMatrix<f64> = inv.view((6, 6), (n6 - 6, n6 - 6)).into_owned();
    let ours = cov.view((6, 6), (n6 - 6, n6 - 6));
    assert!((ours - &dense).amax() <= 1e-6 * dense.amax());
    assert_eq!(cov.view((0, 0), (6, 6)).amax(), 0.0);
}
