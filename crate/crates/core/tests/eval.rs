mod common;

use common::*;
use dslam_core::eval::*;
use dslam_core::geometry::Se3Pose;
use dslam_core::raster::Raster;
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::Rng;

fn random_trajectory(seed: u64, n: usize) -> Vec<Se3Pose> {
    let mut r = rng(seed);
    let mut pose = Se3Pose::identity();
    (0..n)
        .map(|_| {
            pose = Se3Pose::exp(&gaussian6(&mut r, 0.1)).compose(&pose);
            pose
        })
        .collect()
}

/// World change `X' = s R X + t` applied to world-to-camera poses.
fn move_world(poses: &[Se3Pose], rot: &UnitQuaternion<f64>, t: &Vector3<f64>, s: f64) -> Vec<Se3Pose> {
    poses
        .iter()
        .map(|p| {
            let r = p.rotation * rot.inverse();
            Se3Pose::new(r, s * p.translation - r * t)
        })
        .collect()
}

fn random_similarity(r: &mut impl Rng) -> (UnitQuaternion<f64>, Vector3<f64>, f64) {
    let axis = gaussian6(r, 1.0);
    (
        UnitQuaternion::from_scaled_axis(Vector3::new(axis[0], axis[1], axis[2])),
        Vector3::new(axis[3], axis[4], axis[5]) * 3.0,
        r.random_range(0.2..5.0),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sim3_ate_ignores_similarities_of_the_estimate(seed in any::<u64>(), n in 3usize..40) {
        let gt = random_trajectory(seed, n);
        let est: Vec<_> = random_trajectory(seed ^ 1, n)
            .iter()
            .zip(&gt)
            .map(|(noise, g)| Se3Pose::exp(&(noise.log() * 0.05)).compose(g))
            .collect();
        let (rot, t, s) = random_similarity(&mut rng(seed ^ 2));
        let base = ate_rmse(&est, &gt, AlignMode::Sim3).unwrap();
        let moved = ate_rmse(&move_world(&est, &rot, &t, s), &gt, AlignMode::Sim3).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9, "{base} vs {moved}");
        let exact = ate_rmse(&move_world(&gt, &rot, &t, s), &gt, AlignMode::Sim3).unwrap();
        prop_assert!(exact < 1e-9, "{exact}");
    }

    #[test]
    fn rpe_ignores_rigid_world_changes(seed in any::<u64>(), n in 3usize..40) {
        let gt = random_trajectory(seed, n);
        let est = random_trajectory(seed ^ 3, n);
        let (rot, t, _) = random_similarity(&mut rng(seed ^ 4));
        let base = rpe(&est, &gt, AlignMode::Se3).unwrap();
        for (e, g) in [(move_world(&est, &rot, &t, 1.0), gt.clone()), (est.clone(), move_world(&gt, &rot, &t, 1.0))] {
            let moved = rpe(&e, &g, AlignMode::Se3).unwrap();
            prop_assert!((base.rte - moved.rte).abs() <= 1e-9);
            prop_assert!((base.rre_deg - moved.rre_deg).abs() <= 1e-9);
        }
    }

    #[test]
    fn scaled_depth_metrics_ignore_prediction_scale(seed in any::<u64>(), gamma in 0.01..100.0f64) {
        let mut r = rng(seed);
        let gt: Vec<f64> = (0..300).map(|i| if i % 17 == 0 { 0.0 } else { r.random_range(0.5..20.0) }).collect();
        let pred: Vec<f64> = gt.iter().map(|z| z * r.random_range(0.7..1.4)).collect();
        let gt = Raster::from_vec(20, 15, gt).unwrap();
        let a = Raster::from_vec(20, 15, pred).unwrap();
        let b = a.map_exact(|z| z * gamma);
        let ma = depth_metrics(&[(&a, &gt)], true).unwrap();
        let mb = depth_metrics(&[(&b, &gt)], true).unwrap();
        prop_assert!((ma.abs_rel - mb.abs_rel).abs() <= 1e-9);
        prop_assert_eq!(ma.delta_125, mb.delta_125);
        prop_assert_eq!(ma.valid_pixels, mb.valid_pixels);
    }
}

#[test]
fn tum_files_round_trip_through_association() {
    let poses = random_trajectory(7, 25);
    let entries: Vec<TrajectoryEntry> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| TrajectoryEntry { timestamp: 100.0 + i as f64 / 30.0, pose: *p })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.tum");
    write_tum(&path, &entries, &["config_hash abc"]).unwrap();
    let back = read_tum(&path).unwrap();
    assert_eq!(back.len(), entries.len());
    let pairs = associate(&back, &entries, ASSOC_TOL_S).unwrap();
    assert_eq!(pairs.len(), entries.len());
    assert!(pairs.iter().all(|(i, j)| i == j));
    let (est, gt) = matched_poses(&back, &entries, ASSOC_TOL_S).unwrap();
    assert!(ate_rmse(&est, &gt, AlignMode::None).unwrap() < 1e-7);
}
