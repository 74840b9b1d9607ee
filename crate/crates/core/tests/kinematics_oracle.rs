mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::fk_oracle::{oracle, random_case};
use kinefit_core::{demo_biped, demo_biped_spine, forward_kinematics, Pose, SkeletonModel, SubjectParams};

fn max_error(model: &SkeletonModel, pose: &[f64], subject: &SubjectParams) -> f64 {
    let fast = forward_kinematics(model, &Pose(pose.to_vec()), subject).unwrap();
    let slow = oracle(model, pose, subject);
    fast.0
        .iter()
        .zip(&slow)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn matches_transform_oracle_on_random_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for model in [demo_biped(), demo_biped_spine()] {
        for _ in 0..200 {
            let (pose, subject) = random_case(&model, &mut rng);
            let e = max_error(&model, &pose, &subject);
            assert!(e < 1e-9, "max deviation {e:e} m");
        }
    }
}

#[test]
fn zero_pose_neutral_subject_is_the_rest_configuration() {
    let model = demo_biped();
    let subject = SubjectParams::neutral(&model);
    let x = forward_kinematics(&model, &Pose(vec![0.0; model.n_dof]), &subject).unwrap();
    // With no rotations each site sits at the sum of attachment offsets along its chain.
    for (j, site) in model.sites.iter().enumerate() {
        let mut p = site.local_pos;
        let mut b = Some(site.body);
        while let Some(i) = b {
            for k in 0..3 {
                p[k] += model.bodies[i].attach_offset[k];
            }
            b = model.bodies[i].parent;
        }
        for k in 0..3 {
            assert!((x.0[j][k] - p[k]).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_agreement(seed in any::<u64>(), spine in any::<bool>()) {
        let model = if spine { demo_biped_spine() } else { demo_biped() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pose, subject) = random_case(&model, &mut rng);
        prop_assert!(max_error(&model, &pose, &subject) < 1e-9);
    }

    /// Moving the root translates every marker by the same vector.
    #[test]
    fn root_translation_is_equivariant(seed in any::<u64>(), dx in -2.0..2.0f64, dy in -2.0..2.0f64, dz in -1.0..1.0f64) {
        let model = demo_biped();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pose, subject) = random_case(&model, &mut rng);
        let mut moved = pose.clone();
        moved[0] += dx;
        moved[1] += dy;
        moved[2] += dz;
        let a = forward_kinematics(&model, &Pose(pose), &subject).unwrap();
        let b = forward_kinematics(&model, &Pose(moved), &subject).unwrap();
        for (p, q) in a.0.iter().zip(&b.0) {
            prop_assert!((q[0] - p[0] - dx).abs() < 1e-9);
            prop_assert!((q[1] - p[1] - dy).abs() < 1e-9);
            prop_assert!((q[2] - p[2] - dz).abs() < 1e-9);
        }
    }

    /// Joint rotations preserve distances between sites on one body.
    #[test]
    fn rigid_bodies_stay_rigid(seed in any::<u64>()) {
        let model = demo_biped();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pose, subject) = random_case(&model, &mut rng);
        let rest = forward_kinematics(&model, &Pose(vec![0.0; model.n_dof]), &subject).unwrap();
        let posed = forward_kinematics(&model, &Pose(pose), &subject).unwrap();
        let dist = |a: &[f64; 3], b: &[f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        for i in 0..model.sites.len() {
            for j in (i + 1)..model.sites.len() {
                if model.sites[i].body == model.sites[j].body {
                    prop_assert!((dist(&rest.0[i], &rest.0[j]) - dist(&posed.0[i], &posed.0[j])).abs() < 1e-9);
                }
            }
        }
    }
}
