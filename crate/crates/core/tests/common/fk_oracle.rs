//! Brute-force forward kinematics by composing 4x4 homogeneous transforms.

use nalgebra::{Matrix4, Rotation3, Vector3, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use kinefit_core::model::JointKind;
use kinefit_core::{SkeletonModel, SubjectParams};

fn translation(v: Vector3<f64>) -> Matrix4<f64> {
    Matrix4::new_translation(&v)
}

fn rotation(w: Vector3<f64>) -> Matrix4<f64> {
    Rotation3::from_scaled_axis(w).to_homogeneous()
}

/// Composes one 4x4 transform per body from the root down and maps every
/// scaled site through its body's transform.
pub fn oracle(model: &SkeletonModel, pose: &[f64], subject: &SubjectParams) -> Vec<[f64; 3]> {
    let factor = |b: usize| -> f64 {
        model.scale_map.assignment[b]
            .iter()
            .map(|&k| subject.scales[k])
            .product()
    };
    let mut world: Vec<Matrix4<f64>> = Vec::new();
    for (b, body) in model.bodies.iter().enumerate() {
        let mut t = Vector3::from(body.attach_offset) * factor(b);
        let mut r = Matrix4::identity();
        for joint in model.joints.iter().filter(|j| j.body == b) {
            let s = joint.dof_start;
            let w = match joint.kind {
                JointKind::Free => {
                    t += Vector3::new(pose[s], pose[s + 1], pose[s + 2]);
                    Vector3::new(pose[s + 3], pose[s + 4], pose[s + 5])
                }
                JointKind::Ball => Vector3::new(pose[s], pose[s + 1], pose[s + 2]),
                JointKind::Hinge => Vector3::from(joint.axis.unwrap()) * pose[s],
            };
            r *= rotation(w);
        }
        let local = translation(t) * r;
        let m = match body.parent {
            Some(p) => world[p] * local,
            None => local,
        };
        world.push(m);
    }
    model
        .sites
        .iter()
        .zip(&subject.site_offsets)
        .map(|(site, off)| {
            let p = (Vector3::from(site.local_pos) + Vector3::from(*off)) * factor(site.body);
            let x = world[site.body] * Vector4::new(p.x, p.y, p.z, 1.0);
            [x.x, x.y, x.z]
        })
        .collect()
}

/// Pose inside the joint ranges and a subject with scales in [0.8, 1.2]
/// and offsets up to 3 cm.
pub fn random_case(model: &SkeletonModel, rng: &mut ChaCha8Rng) -> (Vec<f64>, SubjectParams) {
    let mut pose = vec![0.0; model.n_dof];
    for j in &model.joints {
        let s = j.dof_start;
        let (lo, hi) = j.range.unwrap_or((-std::f64::consts::PI, std::f64::consts::PI));
        match j.kind {
            JointKind::Free => {
                for v in &mut pose[s..s + 3] {
                    *v = rng.random_range(-3.0..3.0);
                }
                for v in &mut pose[s + 3..s + 6] {
                    *v = rng.random_range(-1.5..1.5);
                }
            }
            JointKind::Ball => {
                for v in &mut pose[s..s + 3] {
                    *v = rng.random_range(lo..hi);
                }
            }
            JointKind::Hinge => pose[s] = rng.random_range(lo..hi),
        }
    }
    let mut subject = SubjectParams::neutral(model);
    for s in &mut subject.scales {
        *s = rng.random_range(0.8..1.2);
    }
    for o in &mut subject.site_offsets {
        for v in o.iter_mut() {
            *v = rng.random_range(-0.03..0.03);
        }
    }
    (pose, subject)
}
