//! Differentiable forward kinematics `x = M(θ, β)`: pose and subject
//! parameters to world-frame marker positions.
//!
//! Conventions: a body's scale factor multiplies its attachment offset in the
//! parent frame and its sites' local positions (including learned offsets).
//! Joint rotations apply after the scaled attachment offset, about the body
//! origin, composed in joint declaration order.

use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{RowMap, Tape, Var};
use crate::model::{DofLimits, JointKind, ModelError, SkeletonModel, SubjectParams};
use crate::so3;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("pose has {actual} values, model has {expected} degrees of freedom")]
    PoseLength { expected: usize, actual: usize },
    #[error("non-finite pose value at coordinate {0}")]
    NonFinitePose(usize),
    #[error("non-finite site offset at site {0}")]
    NonFiniteOffset(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Joint coordinates: free-joint translations in meters, rotations in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose(pub Vec<f64>);

/// World-frame marker positions, one row per site.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerSet(pub Vec<[f64; 3]>);

impl MarkerSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `tanh` is clamped to this magnitude so saturated outputs stay strictly inside the range.
const SATURATION: f64 = 1.0 - 1e-12;

/// Maps raw network outputs into the open joint-range intervals:
/// `mid + half * tanh(raw)` on bounded coordinates, identity elsewhere.
pub struct Squash {
    /// `(mid, half_range)` for bounded coordinates.
    bounds: Vec<Option<(f64, f64)>>,
}

impl Squash {
    pub fn new(limits: &DofLimits) -> Self {
        Self {
            bounds: limits
                .iter()
                .map(|l| l.map(|(lo, hi)| (0.5 * (lo + hi), 0.5 * (hi - lo))))
                .collect(),
        }
    }

    pub fn for_model(model: &SkeletonModel) -> Self {
        Self::new(&model.dof_limits())
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; raw.len()];
        self.forward(raw, &mut out);
        out
    }

    /// Inverse map; bounded coordinates must lie strictly inside their range.
    pub fn invert(&self, pose: &[f64]) -> Vec<f64> {
        pose.iter()
            .zip(&self.bounds)
            .map(|(&p, b)| match b {
                Some((mid, half)) => ((p - mid) / half).atanh(),
                None => p,
            })
            .collect()
    }
}

impl RowMap for Squash {
    fn in_cols(&self) -> usize {
        self.bounds.len()
    }

    fn out_cols(&self) -> usize {
        self.bounds.len()
    }

    fn forward(&self, input: &[f64], output: &mut [f64]) {
        for ((o, &x), b) in output.iter_mut().zip(input).zip(&self.bounds) {
            *o = match b {
                Some((mid, half)) => mid + half * x.tanh().clamp(-SATURATION, SATURATION),
                None => x,
            };
        }
    }

    fn backward(&self, input: &[f64], _output: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
        for (((gi, &x), &go), b) in grad_in.iter_mut().zip(input).zip(grad_out).zip(&self.bounds) {
            *gi += match b {
                Some((_, half)) => {
                    let t = x.tanh();
                    go * half * (1.0 - t * t)
                }
                None => go,
            };
        }
    }
}

/// Applies [`Squash`] to a raw pose vector.
pub fn squash_to_limits(raw: &[f64], model: &SkeletonModel) -> Pose {
    Pose(Squash::for_model(model).apply(raw))
}

/// Linear coupling residuals `θ_a - ratio θ_b - offset`, one per constraint.
pub fn constraint_error(model: &SkeletonModel, pose: &Pose) -> Vec<f64> {
    model
        .constraints
        .iter()
        .map(|c| pose.0[c.dof_a] - c.ratio * pose.0[c.dof_b] - c.offset)
        .collect()
}

/// Tape version of [`constraint_error`]: `pose` is `B x n_dof`, the result `B x K`.
pub fn constraint_error_on_tape(tape: &mut Tape, model: &SkeletonModel, pose: Var) -> Option<Var> {
    if model.constraints.is_empty() {
        return None;
    }
    let a_idx: Vec<usize> = model.constraints.iter().map(|c| c.dof_a).collect();
    let b_idx: Vec<usize> = model.constraints.iter().map(|c| c.dof_b).collect();
    let ratios = tape.constant(Tensor::row(
        &model.constraints.iter().map(|c| c.ratio).collect::<Vec<_>>(),
    ));
    let offsets = tape.constant(Tensor::row(
        &model.constraints.iter().map(|c| c.offset).collect::<Vec<_>>(),
    ));
    let a = tape.columns(pose, &a_idx);
    let b = tape.columns(pose, &b_idx);
    let rb = tape.mul(b, ratios);
    let d = tape.sub(a, rb);
    Some(tape.sub(d, offsets))
}

/// Differentiable inputs of the kinematic map on a tape.
#[derive(Clone, Copy, Debug)]
pub struct KinematicInputs {
    /// `B x n_dof` squashed pose, one row per frame.
    pub pose: Var,
    /// `1 x n_scales`.
    pub scales: Var,
    /// `J x 3` learned per-site offsets.
    pub offsets: Var,
    /// `J x 3` base site positions (a constant unless the base model is being learned).
    pub base_sites: Var,
}

/// Body factors `1 x 1` for every body, sharing products between identical assignments.
fn body_factor_vars(tape: &mut Tape, model: &SkeletonModel, scales: Var) -> Vec<Var> {
    let singles: Vec<Var> = (0..model.scale_map.n_scales())
        .map(|k| tape.column(scales, k))
        .collect();
    let mut cache: Vec<(Vec<usize>, Var)> = Vec::new();
    model
        .scale_map
        .assignment
        .iter()
        .map(|params| {
            if let Some((_, v)) = cache.iter().find(|(p, _)| p == params) {
                return *v;
            }
            let mut acc = singles[params[0]];
            for &k in &params[1..] {
                acc = tape.mul(acc, singles[k]);
            }
            cache.push((params.clone(), acc));
            acc
        })
        .collect()
}

/// Records `M(θ, β)` for a batch of `B` poses. Output is `(B*J) x 3`,
/// frame-major: row `t * J + j` is site `j` at frame `t`.
pub fn forward_kinematics_on_tape(tape: &mut Tape, model: &SkeletonModel, inputs: KinematicInputs) -> Var {
    let batch = tape.shape(inputs.pose).0;
    let n_sites = model.n_sites();
    let factors = body_factor_vars(tape, model, inputs.scales);
    let identity = tape.constant(Tensor::row(&so3::IDENTITY));

    let mut rotations: Vec<Var> = Vec::with_capacity(model.bodies.len());
    let mut origins: Vec<Var> = Vec::with_capacity(model.bodies.len());
    for (b, body) in model.bodies.iter().enumerate() {
        let attach = tape.constant(Tensor::row(&body.attach_offset));
        let mut translation = tape.mul(attach, factors[b]);
        let mut local_rot: Option<Var> = None;
        for joint in model.joints_of(b) {
            let rot = match joint.kind {
                JointKind::Free => {
                    let s = joint.dof_start;
                    let t = tape.columns(inputs.pose, &[s, s + 1, s + 2]);
                    translation = tape.add(translation, t);
                    let w = tape.columns(inputs.pose, &[s + 3, s + 4, s + 5]);
                    tape.rodrigues(w)
                }
                JointKind::Ball => {
                    let s = joint.dof_start;
                    let w = tape.columns(inputs.pose, &[s, s + 1, s + 2]);
                    tape.rodrigues(w)
                }
                JointKind::Hinge => {
                    let angle = tape.column(inputs.pose, joint.dof_start);
                    let axis = tape.constant(Tensor::row(&joint.axis.expect("hinge axis")));
                    let w = tape.mul(angle, axis);
                    tape.rodrigues(w)
                }
            };
            local_rot = Some(match local_rot {
                Some(r) => tape.rot_mul(r, rot),
                None => rot,
            });
        }
        let local_rot = local_rot.unwrap_or(identity);
        let (rot, origin) = match body.parent {
            None => (local_rot, translation),
            Some(p) => {
                let offset = tape.rot_apply(rotations[p], translation);
                let origin = tape.add(origins[p], offset);
                (tape.rot_mul(rotations[p], local_rot), origin)
            }
        };
        let rot = tape.broadcast_rows(rot, batch);
        let origin = tape.broadcast_rows(origin, batch);
        rotations.push(rot);
        origins.push(origin);
    }

    // Scaled site vectors in their body frames: s_b (p_j + Δ_j), J x 3.
    let site_factor_parts: Vec<Var> = model.sites.iter().map(|s| factors[s.body]).collect();
    let site_factors = tape.concat_rows(&site_factor_parts);
    let local = tape.add(inputs.base_sites, inputs.offsets);
    let local = tape.mul(local, site_factors);

    let all_rot = tape.concat_rows(&rotations);
    let all_origin = tape.concat_rows(&origins);
    let mut body_rows = Vec::with_capacity(batch * n_sites);
    let mut site_rows = Vec::with_capacity(batch * n_sites);
    for t in 0..batch {
        for (j, site) in model.sites.iter().enumerate() {
            body_rows.push(site.body * batch + t);
            site_rows.push(j);
        }
    }
    let body_rows: Arc<[usize]> = body_rows.into();
    let rot = tape.gather_rows(all_rot, body_rows.clone());
    let origin = tape.gather_rows(all_origin, body_rows);
    let local = tape.gather_rows(local, site_rows.into());
    let rotated = tape.rot_apply(rot, local);
    tape.add(rotated, origin)
}

/// Base site positions of `model` as a `J x 3` tensor.
pub fn base_site_tensor(model: &SkeletonModel) -> Tensor {
    let data = model.sites.iter().flat_map(|s| s.local_pos).collect();
    Tensor::from_vec(model.n_sites(), 3, data)
}

/// Site offsets of `subject` as a `J x 3` tensor.
pub fn offsets_tensor(subject: &SubjectParams) -> Tensor {
    let data = subject.site_offsets.iter().flat_map(|o| *o).collect();
    Tensor::from_vec(subject.site_offsets.len(), 3, data)
}

fn validate_inputs(model: &SkeletonModel, poses: &[Pose], subject: &SubjectParams) -> Result<(), KinematicsError> {
    subject.validate(model)?;
    for (j, o) in subject.site_offsets.iter().enumerate() {
        if !o.iter().all(|v| v.is_finite()) {
            return Err(KinematicsError::NonFiniteOffset(j));
        }
    }
    for pose in poses {
        if pose.0.len() != model.n_dof {
            return Err(KinematicsError::PoseLength {
                expected: model.n_dof,
                actual: pose.0.len(),
            });
        }
        if let Some(i) = pose.0.iter().position(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinitePose(i));
        }
    }
    Ok(())
}

/// Marker positions for a batch of poses sharing one subject.
pub fn forward_kinematics_batch(
    model: &SkeletonModel,
    poses: &[Pose],
    subject: &SubjectParams,
) -> Result<Vec<MarkerSet>, KinematicsError> {
    validate_inputs(model, poses, subject)?;
    if poses.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let pose_data = poses.iter().flat_map(|p| p.0.iter().copied()).collect();
    let inputs = KinematicInputs {
        pose: tape.constant(Tensor::from_vec(poses.len(), model.n_dof, pose_data)),
        scales: tape.constant(Tensor::row(&subject.scales)),
        offsets: tape.constant(offsets_tensor(subject)),
        base_sites: tape.constant(base_site_tensor(model)),
    };
    let out = forward_kinematics_on_tape(&mut tape, model, inputs);
    let values = tape.value(out);
    let j = model.n_sites();
    Ok((0..poses.len())
        .map(|t| {
            MarkerSet(
                (0..j)
                    .map(|s| {
                        let r = values.row_slice(t * j + s);
                        [r[0], r[1], r[2]]
                    })
                    .collect(),
            )
        })
        .collect())
}

/// `x = M(θ, β)` for a single pose.
pub fn forward_kinematics(
    model: &SkeletonModel,
    pose: &Pose,
    subject: &SubjectParams,
) -> Result<MarkerSet, KinematicsError> {
    Ok(forward_kinematics_batch(model, std::slice::from_ref(pose), subject)?.remove(0))
}
