//! Loss terms: confidence-weighted Huber reprojection error, marker-offset
//! regularization and equality-constraint violation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{huber, Tape, Var};
use crate::camera::{project_on_tape, CameraRig, ExtrinsicDelta};
use crate::kinematics::{constraint_error, constraint_error_on_tape, MarkerSet, Pose};
use crate::model::{SkeletonModel, SubjectParams};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("trial `{trial}`: {message}")]
    Shape { trial: String, message: String },
    #[error("trial `{trial}`: camera `{camera}` is not in the rig")]
    UnknownCamera { trial: String, camera: String },
    #[error("trial `{trial}`: keypoint `{joint}` has no matching model site")]
    UnknownJoint { trial: String, joint: String },
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

/// Detected keypoints `y_{t,j,c}` and confidences `w_{c,t,j}` for one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialObservations {
    pub name: String,
    pub frame_rate: f64,
    /// Frame times in seconds, strictly increasing.
    pub times: Vec<f64>,
    pub joint_names: Vec<String>,
    pub camera_names: Vec<String>,
    /// `T x J x C x 2`, row-major, pixels.
    pub keypoints: Vec<f64>,
    /// `T x J x C`, row-major, in `[0, 1]`.
    pub confidences: Vec<f64>,
    pub population: Option<String>,
}

impl TrialObservations {
    pub fn n_frames(&self) -> usize {
        self.times.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn n_cameras(&self) -> usize {
        self.camera_names.len()
    }

    /// Seconds spanned by the trial.
    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    #[inline]
    pub fn index(&self, t: usize, j: usize, c: usize) -> usize {
        (t * self.n_joints() + j) * self.n_cameras() + c
    }

    #[inline]
    pub fn keypoint(&self, t: usize, j: usize, c: usize) -> [f64; 2] {
        let i = 2 * self.index(t, j, c);
        [self.keypoints[i], self.keypoints[i + 1]]
    }

    #[inline]
    pub fn confidence(&self, t: usize, j: usize, c: usize) -> f64 {
        self.confidences[self.index(t, j, c)]
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |message: String| ObjectiveError::Shape {
            trial: self.name.clone(),
            message,
        };
        let n = self.n_frames() * self.n_joints() * self.n_cameras();
        if self.n_frames() == 0 {
            return Err(bad("trial has no frames".into()));
        }
        if self.keypoints.len() != 2 * n || self.confidences.len() != n {
            return Err(bad(format!(
                "expected {} keypoint values and {n} confidences, got {} and {}",
                2 * n,
                self.keypoints.len(),
                self.confidences.len()
            )));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) || !self.times.iter().all(|t| t.is_finite()) {
            return Err(bad("frame times must be finite and strictly increasing".into()));
        }
        if let Some(i) = self.confidences.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(bad(format!(
                "confidence {} at index {i} is outside [0, 1]",
                self.confidences[i]
            )));
        }
        Ok(())
    }
}

/// `λ_β`, `λ_ε` and the Huber threshold in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_beta: f64,
    pub lambda_eps: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_beta: 1.0,
            lambda_eps: 0.01,
            huber_delta: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let all = [self.lambda_beta, self.lambda_eps, self.huber_delta];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(ObjectiveError::Weights(format!(
                "weights must be finite and non-negative: {all:?}"
            )));
        }
        Ok(())
    }
}

/// Keypoint confidence from a pose-estimate spread in millimeters: a falling
/// sigmoid with its half-maximum at 30 mm and a width of 10 mm.
pub fn confidence_from_std(sigma_mm: f64) -> f64 {
    1.0 / (1.0 + ((sigma_mm - 30.0) / 10.0).exp())
}

/// How a trial's keypoints and cameras map onto model sites and rig cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    /// Model site index per keypoint.
    pub site_of_joint: Vec<usize>,
    /// Rig camera index per trial camera.
    pub rig_camera: Vec<usize>,
}

impl Binding {
    pub fn new(obs: &TrialObservations, model: &SkeletonModel, rig: &CameraRig) -> Result<Self, ObjectiveError> {
        let site_of_joint = obs
            .joint_names
            .iter()
            .map(|j| {
                model.site_index(j).ok_or_else(|| ObjectiveError::UnknownJoint {
                    trial: obs.name.clone(),
                    joint: j.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        let rig_camera = obs
            .camera_names
            .iter()
            .map(|c| {
                rig.index_of(c).ok_or_else(|| ObjectiveError::UnknownCamera {
                    trial: obs.name.clone(),
                    camera: c.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            site_of_joint,
            rig_camera,
        })
    }

    fn is_identity(&self, n_sites: usize) -> bool {
        self.site_of_joint.len() == n_sites && self.site_of_joint.iter().enumerate().all(|(i, &s)| i == s)
    }
}

/// Sampled frames of one iteration, deduplicated: each distinct frame is
/// evaluated once and weighted by how often it was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub frames: Vec<usize>,
    pub counts: Vec<f64>,
    /// Number of draws, duplicates included; the `T` of the loss normalization.
    pub n_samples: usize,
}

impl FrameBatch {
    pub fn from_samples(samples: &[usize]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let mut frames = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for s in sorted {
            if frames.last() == Some(&s) {
                *counts.last_mut().unwrap() += 1.0;
            } else {
                frames.push(s);
                counts.push(1.0);
            }
        }
        Self {
            frames,
            counts,
            n_samples: samples.len(),
        }
    }

    /// Every frame exactly once.
    pub fn all(n_frames: usize) -> Self {
        Self {
            frames: (0..n_frames).collect(),
            counts: vec![1.0; n_frames],
            n_samples: n_frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `L_Π` evaluated directly: `markers[i]` are model-site positions at frame
/// `frames[i]`, with markers ordered like the trial's keypoints.
pub fn reprojection_loss(
    markers: &[MarkerSet],
    frames: &[usize],
    obs: &TrialObservations,
    rig: &CameraRig,
    deltas: &[ExtrinsicDelta],
    huber_delta: f64,
) -> Result<f64, ObjectiveError> {
    let shape_err = |message: String| ObjectiveError::Shape {
        trial: obs.name.clone(),
        message,
    };
    if markers.len() != frames.len() {
        return Err(shape_err(format!(
            "{} marker sets for {} frames",
            markers.len(),
            frames.len()
        )));
    }
    if deltas.len() != rig.len() {
        return Err(shape_err(format!("{} deltas for {} cameras", deltas.len(), rig.len())));
    }
    let cams: Vec<usize> = obs
        .camera_names
        .iter()
        .map(|c| {
            rig.index_of(c).ok_or_else(|| ObjectiveError::UnknownCamera {
                trial: obs.name.clone(),
                camera: c.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    let (j_count, c_count) = (obs.n_joints(), obs.n_cameras());
    let mut total = 0.0;
    for (m, &t) in markers.iter().zip(frames) {
        if m.len() != j_count {
            return Err(shape_err(format!("{} markers for {j_count} keypoints", m.len())));
        }
        if t >= obs.n_frames() {
            return Err(shape_err(format!("frame {t} out of range")));
        }
        for j in 0..j_count {
            for (c, &rc) in cams.iter().enumerate() {
                let w = obs.confidence(t, j, c);
                if w == 0.0 {
                    continue;
                }
                let Ok(px) = rig.cameras[rc].project(&deltas[rc], &m.0[j]) else {
                    continue;
                };
                let y = obs.keypoint(t, j, c);
                let r = ((px[0] - y[0]).powi(2) + (px[1] - y[1]).powi(2)).sqrt();
                total += w * huber(r, huber_delta);
            }
        }
    }
    Ok(total / (frames.len() * j_count * c_count) as f64)
}

/// `L_Π` on a tape. `markers` is `(B*S) x 3` in model-site order for the
/// batch frames; `deltas[c]` holds the delta variables of rig camera `c`, or
/// `None` when that camera is frozen.
#[allow(clippy::too_many_arguments)]
pub fn reprojection_on_tape(
    tape: &mut Tape,
    obs: &TrialObservations,
    binding: &Binding,
    rig: &CameraRig,
    markers: Var,
    n_sites: usize,
    batch: &FrameBatch,
    deltas: &[Option<(Var, Var)>],
    huber_delta: f64,
) -> Var {
    let (j_count, c_count) = (obs.n_joints(), obs.n_cameras());
    let b = batch.len();
    let points = if binding.is_identity(n_sites) {
        markers
    } else {
        let rows: Vec<usize> = (0..b)
            .flat_map(|t| binding.site_of_joint.iter().map(move |&s| t * n_sites + s))
            .collect();
        tape.gather_rows(markers, rows.into())
    };
    let mut total: Option<Var> = None;
    for (c, &rc) in binding.rig_camera.iter().enumerate() {
        let (cam_pts, pixels) = project_on_tape(tape, &rig.cameras[rc], points, deltas[rc]);
        let depth = tape.value(cam_pts);
        let mut target = Tensor::zeros(b * j_count, 2);
        let mut weights = vec![0.0; b * j_count];
        for (i, (&t, &count)) in batch.frames.iter().zip(&batch.counts).enumerate() {
            for j in 0..j_count {
                let row = i * j_count + j;
                let y = obs.keypoint(t, j, c);
                let w = obs.confidence(t, j, c);
                if w == 0.0 || !(depth.get(row, 2) > 0.0) || !y[0].is_finite() || !y[1].is_finite() {
                    continue;
                }
                target.row_slice_mut(row).copy_from_slice(&y);
                weights[row] = w * count;
            }
        }
        let term = tape.huber_norm_sum(pixels, Arc::new(target), weights.into(), huber_delta);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let total = total.expect("trial has at least one camera");
    tape.scale(total, 1.0 / (batch.n_samples * j_count * c_count) as f64)
}

/// `L_β`: mean square of the site offsets; scales are not penalized.
pub fn offset_regularization(subject: &SubjectParams) -> f64 {
    let n = 3 * subject.site_offsets.len();
    if n == 0 {
        return 0.0;
    }
    subject.site_offsets.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64
}

/// `L_β` on a tape for a `J x 3` offsets variable.
pub fn offset_regularization_on_tape(tape: &mut Tape, offsets: Var) -> Var {
    let n = tape.value(offsets).len();
    let sq = tape.square(offsets);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / n as f64)
}

/// `L_ε`: mean squared constraint residual over constraints and poses; zero
/// for an unconstrained model.
pub fn constraint_loss(model: &SkeletonModel, poses: &[Pose]) -> f64 {
    let k = model.constraints.len();
    if k == 0 || poses.is_empty() {
        return 0.0;
    }
    let total: f64 = poses
        .iter()
        .map(|p| constraint_error(model, p).iter().map(|e| e * e).sum::<f64>())
        .sum();
    total / (k * poses.len()) as f64
}

/// `L_ε` on a tape over the batch poses (`B x n_dof`), weighted by draw counts.
pub fn constraint_loss_on_tape(tape: &mut Tape, model: &SkeletonModel, poses: Var, batch: &FrameBatch) -> Option<Var> {
    let eps = constraint_error_on_tape(tape, model, poses)?;
    let sq = tape.square(eps);
    let counts = tape.constant(Tensor::column(&batch.counts));
    let weighted = tape.mul(sq, counts);
    let s = tape.sum(weighted);
    Some(tape.scale(s, 1.0 / (batch.n_samples * model.constraints.len()) as f64))
}

/// The three loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reprojection: f64,
    pub offset: f64,
    pub constraint: f64,
}

/// `L = L_Π + λ_β L_β + λ_ε L_ε`; the constraint term only counts for constrained models.
pub fn total_loss(c: &LossComponents, weights: &LossWeights, has_constraints: bool) -> f64 {
    let mut total = c.reprojection + weights.lambda_beta * c.offset;
    if has_constraints {
        total += weights.lambda_eps * c.constraint;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::model::{demo_biped, demo_biped_spine};

    fn one_camera_rig() -> CameraRig {
        CameraRig {
            cameras: vec![Camera {
                name: "cam".into(),
                fx: 1000.0,
                fy: 1000.0,
                cx: 0.0,
                cy: 0.0,
                k1: 0.0,
                k2: 0.0,
                rotation: [0.0; 3],
                translation: [0.0; 3],
                width: 100,
                height: 100,
            }],
        }
    }

    fn single_obs(y: [f64; 2], w: f64) -> TrialObservations {
        TrialObservations {
            name: "t".into(),
            frame_rate: 30.0,
            times: vec![0.0],
            joint_names: vec!["a".into()],
            camera_names: vec!["cam".into()],
            keypoints: y.to_vec(),
            confidences: vec![w],
            population: None,
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_from_std(30.0), 0.5);
        assert!((confidence_from_std(0.0) - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-15);
        assert!((confidence_from_std(0.0) - 0.9526).abs() < 1e-4);
        assert!(confidence_from_std(1e6) < 1e-300);
        assert!(confidence_from_std(10.0) > confidence_from_std(20.0));
    }

    #[test]
    fn reprojection_examples() {
        let rig = one_camera_rig();
        let d = [ExtrinsicDelta::default()];
        let m = [MarkerSet(vec![[0.0, 0.0, 2.0]])];
        let exact = reprojection_loss(&m, &[0], &single_obs([0.0, 0.0], 1.0), &rig, &d, 10.0).unwrap();
        assert_eq!(exact, 0.0);
        let one = reprojection_loss(&m, &[0], &single_obs([1.0, 0.0], 1.0), &rig, &d, 10.0).unwrap();
        assert_eq!(one, 0.5);
        let far = reprojection_loss(&m, &[0], &single_obs([0.0, 100.0], 1.0), &rig, &d, 10.0).unwrap();
        assert_eq!(far, 950.0);
        let muted = reprojection_loss(&m, &[0], &single_obs([0.0, 100.0], 0.0), &rig, &d, 10.0).unwrap();
        assert_eq!(muted, 0.0);
        let behind = [MarkerSet(vec![[0.0, 0.0, -2.0]])];
        let b = reprojection_loss(&behind, &[0], &single_obs([0.0, 100.0], 1.0), &rig, &d, 10.0).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn unknown_camera_is_reported() {
        let mut obs = single_obs([0.0, 0.0], 1.0);
        obs.camera_names = vec!["other".into()];
        let err = reprojection_loss(
            &[MarkerSet(vec![[0.0, 0.0, 2.0]])],
            &[0],
            &obs,
            &one_camera_rig(),
            &[ExtrinsicDelta::default()],
            10.0,
        );
        assert!(matches!(err, Err(ObjectiveError::UnknownCamera { .. })));
    }

    #[test]
    fn offset_regularization_examples() {
        let m = demo_biped();
        let mut s = SubjectParams::neutral(&m);
        assert_eq!(offset_regularization(&s), 0.0);
        s.site_offsets[4][1] = 0.03;
        assert!((offset_regularization(&s) - 0.0009 / 261.0).abs() < 1e-18);
        assert!((offset_regularization(&s) - 3.448e-6).abs() < 1e-9);
        let mut scaled = SubjectParams::neutral(&m);
        scaled.scales.fill(2.0);
        assert_eq!(offset_regularization(&scaled), 0.0);
    }

    #[test]
    fn constraint_loss_examples() {
        let m = demo_biped_spine();
        let mut pose = vec![0.0; m.n_dof];
        assert_eq!(constraint_loss(&m, &[Pose(pose.clone())]), 0.0);
        // Violate the first constraint by 0.2 rad; the others stay satisfied.
        pose[m.constraints[0].dof_a] = 0.2;
        let k = m.constraints.len() as f64;
        assert!((constraint_loss(&m, &[Pose(pose)]) - 0.04 / k).abs() < 1e-15);
        assert_eq!(constraint_loss(&demo_biped(), &[Pose(vec![0.3; 40])]), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            lambda_beta: 0.1,
            ..LossWeights::default()
        };
        let c = LossComponents {
            reprojection: 1.0,
            offset: 2.0,
            constraint: 5.0,
        };
        assert!((total_loss(&c, &w, false) - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(&LossComponents::default(), &w, true), 0.0);
        let c = LossComponents {
            reprojection: 1.0,
            offset: 0.0,
            constraint: 4.0,
        };
        assert!((total_loss(&c, &LossWeights::default(), true) - 1.04).abs() < 1e-15);
    }

    #[test]
    fn frame_batch_dedups_with_counts() {
        let b = FrameBatch::from_samples(&[3, 1, 3, 0, 3]);
        assert_eq!(b.frames, vec![0, 1, 3]);
        assert_eq!(b.counts, vec![1.0, 1.0, 3.0]);
        assert_eq!(b.n_samples, 5);
    }

    #[test]
    fn observation_validation() {
        let mut obs = single_obs([0.0, 0.0], 1.0);
        assert!(obs.validate().is_ok());
        obs.confidences[0] = 1.5;
        assert!(obs.validate().is_err());
        let mut obs = single_obs([0.0, 0.0], 1.0);
        obs.keypoints.pop();
        assert!(obs.validate().is_err());
    }
}
