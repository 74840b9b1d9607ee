//! Synthetic ground-truth sessions: a camera ring, a walking subject with
//! known body parameters, projected keypoints with optional noise and
//! outliers, and the truth needed to score a fit.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{look_at, CameraRig, ExtrinsicDelta, Intrinsics};
use crate::kinematics::{forward_kinematics_batch, KinematicsError, MarkerSet, Pose};
use crate::model::{JointKind, SkeletonModel, SubjectParams};
use crate::objective::{confidence_from_std, TrialObservations};
use crate::so3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("generated pose violates the range of {dof}: {value:.4} rad")]
    JointLimit { dof: String, value: f64 },
    #[error("site {site} is behind camera {camera} in trial {trial}, frame {frame}")]
    NotVisible {
        site: String,
        camera: String,
        trial: String,
        frame: usize,
    },
    #[error("cannot reach step width {0} m with the available hip adduction range")]
    StepWidth(f64),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cameras: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_px: f64,
    pub k1: f64,
    pub camera_radius_m: f64,
    pub camera_height_m: f64,
    /// Alternate cameras sit this much above and below `camera_height_m`.
    pub camera_height_spread_m: f64,
    pub n_trials: usize,
    pub duration_s: f64,
    pub frame_rate: f64,
    pub stride_length_m: f64,
    pub cadence_steps_per_min: f64,
    pub step_width_m: f64,
    pub heading_deg: f64,
    /// Segment scales; `None` picks a fixed non-trivial pattern.
    pub scales: Option<Vec<f64>>,
    /// Std of the true marker offsets, meters.
    pub offset_std_m: f64,
    pub noise_px: f64,
    pub outlier_rate: f64,
    /// Extrinsic error written into every camera but the first.
    pub perturb_rotation_deg: f64,
    pub perturb_translation_mm: f64,
    pub population: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_cameras: 8,
            image_width: 2048,
            image_height: 1536,
            focal_px: 1600.0,
            k1: -0.02,
            camera_radius_m: 6.0,
            camera_height_m: 1.9,
            camera_height_spread_m: 0.4,
            n_trials: 2,
            duration_s: 3.0,
            frame_rate: 30.0,
            stride_length_m: 1.2,
            cadence_steps_per_min: 120.0,
            step_width_m: 0.12,
            heading_deg: 0.0,
            scales: None,
            offset_std_m: 0.0,
            noise_px: 0.0,
            outlier_rate: 0.0,
            perturb_rotation_deg: 0.0,
            perturb_translation_mm: 0.0,
            population: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_cameras < 2 {
            return bad("n_cameras must be at least 2");
        }
        if self.n_trials == 0 {
            return bad("n_trials must be positive");
        }
        let positive = [
            self.focal_px,
            self.camera_radius_m,
            self.duration_s,
            self.frame_rate,
            self.stride_length_m,
            self.cadence_steps_per_min,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("focal, radius, duration, frame rate, stride and cadence must be positive");
        }
        let nonneg = [
            self.noise_px,
            self.offset_std_m,
            self.step_width_m,
            self.perturb_rotation_deg,
            self.perturb_translation_mm,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("noise, offset std, step width and perturbations must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad("outlier_rate must be in [0, 1]");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if self.n_frames() < 2 {
            return bad("trial must span at least two frames");
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.frame_rate).round() as usize
    }

    /// Stride (one full gait cycle) period in seconds.
    pub fn stride_period(&self) -> f64 {
        120.0 / self.cadence_steps_per_min
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub side: Side,
    pub frame: usize,
    pub time: f64,
    /// Heel site position at contact, meters.
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialTruth {
    pub name: String,
    pub times: Vec<f64>,
    pub poses: Vec<Vec<f64>>,
    pub heel_strikes: Vec<ContactEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subject: SubjectParams,
    pub rig: CameraRig,
    /// Error applied to each written camera; the fitted delta should undo it.
    pub perturbations: Vec<ExtrinsicDelta>,
    pub hip_adduction: f64,
    pub trials: Vec<TrialTruth>,
    pub config: SynthConfig,
}

#[derive(Clone, Debug)]
pub struct SynthSession {
    /// Rig as handed to the fitter, perturbed when requested.
    pub rig: CameraRig,
    pub trials: Vec<TrialObservations>,
    pub truth: GroundTruth,
}

/// Names of the heel sites used for contact events, right then left.
pub const HEEL_SITES: [&str; 2] = ["r_heel", "l_heel"];

// (body without side suffix, coordinate on that body, mean, amplitude, harmonic, phase shift)
const PATTERNS: &[(&str, usize, f64, f64, f64, f64)] = &[
    ("femur", 0, 0.20, 0.40, 1.0, 0.0),
    ("femur", 1, 0.0, 0.08, 1.0, 0.0),
    ("femur", 2, 0.0, 0.10, 1.0, 0.5),
    ("tibia", 0, 0.55, 0.45, 1.0, 4.2),
    ("talus", 0, 0.05, 0.15, 1.0, 1.0),
    ("calcn", 0, 0.0, 0.05, 1.0, 0.0),
    ("toes", 0, 0.15, 0.15, 1.0, 3.5),
    ("torso", 0, 0.05, 0.06, 2.0, 0.0),
    ("torso", 1, 0.0, 0.08, 1.0, 0.0),
    ("torso", 2, 0.0, 0.12, 1.0, PI),
    ("lumbar_lower", 0, 0.04, 0.05, 2.0, 0.0),
    ("lumbar_lower", 1, 0.0, 0.06, 1.0, 0.0),
    ("lumbar_lower", 2, 0.0, 0.08, 1.0, PI),
    ("head", 0, -0.05, 0.05, 2.0, 0.0),
    ("head", 1, 0.0, 0.05, 1.0, PI),
    ("head", 2, 0.0, 0.08, 1.0, 0.0),
    ("humerus", 0, 0.05, 0.30, 1.0, PI),
    ("humerus", 1, -0.12, 0.06, 1.0, 0.0),
    ("humerus", 2, 0.0, 0.10, 1.0, 0.0),
    ("ulna", 0, 0.40, 0.15, 1.0, PI + 0.5),
    ("radius", 0, 0.30, 0.10, 1.0, 0.0),
    ("hand", 0, 0.0, 0.10, 1.0, 0.0),
    ("hand", 1, 0.05, 0.05, 1.0, 0.0),
];

/// Per-coordinate description of the synthetic gait.
struct GaitPlan {
    /// `(dof, mean, amplitude, harmonic, shift, side offset)` for patterned coordinates.
    terms: Vec<(usize, f64, f64, f64, f64, f64)>,
    rest: Vec<f64>,
    adduction_dofs: Vec<usize>,
    root: Option<usize>,
}

fn split_side(name: &str) -> (&str, f64) {
    if let Some(base) = name.strip_suffix("_r") {
        (base, 0.0)
    } else if let Some(base) = name.strip_suffix("_l") {
        (base, PI)
    } else {
        (name, 0.0)
    }
}

fn plan_gait(model: &SkeletonModel) -> GaitPlan {
    let limits = model.dof_limits();
    let rest = limits
        .iter()
        .map(|l| match l {
            Some((lo, hi)) if !(*lo < 0.0 && 0.0 < *hi) => 0.5 * (lo + hi),
            _ => 0.0,
        })
        .collect();
    let mut terms = Vec::new();
    let mut adduction_dofs = Vec::new();
    let mut root = None;
    for (b, body) in model.bodies.iter().enumerate() {
        let (base, side_offset) = split_side(&body.name);
        let mut k = 0;
        for joint in model.joints_of(b) {
            if joint.kind == JointKind::Free {
                root.get_or_insert(joint.dof_start);
                continue;
            }
            for i in 0..joint.kind.dof() {
                let dof = joint.dof_start + i;
                if let Some(&(_, _, mean, amp, h, shift)) = PATTERNS.iter().find(|p| p.0 == base && p.1 == k) {
                    terms.push((dof, mean, amp, h, shift, side_offset));
                    if base == "femur" && k == 1 {
                        adduction_dofs.push(dof);
                    }
                }
                k += 1;
            }
        }
    }
    GaitPlan {
        terms,
        rest,
        adduction_dofs,
        root,
    }
}

struct TrialMotion {
    phase0: f64,
    heading: f64,
    speed: f64,
    period: f64,
    duration: f64,
}

fn gait_pose(model: &SkeletonModel, plan: &GaitPlan, motion: &TrialMotion, adduction: f64, t: f64) -> Vec<f64> {
    let phi = 2.0 * PI * t / motion.period + motion.phase0;
    let mut pose = plan.rest.clone();
    for &(dof, mean, amp, h, shift, side) in &plan.terms {
        pose[dof] = mean + amp * (h * (phi + side) - shift).cos();
    }
    for &dof in &plan.adduction_dofs {
        pose[dof] += adduction;
    }
    if let Some(r) = plan.root {
        let (s, c) = motion.heading.sin_cos();
        let along = motion.speed * (t - 0.5 * motion.duration);
        let sway = 0.015 * phi.sin();
        pose[r] = along * c - sway * s;
        pose[r + 1] = along * s + sway * c;
        pose[r + 2] = 0.012 * (2.0 * phi).cos();
        let yaw = rot_axis(2, motion.heading + 0.06 * phi.cos());
        let pitch = rot_axis(1, 0.03);
        let roll = rot_axis(0, 0.03 * phi.sin());
        let w = so3::log(&so3::mat_mul(&so3::mat_mul(&yaw, &pitch), &roll));
        pose[r + 3..r + 6].copy_from_slice(&w);
    }
    for c in &model.constraints {
        pose[c.dof_a] = c.ratio * pose[c.dof_b] + c.offset;
    }
    pose
}

fn rot_axis(axis: usize, angle: f64) -> so3::Mat3 {
    let mut w = [0.0; 3];
    w[axis] = angle;
    so3::rodrigues(&w)
}

fn check_limits(model: &SkeletonModel, pose: &[f64]) -> Result<(), SynthError> {
    for (i, l) in model.dof_limits().iter().enumerate() {
        if let Some((lo, hi)) = l {
            if !(pose[i] > *lo && pose[i] < *hi) {
                return Err(SynthError::JointLimit {
                    dof: model.dof_label(i),
                    value: pose[i],
                });
            }
        }
    }
    Ok(())
}

fn heel_indices(model: &SkeletonModel) -> Option<[usize; 2]> {
    Some([model.site_index(HEEL_SITES[0])?, model.site_index(HEEL_SITES[1])?])
}

/// Mean lateral heel separation over one stride for a given hip adduction.
fn mean_heel_separation(
    model: &SkeletonModel,
    plan: &GaitPlan,
    subject: &SubjectParams,
    heels: [usize; 2],
    adduction: f64,
    period: f64,
) -> Result<f64, SynthError> {
    let motion = TrialMotion {
        phase0: 0.0,
        heading: 0.0,
        speed: 0.0,
        period,
        duration: period,
    };
    let poses: Vec<Pose> = (0..24)
        .map(|i| Pose(gait_pose(model, plan, &motion, adduction, period * i as f64 / 24.0)))
        .collect();
    let markers = forward_kinematics_batch(model, &poses, subject)?;
    Ok(markers.iter().map(|m| m.0[heels[1]][1] - m.0[heels[0]][1]).sum::<f64>() / markers.len() as f64)
}

fn solve_adduction(
    model: &SkeletonModel,
    plan: &GaitPlan,
    subject: &SubjectParams,
    target: f64,
    period: f64,
) -> Result<f64, SynthError> {
    let Some(heels) = heel_indices(model) else {
        return Ok(0.0);
    };
    if plan.adduction_dofs.is_empty() {
        return Ok(0.0);
    }
    let limits = model.dof_limits();
    let (lo, hi) = limits[plan.adduction_dofs[0]].unwrap_or((-0.5, 0.5));
    // Leave room for the oscillation around the bias.
    let (mut a, mut b) = (lo + 0.1, hi - 0.1);
    let sep = |x| mean_heel_separation(model, plan, subject, heels, x, period);
    let (fa, fb) = (sep(a)? - target, sep(b)? - target);
    if fa.signum() == fb.signum() {
        return Err(SynthError::StepWidth(target));
    }
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        let fm = sep(m)? - target;
        if fm.signum() == fa.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Fixed scale pattern used when none is configured.
pub fn default_scales(n: usize) -> Vec<f64> {
    (0..n).map(|k| 1.0 + 0.04 * (2.3 * k as f64 + 0.7).sin()).collect()
}

/// Ring of cameras around the origin, all aimed at the walkway center.
pub fn camera_ring(cfg: &SynthConfig) -> CameraRig {
    let intr = Intrinsics {
        fx: cfg.focal_px,
        fy: cfg.focal_px,
        cx: 0.5 * cfg.image_width as f64,
        cy: 0.5 * cfg.image_height as f64,
        k1: cfg.k1,
        k2: 0.0,
    };
    let cameras = (0..cfg.n_cameras)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / cfg.n_cameras as f64 + PI / cfg.n_cameras as f64;
            let h = if i % 2 == 0 {
                cfg.camera_height_m - cfg.camera_height_spread_m
            } else {
                cfg.camera_height_m + cfg.camera_height_spread_m
            };
            let center = [cfg.camera_radius_m * a.cos(), cfg.camera_radius_m * a.sin(), h];
            look_at(
                &format!("cam{i}"),
                center,
                [0.0, 0.0, 0.9],
                intr,
                cfg.image_width,
                cfg.image_height,
            )
        })
        .collect();
    CameraRig { cameras }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

/// Heel-height minima, one per stride and side, at least half a stride from either trial end.
fn contact_events(markers: &[MarkerSet], heels: [usize; 2], times: &[f64], period_frames: usize) -> Vec<ContactEvent> {
    let w = (period_frames / 2).max(1);
    let mut events = Vec::new();
    for (side, &site) in [Side::Right, Side::Left].iter().zip(heels.iter()) {
        let h: Vec<f64> = markers.iter().map(|m| m.0[site][2]).collect();
        for i in w..h.len().saturating_sub(w) {
            let window = &h[i - w..=i + w];
            let is_min = window
                .iter()
                .enumerate()
                .all(|(k, &v)| if k < w { v > h[i] } else { v >= h[i] });
            if is_min {
                events.push(ContactEvent {
                    side: *side,
                    frame: i,
                    time: times[i],
                    position: markers[i].0[site],
                });
            }
        }
    }
    events.sort_by_key(|e| e.frame);
    events
}

/// Generates a full synthetic session for `model`.
pub fn generate_session(model: &SkeletonModel, cfg: &SynthConfig) -> Result<SynthSession, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_scales = model.scale_map.n_scales();
    let scales = match &cfg.scales {
        Some(s) => s.clone(),
        None => default_scales(n_scales),
    };
    let mut site_offsets = vec![[0.0; 3]; model.n_sites()];
    if cfg.offset_std_m > 0.0 {
        let normal = Normal::new(0.0, cfg.offset_std_m).expect("finite std");
        for o in &mut site_offsets {
            *o = [
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            ];
        }
    }
    let subject = SubjectParams { scales, site_offsets };
    subject.validate(model).map_err(|e| SynthError::Config(e.to_string()))?;

    let true_rig = camera_ring(cfg);
    let mut perturbations = vec![ExtrinsicDelta::default(); cfg.n_cameras];
    for p in perturbations.iter_mut().skip(1) {
        let axis = random_unit(&mut rng);
        let dir = random_unit(&mut rng);
        let angle = cfg.perturb_rotation_deg.to_radians();
        let mm = cfg.perturb_translation_mm / 1000.0;
        p.rotation = [axis[0] * angle, axis[1] * angle, axis[2] * angle];
        p.translation = [dir[0] * mm, dir[1] * mm, dir[2] * mm];
    }
    let rig = true_rig.refined(&perturbations);

    let plan = plan_gait(model);
    let period = cfg.stride_period();
    let adduction = solve_adduction(model, &plan, &subject, cfg.step_width_m, period)?;
    let heels = heel_indices(model);
    let n_frames = cfg.n_frames();
    let times: Vec<f64> = (0..n_frames).map(|i| i as f64 / cfg.frame_rate).collect();
    let joint_names = model.site_names();
    let camera_names = rig.names();
    let noise = Normal::new(0.0, cfg.noise_px.max(f64::MIN_POSITIVE)).expect("finite std");

    let mut trials = Vec::with_capacity(cfg.n_trials);
    let mut truths = Vec::with_capacity(cfg.n_trials);
    for k in 0..cfg.n_trials {
        let name = format!("trial{k:02}");
        let motion = TrialMotion {
            phase0: rng.random_range(0.0..2.0 * PI),
            heading: cfg.heading_deg.to_radians(),
            speed: cfg.stride_length_m / period,
            period,
            duration: cfg.duration_s,
        };
        let mut poses: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| gait_pose(model, &plan, &motion, adduction, t))
            .collect();
        for p in &poses {
            check_limits(model, p)?;
        }
        let wrapped: Vec<Pose> = poses.iter().cloned().map(Pose).collect();
        let mut markers = forward_kinematics_batch(model, &wrapped, &subject)?;
        // Put the lowest heel on the floor.
        if let (Some(h), Some(r)) = (heels, plan.root) {
            let floor = markers
                .iter()
                .flat_map(|m| h.iter().map(move |&s| m.0[s][2]))
                .fold(f64::INFINITY, f64::min);
            for (p, m) in poses.iter_mut().zip(markers.iter_mut()) {
                p[r + 2] -= floor;
                for x in m.0.iter_mut() {
                    x[2] -= floor;
                }
            }
        }

        let (t_n, j_n, c_n) = (n_frames, joint_names.len(), rig.len());
        let mut keypoints = vec![0.0; t_n * j_n * c_n * 2];
        let mut confidences = vec![0.0; t_n * j_n * c_n];
        for t in 0..t_n {
            for j in 0..j_n {
                for (c, cam) in true_rig.cameras.iter().enumerate() {
                    let idx = (t * j_n + j) * c_n + c;
                    let px = cam.project(&ExtrinsicDelta::default(), &markers[t].0[j]).map_err(|_| {
                        SynthError::NotVisible {
                            site: joint_names[j].clone(),
                            camera: cam.name.clone(),
                            trial: name.clone(),
                            frame: t,
                        }
                    })?;
                    let outlier = cfg.outlier_rate > 0.0 && rng.random::<f64>() < cfg.outlier_rate;
                    let (xy, sigma_mm) = if outlier {
                        (
                            [
                                rng.random_range(0.0..cam.width as f64),
                                rng.random_range(0.0..cam.height as f64),
                            ],
                            rng.random_range(25.0..50.0),
                        )
                    } else if cfg.noise_px > 0.0 {
                        (
                            [px[0] + noise.sample(&mut rng), px[1] + noise.sample(&mut rng)],
                            rng.random_range(5.0..20.0),
                        )
                    } else {
                        (px, rng.random_range(5.0..20.0))
                    };
                    keypoints[2 * idx] = xy[0];
                    keypoints[2 * idx + 1] = xy[1];
                    confidences[idx] = confidence_from_std(sigma_mm);
                }
            }
        }
        let period_frames = (period * cfg.frame_rate).round() as usize;
        let heel_strikes = match heels {
            Some(h) => contact_events(&markers, h, &times, period_frames),
            None => Vec::new(),
        };
        trials.push(TrialObservations {
            name: name.clone(),
            frame_rate: cfg.frame_rate,
            times: times.clone(),
            joint_names: joint_names.clone(),
            camera_names: camera_names.clone(),
            keypoints,
            confidences,
            population: cfg.population.clone(),
        });
        truths.push(TrialTruth {
            name,
            times: times.clone(),
            poses,
            heel_strikes,
        });
    }

    Ok(SynthSession {
        rig,
        trials,
        truth: GroundTruth {
            subject,
            rig: true_rig,
            perturbations,
            hip_adduction: adduction,
            trials: truths,
            config: cfg.clone(),
        },
    })
}

/// Closed-form heel trajectories for a straight walk: each heel rests at its
/// contact point during stance and moves one stride forward during swing,
/// with the heel height minimal exactly at contact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeelGaitConfig {
    pub stride_length_m: f64,
    pub step_width_m: f64,
    pub cadence_steps_per_min: f64,
    pub frame_rate: f64,
    pub n_frames: usize,
    pub heading_deg: f64,
    pub origin: [f64; 3],
    pub clearance_m: f64,
    /// Gait phase of the right heel at the first frame, in strides.
    pub phase0: f64,
}

impl Default for HeelGaitConfig {
    fn default() -> Self {
        Self {
            stride_length_m: 1.2,
            step_width_m: 0.1,
            cadence_steps_per_min: 120.0,
            frame_rate: 30.0,
            n_frames: 120,
            heading_deg: 0.0,
            origin: [0.0; 3],
            clearance_m: 0.08,
            phase0: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeelGait {
    pub times: Vec<f64>,
    pub right: Vec<[f64; 3]>,
    pub left: Vec<[f64; 3]>,
    /// Contacts strictly inside the trajectory, sorted by frame.
    pub contacts: Vec<ContactEvent>,
}

/// Generates a [`HeelGait`]; the stride must span an even number of frames.
pub fn heel_gait(cfg: &HeelGaitConfig) -> Result<HeelGait, SynthError> {
    let period = 120.0 * cfg.frame_rate / cfg.cadence_steps_per_min;
    let p = period.round() as usize;
    if (period - p as f64).abs() > 1e-9 || p < 2 || !p.is_multiple_of(2) {
        return Err(SynthError::Config(format!(
            "stride spans {period} frames; an even whole number is required"
        )));
    }
    let (s, c) = cfg.heading_deg.to_radians().sin_cos();
    let place = |x: f64, y: f64, z: f64| {
        [
            cfg.origin[0] + c * x - s * y,
            cfg.origin[1] + s * x + c * y,
            cfg.origin[2] + z,
        ]
    };
    let smooth = |v: f64| v * v * (3.0 - 2.0 * v);
    let mut right = Vec::with_capacity(cfg.n_frames);
    let mut left = Vec::with_capacity(cfg.n_frames);
    let mut contacts = Vec::new();
    let half = p / 2;
    // Shift so that phases are exact on whole frames.
    let start = (cfg.phase0 * p as f64).round() as i64;
    for i in 0..cfg.n_frames {
        for (side, offset, lateral) in [(Side::Right, 0, -0.5), (Side::Left, half, 0.5)] {
            let u_frames = i as i64 + start - offset as i64;
            let k = u_frames.div_euclid(p as i64);
            let psi = u_frames.rem_euclid(p as i64) as f64 / p as f64;
            let swing = if psi < 0.6 { 0.0 } else { smooth((psi - 0.6) / 0.4) };
            let base = if side == Side::Left { 0.5 } else { 0.0 };
            let x = cfg.stride_length_m * (k as f64 + swing + base);
            let z = cfg.clearance_m * (std::f64::consts::PI * psi).sin().powi(2);
            let pos = place(x, lateral * cfg.step_width_m, z);
            if psi == 0.0 && i > 0 && i + 1 < cfg.n_frames {
                contacts.push(ContactEvent {
                    side,
                    frame: i,
                    time: i as f64 / cfg.frame_rate,
                    position: pos,
                });
            }
            if side == Side::Right {
                right.push(pos);
            } else {
                left.push(pos);
            }
        }
    }
    Ok(HeelGait {
        times: (0..cfg.n_frames).map(|i| i as f64 / cfg.frame_rate).collect(),
        right,
        left,
        contacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{demo_biped, demo_biped_spine};

    fn small() -> SynthConfig {
        SynthConfig {
            duration_s: 1.0,
            n_trials: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let m = demo_biped();
        let a = generate_session(&m, &small()).unwrap();
        let b = generate_session(&m, &small()).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.truth, b.truth);
        let noisy = SynthConfig {
            noise_px: 1.0,
            ..small()
        };
        let c = generate_session(&m, &noisy).unwrap();
        let d = generate_session(&m, &SynthConfig { seed: 1, ..noisy }).unwrap();
        assert_ne!(c.trials, d.trials);
    }

    #[test]
    fn noiseless_keypoints_match_projection() {
        let m = demo_biped();
        let s = generate_session(&m, &small()).unwrap();
        let tr = &s.truth.trials[0];
        let markers = forward_kinematics_batch(
            &m,
            &tr.poses.iter().cloned().map(Pose).collect::<Vec<_>>(),
            &s.truth.subject,
        )
        .unwrap();
        let obs = &s.trials[0];
        for t in [0, 7, obs.n_frames() - 1] {
            for j in [0, 10, 40] {
                for c in 0..obs.n_cameras() {
                    let px = s.truth.rig.cameras[c]
                        .project(&ExtrinsicDelta::default(), &markers[t].0[j])
                        .unwrap();
                    let y = obs.keypoint(t, j, c);
                    assert!((px[0] - y[0]).abs() < 1e-9 && (px[1] - y[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn step_width_and_floor() {
        let m = demo_biped();
        let cfg = SynthConfig {
            duration_s: 2.0,
            ..small()
        };
        let s = generate_session(&m, &cfg).unwrap();
        let heels = heel_indices(&m).unwrap();
        let tr = &s.truth.trials[0];
        let markers = forward_kinematics_batch(
            &m,
            &tr.poses.iter().cloned().map(Pose).collect::<Vec<_>>(),
            &s.truth.subject,
        )
        .unwrap();
        let min_z = markers
            .iter()
            .flat_map(|mk| heels.iter().map(move |&h| mk.0[h][2]))
            .fold(f64::INFINITY, f64::min);
        assert!(min_z.abs() < 1e-12);
        let sep =
            mean_heel_separation(&m, &plan_gait(&m), &s.truth.subject, heels, s.truth.hip_adduction, 1.0).unwrap();
        assert!((sep - 0.12).abs() < 1e-6);
        // One contact per side per stride away from the ends.
        let right = tr.heel_strikes.iter().filter(|e| e.side == Side::Right).count();
        let left = tr.heel_strikes.iter().filter(|e| e.side == Side::Left).count();
        assert!((1..=2).contains(&right) && (1..=2).contains(&left), "{right} {left}");
    }

    #[test]
    fn spine_model_respects_constraints() {
        let m = demo_biped_spine();
        let s = generate_session(&m, &small()).unwrap();
        for p in &s.truth.trials[0].poses {
            let e = crate::kinematics::constraint_error(&m, &Pose(p.clone()));
            assert!(e.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn perturbation_magnitudes() {
        let m = demo_biped();
        let cfg = SynthConfig {
            perturb_rotation_deg: 0.5,
            perturb_translation_mm: 10.0,
            ..small()
        };
        let s = generate_session(&m, &cfg).unwrap();
        assert!(s.truth.perturbations[0].is_zero());
        assert_eq!(s.rig.cameras[0], s.truth.rig.cameras[0]);
        for p in &s.truth.perturbations[1..] {
            let (deg, mm) = p.magnitude_deg_mm();
            assert!((deg - 0.5).abs() < 1e-9 && (mm - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn outliers_lower_confidence() {
        let m = demo_biped();
        let cfg = SynthConfig {
            noise_px: 2.0,
            outlier_rate: 0.02,
            ..small()
        };
        let s = generate_session(&m, &cfg).unwrap();
        let w = &s.trials[0].confidences;
        let low = w.iter().filter(|&&v| v < 0.65).count() as f64 / w.len() as f64;
        assert!(low > 0.01 && low < 0.03, "{low}");
    }
}
