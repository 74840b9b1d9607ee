//! Evaluation: geometric consistency of fitted markers with the keypoints,
//! normalized-IQR spread, heel-strike detection, spatial step parameters and
//! affine/temporal alignment of event sets from two systems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraRig, ExtrinsicDelta};
use crate::fitter::{FitError, SessionFit};
use crate::kinematics::{forward_kinematics_batch, KinematicsError, MarkerSet};
use crate::model::{SkeletonModel, SubjectParams};
use crate::objective::{Binding, ObjectiveError, TrialObservations};
pub use crate::synth::Side;

/// Normal-consistency factor for the interquartile range.
pub const IQR_TO_SIGMA: f64 = 0.7413;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("only {0} events could be matched, need 3")]
    TooFewMatches(usize),
    #[error("trial {0} not found in fit")]
    UnknownTrial(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// `q(d, λ)`: fraction of observations with confidence above `lambda` whose
/// reprojection distance is below `d`. `None` when nothing passes the floor.
pub fn gc_fraction(distances: &[f64], weights: &[f64], d: f64, lambda: f64) -> Option<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for (&delta, &w) in distances.iter().zip(weights) {
        if w > lambda {
            n += 1;
            if delta < d {
                hit += 1;
            }
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Reprojection distances `δ` (pixels) and confidences for every
/// `(frame, joint, camera)` of a trial, in keypoint order. Points behind a
/// camera get an infinite distance.
pub fn reprojection_distances(
    model: &SkeletonModel,
    markers: &[MarkerSet],
    obs: &TrialObservations,
    cameras: &CameraRig,
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let binding = Binding::new(obs, model, cameras)?;
    let (nt, nj, nc) = (obs.n_frames(), obs.n_joints(), obs.n_cameras());
    let mut dist = Vec::with_capacity(nt * nj * nc);
    let mut w = Vec::with_capacity(nt * nj * nc);
    let zero = ExtrinsicDelta::default();
    for (t, m) in markers.iter().enumerate().take(nt) {
        for j in 0..nj {
            let x = m.0[binding.site_of_joint[j]];
            for c in 0..nc {
                let cam = &cameras.cameras[binding.rig_camera[c]];
                let y = obs.keypoint(t, j, c);
                let delta = match cam.project(&zero, &x) {
                    Ok(p) => ((p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2)).sqrt(),
                    Err(_) => f64::INFINITY,
                };
                dist.push(delta);
                w.push(obs.confidence(t, j, c));
            }
        }
    }
    Ok((dist, w))
}

/// Fitted marker positions at every observed frame of each trial, matched by trial name.
pub fn fitted_markers(
    model: &SkeletonModel,
    fit: &SessionFit,
    trials: &[TrialObservations],
) -> Result<Vec<Vec<MarkerSet>>, MetricsError> {
    trials
        .iter()
        .map(|obs| {
            let n = fit
                .trial_names
                .iter()
                .position(|t| *t == obs.name)
                .ok_or_else(|| MetricsError::UnknownTrial(obs.name.clone()))?;
            let poses = fit.poses(model, n, &obs.times)?;
            Ok(forward_kinematics_batch(model, &poses, &fit.subject)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConsistency {
    pub name: String,
    pub fractions: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub thresholds: Vec<f64>,
    pub confidence_floor: f64,
    /// All observations of all trials counted together.
    pub pooled: Vec<Option<f64>>,
    /// Mean over trials of the per-trial fractions.
    pub per_trial_mean: Vec<Option<f64>>,
    pub per_trial: Vec<TrialConsistency>,
}

impl ConsistencyReport {
    /// Pooled fraction at threshold `d`, if `d` is one of the thresholds.
    pub fn pooled_at(&self, d: f64) -> Option<f64> {
        let i = self.thresholds.iter().position(|&x| x == d)?;
        self.pooled[i]
    }
}

/// GC curve at each threshold, pooled and per trial. `samples` holds
/// `(trial name, distances, confidences)`.
pub fn consistency_report(
    samples: &[(String, Vec<f64>, Vec<f64>)],
    thresholds: &[f64],
    lambda: f64,
) -> ConsistencyReport {
    let per_trial: Vec<TrialConsistency> = samples
        .iter()
        .map(|(name, d, w)| TrialConsistency {
            name: name.clone(),
            fractions: thresholds.iter().map(|&x| gc_fraction(d, w, x, lambda)).collect(),
        })
        .collect();
    let all_d: Vec<f64> = samples.iter().flat_map(|s| s.1.iter().copied()).collect();
    let all_w: Vec<f64> = samples.iter().flat_map(|s| s.2.iter().copied()).collect();
    let pooled = thresholds
        .iter()
        .map(|&x| gc_fraction(&all_d, &all_w, x, lambda))
        .collect();
    let per_trial_mean = (0..thresholds.len())
        .map(|i| {
            let vals: Vec<f64> = per_trial.iter().filter_map(|t| t.fractions[i]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    ConsistencyReport {
        thresholds: thresholds.to_vec(),
        confidence_floor: lambda,
        pooled,
        per_trial_mean,
        per_trial,
    }
}

/// Consistency of a fitted session against `cameras` (pass the refined rig
/// for post-adjustment cameras, or a reference rig).
pub fn session_consistency(
    model: &SkeletonModel,
    fit: &SessionFit,
    trials: &[TrialObservations],
    cameras: &CameraRig,
    thresholds: &[f64],
    lambda: f64,
) -> Result<ConsistencyReport, MetricsError> {
    let markers = fitted_markers(model, fit, trials)?;
    let samples = trials
        .iter()
        .zip(&markers)
        .map(|(obs, m)| {
            let (d, w) = reprojection_distances(model, m, obs, cameras)?;
            Ok((obs.name.clone(), d, w))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(consistency_report(&samples, thresholds, lambda))
}

/// Quantile by linear interpolation between order statistics at position
/// `p (n - 1)` of the sorted sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `σ_IQR = 0.7413 (Q3 - Q1)`, quartiles from [`quantile_sorted`].
pub fn sigma_iqr(samples: &[f64]) -> Result<f64, MetricsError> {
    if samples.len() < 4 {
        return Err(MetricsError::TooFewSamples {
            needed: 4,
            got: samples.len(),
        });
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(IQR_TO_SIGMA * (quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeelStrikeParams {
    /// Vertical speed below which the heel counts as planted, m/s.
    pub speed_threshold: f64,
    /// Minimum spacing between events on one side, seconds.
    pub refractory_s: f64,
    /// Candidates must lie in the lowest fraction of the height range.
    pub height_band: f64,
}

impl Default for HeelStrikeParams {
    fn default() -> Self {
        Self {
            speed_threshold: 0.05,
            refractory_s: 0.3,
            height_band: 0.1,
        }
    }
}

/// Frames of heel strikes in one heel trajectory (z up): local minima of
/// height where the vertical speed drops under the threshold, the lowest kept
/// within each refractory window.
pub fn detect_heel_strikes(heel: &[[f64; 3]], frame_rate: f64, params: &HeelStrikeParams) -> Vec<usize> {
    let n = heel.len();
    if n < 3 {
        return Vec::new();
    }
    let z: Vec<f64> = heel.iter().map(|p| p[2]).collect();
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let band = lo + params.height_band * (hi - lo);
    let refractory = (params.refractory_s * frame_rate).ceil() as usize;
    let mut events: Vec<usize> = Vec::new();
    for i in 1..n - 1 {
        let speed = (z[i + 1] - z[i - 1]).abs() * 0.5 * frame_rate;
        // Flat stretches have no strict descent into them and are skipped.
        let is_min = z[i] < z[i - 1] && z[i] <= z[i + 1];
        // At a strict minimum the vertical velocity changes sign between samples,
        // so it crosses the threshold even when no sample falls under it.
        let slows = speed < params.speed_threshold || z[i] < z[i + 1];
        if !(is_min && slows && z[i] <= band) {
            continue;
        }
        match events.last_mut() {
            Some(last) if i - *last < refractory => {
                if z[i] < z[*last] {
                    *last = i;
                }
            }
            _ => events.push(i),
        }
    }
    events
}

/// One foot contact: side, time and heel position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeelEvent {
    pub side: Side,
    pub time: f64,
    pub position: [f64; 3],
}

/// Detected events of both heels, sorted by time.
pub fn heel_events(
    right: &[[f64; 3]],
    left: &[[f64; 3]],
    times: &[f64],
    frame_rate: f64,
    params: &HeelStrikeParams,
) -> Vec<HeelEvent> {
    let mut events = Vec::new();
    for (side, traj) in [(Side::Right, right), (Side::Left, left)] {
        for f in detect_heel_strikes(traj, frame_rate, params) {
            events.push(HeelEvent {
                side,
                time: times[f],
                position: traj[f],
            });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    events
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub side: Side,
    pub event_time: f64,
    pub heel_position: [f64; 3],
    /// Forward distance from the previous contralateral event.
    pub step_length: Option<f64>,
    /// Forward distance from the previous ipsilateral event.
    pub stride_length: Option<f64>,
    /// Lateral distance from the previous contralateral event.
    pub step_width: Option<f64>,
    /// False when the previous event was on the same side.
    pub alternating: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTable {
    /// Horizontal walking direction used for the forward/lateral split.
    pub forward_axis: [f64; 2],
    pub rows: Vec<StepRow>,
}

/// Principal axis of the horizontal heel displacements between consecutive
/// same-side events (consecutive events when no side repeats), signed along
/// the direction of travel.
fn walking_axis(events: &[HeelEvent]) -> Option<[f64; 2]> {
    let delta = |a: &HeelEvent, b: &HeelEvent| [b.position[0] - a.position[0], b.position[1] - a.position[1]];
    let mut disp: Vec<[f64; 2]> = events
        .iter()
        .enumerate()
        .filter_map(|(i, e)| events[..i].iter().rev().find(|p| p.side == e.side).map(|p| delta(p, e)))
        .collect();
    if disp.is_empty() {
        disp = events.windows(2).map(|w| delta(&w[0], &w[1])).collect();
    }
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for d in &disp {
        sxx += d[0] * d[0];
        sxy += d[0] * d[1];
        syy += d[1] * d[1];
    }
    if sxx + syy <= 0.0 {
        return None;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut axis = [angle.cos(), angle.sin()];
    let (first, last) = (&events[0].position, &events[events.len() - 1].position);
    if axis[0] * (last[0] - first[0]) + axis[1] * (last[1] - first[1]) < 0.0 {
        axis = [-axis[0], -axis[1]];
    }
    Some(axis)
}

/// Step, stride and width per event. `events` must be sorted by time.
pub fn step_parameters(events: &[HeelEvent]) -> StepTable {
    let axis = if events.len() >= 2 { walking_axis(events) } else { None };
    step_parameters_along(events, axis)
}

/// [`step_parameters`] with a given horizontal forward axis (unit length);
/// `None` leaves the distances empty.
pub fn step_parameters_along(events: &[HeelEvent], axis: Option<[f64; 2]>) -> StepTable {
    let Some(fwd) = axis else {
        return StepTable {
            forward_axis: [1.0, 0.0],
            rows: events
                .iter()
                .map(|e| StepRow {
                    side: e.side,
                    event_time: e.time,
                    heel_position: e.position,
                    step_length: None,
                    stride_length: None,
                    step_width: None,
                    alternating: true,
                })
                .collect(),
        };
    };
    let lat = [-fwd[1], fwd[0]];
    let split = |a: &[f64; 3], b: &[f64; 3]| {
        let d = [b[0] - a[0], b[1] - a[1]];
        (
            (d[0] * fwd[0] + d[1] * fwd[1]).abs(),
            (d[0] * lat[0] + d[1] * lat[1]).abs(),
        )
    };
    let rows = events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let prev = i.checked_sub(1).map(|k| &events[k]);
            let contra = prev.filter(|p| p.side != e.side);
            let ipsi = events[..i].iter().rev().find(|p| p.side == e.side);
            let (step_length, step_width) = match contra {
                Some(p) => {
                    let (f, l) = split(&p.position, &e.position);
                    (Some(f), Some(l))
                }
                None => (None, None),
            };
            StepRow {
                side: e.side,
                event_time: e.time,
                heel_position: e.position,
                step_length,
                stride_length: ipsi.map(|p| split(&p.position, &e.position).0),
                step_width,
                alternating: prev.is_none_or(|p| p.side != e.side),
            }
        })
        .collect();
    StepTable {
        forward_axis: fwd,
        rows,
    }
}

/// A floor contact as recorded by a walkway or derived from a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkwayEvent {
    pub time_s: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub side: Side,
}

impl From<&HeelEvent> for WalkwayEvent {
    fn from(e: &HeelEvent) -> Self {
        Self {
            time_s: e.time,
            x_m: e.position[0],
            y_m: e.position[1],
            side: e.side,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResidual {
    pub n_matched: usize,
    pub rms_m: f64,
    pub max_m: f64,
    pub rms_time_s: f64,
}

/// Maps system A into system B: `p_b = matrix p_a + translation`, `t_b = t_a + time_offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
    pub time_offset: f64,
    /// Matched `(index in a, index in b)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub residual: AlignmentResidual,
}

impl Alignment {
    pub fn apply(&self, e: &WalkwayEvent) -> WalkwayEvent {
        let m = &self.matrix;
        WalkwayEvent {
            time_s: e.time_s + self.time_offset,
            x_m: m[0][0] * e.x_m + m[0][1] * e.y_m + self.translation[0],
            y_m: m[1][0] * e.x_m + m[1][1] * e.y_m + self.translation[1],
            side: e.side,
        }
    }
}

/// Same-side nearest-time matching of `a` shifted by `tau` onto `b`.
fn match_events(a: &[WalkwayEvent], b: &[WalkwayEvent], tau: f64, tol: f64) -> Vec<(usize, usize)> {
    let mut used = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (i, ea) in a.iter().enumerate() {
        let best = b
            .iter()
            .enumerate()
            .filter(|(k, eb)| !used[*k] && eb.side == ea.side)
            .map(|(k, eb)| (k, (eb.time_s - ea.time_s - tau).abs()))
            .filter(|(_, dt)| *dt <= tol)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((k, _)) = best {
            used[k] = true;
            pairs.push((i, k));
        }
    }
    pairs
}

fn fit_affine(a: &[WalkwayEvent], b: &[WalkwayEvent], pairs: &[(usize, usize)]) -> Result<Alignment, MetricsError> {
    let n = pairs.len();
    let mut design = DMatrix::zeros(n, 3);
    let mut bx = DVector::zeros(n);
    let mut by = DVector::zeros(n);
    for (r, &(i, k)) in pairs.iter().enumerate() {
        design[(r, 0)] = a[i].x_m;
        design[(r, 1)] = a[i].y_m;
        design[(r, 2)] = 1.0;
        bx[r] = b[k].x_m;
        by[r] = b[k].y_m;
    }
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if n < 3 || smin <= 1e-9 * smax.max(1.0) {
        return Err(MetricsError::Degenerate(
            "event positions are collinear; a 2-D affine map is not determined".into(),
        ));
    }
    let cx = svd
        .solve(&bx, 0.0)
        .map_err(|e| MetricsError::Degenerate(e.to_string()))?;
    let cy = svd
        .solve(&by, 0.0)
        .map_err(|e| MetricsError::Degenerate(e.to_string()))?;
    let tau = pairs.iter().map(|&(i, k)| b[k].time_s - a[i].time_s).sum::<f64>() / n as f64;
    let mut al = Alignment {
        matrix: [[cx[0], cx[1]], [cy[0], cy[1]]],
        translation: [cx[2], cy[2]],
        time_offset: tau,
        pairs: pairs.to_vec(),
        residual: AlignmentResidual {
            n_matched: n,
            rms_m: 0.0,
            max_m: 0.0,
            rms_time_s: 0.0,
        },
    };
    let (mut ss, mut mx, mut st) = (0.0, 0.0f64, 0.0);
    for &(i, k) in pairs {
        let p = al.apply(&a[i]);
        let e = ((p.x_m - b[k].x_m).powi(2) + (p.y_m - b[k].y_m).powi(2)).sqrt();
        ss += e * e;
        mx = mx.max(e);
        st += (p.time_s - b[k].time_s).powi(2);
    }
    al.residual.rms_m = (ss / n as f64).sqrt();
    al.residual.max_m = mx;
    al.residual.rms_time_s = (st / n as f64).sqrt();
    Ok(al)
}

/// Least-squares 2-D affine map and time shift from event set `a` to `b`.
/// Correspondences are found by trying every same-side time difference as
/// the shift and keeping the matching with most pairs, then least residual.
pub fn align_trials(a: &[WalkwayEvent], b: &[WalkwayEvent]) -> Result<Alignment, MetricsError> {
    let spacing = |ev: &[WalkwayEvent]| {
        let mut t: Vec<f64> = ev.iter().map(|e| e.time_s).collect();
        t.sort_by(f64::total_cmp);
        t.windows(2)
            .map(|w| w[1] - w[0])
            .filter(|d| *d > 0.0)
            .fold(f64::INFINITY, f64::min)
    };
    let tol = (0.25 * spacing(a).min(spacing(b))).min(0.5);
    let tol = if tol.is_finite() { tol } else { 0.5 };
    let mut best: Option<Alignment> = None;
    let mut most = 0;
    let mut first_err = None;
    for ea in a {
        for eb in b.iter().filter(|eb| eb.side == ea.side) {
            let pairs = match_events(a, b, eb.time_s - ea.time_s, tol);
            most = most.max(pairs.len());
            if pairs.len() < 3 {
                continue;
            }
            match fit_affine(a, b, &pairs) {
                Ok(al) => {
                    let better = match &best {
                        None => true,
                        Some(cur) => {
                            al.pairs.len() > cur.pairs.len()
                                || (al.pairs.len() == cur.pairs.len() && al.residual.rms_m < cur.residual.rms_m)
                        }
                    };
                    if better {
                        best = Some(al);
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
    }
    match (best, first_err) {
        (Some(al), _) => Ok(al),
        (None, Some(e)) => Err(e),
        (None, None) => Err(MetricsError::TooFewMatches(most)),
    }
}

/// One alignment over a set of trials: `a[k]` and `b[k]` are the events of
/// trial `k` in each system. Trials are laid end to end in time, far enough
/// apart that events never match across trials, and share the affine map and
/// time offset. Returns the alignment, whose `pairs` index the stacked
/// events, and the matched pairs within each trial.
pub fn align_trial_sets(
    a: &[Vec<WalkwayEvent>],
    b: &[Vec<WalkwayEvent>],
) -> Result<(Alignment, Vec<Vec<(usize, usize)>>), MetricsError> {
    let extent = a.iter().chain(b).flatten().map(|e| e.time_s.abs()).fold(0.0, f64::max);
    let gap = 10.0 * (extent + 1.0);
    let stack = |sets: &[Vec<WalkwayEvent>]| {
        let mut flat = Vec::new();
        let mut owner = Vec::new();
        for (k, set) in sets.iter().enumerate() {
            for (i, e) in set.iter().enumerate() {
                let mut e = e.clone();
                e.time_s += gap * k as f64;
                flat.push(e);
                owner.push((k, i));
            }
        }
        (flat, owner)
    };
    let (fa, oa) = stack(a);
    let (fb, ob) = stack(b);
    let al = align_trials(&fa, &fb)?;
    let mut per_trial = vec![Vec::new(); a.len()];
    for &(i, k) in &al.pairs {
        let ((ta, ia), (tb, ib)) = (oa[i], ob[k]);
        if ta == tb {
            per_trial[ta].push((ia, ib));
        }
    }
    Ok((al, per_trial))
}

/// Per-parameter differences `a - b` for matched rows of two step tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepErrors {
    pub step_length: Vec<f64>,
    pub stride_length: Vec<f64>,
    pub step_width: Vec<f64>,
}

impl StepErrors {
    pub fn extend(&mut self, other: StepErrors) {
        self.step_length.extend(other.step_length);
        self.stride_length.extend(other.stride_length);
        self.step_width.extend(other.step_width);
    }
}

/// Compares rows paired by event index, where row `i` of each table belongs to event `i`.
pub fn step_errors(a: &StepTable, b: &StepTable, pairs: &[(usize, usize)]) -> StepErrors {
    let mut out = StepErrors::default();
    let diff = |x: Option<f64>, y: Option<f64>, v: &mut Vec<f64>| {
        if let (Some(x), Some(y)) = (x, y) {
            v.push(x - y);
        }
    };
    for &(i, k) in pairs {
        let (ra, rb) = (&a.rows[i], &b.rows[k]);
        diff(ra.step_length, rb.step_length, &mut out.step_length);
        diff(ra.stride_length, rb.stride_length, &mut out.stride_length);
        diff(ra.step_width, rb.step_width, &mut out.step_width);
    }
    out
}

/// Heel site trajectories (right, left) from marker sets.
pub fn heel_trajectories(markers: &[MarkerSet], right: usize, left: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    (
        markers.iter().map(|m| m.0[right]).collect(),
        markers.iter().map(|m| m.0[left]).collect(),
    )
}

/// Marker positions of a subject over a list of poses, one set per pose.
pub fn markers_for(
    model: &SkeletonModel,
    poses: &[Vec<f64>],
    subject: &SubjectParams,
) -> Result<Vec<MarkerSet>, MetricsError> {
    let p: Vec<_> = poses.iter().cloned().map(crate::kinematics::Pose).collect();
    Ok(forward_kinematics_batch(model, &p, subject)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, x: f64, y: f64, side: Side) -> WalkwayEvent {
        WalkwayEvent {
            time_s: t,
            x_m: x,
            y_m: y,
            side,
        }
    }

    #[test]
    fn gc_examples() {
        let w = [1.0; 4];
        assert_eq!(gc_fraction(&[1.0, 3.0, 6.0, 9.0], &w, 5.0, 0.5), Some(0.5));
        assert_eq!(gc_fraction(&[10.0; 4], &w, 5.0, 0.5), Some(0.0));
        assert_eq!(gc_fraction(&[0.0; 4], &w, 5.0, 0.5), Some(1.0));
        assert_eq!(gc_fraction(&[0.0; 4], &[0.2; 4], 5.0, 0.5), None);
    }

    #[test]
    fn sigma_iqr_examples() {
        assert!((sigma_iqr(&[1.0, 2.0, 3.0, 4.0]).unwrap() - 1.11195).abs() < 1e-12);
        assert_eq!(sigma_iqr(&[2.5; 7]).unwrap(), 0.0);
        assert!(matches!(
            sigma_iqr(&[1.0, 2.0]),
            Err(MetricsError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn stationary_heel_has_no_events() {
        let heel = vec![[0.1, 0.2, 0.03]; 90];
        assert!(detect_heel_strikes(&heel, 30.0, &HeelStrikeParams::default()).is_empty());
    }

    #[test]
    fn same_side_events_give_stride_only() {
        let events = vec![
            HeelEvent {
                side: Side::Left,
                time: 0.0,
                position: [0.0, 0.05, 0.0],
            },
            HeelEvent {
                side: Side::Left,
                time: 1.0,
                position: [1.2, 0.05, 0.0],
            },
        ];
        let t = step_parameters(&events);
        assert!((t.rows[1].stride_length.unwrap() - 1.2).abs() < 1e-12);
        assert!(t.rows.iter().all(|r| r.step_length.is_none() && r.step_width.is_none()));
        assert!(!t.rows[1].alternating);
    }

    #[test]
    fn alignment_identity_and_shift() {
        let a = vec![
            ev(0.0, 0.0, -0.05, Side::Right),
            ev(0.5, 0.6, 0.05, Side::Left),
            ev(1.0, 1.2, -0.05, Side::Right),
            ev(1.5, 1.8, 0.05, Side::Left),
        ];
        let id = align_trials(&a, &a).unwrap();
        assert_eq!(id.pairs.len(), 4);
        assert!(id.residual.rms_m < 1e-12 && id.time_offset.abs() < 1e-12);
        assert!((id.matrix[0][0] - 1.0).abs() < 1e-9 && id.matrix[0][1].abs() < 1e-9);
        let b: Vec<_> = a
            .iter()
            .map(|e| ev(e.time_s + 0.1, e.x_m + 0.5, e.y_m + 0.2, e.side))
            .collect();
        let al = align_trials(&a, &b).unwrap();
        assert!((al.translation[0] - 0.5).abs() < 1e-9 && (al.translation[1] - 0.2).abs() < 1e-9);
        assert!((al.time_offset - 0.1).abs() < 1e-12 && al.residual.rms_m < 1e-9);
    }

    #[test]
    fn collinear_events_are_rank_deficient() {
        let a: Vec<_> = (0..5)
            .map(|i| {
                ev(
                    i as f64 * 0.5,
                    i as f64 * 0.6,
                    0.0,
                    if i % 2 == 0 { Side::Right } else { Side::Left },
                )
            })
            .collect();
        assert!(matches!(align_trials(&a, &a), Err(MetricsError::Degenerate(_))));
    }
}
