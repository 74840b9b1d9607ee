//! Bilevel fitting of per-trial trajectories and shared subject parameters,
//! with optional bundle adjustment and trilevel refinement of the base
//! marker positions across subjects.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::camera::{CameraRig, ExtrinsicDelta};
use crate::kinematics::{base_site_tensor, forward_kinematics_on_tape, KinematicInputs, Pose, Squash};
use crate::model::{ModelError, SkeletonModel, SubjectParams};
use crate::objective::{
    constraint_loss_on_tape, reprojection_on_tape, Binding, FrameBatch, LossComponents, LossWeights, ObjectiveError,
    TrialObservations,
};
use crate::tensor::Tensor;
use crate::trajectory::{
    encode_times, eval_trajectory_batch, init_trajectory, poses_on_tape, EncodingConfig, ImplicitTrajectory,
    TrajectoryError, DEFAULT_ENCODING_DIM, DESK_LAYERS, PAPER_LAYERS,
};

/// Consecutive non-finite iterations tolerated before a fit is abandoned.
pub const MAX_CONSECUTIVE_NON_FINITE: usize = 10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("step {step} outside [0, {steps}]")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("trial `{0}` has no frames")]
    EmptyTrial(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("meta-fit needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("frozen site `{0}` is not in the model")]
    UnknownSite(String),
    #[error(
        "fit diverged at iteration {iteration}: loss or gradients non-finite for {consecutive} consecutive iterations"
    )]
    Divergence {
        iteration: usize,
        consecutive: usize,
        /// State before the first of the failing iterations.
        snapshot: Box<SessionFit>,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimization settings; the JSON config file mirrors these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_timepoints: usize,
    pub bundle_adjust: bool,
    /// Bundle adjustment starts here; unset means three quarters of `steps`.
    pub ba_start_step: Option<usize>,
    pub ba_lr: f64,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub encoding_dim: usize,
    pub lambda_beta: f64,
    pub lambda_eps: f64,
    pub huber_delta: f64,
    /// Learning-rate multipliers for the scale parameters and the marker offsets.
    pub scale_lr_factor: f64,
    pub offset_lr_factor: f64,
    /// Scales and offsets stay fixed for this many initial steps.
    pub subject_warmup_steps: usize,
    /// Meta-fit only: learning-rate multiplier for the shared base site positions.
    pub base_lr_factor: f64,
    /// Meta-fit only: base site positions stay fixed for this many initial steps.
    pub base_warmup_steps: usize,
    /// Stop after this many iterations of the `steps`-long schedule.
    pub max_iterations: Option<usize>,
    /// Subjects per meta-fit iteration; 0 means all.
    pub subjects_per_batch: usize,
    /// Iterations between progress log lines; 0 disables them.
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Offset shrinkage used by the short desk schedule.
pub const DESK_LAMBDA_BETA: f64 = 1e5;

impl FitConfig {
    /// Desk-scale defaults: small network, 2000 steps.
    pub fn desk() -> Self {
        let steps = 2000;
        Self {
            steps,
            lr_start: 5e-3,
            lr_end: 3e-4,
            beta1: 0.8,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            batch_timepoints: 300,
            bundle_adjust: true,
            ba_start_step: None,
            ba_lr: 1e-4,
            seed: 0,
            layer_sizes: DESK_LAYERS.to_vec(),
            encoding_dim: DEFAULT_ENCODING_DIM,
            lambda_beta: DESK_LAMBDA_BETA,
            lambda_eps: LossWeights::default().lambda_eps,
            huber_delta: LossWeights::default().huber_delta,
            scale_lr_factor: 1.0,
            offset_lr_factor: 0.1,
            subject_warmup_steps: 0,
            base_lr_factor: 0.1,
            base_warmup_steps: 500,
            max_iterations: None,
            subjects_per_batch: 0,
            log_every: 100,
        }
    }

    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            steps: 40_000,
            lr_start: 1e-4,
            lr_end: 1e-7,
            ba_start_step: Some(30_000),
            ba_lr: 1e-5,
            layer_sizes: PAPER_LAYERS.to_vec(),
            lambda_beta: LossWeights::default().lambda_beta,
            offset_lr_factor: 1.0,
            base_lr_factor: 1.0,
            base_warmup_steps: 0,
            log_every: 1000,
            ..Self::desk()
        }
    }

    /// Iterations actually run.
    pub fn iterations(&self) -> usize {
        self.max_iterations.map_or(self.steps, |m| m.min(self.steps))
    }

    pub fn ba_start(&self) -> usize {
        self.ba_start_step.unwrap_or(self.steps * 3 / 4)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_beta: self.lambda_beta,
            lambda_eps: self.lambda_eps,
            huber_delta: self.huber_delta,
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.to_string()));
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad("learning rates must satisfy 0 < lr_end <= lr_start");
        }
        if self.ba_start() > self.steps {
            return bad("ba_start_step must not exceed steps");
        }
        if self.batch_timepoints == 0 {
            return bad("batch_timepoints must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moment coefficients must lie in [0, 1)");
        }
        let factors = [self.scale_lr_factor, self.offset_lr_factor, self.base_lr_factor];
        if !factors.iter().all(|f| f.is_finite() && *f >= 0.0) {
            return bad("learning-rate factors must be finite and non-negative");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.ba_lr >= 0.0) {
            return bad("adam_eps must be positive; weight_decay and ba_lr non-negative");
        }
        if self.encoding_dim == 0 || self.layer_sizes.contains(&0) {
            return bad("encoding_dim and layer sizes must be positive");
        }
        self.loss_weights()
            .validate()
            .map_err(|e| FitError::Config(e.to_string()))
    }
}

/// `lr_start (lr_end / lr_start)^(step / steps)`.
pub fn learning_rate_at(step: usize, config: &FitConfig) -> Result<f64, FitError> {
    if step > config.steps {
        return Err(FitError::StepOutOfRange {
            step,
            steps: config.steps,
        });
    }
    if step == 0 {
        return Ok(config.lr_start);
    }
    if step == config.steps {
        return Ok(config.lr_end);
    }
    let frac = step as f64 / config.steps as f64;
    Ok(config.lr_start * (config.lr_end / config.lr_start).powf(frac))
}

/// `count` frame indices drawn uniformly with replacement.
pub fn sample_timepoints(n_frames: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, FitError> {
    if n_frames == 0 {
        return Err(FitError::EmptyTrial(String::new()));
    }
    Ok((0..count).map(|_| rng.random_range(0..n_frames)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments for a list of parameter blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One decoupled-weight-decay Adam update. Decay applies to blocks with
/// `decay[i]` set; pass a zero `weight_decay` for plain Adam.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamHyper,
    decay: &[bool],
) -> Result<(), FitError> {
    adamw_step_scaled(params, grads, state, hp, decay, &vec![1.0; params.len()])
}

/// [`adamw_step`] with a per-block learning-rate multiplier.
pub fn adamw_step_scaled(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamHyper,
    decay: &[bool],
    lr_scale: &[f64],
) -> Result<(), FitError> {
    if params.len() != lr_scale.len() {
        return Err(FitError::Shape(format!(
            "{} parameter blocks, {} learning-rate multipliers",
            params.len(),
            lr_scale.len()
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(FitError::Shape(format!(
            "{} parameter blocks, {} gradients, {} moment blocks",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(FitError::Shape(format!(
                "block {i}: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(FitError::Shape(format!("block {i}: non-finite gradient")));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let wd = if decay[i] { hp.weight_decay } else { 0.0 };
        let lr = hp.lr * lr_scale[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *x -= lr * (mhat / (vhat.sqrt() + hp.eps) + wd * *x);
        }
    }
    Ok(())
}

/// One iteration's losses, summed over trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitLogRecord {
    pub iteration: usize,
    pub reprojection: f64,
    pub offset: f64,
    pub constraint: f64,
    pub total: f64,
    pub lr: f64,
}

/// Fitted session: one trajectory per trial, one subject, per-camera deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionFit {
    pub trial_names: Vec<String>,
    pub trajectories: Vec<ImplicitTrajectory>,
    pub encodings: Vec<EncodingConfig>,
    /// Time of each trial's first frame; encodings use time relative to it.
    pub time_origins: Vec<f64>,
    pub subject: SubjectParams,
    pub camera_deltas: Vec<ExtrinsicDelta>,
    pub fit_log: Vec<FitLogRecord>,
    pub skipped_steps: usize,
}

impl SessionFit {
    /// Squashed poses of trial `n` at absolute times `times`.
    pub fn poses(&self, model: &SkeletonModel, n: usize, times: &[f64]) -> Result<Vec<Pose>, FitError> {
        let origin = self.time_origins[n];
        let enc = &self.encodings[n];
        // Clamp away round-off so the last frame stays inside the encoding range.
        let rel: Vec<f64> = times.iter().map(|t| (t - origin).clamp(0.0, enc.t_max)).collect();
        Ok(eval_trajectory_batch(&self.trajectories[n], enc, model, &rel)?)
    }

    /// The rig with the learned deltas baked in.
    pub fn refined_rig(&self, rig: &CameraRig) -> CameraRig {
        rig.refined(&self.camera_deltas)
    }
}

/// Model, rig and trials with their precomputed time features.
pub struct SessionProblem<'a> {
    pub model: &'a SkeletonModel,
    pub rig: &'a CameraRig,
    pub trials: &'a [TrialObservations],
    pub weights: LossWeights,
    bindings: Vec<Binding>,
    features: Vec<Tensor>,
    encodings: Vec<EncodingConfig>,
    squash: Arc<Squash>,
}

impl<'a> SessionProblem<'a> {
    pub fn new(
        model: &'a SkeletonModel,
        rig: &'a CameraRig,
        trials: &'a [TrialObservations],
        encoding_dim: usize,
        weights: LossWeights,
    ) -> Result<Self, FitError> {
        if trials.is_empty() {
            return Err(FitError::Config("no trials given".into()));
        }
        weights.validate()?;
        let mut bindings = Vec::new();
        let mut features = Vec::new();
        let mut encodings = Vec::new();
        for obs in trials {
            if obs.n_frames() == 0 {
                return Err(FitError::EmptyTrial(obs.name.clone()));
            }
            obs.validate()?;
            bindings.push(Binding::new(obs, model, rig)?);
            let t_max = if obs.duration() > 0.0 { obs.duration() } else { 1.0 };
            let enc = EncodingConfig::new(encoding_dim, t_max)?;
            let rel: Vec<f64> = obs.times.iter().map(|t| (t - obs.times[0]).clamp(0.0, t_max)).collect();
            features.push(encode_times(&rel, &enc)?);
            encodings.push(enc);
        }
        Ok(Self {
            model,
            rig,
            trials,
            weights,
            bindings,
            features,
            encodings,
            squash: Arc::new(Squash::for_model(model)),
        })
    }

    pub fn encodings(&self) -> &[EncodingConfig] {
        &self.encodings
    }

    pub fn has_constraints(&self) -> bool {
        !self.model.constraints.is_empty()
    }
}

/// All learnable quantities of one subject's session, as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionParams {
    pub trajectories: Vec<ImplicitTrajectory>,
    /// `1 x n_scales`.
    pub scales: Tensor,
    /// `J x 3`.
    pub offsets: Tensor,
    /// `C x 3` axis-angle deltas; row 0 stays zero.
    pub delta_rot: Tensor,
    /// `C x 3` translation deltas; row 0 stays zero.
    pub delta_trans: Tensor,
}

impl SessionParams {
    pub fn init(problem: &SessionProblem, layer_sizes: &[usize], seed: u64) -> Result<Self, FitError> {
        let model = problem.model;
        let trajectories = problem
            .encodings
            .iter()
            .enumerate()
            .map(|(n, enc)| init_trajectory(seed.wrapping_add(1 + n as u64), enc, layer_sizes, model.n_dof))
            .collect::<Result<_, _>>()?;
        let c = problem.rig.len();
        Ok(Self {
            trajectories,
            scales: Tensor::filled(1, model.scale_map.n_scales(), 1.0),
            offsets: Tensor::zeros(model.n_sites(), 3),
            delta_rot: Tensor::zeros(c, 3),
            delta_trans: Tensor::zeros(c, 3),
        })
    }

    pub fn subject(&self) -> SubjectParams {
        SubjectParams {
            scales: self.scales.data().to_vec(),
            site_offsets: (0..self.offsets.rows())
                .map(|j| {
                    let r = self.offsets.row_slice(j);
                    [r[0], r[1], r[2]]
                })
                .collect(),
        }
    }

    pub fn deltas(&self) -> Vec<ExtrinsicDelta> {
        (0..self.delta_rot.rows())
            .map(|c| {
                let r = self.delta_rot.row_slice(c);
                let t = self.delta_trans.row_slice(c);
                ExtrinsicDelta {
                    rotation: [r[0], r[1], r[2]],
                    translation: [t[0], t[1], t[2]],
                }
            })
            .collect()
    }

    /// Every parameter block in canonical order: each trajectory's blocks,
    /// then scales, offsets, rotation deltas, translation deltas.
    pub fn blocks(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.trajectories.iter().flat_map(|t| t.blocks()).collect();
        out.extend([&self.scales, &self.offsets, &self.delta_rot, &self.delta_trans]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.trajectories.iter_mut().flat_map(|t| t.blocks_mut()).collect();
        out.extend([
            &mut self.scales,
            &mut self.offsets,
            &mut self.delta_rot,
            &mut self.delta_trans,
        ]);
        out
    }

    pub fn n_blocks(&self) -> usize {
        self.trajectories.iter().map(|t| 2 * t.n_layers()).sum::<usize>() + 4
    }

    fn to_fit(&self, problem: &SessionProblem, log: Vec<FitLogRecord>, skipped: usize) -> SessionFit {
        SessionFit {
            trial_names: problem.trials.iter().map(|t| t.name.clone()).collect(),
            trajectories: self.trajectories.clone(),
            encodings: problem.encodings.clone(),
            time_origins: problem.trials.iter().map(|t| t.times[0]).collect(),
            subject: self.subject(),
            camera_deltas: self.deltas(),
            fit_log: log,
            skipped_steps: skipped,
        }
    }
}

/// What is differentiated in one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Camera deltas (except camera 0) receive gradients.
    pub bundle_adjust: bool,
    /// Base site positions receive gradients.
    pub learn_base: bool,
}

/// Loss terms and gradients of one session evaluation. `grads` follows
/// [`SessionParams::blocks`].
#[derive(Clone, Debug, PartialEq)]
pub struct SessionEval {
    pub components: LossComponents,
    pub total: f64,
    pub grads: Vec<Tensor>,
    pub base_grad: Option<Tensor>,
}

impl SessionEval {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.grads.iter().all(Tensor::is_finite)
            && self.base_grad.as_ref().is_none_or(Tensor::is_finite)
    }
}

struct TrialEval {
    reprojection: f64,
    constraint: f64,
    traj_grads: Vec<Tensor>,
    scales: Tensor,
    offsets: Tensor,
    delta_rot: Tensor,
    delta_trans: Tensor,
    base: Option<Tensor>,
}

fn evaluate_trial(
    problem: &SessionProblem,
    n: usize,
    params: &SessionParams,
    base_sites: &Tensor,
    batch: &FrameBatch,
    opts: EvalOptions,
) -> TrialEval {
    let model = problem.model;
    let obs = &problem.trials[n];
    let mut tape = Tape::new();
    let blocks: Vec<Var> = params.trajectories[n]
        .blocks()
        .into_iter()
        .map(|b| tape.input(b.clone()))
        .collect();
    let scales = tape.input(params.scales.clone());
    let offsets = tape.input(params.offsets.clone());
    let base = if opts.learn_base {
        tape.input(base_sites.clone())
    } else {
        tape.constant(base_sites.clone())
    };
    let n_cams = problem.rig.len();
    let deltas: Vec<Option<(Var, Var)>> = (0..n_cams)
        .map(|c| {
            let r = Tensor::row(params.delta_rot.row_slice(c));
            let t = Tensor::row(params.delta_trans.row_slice(c));
            if opts.bundle_adjust && c > 0 {
                Some((tape.input(r), tape.input(t)))
            } else if r.max_abs() > 0.0 || t.max_abs() > 0.0 {
                Some((tape.constant(r), tape.constant(t)))
            } else {
                None
            }
        })
        .collect();

    let feats = &problem.features[n];
    let mut feat_data = Vec::with_capacity(batch.len() * feats.cols());
    for &f in &batch.frames {
        feat_data.extend_from_slice(feats.row_slice(f));
    }
    let features = tape.constant(Tensor::from_vec(batch.len(), feats.cols(), feat_data));
    let pose = poses_on_tape(&mut tape, &blocks, features, &problem.squash);
    let markers = forward_kinematics_on_tape(
        &mut tape,
        model,
        KinematicInputs {
            pose,
            scales,
            offsets,
            base_sites: base,
        },
    );
    let l_pi = reprojection_on_tape(
        &mut tape,
        obs,
        &problem.bindings[n],
        problem.rig,
        markers,
        model.n_sites(),
        batch,
        &deltas,
        problem.weights.huber_delta,
    );
    let l_eps = if problem.has_constraints() {
        constraint_loss_on_tape(&mut tape, model, pose, batch)
    } else {
        None
    };
    let total = match l_eps {
        Some(e) => {
            let scaled = tape.scale(e, problem.weights.lambda_eps);
            tape.add(l_pi, scaled)
        }
        None => l_pi,
    };
    let mut grads = tape.gradients(total);
    let mut delta_rot = Tensor::zeros(n_cams, 3);
    let mut delta_trans = Tensor::zeros(n_cams, 3);
    if opts.bundle_adjust {
        for (c, d) in deltas.iter().enumerate().skip(1) {
            if let Some((r, t)) = d {
                delta_rot
                    .row_slice_mut(c)
                    .copy_from_slice(grads.take_or_zeros(&tape, *r).data());
                delta_trans
                    .row_slice_mut(c)
                    .copy_from_slice(grads.take_or_zeros(&tape, *t).data());
            }
        }
    }
    TrialEval {
        reprojection: tape.value(l_pi).item(),
        constraint: l_eps.map_or(0.0, |e| tape.value(e).item()),
        traj_grads: blocks.iter().map(|&b| grads.take_or_zeros(&tape, b)).collect(),
        scales: grads.take_or_zeros(&tape, scales),
        offsets: grads.take_or_zeros(&tape, offsets),
        delta_rot,
        delta_trans,
        base: opts.learn_base.then(|| grads.take_or_zeros(&tape, base)),
    }
}

/// Evaluates `L = Σ_n (L_Π,n + λ_ε L_ε,n) + λ_β L_β` and its gradients for
/// one batch per trial. Trials may run concurrently; results are combined
/// in trial order.
pub fn evaluate_session(
    problem: &SessionProblem,
    params: &SessionParams,
    base_sites: &Tensor,
    batches: &[FrameBatch],
    opts: EvalOptions,
) -> SessionEval {
    let per_trial: Vec<TrialEval> = (0..problem.trials.len())
        .into_par_iter()
        .map(|n| evaluate_trial(problem, n, params, base_sites, &batches[n], opts))
        .collect();

    let j3 = params.offsets.len() as f64;
    let offset_value = params.offsets.data().iter().map(|v| v * v).sum::<f64>() / j3;
    let mut offsets_grad = params.offsets.map(|v| problem.weights.lambda_beta * 2.0 * v / j3);
    let mut scales_grad = Tensor::zeros(1, params.scales.cols());
    let mut rot_grad = Tensor::zeros(params.delta_rot.rows(), 3);
    let mut trans_grad = Tensor::zeros(params.delta_trans.rows(), 3);
    let mut base_grad = opts.learn_base.then(|| Tensor::zeros(base_sites.rows(), 3));
    let mut components = LossComponents {
        offset: offset_value,
        ..LossComponents::default()
    };
    let mut traj_grads = Vec::with_capacity(params.n_blocks());
    for t in per_trial {
        components.reprojection += t.reprojection;
        components.constraint += t.constraint;
        traj_grads.extend(t.traj_grads);
        scales_grad.axpy(1.0, &t.scales);
        offsets_grad.axpy(1.0, &t.offsets);
        rot_grad.axpy(1.0, &t.delta_rot);
        trans_grad.axpy(1.0, &t.delta_trans);
        if let (Some(acc), Some(g)) = (base_grad.as_mut(), t.base.as_ref()) {
            acc.axpy(1.0, g);
        }
    }
    let mut grads = traj_grads;
    grads.extend([scales_grad, offsets_grad, rot_grad, trans_grad]);
    let total = crate::objective::total_loss(&components, &problem.weights, problem.has_constraints());
    SessionEval {
        components,
        total,
        grads,
        base_grad,
    }
}

/// Rayon pool sized by `KINEFIT_THREADS` when set.
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var("KINEFIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

/// Optimizer state of one subject's session.
struct SessionOptimizer {
    params: SessionParams,
    main: AdamState,
    ba: AdamState,
    decay: Vec<bool>,
    n_main: usize,
    log: Vec<FitLogRecord>,
    skipped: usize,
    consecutive: usize,
    last_good: Option<SessionParams>,
}

impl SessionOptimizer {
    fn new(params: SessionParams) -> Self {
        let blocks = params.blocks();
        let n_main = blocks.len() - 2;
        // Network weights and offsets decay; scales do not.
        let mut decay = vec![true; n_main];
        decay[n_main - 2] = false;
        let main = AdamState::new(blocks[..n_main].iter().copied());
        let ba = AdamState::new(blocks[n_main..].iter().copied());
        Self {
            params,
            main,
            ba,
            decay,
            n_main,
            log: Vec::new(),
            skipped: 0,
            consecutive: 0,
            last_good: None,
        }
    }

    /// Applies one evaluated step. Returns false when the step was skipped.
    fn apply(&mut self, eval: &SessionEval, cfg: &FitConfig, iteration: usize, lr: f64, ba_active: bool) -> bool {
        self.log.push(FitLogRecord {
            iteration,
            reprojection: eval.components.reprojection,
            offset: eval.components.offset,
            constraint: eval.components.constraint,
            total: eval.total,
            lr,
        });
        if !eval.is_finite() {
            if self.consecutive == 0 {
                self.last_good = Some(self.params.clone());
            }
            self.skipped += 1;
            self.consecutive += 1;
            log::warn!("iteration {iteration}: non-finite loss or gradient, step skipped");
            return false;
        }
        self.consecutive = 0;
        let hp = AdamHyper {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        };
        let n_main = self.n_main;
        let mut blocks = self.params.blocks_mut();
        let (main, ba) = blocks.split_at_mut(n_main);
        let warm = if iteration < cfg.subject_warmup_steps { 0.0 } else { 1.0 };
        let mut lr_scale = vec![1.0; n_main];
        lr_scale[n_main - 2] = warm * cfg.scale_lr_factor;
        lr_scale[n_main - 1] = warm * cfg.offset_lr_factor;
        adamw_step_scaled(main, &eval.grads[..n_main], &mut self.main, &hp, &self.decay, &lr_scale)
            .expect("consistent shapes");
        if ba_active {
            let hp_ba = AdamHyper {
                lr: cfg.ba_lr,
                weight_decay: 0.0,
                ..hp
            };
            adamw_step(ba, &eval.grads[n_main..], &mut self.ba, &hp_ba, &[false, false]).expect("consistent shapes");
            for b in ba.iter_mut() {
                b.row_slice_mut(0).fill(0.0);
            }
        }
        true
    }
}

fn draw_batches(trials: &[TrialObservations], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<FrameBatch>, FitError> {
    trials
        .iter()
        .map(|t| {
            let s = sample_timepoints(t.n_frames(), count, rng).map_err(|_| FitError::EmptyTrial(t.name.clone()))?;
            Ok(FrameBatch::from_samples(&s))
        })
        .collect()
}

/// Jointly fits one trajectory per trial and a shared subject to the observations.
pub fn fit_session(
    model: &SkeletonModel,
    rig: &CameraRig,
    trials: &[TrialObservations],
    config: &FitConfig,
) -> Result<SessionFit, FitError> {
    config.validate()?;
    let problem = SessionProblem::new(model, rig, trials, config.encoding_dim, config.loss_weights())?;
    let params = SessionParams::init(&problem, &config.layer_sizes, config.seed)?;
    let base = base_site_tensor(model);
    let mut opt = SessionOptimizer::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = thread_pool();
    for step in 0..config.iterations() {
        let lr = learning_rate_at(step, config)?;
        let batches = draw_batches(trials, config.batch_timepoints, &mut rng)?;
        let ba_active = config.bundle_adjust && step >= config.ba_start();
        let opts = EvalOptions {
            bundle_adjust: ba_active,
            learn_base: false,
        };
        let eval = pool.install(|| evaluate_session(&problem, &opt.params, &base, &batches, opts));
        opt.apply(&eval, config, step, lr, ba_active);
        if opt.consecutive > MAX_CONSECUTIVE_NON_FINITE {
            let good = opt.last_good.clone().unwrap_or_else(|| opt.params.clone());
            return Err(FitError::Divergence {
                iteration: step,
                consecutive: opt.consecutive,
                snapshot: Box::new(good.to_fit(&problem, opt.log, opt.skipped)),
            });
        }
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.iterations()) {
            log::info!(
                "step {step}/{}: total {:.6e} reprojection {:.6e} lr {lr:.3e}",
                config.steps,
                eval.total,
                eval.components.reprojection
            );
        }
    }
    Ok(opt.params.to_fit(&problem, opt.log, opt.skipped))
}

/// One subject of a meta-fit: its rig and trials.
#[derive(Clone, Debug)]
pub struct SubjectData {
    pub name: String,
    pub rig: CameraRig,
    pub trials: Vec<TrialObservations>,
}

#[derive(Clone, Debug)]
pub struct MetaFit {
    /// The input model with learned base site positions.
    pub model: SkeletonModel,
    pub subjects: Vec<SessionFit>,
}

/// Trilevel fit: base site positions are shared across subjects and learned
/// alongside every subject's session; `frozen_sites` keep their positions.
pub fn meta_fit(
    model: &SkeletonModel,
    subjects: &[SubjectData],
    config: &FitConfig,
    frozen_sites: &[String],
) -> Result<MetaFit, FitError> {
    config.validate()?;
    if subjects.len() < 2 {
        return Err(FitError::TooFewSubjects(subjects.len()));
    }
    let frozen: Vec<usize> = frozen_sites
        .iter()
        .map(|name| {
            model
                .site_index(name)
                .ok_or_else(|| FitError::UnknownSite(name.clone()))
        })
        .collect::<Result<_, _>>()?;
    let problems: Vec<SessionProblem> = subjects
        .iter()
        .map(|s| SessionProblem::new(model, &s.rig, &s.trials, config.encoding_dim, config.loss_weights()))
        .collect::<Result<_, _>>()?;
    let mut opts: Vec<SessionOptimizer> = problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let seed = config.seed.wrapping_add(1000 * i as u64);
            SessionParams::init(p, &config.layer_sizes, seed).map(SessionOptimizer::new)
        })
        .collect::<Result<_, _>>()?;
    let mut base = base_site_tensor(model);
    let mut base_state = AdamState::new([&base]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = thread_pool();
    let per_batch = match config.subjects_per_batch {
        0 => subjects.len(),
        k => k.min(subjects.len()),
    };
    for step in 0..config.iterations() {
        let lr = learning_rate_at(step, config)?;
        let ba_active = config.bundle_adjust && step >= config.ba_start();
        let eval_opts = EvalOptions {
            bundle_adjust: ba_active,
            learn_base: true,
        };
        let mut base_grad = Tensor::zeros(base.rows(), 3);
        let mut any_finite = false;
        for k in 0..per_batch {
            let s = (step * per_batch + k) % subjects.len();
            let batches = draw_batches(&subjects[s].trials, config.batch_timepoints, &mut rng)?;
            let eval = pool.install(|| evaluate_session(&problems[s], &opts[s].params, &base, &batches, eval_opts));
            if opts[s].apply(&eval, config, step, lr, ba_active) {
                base_grad.axpy(1.0, eval.base_grad.as_ref().expect("base gradient requested"));
                any_finite = true;
            }
            if opts[s].consecutive > MAX_CONSECUTIVE_NON_FINITE {
                let good = opts[s].last_good.clone().unwrap_or_else(|| opts[s].params.clone());
                return Err(FitError::Divergence {
                    iteration: step,
                    consecutive: opts[s].consecutive,
                    snapshot: Box::new(good.to_fit(&problems[s], opts[s].log.clone(), opts[s].skipped)),
                });
            }
        }
        if any_finite && step >= config.base_warmup_steps {
            let saved: Vec<Vec<f64>> = frozen.iter().map(|&j| base.row_slice(j).to_vec()).collect();
            for &j in &frozen {
                base_grad.row_slice_mut(j).fill(0.0);
            }
            let hp = AdamHyper {
                lr: lr * config.base_lr_factor,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
                weight_decay: 0.0,
            };
            adamw_step(&mut [&mut base], &[base_grad], &mut base_state, &hp, &[false])?;
            for (&j, row) in frozen.iter().zip(saved) {
                base.row_slice_mut(j).copy_from_slice(&row);
            }
        }
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.iterations()) {
            let totals: Vec<String> = opts
                .iter()
                .map(|o| o.log.last().map_or("-".to_string(), |r| format!("{:.4e}", r.total)))
                .collect();
            log::info!(
                "meta step {step}/{}: subject losses [{}]",
                config.steps,
                totals.join(", ")
            );
        }
    }
    let mut updated = model.clone();
    for (j, site) in updated.sites.iter_mut().enumerate() {
        let r = base.row_slice(j);
        site.local_pos = [r[0], r[1], r[2]];
    }
    let fits = opts
        .into_iter()
        .zip(&problems)
        .map(|(o, p)| o.params.to_fit(p, o.log, o.skipped))
        .collect();
    Ok(MetaFit {
        model: updated,
        subjects: fits,
    })
}
