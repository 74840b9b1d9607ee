//! Reverse-mode versus central-difference comparison of the full session
//! loss on small random scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_gradient, AdError};
use crate::camera::{look_at, CameraRig, Intrinsics};
use crate::fitter::{evaluate_session, EvalOptions, FitError, SessionParams, SessionProblem};
use crate::kinematics::{base_site_tensor, forward_kinematics_batch};
use crate::model::{demo_biped, demo_biped_spine, SkeletonModel};
use crate::objective::{FrameBatch, LossWeights, TrialObservations};
use crate::tensor::Tensor;
use crate::trajectory::{eval_trajectory_batch, EncodingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub n_configs: usize,
    pub seed: u64,
    pub n_frames: usize,
    pub n_cameras: usize,
    pub layer_sizes: Vec<usize>,
    pub encoding_dim: usize,
    /// Central-difference step; the estimate is Richardson-extrapolated from `h` and `2h`.
    pub step: f64,
    /// Denominator floor of the relative error, above the difference round-off.
    pub floor: f64,
    pub tolerance: f64,
    /// Keypoint noise; large enough that both Huber branches are exercised.
    pub noise_px: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_configs: 100,
            seed: 0,
            n_frames: 2,
            n_cameras: 2,
            layer_sizes: vec![4, 4],
            encoding_dim: 3,
            step: 1e-4,
            floor: 1e-4,
            tolerance: 1e-5,
            noise_px: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub index: usize,
    pub model: String,
    pub loss: f64,
    pub n_params: usize,
    pub max_rel_error: f64,
    /// Parameter group holding the worst entry.
    pub worst_group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub cases: Vec<GradcheckCase>,
}

const KINK_MARGIN_PX: f64 = 0.5;

fn ring_rig(n: usize, rng: &mut ChaCha8Rng) -> CameraRig {
    let intr = Intrinsics {
        fx: 1200.0,
        fy: 1200.0,
        cx: 640.0,
        cy: 480.0,
        k1: -0.05,
        k2: 0.01,
    };
    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let cameras = (0..n)
        .map(|c| {
            let a = phase + std::f64::consts::TAU * c as f64 / n as f64;
            let h = 1.0 + rng.random::<f64>();
            look_at(
                &format!("cam{c}"),
                [6.0 * a.cos(), 6.0 * a.sin(), h],
                [0.0, 0.0, 0.3],
                intr,
                1280,
                960,
            )
        })
        .collect();
    CameraRig { cameras }
}

/// Two-camera scene with placeholder keypoints and random confidences.
fn scene(model: &SkeletonModel, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> (CameraRig, TrialObservations) {
    let rig = ring_rig(cfg.n_cameras, rng);
    let names = model.site_names();
    let n = cfg.n_frames * names.len() * rig.len();
    let obs = TrialObservations {
        name: "gradcheck".into(),
        frame_rate: 30.0,
        times: (0..cfg.n_frames).map(|t| t as f64 / 30.0).collect(),
        joint_names: names,
        camera_names: rig.names(),
        keypoints: vec![0.0; 2 * n],
        confidences: (0..n).map(|_| 0.1 + 0.9 * rng.random::<f64>()).collect(),
        population: None,
    };
    (rig, obs)
}

/// Replaces the keypoints with the projections implied by `params` plus noise,
/// so residuals are of the order of the noise.
fn observe(
    model: &SkeletonModel,
    rig: &CameraRig,
    obs: &mut TrialObservations,
    params: &SessionParams,
    encoding_dim: usize,
    noise_px: f64,
    huber_delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), FitError> {
    let enc = EncodingConfig::new(encoding_dim, obs.duration().max(1e-9))?;
    let rel: Vec<f64> = obs.times.iter().map(|t| t - obs.times[0]).collect();
    let poses = eval_trajectory_batch(&params.trajectories[0], &enc, model, &rel)?;
    let markers =
        forward_kinematics_batch(model, &poses, &params.subject()).map_err(|e| FitError::Config(e.to_string()))?;
    let noise = Normal::new(0.0, noise_px).map_err(|e| FitError::Config(e.to_string()))?;
    let deltas = params.deltas();
    let mut k = 0;
    for m in &markers {
        for x in &m.0 {
            for (cam, d) in rig.cameras.iter().zip(&deltas) {
                let p = cam.project(d, x).unwrap_or([0.0, 0.0]);
                // Keep residuals clear of the Huber kink, where the loss is not twice differentiable.
                let (ex, ey) = loop {
                    let (ex, ey) = (noise.sample(rng), noise.sample(rng));
                    if ((ex * ex + ey * ey).sqrt() - huber_delta).abs() > KINK_MARGIN_PX {
                        break (ex, ey);
                    }
                };
                obs.keypoints[k] = p[0] + ex;
                obs.keypoints[k + 1] = p[1] + ey;
                k += 2;
            }
        }
    }
    Ok(())
}

fn perturb(params: &mut SessionParams, rng: &mut ChaCha8Rng) {
    let w = Normal::new(0.0, 0.3).expect("finite std");
    let small = Normal::new(0.0, 0.01).expect("finite std");
    for t in &mut params.trajectories {
        for b in t.blocks_mut() {
            b.data_mut().iter_mut().for_each(|v| *v += w.sample(rng));
        }
    }
    params
        .scales
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.9 + 0.2 * rng.random::<f64>());
    params
        .offsets
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = small.sample(rng));
    for c in 1..params.delta_rot.rows() {
        params
            .delta_rot
            .row_slice_mut(c)
            .iter_mut()
            .for_each(|v| *v = small.sample(rng));
        params
            .delta_trans
            .row_slice_mut(c)
            .iter_mut()
            .for_each(|v| *v = small.sample(rng));
    }
}

fn group_name(block: usize, n_blocks: usize) -> String {
    match n_blocks - block {
        4 => "scales".into(),
        3 => "offsets".into(),
        2 => "delta_rotation".into(),
        1 => "delta_translation".into(),
        _ => format!("trajectory_block{block}"),
    }
}

/// One random configuration: analytic and numeric gradients with respect to
/// every trajectory weight, scale, offset and non-reference camera delta.
pub fn check_case(index: usize, cfg: &GradcheckConfig) -> Result<GradcheckCase, FitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64));
    let (name, model) = if index.is_multiple_of(2) {
        ("biped", demo_biped())
    } else {
        ("biped_spine", demo_biped_spine())
    };
    let (rig, mut obs) = scene(&model, cfg, &mut rng);
    let weights = LossWeights {
        lambda_beta: 0.1 + rng.random::<f64>(),
        ..LossWeights::default()
    };
    let mut params = {
        let trials = [obs.clone()];
        let problem = SessionProblem::new(&model, &rig, &trials, cfg.encoding_dim, weights)?;
        SessionParams::init(&problem, &cfg.layer_sizes, rng.random())?
    };
    perturb(&mut params, &mut rng);
    observe(
        &model,
        &rig,
        &mut obs,
        &params,
        cfg.encoding_dim,
        cfg.noise_px,
        weights.huber_delta,
        &mut rng,
    )?;
    let trials = [obs];
    let problem = SessionProblem::new(&model, &rig, &trials, cfg.encoding_dim, weights)?;
    let base = base_site_tensor(&model);
    let batch = [FrameBatch::from_samples(&(0..cfg.n_frames).collect::<Vec<_>>())];
    let opts = EvalOptions {
        bundle_adjust: true,
        learn_base: false,
    };
    let eval = evaluate_session(&problem, &params, &base, &batch, opts);
    let point: Vec<Tensor> = params.blocks().into_iter().cloned().collect();
    let mut probe = params.clone();
    let mut loss_at = |blocks: &[Tensor]| {
        for (dst, src) in probe.blocks_mut().into_iter().zip(blocks) {
            dst.data_mut().copy_from_slice(src.data());
        }
        evaluate_session(&problem, &probe, &base, &batch, opts).total
    };
    let fd = |h: f64, f: &mut dyn FnMut(&[Tensor]) -> f64| {
        finite_difference_gradient(f, &point, h).map_err(|e: AdError| FitError::Config(e.to_string()))
    };
    // Richardson extrapolation of two central differences cancels the h^2 term.
    let fine = fd(cfg.step, &mut loss_at)?;
    let coarse = fd(2.0 * cfg.step, &mut loss_at)?;
    let numeric: Vec<Tensor> = fine
        .iter()
        .zip(&coarse)
        .map(|(f, c)| {
            let mut out = f.clone();
            for (o, &c) in out.data_mut().iter_mut().zip(c.data()) {
                *o = (4.0 * *o - c) / 3.0;
            }
            out
        })
        .collect();
    let n_blocks = point.len();
    let mut worst = (0.0, 0);
    for (b, (a, n)) in eval.grads.iter().zip(&numeric).enumerate() {
        // The reference camera's delta is frozen and receives no gradient.
        let skip = if b + 2 >= n_blocks { 3 } else { 0 };
        for (&x, &y) in a.data().iter().zip(n.data()).skip(skip) {
            let e = (x - y).abs() / x.abs().max(y.abs()).max(cfg.floor);
            if e > worst.0 {
                worst = (e, b);
            }
        }
    }
    Ok(GradcheckCase {
        index,
        model: name.into(),
        loss: eval.total,
        n_params: point.iter().map(Tensor::len).sum(),
        max_rel_error: worst.0,
        worst_group: group_name(worst.1, n_blocks),
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, FitError> {
    if cfg.n_frames == 0 || cfg.n_cameras < 2 {
        return Err(FitError::Config(
            "gradcheck needs at least one frame and two cameras".into(),
        ));
    }
    let cases = (0..cfg.n_configs)
        .map(|i| check_case(i, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        max_rel_error,
        passed: max_rel_error < cfg.tolerance,
        cases,
    })
}
