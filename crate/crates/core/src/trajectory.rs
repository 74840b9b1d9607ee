//! Implicit pose trajectories: time is encoded with sinusoids and fed through
//! an MLP whose outputs are squashed into the joint ranges.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::kinematics::{Pose, Squash};
use crate::model::SkeletonModel;
use crate::tensor::Tensor;

/// Hidden widths used by desk-scale fits.
pub const DESK_LAYERS: [usize; 4] = [64, 128, 256, 256];
/// Hidden widths of the full-scale configuration.
pub const PAPER_LAYERS: [usize; 7] = [128, 256, 512, 1024, 2048, 2048, 4096];
pub const DEFAULT_ENCODING_DIM: usize = 29;
/// Multiplier on the initial output-layer weights and biases.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("time {t} s is outside [0, {t_max}] s")]
    TimeOutOfRange { t: f64, t_max: f64 },
    #[error("invalid encoding: {0}")]
    InvalidEncoding(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub dim: usize,
    /// Trial duration in seconds; `t_max` maps to an encoded argument of π.
    pub t_max: f64,
}

impl EncodingConfig {
    pub fn new(dim: usize, t_max: f64) -> Result<Self, TrajectoryError> {
        let cfg = Self { dim, t_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.dim == 0 {
            return Err(TrajectoryError::InvalidEncoding("dim must be at least 1".into()));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(TrajectoryError::InvalidEncoding(format!(
                "t_max must be positive, got {}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// `[s, sin(s), cos(s), sin(2s), cos(2s), ...]` truncated to `cfg.dim`, with `s = π t / t_max`.
pub fn encode_time(t: f64, cfg: &EncodingConfig) -> Result<Vec<f64>, TrajectoryError> {
    cfg.validate()?;
    if !(0.0..=cfg.t_max).contains(&t) {
        return Err(TrajectoryError::TimeOutOfRange { t, t_max: cfg.t_max });
    }
    let s = std::f64::consts::PI * t / cfg.t_max;
    let mut out = Vec::with_capacity(cfg.dim);
    out.push(s);
    let mut freq = 1.0;
    while out.len() < cfg.dim {
        let (sin, cos) = (freq * s).sin_cos();
        out.push(sin);
        if out.len() < cfg.dim {
            out.push(cos);
        }
        freq *= 2.0;
    }
    Ok(out)
}

/// Encodes a batch of times as a `len x dim` tensor.
pub fn encode_times(times: &[f64], cfg: &EncodingConfig) -> Result<Tensor, TrajectoryError> {
    let mut data = Vec::with_capacity(times.len() * cfg.dim);
    for &t in times {
        data.extend(encode_time(t, cfg)?);
    }
    Ok(Tensor::from_vec(times.len(), cfg.dim, data))
}

/// MLP parameters `φ`: weights are `in x out`, biases `1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitTrajectory {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ImplicitTrajectory {
    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.cols())
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameter blocks in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn blocks(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn from_blocks(layer_sizes: Vec<usize>, blocks: Vec<Tensor>) -> Result<Self, TrajectoryError> {
        if blocks.len() != 2 * (layer_sizes.len() + 1) {
            return Err(TrajectoryError::Shape(format!(
                "{} parameter blocks for {} hidden layers",
                blocks.len(),
                layer_sizes.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in blocks.chunks(2) {
            weights.push(pair[0].clone());
            biases.push(pair[1].clone());
        }
        let traj = Self {
            layer_sizes,
            weights,
            biases,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.weights.len() != self.layer_sizes.len() + 1 || self.biases.len() != self.weights.len() {
            return Err(TrajectoryError::Shape("layer count mismatch".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if l > 0 && w.rows() != self.weights[l - 1].cols() {
                return Err(TrajectoryError::Shape(format!("layer {l} does not chain")));
            }
            if l < self.layer_sizes.len() && w.cols() != self.layer_sizes[l] {
                return Err(TrajectoryError::Shape(format!("layer {l} width mismatch")));
            }
            if b.shape() != (1, w.cols()) {
                return Err(TrajectoryError::Shape(format!("bias {l} shape mismatch")));
            }
        }
        Ok(())
    }

    /// Raw (unsquashed) outputs for encoded features, `n x in` to `n x out`.
    pub fn raw_forward(&self, features: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let blocks: Vec<Var> = self.blocks().into_iter().map(|b| tape.constant(b.clone())).collect();
        let out = mlp_on_tape(&mut tape, &blocks, x);
        tape.value(out).clone()
    }
}

/// Seeded initialization: every weight and bias is drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; the output layer is then multiplied
/// by [`OUTPUT_INIT_SCALE`].
pub fn init_trajectory(
    seed: u64,
    cfg: &EncodingConfig,
    layer_sizes: &[usize],
    n_dof: usize,
) -> Result<ImplicitTrajectory, TrajectoryError> {
    cfg.validate()?;
    if n_dof == 0 || layer_sizes.contains(&0) {
        return Err(TrajectoryError::Shape("layer widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![cfg.dim];
    dims.extend_from_slice(layer_sizes);
    dims.push(n_dof);
    let n_layers = dims.len() - 1;
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let scale = if l + 1 == n_layers { OUTPUT_INIT_SCALE } else { 1.0 };
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| scale * rng.random_range(-bound..bound)).collect() };
        weights.push(Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out)));
        biases.push(Tensor::from_vec(1, fan_out, draw(fan_out)));
    }
    Ok(ImplicitTrajectory {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
    })
}

/// Records the MLP on a tape. `blocks` are `w0, b0, w1, b1, ...`; GELU between layers.
pub fn mlp_on_tape(tape: &mut Tape, blocks: &[Var], features: Var) -> Var {
    let n_layers = blocks.len() / 2;
    let mut h = features;
    for l in 0..n_layers {
        let z = tape.matmul(h, blocks[2 * l]);
        h = tape.add(z, blocks[2 * l + 1]);
        if l + 1 < n_layers {
            h = tape.gelu(h);
        }
    }
    h
}

/// Squashed poses (`n x n_dof`) for encoded features on a tape.
pub fn poses_on_tape(tape: &mut Tape, blocks: &[Var], features: Var, squash: &Arc<Squash>) -> Var {
    let raw = mlp_on_tape(tape, blocks, features);
    tape.map_rows(raw, squash.clone())
}

/// Pose at time `t`.
pub fn eval_trajectory(
    traj: &ImplicitTrajectory,
    cfg: &EncodingConfig,
    model: &SkeletonModel,
    t: f64,
) -> Result<Pose, TrajectoryError> {
    Ok(eval_trajectory_batch(traj, cfg, model, &[t])?.remove(0))
}

/// Poses at each of `times`.
pub fn eval_trajectory_batch(
    traj: &ImplicitTrajectory,
    cfg: &EncodingConfig,
    model: &SkeletonModel,
    times: &[f64],
) -> Result<Vec<Pose>, TrajectoryError> {
    traj.validate()?;
    if traj.input_dim() != cfg.dim {
        return Err(TrajectoryError::Shape(format!(
            "network input width {} does not match encoding dim {}",
            traj.input_dim(),
            cfg.dim
        )));
    }
    if traj.output_dim() != model.n_dof {
        return Err(TrajectoryError::Shape(format!(
            "network output width {} does not match model dof {}",
            traj.output_dim(),
            model.n_dof
        )));
    }
    let features = encode_times(times, cfg)?;
    let raw = traj.raw_forward(&features);
    let squash = Squash::for_model(model);
    Ok((0..times.len()).map(|r| Pose(squash.apply(raw.row_slice(r)))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{demo_biped, parse_model};
    use std::f64::consts::PI;

    #[test]
    fn encoding_examples() {
        let cfg = EncodingConfig::new(7, 2.0).unwrap();
        assert_eq!(encode_time(0.0, &cfg).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let end = encode_time(2.0, &EncodingConfig::new(3, 2.0).unwrap()).unwrap();
        assert_eq!(end[0], PI);
        assert!(end[1].abs() < 1e-15 && (end[2] + 1.0).abs() < 1e-15);
        let mid = encode_time(1.0, &EncodingConfig::new(5, 2.0).unwrap()).unwrap();
        let expect = [PI / 2.0, 1.0, 0.0, 0.0, -1.0];
        for (a, b) in mid.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            encode_time(0.3, &EncodingConfig::new(29, 1.0).unwrap()).unwrap().len(),
            29
        );
        assert!(matches!(
            encode_time(2.5, &cfg),
            Err(TrajectoryError::TimeOutOfRange { .. })
        ));
        assert!(encode_time(-1e-9, &cfg).is_err());
        assert!(EncodingConfig::new(0, 1.0).is_err());
        assert!(EncodingConfig::new(3, 0.0).is_err());
    }

    #[test]
    fn zero_network_gives_range_midpoints() {
        let m = demo_biped();
        let cfg = EncodingConfig::new(29, 3.0).unwrap();
        let mut traj = init_trajectory(1, &cfg, &[8], m.n_dof).unwrap();
        for b in traj.blocks_mut() {
            b.data_mut().fill(0.0);
        }
        let pose = eval_trajectory(&traj, &cfg, &m, 1.0).unwrap();
        for (v, lim) in pose.0.iter().zip(m.dof_limits()) {
            match lim {
                Some((lo, hi)) => assert!((v - 0.5 * (lo + hi)).abs() < 1e-15),
                None => assert_eq!(*v, 0.0),
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let cfg = EncodingConfig::new(29, 3.0).unwrap();
        let a = init_trajectory(5, &cfg, &DESK_LAYERS, 40).unwrap();
        let b = init_trajectory(5, &cfg, &DESK_LAYERS, 40).unwrap();
        let c = init_trajectory(6, &cfg, &DESK_LAYERS, 40).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.output_dim(), 40);
        assert_eq!(a.input_dim(), 29);
    }

    #[test]
    fn initial_poses_sit_near_midpoints() {
        let m = demo_biped();
        let cfg = EncodingConfig::new(29, 4.0).unwrap();
        let times: Vec<f64> = (0..=20).map(|i| 0.2 * i as f64).collect();
        let limits = m.dof_limits();
        for seed in 0..100 {
            let traj = init_trajectory(seed, &cfg, &[32, 32], m.n_dof).unwrap();
            for pose in eval_trajectory_batch(&traj, &cfg, &m, &times).unwrap() {
                for (v, lim) in pose.0.iter().zip(&limits) {
                    if let Some((lo, hi)) = lim {
                        assert!((v - 0.5 * (lo + hi)).abs() <= 0.05 * (hi - lo));
                    }
                }
            }
        }
    }

    #[test]
    fn exploding_weights_stay_within_limits() {
        let m = parse_model(
            "body a parent=none offset=0,0,0\njoint a kind=hinge axis=0,0,1 range=-0.3,0.2\nsite s body=a pos=1,0,0\nscale overall\n",
        )
        .unwrap();
        let cfg = EncodingConfig::new(9, 1.0).unwrap();
        let mut traj = init_trajectory(3, &cfg, &[16], 1).unwrap();
        for b in traj.blocks_mut() {
            for v in b.data_mut() {
                *v *= 1e6;
            }
        }
        for i in 0..=50 {
            let p = eval_trajectory(&traj, &cfg, &m, i as f64 / 50.0).unwrap();
            assert!(p.0[0] > -0.3 && p.0[0] < 0.2);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_shape_checked() {
        let m = demo_biped();
        let cfg = EncodingConfig::new(29, 3.0).unwrap();
        let traj = init_trajectory(9, &cfg, &[16, 16], m.n_dof).unwrap();
        let a = eval_trajectory(&traj, &cfg, &m, 1.3).unwrap();
        let b = eval_trajectory(&traj, &cfg, &m, 1.3).unwrap();
        assert_eq!(a, b);
        let wrong = init_trajectory(9, &cfg, &[16], 7).unwrap();
        assert!(matches!(
            eval_trajectory(&wrong, &cfg, &m, 1.0),
            Err(TrajectoryError::Shape(_))
        ));
    }
}
