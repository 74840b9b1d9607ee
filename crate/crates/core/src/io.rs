//! On-disk formats: trial observation pairs (`.meta.json` + `.kpts.f32`),
//! per-trial fit results, fit-log CSV and generic JSON documents.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraRig, ExtrinsicDelta};
use crate::fitter::{FitLogRecord, SessionFit};
use crate::metrics::{fitted_markers, gc_fraction, reprojection_distances, MetricsError};
use crate::model::{SkeletonModel, SubjectParams};
use crate::objective::TrialObservations;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{path}: expected {expected} bytes (T*J*C*3*4 from the metadata), found {actual}")]
    Size { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sidecar metadata of a keypoint tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialMeta {
    pub name: String,
    pub n_frames: usize,
    pub frame_rate: f64,
    /// Time of frame 0, seconds.
    #[serde(default)]
    pub start_time: f64,
    pub joint_names: Vec<String>,
    pub camera_names: Vec<String>,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<String>,
}

pub const KEYPOINT_UNITS: &str = "px";

impl TrialMeta {
    pub fn expected_bytes(&self) -> u64 {
        (self.n_frames * self.joint_names.len() * self.camera_names.len() * 3 * 4) as u64
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// `(meta, kpts)` paths for a trial given its stem or either file of the pair.
pub fn trial_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".meta.json")
        .or_else(|| s.strip_suffix(".kpts.f32"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.meta.json")),
        PathBuf::from(format!("{stem}.kpts.f32")),
    )
}

/// Writes `<dir>/<name>.meta.json` and `<dir>/<name>.kpts.f32`; returns the meta path.
pub fn write_trial(dir: &Path, obs: &TrialObservations) -> Result<PathBuf, IoError> {
    let meta = TrialMeta {
        name: obs.name.clone(),
        n_frames: obs.n_frames(),
        frame_rate: obs.frame_rate,
        start_time: obs.times.first().copied().unwrap_or(0.0),
        joint_names: obs.joint_names.clone(),
        camera_names: obs.camera_names.clone(),
        units: KEYPOINT_UNITS.to_string(),
        population: obs.population.clone(),
    };
    let (meta_path, kpts_path) = trial_paths(&dir.join(&obs.name));
    let mut bytes = Vec::with_capacity(meta.expected_bytes() as usize);
    for (xy, w) in obs.keypoints.chunks_exact(2).zip(&obs.confidences) {
        for v in [xy[0], xy[1], *w] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(&kpts_path, &bytes)?;
    write_json(&meta_path, &meta)?;
    Ok(meta_path)
}

/// Frame times reconstructed from the metadata.
pub fn frame_times(meta: &TrialMeta) -> Vec<f64> {
    (0..meta.n_frames)
        .map(|t| meta.start_time + t as f64 / meta.frame_rate)
        .collect()
}

pub fn read_trial(path: &Path) -> Result<TrialObservations, IoError> {
    let (meta_path, kpts_path) = trial_paths(path);
    let meta: TrialMeta = read_json(&meta_path)?;
    let invalid = |message: String| IoError::Invalid {
        path: meta_path.clone(),
        message,
    };
    if meta.units != KEYPOINT_UNITS {
        return Err(invalid(format!(
            "unsupported units `{}`, expected `{KEYPOINT_UNITS}`",
            meta.units
        )));
    }
    if !(meta.frame_rate > 0.0) || !meta.start_time.is_finite() {
        return Err(invalid("frame_rate must be positive and start_time finite".into()));
    }
    let bytes = fs::read(&kpts_path).map_err(io_err(&kpts_path))?;
    let expected = meta.expected_bytes();
    if bytes.len() as u64 != expected {
        return Err(IoError::Size {
            path: kpts_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let n = bytes.len() / 12;
    let mut keypoints = Vec::with_capacity(2 * n);
    let mut confidences = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(12) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        keypoints.push(f(0));
        keypoints.push(f(1));
        confidences.push(f(2));
    }
    let obs = TrialObservations {
        name: meta.name.clone(),
        frame_rate: meta.frame_rate,
        times: frame_times(&meta),
        joint_names: meta.joint_names,
        camera_names: meta.camera_names,
        keypoints,
        confidences,
        population: meta.population,
    };
    obs.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(obs)
}

/// Summary numbers stored with each trial result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Last logged session loss terms.
    pub final_log: Option<FitLogRecord>,
    /// Mean pixel distance over keypoints above the confidence floor.
    pub mean_residual_px: f64,
    pub gc5: Option<f64>,
}

/// Confidence floor used for the stored residual and GC numbers.
pub const RESULT_CONFIDENCE_FLOOR: f64 = 0.5;

/// Per-trial results of a session fit, evaluated at each trial's frames
/// against the refined rig.
pub fn trial_fits(
    model: &SkeletonModel,
    fit: &SessionFit,
    trials: &[TrialObservations],
    rig: &CameraRig,
) -> Result<Vec<TrialFit>, MetricsError> {
    let refined = fit.refined_rig(rig);
    let markers = fitted_markers(model, fit, trials)?;
    let dof_names: Vec<String> = (0..model.n_dof).map(|d| model.dof_label(d)).collect();
    trials
        .iter()
        .zip(&markers)
        .map(|(obs, m)| {
            let n = fit
                .trial_names
                .iter()
                .position(|t| *t == obs.name)
                .expect("matched by fitted_markers");
            let poses = fit.poses(model, n, &obs.times)?;
            let (d, w) = reprojection_distances(model, m, obs, &refined)?;
            let kept: Vec<f64> = d
                .iter()
                .zip(&w)
                .filter(|(_, &w)| w > RESULT_CONFIDENCE_FLOOR)
                .map(|(&d, _)| d)
                .collect();
            let mean = if kept.is_empty() {
                f64::NAN
            } else {
                kept.iter().sum::<f64>() / kept.len() as f64
            };
            Ok(TrialFit {
                trial: obs.name.clone(),
                frame_rate: obs.frame_rate,
                times: obs.times.clone(),
                dof_names: dof_names.clone(),
                poses: poses.into_iter().map(|p| p.0).collect(),
                subject: fit.subject.clone(),
                camera_names: rig.names(),
                camera_deltas: fit.camera_deltas.clone(),
                metrics: FinalMetrics {
                    final_log: fit.fit_log.last().copied(),
                    mean_residual_px: mean,
                    gc5: gc_fraction(&d, &w, 5.0, RESULT_CONFIDENCE_FLOOR),
                },
                population: obs.population.clone(),
            })
        })
        .collect()
}

/// Contents of `<trial>.fit.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFit {
    pub trial: String,
    pub frame_rate: f64,
    pub times: Vec<f64>,
    pub dof_names: Vec<String>,
    /// Squashed pose per frame.
    pub poses: Vec<Vec<f64>>,
    pub subject: SubjectParams,
    pub camera_names: Vec<String>,
    pub camera_deltas: Vec<ExtrinsicDelta>,
    pub metrics: FinalMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<String>,
}

pub fn fit_log_csv(log: &[FitLogRecord]) -> String {
    let mut out = String::from("iteration,reprojection,offset,constraint,total,lr\n");
    for r in log {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.iteration, r.reprojection, r.offset, r.constraint, r.total, r.lr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_trial() -> TrialObservations {
        let (t, j, c) = (3, 2, 2);
        let n = t * j * c;
        TrialObservations {
            name: "walk".into(),
            frame_rate: 30.0,
            times: (0..t).map(|k| 0.5 + k as f64 / 30.0).collect(),
            joint_names: vec!["a".into(), "b".into()],
            camera_names: vec!["c0".into(), "c1".into()],
            keypoints: (0..2 * n).map(|k| k as f64 * 0.25).collect(),
            confidences: (0..n).map(|k| k as f64 / 16.0).collect(),
            population: Some("control".into()),
        }
    }

    #[test]
    fn trial_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let obs = small_trial();
        let meta = write_trial(dir.path(), &obs).unwrap();
        let back = read_trial(&meta).unwrap();
        assert_eq!(back.keypoints, obs.keypoints);
        assert_eq!(back.confidences, obs.confidences);
        assert_eq!(back.joint_names, obs.joint_names);
        assert_eq!(back.population, obs.population);
        for (a, b) in back.times.iter().zip(&obs.times) {
            assert!((a - b).abs() < 1e-12);
        }
        let stem = read_trial(&dir.path().join("walk")).unwrap();
        assert_eq!(stem, back);
    }

    #[test]
    fn truncated_keypoints_name_file_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let obs = small_trial();
        write_trial(dir.path(), &obs).unwrap();
        let kpts = dir.path().join("walk.kpts.f32");
        let bytes = fs::read(&kpts).unwrap();
        fs::write(&kpts, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_trial(&dir.path().join("walk.meta.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("walk.kpts.f32"), "{msg}");
        assert!(msg.contains(&(3 * 2 * 2 * 3 * 4).to_string()), "{msg}");
    }

    #[test]
    fn rejects_unknown_units() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write_trial(dir.path(), &small_trial()).unwrap();
        let text = fs::read_to_string(&meta).unwrap().replace("\"px\"", "\"mm\"");
        fs::write(&meta, text).unwrap();
        assert!(matches!(read_trial(&meta), Err(IoError::Invalid { .. })));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.json");
        write_json(&p, &vec![1, 2, 3]).unwrap();
        assert_eq!(read_json::<Vec<i32>>(&p).unwrap(), vec![1, 2, 3]);
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
