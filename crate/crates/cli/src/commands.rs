use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use kinefit_core::camera::CameraRig;
use kinefit_core::fitter::{fit_session, meta_fit, FitConfig, FitError, SessionFit, SubjectData};
use kinefit_core::gradcheck::{run_gradcheck, GradcheckConfig};
use kinefit_core::io::{self, fit_log_csv, read_json, read_trial, trial_fits, write_atomic, write_json};
use kinefit_core::metrics::WalkwayEvent;
use kinefit_core::model::{demo_biped, demo_biped_spine, parse_model, SkeletonModel};
use kinefit_core::objective::TrialObservations;
use kinefit_core::synth::{generate_session, SynthConfig};

use crate::manifest::Recorder;
use crate::{FitArgs, FitOptions, GradcheckArgs, InspectArgs, MetafitArgs, SynthArgs};

/// Exit-code taxonomy: 2 for bad inputs, 3 for numerical failure.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Numerical(e) => e,
        }
    }
}

macro_rules! input_failure {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Input(e.into())
            }
        }
    )*};
}

input_failure!(
    anyhow::Error,
    kinefit_core::IoError,
    kinefit_core::camera::CameraError,
    kinefit_core::SynthError,
    kinefit_core::MetricsError
);

pub type CmdResult = Result<(), Failure>;

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

pub const MODEL_FILE: &str = "model.txt";
pub const REFINED_RIG_FILE: &str = "rig.refined.json";

pub fn load_model(spec: &str) -> anyhow::Result<SkeletonModel> {
    match spec {
        "builtin:biped" => Ok(demo_biped()),
        "builtin:biped_spine" => Ok(demo_biped_spine()),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading model {path}"))?;
            parse_model(&text).with_context(|| format!("parsing model {path}"))
        }
    }
}

fn record_model(rec: &mut Recorder, spec: &str) -> anyhow::Result<()> {
    if !spec.starts_with("builtin:") {
        rec.input(Path::new(spec))?;
    }
    Ok(())
}

/// Merges a partial JSON object over `base`; unknown keys are rejected by the target type.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, path: &Path) -> anyhow::Result<T> {
    let mut value = serde_json::to_value(base)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let patch: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{}: malformed JSON", path.display()))?;
    let (Some(dst), serde_json::Value::Object(src)) = (value.as_object_mut(), patch) else {
        bail!("{}: expected a JSON object", path.display());
    };
    dst.extend(src);
    serde_json::from_value(value).with_context(|| format!("{}: invalid settings", path.display()))
}

pub fn fit_config(opts: &FitOptions, rec: &mut Recorder) -> anyhow::Result<FitConfig> {
    let base = match opts.preset {
        Preset::Desk => FitConfig::desk(),
        Preset::Paper => FitConfig::paper(),
    };
    let mut cfg = match &opts.config {
        Some(p) => {
            rec.input(p)?;
            overlay(&base, p)?
        }
        None => base,
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if opts.max_iterations.is_some() {
        cfg.max_iterations = opts.max_iterations;
    }
    cfg.validate().map_err(|e| anyhow!("invalid fit settings: {e}"))?;
    rec.config(&cfg)?;
    rec.seed(cfg.seed);
    Ok(cfg)
}

fn load_rig(path: &Path, rec: &mut Recorder) -> anyhow::Result<CameraRig> {
    rec.input(path)?;
    Ok(CameraRig::load(path)?)
}

fn load_trials(paths: &[PathBuf], rec: &mut Recorder) -> anyhow::Result<Vec<TrialObservations>> {
    paths
        .iter()
        .map(|p| {
            let (meta, kpts) = io::trial_paths(p);
            let obs = read_trial(p)?;
            rec.input(&meta)?;
            rec.input(&kpts)?;
            Ok(obs)
        })
        .collect()
}

pub fn synth(args: SynthArgs) -> CmdResult {
    let mut rec = Recorder::new("synth", &args.out);
    let model = load_model(&args.model)?;
    record_model(&mut rec, &args.model)?;
    let mut cfg = match &args.config {
        Some(p) => {
            rec.input(p)?;
            read_json::<SynthConfig>(p)?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    rec.config(&cfg)?;
    rec.seed(cfg.seed);
    let session = generate_session(&model, &cfg).map_err(anyhow::Error::from)?;
    write_atomic(&rec.output(MODEL_FILE), model.to_text().as_bytes())?;
    write_atomic(
        &rec.output("rig.json"),
        format!("{}\n", session.rig.to_json()).as_bytes(),
    )?;
    for obs in &session.trials {
        let meta = io::write_trial(&args.out, obs)?;
        let (_, kpts) = io::trial_paths(&meta);
        rec.output(meta.file_name().expect("file name"));
        rec.output(kpts.file_name().expect("file name"));
    }
    for tr in &session.truth.trials {
        let events: Vec<WalkwayEvent> = tr
            .heel_strikes
            .iter()
            .map(|e| WalkwayEvent {
                time_s: e.time,
                x_m: e.position[0],
                y_m: e.position[1],
                side: e.side,
            })
            .collect();
        write_json(&rec.output(format!("{}.walkway.json", tr.name)), &events)?;
    }
    write_json(&rec.output("truth.json"), &session.truth)?;
    log::info!(
        "wrote {} trials, {} cameras to {}",
        session.trials.len(),
        session.rig.len(),
        args.out.display()
    );
    rec.finish("ok")?;
    Ok(())
}

#[derive(Serialize)]
struct DeltaReport {
    camera: String,
    rotation_deg: f64,
    translation_mm: f64,
    rotation_axis_angle: [f64; 3],
    translation: [f64; 3],
}

/// Everything a session fit leaves in its output directory.
fn write_session(
    rec: &mut Recorder,
    prefix: &str,
    model: &SkeletonModel,
    rig: &CameraRig,
    trials: &[TrialObservations],
    fit: &SessionFit,
) -> anyhow::Result<()> {
    let name = |f: &str| format!("{prefix}{f}");
    write_atomic(&rec.output(name(MODEL_FILE)), model.to_text().as_bytes())?;
    write_json(&rec.output(name("session.json")), fit)?;
    write_atomic(&rec.output(name("fit_log.csv")), fit_log_csv(&fit.fit_log).as_bytes())?;
    let refined = fit.refined_rig(rig);
    write_atomic(
        &rec.output(name(REFINED_RIG_FILE)),
        format!("{}\n", refined.to_json()).as_bytes(),
    )?;
    let deltas: Vec<DeltaReport> = rig
        .cameras
        .iter()
        .zip(&fit.camera_deltas)
        .map(|(c, d)| {
            let (rotation_deg, translation_mm) = d.magnitude_deg_mm();
            DeltaReport {
                camera: c.name.clone(),
                rotation_deg,
                translation_mm,
                rotation_axis_angle: d.rotation,
                translation: d.translation,
            }
        })
        .collect();
    write_json(&rec.output(name("camera_deltas.json")), &deltas)?;
    for tf in trial_fits(model, fit, trials, rig)? {
        write_json(&rec.output(name(&format!("{}.fit.json", tf.trial))), &tf)?;
        log::info!(
            "{}: mean residual {:.3} px, GC5 {}",
            tf.trial,
            tf.metrics.mean_residual_px,
            tf.metrics.gc5.map_or("n/a".into(), |g| format!("{g:.4}"))
        );
    }
    Ok(())
}

fn divergence(
    rec: Recorder,
    err: FitError,
    write: impl FnOnce(&mut Recorder, &SessionFit) -> anyhow::Result<()>,
) -> Failure {
    let mut rec = rec;
    if let FitError::Divergence { snapshot, .. } = &err {
        if let Err(e) = write(&mut rec, snapshot).and_then(|_| rec.finish("diverged")) {
            return Failure::Numerical(anyhow!("{err}; writing the snapshot also failed: {e:#}"));
        }
        return Failure::Numerical(anyhow!(err));
    }
    Failure::Input(anyhow!(err))
}

pub fn fit(args: FitArgs) -> CmdResult {
    let mut rec = Recorder::new("fit", &args.out);
    let model = load_model(&args.model)?;
    record_model(&mut rec, &args.model)?;
    let rig = load_rig(&args.rig, &mut rec)?;
    let trials = load_trials(&args.trials, &mut rec)?;
    let cfg = fit_config(&args.options, &mut rec)?;
    log::info!(
        "fitting {} trials, {} iterations, layers {:?}",
        trials.len(),
        cfg.iterations(),
        cfg.layer_sizes
    );
    match fit_session(&model, &rig, &trials, &cfg) {
        Ok(fit) => {
            write_session(&mut rec, "", &model, &rig, &trials, &fit)?;
            rec.finish("ok")?;
            Ok(())
        }
        Err(e) => Err(divergence(rec, e, |rec, snap| {
            write_json(&rec.output("session.json"), snap)?;
            write_atomic(&rec.output("fit_log.csv"), fit_log_csv(&snap.fit_log).as_bytes())?;
            Ok(())
        })),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    name: String,
    rig: PathBuf,
    trials: Vec<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectsFile {
    subjects: Vec<SubjectEntry>,
}

#[derive(Serialize)]
struct SiteShift {
    site: String,
    prior: [f64; 3],
    fitted: [f64; 3],
    shift_mm: f64,
}

pub fn metafit(args: MetafitArgs) -> CmdResult {
    let mut rec = Recorder::new("metafit", &args.out);
    let model = load_model(&args.model)?;
    record_model(&mut rec, &args.model)?;
    rec.input(&args.subjects)?;
    let list: SubjectsFile = read_json(&args.subjects)?;
    let root = args.subjects.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut subjects = Vec::new();
    for s in &list.subjects {
        let rig = load_rig(&root.join(&s.rig), &mut rec)?;
        let paths: Vec<PathBuf> = s.trials.iter().map(|t| root.join(t)).collect();
        let trials = load_trials(&paths, &mut rec)?;
        subjects.push(SubjectData {
            name: s.name.clone(),
            rig,
            trials,
        });
    }
    let cfg = fit_config(&args.options, &mut rec)?;
    let result = match meta_fit(&model, &subjects, &cfg, &args.frozen) {
        Ok(r) => r,
        Err(e @ FitError::Divergence { .. }) => {
            rec.finish("diverged")?;
            return Err(Failure::Numerical(anyhow!(e)));
        }
        Err(e) => return Err(Failure::Input(anyhow!(e))),
    };
    write_atomic(&rec.output(MODEL_FILE), result.model.to_text().as_bytes())?;
    let shifts: Vec<SiteShift> = model
        .sites
        .iter()
        .zip(&result.model.sites)
        .map(|(a, b)| {
            let d: f64 = (0..3).map(|k| (b.local_pos[k] - a.local_pos[k]).powi(2)).sum();
            SiteShift {
                site: a.name.clone(),
                prior: a.local_pos,
                fitted: b.local_pos,
                shift_mm: d.sqrt() * 1000.0,
            }
        })
        .collect();
    write_json(&rec.output("base_sites.json"), &shifts)?;
    for (s, fit) in subjects.iter().zip(&result.subjects) {
        write_session(&mut rec, &format!("{}/", s.name), &result.model, &s.rig, &s.trials, fit)?;
    }
    rec.finish("ok")?;
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let mut cfg = match &args.config {
        Some(p) => read_json::<GradcheckConfig>(p)?,
        None => GradcheckConfig::default(),
    };
    if let Some(n) = args.configs {
        cfg.n_configs = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let report = run_gradcheck(&cfg).map_err(|e| Failure::Numerical(anyhow!(e)))?;
    for c in &report.cases {
        log::debug!(
            "case {} ({}): max relative error {:.3e} in {}",
            c.index,
            c.model,
            c.max_rel_error,
            c.worst_group
        );
    }
    println!(
        "gradcheck: {} configurations, max relative error {:.3e} (tolerance {:.1e}): {}",
        report.cases.len(),
        report.max_rel_error,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    if let Some(out) = &args.out {
        let mut rec = Recorder::new("gradcheck", out);
        if let Some(p) = &args.config {
            rec.input(p)?;
        }
        rec.config(&cfg)?;
        rec.seed(cfg.seed);
        write_json(&rec.output("gradcheck.json"), &report)?;
        rec.finish(if report.passed { "ok" } else { "failed" })?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numerical(anyhow!(
            "gradient mismatch {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            report.tolerance
        )))
    }
}

fn summarize_json(path: &Path, value: &serde_json::Value) -> String {
    use serde_json::Value;
    let keys = |v: &Value| match v {
        Value::Object(m) => m.keys().cloned().collect::<Vec<_>>().join(", "),
        _ => String::new(),
    };
    match value {
        Value::Array(a) => format!(
            "{}: array of {} entries; first entry fields: {}",
            path.display(),
            a.len(),
            a.first().map(keys).unwrap_or_default()
        ),
        Value::Object(_) => format!("{}: object with fields {}", path.display(), keys(value)),
        other => format!("{}: {}", path.display(), other),
    }
}

pub fn inspect(args: InspectArgs) -> CmdResult {
    let spec = args.path.as_str();
    let path = Path::new(spec);
    if spec.starts_with("builtin:") || spec.ends_with(".txt") || spec.ends_with(".model") {
        let m = load_model(spec)?;
        println!(
            "model: {} bodies, {} joints, {} pose coordinates, {} sites, {} scale groups, {} constraints",
            m.bodies.len(),
            m.joints.len(),
            m.n_dof,
            m.n_sites(),
            m.scale_map.n_scales(),
            m.constraints.len()
        );
        return Ok(());
    }
    let s = path.to_string_lossy();
    if s.ends_with(".meta.json") || s.ends_with(".kpts.f32") {
        let obs = read_trial(path)?;
        let mean_w = obs.confidences.iter().sum::<f64>() / obs.confidences.len() as f64;
        println!(
            "trial {}: {} frames at {} Hz, {} keypoints, {} cameras, mean confidence {:.3}",
            obs.name,
            obs.n_frames(),
            obs.frame_rate,
            obs.n_joints(),
            obs.n_cameras(),
            mean_w
        );
        return Ok(());
    }
    if s.ends_with(".fit.json") {
        let tf: io::TrialFit = read_json(path)?;
        println!(
            "fit of {}: {} frames, scales {:?}, mean residual {:.3} px, GC5 {:?}",
            tf.trial,
            tf.poses.len(),
            tf.subject.scales,
            tf.metrics.mean_residual_px,
            tf.metrics.gc5
        );
        return Ok(());
    }
    if let Ok(rig) = CameraRig::load(path) {
        println!("rig: {} cameras", rig.len());
        for c in &rig.cameras {
            let p = c.center();
            println!(
                "  {}: {}x{}, f {:.1}, center ({:.3}, {:.3}, {:.3}) m",
                c.name, c.width, c.height, c.fx, p[0], p[1], p[2]
            );
        }
        return Ok(());
    }
    let value: serde_json::Value = read_json(path)?;
    println!("{}", summarize_json(path, &value));
    Ok(())
}
