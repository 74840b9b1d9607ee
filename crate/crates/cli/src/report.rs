//! `kinefit metrics`: GC curves, step tables and σ_IQR of step errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;

use kinefit_core::camera::CameraRig;
use kinefit_core::io::{read_json, read_trial, write_atomic, write_json, TrialFit};
use kinefit_core::metrics::{
    align_trial_sets, consistency_report, heel_events, heel_trajectories, markers_for, reprojection_distances,
    sigma_iqr, step_errors, step_parameters, step_parameters_along, Alignment, ConsistencyReport, HeelEvent,
    HeelStrikeParams, StepErrors, StepTable, WalkwayEvent,
};

use crate::commands::{load_model, CmdResult, MODEL_FILE, REFINED_RIG_FILE};
use crate::manifest::Recorder;
use crate::MetricsArgs;

pub const GC_THRESHOLDS_PX: std::ops::RangeInclusive<u32> = 1..=20;
pub const GC_CONFIDENCE_FLOOR: f64 = 0.5;
const UNTAGGED: &str = "all";

#[derive(Serialize)]
struct TrialReport {
    trial: String,
    population: String,
    steps: StepTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_steps: Option<StepTable>,
    /// Distances from the fitted events mapped into the walkway frame.
    #[serde(skip_serializing_if = "Option::is_none")]
    step_errors: Option<StepErrors>,
}

#[derive(Serialize)]
struct SpreadRow {
    population: String,
    parameter: String,
    n: usize,
    sigma_iqr_m: Option<f64>,
}

#[derive(Serialize)]
struct MetricsReport {
    gc: ConsistencyReport,
    /// Fitted events to walkway events, shared by all trials.
    alignment: Option<Alignment>,
    sigma_iqr: Vec<SpreadRow>,
    trials: Vec<TrialReport>,
}

fn fit_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".fit.json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(anyhow!("no .fit.json files in {}", dir.display()));
    }
    Ok(files)
}

fn as_heel_events(events: &[WalkwayEvent]) -> Vec<HeelEvent> {
    let mut out: Vec<HeelEvent> = events
        .iter()
        .map(|e| HeelEvent {
            side: e.side,
            time: e.time_s,
            position: [e.x_m, e.y_m, 0.0],
        })
        .collect();
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    out
}

fn load_reference(args: &MetricsArgs, trial: &str, rec: &mut Recorder) -> anyhow::Result<Option<Vec<WalkwayEvent>>> {
    let path = match &args.reference {
        Some(p) => p.clone(),
        None => {
            let p = args.obs.join(format!("{trial}.walkway.json"));
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    rec.input(&path)?;
    Ok(Some(read_json(&path)?))
}

fn csv(report: &MetricsReport) -> String {
    let mut out = String::from("section,population,trial,key,value\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    for (i, d) in report.gc.thresholds.iter().enumerate() {
        out.push_str(&format!("gc_pooled,,,{d},{}\n", opt(report.gc.pooled[i])));
        out.push_str(&format!("gc_trial_mean,,,{d},{}\n", opt(report.gc.per_trial_mean[i])));
        for t in &report.gc.per_trial {
            out.push_str(&format!("gc_trial,,{},{d},{}\n", t.name, opt(t.fractions[i])));
        }
    }
    for s in &report.sigma_iqr {
        out.push_str(&format!(
            "sigma_iqr,{},,{},{}\n",
            s.population,
            s.parameter,
            opt(s.sigma_iqr_m)
        ));
    }
    for t in &report.trials {
        for r in &t.steps.rows {
            let side = format!("{:?}", r.side).to_lowercase();
            out.push_str(&format!(
                "step_length,{},{},{}@{},{}\n",
                t.population,
                t.trial,
                side,
                r.event_time,
                opt(r.step_length)
            ));
            out.push_str(&format!(
                "stride_length,{},{},{}@{},{}\n",
                t.population,
                t.trial,
                side,
                r.event_time,
                opt(r.stride_length)
            ));
            out.push_str(&format!(
                "step_width,{},{},{}@{},{}\n",
                t.population,
                t.trial,
                side,
                r.event_time,
                opt(r.step_width)
            ));
        }
    }
    out
}

pub fn metrics(args: MetricsArgs) -> CmdResult {
    let out = args.out.clone().unwrap_or_else(|| args.fits.clone());
    // Kept apart from the fit manifest when both share a directory.
    let mut rec = Recorder::new("metrics", &out).file_name("metrics.manifest.json");
    let model_path = args.fits.join(MODEL_FILE);
    rec.input(&model_path)?;
    let model = load_model(&model_path.to_string_lossy())?;
    let rig_path = args.fits.join(REFINED_RIG_FILE);
    rec.input(&rig_path)?;
    let rig = CameraRig::load(&rig_path)?;
    let site = |name: &str| {
        model
            .site_index(name)
            .ok_or_else(|| anyhow!("model has no site named {name}"))
    };
    let (r_heel, l_heel) = (site("r_heel")?, site("l_heel")?);
    let params = HeelStrikeParams::default();

    let mut samples = Vec::new();
    let mut trials = Vec::new();
    let mut fitted_events = Vec::new();
    let mut references = Vec::new();
    for path in fit_files(&args.fits)? {
        rec.input(&path)?;
        let tf: TrialFit = read_json(&path)?;
        let obs_path = args.obs.join(format!("{}.meta.json", tf.trial));
        let obs = read_trial(&obs_path)?;
        rec.input(&obs_path)?;
        let markers = markers_for(&model, &tf.poses, &tf.subject)?;
        let (d, w) = reprojection_distances(&model, &markers, &obs, &rig)?;
        samples.push((tf.trial.clone(), d, w));

        let (right, left) = heel_trajectories(&markers, r_heel, l_heel);
        let events = heel_events(&right, &left, &tf.times, tf.frame_rate, &params);
        if let Some(reference) = load_reference(&args, &tf.trial, &mut rec)? {
            references.push((trials.len(), as_heel_events(&reference)));
        }
        trials.push(TrialReport {
            trial: tf.trial.clone(),
            population: tf.population.clone().unwrap_or_else(|| UNTAGGED.into()),
            steps: step_parameters(&events),
            reference_steps: None,
            step_errors: None,
        });
        fitted_events.push(events);
    }

    // One affine map and time offset for all trials with reference events.
    let mut alignment = None;
    let mut errors: BTreeMap<String, StepErrors> = BTreeMap::new();
    if !references.is_empty() {
        let walkway = |ev: &[HeelEvent]| ev.iter().map(WalkwayEvent::from).collect::<Vec<_>>();
        let a: Vec<Vec<WalkwayEvent>> = references.iter().map(|(k, _)| walkway(&fitted_events[*k])).collect();
        let b: Vec<Vec<WalkwayEvent>> = references.iter().map(|(_, r)| walkway(r)).collect();
        match align_trial_sets(&a, &b) {
            Ok((al, pairs)) => {
                for (((k, reference), fitted), pairs) in references.iter().zip(&a).zip(&pairs) {
                    let ref_steps = step_parameters(reference);
                    let mapped: Vec<WalkwayEvent> = fitted.iter().map(|e| al.apply(e)).collect();
                    let axis = (reference.len() >= 2).then_some(ref_steps.forward_axis);
                    let steps = step_parameters_along(&as_heel_events(&mapped), axis);
                    let e = step_errors(&steps, &ref_steps, pairs);
                    let t = &mut trials[*k];
                    errors.entry(t.population.clone()).or_default().extend(e.clone());
                    t.reference_steps = Some(ref_steps);
                    t.step_errors = Some(e);
                }
                alignment = Some(al);
            }
            Err(e) => log::warn!("no alignment to the walkway events: {e}"),
        }
    }

    let thresholds: Vec<f64> = GC_THRESHOLDS_PX.map(f64::from).collect();
    let gc = consistency_report(&samples, &thresholds, GC_CONFIDENCE_FLOOR);
    // The untagged group pools every trial when more than one population is present.
    if errors.keys().any(|k| k != UNTAGGED) {
        let all: StepErrors =
            trials
                .iter()
                .filter_map(|t| t.step_errors.clone())
                .fold(StepErrors::default(), |mut a, e| {
                    a.extend(e);
                    a
                });
        errors.insert(UNTAGGED.into(), all);
    }
    let mut sigma = Vec::new();
    for (pop, e) in &errors {
        for (name, v) in [
            ("step_length", &e.step_length),
            ("stride_length", &e.stride_length),
            ("step_width", &e.step_width),
        ] {
            sigma.push(SpreadRow {
                population: pop.clone(),
                parameter: name.into(),
                n: v.len(),
                sigma_iqr_m: sigma_iqr(v).ok(),
            });
        }
    }
    let report = MetricsReport {
        gc,
        alignment,
        sigma_iqr: sigma,
        trials,
    };
    if let Some(g) = report.gc.pooled_at(5.0) {
        log::info!("GC5 pooled {g:.4}");
    }
    write_json(&rec.output("metrics.json"), &report)?;
    write_atomic(&rec.output("metrics.csv"), csv(&report).as_bytes())?;
    rec.finish("ok")?;
    Ok(())
}
