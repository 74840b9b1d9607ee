use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use kinefit_core::fitter::{evaluate_session, EvalOptions, SessionParams, SessionProblem};
use kinefit_core::kinematics::base_site_tensor;
use kinefit_core::objective::FrameBatch;
use kinefit_core::{
    demo_biped, forward_kinematics, forward_kinematics_batch, generate_session, ExtrinsicDelta, FitConfig, Pose,
    SubjectParams, SynthConfig,
};

fn kinematics(c: &mut Criterion) {
    let model = demo_biped();
    let subject = SubjectParams::neutral(&model);
    let pose = Pose((0..model.n_dof).map(|i| 0.01 * i as f64).collect());
    c.bench_function("fk_single_pose", |b| {
        b.iter(|| forward_kinematics(&model, black_box(&pose), &subject).unwrap())
    });
    let poses = vec![pose; 300];
    c.bench_function("fk_300_poses", |b| {
        b.iter(|| forward_kinematics_batch(&model, black_box(&poses), &subject).unwrap())
    });
}

fn projection(c: &mut Criterion) {
    let model = demo_biped();
    let s = generate_session(
        &model,
        &SynthConfig {
            n_trials: 1,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let cam = &s.rig.cameras[0];
    let delta = ExtrinsicDelta::default();
    let x = [0.1, -0.2, 1.0];
    c.bench_function("project_point", |b| {
        b.iter(|| cam.project(&delta, black_box(&x)).unwrap())
    });
}

fn loss(c: &mut Criterion) {
    let model = demo_biped();
    let s = generate_session(
        &model,
        &SynthConfig {
            n_trials: 1,
            ..SynthConfig::default()
        },
    )
    .unwrap();
    let cfg = FitConfig::desk();
    let problem = SessionProblem::new(&model, &s.rig, &s.trials, cfg.encoding_dim, cfg.loss_weights()).unwrap();
    let params = SessionParams::init(&problem, &cfg.layer_sizes, 0).unwrap();
    let base = base_site_tensor(&model);
    let batches = vec![FrameBatch::all(s.trials[0].n_frames())];
    let opts = EvalOptions {
        bundle_adjust: true,
        learn_base: false,
    };
    let mut g = c.benchmark_group("loss");
    g.sample_size(20);
    g.bench_function("loss_and_gradient_90_frames", |b| {
        b.iter(|| evaluate_session(&problem, black_box(&params), &base, &batches, opts))
    });
    g.finish();
}

criterion_group!(benches, kinematics, projection, loss);
criterion_main!(benches);
