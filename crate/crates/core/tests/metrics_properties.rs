use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use kinefit_core::metrics::{
    align_trial_sets, align_trials, detect_heel_strikes, gc_fraction, heel_events, heel_trajectories, markers_for,
    sigma_iqr, step_parameters, HeelEvent, HeelStrikeParams, WalkwayEvent,
};
use kinefit_core::synth::{heel_gait, HeelGaitConfig};
use kinefit_core::{demo_biped, generate_session, Side, SynthConfig};

fn contacts_as_events(g: &kinefit_core::synth::HeelGait) -> Vec<HeelEvent> {
    g.contacts
        .iter()
        .map(|c| HeelEvent {
            side: c.side,
            time: c.time,
            position: c.position,
        })
        .collect()
}

#[test]
fn sigma_iqr_of_standard_normal_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let s = sigma_iqr(&x).unwrap();
    assert!((s - 1.0).abs() < 0.01, "{s}");
}

#[test]
fn noiseless_gait_table_matches_generator() {
    let g = heel_gait(&HeelGaitConfig::default()).unwrap();
    let events = heel_events(&g.right, &g.left, &g.times, 30.0, &HeelStrikeParams::default());
    assert_eq!(events.len(), g.contacts.len());
    let table = step_parameters(&events);
    let mut checked = 0;
    for r in &table.rows {
        assert!(r.alternating);
        if let Some(s) = r.step_length {
            assert!((s - 0.6).abs() < 1e-6, "{:?}", table.rows);
            checked += 1;
        }
        if let Some(s) = r.stride_length {
            assert!((s - 1.2).abs() < 1e-6);
        }
        if let Some(w) = r.step_width {
            assert!((w - 0.1).abs() < 1e-6);
        }
    }
    assert!(checked >= 3);
}

#[test]
fn detection_is_within_one_frame_of_generator_contacts() {
    let g = heel_gait(&HeelGaitConfig::default()).unwrap();
    let p = HeelStrikeParams::default();
    for (side, traj) in [(Side::Right, &g.right), (Side::Left, &g.left)] {
        let found = detect_heel_strikes(traj, 30.0, &p);
        let truth: Vec<usize> = g.contacts.iter().filter(|c| c.side == side).map(|c| c.frame).collect();
        assert_eq!(found.len(), truth.len());
        for (f, t) in found.iter().zip(&truth) {
            assert!(f.abs_diff(*t) <= 1, "{side:?}: {f} vs {t}");
        }
    }
}

#[test]
fn single_cycle_gives_one_event_per_side() {
    let cfg = HeelGaitConfig {
        n_frames: 31,
        phase0: 0.3,
        ..HeelGaitConfig::default()
    };
    let g = heel_gait(&cfg).unwrap();
    let p = HeelStrikeParams::default();
    assert_eq!(detect_heel_strikes(&g.right, 30.0, &p).len(), 1);
    assert_eq!(detect_heel_strikes(&g.left, 30.0, &p).len(), 1);
}

/// The full-body generator's heels have no flat stance; contacts are the
/// height minima it reports.
#[test]
fn detection_on_full_body_synthetic_walk() {
    let model = demo_biped();
    let cfg = SynthConfig {
        n_trials: 1,
        n_cameras: 4,
        ..SynthConfig::default()
    };
    let s = generate_session(&model, &cfg).unwrap();
    let truth = &s.truth.trials[0];
    let markers = markers_for(&model, &truth.poses, &s.truth.subject).unwrap();
    let r = model.site_index("r_heel").unwrap();
    let l = model.site_index("l_heel").unwrap();
    let (right, left) = heel_trajectories(&markers, r, l);
    let events = heel_events(
        &right,
        &left,
        &truth.times,
        cfg.frame_rate,
        &HeelStrikeParams::default(),
    );
    assert!(!truth.heel_strikes.is_empty());
    for c in &truth.heel_strikes {
        let hit = events
            .iter()
            .any(|e| e.side == c.side && (e.time - c.time).abs() <= 1.0 / cfg.frame_rate + 1e-9);
        assert!(hit, "no detection near {:?} at {}", c.side, c.time);
    }
    let table = step_parameters(&events);
    assert!(table.rows.iter().all(|r| r.alternating));
}

#[test]
fn trial_sets_share_one_alignment() {
    let make = |x0: f64, t0: f64| -> Vec<WalkwayEvent> {
        (0..5)
            .map(|i| WalkwayEvent {
                time_s: t0 + 0.5 * i as f64,
                x_m: x0 + 0.6 * i as f64,
                y_m: if i % 2 == 0 { -0.05 } else { 0.05 },
                side: if i % 2 == 0 { Side::Right } else { Side::Left },
            })
            .collect()
    };
    let a = vec![make(0.0, 0.4), make(-0.3, 0.7)];
    let shift = |v: &[WalkwayEvent]| -> Vec<WalkwayEvent> {
        v.iter()
            .map(|e| WalkwayEvent {
                time_s: e.time_s + 0.1,
                x_m: e.x_m + 0.5,
                y_m: e.y_m + 0.2,
                side: e.side,
            })
            .collect()
    };
    let b: Vec<_> = a.iter().map(|v| shift(v)).collect();
    let (al, pairs) = align_trial_sets(&a, &b).unwrap();
    assert_eq!(al.pairs.len(), 10);
    assert!(pairs.iter().all(|p| p.len() == 5));
    assert!((al.time_offset - 0.1).abs() < 1e-9);
    assert!((al.translation[0] - 0.5).abs() < 1e-9 && (al.translation[1] - 0.2).abs() < 1e-9);
}

#[test]
fn alignment_residual_tracks_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 120;
    let a: Vec<WalkwayEvent> = (0..n)
        .map(|i| WalkwayEvent {
            time_s: 0.5 * i as f64,
            x_m: 0.6 * (i % 12) as f64,
            y_m: 0.3 * (i / 12) as f64 + if i % 2 == 0 { -0.05 } else { 0.05 },
            side: if i % 2 == 0 { Side::Right } else { Side::Left },
        })
        .collect();
    let sigma = 0.005;
    let b: Vec<WalkwayEvent> = a
        .iter()
        .map(|e| {
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            WalkwayEvent {
                x_m: e.x_m + sigma * nx,
                y_m: e.y_m + sigma * ny,
                ..e.clone()
            }
        })
        .collect();
    let al = align_trials(&a, &b).unwrap();
    // Two noisy coordinates per event, six fitted parameters.
    let expected = sigma * (2.0 * (n as f64 - 3.0) / n as f64).sqrt();
    assert!(
        (al.residual.rms_m - expected).abs() < 0.15 * expected,
        "{} vs {expected}",
        al.residual.rms_m
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gc_is_monotone_in_threshold(
        d in prop::collection::vec(0.0..50.0f64, 1..60),
        w in prop::collection::vec(0.0..1.0f64, 60),
        d1 in 0.0..30.0f64,
        step in 0.0..30.0f64,
    ) {
        let w = &w[..d.len()];
        if let (Some(a), Some(b)) = (gc_fraction(&d, w, d1, 0.5), gc_fraction(&d, w, d1 + step, 0.5)) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn gc_ignores_low_confidence(d in prop::collection::vec(0.0..50.0f64, 1..40), extra in 0.0..100.0f64) {
        let w = vec![1.0; d.len()];
        let base = gc_fraction(&d, &w, 5.0, 0.5);
        let mut d2 = d.clone();
        let mut w2 = w.clone();
        d2.push(extra);
        w2.push(0.2);
        prop_assert_eq!(base, gc_fraction(&d2, &w2, 5.0, 0.5));
    }

    #[test]
    fn sigma_iqr_is_affine_equivariant(
        x in prop::collection::vec(-10.0..10.0f64, 4..50),
        a in -5.0..5.0f64,
        b in -100.0..100.0f64,
    ) {
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let sx = sigma_iqr(&x).unwrap();
        let sy = sigma_iqr(&y).unwrap();
        prop_assert!((sy - a.abs() * sx).abs() < 1e-9 * (1.0 + sx.abs() * a.abs()));
    }

    #[test]
    fn step_table_is_rotation_and_translation_invariant(
        heading in 0.0..360.0f64,
        ox in -5.0..5.0f64,
        oy in -5.0..5.0f64,
        stride in 0.8..1.6f64,
        width in 0.05..0.25f64,
    ) {
        let base = HeelGaitConfig { stride_length_m: stride, step_width_m: width, ..HeelGaitConfig::default() };
        let moved = HeelGaitConfig { heading_deg: heading, origin: [ox, oy, 0.0], ..base.clone() };
        let t0 = step_parameters(&contacts_as_events(&heel_gait(&base).unwrap()));
        let t1 = step_parameters(&contacts_as_events(&heel_gait(&moved).unwrap()));
        prop_assert_eq!(t0.rows.len(), t1.rows.len());
        for (a, b) in t0.rows.iter().zip(&t1.rows) {
            for (x, y) in [(a.step_length, b.step_length), (a.stride_length, b.stride_length), (a.step_width, b.step_width)] {
                prop_assert_eq!(x.is_some(), y.is_some());
                if let (Some(x), Some(y)) = (x, y) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
