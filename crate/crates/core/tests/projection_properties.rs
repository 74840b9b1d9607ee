use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use kinefit_core::camera::{compose_extrinsic_delta, extrinsic_error, look_at};
use kinefit_core::objective::confidence_from_std;
use kinefit_core::trajectory::{encode_times, EncodingConfig};
use kinefit_core::{ExtrinsicDelta, Intrinsics};

fn intrinsics(k1: f64, k2: f64) -> Intrinsics {
    Intrinsics {
        fx: 1500.0,
        fy: 1480.0,
        cx: 1024.0,
        cy: 768.0,
        k1,
        k2,
    }
}

/// Pinhole plus radial distortion from the axis-angle extrinsics.
fn projection_oracle(w: &[f64; 3], t: &[f64; 3], i: &Intrinsics, x: &[f64; 3]) -> [f64; 2] {
    let p = Rotation3::from_scaled_axis(Vector3::from(*w)) * Vector3::from(*x) + Vector3::from(*t);
    let (u, v) = (p[0] / p[2], p[1] / p[2]);
    let r2 = u * u + v * v;
    let d = 1.0 + i.k1 * r2 + i.k2 * r2 * r2;
    [i.fx * u * d + i.cx, i.fy * v * d + i.cy]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_matches_closed_form(
        angle in 0.0..std::f64::consts::TAU,
        height in 0.5..3.0f64,
        k1 in -0.2..0.1f64,
        k2 in -0.05..0.05f64,
        x in -0.8..0.8f64,
        y in -0.8..0.8f64,
        z in 0.0..1.8f64,
    ) {
        let cam = look_at("c", [5.0 * angle.cos(), 5.0 * angle.sin(), height], [0.0, 0.0, 0.9], intrinsics(k1, k2), 2048, 1536);
        let got = cam.project(&ExtrinsicDelta::default(), &[x, y, z]).unwrap();
        let want = projection_oracle(&cam.rotation, &cam.translation, &cam.intrinsics(), &[x, y, z]);
        prop_assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9);
    }

    #[test]
    fn delta_equals_baked_camera(
        angle in 0.0..std::f64::consts::TAU,
        w in prop::array::uniform3(-0.02..0.02f64),
        t in prop::array::uniform3(-0.02..0.02f64),
        x in prop::array::uniform3(-0.5..0.5f64),
    ) {
        let cam = look_at("c", [4.0 * angle.cos(), 4.0 * angle.sin(), 1.5], [0.0, 0.0, 1.0], intrinsics(-0.05, 0.01), 2048, 1536);
        let delta = ExtrinsicDelta { rotation: w, translation: t };
        let x = [x[0], x[1], x[2] + 1.0];
        let a = cam.project(&delta, &x).unwrap();
        let baked = compose_extrinsic_delta(&cam, &delta);
        let b = baked.project(&ExtrinsicDelta::default(), &x).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
        let (rot_deg, trans_mm) = extrinsic_error(&cam, &baked);
        let (want_deg, want_mm) = delta.magnitude_deg_mm();
        prop_assert!((rot_deg - want_deg).abs() < 1e-6 && (trans_mm - want_mm).abs() < 1e-6);
    }

    #[test]
    fn confidence_decreases_with_uncertainty(a in 0.0..200.0f64, b in 0.0..200.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(confidence_from_std(lo) >= confidence_from_std(hi));
        prop_assert!(confidence_from_std(hi) > 0.0 && confidence_from_std(lo) < 1.0);
    }

    #[test]
    fn encoding_harmonics_are_bounded(t in 0.0..1.0f64, half in 1usize..8) {
        let cfg = EncodingConfig::new(2 * half + 1, 1.0).unwrap();
        let e = encode_times(&[t], &cfg).unwrap();
        // The first feature is the phase itself, the rest are its harmonics.
        prop_assert!((e.data()[0] - std::f64::consts::PI * t).abs() < 1e-12);
        prop_assert!(e.data()[1..].iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }
}

#[test]
fn confidence_at_zero_and_half_maximum() {
    assert!((confidence_from_std(0.0) - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    assert!((confidence_from_std(30.0) - 0.5).abs() < 1e-12);
}
