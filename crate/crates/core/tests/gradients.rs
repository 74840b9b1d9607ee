use kinefit_core::gradcheck::check_case;
use kinefit_core::{run_gradcheck, GradcheckConfig};

#[test]
fn session_gradients_match_finite_differences() {
    let cfg = GradcheckConfig {
        n_configs: 6,
        seed: 42,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg).unwrap();
    assert_eq!(report.cases.len(), 6);
    assert!(report.passed, "max relative error {:e}", report.max_rel_error);
    assert!(report.cases.iter().any(|c| c.model == "biped_spine"));
}

#[test]
fn cases_are_reproducible() {
    let cfg = GradcheckConfig::default();
    assert_eq!(check_case(3, &cfg).unwrap(), check_case(3, &cfg).unwrap());
}

#[test]
fn rejects_single_camera() {
    let cfg = GradcheckConfig {
        n_cameras: 1,
        ..GradcheckConfig::default()
    };
    assert!(run_gradcheck(&cfg).is_err());
}
