mod common;

use fgno_core::model::TimeInjection;

const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, err) in common::primitive_grad_errors().unwrap() {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn toy_backbone_flow_loss_matches_central_differences() {
    for injection in [TimeInjection::Concat, TimeInjection::Add] {
        let err = common::model_grad_error(injection).unwrap();
        assert!(err < TOL, "{injection:?}: relative error {err:e}");
    }
}
