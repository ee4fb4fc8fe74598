use std::time::Instant;

use atsc_core::gradsuite;
use atsc_tensor::OpKind;

#[test]
fn every_op_passes() {
    for e in gradsuite::op_checks(7).unwrap() {
        assert!(
            e.report.passed,
            "{}: {} {:?}",
            e.name,
            e.report.max_rel_err,
            e.report.worst()
        );
    }
}

#[test]
fn every_component_passes() {
    let start = Instant::now();
    for e in gradsuite::module_checks(7).unwrap() {
        eprintln!(
            "{:<20} max err {:.3e} over {} coords",
            e.name,
            e.report.max_rel_err,
            e.report.checks.len()
        );
        assert!(
            e.report.passed,
            "{}: {} {:?}",
            e.name,
            e.report.max_rel_err,
            e.report.worst()
        );
    }
    eprintln!("components in {:?}", start.elapsed());
}

#[test]
fn planted_backward_errors_are_caught() {
    for kind in [OpKind::MatMul, OpKind::LayerNorm, OpKind::SoftmaxMasked] {
        assert!(
            gradsuite::detects_fault(3, kind).unwrap(),
            "{kind:?} fault missed"
        );
    }
}
