//! A reduced-seed pass of the finite-difference suite; the full suite runs in the acceptance target.

use zeus_core::gradsuite::{run_suite, SuiteConfig};

#[test]
fn every_op_passes_with_three_seeds() {
    let checks = run_suite(&SuiteConfig { seeds: 3, ..Default::default() }).unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(checks.iter().any(|c| c.name.contains("model")));
}
