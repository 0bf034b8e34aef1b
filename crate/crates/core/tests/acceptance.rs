//! Acceptance suite: one test per registered criterion, each printing its
//! PASS/FAIL line (visible under `--nocapture`).
//!
//! C5 is a known-red criterion: the P0 enumeration optimum approximates a
//! singular arc, and its residual Hamiltonian gap (~4e-2) cannot reach the
//! stated 1e-3 tolerance at any enumerable block resolution. The check and
//! tolerance are implemented as stated; the test records the failure rather
//! than weakening the bound.

use bsde_control::criteria::{run_criterion, criterion_title, SuiteContext, CRITERION_IDS};

fn run(id: u8) -> (bool, String) {
    let ctx = SuiteContext::new(7, None);
    let outcome = run_criterion(id, &ctx).expect("criterion runs");
    println!(
        "C{:02} {} — {} [{}]",
        outcome.id,
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.title,
        outcome.details
    );
    (outcome.passed, outcome.details)
}

macro_rules! criterion_test {
    ($name:ident, $id:expr) => {
        #[test]
        fn $name() {
            let (passed, details) = run($id);
            assert!(passed, "criterion {} failed: {details}", $id);
        }
    };
}

criterion_test!(c01_bsde_solver_vs_closed_forms, 1);
criterion_test!(c02_cost_restriction_identity, 2);
criterion_test!(c03_hamiltonian_reduction, 3);
criterion_test!(c04_spike_rates, 4);
criterion_test!(c05_strict_necessary_condition, 5);
criterion_test!(c06_sufficiency_hypotheses, 6);
criterion_test!(c07_chattering_stability, 7);
criterion_test!(c08_stable_convergence_diagnostic, 8);
criterion_test!(c09_adjoint_convergence, 9);
criterion_test!(c10_relaxed_necessary_condition, 10);
criterion_test!(c11_near_optimality_structure, 11);
criterion_test!(c12_metric_axioms, 12);
criterion_test!(c13_gradient_checks, 13);

#[test]
fn c14_determinism() {
    // artifacts written to a scratch directory, compared byte for byte
    let dir = tempfile::tempdir().unwrap();
    let ctx = SuiteContext::new(7, Some(dir.path().to_path_buf()));
    let outcome = run_criterion(14, &ctx).expect("criterion runs");
    println!(
        "C14 {} — {} [{}]",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.title,
        outcome.details
    );
    assert!(outcome.passed, "criterion 14 failed: {}", outcome.details);
}

#[test]
fn registry_covers_every_criterion_exactly_once() {
    let mut ids = CRITERION_IDS.to_vec();
    ids.sort_unstable();
    assert_eq!(ids, (1u8..=14).collect::<Vec<_>>());
    for id in CRITERION_IDS {
        assert_ne!(criterion_title(id), "unknown", "criterion {id} missing a title");
    }
}
