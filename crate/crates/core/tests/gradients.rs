//! Double-precision finite-difference checks of every primitive, block and
//! the tiny end-to-end network.

use hwmnet::checks::{block_cases, network_case, primitive_cases, GradCase};

fn run_all(cases: &[GradCase]) {
    let mut failures = Vec::new();
    for case in cases {
        let entry = case.run().unwrap();
        println!(
            "{:<24} max rel err {:.3e} (tol {:.0e}, {} probes, {} excluded at kinks)",
            entry.name, entry.max_error, entry.tolerance, entry.probes, entry.excluded
        );
        if !entry.passed() {
            failures.push(entry.name);
        }
    }
    assert!(failures.is_empty(), "gradient mismatch in {failures:?}");
}

#[test]
fn primitives() {
    run_all(&primitive_cases());
}

#[test]
fn blocks() {
    run_all(&block_cases().unwrap());
}

#[test]
fn network() {
    run_all(&[network_case().unwrap()]);
}
