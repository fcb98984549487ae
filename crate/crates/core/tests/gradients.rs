#[path = "support/gradcheck.rs"]
mod gradcheck;

use gradcheck::{CHECKED, SKIPPED};

fn coverage() -> (usize, usize) {
    (CHECKED.with(|c| c.get()), SKIPPED.with(|c| c.get()))
}

#[test]
fn every_op_matches_finite_differences() {
    let results = gradcheck::run_op_suite(20);
    assert!(results.len() >= 30);
    for (name, err) in &results {
        assert!(*err < 1e-4, "{name}: relative error {err:e}");
    }
    let (checked, skipped) = coverage();
    assert!(skipped * 100 <= checked, "{skipped} of {checked} coordinates skipped");
}

#[test]
fn compiled_model_matches_finite_differences() {
    for (arch, err) in gradcheck::run_model_suite(21) {
        assert!(err < 1e-3, "{arch}: relative error {err:e}");
    }
    let (checked, skipped) = coverage();
    assert!(skipped * 20 <= checked, "{skipped} of {checked} coordinates skipped");
    eprintln!("{checked} coordinates compared, {skipped} skipped at kinks");
}
