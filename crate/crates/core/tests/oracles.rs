mod common;

use common::oracle::*;

fn check(errors: &[f64], tol: f64) {
    for (case, e) in errors.iter().enumerate() {
        assert!(*e < tol, "case {case}: distance {e}");
    }
}

#[test]
fn noise_off_linreg_matches_least_squares() {
    check(&linreg_vs_least_squares(), LINREG_TOL);
}

#[test]
fn noise_off_linreg_matches_reference_gd_on_noisy_data() {
    check(&linreg_vs_reference_gd(), 1e-9);
}

#[test]
fn noise_off_sparse_matches_iht() {
    check(&sparse_vs_iht(), SPARSE_TOL);
}

#[test]
fn noise_off_fed_linreg_matches_pooled_least_squares() {
    check(&fed_linreg_vs_pooled(), LINREG_TOL);
}

#[test]
fn noise_off_fed_sparse_matches_pooled_iht() {
    check(&fed_sparse_vs_pooled(), SPARSE_TOL);
}
