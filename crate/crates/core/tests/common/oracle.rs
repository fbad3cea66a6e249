//! Noise-off equivalence cases. Each returns one ℓ2 distance per instance.

use std::collections::BTreeSet;

use fdp_transfer::federation::{Payload, SiteDataset};
use fdp_transfer::highdim::{default_s_prime, dp_sparse_single, fed_sparse, SparseRegConfig};
use fdp_transfer::lowdim::{dp_linreg_single, fed_linreg, RegressionConfig};
use fdp_transfer::mechanisms::{l0_norm, NoiseMode, PrivacyBudget};
use fdp_transfer::seed::SeedTree;
use ndarray::{Array1, Array2};
use rand::Rng;

use super::*;

pub const LINREG_TOL: f64 = 1e-6;
pub const SPARSE_TOL: f64 = 1e-4;

fn budget() -> PrivacyBudget {
    PrivacyBudget::new(1.0, 1e-5).unwrap()
}

fn linreg_cfg(rounds: usize, rho: f64) -> RegressionConfig {
    let mut c = RegressionConfig::new(rounds, 1.0, 0.05, budget()).unwrap();
    c.rho = rho;
    c.mode = NoiseMode::Off;
    c
}

fn sparse_cfg(rounds: usize, s: usize, d: usize) -> SparseRegConfig {
    let mut c = SparseRegConfig::new(rounds, default_s_prime(s, 1.0, d), 1.0, 0.05, budget()).unwrap();
    c.mode = NoiseMode::Off;
    c
}

fn sites_from(parts: &[(Array2<f64>, Array1<f64>)]) -> Vec<SiteDataset> {
    parts
        .iter()
        .enumerate()
        .map(|(k, (x, y))| SiteDataset::new(k as u32, Payload::Regression { x: x.clone(), y: y.clone() }).unwrap())
        .collect()
}

fn sparse_ok(b: &[f64], s_prime: usize) -> bool {
    l0_norm(Array1::from(b.to_vec()).view()) <= s_prime
}

/// n = 500, d = 1..5, noiseless responses, against least squares.
pub fn linreg_vs_least_squares() -> Vec<f64> {
    let mut r = rng(1);
    (0..20)
        .map(|case| {
            let d = 1 + case % 5;
            let beta: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let (x, y) = linear_data(&mut r, 500, &beta, 0.0);
            let (est, _) =
                dp_linreg_single(x.view(), y.view(), &linreg_cfg(40, 0.5), &SeedTree::new(case as u64)).unwrap();
            dist(est.as_slice().unwrap(), &least_squares(&x, &y))
        })
        .collect()
}

/// Noisy responses, so clipping binds; against an independent clipped GD.
pub fn linreg_vs_reference_gd() -> Vec<f64> {
    let mut r = rng(2);
    (0..20)
        .map(|case| {
            let d = 1 + case % 5;
            let beta: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let (x, y) = linear_data(&mut r, 2000, &beta, 1.0);
            let (est, _) = dp_linreg_single(x.view(), y.view(), &linreg_cfg(8, 0.2), &SeedTree::new(3)).unwrap();
            dist(est.as_slice().unwrap(), &clipped_gd(&x, &y, 8, 0.2, 0.05))
        })
        .collect()
}

/// Sparse single-site against IHT; infinite distance if an iterate is too dense.
pub fn sparse_vs_iht() -> Vec<f64> {
    let mut r = rng(3);
    (0..20)
        .map(|case| {
            let (d, s) = (50, 1 + case % 3);
            let beta = sparse_vector(&mut r, d, s);
            let (x, y) = linear_data(&mut r, 4000, &beta, 0.0);
            let cfg = sparse_cfg(20, s, d);
            let (est, trace) = dp_sparse_single(x.view(), y.view(), &cfg, &SeedTree::new(4)).unwrap();
            if !trace.rounds.iter().all(|t| sparse_ok(&t.beta, cfg.s_prime)) {
                return f64::INFINITY;
            }
            dist(est.as_slice().unwrap(), &iht(&x, &y, cfg.s_prime, cfg.rho, 200))
        })
        .collect()
}

/// Federated linear regression with all sources selected, against pooled least squares.
pub fn fed_linreg_vs_pooled() -> Vec<f64> {
    let mut r = rng(4);
    (0..10)
        .map(|case| {
            let d = 1 + case % 5;
            let beta: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let parts: Vec<_> = (0..4).map(|_| linear_data(&mut r, 1000, &beta, 0.0)).collect();
            let report = fed_linreg(&sites_from(&parts), &linreg_cfg(40, 0.5), 3.0, &SeedTree::new(5)).unwrap();
            if report.selected != (1..4).collect::<BTreeSet<u32>>() {
                return f64::INFINITY;
            }
            let (px, py) = stack(&parts, |n| n / 2 - 1);
            dist(&report.estimate, &least_squares(&px, &py))
        })
        .collect()
}

/// Federated sparse regression on a fixed subset, against pooled IHT.
pub fn fed_sparse_vs_pooled() -> Vec<f64> {
    let mut r = rng(5);
    (0..10)
        .map(|case| {
            let (d, s) = (50, 1 + case % 3);
            let beta = sparse_vector(&mut r, d, s);
            let parts: Vec<_> = (0..3).map(|_| linear_data(&mut r, 2000, &beta, 0.0)).collect();
            let cfg = sparse_cfg(20, s, d);
            let subset: BTreeSet<u32> = [1, 2].into();
            let (est, iterates, _) = fed_sparse(&sites_from(&parts), &cfg, &subset, &SeedTree::new(6)).unwrap();
            if !iterates.iter().all(|b| sparse_ok(b.as_slice(), cfg.s_prime)) {
                return f64::INFINITY;
            }
            let (px, py) = stack(&parts, |_| 0);
            dist(est.as_slice().unwrap(), &iht(&px, &py, cfg.s_prime, cfg.rho, 200))
        })
        .collect()
}
