use fdp_transfer::experiment::{run_cell, run_sweep, ExperimentConfig, SweepAxis};
use fdp_transfer::federation::audit_ledger;
use fdp_transfer::highdim::{default_s_prime, dp_sparse_single, SparseRegConfig};
use fdp_transfer::lowdim::{dp_linreg_single, RegressionConfig};
use fdp_transfer::mechanisms::{l0_norm, PrivacyBudget};
use fdp_transfer::pipeline::EstimatorConfig;
use fdp_transfer::seed::SeedTree;
use fdp_transfer::synth::Family;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_data(n: usize, beta: &Array1<f64>, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, beta.len()), |_| StandardNormal.sample(&mut r));
    let noise: Array1<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    let y = x.dot(beta) + noise;
    (x, y)
}

fn config(family: Family, seed: u64, k: usize, outliers: usize, epsilon: f64) -> ExperimentConfig {
    let (n, d, s) = match family {
        Family::Mean => (600, 1, 1),
        Family::Lowdim => (2000, 3, 1),
        Family::Highdim => (2000, 30, 2),
    };
    let text = format!(
        r#"
family = "{}"
replications = 1
master_seed = {seed}
[problem]
n_target = {n}
n_source = {n}
k = {k}
outliers = {outliers}
d = {d}
s = {s}
[privacy]
epsilon = {epsilon}
delta = 1e-5
"#,
        family.as_str()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Mean), Just(Family::Lowdim), Just(Family::Highdim)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pipelines_audit_clean_and_select_subsets(
        family in family(),
        seed in any::<u64>(),
        k in 1usize..5,
        outliers in 0usize..3,
        epsilon in prop::sample::select(vec![0.5, 2.0, 20.0, 1000.0]),
    ) {
        let cfg = config(family, seed, k, outliers.min(k), epsilon);
        let cell = run_cell(&cfg, 0, 0, 3.0).unwrap();
        if let Some(report) = &cell.report {
            prop_assert!(audit_ledger(&report.transcript, cfg.estimator().unwrap().budget()).ok);
            prop_assert!(report.selected.iter().all(|j| (1..=k as u32).contains(j)));
            if let EstimatorConfig::Highdim(c) = cfg.estimator().unwrap() {
                let bound = c.s_prime;
                prop_assert!(report.iterates.iter().all(|b| b.iter().filter(|v| **v != 0.0).count() <= bound));
            }
        }
    }

    #[test]
    fn linreg_trace_has_positive_clip_every_round(seed in any::<u64>(), t in 1usize..8, epsilon in 0.5f64..50.0) {
        let beta = Array1::from(vec![0.5, -0.25, 1.0]);
        let (x, y) = gaussian_data(3000, &beta, seed);
        let budget = PrivacyBudget::new(epsilon, 1e-5).unwrap();
        let cfg = RegressionConfig::new(t, 1.0, 0.05, budget).unwrap();
        if let Ok((_, trace)) = dp_linreg_single(x.view(), y.view(), &cfg, &SeedTree::new(seed)) {
            prop_assert_eq!(trace.rounds.len(), t);
            prop_assert!(trace.rounds.iter().all(|r| r.residual_clip > 0.0));
        }
    }

    #[test]
    fn sparse_iterates_respect_s_prime(seed in any::<u64>(), s in 1usize..4, epsilon in 0.5f64..1e4) {
        let d = 40;
        let mut beta = Array1::zeros(d);
        for j in 0..s {
            beta[j * 7] = 1.0 / (s as f64).sqrt();
        }
        let (x, y) = gaussian_data(2000, &beta, seed);
        let budget = PrivacyBudget::new(epsilon, 1e-5).unwrap();
        let cfg = SparseRegConfig::new(6, default_s_prime(s, 1.0, d), 1.0, 0.05, budget).unwrap();
        if let Ok((est, trace)) = dp_sparse_single(x.view(), y.view(), &cfg, &SeedTree::new(seed)) {
            prop_assert!(l0_norm(est.view()) <= cfg.s_prime);
            for round in &trace.rounds {
                prop_assert!(round.beta.iter().filter(|v| **v != 0.0).count() <= cfg.s_prime);
            }
        }
    }

    #[test]
    fn sweep_rows_equal_grid_times_replications(reps in 1usize..3, a in 1usize..3, b in 1usize..3) {
        let mut cfg = config(Family::Mean, 5, 2, 0, 1.0);
        cfg.replications = reps;
        let ns: Vec<f64> = (0..a).map(|i| 400.0 + 100.0 * i as f64).collect();
        let es: Vec<f64> = (0..b).map(|i| 1.0 + i as f64).collect();
        cfg.sweep = vec![
            SweepAxis { param: "n".into(), values: ns },
            SweepAxis { param: "epsilon".into(), values: es },
        ];
        let result = run_sweep(&cfg).unwrap();
        prop_assert_eq!(result.rows.len(), a * b * reps);
    }
}
