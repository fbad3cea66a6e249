//! Sparse high-dimensional private regression: the single-site peeling
//! iteration, the federated noisy-gradient iteration with hard thresholding,
//! and the rule that chooses between them.

use std::collections::BTreeSet;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::detection::{detect_informative, DetectionInput, SiteId};
use crate::error::{Error, Result};
use crate::federation::{hash_values, RoundRecord, SiteDataset, Transcript};
use crate::lowdim::{
    check_data, check_finite, clipped_gradient, detection_stage, federated_rounds, iteration_size, residual_scale,
    split_sites, split_target, GdRound, GdTrace, Projection, RegressionConfig,
};
use crate::mechanisms::{hard_threshold, peeling, MechanismRecord, NoiseMode, PrivacyBudget, Stage};
use crate::rates::{aggregation_privacy_term, rate_highdim};
use crate::report::{EstimatorReport, FirstStage};
use crate::seed::{label, SeedTree};

/// `(9/(10L))(1 − 0.296/L⁴)`.
pub fn default_sparse_rho(l: f64) -> f64 {
    0.9 / l * (1.0 - 0.296 / l.powi(4))
}

/// `ceil(4.18 L⁴ s)`, capped at `d`.
pub fn default_s_prime(s: usize, l: f64, d: usize) -> usize {
    ((4.18 * l.powi(4) * s as f64).ceil() as usize).clamp(1, d.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRegConfig {
    pub rounds: usize,
    pub rho: f64,
    pub s_prime: usize,
    pub l: f64,
    pub eta: f64,
    pub budget: PrivacyBudget,
    /// Use `2ρR_tR/n` instead of `2ρR_tR/b` as the peeling noise level.
    #[serde(default)]
    pub paper_literal: bool,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl SparseRegConfig {
    pub fn new(rounds: usize, s_prime: usize, l: f64, eta: f64, budget: PrivacyBudget) -> Result<Self> {
        let c = SparseRegConfig {
            rounds,
            rho: default_sparse_rho(l),
            s_prime,
            l,
            eta,
            budget,
            paper_literal: false,
            mode: NoiseMode::Calibrated,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.as_regression().validate()?;
        if self.s_prime == 0 {
            return Err(Error::param("s' must be at least 1"));
        }
        Ok(())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.s_prime > d {
            return Err(Error::param(format!("s' = {} exceeds d = {d}", self.s_prime)));
        }
        Ok(())
    }

    fn as_regression(&self) -> RegressionConfig {
        RegressionConfig {
            rounds: self.rounds,
            rho: self.rho,
            l: self.l,
            eta: self.eta,
            budget: self.budget,
            beta0: None,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Aggregate,
    TargetOnly,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Aggregate => "aggregate",
            Branch::TargetOnly => "target_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaDecision {
    pub branch: Branch,
    pub lhs: f64,
    pub rhs: f64,
}

/// Aggregate iff the privacy cost of aggregating `Â` is at most `c̃ r_HLR(n_0)`.
#[allow(clippy::too_many_arguments)]
pub fn meta_decision(
    k_hat: usize,
    n_agg: usize,
    n0: usize,
    s_prime: usize,
    d: usize,
    budget: PrivacyBudget,
    eta: f64,
    tilde_c: f64,
) -> Result<MetaDecision> {
    let lhs = aggregation_privacy_term(k_hat, n_agg, s_prime, d, budget.epsilon, budget.delta, eta)?;
    let rhs = tilde_c * rate_highdim(n0, s_prime, d, budget.epsilon, budget.delta, eta)?;
    Ok(MetaDecision {
        branch: if lhs <= rhs { Branch::Aggregate } else { Branch::TargetOnly },
        lhs,
        rhs,
    })
}

/// Single-site sparse private regression.
///
/// Each round clips the residuals at `R_t = 2 sqrt(log(n/η)) · PrivateVariance`
/// and rescales covariates onto the ℓ∞ ball of radius `R = 2 sqrt(L log(nd/η))`,
/// takes a gradient step and keeps `s'` coordinates by peeling with noise
/// level `λ = 2ρR_tR/b`.
pub fn dp_sparse_single(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    cfg: &SparseRegConfig,
    seeds: &SeedTree,
) -> Result<(Array1<f64>, GdTrace)> {
    cfg.validate()?;
    let (n, b) = check_data(x, y, cfg.rounds)?;
    let d = x.ncols();
    cfg.check_dim(d)?;
    let (nf, df) = (n as f64, d as f64);
    let clip = 2.0 * (cfg.l * (nf * df / cfg.eta).ln()).sqrt();
    let log_factor = 2.0 * (nf / cfg.eta).ln().sqrt();
    let half = cfg.budget.halve();
    let mut beta = Array1::zeros(d);
    let mut trace = GdTrace::default();
    for t in 0..cfg.rounds {
        let block = t * b..(t + 1) * b;
        let xb = x.slice(ndarray::s![block.clone(), ..]);
        let yb = y.slice(ndarray::s![block.clone()]);
        let round_seeds = seeds.round(t);
        let (scale, pv_record) =
            residual_scale(xb, yb, &beta, half, cfg.mode, &round_seeds, t).map_err(|e| e.in_round(t))?;
        let residual_clip = log_factor * scale;
        let grad = clipped_gradient(xb, yb, &beta, clip, residual_clip, Projection::Linf);
        let half_step = &beta - &(cfg.rho * &grad);
        let denom = if cfg.paper_literal { nf } else { b as f64 };
        let lambda = 2.0 * cfg.rho * residual_clip * clip / denom;
        let stream = round_seeds.child(label::PEELING);
        beta = peeling(half_step.view(), cfg.s_prime, half, lambda, cfg.mode, &mut stream.rng())
            .map_err(|e| e.in_round(t))?;
        check_finite(&beta, t)?;
        let peel_record = MechanismRecord {
            stage: Stage::Peeling,
            budget: half,
            sensitivity: lambda,
            noise_std: 0.0,
            sparsity: cfg.s_prime,
        };
        let peel_record = MechanismRecord {
            noise_std: if cfg.mode.is_off() { 0.0 } else { peel_record.mandated_noise_std() },
            ..peel_record
        };
        trace.rounds.push(GdRound {
            t,
            block: block.clone(),
            clip,
            residual_clip,
            grad_norm: grad.dot(&grad).sqrt(),
            noise_std: peel_record.noise_std,
            beta: beta.to_vec(),
            records: vec![
                pv_record.shifted(block.start),
                RoundRecord {
                    t,
                    record: peel_record,
                    block: block.clone(),
                    stream_id: stream.stream_id(),
                    output_hash: hash_values(beta.as_slice().expect("contiguous")),
                },
            ],
        });
    }
    Ok((beta, trace))
}

/// Federated sparse regression over `{0} ∪ subset`.
///
/// Sites release noisy clipped gradients (ℓ2 covariate clip
/// `R = 2 sqrt(L d log(N/η))`, residual clip `R_t = 2 sqrt(log(N/η)) · PrivateVariance`,
/// Gaussian noise with sensitivity `2RR_t/b`) and the aggregator hard-thresholds
/// the updated iterate to `s'` coordinates. Unpartitioned sites are cut into
/// `T` blocks without a detection split.
pub fn fed_sparse(
    sites: &[SiteDataset],
    cfg: &SparseRegConfig,
    subset: &BTreeSet<SiteId>,
    seeds: &SeedTree,
) -> Result<(Array1<f64>, Vec<Vec<f64>>, Transcript)> {
    cfg.validate()?;
    let parts = sites
        .iter()
        .map(|s| match s.partition() {
            Some(_) => Ok(s.clone()),
            None => s.partitioned(cfg.rounds, false),
        })
        .collect::<Result<Vec<_>>>()?;
    if !parts.iter().any(|s| s.site_id() == 0) {
        return Err(Error::param("site 0 (the target) is missing"));
    }
    for k in subset {
        if !parts.iter().any(|s| s.site_id() == *k) {
            return Err(Error::param(format!("selected site {k} is not present")));
        }
    }
    let d = parts[0].dim();
    cfg.check_dim(d)?;
    for s in &parts {
        if s.partition().map(|p| p.rounds.len()) != Some(cfg.rounds) {
            return Err(Error::AggregationInfeasible(format!(
                "site {} is not partitioned into T = {} blocks",
                s.site_id(),
                cfg.rounds
            )));
        }
    }
    let total: usize = parts
        .iter()
        .filter(|s| s.site_id() == 0 || subset.contains(&s.site_id()))
        .map(iteration_size)
        .sum();
    let log_n = (total as f64 / cfg.eta).ln();
    let clip = 2.0 * (cfg.l * d as f64 * log_n).sqrt();
    let s_prime = cfg.s_prime;
    federated_rounds(&parts, subset, &cfg.as_regression(), clip, 2.0 * log_n.sqrt(), seeds, |b| {
        hard_threshold(b.view(), s_prime)
    })
}

/// Two-stage sparse pipeline: detection with [`dp_sparse_single`] on every
/// site's detection block, then either [`fed_sparse`] over `Â` or
/// [`dp_sparse_single`] on the target's iteration block, per [`meta_decision`].
fn sparse_first_stage(parts: &[SiteDataset], cfg: &SparseRegConfig, seeds: &SeedTree) -> Result<FirstStage> {
    let d = parts[0].dim();
    cfg.check_dim(d)?;
    let n0 = parts.iter().find(|s| s.site_id() == 0).map(|s| s.n()).expect("target present");
    let (released, transcript) =
        detection_stage(parts, cfg.budget, seeds, |x, y, s| dp_sparse_single(x, y, cfg, s))?;
    let (target_estimate, source_estimates) = split_target(released);
    Ok(FirstStage {
        target_estimate,
        source_estimates,
        radius: rate_highdim(n0, cfg.s_prime, d, cfg.budget.epsilon, cfg.budget.delta, cfg.eta)?,
        transcript,
    })
}

/// Detection-block estimates of every site and the radius `r`, exactly as
/// computed inside [`meta_sparse`].
pub fn sparse_detection_estimates(sites: &[SiteDataset], cfg: &SparseRegConfig, seeds: &SeedTree) -> Result<FirstStage> {
    cfg.validate()?;
    sparse_first_stage(&split_sites(sites, cfg.rounds)?, cfg, seeds)
}

pub fn meta_sparse(
    sites: &[SiteDataset],
    cfg: &SparseRegConfig,
    tilde_c: f64,
    seeds: &SeedTree,
) -> Result<EstimatorReport> {
    cfg.validate()?;
    let parts = split_sites(sites, cfg.rounds)?;
    let d = parts[0].dim();
    cfg.check_dim(d)?;
    let size = |k: SiteId| parts.iter().find(|s| s.site_id() == k).map(|s| s.n()).unwrap_or(0);
    let n0 = size(0);

    let FirstStage {
        target_estimate,
        source_estimates,
        radius,
        mut transcript,
    } = sparse_first_stage(&parts, cfg, seeds)?;
    let selected = detect_informative(&DetectionInput {
        target_estimate: target_estimate.clone(),
        source_estimates: source_estimates.clone(),
        threshold_radius: radius,
        tilde_c,
    })?;
    let n_agg = n0 + selected.iter().map(|k| size(*k)).sum::<usize>();
    let decision = meta_decision(selected.len(), n_agg, n0, cfg.s_prime, d, cfg.budget, cfg.eta, tilde_c)?;

    let (estimate, iterates) = match decision.branch {
        Branch::Aggregate => {
            let (beta, iterates, stage_two) = fed_sparse(&parts, cfg, &selected, seeds)?;
            transcript.append(stage_two);
            (beta, iterates)
        }
        Branch::TargetOnly => {
            let target = parts.iter().find(|s| s.site_id() == 0).expect("target present");
            let offset = target.n() - target.iteration_size();
            let (beta, trace) = target
                .with_iteration_data(|x, y| dp_sparse_single(x, y, cfg, &seeds.site(0).child(label::ITERATE)))?;
            transcript.push_records(0, crate::federation::Phase::Iterate, trace.records(offset));
            (beta, trace.rounds.into_iter().map(|r| r.beta).collect())
        }
    };
    Ok(EstimatorReport {
        estimate: estimate.to_vec(),
        target_estimate,
        source_estimates,
        selected,
        radius,
        threshold: tilde_c * radius,
        decision: Some(decision),
        iterates,
        transcript,
        seed_stream: seeds.stream_id(),
    })
}

/// Baseline: [`dp_sparse_single`] on the target's iteration block.
pub fn target_only_sparse(sites: &[SiteDataset], cfg: &SparseRegConfig, seeds: &SeedTree) -> Result<Array1<f64>> {
    let target = sites
        .iter()
        .find(|s| s.site_id() == 0)
        .ok_or_else(|| Error::param("site 0 (the target) is missing"))?
        .partitioned(cfg.rounds, true)?;
    let (beta, _) =
        target.with_iteration_data(|x, y| dp_sparse_single(x, y, cfg, &seeds.site(0).child(label::ITERATE)))?;
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{audit_ledger, Payload};
    use crate::mechanisms::l0_norm;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn data(n: usize, d: usize, support: &[(usize, f64)], sigma: f64, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut r));
        let mut b = Array1::zeros(d);
        for (j, v) in support {
            b[*j] = *v;
        }
        let noise: Array1<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut r); sigma * z }).collect();
        let y = x.dot(&b) + noise;
        (x, y)
    }

    #[test]
    fn defaults() {
        assert!((default_sparse_rho(1.0) - 0.9 * 0.704).abs() < 1e-12);
        assert_eq!(default_s_prime(4, 1.0, 200), 17);
        assert_eq!(default_s_prime(4, 1.0, 10), 10);
    }

    #[test]
    fn branch_follows_inequality() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let none = meta_decision(0, 1000, 1000, 4, 200, b, 0.05, 1.0).unwrap();
        assert_eq!(none.lhs, 0.0);
        assert_eq!(none.branch, Branch::Aggregate);
        let many = meta_decision(20, 21 * 1000, 1000, 4, 400, b, 0.05, 1.0).unwrap();
        assert_eq!(many.branch == Branch::Aggregate, many.lhs <= many.rhs);
    }

    #[test]
    fn sparsity_holds_every_round() {
        let (x, y) = data(8000, 50, &[(3, 1.0), (7, -0.5)], 1.0, 0);
        let cfg = SparseRegConfig::new(8, 6, 1.0, 0.05, PrivacyBudget::new(1.0, 1e-5).unwrap()).unwrap();
        let (beta, trace) = dp_sparse_single(x.view(), y.view(), &cfg, &SeedTree::new(2)).unwrap();
        assert!(l0_norm(beta.view()) <= 6);
        for r in &trace.rounds {
            assert!(r.beta.iter().filter(|v| **v != 0.0).count() <= 6);
        }
    }

    #[test]
    fn meta_pipeline_audits_clean() {
        let sites: Vec<SiteDataset> = (0..3u32)
            .map(|k| {
                let (x, y) = data(3000, 40, &[(0, 1.0), (5, 1.0)], 1.0, 10 + u64::from(k));
                SiteDataset::new(k, Payload::Regression { x, y }).unwrap()
            })
            .collect();
        let b = PrivacyBudget::new(2.0, 1e-5).unwrap();
        let cfg = SparseRegConfig::new(6, 4, 1.0, 0.05, b).unwrap();
        let rep = meta_sparse(&sites, &cfg, 3.0, &SeedTree::new(5)).unwrap();
        let v = audit_ledger(&rep.transcript, b);
        assert!(v.ok, "{:?}", v.violations);
        assert!(rep.iterates.iter().all(|it| it.iter().filter(|v| **v != 0.0).count() <= 4));
    }
}
