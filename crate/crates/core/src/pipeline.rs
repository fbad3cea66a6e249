//! Uniform entry points over the three estimator families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Phase, SiteDataset};
use crate::highdim::{meta_sparse, sparse_detection_estimates, target_only_sparse, SparseRegConfig};
use crate::lowdim::{fed_linreg, linreg_detection_estimates, target_only_linreg, RegressionConfig};
use crate::mean::{fed_mean_pipeline, kv_private_mean, MeanConfig};
use crate::mechanisms::{NoiseMode, PrivacyBudget};
use crate::rates::{rate_highdim, rate_lowdim, rate_mean};
use crate::report::{EstimatorReport, FirstStage};
use crate::seed::SeedTree;
use crate::synth::Family;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EstimatorConfig {
    Mean(MeanConfig),
    Lowdim(RegressionConfig),
    Highdim(SparseRegConfig),
}

impl EstimatorConfig {
    pub fn family(&self) -> Family {
        match self {
            EstimatorConfig::Mean(_) => Family::Mean,
            EstimatorConfig::Lowdim(_) => Family::Lowdim,
            EstimatorConfig::Highdim(_) => Family::Highdim,
        }
    }

    pub fn budget(&self) -> PrivacyBudget {
        match self {
            EstimatorConfig::Mean(c) => c.budget,
            EstimatorConfig::Lowdim(c) => c.budget,
            EstimatorConfig::Highdim(c) => c.budget,
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            EstimatorConfig::Mean(c) => c.eta,
            EstimatorConfig::Lowdim(c) => c.eta,
            EstimatorConfig::Highdim(c) => c.eta,
        }
    }

    pub fn with_mode(mut self, mode: NoiseMode) -> Self {
        match &mut self {
            EstimatorConfig::Mean(c) => c.mode = mode,
            EstimatorConfig::Lowdim(c) => c.mode = mode,
            EstimatorConfig::Highdim(c) => c.mode = mode,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EstimatorConfig::Mean(c) => c.validate(),
            EstimatorConfig::Lowdim(c) => c.validate(),
            EstimatorConfig::Highdim(c) => c.validate(),
        }
    }

    /// Detection radius `r` for a target of size `n0` in dimension `d`.
    pub fn radius(&self, n0: usize, d: usize) -> Result<f64> {
        let b = self.budget();
        match self {
            EstimatorConfig::Mean(c) => rate_mean(n0, c.eta, b.epsilon),
            EstimatorConfig::Lowdim(c) => rate_lowdim(n0, d, b.epsilon, b.delta, c.eta),
            EstimatorConfig::Highdim(c) => rate_highdim(n0, c.s_prime, d, b.epsilon, b.delta, c.eta),
        }
    }

    pub fn first_stage(&self, sites: &[SiteDataset], seeds: &SeedTree) -> Result<FirstStage> {
        match self {
            EstimatorConfig::Mean(c) => {
                let r = fed_mean_pipeline(sites, c, 1.0, seeds)?;
                Ok(FirstStage {
                    target_estimate: r.target_estimate,
                    source_estimates: r.source_estimates,
                    radius: r.radius,
                    transcript: r.transcript,
                })
            }
            EstimatorConfig::Lowdim(c) => linreg_detection_estimates(sites, c, seeds),
            EstimatorConfig::Highdim(c) => sparse_detection_estimates(sites, c, seeds),
        }
    }

    pub fn federated(&self, sites: &[SiteDataset], tilde_c: f64, seeds: &SeedTree) -> Result<EstimatorReport> {
        match self {
            EstimatorConfig::Mean(c) => fed_mean_pipeline(sites, c, tilde_c, seeds),
            EstimatorConfig::Lowdim(c) => fed_linreg(sites, c, tilde_c, seeds),
            EstimatorConfig::Highdim(c) => meta_sparse(sites, c, tilde_c, seeds),
        }
    }

    /// Baseline on the target alone, using the same data and streams the
    /// target uses in the federated run.
    pub fn target_only(&self, sites: &[SiteDataset], seeds: &SeedTree) -> Result<Vec<f64>> {
        match self {
            EstimatorConfig::Mean(c) => {
                let target = sites
                    .iter()
                    .find(|s| s.site_id() == 0)
                    .ok_or_else(|| Error::param("site 0 (the target) is missing"))?
                    .partitioned(1, false)?;
                let stream = seeds.site(0).child(Phase::Mean.as_str());
                let r = target.with_scalars(|x| kv_private_mean(x, c.budget, c.eta, c.mode, &stream))?;
                Ok(vec![r.estimate])
            }
            EstimatorConfig::Lowdim(c) => target_only_linreg(sites, c, seeds).map(|b| b.to_vec()),
            EstimatorConfig::Highdim(c) => target_only_sparse(sites, c, seeds).map(|b| b.to_vec()),
        }
    }
}
