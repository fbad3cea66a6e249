//! Private univariate mean estimation and its federated, sample-size weighted version.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detection::{detect_informative, DetectionInput, SiteId};
use crate::error::{Error, Result};
use crate::federation::{hash_values, run_protocol, Phase, RoundRecord, SiteDataset, SiteMessage};
use crate::mechanisms::{laplace_sample, stable_histogram_argmax, MechanismRecord, NoiseMode, PrivacyBudget, Stage};
use crate::rates::rate_mean;
use crate::report::EstimatorReport;
use crate::seed::{label, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanConfig {
    pub budget: PrivacyBudget,
    pub eta: f64,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl MeanConfig {
    pub fn new(budget: PrivacyBudget, eta: f64) -> Result<Self> {
        let c = MeanConfig {
            budget,
            eta,
            mode: NoiseMode::Calibrated,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::param(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateMeanResult {
    pub estimate: f64,
    pub trunc_low: f64,
    pub trunc_high: f64,
    pub budget_spent: PrivacyBudget,
    /// Mechanism records, blocks in indices local to the input.
    #[serde(skip)]
    pub records: Vec<RoundRecord>,
}

/// Half-width added on each side of the selected unit bin.
fn range_margin(n: usize, eta: f64) -> f64 {
    4.0 * ((n as f64) / eta).ln().sqrt()
}

/// Private truncation interval for unit-variance data: a stable histogram over
/// unit bins `(j − ½, j + ½]` picks `ĵ`, then the interval is widened by
/// `4 sqrt(log(n/η))` on each side.
fn private_range(
    data: &[f64],
    budget: PrivacyBudget,
    eta: f64,
    mode: NoiseMode,
    seeds: &SeedTree,
) -> Result<(f64, f64, RoundRecord)> {
    let n = data.len();
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &x in data {
        if !x.is_finite() {
            return Err(Error::param("private mean received a non-finite sample"));
        }
        let j = (x - 0.5).ceil().clamp(-1e15, 1e15) as i64;
        *counts.entry(j).or_default() += 1;
    }
    let stream = seeds.child(label::PRIVATE_RANGE);
    let j = stable_histogram_argmax(&counts, n, budget, mode, &mut stream.rng())?
        .ok_or(Error::InsufficientRange { n })?;
    let margin = range_margin(n, eta);
    let (lo, hi) = (j as f64 - 0.5 - margin, j as f64 + 0.5 + margin);
    let sensitivity = 2.0 / n as f64;
    let record = RoundRecord {
        t: 0,
        record: MechanismRecord {
            stage: Stage::PrivateRange,
            budget,
            sensitivity,
            noise_std: if mode.is_off() { 0.0 } else { std::f64::consts::SQRT_2 * sensitivity / budget.epsilon },
            sparsity: 0,
        },
        block: 0..n,
        stream_id: stream.stream_id(),
        output_hash: hash_values(&[lo, hi]),
    };
    Ok((lo, hi, record))
}

/// Noisy truncated mean `(1/n) Σ clamp(X_i, X_min, X_max) + 2(X_max − X_min)/(nε) Z`.
///
/// The interval uses `(ε/2, δ)` and the Laplace release `(ε/2, 0)`.
pub fn kv_private_mean(
    data: &[f64],
    budget: PrivacyBudget,
    eta: f64,
    mode: NoiseMode,
    seeds: &SeedTree,
) -> Result<PrivateMeanResult> {
    budget.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::param(format!("private mean needs n >= 2, got {n}")));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::param(format!("eta must lie in (0, 1), got {eta}")));
    }
    if budget.delta == 0.0 {
        return Err(Error::Unsupported("the private range needs delta > 0".into()));
    }
    let range_budget = PrivacyBudget {
        epsilon: budget.epsilon / 2.0,
        delta: budget.delta,
    };
    let release_budget = PrivacyBudget {
        epsilon: budget.epsilon / 2.0,
        delta: 0.0,
    };
    let (lo, hi, range_record) = private_range(data, range_budget, eta, mode, seeds)?;

    let nf = n as f64;
    let clamped = data.iter().map(|x| x.clamp(lo, hi)).sum::<f64>() / nf;
    let scale = 2.0 * (hi - lo) / (nf * budget.epsilon);
    let stream = seeds.child(label::LAPLACE);
    let estimate = clamped + laplace_sample(&mut stream.rng(), scale, mode)?;
    let release_record = RoundRecord {
        t: 0,
        record: MechanismRecord {
            stage: Stage::Laplace,
            budget: release_budget,
            sensitivity: (hi - lo) / nf,
            noise_std: if mode.is_off() { 0.0 } else { std::f64::consts::SQRT_2 * scale },
            sparsity: 0,
        },
        block: 0..n,
        stream_id: stream.stream_id(),
        output_hash: hash_values(&[estimate]),
    };
    Ok(PrivateMeanResult {
        estimate,
        trunc_low: lo,
        trunc_high: hi,
        budget_spent: budget,
        records: vec![range_record, release_record],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedMeanReport {
    pub estimate: f64,
    pub selected: BTreeSet<SiteId>,
    /// Target first, then the sources in the given order.
    pub per_site: Vec<PrivateMeanResult>,
    pub radius: f64,
}

/// `μ̃ = Σ_{k ∈ {0} ∪ Â} n_k μ̂^(k) / (n_0 + n_Â)` with
/// `Â = {k : |μ̂^(k) − μ̂^(0)| ≤ c̃ f(n_0, η, ε)}`.
pub fn fed_mean(
    per_site: &[(SiteId, usize, PrivateMeanResult)],
    target: (usize, PrivateMeanResult),
    eta: f64,
    epsilon: f64,
    tilde_c: f64,
) -> Result<FedMeanReport> {
    let (n0, target_result) = target;
    for (k, _, r) in per_site {
        if r.budget_spent != target_result.budget_spent {
            return Err(Error::param(format!("site {k} used a different privacy budget than the target")));
        }
    }
    let radius = rate_mean(n0, eta, epsilon)?;
    let selected = detect_informative(&DetectionInput {
        target_estimate: vec![target_result.estimate],
        source_estimates: per_site.iter().map(|(k, _, r)| (*k, vec![r.estimate])).collect(),
        threshold_radius: radius,
        tilde_c,
    })?;
    let mut num = n0 as f64 * target_result.estimate;
    let mut den = n0 as f64;
    for (k, nk, r) in per_site {
        if selected.contains(k) {
            num += *nk as f64 * r.estimate;
            den += *nk as f64;
        }
    }
    let mut all = vec![target_result];
    all.extend(per_site.iter().map(|(_, _, r)| r.clone()));
    Ok(FedMeanReport {
        estimate: num / den,
        selected,
        per_site: all,
        radius,
    })
}

/// Full non-interactive pipeline: one private mean per site, then detection
/// and weighting at the aggregator. Site 0 is the target.
pub fn fed_mean_pipeline(
    sites: &[SiteDataset],
    cfg: &MeanConfig,
    tilde_c: f64,
    seeds: &SeedTree,
) -> Result<EstimatorReport> {
    cfg.validate()?;
    if !sites.iter().any(|s| s.site_id() == 0) {
        return Err(Error::param("site 0 (the target) is missing"));
    }
    let parts = sites.iter().map(|s| s.partitioned(1, false)).collect::<Result<Vec<_>>>()?;
    let round_fn = |view: &crate::federation::SiteView<'_>, _: &()| -> Result<SiteMessage> {
        let data = view.scalars()?;
        let stream = seeds.site(view.site_id()).child(Phase::Mean.as_str());
        let r = kv_private_mean(data, cfg.budget, cfg.eta, cfg.mode, &stream)?;
        let offset = view.block().start;
        Ok(SiteMessage {
            payload: vec![r.estimate, r.trunc_low, r.trunc_high, data.len() as f64],
            records: r.records.into_iter().map(|x| x.shifted(offset)).collect(),
        })
    };
    let mut released: Vec<(SiteId, Vec<f64>)> = Vec::new();
    let ((), transcript) = run_protocol(&parts, Phase::Mean, 1, cfg.budget, (), round_fn, |_, msgs, _| {
        released = msgs.to_vec();
        Ok(())
    })?;

    let to_result = |p: &[f64]| PrivateMeanResult {
        estimate: p[0],
        trunc_low: p[1],
        trunc_high: p[2],
        budget_spent: cfg.budget,
        records: Vec::new(),
    };
    let mut target = None;
    let mut sources = Vec::new();
    for (k, p) in &released {
        if *k == 0 {
            target = Some((p[3] as usize, to_result(p)));
        } else {
            sources.push((*k, p[3] as usize, to_result(p)));
        }
    }
    let target = target.expect("target site participates");
    let target_estimate = vec![target.1.estimate];
    let report = fed_mean(&sources, target, cfg.eta, cfg.budget.epsilon, tilde_c)?;
    Ok(EstimatorReport {
        estimate: vec![report.estimate],
        target_estimate,
        source_estimates: sources.iter().map(|(k, _, r)| (*k, vec![r.estimate])).collect(),
        selected: report.selected,
        radius: report.radius,
        threshold: tilde_c * report.radius,
        decision: None,
        iterates: Vec::new(),
        transcript,
        seed_stream: seeds.stream_id(),
    })
}
