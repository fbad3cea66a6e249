//! Private linear regression by noisy clipped gradient descent with an
//! adaptive residual clip, on one site and federated across sites.

use std::collections::BTreeSet;
use std::ops::Range;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::detection::{detect_informative, DetectionInput, SiteId};
use crate::error::{Error, Result};
use crate::federation::{hash_values, run_protocol, Phase, RoundRecord, SiteDataset, SiteMessage, SiteView};
use crate::mechanisms::{
    clip_scalar, gaussian_noise_std, gaussian_vector, l2_clip_factor, linf_clip_factor, private_variance,
    MechanismRecord, NoiseMode, PrivacyBudget, Stage,
};
use crate::rates::rate_lowdim;
use crate::report::{EstimatorReport, FirstStage};
use crate::seed::{label, SeedTree};

/// `ceil(c · ln n)`, at least 1.
pub fn default_rounds(n: usize, c: f64) -> usize {
    ((c * (n.max(1) as f64).ln()).ceil() as usize).max(1)
}

/// `18L / (1 + 81L²)`.
pub fn default_rho(l: f64) -> f64 {
    18.0 * l / (1.0 + 81.0 * l * l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub rounds: usize,
    pub rho: f64,
    pub l: f64,
    pub eta: f64,
    pub budget: PrivacyBudget,
    /// Initial iterate; zero when absent.
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl RegressionConfig {
    pub fn new(rounds: usize, l: f64, eta: f64, budget: PrivacyBudget) -> Result<Self> {
        let c = RegressionConfig {
            rounds,
            rho: default_rho(l),
            l,
            eta,
            budget,
            beta0: None,
            mode: NoiseMode::Calibrated,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.rounds == 0 {
            return Err(Error::param("T must be at least 1"));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::param(format!("step size must be >= 0, got {}", self.rho)));
        }
        if !(self.l >= 1.0) {
            return Err(Error::param(format!("L must be >= 1, got {}", self.l)));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::param(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if self.budget.delta == 0.0 {
            return Err(Error::Unsupported("regression needs delta > 0".into()));
        }
        Ok(())
    }

    pub(crate) fn initial(&self, d: usize) -> Result<Array1<f64>> {
        match &self.beta0 {
            None => Ok(Array1::zeros(d)),
            Some(b) if b.len() == d => Ok(Array1::from(b.clone())),
            Some(b) => Err(Error::param(format!("beta0 has dimension {}, data has {d}", b.len()))),
        }
    }
}

/// Diagnostics of one gradient round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdRound {
    pub t: usize,
    pub block: Range<usize>,
    pub clip: f64,
    pub residual_clip: f64,
    pub grad_norm: f64,
    pub noise_std: f64,
    pub beta: Vec<f64>,
    pub records: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GdTrace {
    pub rounds: Vec<GdRound>,
}

impl GdTrace {
    /// All mechanism records, shifted to global indices.
    pub fn records(&self, offset: usize) -> Vec<RoundRecord> {
        self.rounds
            .iter()
            .flat_map(|r| r.records.iter().cloned().map(move |x| x.shifted(offset)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Projection {
    L2,
    Linf,
}

/// `(1/b) Σ Π_R(x_i) · clip(x_iᵀβ − y_i, R_t)`.
pub(crate) fn clipped_gradient(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    beta: &Array1<f64>,
    clip: f64,
    residual_clip: f64,
    projection: Projection,
) -> Array1<f64> {
    let mut g = Array1::zeros(x.ncols());
    for (row, yi) in x.rows().into_iter().zip(y.iter()) {
        let r = clip_scalar(row.dot(beta) - yi, residual_clip);
        let f = match projection {
            Projection::L2 => l2_clip_factor(row, clip),
            Projection::Linf => linf_clip_factor(row, clip),
        };
        g.scaled_add(f * r, &row);
    }
    g / y.len() as f64
}

/// Private residual scale of a batch at `beta`, on budget `half`.
pub(crate) fn residual_scale(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    beta: &Array1<f64>,
    half: PrivacyBudget,
    mode: NoiseMode,
    seeds: &SeedTree,
    t: usize,
) -> Result<(f64, RoundRecord)> {
    let b = y.len();
    let even = b / 2 * 2;
    if even < 2 {
        return Err(Error::param(format!("batch of {b} samples is too small for scale estimation")));
    }
    let residuals: Vec<f64> = x
        .rows()
        .into_iter()
        .zip(y.iter())
        .take(even)
        .map(|(row, yi)| yi - row.dot(beta))
        .collect();
    let stream = seeds.child(label::PRIVATE_VARIANCE);
    let scale = match private_variance(&residuals, half, mode, &mut stream.rng()) {
        // Noise off and every pair difference exactly zero: the exact scale is zero.
        Err(Error::InsufficientScaleData { .. })
            if mode.is_off() && residuals.chunks_exact(2).all(|p| p[0] == p[1]) =>
        {
            0.0
        }
        other => other?,
    };
    let pairs = (even / 2) as f64;
    let sensitivity = 2.0 / pairs;
    let record = RoundRecord {
        t,
        record: MechanismRecord {
            stage: Stage::PrivateVariance,
            budget: half,
            sensitivity,
            noise_std: if mode.is_off() { 0.0 } else { std::f64::consts::SQRT_2 * sensitivity / half.epsilon },
            sparsity: 0,
        },
        block: 0..even,
        stream_id: stream.stream_id(),
        output_hash: hash_values(&[scale]),
    };
    Ok((scale, record))
}

/// Site-local part of one round: clipped batch gradient plus Gaussian noise.
pub(crate) struct NoisyGradient {
    pub value: Array1<f64>,
    pub residual_clip: f64,
    pub grad_norm: f64,
    pub noise_std: f64,
    pub records: Vec<RoundRecord>,
}

/// Residual clip `R_t = log_factor · PrivateVariance`, then the Gaussian
/// mechanism with sensitivity `2 R R_t / b`, each on half the budget.
#[allow(clippy::too_many_arguments)]
pub(crate) fn noisy_gradient(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    beta: &Array1<f64>,
    clip: f64,
    log_factor: f64,
    budget: PrivacyBudget,
    mode: NoiseMode,
    seeds: &SeedTree,
    t: usize,
) -> Result<NoisyGradient> {
    let half = budget.halve();
    let b = y.len();
    let (scale, pv_record) = residual_scale(x, y, beta, half, mode, seeds, t)?;
    let residual_clip = log_factor * scale;
    let grad = clipped_gradient(x, y, beta, clip, residual_clip, Projection::L2);
    let sensitivity = 2.0 * clip * residual_clip / b as f64;
    let phi = if mode.is_off() && sensitivity == 0.0 { 0.0 } else { gaussian_noise_std(sensitivity, half)? };
    let stream = seeds.child(label::GAUSSIAN);
    let w = gaussian_vector(&mut stream.rng(), beta.len(), phi, mode);
    let value = &grad + &w;
    let gauss_record = RoundRecord {
        t,
        record: MechanismRecord {
            stage: Stage::Gaussian,
            budget: half,
            sensitivity,
            noise_std: if mode.is_off() { 0.0 } else { phi },
            sparsity: 0,
        },
        block: 0..b,
        stream_id: stream.stream_id(),
        output_hash: hash_values(value.as_slice().expect("contiguous")),
    };
    Ok(NoisyGradient {
        value,
        residual_clip,
        grad_norm: grad.dot(&grad).sqrt(),
        noise_std: phi,
        records: vec![pv_record, gauss_record],
    })
}

pub(crate) fn check_finite(beta: &Array1<f64>, t: usize) -> Result<()> {
    if beta.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            round: t,
            detail: "iterate has non-finite entries".into(),
        })
    }
}

pub(crate) fn check_data(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, rounds: usize) -> Result<(usize, usize)> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::param(format!("X has {n} rows but y has {} entries", y.len())));
    }
    if d == 0 {
        return Err(Error::param("dimension must be at least 1"));
    }
    let b = n / rounds;
    if b < 2 {
        return Err(Error::param(format!("n = {n} gives batches of {b} < 2 samples for T = {rounds}")));
    }
    Ok((n, b))
}

/// Single-site private regression.
///
/// Uses `T` disjoint consecutive batches of `b = ⌊n/T⌋` samples, covariate
/// clip `R = sqrt(d log(n/η))` and residual clip
/// `R_t = sqrt(log(n/η)) · PrivateVariance(batch residuals)`.
pub fn dp_linreg_single(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    cfg: &RegressionConfig,
    seeds: &SeedTree,
) -> Result<(Array1<f64>, GdTrace)> {
    cfg.validate()?;
    let (n, b) = check_data(x, y, cfg.rounds)?;
    let d = x.ncols();
    let log_n = (n as f64 / cfg.eta).ln();
    let clip = (d as f64 * log_n).sqrt();
    let log_factor = log_n.sqrt();
    let mut beta = cfg.initial(d)?;
    let mut trace = GdTrace::default();
    for t in 0..cfg.rounds {
        let block = t * b..(t + 1) * b;
        let xb = x.slice(ndarray::s![block.clone(), ..]);
        let yb = y.slice(ndarray::s![block.clone()]);
        let step = noisy_gradient(xb, yb, &beta, clip, log_factor, cfg.budget, cfg.mode, &seeds.round(t), t)
            .map_err(|e| e.in_round(t))?;
        beta = &beta - &(cfg.rho * &step.value);
        check_finite(&beta, t)?;
        trace.rounds.push(GdRound {
            t,
            block: block.clone(),
            clip,
            residual_clip: step.residual_clip,
            grad_norm: step.grad_norm,
            noise_std: step.noise_std,
            beta: beta.to_vec(),
            records: step
                .records
                .into_iter()
                .map(|r| r.shifted(block.start))
                .collect(),
        });
    }
    Ok((beta, trace))
}

/// Partition every site into a detection block and `T` round blocks.
pub(crate) fn split_sites(sites: &[SiteDataset], rounds: usize) -> Result<Vec<SiteDataset>> {
    let mut out = Vec::with_capacity(sites.len());
    for s in sites {
        match s.partitioned(rounds, true) {
            Ok(p) => out.push(p),
            Err(e) => {
                return Err(Error::AggregationInfeasible(format!(
                    "site {} (n = {}) cannot be split for T = {rounds}: {e}",
                    s.site_id(),
                    s.n()
                )))
            }
        }
    }
    if !out.iter().any(|s| s.site_id() == 0) {
        return Err(Error::param("site 0 (the target) is missing"));
    }
    if out.iter().any(|s| s.is_scalar()) {
        return Err(Error::param("regression pipelines need covariate/response data"));
    }
    let d = out[0].dim();
    if out.iter().any(|s| s.dim() != d) {
        return Err(Error::param("all sites must share the covariate dimension"));
    }
    Ok(out)
}

pub(crate) fn iteration_size(site: &SiteDataset) -> usize {
    site.iteration_size()
}

/// Stage one of the federated pipelines: each site runs `local` on its
/// detection block and releases the result.
pub(crate) fn detection_stage<F>(
    sites: &[SiteDataset],
    budget: PrivacyBudget,
    seeds: &SeedTree,
    local: F,
) -> Result<(Vec<(SiteId, Vec<f64>)>, crate::federation::Transcript)>
where
    F: Fn(ArrayView2<'_, f64>, ArrayView1<'_, f64>, &SeedTree) -> Result<(Array1<f64>, GdTrace)> + Sync,
{
    let mut released = Vec::new();
    let ((), transcript) = run_protocol(
        sites,
        Phase::Detect,
        1,
        budget,
        (),
        |view: &SiteView<'_>, _| {
            let (x, y) = view.regression()?;
            let stream = seeds.site(view.site_id()).child(label::DETECT);
            let (beta, trace) = local(x, y, &stream)?;
            Ok(SiteMessage {
                payload: beta.to_vec(),
                records: trace.records(view.block().start),
            })
        },
        |_, msgs, _| {
            released = msgs.to_vec();
            Ok(())
        },
    )?;
    Ok((released, transcript))
}

pub(crate) fn split_target(released: Vec<(SiteId, Vec<f64>)>) -> (Vec<f64>, Vec<(SiteId, Vec<f64>)>) {
    let mut target = Vec::new();
    let mut sources = Vec::new();
    for (k, v) in released {
        if k == 0 {
            target = v;
        } else {
            sources.push((k, v));
        }
    }
    (target, sources)
}

fn linreg_first_stage(parts: &[SiteDataset], cfg: &RegressionConfig, seeds: &SeedTree) -> Result<FirstStage> {
    let n0 = parts.iter().find(|s| s.site_id() == 0).map(|s| s.n()).expect("target present");
    let (released, transcript) =
        detection_stage(parts, cfg.budget, seeds, |x, y, s| dp_linreg_single(x, y, cfg, s))?;
    let (target_estimate, source_estimates) = split_target(released);
    Ok(FirstStage {
        target_estimate,
        source_estimates,
        radius: rate_lowdim(n0, parts[0].dim(), cfg.budget.epsilon, cfg.budget.delta, cfg.eta)?,
        transcript,
    })
}

/// Detection-block estimates of every site and the radius `r`, exactly as
/// computed inside [`fed_linreg`].
pub fn linreg_detection_estimates(sites: &[SiteDataset], cfg: &RegressionConfig, seeds: &SeedTree) -> Result<FirstStage> {
    cfg.validate()?;
    linreg_first_stage(&split_sites(sites, cfg.rounds)?, cfg, seeds)
}

/// Federated rounds over the iteration blocks of `{0} ∪ subset`.
///
/// Site `k` releases `Z_k^t = (n_k/N)(g_k + φ_t^(k) w)`, and the aggregator
/// applies `β ← post(β − ρ Σ_k Z_k^t)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn federated_rounds<P>(
    sites: &[SiteDataset],
    subset: &BTreeSet<SiteId>,
    cfg: &RegressionConfig,
    clip: f64,
    log_factor: f64,
    seeds: &SeedTree,
    post: P,
) -> Result<(Array1<f64>, Vec<Vec<f64>>, crate::federation::Transcript)>
where
    P: Fn(Array1<f64>) -> Array1<f64>,
{
    let participants: Vec<SiteDataset> = sites
        .iter()
        .filter(|s| s.site_id() == 0 || subset.contains(&s.site_id()))
        .cloned()
        .collect();
    let total: usize = participants.iter().map(iteration_size).sum();
    let d = participants[0].dim();
    let beta0 = cfg.initial(d)?;
    let mut iterates = Vec::with_capacity(cfg.rounds);
    let (beta, transcript) = run_protocol(
        &participants,
        Phase::Iterate,
        cfg.rounds,
        cfg.budget,
        beta0,
        |view: &SiteView<'_>, beta: &Array1<f64>| {
            let (x, y) = view.regression()?;
            let site = participants
                .iter()
                .find(|s| s.site_id() == view.site_id())
                .expect("view belongs to a participant");
            let weight = iteration_size(site) as f64 / total as f64;
            let t = view.round();
            let stream = seeds.site(view.site_id()).child(label::ITERATE).round(t);
            let step = noisy_gradient(x, y, beta, clip, log_factor, cfg.budget, cfg.mode, &stream, t)?;
            Ok(SiteMessage {
                payload: (weight * &step.value).to_vec(),
                records: step.records.into_iter().map(|r| r.shifted(view.block().start)).collect(),
            })
        },
        |t, msgs, beta: &Array1<f64>| {
            let mut sum = Array1::<f64>::zeros(beta.len());
            for (_, z) in msgs {
                sum += &ArrayView1::from(z.as_slice());
            }
            let next = post(beta - &(cfg.rho * &sum));
            check_finite(&next, t)?;
            iterates.push(next.to_vec());
            Ok(next)
        },
    )?;
    Ok((beta, iterates, transcript))
}

/// Federated private regression with informative-source detection.
///
/// Stage one runs [`dp_linreg_single`] on every site's detection block and
/// selects `Â` with radius `r(n_0, d, ε, δ, η)`; stage two runs `T` federated
/// gradient rounds over `{0} ∪ Â` on the iteration blocks.
pub fn fed_linreg(
    sites: &[SiteDataset],
    cfg: &RegressionConfig,
    tilde_c: f64,
    seeds: &SeedTree,
) -> Result<EstimatorReport> {
    cfg.validate()?;
    let parts = split_sites(sites, cfg.rounds)?;
    let d = parts[0].dim();
    let FirstStage {
        target_estimate,
        source_estimates,
        radius,
        mut transcript,
    } = linreg_first_stage(&parts, cfg, seeds)?;
    let selected = detect_informative(&DetectionInput {
        target_estimate: target_estimate.clone(),
        source_estimates: source_estimates.clone(),
        threshold_radius: radius,
        tilde_c,
    })?;

    let total: usize = parts
        .iter()
        .filter(|s| s.site_id() == 0 || selected.contains(&s.site_id()))
        .map(iteration_size)
        .sum();
    let log_n = (total as f64 / cfg.eta).ln();
    let clip = (d as f64 * log_n).sqrt();
    let (beta, iterates, stage_two) = federated_rounds(&parts, &selected, cfg, clip, log_n.sqrt(), seeds, |b| b)?;
    transcript.append(stage_two);
    Ok(EstimatorReport {
        estimate: beta.to_vec(),
        target_estimate,
        source_estimates,
        selected,
        radius,
        threshold: tilde_c * radius,
        decision: None,
        iterates,
        transcript,
        seed_stream: seeds.stream_id(),
    })
}

/// Baseline using the target alone: [`dp_linreg_single`] on the target's
/// iteration block, with the seeds the federated run gives the target.
pub fn target_only_linreg(sites: &[SiteDataset], cfg: &RegressionConfig, seeds: &SeedTree) -> Result<Array1<f64>> {
    let target = sites
        .iter()
        .find(|s| s.site_id() == 0)
        .ok_or_else(|| Error::param("site 0 (the target) is missing"))?
        .partitioned(cfg.rounds, true)?;
    let (beta, _) =
        target.with_iteration_data(|x, y| dp_linreg_single(x, y, cfg, &seeds.site(0).child(label::ITERATE)))?;
    Ok(beta)
}
