//! Pilot Monte Carlo choice of the detection multiplier `c̃`.
//!
//! Pilot instances have `h = 0` and outliers placed at `separation_factor · r`.
//! Each replication runs only the first stage; every grid value of `c̃` is then
//! scored on the same released estimates.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{detect_informative, l2_distance, DetectionInput, SiteId};
use crate::error::{Error, Result};
use crate::pipeline::EstimatorConfig;
use crate::report::FirstStage;
use crate::seed::{label, SeedTree};
use crate::synth::{generate, GroundTruth, ProblemSpec};

/// Returned when there are no sources to select.
pub const DEFAULT_TILDE_C: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub n_target: usize,
    pub n_source: usize,
    pub k: usize,
    pub outliers: usize,
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default = "one")]
    pub s: usize,
    #[serde(default = "ten")]
    pub separation_factor: f64,
    #[serde(default = "hundred")]
    pub replications: usize,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "required")]
    pub required: f64,
}

fn one() -> usize {
    1
}
fn ten() -> f64 {
    10.0
}
fn hundred() -> usize {
    100
}
fn required() -> f64 {
    0.95
}

/// 25 points, geometric from 0.5 to 50.
pub fn default_grid() -> Vec<f64> {
    (0..25).map(|i| 0.5 * 100f64.powf(i as f64 / 24.0)).collect()
}

impl PilotConfig {
    pub fn new(n_target: usize, n_source: usize, k: usize, outliers: usize, d: usize, s: usize) -> Self {
        PilotConfig {
            n_target,
            n_source,
            k,
            outliers,
            d,
            s,
            separation_factor: ten(),
            replications: hundred(),
            grid: default_grid(),
            required: required(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tilde_c: f64,
    pub radius: f64,
    /// Empirical 95th percentile of `‖θ̂^(k) − θ^(k)‖₂ / r` over all pilot sites.
    pub c1: f64,
    /// `(c̃, P̂(Â = A))` for each grid value.
    pub recovery: Vec<(f64, f64)>,
    /// Pilot replications whose first stage returned an error.
    pub failed_runs: usize,
}

/// Outcome of detection on one instance against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCheck {
    pub selected: BTreeSet<SiteId>,
    pub recovered: bool,
    /// Every selected source lies within `bound` of the target truth.
    pub safe: bool,
}

/// Scores detection with multiplier `tilde_c`; `safety_bound` is an absolute distance.
pub fn check_detection(first: &FirstStage, truth: &GroundTruth, tilde_c: f64, safety_bound: f64) -> Result<DetectionCheck> {
    let selected = detect_informative(&DetectionInput {
        target_estimate: first.target_estimate.clone(),
        source_estimates: first.source_estimates.clone(),
        threshold_radius: first.radius,
        tilde_c,
    })?;
    let safe = selected
        .iter()
        .all(|k| truth.contrast(*k).is_some_and(|c| c <= safety_bound));
    Ok(DetectionCheck {
        recovered: selected == truth.informative,
        selected,
        safe,
    })
}

/// Errors `‖θ̂^(k) − θ^(k)‖₂` of every released estimate, target first.
pub fn estimate_errors(first: &FirstStage, truth: &GroundTruth) -> Vec<f64> {
    let mut out = vec![l2_distance(&first.target_estimate, &truth.target)];
    for (k, est) in &first.source_estimates {
        if let Some(p) = truth.param(*k) {
            out.push(l2_distance(est, p));
        }
    }
    out
}

/// Empirical `q`-quantile (nearest rank) of finite values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Pilot instance for calibration and for detection experiments.
pub fn pilot_spec(estimator: &EstimatorConfig, pilot: &PilotConfig) -> Result<ProblemSpec> {
    let d = if estimator.family() == crate::synth::Family::Mean { 1 } else { pilot.d };
    let radius = estimator.radius(pilot.n_target, d)?;
    ProblemSpec::new(
        estimator.family(),
        pilot.n_target,
        pilot.n_source,
        pilot.k,
        pilot.outliers,
        0.0,
        pilot.separation_factor * radius,
        d,
        pilot.s,
    )
}

/// Chooses `c̃` so that the pilot recovery rate is at least `pilot.required`.
///
/// Among grid values within 0.01 of the best recovery rate (and above the
/// requirement) the geometric middle of the longest contiguous run is returned.
pub fn calibrate_tilde_c(estimator: &EstimatorConfig, pilot: &PilotConfig, seeds: &SeedTree) -> Result<Calibration> {
    estimator.validate()?;
    if pilot.grid.is_empty() || pilot.grid.iter().any(|c| !(*c > 0.0)) || pilot.grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("calibration grid must be positive and increasing"));
    }
    if pilot.replications == 0 {
        return Err(Error::param("calibration needs at least one pilot replication"));
    }
    let spec = pilot_spec(estimator, pilot)?;
    let radius = estimator.radius(pilot.n_target, spec.d)?;
    if pilot.k == 0 {
        return Ok(Calibration {
            tilde_c: DEFAULT_TILDE_C,
            radius,
            c1: f64::NAN,
            recovery: Vec::new(),
            failed_runs: 0,
        });
    }

    let root = seeds.child(label::CALIBRATION);
    let runs: Vec<Option<(Vec<bool>, Vec<f64>)>> = (0..pilot.replications)
        .into_par_iter()
        .map(|rep| -> Result<Option<(Vec<bool>, Vec<f64>)>> {
            let s = root.index(rep as u64);
            let inst = generate(&spec, &s)?;
            let first = match estimator.first_stage(&inst.sites()?, &s) {
                Ok(f) => f,
                Err(Error::InvalidParameter(m)) => return Err(Error::InvalidParameter(m)),
                Err(_) => return Ok(None),
            };
            let hits = pilot
                .grid
                .iter()
                .map(|c| check_detection(&first, &inst.truth, *c, f64::INFINITY).map(|d| d.recovered))
                .collect::<Result<Vec<_>>>()?;
            let errs = estimate_errors(&first, &inst.truth).into_iter().map(|e| e / radius).collect();
            Ok(Some((hits, errs)))
        })
        .collect::<Result<_>>()?;

    let failed_runs = runs.iter().filter(|r| r.is_none()).count();
    let reps = pilot.replications as f64;
    let recovery: Vec<(f64, f64)> = pilot
        .grid
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let hits = runs.iter().flatten().filter(|(h, _)| h[i]).count();
            (*c, hits as f64 / reps)
        })
        .collect();
    let errors: Vec<f64> = runs.iter().flatten().flat_map(|(_, e)| e.iter().copied()).collect();
    let c1 = quantile(&errors, 0.95);

    let best = recovery.iter().map(|(_, p)| *p).fold(0.0, f64::max);
    if best < pilot.required {
        return Err(Error::Calibration(format!(
            "best pilot recovery {best:.3} < {} over {} replications ({failed_runs} failed); c1 = {c1:.3}, grid {:.3}..{:.3}",
            pilot.required,
            pilot.replications,
            pilot.grid[0],
            pilot.grid[pilot.grid.len() - 1]
        )));
    }
    let floor = pilot.required.max(best - 0.01);
    let (mut run_start, mut run_len) = (0, 0);
    let mut i = 0;
    while i < recovery.len() {
        if recovery[i].1 >= floor {
            let j = (i..recovery.len()).take_while(|j| recovery[*j].1 >= floor).count();
            if j > run_len {
                run_start = i;
                run_len = j;
            }
            i += j;
        } else {
            i += 1;
        }
    }
    let lo = recovery[run_start].0;
    let hi = recovery[run_start + run_len - 1].0;
    Ok(Calibration {
        tilde_c: (lo * hi).sqrt(),
        radius,
        c1,
        recovery,
        failed_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mean::MeanConfig;
    use crate::mechanisms::PrivacyBudget;

    fn mean_cfg() -> EstimatorConfig {
        EstimatorConfig::Mean(MeanConfig::new(PrivacyBudget::new(1.0, 1e-5).unwrap(), 0.05).unwrap())
    }

    #[test]
    fn no_sources_defaults_to_three() {
        let pilot = PilotConfig::new(1000, 1000, 0, 0, 1, 1);
        assert_eq!(calibrate_tilde_c(&mean_cfg(), &pilot, &SeedTree::new(1)).unwrap().tilde_c, 3.0);
    }

    #[test]
    fn mean_pilot_with_outliers() {
        let mut pilot = PilotConfig::new(1000, 1000, 4, 2, 1, 1);
        pilot.replications = 100;
        let cal = calibrate_tilde_c(&mean_cfg(), &pilot, &SeedTree::new(11)).unwrap();
        assert!((1.0..=20.0).contains(&cal.tilde_c), "{cal:?}");
        let at = cal.recovery.iter().filter(|(c, _)| *c <= cal.tilde_c).last().unwrap();
        assert!(at.1 >= 0.95);
        assert_eq!(cal.failed_runs, 0);
    }

    #[test]
    fn deterministic() {
        let mut pilot = PilotConfig::new(1000, 1000, 3, 1, 1, 1);
        pilot.replications = 20;
        let a = calibrate_tilde_c(&mean_cfg(), &pilot, &SeedTree::new(2)).unwrap();
        let b = calibrate_tilde_c(&mean_cfg(), &pilot, &SeedTree::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_requirement_is_reported() {
        let mut pilot = PilotConfig::new(1000, 1000, 4, 2, 1, 1);
        pilot.replications = 10;
        pilot.grid = vec![1e-6, 2e-6];
        let err = calibrate_tilde_c(&mean_cfg(), &pilot, &SeedTree::new(2)).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
    }

    #[test]
    fn quantile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.95), 95.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert!(quantile(&[], 0.5).is_nan());
    }
}
