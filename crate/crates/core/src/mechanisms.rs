//! Differentially private primitives shared by every estimator.
//!
//! All samplers take an explicit generator and a [`NoiseMode`]. In
//! [`NoiseMode::Off`] the generator is still advanced exactly as in the
//! calibrated mode, but every noise draw is replaced by zero, so that a
//! noise-free run consumes the same random streams as a private one.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An (ε, δ) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::param(format!("delta must lie in [0, 1), got {delta}")));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    /// (ε/2, δ/2).
    pub fn halve(self) -> Self {
        PrivacyBudget {
            epsilon: self.epsilon / 2.0,
            delta: self.delta / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        PrivacyBudget::new(self.epsilon, self.delta).map(|_| ())
    }
}

/// Covariate clip `R` and residual clip `R_t` of one gradient round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipRadii {
    pub covariate: f64,
    pub residual: f64,
}

impl ClipRadii {
    pub fn new(covariate: f64, residual: f64) -> Result<Self> {
        if !(covariate > 0.0) || !(residual > 0.0) {
            return Err(Error::param(format!(
                "clip radii must be positive, got R = {covariate}, R_t = {residual}"
            )));
        }
        Ok(ClipRadii { covariate, residual })
    }
}

/// Whether mechanisms add their calibrated noise.
///
/// `Off` exists for oracle testing only. It zeroes every noise draw and
/// disables the stability threshold of the private histograms; transcripts
/// produced with it fail the ledger audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Calibrated,
    Off,
}

impl NoiseMode {
    pub fn is_off(self) -> bool {
        self == NoiseMode::Off
    }
}

/// Draw from the Laplace density `exp(-|x|/scale) / (2 scale)` by inverting its CDF.
pub fn laplace_sample<R: Rng + ?Sized>(rng: &mut R, scale: f64, mode: NoiseMode) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::param(format!("Laplace scale must be positive and finite, got {scale}")));
    }
    let u: f64 = rng.sample(Open01);
    if mode.is_off() {
        return Ok(0.0);
    }
    Ok(if u < 0.5 {
        scale * (2.0 * u).ln()
    } else {
        -scale * (2.0 * (1.0 - u)).ln()
    })
}

/// Vector of i.i.d. `N(0, std²)` draws.
pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64, mode: NoiseMode) -> Array1<f64> {
    let scale = if mode.is_off() { 0.0 } else { std };
    Array1::from_iter((0..dim).map(|_| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    }))
}

/// Noise standard deviation of the Gaussian mechanism: `sqrt(2 ln(1.25/δ)) Δ / ε`.
pub fn gaussian_noise_std(sensitivity: f64, budget: PrivacyBudget) -> Result<f64> {
    budget.validate()?;
    if !(sensitivity > 0.0) || !sensitivity.is_finite() {
        return Err(Error::param(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if budget.delta == 0.0 {
        return Err(Error::Unsupported("the Gaussian mechanism needs delta > 0".into()));
    }
    Ok((2.0 * (1.25 / budget.delta).ln()).sqrt() * sensitivity / budget.epsilon)
}

/// Factor `min{1, R/‖x‖₂}`.
pub fn l2_clip_factor(x: ArrayView1<'_, f64>, radius: f64) -> f64 {
    let norm = x.dot(&x).sqrt();
    if norm > radius {
        radius / norm
    } else {
        1.0
    }
}

/// Factor `min{1, R/‖x‖∞}`.
pub fn linf_clip_factor(x: ArrayView1<'_, f64>, radius: f64) -> f64 {
    let norm = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if norm > radius {
        radius / norm
    } else {
        1.0
    }
}

/// Projection onto the ℓ2 ball of radius `radius`: `x · min{1, R/‖x‖₂}`.
pub fn project_l2(x: ArrayView1<'_, f64>, radius: f64) -> Result<Array1<f64>> {
    check_radius(radius)?;
    Ok(&x * l2_clip_factor(x, radius))
}

/// Whole-vector rescale onto the ℓ∞ ball: `x · min{1, R/‖x‖∞}`.
///
/// This is not a per-coordinate clamp; the direction of `x` is preserved.
pub fn project_linf(x: ArrayView1<'_, f64>, radius: f64) -> Result<Array1<f64>> {
    check_radius(radius)?;
    Ok(&x * linf_clip_factor(x, radius))
}

/// One-dimensional projection, i.e. a clamp to `[-radius, radius]`.
pub fn clip_scalar(t: f64, radius: f64) -> f64 {
    t.clamp(-radius, radius)
}

fn check_radius(radius: f64) -> Result<()> {
    if radius > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("projection radius must be positive, got {radius}")))
    }
}

/// Mechanism kind recorded in transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PrivateRange,
    PrivateVariance,
    Laplace,
    Gaussian,
    Peeling,
    /// Post-processed release of an already private quantity; zero budget.
    Release,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PrivateRange => "private_range",
            Stage::PrivateVariance => "private_variance",
            Stage::Laplace => "laplace",
            Stage::Gaussian => "gaussian",
            Stage::Peeling => "peeling",
            Stage::Release => "release",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "private_range" => Stage::PrivateRange,
            "private_variance" => Stage::PrivateVariance,
            "laplace" => Stage::Laplace,
            "gaussian" => Stage::Gaussian,
            "peeling" => Stage::Peeling,
            "release" => Stage::Release,
            _ => return None,
        })
    }
}

/// Parameters of one mechanism invocation, as audited by the ledger.
///
/// `noise_std` is the standard deviation of each individual noise draw
/// (`√2 · scale` for Laplace noise). `sparsity` is only set for peeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub stage: Stage,
    pub budget: PrivacyBudget,
    pub sensitivity: f64,
    pub noise_std: f64,
    pub sparsity: usize,
}

impl MechanismRecord {
    pub fn release() -> Self {
        MechanismRecord {
            stage: Stage::Release,
            budget: PrivacyBudget {
                epsilon: 0.0,
                delta: 0.0,
            },
            sensitivity: 0.0,
            noise_std: 0.0,
            sparsity: 0,
        }
    }

    /// Smallest noise standard deviation that the recorded sensitivity and budget allow.
    pub fn mandated_noise_std(&self) -> f64 {
        let PrivacyBudget { epsilon, delta } = self.budget;
        match self.stage {
            Stage::Release => 0.0,
            Stage::Gaussian => {
                if delta > 0.0 && epsilon > 0.0 {
                    (2.0 * (1.25 / delta).ln()).sqrt() * self.sensitivity / epsilon
                } else {
                    f64::INFINITY
                }
            }
            Stage::Laplace | Stage::PrivateVariance | Stage::PrivateRange => {
                std::f64::consts::SQRT_2 * self.sensitivity / epsilon
            }
            Stage::Peeling => {
                let s = self.sparsity as f64;
                std::f64::consts::SQRT_2 * peeling_scale(self.sensitivity, s, self.budget)
            }
        }
    }
}

fn peeling_scale(lambda: f64, s: f64, budget: PrivacyBudget) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    2.0 * lambda * (3.0 * s * (1.0 / budget.delta).ln()).sqrt() / budget.epsilon
}

/// Noisy arg-max over the non-empty bins of a histogram with `n` entries.
///
/// Each non-empty bin proportion receives `Laplace(2/(εn))` noise and is
/// discarded when below `2 ln(1/δ)/(εn) + 1/n`. Bins are visited in
/// ascending index order; ties go to the lower index. Returns `None` when
/// every bin is discarded.
pub(crate) fn stable_histogram_argmax<R: Rng + ?Sized>(
    counts: &BTreeMap<i64, usize>,
    n: usize,
    budget: PrivacyBudget,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<Option<i64>> {
    let nf = n as f64;
    let scale = 2.0 / (budget.epsilon * nf);
    let threshold = 2.0 * (1.0 / budget.delta).ln() / (budget.epsilon * nf) + 1.0 / nf;
    let mut best: Option<(i64, f64)> = None;
    for (&bin, &count) in counts {
        let noisy = count as f64 / nf + laplace_sample(rng, scale, mode)?;
        if !mode.is_off() && noisy < threshold {
            continue;
        }
        match best {
            Some((_, b)) if b >= noisy => {}
            _ => best = Some((bin, noisy)),
        }
    }
    Ok(best.map(|(bin, _)| bin))
}

/// Lowest dyadic bin index, `B_j = (2^j, 2^{j+1}]`.
pub const MIN_DYADIC_BIN: i32 = -60;
/// Highest dyadic bin index.
pub const MAX_DYADIC_BIN: i32 = 60;

/// Index `j` with `2^j < w ≤ 2^{j+1}`, clamped to the supported range. `None` for `w = 0`.
pub fn dyadic_bin(w: f64) -> Option<i32> {
    if w <= 0.0 {
        return None;
    }
    if w.is_infinite() {
        return Some(MAX_DYADIC_BIN);
    }
    let mut j = w.log2().ceil() as i64 - 1;
    // log2 rounding can land one bin off near exact powers of two.
    while j > i64::from(MIN_DYADIC_BIN) - 2 && (j as f64).exp2() >= w {
        j -= 1;
    }
    while j < i64::from(MAX_DYADIC_BIN) + 2 && ((j + 1) as f64).exp2() < w {
        j += 1;
    }
    Some(j.clamp(i64::from(MIN_DYADIC_BIN), i64::from(MAX_DYADIC_BIN)) as i32)
}

/// Private scale estimate from `2n` samples via a stable dyadic histogram of
/// the absolute pair differences `|W_{2i} - W_{2i-1}|`.
///
/// The result is always `2^{ĵ+2}` for the winning bin `ĵ`.
pub fn private_variance<R: Rng + ?Sized>(
    samples: &[f64],
    budget: PrivacyBudget,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<f64> {
    budget.validate()?;
    if samples.len() < 2 || samples.len() % 2 != 0 {
        return Err(Error::param(format!(
            "private_variance needs an even number (>= 2) of samples, got {}",
            samples.len()
        )));
    }
    if budget.delta == 0.0 {
        return Err(Error::Unsupported("private_variance needs delta > 0".into()));
    }
    let pairs = samples.len() / 2;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for pair in samples.chunks_exact(2) {
        let w = pair[1] - pair[0];
        if w.is_nan() {
            return Err(Error::param("private_variance received a NaN sample"));
        }
        if let Some(j) = dyadic_bin(w.abs()) {
            *counts.entry(i64::from(j)).or_default() += 1;
        }
    }
    match stable_histogram_argmax(&counts, pairs, budget, mode, rng)? {
        Some(j) => Ok(((j + 2) as f64).exp2()),
        None => Err(Error::InsufficientScaleData { pairs }),
    }
}

/// Keep the `s` entries of largest magnitude, ties broken by lowest index.
pub fn hard_threshold(v: ArrayView1<'_, f64>, s: usize) -> Array1<f64> {
    let mut out = Array1::zeros(v.len());
    for j in top_indices(v, s) {
        out[j] = v[j];
    }
    out
}

fn top_indices(v: ArrayView1<'_, f64>, s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // Stable sort keeps ascending index among equal magnitudes.
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()));
    idx.truncate(s.min(v.len()));
    idx
}

/// Private top-`s` selection ("peeling").
///
/// Selects `s` coordinates one at a time, each as the arg-max of `|v_j| + w_j`
/// over the not yet selected coordinates with fresh Laplace noise `w`, then
/// releases `v_S` plus fresh Laplace noise and zeros elsewhere. The Laplace
/// scale is `2λ sqrt(3 s ln(1/δ)) / ε`; `λ = 0` gives exact hard thresholding.
pub fn peeling<R: Rng + ?Sized>(
    v: ArrayView1<'_, f64>,
    s: usize,
    budget: PrivacyBudget,
    lambda: f64,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let d = v.len();
    if s == 0 || s > d {
        return Err(Error::param(format!("peeling needs 1 <= s <= d, got s = {s}, d = {d}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!("peeling noise level must be >= 0, got {lambda}")));
    }
    budget.validate()?;
    if lambda == 0.0 {
        return Ok(hard_threshold(v, s));
    }
    if budget.delta == 0.0 {
        return Err(Error::Unsupported("peeling needs delta > 0".into()));
    }
    let scale = peeling_scale(lambda, s as f64, budget);
    let mut selected = vec![false; d];
    let mut support = Vec::with_capacity(s);
    for _ in 0..s {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..d {
            // A full noise vector is drawn each pass, selected or not.
            let w = laplace_sample(rng, scale, mode)?;
            if selected[j] {
                continue;
            }
            let score = v[j].abs() + w;
            match best {
                Some((_, b)) if b >= score => {}
                _ => best = Some((j, score)),
            }
        }
        let (j, _) = best.expect("s <= d leaves a candidate");
        selected[j] = true;
        support.push(j);
    }
    let mut out = Array1::zeros(d);
    for j in 0..d {
        let w = laplace_sample(rng, scale, mode)?;
        if selected[j] {
            out[j] = v[j] + w;
        }
    }
    Ok(out)
}

/// Number of nonzero entries.
pub fn l0_norm(v: ArrayView1<'_, f64>) -> usize {
    v.iter().filter(|x| **x != 0.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(1.0, 0.0).is_ok());
        assert!(PrivacyBudget::new(0.0, 0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(-1.0, 0.1).is_err());
        let h = PrivacyBudget::new(1.0, 1e-5).unwrap().halve();
        assert!(h.epsilon > 0.0 && h.delta > 0.0);
        assert_eq!(h, PrivacyBudget { epsilon: 0.5, delta: 5e-6 });
    }

    #[test]
    fn laplace_off_is_zero_and_scale_checked() {
        let mut r = rng(1);
        assert_eq!(laplace_sample(&mut r, 1.0, NoiseMode::Off).unwrap(), 0.0);
        assert!(laplace_sample(&mut r, 0.0, NoiseMode::Calibrated).is_err());
        assert!(laplace_sample(&mut r, -2.0, NoiseMode::Calibrated).is_err());
    }

    #[test]
    fn off_mode_advances_the_generator_identically() {
        let mut a = rng(5);
        let mut b = rng(5);
        laplace_sample(&mut a, 1.0, NoiseMode::Off).unwrap();
        laplace_sample(&mut b, 1.0, NoiseMode::Calibrated).unwrap();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn gaussian_std_closed_form() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        // sqrt(2 ln 125000), evaluated independently with mpmath.
        let expected = 4.844_805_262_605_389_f64;
        let got = gaussian_noise_std(1.0, b).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected, "{got}");
        assert!((gaussian_noise_std(2.0, b).unwrap() - 2.0 * got).abs() < 1e-12);
        let b2 = PrivacyBudget::new(2.0, 1e-5).unwrap();
        assert!((gaussian_noise_std(1.0, b2).unwrap() - got / 2.0).abs() < 1e-12);
        let pure = PrivacyBudget::new(1.0, 0.0).unwrap();
        assert!(matches!(gaussian_noise_std(1.0, pure), Err(Error::Unsupported(_))));
        assert!(gaussian_noise_std(0.0, b).is_err());
    }

    #[test]
    fn projections() {
        let x = array![3.0, 4.0];
        assert_eq!(project_l2(x.view(), 10.0).unwrap(), array![3.0, 4.0]);
        assert_eq!(project_l2(array![6.0, 8.0].view(), 5.0).unwrap(), array![3.0, 4.0]);
        assert_eq!(project_l2(array![0.0, 0.0].view(), 1.0).unwrap(), array![0.0, 0.0]);
        assert_eq!(project_linf(array![2.0, -1.0].view(), 4.0).unwrap(), array![2.0, -1.0]);
        assert_eq!(project_linf(array![4.0, -2.0].view(), 2.0).unwrap(), array![2.0, -1.0]);
        assert_eq!(project_linf(array![0.0].view(), 2.0).unwrap(), array![0.0]);
        assert!(project_l2(x.view(), 0.0).is_err());
        assert_eq!(clip_scalar(5.0, 2.0), 2.0);
        assert_eq!(clip_scalar(-5.0, 2.0), -2.0);
        assert_eq!(clip_scalar(1.5, 2.0), 1.5);
        // Scalar case of the ℓ∞ projection is the clamp.
        for t in [-7.0, -0.5, 0.0, 0.3, 9.0] {
            let p = project_linf(array![t].view(), 2.0).unwrap();
            assert_eq!(p[0], clip_scalar(t, 2.0));
        }
    }

    #[test]
    fn dyadic_bins() {
        assert_eq!(dyadic_bin(3.0), Some(1));
        assert_eq!(dyadic_bin(4.0), Some(1));
        assert_eq!(dyadic_bin(4.000001), Some(2));
        assert_eq!(dyadic_bin(2.0), Some(0));
        assert_eq!(dyadic_bin(1.0), Some(-1));
        assert_eq!(dyadic_bin(0.75), Some(-1));
        assert_eq!(dyadic_bin(0.0), None);
        assert_eq!(dyadic_bin(1e-300), Some(MIN_DYADIC_BIN));
        assert_eq!(dyadic_bin(1e300), Some(MAX_DYADIC_BIN));
    }

    #[test]
    fn private_variance_single_bin_noise_off() {
        let samples: Vec<f64> = (0..400).map(|i| if i % 2 == 0 { 0.0 } else { 3.0 }).collect();
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        assert_eq!(private_variance(&samples, b, NoiseMode::Off, &mut rng(0)).unwrap(), 8.0);
        // With noise the single bin survives too.
        assert_eq!(private_variance(&samples, b, NoiseMode::Calibrated, &mut rng(0)).unwrap(), 8.0);
    }

    #[test]
    fn private_variance_failures() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        assert!(matches!(
            private_variance(&[0.0, 0.0], b, NoiseMode::Calibrated, &mut rng(0)),
            Err(Error::InsufficientScaleData { .. })
        ));
        assert!(matches!(
            private_variance(&[0.0, 0.0], b, NoiseMode::Off, &mut rng(0)),
            Err(Error::InsufficientScaleData { .. })
        ));
        assert!(private_variance(&[1.0, 2.0, 3.0], b, NoiseMode::Off, &mut rng(0)).is_err());
        assert!(private_variance(&[], b, NoiseMode::Off, &mut rng(0)).is_err());
        // Too few pairs for the stability threshold.
        assert!(matches!(
            private_variance(&[0.0, 1.0, 0.0, 1.0], b, NoiseMode::Calibrated, &mut rng(0)),
            Err(Error::InsufficientScaleData { .. })
        ));
    }

    #[test]
    fn peeling_and_hard_threshold_examples() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let v = array![5.0, 1.0, 3.0, 0.0];
        assert_eq!(peeling(v.view(), 2, b, 0.0, NoiseMode::Calibrated, &mut rng(0)).unwrap(), array![5.0, 0.0, 3.0, 0.0]);
        assert_eq!(peeling(v.view(), 4, b, 0.0, NoiseMode::Calibrated, &mut rng(0)).unwrap(), v);
        assert!(peeling(v.view(), 5, b, 0.0, NoiseMode::Calibrated, &mut rng(0)).is_err());
        assert!(peeling(v.view(), 0, b, 0.0, NoiseMode::Calibrated, &mut rng(0)).is_err());
        assert_eq!(hard_threshold(array![1.0, -4.0, 2.0].view(), 1), array![0.0, -4.0, 0.0]);
        assert_eq!(hard_threshold(array![1.0, 1.0, 1.0].view(), 2), array![1.0, 1.0, 0.0]);
    }

    #[test]
    fn peeling_noise_off_equals_hard_threshold_even_with_lambda() {
        let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
        let v = array![0.3, -2.0, 1.1, 0.0, 1.1];
        let p = peeling(v.view(), 3, b, 4.0, NoiseMode::Off, &mut rng(3)).unwrap();
        assert_eq!(p, hard_threshold(v.view(), 3));
    }

    #[test]
    fn mandated_noise_matches_mechanisms() {
        let b = PrivacyBudget::new(0.5, 5e-6).unwrap();
        let g = MechanismRecord { stage: Stage::Gaussian, budget: b, sensitivity: 0.7, noise_std: 0.0, sparsity: 0 };
        assert!((g.mandated_noise_std() - gaussian_noise_std(0.7, b).unwrap()).abs() < 1e-12);
        let l = MechanismRecord { stage: Stage::Laplace, budget: b, sensitivity: 0.1, noise_std: 0.0, sparsity: 0 };
        assert!((l.mandated_noise_std() - std::f64::consts::SQRT_2 * 0.2).abs() < 1e-12);
        assert_eq!(MechanismRecord::release().mandated_noise_std(), 0.0);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..12)
    }

    proptest! {
        #[test]
        fn project_l2_stays_in_ball(x in vec_strategy(), r in 0.01f64..50.0) {
            let x = Array1::from(x);
            let p = project_l2(x.view(), r).unwrap();
            prop_assert!(p.dot(&p).sqrt() <= r * (1.0 + 1e-12));
            if x.dot(&x).sqrt() <= r {
                prop_assert_eq!(p, x);
            }
        }

        #[test]
        fn gaussian_std_is_homogeneous(s in 0.01f64..10.0, e in 0.01f64..10.0, c in 0.1f64..10.0) {
            let b = PrivacyBudget::new(e, 1e-6).unwrap();
            let bc = PrivacyBudget::new(e * c, 1e-6).unwrap();
            let base = gaussian_noise_std(s, b).unwrap();
            prop_assert!((gaussian_noise_std(c * s, b).unwrap() - c * base).abs() <= 1e-9 * c * base);
            prop_assert!((gaussian_noise_std(s, bc).unwrap() - base / c).abs() <= 1e-9 * base / c);
        }

        #[test]
        fn hard_threshold_is_idempotent(x in vec_strategy(), s in 1usize..12) {
            let x = Array1::from(x);
            let once = hard_threshold(x.view(), s);
            prop_assert_eq!(hard_threshold(once.view(), s), once.clone());
            prop_assert!(l0_norm(once.view()) <= s);
        }

        #[test]
        fn peeling_support_bounded(x in vec_strategy(), s in 1usize..12, lam in 0.0f64..5.0, seed in any::<u64>()) {
            let x = Array1::from(x);
            let s = s.min(x.len());
            let b = PrivacyBudget::new(1.0, 1e-5).unwrap();
            let p = peeling(x.view(), s, b, lam, NoiseMode::Calibrated, &mut rng(seed)).unwrap();
            prop_assert!(l0_norm(p.view()) <= s);
        }

        #[test]
        fn private_variance_is_power_of_two_or_fails(x in prop::collection::vec(-1e3f64..1e3, 1..200), seed in any::<u64>()) {
            let n = x.len() / 2 * 2;
            prop_assume!(n >= 2);
            let b = PrivacyBudget::new(1.0, 1e-3).unwrap();
            match private_variance(&x[..n], b, NoiseMode::Calibrated, &mut rng(seed)) {
                Ok(v) => {
                    let l = v.log2();
                    prop_assert_eq!(l, l.round());
                }
                Err(e) => prop_assert!(matches!(e, Error::InsufficientScaleData { .. }), "{e}"),
            }
        }
    }
}
