//! Synthetic multi-site problems with a known informative set.
//!
//! Informative sources differ from the target by a contrast of radius drawn
//! uniformly in `[0, h]`; the remaining sources sit at distance drawn uniformly
//! in `[sep, 2 sep]`. Directions are uniform on the relevant sphere.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detection::{l2_distance, SiteId};
use crate::error::{Error, Result};
use crate::federation::{Payload, SiteDataset};
use crate::seed::{label, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mean,
    #[serde(alias = "low_dim")]
    Lowdim,
    #[serde(alias = "high_dim")]
    Highdim,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Mean => "mean",
            Family::Lowdim => "lowdim",
            Family::Highdim => "highdim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Family::Mean),
            "lowdim" | "low_dim" => Some(Family::Lowdim),
            "highdim" | "high_dim" => Some(Family::Highdim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSpec {
    #[default]
    Identity,
    /// Diagonal with entries drawn uniformly in `[1/L, L]`, independently per site.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub family: Family,
    /// Sample size per site; index 0 is the target, so `K = sizes.len() - 1`.
    pub sizes: Vec<usize>,
    /// Informative sources `A ⊆ {1..K}`.
    pub informative: BTreeSet<SiteId>,
    pub h: f64,
    pub outlier_separation: f64,
    pub d: usize,
    pub s: usize,
    pub covariance: CovarianceSpec,
    pub l: f64,
    /// Norm of the target regression vector.
    pub signal: f64,
    /// Noise standard deviation of the responses (regression) or samples (mean).
    pub noise_sd: f64,
}

impl ProblemSpec {
    /// Target with `n_target` samples and `k` sources with `n_source` each;
    /// the last `outliers` sources are non-informative.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        family: Family,
        n_target: usize,
        n_source: usize,
        k: usize,
        outliers: usize,
        h: f64,
        outlier_separation: f64,
        d: usize,
        s: usize,
    ) -> Result<Self> {
        if outliers > k {
            return Err(Error::param(format!("{outliers} outliers among only {k} sources")));
        }
        let mut sizes = vec![n_source; k + 1];
        sizes[0] = n_target;
        let spec = ProblemSpec {
            family,
            sizes,
            informative: (1..=(k - outliers) as SiteId).collect(),
            h,
            outlier_separation,
            d: if family == Family::Mean { 1 } else { d },
            s,
            covariance: CovarianceSpec::Identity,
            l: 1.0,
            signal: 1.0,
            noise_sd: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn k(&self) -> usize {
        self.sizes.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::param("at least the target site is required"));
        }
        if let Some(bad) = self.informative.iter().find(|k| **k == 0 || **k as usize > self.k()) {
            return Err(Error::param(format!("informative site {bad} is not a source")));
        }
        if !(self.h >= 0.0) || !self.h.is_finite() {
            return Err(Error::param(format!("h must be >= 0, got {}", self.h)));
        }
        let has_outliers = self.informative.len() < self.k();
        if has_outliers {
            if !(self.outlier_separation > 0.0) || !self.outlier_separation.is_finite() {
                return Err(Error::param("outlier separation must be positive"));
            }
            if self.h >= self.outlier_separation {
                return Err(Error::param(format!(
                    "h = {} must be below the outlier separation {}",
                    self.h, self.outlier_separation
                )));
            }
        }
        if !(self.l >= 1.0) {
            return Err(Error::param(format!("L must be >= 1, got {}", self.l)));
        }
        if !(self.noise_sd >= 0.0) || !(self.signal >= 0.0) {
            return Err(Error::param("noise_sd and signal must be >= 0"));
        }
        match self.family {
            Family::Mean => {}
            Family::Lowdim => {
                if self.d == 0 {
                    return Err(Error::param("d must be at least 1"));
                }
            }
            Family::Highdim => {
                if self.s == 0 || self.s >= self.d {
                    return Err(Error::param(format!("need 1 <= s < d, got s = {}, d = {}", self.s, self.d)));
                }
                if self.s >= self.sizes[0] {
                    return Err(Error::param("s must be below the target sample size"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub family: Family,
    /// Target parameter (`μ^(0)` or `β`).
    pub target: Vec<f64>,
    /// Parameters of every site, target included.
    pub site_params: Vec<(SiteId, Vec<f64>)>,
    pub informative: BTreeSet<SiteId>,
    /// Diagonal of each site's covariance (empty for the mean family).
    pub covariances: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn param(&self, k: SiteId) -> Option<&[f64]> {
        self.site_params.iter().find(|(id, _)| *id == k).map(|(_, v)| v.as_slice())
    }

    /// `‖θ^(k) − θ^(0)‖₂`.
    pub fn contrast(&self, k: SiteId) -> Option<f64> {
        self.param(k).map(|p| l2_distance(p, &self.target))
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub payloads: Vec<(SiteId, Payload)>,
    pub truth: GroundTruth,
}

impl Instance {
    pub fn sites(&self) -> Result<Vec<SiteDataset>> {
        self.payloads.iter().map(|(k, p)| SiteDataset::new(*k, p.clone())).collect()
    }

    /// One file per site, `site_<k>.csv`, with a `# site_id=..,n=..,d=..,family=..`
    /// header and comma-separated rows (`x_1..x_d,y` for regression), plus
    /// `truth.json`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, p) in &self.payloads {
            let mut out = format!(
                "# site_id={k},n={},d={},family={}\n",
                p.len(),
                p.dim(),
                self.truth.family.as_str()
            );
            match p {
                Payload::Scalar(v) => {
                    for x in v {
                        let _ = writeln!(out, "{x}");
                    }
                }
                Payload::Regression { x, y } => {
                    for (row, yi) in x.rows().into_iter().zip(y.iter()) {
                        for v in row {
                            let _ = write!(out, "{v},");
                        }
                        let _ = writeln!(out, "{yi}");
                    }
                }
            }
            std::fs::write(dir.join(format!("site_{k}.csv")), out)?;
        }
        let truth = serde_json::to_string_pretty(&self.truth).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(dir.join("truth.json"), truth)?;
        Ok(())
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn contrast_radius<R: Rng + ?Sized>(rng: &mut R, spec: &ProblemSpec, informative: bool) -> f64 {
    if informative {
        if spec.h > 0.0 {
            rng.random_range(0.0..=spec.h)
        } else {
            0.0
        }
    } else {
        let sep = spec.outlier_separation;
        rng.random_range(sep..=2.0 * sep)
    }
}

fn diagonal<R: Rng + ?Sized>(rng: &mut R, spec: &ProblemSpec) -> Vec<f64> {
    match spec.covariance {
        CovarianceSpec::Identity => vec![1.0; spec.d],
        CovarianceSpec::Diagonal if spec.l == 1.0 => vec![1.0; spec.d],
        CovarianceSpec::Diagonal => (0..spec.d).map(|_| rng.random_range(1.0 / spec.l..=spec.l)).collect(),
    }
}

fn regression_payload<R: Rng + ?Sized>(rng: &mut R, n: usize, beta: &Array1<f64>, diag: &[f64], noise_sd: f64) -> Payload {
    let d = beta.len();
    let scale: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
    let mut x = Array2::zeros((n, d));
    for mut row in x.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *v = scale[j] * z;
        }
    }
    let noise: Array1<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            noise_sd * z
        })
        .collect();
    let y = x.dot(beta) + noise;
    Payload::Regression { x, y }
}

fn check_family(spec: &ProblemSpec, family: Family) -> Result<()> {
    spec.validate()?;
    if spec.family != family {
        return Err(Error::param(format!(
            "spec is for the {} family, not {}",
            spec.family.as_str(),
            family.as_str()
        )));
    }
    Ok(())
}

/// Gaussian samples `N(μ^(k), σ²)` per site with `μ^(0) ~ U[−1, 1]`.
pub fn gen_mean_sites(spec: &ProblemSpec, seeds: &SeedTree) -> Result<Instance> {
    check_family(spec, Family::Mean)?;
    let data = seeds.child(label::DATA);
    let mut prng = data.child("params").rng();
    let mu0: f64 = prng.random_range(-1.0..=1.0);
    let mut params = vec![(0, vec![mu0])];
    for k in 1..=spec.k() as SiteId {
        let r = contrast_radius(&mut prng, spec, spec.informative.contains(&k));
        let sign = if prng.random::<bool>() { 1.0 } else { -1.0 };
        params.push((k, vec![mu0 + sign * r]));
    }
    let payloads = params
        .iter()
        .map(|(k, mu)| {
            let mut rng = data.site(*k).rng();
            let n = spec.sizes[*k as usize];
            let v = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu[0] + spec.noise_sd * z
                })
                .collect();
            (*k, Payload::Scalar(v))
        })
        .collect();
    finish(spec, payloads, params, Vec::new())
}

/// Gaussian linear model `y = Xβ^(k) + ε` with `X ~ N(0, Σ^(k))` and `‖β‖₂ = signal`.
pub fn gen_linreg_sites(spec: &ProblemSpec, seeds: &SeedTree) -> Result<Instance> {
    check_family(spec, Family::Lowdim)?;
    let data = seeds.child(label::DATA);
    let mut prng = data.child("params").rng();
    let beta = spec.signal * unit_vector(&mut prng, spec.d);
    let mut params = vec![(0, beta.clone())];
    for k in 1..=spec.k() as SiteId {
        let r = contrast_radius(&mut prng, spec, spec.informative.contains(&k));
        params.push((k, &beta + &(r * unit_vector(&mut prng, spec.d))));
    }
    regression_instance(spec, &data, &mut prng, params)
}

/// Sparse linear model: `β` has exactly `s` nonzeros of magnitude `signal/√s`;
/// informative contrasts live on `supp(β)`; outlier centres are `s`-sparse.
pub fn gen_sparse_sites(spec: &ProblemSpec, seeds: &SeedTree) -> Result<Instance> {
    check_family(spec, Family::Highdim)?;
    let data = seeds.child(label::DATA);
    let mut prng = data.child("params").rng();
    let (d, s) = (spec.d, spec.s);
    let mut support: Vec<usize> = sample(&mut prng, d, s).into_vec();
    support.sort_unstable();
    let mut beta = Array1::zeros(d);
    let mag = spec.signal / (s as f64).sqrt();
    for &j in &support {
        beta[j] = if prng.random::<bool>() { mag } else { -mag };
    }
    let beta_norm = beta.dot(&beta).sqrt();
    let mut params = vec![(0, beta.clone())];
    for k in 1..=spec.k() as SiteId {
        let informative = spec.informative.contains(&k);
        let r = contrast_radius(&mut prng, spec, informative);
        let u = unit_vector(&mut prng, s);
        let mut center = Array1::zeros(d);
        if informative {
            center.assign(&beta);
            for (i, &j) in support.iter().enumerate() {
                center[j] += r * u[i];
            }
        } else if r > beta_norm && d >= 2 * s {
            // Disjoint support with ‖c − β‖ = r.
            let free: Vec<usize> = (0..d).filter(|j| !support.contains(j)).collect();
            let picks = sample(&mut prng, free.len(), s).into_vec();
            let len = (r * r - beta_norm * beta_norm).sqrt();
            for (i, p) in picks.into_iter().enumerate() {
                center[free[p]] = len * u[i];
            }
        } else if beta_norm > 0.0 {
            let f = if r <= beta_norm { 1.0 - r / beta_norm } else { 1.0 + r / beta_norm };
            center.assign(&(f * &beta));
        } else {
            for (i, &j) in support.iter().enumerate() {
                center[j] = r * u[i];
            }
        }
        params.push((k, center));
    }
    regression_instance(spec, &data, &mut prng, params)
}

fn regression_instance<R: Rng + ?Sized>(
    spec: &ProblemSpec,
    data: &SeedTree,
    prng: &mut R,
    params: Vec<(SiteId, Array1<f64>)>,
) -> Result<Instance> {
    let covariances: Vec<Vec<f64>> = params.iter().map(|_| diagonal(prng, spec)).collect();
    let payloads = params
        .iter()
        .zip(&covariances)
        .map(|((k, beta), diag)| {
            let mut rng = data.site(*k).rng();
            (*k, regression_payload(&mut rng, spec.sizes[*k as usize], beta, diag, spec.noise_sd))
        })
        .collect();
    let params = params.into_iter().map(|(k, b)| (k, b.to_vec())).collect();
    finish(spec, payloads, params, covariances)
}

fn finish(
    spec: &ProblemSpec,
    payloads: Vec<(SiteId, Payload)>,
    site_params: Vec<(SiteId, Vec<f64>)>,
    covariances: Vec<Vec<f64>>,
) -> Result<Instance> {
    let truth = GroundTruth {
        family: spec.family,
        target: site_params[0].1.clone(),
        site_params,
        informative: spec.informative.clone(),
        covariances,
    };
    verify_instance(spec, &truth)?;
    Ok(Instance { payloads, truth })
}

/// Exact membership check of a generated instance in its parameter space.
pub fn verify_instance(spec: &ProblemSpec, truth: &GroundTruth) -> Result<()> {
    let tol = 1e-9 * (1.0 + spec.h.max(spec.outlier_separation));
    for (k, _) in truth.site_params.iter().skip(1) {
        let c = truth.contrast(*k).expect("listed site");
        if truth.informative.contains(k) {
            if c > spec.h + tol {
                return Err(Error::param(format!("informative site {k} is {c} > h = {} away", spec.h)));
            }
        } else if c < spec.outlier_separation - tol {
            return Err(Error::param(format!(
                "outlier site {k} is only {c} < {} away",
                spec.outlier_separation
            )));
        }
    }
    if spec.family == Family::Highdim {
        let nnz = truth.target.iter().filter(|v| **v != 0.0).count();
        if nnz != spec.s {
            return Err(Error::param(format!("target has {nnz} nonzeros, expected {}", spec.s)));
        }
        for (k, p) in &truth.site_params {
            let delta: Vec<f64> = p.iter().zip(&truth.target).map(|(a, b)| a - b).collect();
            let l1: f64 = delta.iter().map(|v| v.abs()).sum();
            let l2 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if truth.informative.contains(k) && l1 > (spec.s as f64).sqrt() * l2 * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::param(format!("contrast of site {k} is not approximately sparse")));
            }
            if p.iter().filter(|v| **v != 0.0).count() > spec.s {
                return Err(Error::param(format!("site {k} parameter is not {}-sparse", spec.s)));
            }
        }
    }
    for diag in &truth.covariances {
        if diag.iter().any(|v| *v < 1.0 / spec.l - 1e-12 || *v > spec.l + 1e-12) {
            return Err(Error::param("covariance eigenvalue outside [1/L, L]"));
        }
    }
    Ok(())
}

pub fn generate(spec: &ProblemSpec, seeds: &SeedTree) -> Result<Instance> {
    match spec.family {
        Family::Mean => gen_mean_sites(spec, seeds),
        Family::Lowdim => gen_linreg_sites(spec, seeds),
        Family::Highdim => gen_sparse_sites(spec, seeds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(family: Family, h: f64) -> ProblemSpec {
        ProblemSpec::new(family, 500, 400, 5, 2, h, 3.0, 20, 3).unwrap()
    }

    #[test]
    fn rejects_inconsistent_specs() {
        assert!(ProblemSpec::new(Family::Mean, 100, 100, 3, 1, 2.0, 1.0, 1, 1).is_err());
        assert!(ProblemSpec::new(Family::Mean, 100, 100, 3, 0, 2.0, 1.0, 1, 1).is_ok());
        assert!(ProblemSpec::new(Family::Highdim, 100, 100, 1, 0, 0.0, 1.0, 5, 5).is_err());
        assert!(ProblemSpec::new(Family::Mean, 100, 100, 1, 2, 0.0, 1.0, 1, 1).is_err());
    }

    #[test]
    fn zero_h_gives_identical_informative_parameters() {
        for family in [Family::Mean, Family::Lowdim, Family::Highdim] {
            let inst = generate(&spec(family, 0.0), &SeedTree::new(3)).unwrap();
            for k in &inst.truth.informative {
                assert_eq!(inst.truth.param(*k).unwrap(), inst.truth.target.as_slice());
            }
            for k in 4..=5 {
                assert!(inst.truth.contrast(k).unwrap() >= 3.0);
            }
        }
    }

    #[test]
    fn noiseless_regression_is_exact() {
        let mut s = spec(Family::Lowdim, 0.0);
        s.noise_sd = 0.0;
        let inst = generate(&s, &SeedTree::new(1)).unwrap();
        if let Payload::Regression { x, y } = &inst.payloads[0].1 {
            let fit = x.dot(&Array1::from(inst.truth.target.clone()));
            assert!((&fit - y).iter().all(|v| v.abs() < 1e-12));
        } else {
            panic!("expected regression data");
        }
    }

    #[test]
    fn sparse_truth_shape() {
        let inst = generate(&spec(Family::Highdim, 0.5), &SeedTree::new(8)).unwrap();
        assert_eq!(inst.truth.target.iter().filter(|v| **v != 0.0).count(), 3);
        assert!((l2_distance(&inst.truth.target, &[0.0; 20]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let s = spec(Family::Lowdim, 0.3);
        let a = generate(&s, &SeedTree::new(5)).unwrap();
        let b = generate(&s, &SeedTree::new(5)).unwrap();
        assert_eq!(a.payloads, b.payloads);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn diagonal_covariance_within_bounds() {
        let mut s = spec(Family::Lowdim, 0.3);
        s.covariance = CovarianceSpec::Diagonal;
        s.l = 2.0;
        let inst = generate(&s, &SeedTree::new(5)).unwrap();
        for diag in &inst.truth.covariances {
            assert!(diag.iter().all(|v| *v >= 0.5 && *v <= 2.0));
        }
    }

    #[test]
    fn dump_writes_one_file_per_site() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate(&spec(Family::Mean, 0.1), &SeedTree::new(2)).unwrap();
        inst.dump(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("site_3.csv")).unwrap();
        assert!(text.starts_with("# site_id=3,n=400,d=1,family=mean\n"));
        assert_eq!(text.lines().count(), 401);
        assert!(dir.path().join("truth.json").exists());
    }

    fn family() -> impl Strategy<Value = Family> {
        prop_oneof![Just(Family::Mean), Just(Family::Lowdim), Just(Family::Highdim)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn membership_holds_for_random_specs(
            family in family(),
            k in 1usize..6,
            out in 0usize..6,
            h in 0.0f64..2.0,
            gap in 0.01f64..5.0,
            d in 2usize..30,
            s in 1usize..5,
            seed in any::<u64>(),
        ) {
            let out = out.min(k);
            let s = s.min(d - 1);
            let spec = ProblemSpec::new(family, 60, 40, k, out, h, h + gap, d, s).unwrap();
            let inst = generate(&spec, &SeedTree::new(seed)).unwrap();
            verify_instance(&spec, &inst.truth).unwrap();
            for j in &inst.truth.informative {
                prop_assert!(inst.truth.contrast(*j).unwrap() <= h * (1.0 + 1e-12));
            }
            for j in 1..=k as SiteId {
                if !inst.truth.informative.contains(&j) {
                    prop_assert!(inst.truth.contrast(j).unwrap() >= (h + gap) * (1.0 - 1e-12));
                }
            }
            prop_assert_eq!(inst.payloads.len(), k + 1);
        }
    }
}
