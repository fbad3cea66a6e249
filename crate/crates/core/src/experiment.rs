//! Replicated Monte Carlo sweeps, their CSV output, and rate-slope fits.
//!
//! A config file is TOML:
//!
//! ```toml
//! family = "mean"            # mean | lowdim | highdim
//! replications = 50
//! master_seed = 7
//! eta = 0.05
//! tilde_c = 3.0              # or "calibrate"
//! t_const = 1.0              # T = ceil(t_const ln n_0), unless `t` is given
//! output = "results.csv"
//!
//! [problem]
//! n_target = 1000
//! n_source = 1000
//! k = 4
//! outliers = 1
//! h = 0.0                    # or h_factor = 10.0 (multiples of r)
//! separation_factor = 10.0   # or outlier_separation = 2.5 (absolute)
//!
//! [privacy]
//! epsilon = 1.0
//! delta = 1e-5
//!
//! [[sweep]]
//! param = "n"
//! values = [500, 1000, 2000]
//! ```
//!
//! Several `[[sweep]]` tables span their Cartesian product, the last varying
//! fastest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_tilde_c, PilotConfig};
use crate::detection::l2_distance;
use crate::error::{Error, Result};
use crate::federation::{audit_ledger, Transcript};
use crate::highdim::{default_s_prime, default_sparse_rho, SparseRegConfig};
use crate::lowdim::{default_rho, default_rounds, RegressionConfig};
use crate::mean::MeanConfig;
use crate::mechanisms::PrivacyBudget;
use crate::pipeline::EstimatorConfig;
use crate::report::EstimatorReport;
use crate::seed::{label, SeedTree};
use crate::synth::{generate, CovarianceSpec, Family, Instance, ProblemSpec};

/// Version string embedded in every sweep output.
pub const VERSION: &str = match option_env!("FDP_GIT_DESCRIBE") {
    Some(v) => v,
    None => env!("CARGO_PKG_VERSION"),
};

/// Column order of the results CSV.
pub const CSV_COLUMNS: [&str; 15] = [
    "family",
    "n",
    "K",
    "d",
    "s",
    "h",
    "epsilon",
    "delta",
    "rep",
    "err_target_only",
    "err_federated",
    "A_recovered",
    "branch",
    "ledger_ok",
    "seconds",
];

fn default_eta() -> f64 {
    0.05
}
fn default_t_const() -> f64 {
    1.0
}
fn default_calibration_reps() -> usize {
    100
}
fn default_one() -> usize {
    1
}
fn default_unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrateTag {
    Calibrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TildeC {
    Fixed(f64),
    Calibrate(CalibrateTag),
}

impl Default for TildeC {
    fn default() -> Self {
        TildeC::Fixed(crate::calibration::DEFAULT_TILDE_C)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub n_target: usize,
    pub n_source: usize,
    pub k: usize,
    #[serde(default)]
    pub outliers: usize,
    #[serde(default)]
    pub h: f64,
    /// Overrides `h` with `h_factor · r`.
    #[serde(default)]
    pub h_factor: Option<f64>,
    #[serde(default)]
    pub outlier_separation: Option<f64>,
    /// Outlier separation as a multiple of `r`; used when `outlier_separation` is absent.
    #[serde(default)]
    pub separation_factor: Option<f64>,
    #[serde(default = "default_one")]
    pub d: usize,
    #[serde(default = "default_one")]
    pub s: usize,
    #[serde(default)]
    pub covariance: CovarianceSpec,
    #[serde(default = "default_unit")]
    pub l: f64,
    #[serde(default = "default_unit")]
    pub signal: f64,
    #[serde(default = "default_unit")]
    pub noise_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub param: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: Family,
    pub problem: ProblemConfig,
    pub privacy: PrivacyConfig,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub t: Option<usize>,
    #[serde(default = "default_t_const")]
    pub t_const: f64,
    #[serde(default)]
    pub tilde_c: TildeC,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub paper_literal: bool,
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_calibration_reps")]
    pub calibration_replications: usize,
    #[serde(default)]
    pub s_prime: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
}

/// Names accepted by `[[sweep]] param`.
pub const SWEEP_PARAMS: [&str; 17] = [
    "n",
    "n_target",
    "n_source",
    "K",
    "outliers",
    "h",
    "h_factor",
    "outlier_separation",
    "separation_factor",
    "d",
    "s",
    "l",
    "signal",
    "epsilon",
    "delta",
    "eta",
    "t",
];

fn as_count(param: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{param} must be a non-negative integer, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        for axis in &self.sweep {
            if !SWEEP_PARAMS.contains(&axis.param.as_str()) {
                return Err(Error::Config(format!(
                    "unknown sweep parameter '{}' (expected one of {})",
                    axis.param,
                    SWEEP_PARAMS.join(", ")
                )));
            }
            if axis.values.is_empty() {
                return Err(Error::Config(format!("sweep over '{}' has no values", axis.param)));
            }
        }
        if let TildeC::Fixed(c) = self.tilde_c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("tilde_c must be positive, got {c}")));
            }
        }
        for point in self.grid()? {
            point.estimator().map_err(to_config)?;
            point.problem_spec().map_err(to_config)?;
        }
        Ok(())
    }

    fn set(&mut self, param: &str, v: f64) -> Result<()> {
        let p = &mut self.problem;
        match param {
            "n" => {
                p.n_target = as_count(param, v)?;
                p.n_source = p.n_target;
            }
            "n_target" => p.n_target = as_count(param, v)?,
            "n_source" => p.n_source = as_count(param, v)?,
            "K" => p.k = as_count(param, v)?,
            "outliers" => p.outliers = as_count(param, v)?,
            "h" => {
                p.h = v;
                p.h_factor = None;
            }
            "h_factor" => p.h_factor = Some(v),
            "outlier_separation" => p.outlier_separation = Some(v),
            "separation_factor" => {
                p.separation_factor = Some(v);
                p.outlier_separation = None;
            }
            "d" => p.d = as_count(param, v)?,
            "s" => p.s = as_count(param, v)?,
            "l" => p.l = v,
            "signal" => p.signal = v,
            "epsilon" => self.privacy.epsilon = v,
            "delta" => self.privacy.delta = v,
            "eta" => self.eta = v,
            "t" => self.t = Some(as_count(param, v)?),
            other => return Err(Error::Config(format!("unknown sweep parameter '{other}'"))),
        }
        Ok(())
    }

    /// Every grid point as a sweep-free config, in output order.
    pub fn grid(&self) -> Result<Vec<ExperimentConfig>> {
        let mut base = self.clone();
        base.sweep.clear();
        let mut points = vec![base];
        for axis in &self.sweep {
            let mut next = Vec::with_capacity(points.len() * axis.values.len());
            for p in &points {
                for v in &axis.values {
                    let mut q = p.clone();
                    q.set(&axis.param, *v)?;
                    next.push(q);
                }
            }
            points = next;
        }
        Ok(points)
    }

    fn dim(&self) -> usize {
        if self.family == Family::Mean {
            1
        } else {
            self.problem.d
        }
    }

    pub fn rounds(&self) -> usize {
        self.t.unwrap_or_else(|| default_rounds(self.problem.n_target, self.t_const))
    }

    pub fn estimator(&self) -> Result<EstimatorConfig> {
        let budget = PrivacyBudget::new(self.privacy.epsilon, self.privacy.delta)?;
        let p = &self.problem;
        Ok(match self.family {
            Family::Mean => EstimatorConfig::Mean(MeanConfig::new(budget, self.eta)?),
            Family::Lowdim => {
                let mut c = RegressionConfig::new(self.rounds(), p.l, self.eta, budget)?;
                c.rho = self.rho.unwrap_or_else(|| default_rho(p.l));
                c.validate()?;
                EstimatorConfig::Lowdim(c)
            }
            Family::Highdim => {
                let s_prime = self.s_prime.unwrap_or_else(|| default_s_prime(p.s, p.l, p.d));
                let mut c = SparseRegConfig::new(self.rounds(), s_prime, p.l, self.eta, budget)?;
                c.rho = self.rho.unwrap_or_else(|| default_sparse_rho(p.l));
                c.paper_literal = self.paper_literal;
                c.validate()?;
                EstimatorConfig::Highdim(c)
            }
        })
    }

    /// Detection radius `r` at this point.
    pub fn radius(&self) -> Result<f64> {
        self.estimator()?.radius(self.problem.n_target, self.dim())
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        let r = self.radius()?;
        let h = p.h_factor.map_or(p.h, |f| f * r);
        let sep = p.outlier_separation.unwrap_or_else(|| p.separation_factor.unwrap_or(10.0) * r);
        let mut spec = ProblemSpec::new(self.family, p.n_target, p.n_source, p.k, p.outliers, h, sep, p.d, p.s)?;
        spec.covariance = p.covariance;
        spec.l = p.l;
        spec.signal = p.signal;
        spec.noise_sd = p.noise_sd;
        spec.validate()?;
        Ok(spec)
    }

    fn pilot(&self, spec: &ProblemSpec, r: f64) -> PilotConfig {
        let mut pilot = PilotConfig::new(
            self.problem.n_target,
            self.problem.n_source,
            self.problem.k,
            self.problem.outliers,
            spec.d,
            spec.s,
        );
        if spec.outlier_separation > 0.0 && self.problem.outliers > 0 {
            pilot.separation_factor = spec.outlier_separation / r;
        }
        pilot.replications = self.calibration_replications;
        pilot
    }

    /// Resolves `tilde_c` at this point, running the pilot calibration if asked.
    pub fn resolve_tilde_c(&self, seeds: &SeedTree) -> Result<f64> {
        match self.tilde_c {
            TildeC::Fixed(c) => Ok(c),
            TildeC::Calibrate(_) => {
                let spec = self.problem_spec()?;
                let pilot = self.pilot(&spec, self.radius()?);
                Ok(calibrate_tilde_c(&self.estimator()?, &pilot, seeds)?.tilde_c)
            }
        }
    }

    /// The config echoed as one line of JSON.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub s: usize,
    pub h: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub rep: usize,
    pub err_target_only: f64,
    pub err_federated: f64,
    #[serde(rename = "A_recovered")]
    pub a_recovered: u8,
    pub branch: String,
    pub ledger_ok: u8,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `c̃` used at each grid point.
    pub tilde_c: Vec<f64>,
}

impl SweepResult {
    pub fn ledger_ok(&self) -> bool {
        self.rows.iter().all(|r| r.ledger_ok == 1)
    }

    pub fn to_csv(&self, cfg: &ExperimentConfig) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        let mut out = format!("# fdptl {VERSION} config={}\n", cfg.to_json_line());
        if self.rows.is_empty() {
            out.push_str(&CSV_COLUMNS.join(","));
            out.push('\n');
        }
        out.push_str(&String::from_utf8(body).map_err(|e| Error::Io(e.to_string()))?);
        Ok(out)
    }
}

/// Everything one replication at one grid point produced.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub row: SweepRow,
    pub report: Option<EstimatorReport>,
    pub instance: Instance,
    pub error: Option<Error>,
}

fn cell_seeds(master_seed: u64, point: usize, rep: usize) -> SeedTree {
    SeedTree::new(master_seed).child(label::CELL).index(point as u64).index(rep as u64)
}

/// Runs replication `rep` of a sweep-free config, with grid index `point`.
pub fn run_cell(point_cfg: &ExperimentConfig, point: usize, rep: usize, tilde_c: f64) -> Result<CellOutcome> {
    let spec = point_cfg.problem_spec()?;
    let est = point_cfg.estimator()?;
    let seeds = cell_seeds(point_cfg.master_seed, point, rep);
    let start = Instant::now();
    let instance = generate(&spec, &seeds)?;
    let sites = instance.sites()?;
    let truth = &instance.truth.target;
    let fed = est.federated(&sites, tilde_c, &seeds);
    let base = est.target_only(&sites, &seeds);
    let seconds = if point_cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };

    let mut row = SweepRow {
        family: spec.family.as_str().to_string(),
        n: spec.sizes[0],
        k: spec.k(),
        d: spec.d,
        s: spec.s,
        h: spec.h,
        epsilon: point_cfg.privacy.epsilon,
        delta: point_cfg.privacy.delta,
        rep,
        err_target_only: base.as_ref().map_or(f64::NAN, |b| l2_distance(b, truth)),
        err_federated: f64::NAN,
        a_recovered: 0,
        branch: "failed".into(),
        ledger_ok: 1,
        seconds,
    };
    let (report, error) = match fed {
        Ok(report) => {
            row.err_federated = l2_distance(&report.estimate, truth);
            row.a_recovered = u8::from(report.selected == instance.truth.informative);
            row.branch = report.decision.map_or("na", |d| d.branch.as_str()).to_string();
            row.ledger_ok = u8::from(audit_ledger(&report.transcript, est.budget()).ok);
            (Some(report), base.err())
        }
        Err(e) => (None, Some(e)),
    };
    Ok(CellOutcome {
        row,
        report,
        instance,
        error,
    })
}

/// Runs every grid point × replication on the current rayon pool.
///
/// Per-cell streams depend only on `(master_seed, grid index, rep)`, so the
/// output does not depend on the number of threads.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let calib_root = SeedTree::new(cfg.master_seed).child(label::CALIBRATION);
    let tilde_c = grid
        .iter()
        .enumerate()
        .map(|(i, p)| p.resolve_tilde_c(&calib_root.index(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|i| (0..cfg.replications).map(move |r| (i, r)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(i, rep)| run_cell(&grid[i], i, rep, tilde_c[i]).map(|c| c.row))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows, tilde_c })
}

/// First replication of the base point with its transcript.
pub fn simulate(cfg: &ExperimentConfig) -> Result<(CellOutcome, Transcript)> {
    cfg.validate()?;
    let mut base = cfg.clone();
    base.sweep.clear();
    let tilde_c = base.resolve_tilde_c(&SeedTree::new(cfg.master_seed).child(label::CALIBRATION).index(0))?;
    let cell = run_cell(&base, 0, 0, tilde_c)?;
    let transcript = match (&cell.report, &cell.error) {
        (Some(r), _) => r.transcript.clone(),
        (None, Some(e)) => return Err(e.clone()),
        (None, None) => unreachable!("a cell without report carries its error"),
    };
    Ok((cell, transcript))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    N,
    /// Regressed against `K + 1`.
    K,
    Epsilon,
    /// Regressed against `1/ε`.
    InvEpsilon,
    D,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "n" => Some(Axis::N),
            "K" | "k" => Some(Axis::K),
            "epsilon" | "eps" => Some(Axis::Epsilon),
            "inv_epsilon" => Some(Axis::InvEpsilon),
            "d" => Some(Axis::D),
            _ => None,
        }
    }

    fn value(self, row: &SweepRow) -> f64 {
        match self {
            Axis::N => row.n as f64,
            Axis::K => row.k as f64 + 1.0,
            Axis::Epsilon => row.epsilon,
            Axis::InvEpsilon => 1.0 / row.epsilon,
            Axis::D => row.d as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorColumn {
    Federated,
    TargetOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    /// `(axis value, median error)` per grid point.
    pub points: Vec<(f64, f64)>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Ordinary least squares of `ln(median error)` on `ln(axis value)`.
///
/// Rows are grouped by axis value; non-finite errors are dropped.
pub fn fit_rate_slopes(rows: &[SweepRow], axis: Axis, column: ErrorColumn) -> Result<SlopeFit> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let x = axis.value(r);
        let e = match column {
            ErrorColumn::Federated => r.err_federated,
            ErrorColumn::TargetOnly => r.err_target_only,
        };
        if e.is_finite() {
            groups.entry(x.to_bits()).or_insert_with(|| (x, Vec::new())).1.push(e);
        }
    }
    let mut points: Vec<(f64, f64)> = groups.into_values().map(|(x, mut es)| (x, median(&mut es))).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    if points.len() < 4 {
        return Err(Error::param(format!("slope fit needs at least 4 grid points, got {}", points.len())));
    }
    if points.iter().any(|(x, m)| !(*x > 0.0) || !(*m > 0.0)) {
        return Err(Error::param("slope fit needs positive axis values and median errors"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("slope fit needs distinct axis values"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let std_error = (rss / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        std_error,
        points,
    })
}

/// Parses a results CSV, skipping `#` comment lines.
pub fn read_rows(text: &str) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, detail: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(Error::Parse {
            line: 1,
            detail: format!("unexpected columns: {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                detail: e.to_string(),
            })
        })
        .collect()
}
