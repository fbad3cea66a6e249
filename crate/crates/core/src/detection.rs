//! Informative-source detection: keep every source whose private estimate
//! lies within `c̃ · r` of the target's in ℓ2 distance.

pub use crate::calibration::calibrate_tilde_c;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SiteId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInput {
    pub target_estimate: Vec<f64>,
    pub source_estimates: Vec<(SiteId, Vec<f64>)>,
    pub threshold_radius: f64,
    pub tilde_c: f64,
}

impl DetectionInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_radius > 0.0) {
            return Err(Error::param(format!("threshold radius must be positive, got {}", self.threshold_radius)));
        }
        if !(self.tilde_c > 0.0) {
            return Err(Error::param(format!("tilde_c must be positive, got {}", self.tilde_c)));
        }
        let d = self.target_estimate.len();
        for (k, v) in &self.source_estimates {
            if v.len() != d {
                return Err(Error::param(format!(
                    "site {k} estimate has dimension {}, target has {d}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `{k : ‖θ̂^(k) − θ̂^(0)‖₂ ≤ c̃ r}`.
pub fn detect_informative(input: &DetectionInput) -> Result<BTreeSet<SiteId>> {
    input.validate()?;
    let cut = input.tilde_c * input.threshold_radius;
    Ok(input
        .source_estimates
        .iter()
        .filter(|(_, v)| l2_distance(v, &input.target_estimate) <= cut)
        .map(|(k, _)| *k)
        .collect())
}
