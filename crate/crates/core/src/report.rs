use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detection::SiteId;
use crate::federation::Transcript;
use crate::highdim::MetaDecision;

/// Outcome of a federated pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    /// Final federated estimate.
    pub estimate: Vec<f64>,
    /// The target's own first-stage estimate.
    pub target_estimate: Vec<f64>,
    /// First-stage estimates of the sources, by site id.
    pub source_estimates: Vec<(SiteId, Vec<f64>)>,
    /// Detected informative set.
    pub selected: BTreeSet<SiteId>,
    /// Rate `r` used by detection.
    pub radius: f64,
    /// Detection cut-off `c̃ · r`.
    pub threshold: f64,
    pub decision: Option<MetaDecision>,
    /// Broadcast iterates of the final stage, one per round.
    pub iterates: Vec<Vec<f64>>,
    pub transcript: Transcript,
    /// Stream id of the seed subtree the run was derived from.
    pub seed_stream: u64,
}

/// First-stage output shared by the federated pipelines: the released
/// per-site estimates and the detection radius `r`, before any selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub target_estimate: Vec<f64>,
    pub source_estimates: Vec<(SiteId, Vec<f64>)>,
    pub radius: f64,
    pub transcript: Transcript,
}
