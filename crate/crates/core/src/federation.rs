//! Multi-site protocol simulation.
//!
//! Sites hold their raw data privately. In every round a site-local closure
//! sees only the site's block for that round (through a [`SiteView`]) plus the
//! previous broadcast, and emits a [`SiteMessage`]. The aggregator closure
//! receives the released payloads and nothing else.
//!
//! The payload of a [`SiteDataset`] is not reachable from outside this module:
//!
//! ```compile_fail
//! use fdp_transfer::federation::{Payload, SiteDataset};
//! let site = SiteDataset::new(0, Payload::Scalar(vec![1.0, 2.0])).unwrap();
//! let leaked = &site.payload;
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::SiteId;
use crate::error::{Error, Result};
use crate::mechanisms::{MechanismRecord, PrivacyBudget, Stage};

/// Raw observations of one site.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Scalar(Vec<f64>),
    Regression { x: Array2<f64>, y: Array1<f64> },
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Scalar(v) => v.len(),
            Payload::Regression { y, .. } => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Payload::Scalar(_) => 1,
            Payload::Regression { x, .. } => x.ncols(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Payload::Regression { x, y } = self {
            if x.nrows() != y.len() {
                return Err(Error::param(format!(
                    "covariates have {} rows but responses have {} entries",
                    x.nrows(),
                    y.len()
                )));
            }
        }
        Ok(())
    }
}

/// Split of a site's indices into an optional detection block and `T` round blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub detection: Option<Range<usize>>,
    pub rounds: Vec<Range<usize>>,
}

impl Partition {
    /// Indices used by the round blocks.
    pub fn iteration_len(&self) -> usize {
        self.rounds.iter().map(|r| r.len()).sum()
    }
}

/// Consecutive disjoint blocks. With `detection_split`, the first `⌊n/2⌋ − 1`
/// indices form the detection block and the remainder is cut into `T` blocks
/// of `⌊remaining/T⌋`.
pub fn partition_site(n: usize, rounds: usize, detection_split: bool) -> Result<Partition> {
    if rounds == 0 {
        return Err(Error::param("partition needs at least one round"));
    }
    let (detection, start) = if detection_split {
        let m = (n / 2).saturating_sub(1);
        if m == 0 {
            return Err(Error::param(format!("n = {n} leaves no detection block")));
        }
        (Some(0..m), m)
    } else {
        (None, 0)
    };
    let b = (n - start) / rounds;
    if b == 0 {
        return Err(Error::param(format!(
            "n = {n} is too small for {rounds} round blocks{}",
            if detection_split { " after the detection split" } else { "" }
        )));
    }
    Ok(Partition {
        detection,
        rounds: (0..rounds).map(|t| start + t * b..start + (t + 1) * b).collect(),
    })
}

/// One site's raw data and its partition.
#[derive(Debug, Clone)]
pub struct SiteDataset {
    site_id: SiteId,
    payload: Arc<Payload>,
    partition: Option<Partition>,
}

impl SiteDataset {
    pub fn new(site_id: SiteId, payload: Payload) -> Result<Self> {
        payload.validate()?;
        Ok(SiteDataset {
            site_id,
            payload: Arc::new(payload),
            partition: None,
        })
    }

    pub fn site_id(&self) -> SiteId {
        self.site_id
    }

    pub fn n(&self) -> usize {
        self.payload.len()
    }

    pub fn dim(&self) -> usize {
        self.payload.dim()
    }

    pub fn is_scalar(&self) -> bool {
        matches!(*self.payload, Payload::Scalar(_))
    }

    pub fn partition(&self) -> Option<&Partition> {
        self.partition.as_ref()
    }

    /// Same data with a new partition; the payload is shared, not copied.
    pub fn with_partition(&self, partition: Partition) -> Result<Self> {
        let n = self.n();
        let mut ranges: Vec<&Range<usize>> = partition.rounds.iter().collect();
        ranges.extend(partition.detection.iter());
        ranges.sort_by_key(|r| r.start);
        for r in &ranges {
            if r.is_empty() || r.end > n {
                return Err(Error::param(format!("block {r:?} is empty or exceeds n = {n}")));
            }
        }
        for w in ranges.windows(2) {
            if w[0].end > w[1].start {
                return Err(Error::param(format!("blocks {:?} and {:?} overlap", w[0], w[1])));
            }
        }
        Ok(SiteDataset {
            site_id: self.site_id,
            payload: Arc::clone(&self.payload),
            partition: Some(partition),
        })
    }

    pub fn partitioned(&self, rounds: usize, detection_split: bool) -> Result<Self> {
        self.with_partition(partition_site(self.n(), rounds, detection_split)?)
    }

    /// Number of samples from the first round block to the end of the data.
    pub fn iteration_size(&self) -> usize {
        match self.partition.as_ref().and_then(|p| p.rounds.first()) {
            Some(first) => self.n() - first.start,
            None => self.n(),
        }
    }

    /// Run a site-local computation on the data from the first round block
    /// onwards, e.g. a target-only baseline.
    pub(crate) fn with_iteration_data<R>(
        &self,
        f: impl FnOnce(ArrayView2<'_, f64>, ArrayView1<'_, f64>) -> Result<R>,
    ) -> Result<R> {
        let start = self.n() - self.iteration_size();
        match &*self.payload {
            Payload::Regression { x, y } => f(
                x.slice_axis(Axis(0), (start..).into()),
                y.slice_axis(Axis(0), (start..).into()),
            ),
            Payload::Scalar(_) => Err(Error::param("site holds scalar data, not regression data")),
        }
    }

    pub(crate) fn with_scalars<R>(&self, f: impl FnOnce(&[f64]) -> Result<R>) -> Result<R> {
        let start = self.n() - self.iteration_size();
        match &*self.payload {
            Payload::Scalar(v) => f(&v[start..]),
            Payload::Regression { .. } => Err(Error::param("site holds regression data, not scalars")),
        }
    }

    fn view(&self, phase: Phase, t: usize) -> Result<SiteView<'_>> {
        let partition = self
            .partition
            .as_ref()
            .ok_or_else(|| Error::param(format!("site {} has no partition", self.site_id)))?;
        let block = match phase {
            Phase::Detect if t == 0 => partition.detection.clone(),
            Phase::Detect => None,
            Phase::Mean | Phase::Iterate => partition.rounds.get(t).cloned(),
        }
        .ok_or_else(|| Error::ProtocolViolation {
            site: self.site_id,
            round: t,
            detail: format!("no {} block for this round", phase.as_str()),
        })?;
        Ok(SiteView {
            site_id: self.site_id,
            round: t,
            block,
            payload: &self.payload,
        })
    }
}

/// What a site-local computation may read in one round.
pub struct SiteView<'a> {
    site_id: SiteId,
    round: usize,
    block: Range<usize>,
    payload: &'a Payload,
}

impl<'a> SiteView<'a> {
    pub fn site_id(&self) -> SiteId {
        self.site_id
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn block(&self) -> Range<usize> {
        self.block.clone()
    }

    fn violation(&self, detail: String) -> Error {
        Error::ProtocolViolation {
            site: self.site_id,
            round: self.round,
            detail,
        }
    }

    /// Sub-range of the block in global indices; errors when it leaves the block.
    pub fn checked(&self, range: Range<usize>) -> Result<Range<usize>> {
        if range.start < self.block.start || range.end > self.block.end || range.start > range.end {
            return Err(self.violation(format!(
                "indices {range:?} requested outside block {:?}",
                self.block
            )));
        }
        Ok(range)
    }

    /// Shift a block-relative range to global indices.
    pub fn global(&self, local: Range<usize>) -> Range<usize> {
        local.start + self.block.start..local.end + self.block.start
    }

    pub fn scalars_in(&self, range: Range<usize>) -> Result<&'a [f64]> {
        let range = self.checked(range)?;
        match self.payload {
            Payload::Scalar(v) => Ok(&v[range]),
            Payload::Regression { .. } => Err(Error::param("site holds regression data, not scalars")),
        }
    }

    pub fn regression_in(&self, range: Range<usize>) -> Result<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let range = self.checked(range)?;
        match self.payload {
            Payload::Regression { x, y } => Ok((
                x.slice_axis(Axis(0), (range.start..range.end).into()),
                y.slice_axis(Axis(0), (range.start..range.end).into()),
            )),
            Payload::Scalar(_) => Err(Error::param("site holds scalar data, not regression data")),
        }
    }

    /// The whole block of scalar samples.
    pub fn scalars(&self) -> Result<&'a [f64]> {
        self.scalars_in(self.block())
    }

    /// The whole block of covariates and responses.
    pub fn regression(&self) -> Result<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        self.regression_in(self.block())
    }
}

/// Protocol stage a transcript entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mean,
    Detect,
    Iterate,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Mean => "mean",
            Phase::Detect => "detect",
            Phase::Iterate => "iterate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "mean" => Phase::Mean,
            "detect" => Phase::Detect,
            "iterate" => Phase::Iterate,
            _ => return None,
        })
    }
}

/// One mechanism invocation reported by a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub record: MechanismRecord,
    /// Global sample indices the mechanism read.
    pub block: Range<usize>,
    pub stream_id: u64,
    pub output_hash: String,
}

impl RoundRecord {
    /// Move a block given in local indices to global ones.
    pub fn shifted(mut self, offset: usize) -> Self {
        if !self.block.is_empty() {
            self.block = self.block.start + offset..self.block.end + offset;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteMessage {
    pub payload: Vec<f64>,
    pub records: Vec<RoundRecord>,
}

/// Short stable digest of a released vector.
pub fn hash_values(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t: usize,
    pub k: SiteId,
    pub phase: Phase,
    pub stage: Stage,
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    pub noise_std: f64,
    pub payload_hash: String,
    pub block_start: usize,
    pub block_end: usize,
    pub stream_id: u64,
    pub sparsity: usize,
}

impl TranscriptEntry {
    pub fn record(&self) -> MechanismRecord {
        MechanismRecord {
            stage: self.stage,
            budget: PrivacyBudget {
                epsilon: self.epsilon,
                delta: self.delta,
            },
            sensitivity: self.sensitivity,
            noise_std: self.noise_std,
            sparsity: self.sparsity,
        }
    }

    fn from_record(k: SiteId, phase: Phase, r: RoundRecord) -> Self {
        TranscriptEntry {
            t: r.t,
            k,
            phase,
            stage: r.record.stage,
            epsilon: r.record.budget.epsilon,
            delta: r.record.budget.delta,
            sensitivity: r.record.sensitivity,
            noise_std: r.record.noise_std,
            payload_hash: r.output_hash,
            block_start: r.block.start,
            block_end: r.block.end,
            stream_id: r.stream_id,
            sparsity: r.record.sparsity,
        }
    }
}

pub const TRANSCRIPT_COLUMNS: [&str; 12] = [
    "t",
    "k",
    "stage",
    "epsilon",
    "delta",
    "sensitivity",
    "noise_std",
    "payload_hash",
    "block_start",
    "block_end",
    "stream_id",
    "sparsity",
];

/// Every privatized release of a run, with the per-site budget it was declared under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub declared: PrivacyBudget,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(declared: PrivacyBudget) -> Self {
        Transcript {
            declared,
            entries: Vec::new(),
        }
    }

    pub fn append(&mut self, other: Transcript) {
        self.entries.extend(other.entries);
    }

    /// Number of distinct rounds per phase, maximised over phases.
    pub fn round_count(&self) -> usize {
        self.entries.iter().map(|e| e.t + 1).max().unwrap_or(0)
    }

    /// Add the records of one site; used for computations run outside [`run_protocol`].
    pub fn push_records(&mut self, k: SiteId, phase: Phase, records: Vec<RoundRecord>) {
        self.entries
            .extend(records.into_iter().map(|r| TranscriptEntry::from_record(k, phase, r)));
    }

    /// Line-oriented CSV: a `#` header carrying the declared budget, the
    /// column names, then one line per entry.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# fdp-transfer transcript v1 epsilon={} delta={}\n{}\n",
            self.declared.epsilon,
            self.declared.delta,
            TRANSCRIPT_COLUMNS.join(",")
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{}.{},{},{},{},{},{},{},{},{:016x},{}",
                e.t,
                e.k,
                e.phase.as_str(),
                e.stage.as_str(),
                e.epsilon,
                e.delta,
                e.sensitivity,
                e.noise_std,
                e.payload_hash,
                e.block_start,
                e.block_end,
                e.stream_id,
                e.sparsity
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let perr = |line: usize, detail: String| Error::Parse { line, detail };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty transcript".into()))?;
        let declared = parse_declared(header).ok_or_else(|| perr(ln, "missing '# ... epsilon=.. delta=..' header".into()))?;
        let (ln, cols) = lines.next().ok_or_else(|| perr(2, "missing column header".into()))?;
        if cols != TRANSCRIPT_COLUMNS.join(",") {
            return Err(perr(ln, format!("unexpected columns '{cols}'")));
        }
        let mut entries = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != TRANSCRIPT_COLUMNS.len() {
                return Err(perr(ln, format!("expected {} fields, found {}", TRANSCRIPT_COLUMNS.len(), f.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse::<f64>()
                    .map_err(|_| perr(ln, format!("column {} is not a number: '{}'", TRANSCRIPT_COLUMNS[i], f[i])))
            };
            let int = |i: usize| -> Result<usize> {
                f[i].parse::<usize>()
                    .map_err(|_| perr(ln, format!("column {} is not an integer: '{}'", TRANSCRIPT_COLUMNS[i], f[i])))
            };
            let (phase, stage) = f[2]
                .split_once('.')
                .and_then(|(p, s)| Some((Phase::parse(p)?, Stage::parse(s)?)))
                .ok_or_else(|| perr(ln, format!("unknown stage '{}'", f[2])))?;
            let k = u32::try_from(int(1)?).map_err(|_| perr(ln, "site id out of range".into()))?;
            let stream_id =
                u64::from_str_radix(f[10], 16).map_err(|_| perr(ln, format!("bad stream id '{}'", f[10])))?;
            entries.push(TranscriptEntry {
                t: int(0)?,
                k,
                phase,
                stage,
                epsilon: num(3)?,
                delta: num(4)?,
                sensitivity: num(5)?,
                noise_std: num(6)?,
                payload_hash: f[7].to_string(),
                block_start: int(8)?,
                block_end: int(9)?,
                stream_id,
                sparsity: int(11)?,
            });
        }
        Ok(Transcript { declared, entries })
    }
}

fn parse_declared(line: &str) -> Option<PrivacyBudget> {
    let rest = line.strip_prefix('#')?;
    let mut eps = None;
    let mut delta = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("epsilon=") {
            eps = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("delta=") {
            delta = v.parse().ok();
        }
    }
    PrivacyBudget::new(eps?, delta?).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub site: SiteId,
    pub round: usize,
    pub rule: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerVerdict {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

const BUDGET_SLACK: f64 = 1e-9;

/// Structural audit of a transcript.
///
/// Rules: the budgets of all mechanisms a site runs in one round of one phase
/// sum to at most `declared`; different rounds of a site read disjoint
/// blocks; each mechanism appears at most once per (site, phase, round); and
/// every recorded noise standard deviation is at least the one mandated by
/// its sensitivity and budget.
pub fn audit_ledger(transcript: &Transcript, declared: PrivacyBudget) -> LedgerVerdict {
    let mut violations = Vec::new();
    let mut push = |site, round, rule: &str, detail: String| {
        violations.push(Violation {
            site,
            round,
            rule: rule.to_string(),
            detail,
        })
    };

    let mut groups: BTreeMap<(SiteId, Phase, usize), Vec<&TranscriptEntry>> = BTreeMap::new();
    for e in &transcript.entries {
        groups.entry((e.k, e.phase, e.t)).or_default().push(e);
    }

    for (&(k, phase, t), entries) in &groups {
        let eps: f64 = entries.iter().map(|e| e.epsilon).sum();
        let delta: f64 = entries.iter().map(|e| e.delta).sum();
        if eps > declared.epsilon * (1.0 + BUDGET_SLACK) || delta > declared.delta * (1.0 + BUDGET_SLACK) + 1e-300 {
            push(
                k,
                t,
                "budget",
                format!(
                    "{} round spends ({eps}, {delta}) > declared ({}, {})",
                    phase.as_str(),
                    declared.epsilon,
                    declared.delta
                ),
            );
        }
        let mut seen = BTreeSet::new();
        for e in entries {
            if !seen.insert(e.stage) {
                push(k, t, "duplicate_stage", format!("{}.{} recorded twice", phase.as_str(), e.stage.as_str()));
            }
            if e.stage == Stage::Release {
                continue;
            }
            if !(e.epsilon > 0.0) || !(e.delta >= 0.0) || !(e.sensitivity >= 0.0) {
                push(k, t, "budget", format!("{} has invalid parameters", e.stage.as_str()));
                continue;
            }
            let need = e.record().mandated_noise_std();
            if !(e.noise_std >= need * (1.0 - 1e-9)) {
                push(
                    k,
                    t,
                    "noise",
                    format!(
                        "{}.{} noise std {} below mandated {need}",
                        phase.as_str(),
                        e.stage.as_str(),
                        e.noise_std
                    ),
                );
            }
        }
    }

    // Block disjointness across rounds of the same site.
    let mut per_site: BTreeMap<SiteId, Vec<(Range<usize>, Phase, usize)>> = BTreeMap::new();
    for (&(k, phase, t), entries) in &groups {
        let mut blocks: Vec<Range<usize>> = entries
            .iter()
            .filter(|e| e.block_end > e.block_start)
            .map(|e| e.block_start..e.block_end)
            .collect();
        blocks.sort_by_key(|b| (b.start, b.end));
        blocks.dedup();
        for b in blocks {
            per_site.entry(k).or_default().push((b, phase, t));
        }
    }
    for (k, mut blocks) in per_site {
        blocks.sort_by_key(|(b, _, _)| (b.start, b.end));
        for i in 0..blocks.len() {
            for j in i + 1..blocks.len() {
                let (a, pa, ta) = &blocks[i];
                let (b, pb, tb) = &blocks[j];
                if b.start >= a.end {
                    break;
                }
                if (pa, ta) == (pb, tb) {
                    continue;
                }
                let (later, lp, lt, earlier, ep, et) = if (pa, ta) > (pb, tb) {
                    (a, pa, *ta, b, pb, *tb)
                } else {
                    (b, pb, *tb, a, pa, *ta)
                };
                push(
                    k,
                    lt,
                    "partition",
                    format!(
                        "{} block {later:?} overlaps {} round {et} block {earlier:?}",
                        lp.as_str(),
                        ep.as_str()
                    ),
                );
            }
        }
    }

    violations.sort_by(|a, b| (a.site, a.round, &a.rule).cmp(&(b.site, b.round, &b.rule)));
    LedgerVerdict {
        ok: violations.is_empty(),
        violations,
    }
}

/// Run `rounds` rounds of a protocol over `sites`.
///
/// In round `t` every site's `round_fn` runs (concurrently) on its view for
/// `phase` and the current broadcast state; then `agg_fn` folds the released
/// payloads, ordered by site id, into the next state. Records are committed
/// to the transcript sorted by `(t, k, stage)`.
pub fn run_protocol<B, F, A>(
    sites: &[SiteDataset],
    phase: Phase,
    rounds: usize,
    declared: PrivacyBudget,
    init: B,
    round_fn: F,
    mut agg_fn: A,
) -> Result<(B, Transcript)>
where
    B: Sync,
    F: Fn(&SiteView<'_>, &B) -> Result<SiteMessage> + Sync,
    A: FnMut(usize, &[(SiteId, Vec<f64>)], &B) -> Result<B>,
{
    let mut ids = BTreeSet::new();
    for s in sites {
        if !ids.insert(s.site_id) {
            return Err(Error::param(format!("duplicate site id {}", s.site_id)));
        }
    }
    let mut order: Vec<&SiteDataset> = sites.iter().collect();
    order.sort_by_key(|s| s.site_id);

    let mut state = init;
    let mut transcript = Transcript::new(declared);
    for t in 0..rounds {
        let views = order.iter().map(|s| s.view(phase, t)).collect::<Result<Vec<_>>>()?;
        let messages: Vec<Result<SiteMessage>> = views.par_iter().map(|v| round_fn(v, &state)).collect();
        let mut payloads = Vec::with_capacity(views.len());
        let mut entries = Vec::new();
        for (view, message) in views.iter().zip(messages) {
            let message = message.map_err(|e| e.in_round(t))?;
            for r in message.records {
                if !r.block.is_empty() {
                    view.checked(r.block.clone())?;
                }
                entries.push(TranscriptEntry::from_record(view.site_id, phase, r));
            }
            payloads.push((view.site_id, message.payload));
        }
        entries.sort_by_key(|e| (e.t, e.k, e.stage));
        transcript.entries.extend(entries);
        state = agg_fn(t, &payloads, &state).map_err(|e| e.in_round(t))?;
    }
    Ok((state, transcript))
}
