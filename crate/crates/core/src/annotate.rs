//! Annotation quality control: inter-rater agreement, consensus
//! adjudication, audit sampling, screening metrics, and Kalman-filtered
//! per-group risk weights.
//!
//! * [`fleiss_kappa`] — chance-corrected agreement for a fixed number of
//!   raters per item: `kappa = (P_bar - P_bar_e) / (1 - P_bar_e)`.
//! * [`delphi_adjudicate`] — multi-round consensus over recorded votes;
//!   the first round whose modal label reaches the consensus share decides,
//!   otherwise the case escalates.
//! * [`audit_sample`] — a 10% uniform audit plus a 10% stratified audit of
//!   the high-risk stratum, deduplicated.
//! * [`screening_metrics`] — precision/recall of the accept/reject screen
//!   from its confusion counts.
//! * [`update_group_weights`] — a local-linear-trend Kalman filter per
//!   demographic group, fed tumbling-window means of observed risk, so the
//!   per-group base weight `lambda_g` can drift with the data.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix2, Vector2};
use rand::rngs::StdRng;
use rand::{seq::SliceRandom, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{HIGH_RISK_CUTOFF, RISK_MAX, RISK_MIN};
use crate::error::{Error, Result};
use crate::reward::DEFAULT_LAMBDA0;
use crate::seed::subseed;

/// Share of a batch drawn by each audit arm.
pub const AUDIT_RATE: f64 = 0.10;
/// Consensus share required to close a Delphi case.
pub const DEFAULT_CONSENSUS: f64 = 0.80;
/// Tumbling-window size for group-weight updates.
pub const DEFAULT_WINDOW: usize = 1000;
/// Process-noise variance of the group-weight filter.
pub const DEFAULT_PROCESS_NOISE: f64 = 1e-4;
/// Observation-noise variance of the group-weight filter.
pub const DEFAULT_OBS_NOISE: f64 = 1e-2;
/// Initial per-group weight before any window completes.
pub const INITIAL_GROUP_WEIGHT: f64 = DEFAULT_LAMBDA0;

// --- Fleiss' kappa ---------------------------------------------------------

/// Ratings for `N` items by exactly `n` raters over `k` categories:
/// `counts[i][j]` raters put item `i` in category `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingMatrix {
    counts: Vec<Vec<u64>>,
    n_raters: u64,
}

impl RatingMatrix {
    /// Build from per-item category counts.  Every row must sum to
    /// `n_raters` (variable rater counts are rejected) and `n_raters` must
    /// be at least two.
    pub fn new(counts: Vec<Vec<u64>>, n_raters: u64) -> Result<Self> {
        if n_raters < 2 {
            return Err(Error::invalid("kappa needs at least two raters per item"));
        }
        if counts.is_empty() {
            return Err(Error::invalid("kappa needs at least one rated item"));
        }
        let k = counts[0].len();
        if k == 0 {
            return Err(Error::invalid("kappa needs at least one category"));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(Error::shape(format!(
                    "item {i} has {} categories (expected {k})",
                    row.len()
                )));
            }
            let sum: u64 = row.iter().sum();
            if sum != n_raters {
                return Err(Error::invalid(format!(
                    "item {i} has {sum} ratings (every item needs exactly {n_raters})"
                )));
            }
        }
        Ok(RatingMatrix { counts, n_raters })
    }

    /// Build from per-item rater label lists (`labels[i][r]` in `0..k`).
    pub fn from_labels(labels: &[Vec<usize>], k: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("kappa needs at least one rated item"));
        }
        let n = labels[0].len();
        let mut counts = Vec::with_capacity(labels.len());
        for (i, item) in labels.iter().enumerate() {
            if item.len() != n {
                return Err(Error::invalid(format!(
                    "item {i} has {} ratings, item 0 has {n} (variable rater counts are rejected)",
                    item.len()
                )));
            }
            let mut row = vec![0u64; k];
            for &label in item {
                if label >= k {
                    return Err(Error::invalid(format!(
                        "item {i} uses category {label}, but k = {k}"
                    )));
                }
                row[label] += 1;
            }
            counts.push(row);
        }
        RatingMatrix::new(counts, n as u64)
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn n_categories(&self) -> usize {
        self.counts[0].len()
    }

    pub fn n_raters(&self) -> u64 {
        self.n_raters
    }
}

/// Outcome of [`fleiss_kappa`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum KappaResult {
    /// The usual case: chance agreement below one.
    Defined { kappa: f64, p_bar: f64, p_e: f64 },
    /// Every rating in a single category: chance agreement is one and
    /// kappa is undefined.
    Degenerate { p_bar: f64 },
}

/// Fleiss' kappa over a fixed-rater rating matrix.
///
/// Per-item agreement `P_i = (sum_j n_ij^2 - n) / (n (n - 1))`, observed
/// agreement `P_bar = mean_i P_i`, chance agreement `P_e = sum_j p_j^2`
/// with `p_j` the overall category shares.  Perfect agreement returns
/// exactly `1.0`; a degenerate matrix (all ratings in one category, so
/// `P_e = 1`) returns [`KappaResult::Degenerate`].
pub fn fleiss_kappa(ratings: &RatingMatrix) -> KappaResult {
    let n = ratings.n_raters as f64;
    let n_items = ratings.counts.len() as f64;
    let k = ratings.counts[0].len();

    let mut p_bar = 0.0;
    let mut category_totals = vec![0u64; k];
    for row in &ratings.counts {
        let sq: u64 = row.iter().map(|&c| c * c).sum();
        p_bar += (sq as f64 - n) / (n * (n - 1.0));
        for (j, &c) in row.iter().enumerate() {
            category_totals[j] += c;
        }
    }
    p_bar /= n_items;

    let total = n_items * n;
    let p_e: f64 = category_totals
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p
        })
        .sum();

    if p_e >= 1.0 {
        // Exact when it happens: all mass in one category.
        KappaResult::Degenerate { p_bar }
    } else {
        KappaResult::Defined { kappa: (p_bar - p_e) / (1.0 - p_e), p_bar, p_e }
    }
}

// --- Delphi adjudication ---------------------------------------------------

/// How a Delphi case closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum DelphiDecision {
    /// Consensus reached in round `round` (1-based) on `label` with the
    /// given vote share.
    Consensus { label: String, round: usize, share: f64 },
    /// No round reached consensus within the round budget.
    Escalation { rounds_used: usize },
}

/// Full adjudication outcome, with the per-round tallies retained for the
/// audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelphiOutcome {
    pub decision: DelphiDecision,
    /// Vote tallies of every examined round, in order.
    pub tallies: Vec<BTreeMap<String, usize>>,
}

/// Adjudicate recorded voting rounds.
///
/// Rounds are examined in order (at most `max_rounds` of them); the first
/// whose modal label holds at least `consensus` of that round's votes
/// decides the case, and a modal tie resolves to the lexicographically
/// smallest label.  Exhausting the rounds escalates.  Every examined round
/// needs at least three votes.
pub fn delphi_adjudicate(
    rounds: &[Vec<String>],
    consensus: f64,
    max_rounds: usize,
) -> Result<DelphiOutcome> {
    if !consensus.is_finite() || !(0.5..=1.0).contains(&consensus) {
        return Err(Error::invalid(format!(
            "consensus share must lie in [0.5, 1.0], got {consensus}"
        )));
    }
    if max_rounds == 0 {
        return Err(Error::invalid("max_rounds must be at least 1"));
    }
    if rounds.is_empty() {
        return Err(Error::invalid("adjudication needs at least one round of votes"));
    }

    let mut tallies = Vec::new();
    for (i, round) in rounds.iter().take(max_rounds).enumerate() {
        if round.is_empty() {
            return Err(Error::invalid(format!("round {} has no votes", i + 1)));
        }
        if round.len() < 3 {
            return Err(Error::invalid(format!(
                "round {} has {} votes (panels need at least 3)",
                i + 1,
                round.len()
            )));
        }
        let mut tally: BTreeMap<String, usize> = BTreeMap::new();
        for vote in round {
            *tally.entry(vote.clone()).or_insert(0) += 1;
        }
        // BTreeMap iterates labels in sorted order, so on tied counts the
        // lexicographically smallest label wins.
        let (label, &count) = tally
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("round is nonempty");
        let share = count as f64 / round.len() as f64;
        let label = label.clone();
        tallies.push(tally);
        if share >= consensus {
            return Ok(DelphiOutcome {
                decision: DelphiDecision::Consensus { label, round: i + 1, share },
                tallies,
            });
        }
    }
    Ok(DelphiOutcome {
        decision: DelphiDecision::Escalation { rounds_used: tallies.len() },
        tallies,
    })
}

// --- Audit sampling --------------------------------------------------------

/// One audited item with the arm(s) that selected it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub id: u32,
    /// Selected by the uniform arm.
    pub uniform: bool,
    /// Selected by the stratified high-risk arm.
    pub stratified: bool,
    /// The item's risk score meets the high-risk cutoff.
    pub high_risk: bool,
}

/// Result of [`audit_sample`]: the deduplicated union of both arms,
/// sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub items: Vec<AuditItem>,
    pub uniform_quota: usize,
    pub stratified_quota: usize,
    /// No item met the high-risk cutoff, so the stratified arm is empty.
    pub empty_stratum: bool,
}

/// Draw the audit set for a batch of `(id, risk_score)` items: 10% of the
/// batch uniformly, plus 10% of the batch drawn from the high-risk stratum
/// (risk at or above [`HIGH_RISK_CUTOFF`]), both without replacement and
/// rounded up.  The union is deduplicated and sorted by id; the same seed
/// reproduces the same set.
pub fn audit_sample(batch: &[(u32, f64)], seed: u64) -> Result<AuditSample> {
    if batch.is_empty() {
        return Err(Error::invalid("audit needs a nonempty batch"));
    }
    let mut seen = BTreeSet::new();
    for &(id, risk) in batch {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate item id {id} in audit batch")));
        }
        if !risk.is_finite() || !(RISK_MIN..=RISK_MAX).contains(&risk) {
            return Err(Error::invalid(format!(
                "item {id} risk {risk} outside [{RISK_MIN}, {RISK_MAX}]"
            )));
        }
    }

    let n = batch.len();
    let quota = (AUDIT_RATE * n as f64).ceil() as usize;

    let mut uniform_pool: Vec<u32> = batch.iter().map(|&(id, _)| id).collect();
    let mut rng = StdRng::seed_from_u64(subseed(seed, "audit/uniform"));
    uniform_pool.shuffle(&mut rng);
    let uniform: BTreeSet<u32> = uniform_pool.into_iter().take(quota).collect();

    let mut stratum: Vec<u32> = batch
        .iter()
        .filter(|&&(_, risk)| risk >= HIGH_RISK_CUTOFF)
        .map(|&(id, _)| id)
        .collect();
    let empty_stratum = stratum.is_empty();
    let stratified_quota = quota.min(stratum.len());
    let mut rng = StdRng::seed_from_u64(subseed(seed, "audit/stratified"));
    stratum.shuffle(&mut rng);
    let stratified: BTreeSet<u32> = stratum.into_iter().take(stratified_quota).collect();

    let high_risk: BTreeSet<u32> = batch
        .iter()
        .filter(|&&(_, risk)| risk >= HIGH_RISK_CUTOFF)
        .map(|&(id, _)| id)
        .collect();

    let items = uniform
        .union(&stratified)
        .map(|&id| AuditItem {
            id,
            uniform: uniform.contains(&id),
            stratified: stratified.contains(&id),
            high_risk: high_risk.contains(&id),
        })
        .collect();

    Ok(AuditSample { items, uniform_quota: quota, stratified_quota, empty_stratum })
}

// --- Screening metrics -----------------------------------------------------

/// Confusion counts of the accept/reject screen against gold
/// acceptable/rejectable labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    /// Accepted and acceptable.
    pub accept_acceptable: u64,
    /// Accepted but rejectable (missed rejection).
    pub accept_rejectable: u64,
    /// Rejected but acceptable (false rejection).
    pub reject_acceptable: u64,
    /// Rejected and rejectable.
    pub reject_rejectable: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.accept_acceptable
            + self.accept_rejectable
            + self.reject_acceptable
            + self.reject_rejectable
    }
}

/// Screening quality as fractions in `[0, 1]`; a metric whose denominator
/// is zero is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningMetrics {
    /// Of everything accepted, the acceptable share.
    pub precision_accept: Option<f64>,
    /// Of everything rejected, the rejectable share.
    pub precision_reject: Option<f64>,
    /// Of everything rejectable, the rejected share.
    pub recall_rejectable: Option<f64>,
    /// Of everything rejected, the acceptable share (false-positive
    /// rejections).
    pub false_positive_rejection: Option<f64>,
}

/// Compute the four screening metrics from confusion counts.  An all-zero
/// table is an error; each metric is `None` when its own denominator is
/// zero.
pub fn screening_metrics(counts: &ConfusionCounts) -> Result<ScreeningMetrics> {
    if counts.total() == 0 {
        return Err(Error::invalid("screening metrics need at least one screened item"));
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let accepted = counts.accept_acceptable + counts.accept_rejectable;
    let rejected = counts.reject_acceptable + counts.reject_rejectable;
    let rejectable = counts.accept_rejectable + counts.reject_rejectable;
    Ok(ScreeningMetrics {
        precision_accept: ratio(counts.accept_acceptable, accepted),
        precision_reject: ratio(counts.reject_rejectable, rejected),
        recall_rejectable: ratio(counts.reject_rejectable, rejectable),
        false_positive_rejection: ratio(counts.reject_acceptable, rejected),
    })
}

// --- Kalman-filtered group weights ----------------------------------------

/// State of one group's local-linear-trend filter: a weight level, its
/// drift per window, and the 2x2 state covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub level: f64,
    pub trend: f64,
    /// Row-major covariance `[[p00, p01], [p10, p11]]`.
    pub cov: [[f64; 2]; 2],
    /// Number of observations folded in.
    pub updates: u64,
}

impl KalmanState {
    /// Fresh state at `level` with zero trend and identity covariance.
    pub fn new(level: f64) -> Result<Self> {
        if !level.is_finite() {
            return Err(Error::invalid(format!("initial level must be finite, got {level}")));
        }
        Ok(KalmanState { level, trend: 0.0, cov: [[1.0, 0.0], [0.0, 1.0]], updates: 0 })
    }
}

/// One predict-update step of the local-linear-trend filter.
///
/// Transition `F = [[1, 1], [0, 1]]` (level absorbs trend), observation
/// `H = [1, 0]`, process noise `q * I`, observation variance `r`.  The
/// covariance update uses the Joseph form, which keeps it symmetric
/// positive semidefinite in floating point.
pub fn kalman_update(state: &KalmanState, observation: f64, q: f64, r: f64) -> Result<KalmanState> {
    if !observation.is_finite() {
        return Err(Error::invalid(format!("observation must be finite, got {observation}")));
    }
    if !q.is_finite() || q < 0.0 {
        return Err(Error::invalid(format!("process noise must be finite and nonnegative, got {q}")));
    }
    if !r.is_finite() || r <= 0.0 {
        return Err(Error::invalid(format!("observation noise must be finite and positive, got {r}")));
    }

    let f = Matrix2::new(1.0, 1.0, 0.0, 1.0);
    let h = Vector2::new(1.0, 0.0);
    let p = Matrix2::new(
        state.cov[0][0],
        state.cov[0][1],
        state.cov[1][0],
        state.cov[1][1],
    );

    // Predict.
    let x_pred = Vector2::new(state.level + state.trend, state.trend);
    let p_pred = f * p * f.transpose() + Matrix2::identity() * q;

    // Update.
    let innovation = observation - x_pred[0];
    let s = p_pred[(0, 0)] + r;
    let k = p_pred * h / s;
    let x = x_pred + k * innovation;
    let ikh = Matrix2::identity() - k * h.transpose();
    let p_new = ikh * p_pred * ikh.transpose() + k * r * k.transpose();

    Ok(KalmanState {
        level: x[0],
        trend: x[1],
        cov: [[p_new[(0, 0)], p_new[(0, 1)]], [p_new[(1, 0)], p_new[(1, 1)]]],
        updates: state.updates + 1,
    })
}

/// One group's filtered weight trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrajectory {
    pub group: u32,
    /// Filtered level after each completed window, in order.
    pub lambdas: Vec<f64>,
    /// Final filter state.
    pub state: KalmanState,
    /// Observations seen (including any incomplete trailing window).
    pub n_observations: usize,
    /// The group had no complete window, so it retains the initial weight.
    pub flagged_empty: bool,
}

impl GroupTrajectory {
    /// Current weight: the last filtered level, or the initial weight when
    /// no window has completed.
    pub fn current(&self) -> f64 {
        self.lambdas.last().copied().unwrap_or(INITIAL_GROUP_WEIGHT)
    }
}

/// Trajectories for all groups, in group order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub groups: Vec<GroupTrajectory>,
    pub window: usize,
}

/// Run the per-group weight filters over an observation stream.
///
/// `stream` holds `(group, observed_risk_weight)` pairs in arrival order.
/// Each group's observations are cut into tumbling (non-overlapping)
/// windows of `window` items; each completed window's mean is one filter
/// observation.  Every filter starts at [`INITIAL_GROUP_WEIGHT`]; a group
/// with no complete window keeps it and is flagged.
pub fn update_group_weights(
    stream: &[(u32, f64)],
    n_groups: usize,
    window: usize,
    q: f64,
    r: f64,
) -> Result<GroupWeights> {
    if n_groups == 0 || n_groups > crate::corpus::MAX_GROUPS {
        return Err(Error::invalid(format!(
            "group count must lie in 1..={}, got {n_groups}",
            crate::corpus::MAX_GROUPS
        )));
    }
    if window == 0 {
        return Err(Error::invalid("window size must be at least 1"));
    }
    let mut per_group: Vec<Vec<f64>> = vec![Vec::new(); n_groups];
    for &(group, obs) in stream {
        if group as usize >= n_groups {
            return Err(Error::invalid(format!(
                "observation for group {group}, but only {n_groups} groups exist"
            )));
        }
        if !obs.is_finite() {
            return Err(Error::invalid(format!("non-finite observation for group {group}")));
        }
        per_group[group as usize].push(obs);
    }

    let mut groups = Vec::with_capacity(n_groups);
    for (g, obs) in per_group.iter().enumerate() {
        let mut state = KalmanState::new(INITIAL_GROUP_WEIGHT)?;
        let mut lambdas = Vec::new();
        for chunk in obs.chunks_exact(window) {
            let mean = chunk.iter().sum::<f64>() / window as f64;
            state = kalman_update(&state, mean, q, r)?;
            lambdas.push(state.level);
        }
        groups.push(GroupTrajectory {
            group: g as u32,
            flagged_empty: lambdas.is_empty(),
            lambdas,
            state,
            n_observations: obs.len(),
        });
    }
    Ok(GroupWeights { groups, window })
}
