//! Pairwise CARPO/DPO losses, analytic gradients, the Bradley-Terry link,
//! and the inference-time risk guard.
//!
//! For a preference pair `(y_w, y_l)` under prompt `x`, the implied
//! advantage gap between trained policy `pi` and reference `pi_ref` is
//!
//! ```text
//!   z = beta * [ log(pi(y_w|x)/pi_ref(y_w|x)) - log(pi(y_l|x)/pi_ref(y_l|x)) ]
//! ```
//!
//! (within one row the two log-partition terms cancel, so `z` reduces to a
//! difference of raw logit gaps — exact, no exponentials).  The losses are
//!
//! ```text
//!   dpo   = mean_i [ -log sigmoid(z_i) ]
//!   carpo = mean_i [ -log sigmoid(z_i) + lambda_i * max(r_s(y_w) - r_s(y_l), 0) ]
//! ```
//!
//! The safety hinge penalizes preferring the riskier response but does not
//! depend on the policy parameters, so the CARPO gradient with respect to
//! the logits equals the DPO gradient exactly; with all `lambda_i = 0` the
//! two losses agree bit for bit.
//!
//! [`apply_guard`] and [`sweep_threshold`] implement the deployment-side
//! risk gate: a response whose predicted risk exceeds the threshold is
//! replaced by a fixed refusal, and the sweep traces the refusal/leakage
//! trade-off over a threshold grid.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PreferencePair, Prompt, ResponseCandidate};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus};
use crate::policy::PolicyTable;
use crate::reward::RewardEnsemble;
use crate::seed::subseed;

/// Fixed refusal text returned when the risk guard trips.
pub const REFUSAL_TEXT: &str =
    "I'd rather not go into that. Can we pick something else to talk about together?";

/// Bradley-Terry preference probability
/// `p(y_w > y_l) = sigmoid(delta_w - delta_l)`.
///
/// Equal advantages give exactly one half.
pub fn bt_probability(delta_w: f64, delta_l: f64) -> f64 {
    sigmoid(delta_w - delta_l)
}

/// One preference pair resolved to table coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedPair {
    /// Prompt row.
    pub x: usize,
    /// Winner column within the row.
    pub winner: usize,
    /// Loser column within the row.
    pub loser: usize,
    /// Annotated risk gap `r_s(y_w) - r_s(y_l)` (hinged at zero in the
    /// loss).
    pub risk_gap: f64,
}

/// A batch of indexed pairs with per-pair risk weights and the shared
/// inverse regularization strength `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pairs: Vec<IndexedPair>,
    lambdas: Vec<f64>,
    beta: f64,
}

impl PairBatch {
    /// Build a batch from already-indexed pairs.
    pub fn new(pairs: Vec<IndexedPair>, lambdas: Vec<f64>, beta: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("pair batch must contain at least one pair"));
        }
        if pairs.len() != lambdas.len() {
            return Err(Error::shape(format!(
                "{} pairs but {} lambda weights",
                pairs.len(),
                lambdas.len()
            )));
        }
        if !lambdas.iter().all(|&l| l.is_finite() && l >= 0.0) {
            return Err(Error::invalid("lambda weights must be finite and nonnegative"));
        }
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be finite and positive, got {beta}")));
        }
        if !pairs.iter().all(|p| p.risk_gap.is_finite()) {
            return Err(Error::invalid("risk gaps must be finite"));
        }
        Ok(PairBatch { pairs, lambdas, beta })
    }

    /// Resolve corpus pairs (by id) into table coordinates.  Every
    /// referenced prompt and candidate must exist in the corpus.
    pub fn from_corpus(
        corpus: &Corpus,
        pairs: &[PreferencePair],
        lambdas: Vec<f64>,
        beta: f64,
    ) -> Result<Self> {
        let mut indexed = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let x = corpus.prompt_index(pair.prompt_id).ok_or_else(|| {
                Error::invalid(format!("pair references unknown prompt {}", pair.prompt_id))
            })?;
            let winner = corpus.candidate_index(x, pair.winner_id).ok_or_else(|| {
                Error::invalid(format!(
                    "pair references unknown winner {} under prompt {}",
                    pair.winner_id, pair.prompt_id
                ))
            })?;
            let loser = corpus.candidate_index(x, pair.loser_id).ok_or_else(|| {
                Error::invalid(format!(
                    "pair references unknown loser {} under prompt {}",
                    pair.loser_id, pair.prompt_id
                ))
            })?;
            indexed.push(IndexedPair {
                x,
                winner,
                loser,
                risk_gap: pair.winner_scores.1 - pair.loser_scores.1,
            });
        }
        PairBatch::new(indexed, lambdas, beta)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn pairs(&self) -> &[IndexedPair] {
        &self.pairs
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// The implied advantage gap `z_i` for one pair.  The row's
    /// log-partition terms cancel between winner and loser, leaving raw
    /// logit differences.
    fn z(&self, i: usize, theta: &PolicyTable, reference: &PolicyTable) -> f64 {
        let p = &self.pairs[i];
        let th = &theta.logits()[p.x];
        let rf = &reference.logits()[p.x];
        self.beta * ((th[p.winner] - th[p.loser]) - (rf[p.winner] - rf[p.loser]))
    }

    fn check_tables(&self, theta: &PolicyTable, reference: &PolicyTable) -> Result<()> {
        if theta.shape() != reference.shape() {
            return Err(Error::shape("policy and reference tables must share a shape"));
        }
        let shape = theta.shape();
        for p in &self.pairs {
            let m = *shape
                .get(p.x)
                .ok_or_else(|| Error::invalid(format!("pair row {} out of range", p.x)))?;
            if p.winner >= m || p.loser >= m {
                return Err(Error::invalid(format!(
                    "pair columns ({}, {}) out of range for row {} ({m} candidates)",
                    p.winner, p.loser, p.x
                )));
            }
        }
        Ok(())
    }
}

/// Mean CARPO loss of a batch: `-log sigmoid(z_i)` plus the
/// uncertainty-weighted safety hinge `lambda_i * max(risk_gap_i, 0)`.
pub fn carpo_loss(batch: &PairBatch, theta: &PolicyTable, reference: &PolicyTable) -> Result<f64> {
    batch.check_tables(theta, reference)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let z = batch.z(i, theta, reference);
        total += softplus(-z) + batch.lambdas[i] * batch.pairs[i].risk_gap.max(0.0);
    }
    Ok(total / batch.len() as f64)
}

/// Mean DPO loss of a batch: the CARPO loss without the safety hinge.
pub fn dpo_loss(batch: &PairBatch, theta: &PolicyTable, reference: &PolicyTable) -> Result<f64> {
    batch.check_tables(theta, reference)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let z = batch.z(i, theta, reference);
        total += softplus(-z);
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of [`carpo_loss`] with respect to the policy logits,
/// same ragged shape as `theta`.
///
/// Only winner and loser entries of rows touched by the batch are nonzero:
/// `d/dz[-log sigmoid(z)] = -sigmoid(-z)` and `dz/dtheta = +-beta`.  The
/// hinge term is constant in `theta`, so this is also the exact DPO
/// gradient.
pub fn carpo_gradient(
    batch: &PairBatch,
    theta: &PolicyTable,
    reference: &PolicyTable,
) -> Result<Vec<Vec<f64>>> {
    batch.check_tables(theta, reference)?;
    let mut grad: Vec<Vec<f64>> = theta.shape().iter().map(|&m| vec![0.0; m]).collect();
    let scale = 1.0 / batch.len() as f64;
    for i in 0..batch.len() {
        let z = batch.z(i, theta, reference);
        let s = sigmoid(-z); // -d/dz of -log sigmoid(z), negated below
        let p = &batch.pairs[i];
        grad[p.x][p.winner] -= scale * batch.beta * s;
        grad[p.x][p.loser] += scale * batch.beta * s;
    }
    Ok(grad)
}

/// Central-difference gradient of [`carpo_loss`], for gradient checking.
pub fn finite_difference_gradient(
    batch: &PairBatch,
    theta: &PolicyTable,
    reference: &PolicyTable,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::invalid(format!("step size must be finite and positive, got {h}")));
    }
    let mut grad: Vec<Vec<f64>> = theta.shape().iter().map(|&m| vec![0.0; m]).collect();
    for x in 0..theta.n_rows() {
        for y in 0..theta.logits()[x].len() {
            let mut plus = theta.clone();
            plus.logits_mut()[x][y] += h;
            let mut minus = theta.clone();
            minus.logits_mut()[x][y] -= h;
            grad[x][y] =
                (carpo_loss(batch, &plus, reference)? - carpo_loss(batch, &minus, reference)?)
                    / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Result of [`gradient_check`].
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    /// Largest relative error between analytic and central-difference
    /// gradients across all instances.
    pub max_rel_err: f64,
}

/// Compare analytic and central-difference gradients on `instances` random
/// batches; returns the worst relative error (infinity-norm of the
/// difference over the larger infinity-norm).
pub fn gradient_check(seed: u64, instances: usize) -> Result<GradCheckReport> {
    if instances == 0 {
        return Err(Error::invalid("gradient check needs at least one instance"));
    }
    let mut rng = StdRng::seed_from_u64(subseed(seed, "grad-check"));
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n_rows = rng.random_range(1..=4usize);
        let shape: Vec<usize> = (0..n_rows).map(|_| rng.random_range(2..=6usize)).collect();
        let sample_table = |rng: &mut StdRng| -> Vec<Vec<f64>> {
            shape
                .iter()
                .map(|&m| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let theta = PolicyTable::new(sample_table(&mut rng))?;
        let reference = PolicyTable::new(sample_table(&mut rng))?;
        let beta = rng.random_range(0.05..2.0);
        let n_pairs = rng.random_range(1..=8usize);
        let mut pairs = Vec::with_capacity(n_pairs);
        let mut lambdas = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let x = rng.random_range(0..n_rows);
            let winner = rng.random_range(0..shape[x]);
            let loser = loop {
                let l = rng.random_range(0..shape[x]);
                if l != winner {
                    break l;
                }
            };
            pairs.push(IndexedPair { x, winner, loser, risk_gap: rng.random_range(-2.0..2.0) });
            lambdas.push(rng.random_range(0.0..1.0));
        }
        let batch = PairBatch::new(pairs, lambdas, beta)?;
        let analytic = carpo_gradient(&batch, &theta, &reference)?;
        let numeric = finite_difference_gradient(&batch, &theta, &reference, 1e-5)?;
        worst = worst.max(gradient_rel_err(&analytic, &numeric));
    }
    Ok(GradCheckReport { instances, max_rel_err: worst })
}

/// Relative error between two gradients: infinity-norm of the difference
/// over the larger infinity-norm (floored to dodge division by zero).
pub fn gradient_rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let norm = |g: &[Vec<f64>]| {
        g.iter()
            .flat_map(|row| row.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    };
    let diff = a
        .iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| (x - y).abs()))
        .fold(0.0f64, f64::max);
    diff / norm(a).max(norm(b)).max(1e-12)
}

/// Outcome of the deployment risk gate for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum GuardDecision {
    /// Predicted risk at or below the threshold: the response goes out.
    Pass { response_id: u32, risk: f64, threshold: f64 },
    /// Predicted risk above the threshold: the fixed refusal goes out.
    Refuse { response_id: u32, risk: f64, threshold: f64, text: String },
}

/// Gate one response: refuse iff the predicted risk strictly exceeds the
/// threshold.  Both values must be finite and nonnegative.
pub fn apply_guard(risk: f64, threshold: f64, response_id: u32) -> Result<GuardDecision> {
    if !risk.is_finite() || risk < 0.0 {
        return Err(Error::invalid(format!("predicted risk must be finite and nonnegative, got {risk}")));
    }
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::invalid(format!("threshold must be finite and nonnegative, got {threshold}")));
    }
    Ok(if risk > threshold {
        GuardDecision::Refuse { response_id, risk, threshold, text: REFUSAL_TEXT.to_string() }
    } else {
        GuardDecision::Pass { response_id, risk, threshold }
    })
}

/// One (prompt, response) cell to gate during a threshold sweep, with its
/// gold high-risk flag.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub prompt: Prompt,
    pub candidate: ResponseCandidate,
    pub gold_high_risk: bool,
}

/// One operating point of the refusal/leakage trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub t: f64,
    /// Fraction of items the guard refuses at this threshold.
    pub refusal_rate: f64,
    /// Fraction of all items that are gold high-risk yet pass the guard.
    pub leakage_rate: f64,
}

/// Refusal/leakage curve over a strictly increasing threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub points: Vec<ThresholdPoint>,
}

impl ThresholdCurve {
    /// The knee: the point minimizing `refusal + leakage`, first (smallest
    /// threshold) on ties.
    pub fn knee(&self) -> &ThresholdPoint {
        self.points
            .iter()
            .min_by(|a, b| {
                (a.refusal_rate + a.leakage_rate)
                    .partial_cmp(&(b.refusal_rate + b.leakage_rate))
                    .expect("rates are finite")
            })
            .expect("curve is nonempty")
    }

    /// Write the curve as CSV with header `t,refusal_rate,leakage_rate`.
    pub fn to_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "t,refusal_rate,leakage_rate")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.t, p.refusal_rate, p.leakage_rate)?;
        }
        Ok(())
    }
}

/// Trace the guard's refusal and leakage rates over a threshold grid.
///
/// For each `t`: refusal is the fraction of items with predicted risk
/// strictly above `t`; leakage is the fraction of all items that are gold
/// high-risk but pass.  The grid must be strictly increasing with
/// nonnegative entries.
pub fn sweep_threshold(
    eval_set: &[EvalItem],
    ensemble: &RewardEnsemble,
    t_grid: &[f64],
) -> Result<ThresholdCurve> {
    if eval_set.is_empty() {
        return Err(Error::invalid("threshold sweep needs a nonempty evaluation set"));
    }
    if t_grid.is_empty() {
        return Err(Error::invalid("threshold sweep needs a nonempty grid"));
    }
    for t in t_grid {
        if !t.is_finite() || *t < 0.0 {
            return Err(Error::invalid(format!("thresholds must be finite and nonnegative, got {t}")));
        }
    }
    if !t_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid("threshold grid must be strictly increasing"));
    }

    let risks: Vec<(f64, bool)> = eval_set
        .iter()
        .map(|item| {
            ensemble
                .predict(&item.prompt, &item.candidate)
                .map(|pred| (pred.r_s, item.gold_high_risk))
        })
        .collect::<Result<_>>()?;

    let n = risks.len() as f64;
    let points = t_grid
        .iter()
        .map(|&t| {
            let mut refused = 0usize;
            let mut leaked = 0usize;
            for &(risk, gold) in &risks {
                if risk > t {
                    refused += 1;
                } else if gold {
                    leaked += 1;
                }
            }
            ThresholdPoint {
                t,
                refusal_rate: refused as f64 / n,
                leakage_rate: leaked as f64 / n,
            }
        })
        .collect();
    Ok(ThresholdCurve { points })
}

/// Build an inclusive threshold grid from `start` to `end` with step
/// `step` (the end point is included when it lands within half a step).
pub fn threshold_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !start.is_finite() || !end.is_finite() || !step.is_finite() {
        return Err(Error::invalid("grid bounds and step must be finite"));
    }
    if start < 0.0 || end < start || step <= 0.0 {
        return Err(Error::invalid(format!(
            "invalid grid {start}:{end}:{step} (need 0 <= start <= end and step > 0)"
        )));
    }
    let count = ((end - start) / step + 0.5).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}
