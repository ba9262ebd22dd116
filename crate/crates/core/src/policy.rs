//! Tabular softmax policies and the closed-form KL-regularized optimum.
//!
//! A policy over a corpus with `n` prompts and `m_x` candidates per prompt
//! is a ragged logit table; row `x` induces the distribution
//! `pi(y|x) = softmax(logits[x])`.  Given a risk-adjusted advantage table
//! `delta` and inverse-strength `beta`, the objective
//!
//! ```text
//!   J(pi) = E_x E_{y ~ pi}[delta(x, y)] - beta * KL(pi || pi_ref)
//! ```
//!
//! is maximized in closed form by
//!
//! ```text
//!   pi*(y|x) = pi_ref(y|x) * exp(delta(x, y) / beta) / Z(x)
//!   Z(x)     = sum_y' pi_ref(y'|x) * exp(delta(x, y') / beta)
//! ```
//!
//! which inverts to the identity used by the pairwise loss:
//! `delta(x, y) = beta * log(pi*(y|x) / pi_ref(y|x)) + beta * log Z(x)`.
//! Everything here runs in log space so small `beta` stays finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, logsumexp, softmax};

/// Schema tag for serialized policies.
pub const POLICY_SCHEMA: &str = "carpo-policy/1";

/// A ragged table of logits; row `x` holds one logit per response candidate
/// of prompt `x`.  Logits are free parameters — rows need not be normalized
/// and only differences within a row matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    logits: Vec<Vec<f64>>,
}

impl PolicyTable {
    /// Build a table from raw logits.  Rows must be nonempty and entries
    /// finite.
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        for (x, row) in logits.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::invalid(format!("policy row {x} is empty")));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("policy row {x} has a non-finite logit")));
            }
        }
        Ok(PolicyTable { logits })
    }

    /// The uniform policy of the given shape (all-zero logits).
    pub fn uniform(shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("policy shape has an empty row"));
        }
        Ok(PolicyTable { logits: shape.iter().map(|&m| vec![0.0; m]).collect() })
    }

    /// Number of prompt rows.
    pub fn n_rows(&self) -> usize {
        self.logits.len()
    }

    /// Candidate count per row.
    pub fn shape(&self) -> Vec<usize> {
        self.logits.iter().map(Vec::len).collect()
    }

    /// Raw logits, row-major.
    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    /// Mutable access for gradient steps.  Callers must keep entries
    /// finite; [`PolicyTable::check_finite`] re-validates after updates.
    pub(crate) fn logits_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.logits
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        for (x, row) in self.logits.iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "policy row {x} became non-finite during an update"
                )));
            }
        }
        Ok(())
    }

    /// The probability distribution of row `x`.
    pub fn row_distribution(&self, x: usize) -> Result<Vec<f64>> {
        let row = self
            .logits
            .get(x)
            .ok_or_else(|| Error::invalid(format!("row {x} out of range ({} rows)", self.n_rows())))?;
        Ok(softmax(row))
    }

    /// Log-probabilities of row `x`.
    pub fn row_log_distribution(&self, x: usize) -> Result<Vec<f64>> {
        let row = self
            .logits
            .get(x)
            .ok_or_else(|| Error::invalid(format!("row {x} out of range ({} rows)", self.n_rows())))?;
        Ok(log_softmax(row))
    }

    /// Write the policy as `carpo-policy/1` JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let artifact = PolicyArtifact { schema: POLICY_SCHEMA.to_string(), logits: self.logits.clone() };
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &artifact)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Read a `carpo-policy/1` JSON policy.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let artifact: PolicyArtifact = serde_json::from_reader(BufReader::new(file))?;
        if artifact.schema != POLICY_SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported policy schema {:?} (expected {:?})",
                artifact.schema, POLICY_SCHEMA
            )));
        }
        PolicyTable::new(artifact.logits)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyArtifact {
    schema: String,
    logits: Vec<Vec<f64>>,
}

/// A ragged table of risk-adjusted advantages `delta(x, y)` with the
/// regularization strength `beta` they are paired with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    values: Vec<Vec<f64>>,
    beta: f64,
}

impl AdvantageTable {
    /// Build a table; `beta` must be finite and positive, values finite.
    pub fn new(values: Vec<Vec<f64>>, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::invalid(format!("beta must be finite and positive, got {beta}")));
        }
        for (x, row) in values.iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("advantage row {x} has a non-finite value")));
            }
        }
        Ok(AdvantageTable { values, beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    fn check_shape(&self, policy: &PolicyTable) -> Result<()> {
        if policy.shape() != self.values.iter().map(Vec::len).collect::<Vec<_>>() {
            return Err(Error::shape(
                "advantage table shape does not match the policy table",
            ));
        }
        Ok(())
    }
}

/// Uniform prompt weights `mu(x) = 1/n`.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    if n == 0 {
        Vec::new()
    } else {
        vec![1.0 / n as f64; n]
    }
}

fn check_weights(mu: &[f64], n_rows: usize) -> Result<()> {
    if mu.len() != n_rows {
        return Err(Error::shape(format!(
            "{} prompt weights for {} rows",
            mu.len(),
            n_rows
        )));
    }
    if !mu.iter().all(|&w| w.is_finite() && w >= 0.0) {
        return Err(Error::invalid("prompt weights must be finite and nonnegative"));
    }
    Ok(())
}

/// Exact KL divergence `KL(p || q) = E_x mu Sum_y p(y|x) log(p(y|x)/q(y|x))`
/// between two policies of identical shape, under prompt weights `mu`.
///
/// Computed from log-softmax differences, so identical logit tables give
/// exactly zero and the value is always nonnegative up to rounding.
pub fn kl_divergence(p: &PolicyTable, q: &PolicyTable, mu: &[f64]) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape("KL requires policies of identical shape"));
    }
    check_weights(mu, p.n_rows())?;
    let mut total = 0.0;
    for x in 0..p.n_rows() {
        if mu[x] == 0.0 {
            continue;
        }
        let lp = log_softmax(&p.logits[x]);
        let lq = log_softmax(&q.logits[x]);
        let row: f64 = lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| {
                let pa = a.exp();
                // p log(p/q); a row with pa == 0 contributes nothing.
                if pa == 0.0 {
                    0.0
                } else {
                    pa * (a - b)
                }
            })
            .sum();
        total += mu[x] * row;
    }
    Ok(total)
}

/// Closed-form maximizer of the KL-regularized objective:
/// `pi*(y|x) proportional to pi_ref(y|x) * exp(delta(x, y) / beta)`.
///
/// The returned table stores the optimal policy's log-probabilities as
/// logits (log-space throughout, so tiny `beta` with bounded advantages
/// stays finite).
pub fn optimal_policy(reference: &PolicyTable, adv: &AdvantageTable) -> Result<PolicyTable> {
    adv.check_shape(reference)?;
    let beta = adv.beta();
    let mut rows = Vec::with_capacity(reference.n_rows());
    for x in 0..reference.n_rows() {
        let log_ref = log_softmax(&reference.logits[x]);
        let tilted: Vec<f64> = log_ref
            .iter()
            .zip(&adv.values[x])
            .map(|(&lr, &d)| lr + d / beta)
            .collect();
        let row = log_softmax(&tilted);
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "optimal policy row {x} is non-finite (beta = {beta})"
            )));
        }
        rows.push(row);
    }
    PolicyTable::new(rows)
}

/// Log of the partition function
/// `Z(x) = sum_y pi_ref(y|x) * exp(delta(x, y) / beta)`.
pub fn log_partition(reference: &PolicyTable, adv: &AdvantageTable, x: usize) -> Result<f64> {
    adv.check_shape(reference)?;
    if x >= reference.n_rows() {
        return Err(Error::invalid(format!(
            "row {x} out of range ({} rows)",
            reference.n_rows()
        )));
    }
    let log_ref = log_softmax(&reference.logits[x]);
    let tilted: Vec<f64> = log_ref
        .iter()
        .zip(&adv.values[x])
        .map(|(&lr, &d)| lr + d / adv.beta())
        .collect();
    Ok(logsumexp(&tilted))
}

/// Partition function `Z(x)`; see [`log_partition`].
pub fn partition(reference: &PolicyTable, adv: &AdvantageTable, x: usize) -> Result<f64> {
    Ok(log_partition(reference, adv, x)?.exp())
}

/// Recover the advantage from the optimal policy:
/// `delta(x, y) = beta * log(pi*(y|x) / pi_ref(y|x)) + beta * log Z(x)`.
pub fn delta_from_policies(
    pi_star: &PolicyTable,
    reference: &PolicyTable,
    adv: &AdvantageTable,
    x: usize,
    y: usize,
) -> Result<f64> {
    if pi_star.shape() != reference.shape() {
        return Err(Error::shape("policy tables must share a shape"));
    }
    let m = reference
        .logits
        .get(x)
        .ok_or_else(|| Error::invalid(format!("row {x} out of range")))?
        .len();
    if y >= m {
        return Err(Error::invalid(format!("candidate {y} out of range ({m} candidates)")));
    }
    let log_star = pi_star.row_log_distribution(x)?;
    let log_ref = reference.row_log_distribution(x)?;
    let beta = adv.beta();
    Ok(beta * (log_star[y] - log_ref[y]) + beta * log_partition(reference, adv, x)?)
}

/// Value of the regularized objective
/// `J(pi) = sum_x mu(x) sum_y pi(y|x) delta(x, y) - beta * KL(pi || ref)`.
pub fn objective_value(
    policy: &PolicyTable,
    adv: &AdvantageTable,
    reference: &PolicyTable,
    mu: &[f64],
) -> Result<f64> {
    adv.check_shape(policy)?;
    let expected: f64 = {
        check_weights(mu, policy.n_rows())?;
        let mut total = 0.0;
        for x in 0..policy.n_rows() {
            if mu[x] == 0.0 {
                continue;
            }
            let p = softmax(&policy.logits[x]);
            total += mu[x]
                * p.iter()
                    .zip(&adv.values[x])
                    .map(|(&pi, &d)| pi * d)
                    .sum::<f64>();
        }
        total
    };
    Ok(expected - adv.beta() * kl_divergence(policy, reference, mu)?)
}
