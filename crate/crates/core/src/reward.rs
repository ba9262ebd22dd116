//! Linear reward heads, bootstrap ensembles, and the risk-adjusted
//! advantage.
//!
//! Each ensemble member holds two linear heads over the concatenated
//! (prompt, response) feature vector: a preference head predicting `r_p` on
//! `[1, 7]` and a risk head predicting `r_s` on `[0, 4]`, both clamped to
//! their scales.  Members are fit by least squares on independent bootstrap
//! resamples of the annotation records, so the spread of their predictions
//! is an epistemic uncertainty signal:
//!
//! ```text
//!   u(x, y)      = Var_k[ r_p^k - lambda0 * r_s^k ]   (unbiased, over members)
//!   lambda(u)    = lambda0 * (1 + u)
//!   delta(x, y)  = r_p - lambda(u) * r_s
//! ```
//!
//! A rank-deficient bootstrap design falls back to ridge-regularized
//! normal equations and records a warning on the ensemble; well-posed fits
//! use plain least squares, so exactly-linear labels are reproduced to
//! machine precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{validate_corpus, Corpus, Prompt, ResponseCandidate, PREF_MAX, PREF_MIN, RISK_MAX, RISK_MIN};
use crate::error::{Error, Result};
use crate::numerics::sample_variance;
use crate::seed::subseed;

/// Default base risk weight `lambda0`.
pub const DEFAULT_LAMBDA0: f64 = 0.45;
/// Ridge strength used when a bootstrap design is rank-deficient.
pub const RIDGE_ALPHA: f64 = 1e-3;
/// Schema tag for serialized ensembles.
pub const ENSEMBLE_SCHEMA: &str = "carpo-ensemble/1";

/// Which per-member statistic the uncertainty variance is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintySource {
    /// Variance of the per-member advantage `r_p - lambda0 * r_s`.
    #[default]
    Advantage,
    /// Variance of the preference prediction alone.
    Preference,
    /// Variance of the risk prediction alone.
    Risk,
}

/// One ensemble member: two linear heads over `[prompt ++ response]`
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHead {
    pub w_p: Vec<f64>,
    pub b_p: f64,
    pub w_s: Vec<f64>,
    pub b_s: f64,
}

impl RewardHead {
    /// Unclamped affine predictions `(r_p, r_s)` for a concatenated
    /// feature vector.
    pub fn raw_predict(&self, phi: &[f64]) -> Result<(f64, f64)> {
        if phi.len() != self.w_p.len() || phi.len() != self.w_s.len() {
            return Err(Error::shape(format!(
                "feature dim {} does not match head dim {}",
                phi.len(),
                self.w_p.len()
            )));
        }
        let dot = |w: &[f64]| w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>();
        Ok((dot(&self.w_p) + self.b_p, dot(&self.w_s) + self.b_s))
    }

    /// Predictions clamped onto the annotation scales.
    pub fn predict(&self, phi: &[f64]) -> Result<(f64, f64)> {
        let (p, s) = self.raw_predict(phi)?;
        Ok((p.clamp(PREF_MIN, PREF_MAX), s.clamp(RISK_MIN, RISK_MAX)))
    }
}

/// Ensemble prediction for one (prompt, response) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Mean clamped preference prediction.
    pub r_p: f64,
    /// Mean clamped risk prediction.
    pub r_s: f64,
    /// Epistemic uncertainty: unbiased across-member variance.
    pub u: f64,
}

/// A bootstrap ensemble of [`RewardHead`]s plus the uncertainty
/// configuration it predicts with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEnsemble {
    pub members: Vec<RewardHead>,
    /// Per-entity feature dimension `d` (heads act on `2d` concatenated
    /// features).
    pub feature_dim: usize,
    pub lambda0: f64,
    pub uncertainty: UncertaintySource,
    pub fit_seed: u64,
    /// Fit diagnostics (e.g. ridge fallbacks on rank-deficient resamples).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Options for [`fit_ensemble_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lambda0: f64,
    pub uncertainty: UncertaintySource,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { lambda0: DEFAULT_LAMBDA0, uncertainty: UncertaintySource::default() }
    }
}

/// Fit a `k`-member bootstrap ensemble on the corpus records with the
/// default `lambda0` and uncertainty source.  Deterministic in `seed`.
pub fn fit_ensemble(corpus: &Corpus, k: usize, seed: u64) -> Result<RewardEnsemble> {
    fit_ensemble_with(corpus, k, seed, FitOptions::default())
}

/// Fit a `k`-member bootstrap ensemble with explicit options.
///
/// Each member draws its own bootstrap resample of the records (RNG seeded
/// from `seed` and the member index) and solves the two least-squares
/// problems over `[1, prompt ++ response]` features.  Rank-deficient
/// resamples retry with a ridge penalty and record a warning.
pub fn fit_ensemble_with(
    corpus: &Corpus,
    k: usize,
    seed: u64,
    options: FitOptions,
) -> Result<RewardEnsemble> {
    if k == 0 {
        return Err(Error::invalid("ensemble size k must be at least 1"));
    }
    if !options.lambda0.is_finite() || options.lambda0 < 0.0 {
        return Err(Error::invalid(format!(
            "lambda0 must be finite and nonnegative, got {}",
            options.lambda0
        )));
    }
    let report = validate_corpus(corpus);
    if !report.is_valid() {
        return Err(Error::Validation(format!(
            "corpus failed validation ({} violations; first: {})",
            report.violations.len(),
            report.violations[0].message
        )));
    }
    if corpus.records.is_empty() {
        return Err(Error::invalid("cannot fit an ensemble on a corpus with no records"));
    }

    let d = corpus.feature_dim();
    let p = 2 * d + 1; // bias + prompt features + response features
    let n = corpus.records.len();

    // Materialize the full design once; bootstrap members index into it.
    let mut design = DMatrix::zeros(n, p);
    let mut y_pref = DVector::zeros(n);
    let mut y_risk = DVector::zeros(n);
    for (i, rec) in corpus.records.iter().enumerate() {
        let pi = corpus.prompt_index(rec.prompt_id).expect("validated");
        let ci = corpus.candidate_index(pi, rec.response_id).expect("validated");
        design[(i, 0)] = 1.0;
        for (j, &v) in corpus.prompts[pi].feature.iter().enumerate() {
            design[(i, 1 + j)] = v;
        }
        for (j, &v) in corpus.candidates[pi][ci].feature.iter().enumerate() {
            design[(i, 1 + d + j)] = v;
        }
        y_pref[i] = rec.r_p;
        y_risk[i] = rec.r_s;
    }

    let mut members = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for member in 0..k {
        let mut rng = StdRng::seed_from_u64(subseed(seed, &format!("reward/member/{member}")));
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut xb = DMatrix::zeros(n, p);
        let mut pb = DVector::zeros(n);
        let mut sb = DVector::zeros(n);
        for (row, &idx) in indices.iter().enumerate() {
            xb.set_row(row, &design.row(idx));
            pb[row] = y_pref[idx];
            sb[row] = y_risk[idx];
        }
        let (coef_p, coef_s) = solve_two(&xb, &pb, &sb, member, &mut warnings)?;
        members.push(RewardHead {
            b_p: coef_p[0],
            w_p: coef_p.as_slice()[1..].to_vec(),
            b_s: coef_s[0],
            w_s: coef_s.as_slice()[1..].to_vec(),
        });
    }

    Ok(RewardEnsemble {
        members,
        feature_dim: d,
        lambda0: options.lambda0,
        uncertainty: options.uncertainty,
        fit_seed: seed,
        warnings,
    })
}

/// Solve both heads' normal equations for one bootstrap design.  Plain
/// least squares first; a failed Cholesky (rank-deficient Gram matrix)
/// retries with a ridge penalty and notes it.
fn solve_two(
    x: &DMatrix<f64>,
    y_pref: &DVector<f64>,
    y_risk: &DVector<f64>,
    member: usize,
    warnings: &mut Vec<String>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let gram = x.transpose() * x;
    let solve = |chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, y: &DVector<f64>| {
        chol.solve(&(x.transpose() * y))
    };
    if let Some(chol) = gram.clone().cholesky() {
        let p = solve(&chol, y_pref);
        let s = solve(&chol, y_risk);
        if p.iter().all(|v| v.is_finite()) && s.iter().all(|v| v.is_finite()) {
            return Ok((p, s));
        }
    }
    warnings.push(format!(
        "member {member}: rank-deficient bootstrap design, ridge (alpha = {RIDGE_ALPHA}) applied"
    ));
    let ridged = &gram + DMatrix::identity(gram.nrows(), gram.ncols()) * RIDGE_ALPHA;
    let chol = ridged
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("member {member}: normal equations not solvable")))?;
    Ok((solve(&chol, y_pref), solve(&chol, y_risk)))
}

impl RewardEnsemble {
    /// Ensemble prediction for one (prompt, response) cell: mean clamped
    /// member predictions plus the across-member uncertainty variance.
    pub fn predict(&self, prompt: &Prompt, candidate: &ResponseCandidate) -> Result<Prediction> {
        if prompt.feature.len() != self.feature_dim || candidate.feature.len() != self.feature_dim {
            return Err(Error::shape(format!(
                "feature dims ({}, {}) do not match ensemble dim {}",
                prompt.feature.len(),
                candidate.feature.len(),
                self.feature_dim
            )));
        }
        let mut phi = Vec::with_capacity(2 * self.feature_dim);
        phi.extend_from_slice(&prompt.feature);
        phi.extend_from_slice(&candidate.feature);

        let mut preds_p = Vec::with_capacity(self.members.len());
        let mut preds_s = Vec::with_capacity(self.members.len());
        for head in &self.members {
            let (p, s) = head.predict(&phi)?;
            preds_p.push(p);
            preds_s.push(s);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let u = match self.uncertainty {
            UncertaintySource::Advantage => {
                let adv: Vec<f64> = preds_p
                    .iter()
                    .zip(&preds_s)
                    .map(|(&p, &s)| p - self.lambda0 * s)
                    .collect();
                sample_variance(&adv)
            }
            UncertaintySource::Preference => sample_variance(&preds_p),
            UncertaintySource::Risk => sample_variance(&preds_s),
        };
        Ok(Prediction { r_p: mean(&preds_p), r_s: mean(&preds_s), u })
    }

    /// Write the ensemble as `carpo-ensemble/1` JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let artifact = EnsembleArtifact {
            schema: ENSEMBLE_SCHEMA.to_string(),
            k: self.members.len(),
            d: self.feature_dim,
            lambda0: self.lambda0,
            uncertainty: self.uncertainty,
            fit_seed: self.fit_seed,
            members: self.members.clone(),
            warnings: self.warnings.clone(),
        };
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &artifact)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Read a `carpo-ensemble/1` JSON ensemble.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let artifact: EnsembleArtifact = serde_json::from_reader(BufReader::new(file))?;
        if artifact.schema != ENSEMBLE_SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported ensemble schema {:?} (expected {:?})",
                artifact.schema, ENSEMBLE_SCHEMA
            )));
        }
        if artifact.members.len() != artifact.k {
            return Err(Error::Validation(format!(
                "ensemble artifact claims k = {} but carries {} members",
                artifact.k,
                artifact.members.len()
            )));
        }
        for (i, m) in artifact.members.iter().enumerate() {
            if m.w_p.len() != 2 * artifact.d || m.w_s.len() != 2 * artifact.d {
                return Err(Error::Validation(format!(
                    "ensemble member {i} has weight dims ({}, {}) but d = {}",
                    m.w_p.len(),
                    m.w_s.len(),
                    artifact.d
                )));
            }
        }
        Ok(RewardEnsemble {
            members: artifact.members,
            feature_dim: artifact.d,
            lambda0: artifact.lambda0,
            uncertainty: artifact.uncertainty,
            fit_seed: artifact.fit_seed,
            warnings: artifact.warnings,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleArtifact {
    schema: String,
    k: usize,
    d: usize,
    lambda0: f64,
    uncertainty: UncertaintySource,
    fit_seed: u64,
    members: Vec<RewardHead>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

/// Uncertainty-scaled risk weight `lambda(u) = lambda0 * (1 + u)`.
///
/// `lambda0` must be nonnegative and finite (zero is allowed — it disables
/// the risk penalty, which the ablation harness relies on); `u` must be a
/// nonnegative finite variance.
pub fn lambda_weight(lambda0: f64, u: f64) -> Result<f64> {
    if !lambda0.is_finite() || lambda0 < 0.0 {
        return Err(Error::invalid(format!(
            "lambda0 must be finite and nonnegative, got {lambda0}"
        )));
    }
    if !u.is_finite() || u < 0.0 {
        return Err(Error::invalid(format!(
            "uncertainty must be finite and nonnegative, got {u}"
        )));
    }
    Ok(lambda0 * (1.0 + u))
}

/// Risk-adjusted advantage `delta = r_p - lambda * r_s`.
pub fn advantage(r_p: f64, r_s: f64, lambda: f64) -> f64 {
    r_p - lambda * r_s
}
