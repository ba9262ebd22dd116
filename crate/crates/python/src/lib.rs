//! Python bindings for the risk-calibrated preference pipeline.
//!
//! The module mirrors the library's free-function style: a handful of
//! classes own the heavyweight artifacts (corpus, ensemble, policy,
//! ground truth) with `load`/`save` round trips, and module functions do
//! the work.  Structured results cross the boundary as JSON strings
//! (`*_json` functions) so Python gets plain dicts via `json.loads`
//! without a conversion layer to maintain; scalars and vectors cross
//! directly.
//!
//! Usage:
//!
//!     import carpo, json
//!     corpus, truth = carpo.generate(json.dumps({"n_prompts": 50, "seed": 7}))
//!     ensemble = carpo.fit_ensemble(corpus, 4, 7)
//!     policy, report = carpo.train(corpus, ensemble)
//!     print(json.loads(carpo.evaluate(policy, corpus, ensemble)))

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use carpo_core::annotate::{DEFAULT_OBS_NOISE, DEFAULT_PROCESS_NOISE};
use carpo_core::corpus::{Prompt, ResponseCandidate};
use carpo_core::policy::{uniform_weights, AdvantageTable};
use carpo_core::trainer::AblationVariant;
use carpo_core::{ConfusionCounts, Error, GeneratorSpec, RatingMatrix, TrainConfig};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_variant(label: &str) -> PyResult<AblationVariant> {
    let all = [
        AblationVariant::Full,
        AblationVariant::NoRiskPenalty,
        AblationVariant::ConstantLambda,
        AblationVariant::NoKlConstraint,
    ];
    all.into_iter().find(|v| v.label() == label).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown variant {label:?} (expected one of {:?})",
            all.map(|v| v.label())
        ))
    })
}

// ---------------------------------------------------------------------------
// Artifact classes
// ---------------------------------------------------------------------------

/// A prompt/candidate/annotation corpus with its preference pairs.
#[pyclass]
struct Corpus {
    inner: carpo_core::Corpus,
}

#[pymethods]
impl Corpus {
    /// Read a `carpo-corpus/1` JSONL file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Corpus { inner: carpo_core::Corpus::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn n_prompts(&self) -> usize {
        self.inner.n_prompts()
    }

    fn n_cells(&self) -> usize {
        self.inner.candidates.iter().map(Vec::len).sum()
    }

    fn n_pairs(&self) -> usize {
        self.inner.pairs.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.metadata.seed
    }

    /// Validation report as JSON: `{"violations": [...]}`, empty when valid.
    fn validate_json(&self) -> PyResult<String> {
        to_json(&carpo_core::validate_corpus(&self.inner))
    }
}

/// Latent scores and noise draws behind a synthetic corpus.
#[pyclass]
struct GroundTruth {
    inner: carpo_core::datagen::GroundTruth,
}

#[pymethods]
impl GroundTruth {
    /// Read a `carpo-truth/1` JSONL sidecar.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(GroundTruth { inner: carpo_core::datagen::GroundTruth::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn n_entries(&self) -> usize {
        self.inner.truths.len()
    }

    fn high_risk_count(&self) -> usize {
        self.inner.truths.iter().filter(|t| t.high_risk).count()
    }

    /// Truth entry for one cell as JSON, or None when absent.
    fn truth_json(&self, prompt_id: u32, response_id: u32) -> PyResult<Option<String>> {
        match self.inner.truth_for(prompt_id, response_id) {
            Some(entry) => Ok(Some(to_json(entry)?)),
            None => Ok(None),
        }
    }
}

/// Bootstrap ensemble of linear reward heads with uncertainty.
#[pyclass]
struct RewardEnsemble {
    inner: carpo_core::RewardEnsemble,
}

#[pymethods]
impl RewardEnsemble {
    /// Read a `carpo-ensemble/1` JSON file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(RewardEnsemble { inner: carpo_core::RewardEnsemble::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// Predict `(r_p, r_s, u)` for raw prompt/candidate feature vectors.
    fn predict(&self, prompt_feature: Vec<f64>, candidate_feature: Vec<f64>) -> PyResult<(f64, f64, f64)> {
        let prompt = Prompt { id: 0, feature: prompt_feature, age_group: 0 };
        let candidate = ResponseCandidate { id: 0, feature: candidate_feature };
        let p = self.inner.predict(&prompt, &candidate).map_err(err)?;
        Ok((p.r_p, p.r_s, p.u))
    }
}

/// Tabular softmax policy: one row of logits per prompt.
#[pyclass]
struct PolicyTable {
    inner: carpo_core::PolicyTable,
}

#[pymethods]
impl PolicyTable {
    /// Read a `carpo-policy/1` JSON file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PolicyTable { inner: carpo_core::PolicyTable::load(path).map_err(err)? })
    }

    /// Uniform policy over the given per-prompt candidate counts.
    #[staticmethod]
    fn uniform(shape: Vec<usize>) -> PyResult<Self> {
        Ok(PolicyTable { inner: carpo_core::PolicyTable::uniform(&shape).map_err(err)? })
    }

    /// Policy with explicit logits, one row per prompt.
    #[staticmethod]
    fn from_logits(logits: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PolicyTable { inner: carpo_core::PolicyTable::new(logits).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn shape(&self) -> Vec<usize> {
        self.inner.shape()
    }

    fn logits(&self) -> Vec<Vec<f64>> {
        self.inner.logits().to_vec()
    }

    /// Softmax probabilities of row `x`.
    fn row_distribution(&self, x: usize) -> PyResult<Vec<f64>> {
        self.inner.row_distribution(x).map_err(err)
    }

    /// Log-probabilities of row `x`.
    fn row_log_distribution(&self, x: usize) -> PyResult<Vec<f64>> {
        self.inner.row_log_distribution(x).map_err(err)
    }
}

// ---------------------------------------------------------------------------
// Pipeline functions
// ---------------------------------------------------------------------------

/// Generate a synthetic corpus plus ground truth from a generator-spec
/// JSON string (all fields optional); `None` uses the defaults.
#[pyfunction]
#[pyo3(signature = (spec_json=None))]
fn generate(spec_json: Option<&str>) -> PyResult<(Corpus, GroundTruth)> {
    let spec: GeneratorSpec = match spec_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => GeneratorSpec::default(),
    };
    let (corpus, truth) = carpo_core::generate_corpus(&spec).map_err(err)?;
    Ok((Corpus { inner: corpus }, GroundTruth { inner: truth }))
}

/// Fit a bootstrap reward ensemble on a corpus.
#[pyfunction]
#[pyo3(signature = (corpus, k=4, seed=42))]
fn fit_ensemble(corpus: &Corpus, k: usize, seed: u64) -> PyResult<RewardEnsemble> {
    Ok(RewardEnsemble { inner: carpo_core::fit_ensemble(&corpus.inner, k, seed).map_err(err)? })
}

/// Train a policy; returns `(policy, report_json)` where the report is a
/// JSON array of per-epoch rows.  `config_json` uses trainer defaults for
/// omitted fields; `variant` picks an ablation arm by label.
#[pyfunction]
#[pyo3(signature = (corpus, ensemble, config_json=None, variant=None))]
fn train(
    corpus: &Corpus,
    ensemble: &RewardEnsemble,
    config_json: Option<&str>,
    variant: Option<&str>,
) -> PyResult<(PolicyTable, String)> {
    let config: TrainConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let arm = match variant {
        Some(label) => parse_variant(label)?,
        None => AblationVariant::Full,
    };
    let (policy, report) =
        carpo_core::trainer::train_variant(&corpus.inner, &ensemble.inner, &config, arm)
            .map_err(err)?;
    Ok((PolicyTable { inner: policy }, to_json(&report.rows)?))
}

/// Evaluate a policy; returns metrics JSON
/// (`exp_pref`, `exp_risk`, `kl`, `bt_accuracy`, `exp_predicted_risk`).
#[pyfunction]
fn evaluate(policy: &PolicyTable, corpus: &Corpus, ensemble: &RewardEnsemble) -> PyResult<String> {
    to_json(&carpo_core::evaluate(&policy.inner, &corpus.inner, &ensemble.inner).map_err(err)?)
}

/// Train all four arms and return the comparison rows as JSON.
#[pyfunction]
#[pyo3(signature = (corpus, ensemble, config_json=None))]
fn run_ablation(
    corpus: &Corpus,
    ensemble: &RewardEnsemble,
    config_json: Option<&str>,
) -> PyResult<String> {
    let config: TrainConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    to_json(&carpo_core::run_ablation(&corpus.inner, &ensemble.inner, &config).map_err(err)?)
}

/// Closed-form optimal policy `pi* ∝ ref · exp(advantage / beta)`.
#[pyfunction]
fn optimal_policy(
    reference: &PolicyTable,
    advantages: Vec<Vec<f64>>,
    beta: f64,
) -> PyResult<PolicyTable> {
    let table = AdvantageTable::new(advantages, beta).map_err(err)?;
    Ok(PolicyTable {
        inner: carpo_core::optimal_policy(&reference.inner, &table).map_err(err)?,
    })
}

/// Prompt-averaged `KL(p || q)`; `mu` defaults to uniform prompt weights.
#[pyfunction]
#[pyo3(signature = (p, q, mu=None))]
fn kl_divergence(p: &PolicyTable, q: &PolicyTable, mu: Option<Vec<f64>>) -> PyResult<f64> {
    let weights = mu.unwrap_or_else(|| uniform_weights(p.inner.n_rows()));
    carpo_core::kl_divergence(&p.inner, &q.inner, &weights).map_err(err)
}

// ---------------------------------------------------------------------------
// Scalar and small-structure functions
// ---------------------------------------------------------------------------

/// Bradley–Terry win probability `sigma(delta_w - delta_l)`.
#[pyfunction]
fn bt_probability(delta_w: f64, delta_l: f64) -> f64 {
    carpo_core::bt_probability(delta_w, delta_l)
}

/// Risk-adjusted advantage `r_p - lambda * r_s`.
#[pyfunction]
fn advantage(r_p: f64, r_s: f64, lam: f64) -> f64 {
    carpo_core::advantage(r_p, r_s, lam)
}

/// Uncertainty-scaled risk weight `lambda0 * (1 + u)`.
#[pyfunction]
fn lambda_weight(lambda0: f64, u: f64) -> PyResult<f64> {
    carpo_core::lambda_weight(lambda0, u).map_err(err)
}

/// One step of the KL budget controller.
#[pyfunction]
fn kl_schedule_step(current_kl: f64, budget: f64, beta: f64, beta0: f64) -> f64 {
    carpo_core::kl_schedule_step(current_kl, budget, beta, beta0)
}

/// Screening metrics JSON from confusion counts.
#[pyfunction]
fn screening_metrics_json(
    accept_acceptable: u64,
    accept_rejectable: u64,
    reject_acceptable: u64,
    reject_rejectable: u64,
) -> PyResult<String> {
    let counts = ConfusionCounts {
        accept_acceptable,
        accept_rejectable,
        reject_acceptable,
        reject_rejectable,
    };
    to_json(&carpo_core::screening_metrics(&counts).map_err(err)?)
}

/// Fleiss' kappa JSON from per-item category counts.
#[pyfunction]
fn fleiss_kappa_json(counts: Vec<Vec<u64>>, n_raters: u64) -> PyResult<String> {
    let matrix = RatingMatrix::new(counts, n_raters).map_err(err)?;
    to_json(&carpo_core::fleiss_kappa(&matrix))
}

/// Audit sample JSON for a `(id, risk)` batch.
#[pyfunction]
#[pyo3(signature = (batch, seed=0))]
fn audit_sample_json(batch: Vec<(u32, f64)>, seed: u64) -> PyResult<String> {
    to_json(&carpo_core::audit_sample(&batch, seed).map_err(err)?)
}

/// Per-group filtered weight trajectories JSON for a `(group, value)` stream.
#[pyfunction]
#[pyo3(signature = (stream, n_groups, window))]
fn update_group_weights_json(
    stream: Vec<(u32, f64)>,
    n_groups: usize,
    window: usize,
) -> PyResult<String> {
    to_json(
        &carpo_core::update_group_weights(
            &stream,
            n_groups,
            window,
            DEFAULT_PROCESS_NOISE,
            DEFAULT_OBS_NOISE,
        )
        .map_err(err)?,
    )
}

/// Analytic-vs-finite-difference gradient check report JSON.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=100))]
fn gradient_check_json(seed: u64, instances: usize) -> PyResult<String> {
    to_json(&carpo_core::gradient_check(seed, instances).map_err(err)?)
}

#[pymodule]
fn carpo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<GroundTruth>()?;
    m.add_class::<RewardEnsemble>()?;
    m.add_class::<PolicyTable>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_policy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(bt_probability, m)?)?;
    m.add_function(wrap_pyfunction!(advantage, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_weight, m)?)?;
    m.add_function(wrap_pyfunction!(kl_schedule_step, m)?)?;
    m.add_function(wrap_pyfunction!(screening_metrics_json, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_kappa_json, m)?)?;
    m.add_function(wrap_pyfunction!(audit_sample_json, m)?)?;
    m.add_function(wrap_pyfunction!(update_group_weights_json, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check_json, m)?)?;
    m.add("DEFAULT_LAMBDA0", carpo_core::reward::DEFAULT_LAMBDA0)?;
    m.add("HIGH_RISK_CUTOFF", carpo_core::corpus::HIGH_RISK_CUTOFF)?;
    Ok(())
}
