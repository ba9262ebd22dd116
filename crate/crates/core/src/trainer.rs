//! Gradient-descent training of the tabular policy under the
//! risk-calibrated preference loss, with an online KL-budget controller.
//!
//! Each batch minimizes a sum of four terms:
//!
//! 1. the pairwise preference term `-log sigmoid(z)` with
//!    `z = beta * ((theta_w - theta_l) - (ref_w - ref_l))`,
//! 2. the uncertainty-weighted hinge `lambda(u) * [r_s(w) - r_s(l)]_+`
//!    (constant in `theta`),
//! 3. the expected risk exposure
//!    `E_x E_{pi_theta}[lambda(u) * predicted_risk]`, which is what makes
//!    the trained policy actively shift mass off risky responses rather
//!    than merely reporting a penalized loss, and
//! 4. an explicit anchor `beta * KL(pi_theta || pi_ref)`, so the online
//!    beta controller has authority over every source of drift (the pair
//!    term's implicit anchoring alone cannot pull the policy back once
//!    the risk term pushes it away).
//!
//! With `lambda0 = 0` terms 2 and 3 vanish identically and the loop is
//! plain DPO with a KL anchor.  The controller multiplies `beta` by 1.5
//! whenever measured KL exceeds the budget and decays it toward `beta0`
//! (factor 1/1.05) below half the budget; it runs after every batch.
//! Training is bit-reproducible for a fixed seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::carpo::{carpo_gradient, carpo_loss, IndexedPair, PairBatch};
use crate::corpus::{validate_corpus, Corpus};
use crate::error::{Error, Result};
use crate::policy::{kl_divergence, uniform_weights, PolicyTable};
use crate::reward::{lambda_weight, Prediction, RewardEnsemble, DEFAULT_LAMBDA0};
use crate::seed::subseed;

/// Allowed overshoot of the final KL beyond the configured budget.
pub const KL_SLACK: f64 = 1.05;
/// Factor applied to `beta0` for the KL-disabled ablation ("beta fixed
/// tiny").
pub const NO_KL_BETA_SCALE: f64 = 0.1;

/// Learning-rate decay shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

/// Training hyperparameters.  Loadable from TOML or JSON; omitted keys
/// take the defaults shown on each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial (and minimum) inverse regularization strength.
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    /// Base risk weight; zero disables the risk penalty entirely.
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    /// KL budget in nats, enforced by the online beta controller.
    #[serde(default = "default_kl_budget")]
    pub kl_budget: f64,
    /// Peak learning rate.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Passes over the preference pairs.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Pairs per gradient step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Decay shape after warmup.
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Fraction of total steps spent ramping the learning rate up.
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    /// Shuffle seed.
    #[serde(default = "default_train_seed")]
    pub seed: u64,
}

fn default_beta0() -> f64 {
    0.1
}
fn default_lambda0() -> f64 {
    DEFAULT_LAMBDA0
}
fn default_kl_budget() -> f64 {
    0.5
}
fn default_learning_rate() -> f64 {
    20.0
}
fn default_epochs() -> usize {
    80
}
fn default_batch_size() -> usize {
    32
}
fn default_warmup_ratio() -> f64 {
    0.10
}
fn default_train_seed() -> u64 {
    42
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta0: default_beta0(),
            lambda0: default_lambda0(),
            kl_budget: default_kl_budget(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_schedule: LrSchedule::default(),
            warmup_ratio: default_warmup_ratio(),
            seed: default_train_seed(),
        }
    }
}

impl TrainConfig {
    /// Read a config from TOML (`.toml`) or JSON (anything else).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config: TrainConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta0.is_finite() || self.beta0 <= 0.0 {
            return Err(Error::invalid(format!("beta0 must be finite and positive, got {}", self.beta0)));
        }
        if !self.lambda0.is_finite() || self.lambda0 < 0.0 {
            return Err(Error::invalid(format!(
                "lambda0 must be finite and nonnegative, got {}",
                self.lambda0
            )));
        }
        if !self.kl_budget.is_finite() || self.kl_budget <= 0.0 {
            return Err(Error::invalid(format!(
                "kl_budget must be finite and positive, got {}",
                self.kl_budget
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::invalid(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !self.warmup_ratio.is_finite() || !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::invalid(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }
}

/// One row of the per-epoch training report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub loss: f64,
    /// `KL(pi_theta || pi_ref)` at epoch end.
    pub kl: f64,
    /// Expected preference under the policy and gold label means.
    pub exp_pref: f64,
    /// Expected risk under the policy and gold label means.
    pub exp_risk: f64,
    /// Controller state at epoch end.
    pub beta: f64,
}

/// Per-epoch training trajectory; one row per configured epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    /// Emit the report as CSV with header
    /// `epoch,loss,kl,exp_pref,exp_risk,beta`.
    pub fn to_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "epoch,loss,kl,exp_pref,exp_risk,beta")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.loss, r.kl, r.exp_pref, r.exp_risk, r.beta
            )?;
        }
        Ok(())
    }
}

/// Online KL controller: grow `beta` by 1.5x above budget, decay by
/// 1.05x toward `beta0` below half budget, hold inside the dead band.
///
/// All inputs are expected positive; the rule is total and never errors.
pub fn kl_schedule_step(current_kl: f64, budget: f64, beta: f64, beta0: f64) -> f64 {
    if current_kl > budget {
        beta * 1.5
    } else if current_kl < 0.5 * budget {
        (beta / 1.05).max(beta0)
    } else {
        beta
    }
}

/// Ablation arms of the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    /// Risk-calibrated training as configured.
    Full,
    /// `lambda0 = 0`: hinge and risk exposure vanish; plain anchored DPO.
    NoRiskPenalty,
    /// `lambda = lambda0` everywhere, ignoring ensemble uncertainty.
    ConstantLambda,
    /// Controller and anchor disabled, `beta` frozen tiny.
    NoKlConstraint,
}

impl AblationVariant {
    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoRiskPenalty => "no-risk-penalty",
            AblationVariant::ConstantLambda => "constant-lambda",
            AblationVariant::NoKlConstraint => "no-kl-constraint",
        }
    }
}

/// Train the policy table on a corpus's preference pairs.
///
/// The reference policy is uniform; the returned policy starts from it
/// (zero epochs returns it unchanged).  Deterministic for a fixed seed.
/// Errors if the corpus is invalid, has no pairs or an uncovered cell,
/// if the loss diverges, or if the final KL overshoots the budget by
/// more than 5%.
pub fn train(
    corpus: &Corpus,
    ensemble: &RewardEnsemble,
    config: &TrainConfig,
) -> Result<(PolicyTable, TrainReport)> {
    train_variant(corpus, ensemble, config, AblationVariant::Full)
}

/// [`train`] with an explicit ablation arm.
pub fn train_variant(
    corpus: &Corpus,
    ensemble: &RewardEnsemble,
    config: &TrainConfig,
    variant: AblationVariant,
) -> Result<(PolicyTable, TrainReport)> {
    config.validate()?;
    let report = validate_corpus(corpus);
    if let Some(first) = report.violations.first() {
        return Err(Error::Validation(format!("corpus invalid: {}", first.message)));
    }
    if corpus.pairs.is_empty() {
        return Err(Error::invalid("corpus has no preference pairs to train on"));
    }
    let means = covered_label_means(corpus)?;

    // Per-cell predictions and risk costs, fixed for the whole run.
    let lambda0 = match variant {
        AblationVariant::NoRiskPenalty => 0.0,
        _ => config.lambda0,
    };
    let n = corpus.n_prompts();
    let mut risk_cost: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut lambda_cell: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (x, prompt) in corpus.prompts.iter().enumerate() {
        let mut costs = Vec::with_capacity(corpus.candidates[x].len());
        let mut lams = Vec::with_capacity(corpus.candidates[x].len());
        for candidate in &corpus.candidates[x] {
            let Prediction { r_s, u, .. } = ensemble.predict(prompt, candidate)?;
            let lam = match variant {
                AblationVariant::ConstantLambda => lambda0,
                _ => lambda_weight(lambda0, u)?,
            };
            costs.push(lam * r_s);
            lams.push(lam);
        }
        risk_cost.push(costs);
        lambda_cell.push(lams);
    }
    let risk_active = risk_cost.iter().flatten().any(|&c| c != 0.0);

    // Pairs resolved once; each pair carries its winner cell's lambda.
    let pair_lambdas: Vec<f64> = corpus
        .pairs
        .iter()
        .map(|p| {
            let x = corpus.prompt_index(p.prompt_id).expect("validated");
            let w = corpus.candidate_index(x, p.winner_id).expect("validated");
            lambda_cell[x][w]
        })
        .collect();
    let master = PairBatch::from_corpus(corpus, &corpus.pairs, pair_lambdas, config.beta0)?;

    let reference = PolicyTable::uniform(&corpus.shape())?;
    let mut theta = reference.clone();
    let mu = uniform_weights(n);
    let anchored = variant != AblationVariant::NoKlConstraint;
    let mut beta = if anchored { config.beta0 } else { config.beta0 * NO_KL_BETA_SCALE };

    let n_pairs = master.len();
    let n_batches = n_pairs.div_ceil(config.batch_size);
    let total_steps = config.epochs * n_batches;
    let warmup_steps = (config.warmup_ratio * total_steps as f64).floor() as usize;
    let mut step = 0usize;
    let mut rows = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n_pairs).collect();
        let mut rng = StdRng::seed_from_u64(subseed(config.seed, &format!("train/epoch/{epoch}")));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let lr = learning_rate_at(step, total_steps, warmup_steps, config);
            let batch_pairs: Vec<IndexedPair> = chunk.iter().map(|&i| master.pairs()[i]).collect();
            let batch_lams: Vec<f64> = chunk.iter().map(|&i| master.lambdas()[i]).collect();
            let batch = PairBatch::new(batch_pairs, batch_lams, beta)?;
            let mut grad = carpo_gradient(&batch, &theta, &reference)?;
            let mut loss = carpo_loss(&batch, &theta, &reference)?;
            if risk_active {
                loss += add_risk_exposure(&mut grad, &theta, &risk_cost, &mu)?;
            }
            if anchored {
                loss += add_kl_anchor(&mut grad, &theta, &reference, beta, &mu)?;
            }
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss diverged (non-finite) at epoch {epoch}, step {step}"
                )));
            }
            for (row, grow) in theta.logits_mut().iter_mut().zip(&grad) {
                for (t, g) in row.iter_mut().zip(grow) {
                    *t -= lr * g;
                }
            }
            theta.check_finite()?;
            if anchored {
                let kl = kl_divergence(&theta, &reference, &mu)?;
                beta = kl_schedule_step(kl, config.kl_budget, beta, config.beta0);
            }
            loss_sum += loss;
            step += 1;
        }
        let kl = kl_divergence(&theta, &reference, &mu)?;
        let (exp_pref, exp_risk) = expected_scores(&theta, &means)?;
        rows.push(EpochRow {
            epoch,
            loss: loss_sum / n_batches as f64,
            kl,
            exp_pref,
            exp_risk,
            beta,
        });
    }

    if anchored {
        let final_kl = kl_divergence(&theta, &reference, &mu)?;
        if final_kl > config.kl_budget * KL_SLACK {
            return Err(Error::Numerical(format!(
                "final KL {final_kl:.6} exceeds budget {} by more than 5%",
                config.kl_budget
            )));
        }
    }
    Ok((theta, TrainReport { rows }))
}

/// Expected risk exposure `sum_x mu(x) sum_y pi(y|x) cost(x, y)`; adds
/// its gradient `mu(x) pi(y|x) (cost - E_pi[cost])` and returns its
/// value.
fn add_risk_exposure(
    grad: &mut [Vec<f64>],
    theta: &PolicyTable,
    cost: &[Vec<f64>],
    mu: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for x in 0..theta.n_rows() {
        let p = theta.row_distribution(x)?;
        let avg: f64 = p.iter().zip(&cost[x]).map(|(pi, c)| pi * c).sum();
        total += mu[x] * avg;
        for (g, (pi, c)) in grad[x].iter_mut().zip(p.iter().zip(&cost[x])) {
            *g += mu[x] * pi * (c - avg);
        }
    }
    Ok(total)
}

/// Anchor term `beta * sum_x mu(x) KL_x(pi_theta || ref)`; adds its
/// gradient `beta mu(x) pi(y|x) (l(y) - KL_x)` with
/// `l(y) = log pi(y|x) - log ref(y|x)` and returns its value.
fn add_kl_anchor(
    grad: &mut [Vec<f64>],
    theta: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    mu: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for x in 0..theta.n_rows() {
        let lp = theta.row_log_distribution(x)?;
        let lq = reference.row_log_distribution(x)?;
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let kl_x: f64 = p
            .iter()
            .zip(lp.iter().zip(&lq))
            .map(|(&pi, (l, q))| pi * (l - q))
            .sum();
        total += mu[x] * kl_x;
        for (g, (&pi, (l, q))) in grad[x].iter_mut().zip(p.iter().zip(lp.iter().zip(&lq))) {
            *g += beta * mu[x] * pi * ((l - q) - kl_x);
        }
    }
    Ok(beta * total)
}

/// Learning rate at `step`: linear warmup to the peak, then constant or
/// cosine decay.
fn learning_rate_at(step: usize, total_steps: usize, warmup_steps: usize, config: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return config.learning_rate;
    }
    if step < warmup_steps {
        return config.learning_rate * (step + 1) as f64 / warmup_steps as f64;
    }
    match config.lr_schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::Cosine => {
            let span = (total_steps - warmup_steps).max(1) as f64;
            let progress = (step - warmup_steps) as f64 / span;
            config.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
        }
    }
}

/// Label means with every cell covered by at least one record.
fn covered_label_means(corpus: &Corpus) -> Result<Vec<Vec<(f64, f64)>>> {
    let means = corpus.label_means();
    let mut out = Vec::with_capacity(means.len());
    for (x, row) in means.iter().enumerate() {
        let mut covered = Vec::with_capacity(row.len());
        for (y, cell) in row.iter().enumerate() {
            match cell {
                Some(m) => covered.push(*m),
                None => {
                    return Err(Error::invalid(format!(
                        "cell ({x}, {y}) has no annotation records; gold expectations undefined"
                    )))
                }
            }
        }
        out.push(covered);
    }
    Ok(out)
}

/// Expected `(preference, risk)` under the policy rows and gold label
/// means, prompts weighted uniformly.
fn expected_scores(policy: &PolicyTable, means: &[Vec<(f64, f64)>]) -> Result<(f64, f64)> {
    let n = policy.n_rows();
    let mut pref = 0.0;
    let mut risk = 0.0;
    for x in 0..n {
        let p = policy.row_distribution(x)?;
        if p.len() != means[x].len() {
            return Err(Error::shape(format!(
                "policy row {x} has {} entries but the corpus has {} candidates",
                p.len(),
                means[x].len()
            )));
        }
        for (pi, (mp, ms)) in p.iter().zip(&means[x]) {
            pref += pi * mp / n as f64;
            risk += pi * ms / n as f64;
        }
    }
    Ok((pref, risk))
}

/// Evaluation metrics for a policy against a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Expected preference under gold label means.
    pub exp_pref: f64,
    /// Expected risk under gold label means.
    pub exp_risk: f64,
    /// `KL(policy || uniform reference)`.
    pub kl: f64,
    /// Fraction of preference pairs whose implied advantage orders the
    /// winner above the loser (strict log-ratio comparison).
    pub bt_accuracy: f64,
    /// Expected ensemble-predicted risk under the policy.
    pub exp_predicted_risk: f64,
}

/// Evaluate a policy on a corpus: gold expectations, KL against the
/// uniform reference, implied-advantage pair accuracy, and expected
/// predicted risk.
pub fn evaluate(policy: &PolicyTable, corpus: &Corpus, ensemble: &RewardEnsemble) -> Result<EvalMetrics> {
    let report = validate_corpus(corpus);
    if let Some(first) = report.violations.first() {
        return Err(Error::Validation(format!("corpus invalid: {}", first.message)));
    }
    if policy.shape() != corpus.shape() {
        return Err(Error::shape(format!(
            "policy shape {:?} does not match corpus shape {:?}",
            policy.shape(),
            corpus.shape()
        )));
    }
    if corpus.pairs.is_empty() {
        return Err(Error::invalid("corpus has no preference pairs; pair accuracy undefined"));
    }
    let means = covered_label_means(corpus)?;
    let (exp_pref, exp_risk) = expected_scores(policy, &means)?;
    let reference = PolicyTable::uniform(&corpus.shape())?;
    let mu = uniform_weights(corpus.n_prompts());
    let kl = kl_divergence(policy, &reference, &mu)?;

    // Implied advantage per cell is beta * (log pi - log ref) up to a
    // shared per-prompt constant, so ordering needs only the log-ratios.
    let mut correct = 0usize;
    for pair in &corpus.pairs {
        let x = corpus.prompt_index(pair.prompt_id).expect("validated");
        let w = corpus.candidate_index(x, pair.winner_id).expect("validated");
        let l = corpus.candidate_index(x, pair.loser_id).expect("validated");
        let lp = policy.row_log_distribution(x)?;
        let lq = reference.row_log_distribution(x)?;
        if lp[w] - lq[w] > lp[l] - lq[l] {
            correct += 1;
        }
    }
    let bt_accuracy = correct as f64 / corpus.pairs.len() as f64;

    let mut exp_predicted_risk = 0.0;
    let n = corpus.n_prompts();
    for (x, prompt) in corpus.prompts.iter().enumerate() {
        let p = policy.row_distribution(x)?;
        for (pi, candidate) in p.iter().zip(&corpus.candidates[x]) {
            exp_predicted_risk += pi * ensemble.predict(prompt, candidate)?.r_s / n as f64;
        }
    }
    Ok(EvalMetrics { exp_pref, exp_risk, kl, bt_accuracy, exp_predicted_risk })
}

/// One row of the ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub exp_pref: f64,
    pub exp_risk: f64,
    pub kl: f64,
    pub bt_accuracy: f64,
}

/// Train every ablation arm and evaluate each trained policy.
pub fn run_ablation(
    corpus: &Corpus,
    ensemble: &RewardEnsemble,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let variants = [
        AblationVariant::Full,
        AblationVariant::NoRiskPenalty,
        AblationVariant::ConstantLambda,
        AblationVariant::NoKlConstraint,
    ];
    let mut out = Vec::with_capacity(variants.len());
    for variant in variants {
        let (policy, _) = train_variant(corpus, ensemble, config, variant)?;
        let m = evaluate(&policy, corpus, ensemble)?;
        out.push(AblationRow {
            variant: variant.label().to_string(),
            exp_pref: m.exp_pref,
            exp_risk: m.exp_risk,
            kl: m.kl,
            bt_accuracy: m.bt_accuracy,
        });
    }
    Ok(out)
}

/// Emit ablation rows as CSV with header
/// `variant,exp_pref,exp_risk,kl,bt_accuracy`.
pub fn ablation_to_csv(rows: &[AblationRow], w: &mut impl std::io::Write) -> Result<()> {
    writeln!(w, "variant,exp_pref,exp_risk,kl,bt_accuracy")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.variant, r.exp_pref, r.exp_risk, r.kl, r.bt_accuracy)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::tiny_corpus;
    use crate::datagen::{generate_corpus, GeneratorSpec};
    use crate::policy::{optimal_policy, AdvantageTable};
    use crate::reward::fit_ensemble;

    fn small_setup(seed: u64) -> (Corpus, RewardEnsemble) {
        let spec = GeneratorSpec {
            n_prompts: 40,
            m_candidates: 5,
            feature_dim: 6,
            per_prompt_pairs: 3,
            seed,
            ..GeneratorSpec::default()
        };
        let (corpus, _) = generate_corpus(&spec).unwrap();
        let ensemble = fit_ensemble(&corpus, 4, seed).unwrap();
        (corpus, ensemble)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig { epochs: 15, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_step_follows_the_stated_rule() {
        // Dead band: unchanged at the budget boundary.
        assert_eq!(kl_schedule_step(0.5, 0.5, 0.2, 0.1), 0.2);
        assert_eq!(kl_schedule_step(0.3, 0.5, 0.2, 0.1), 0.2);
        // Above budget: exactly x1.5.
        assert_eq!(kl_schedule_step(1.0, 0.5, 0.2, 0.1), 0.2 * 1.5);
        // Below half budget: decay, floored at beta0.
        assert_eq!(kl_schedule_step(0.1, 0.5, 0.2, 0.1), 0.2 / 1.05);
        assert_eq!(kl_schedule_step(0.1, 0.5, 0.1, 0.1), 0.1);
        // Fixed KL above budget: beta grows without bound.
        let mut beta = 0.1;
        let mut prev = beta;
        for _ in 0..100 {
            beta = kl_schedule_step(0.6, 0.5, beta, 0.1);
            assert!(beta > prev);
            prev = beta;
        }
        assert!(beta > 1e10);
    }

    #[test]
    fn zero_epochs_returns_the_reference_exactly() {
        let (corpus, ensemble) = small_setup(1);
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (policy, report) = train(&corpus, &ensemble, &config).unwrap();
        assert!(report.rows.is_empty());
        let reference = PolicyTable::uniform(&corpus.shape()).unwrap();
        assert_eq!(policy.logits(), reference.logits());
    }

    #[test]
    fn single_pair_moves_mass_onto_the_winner() {
        let corpus = tiny_corpus();
        let ensemble = fit_ensemble(&corpus, 2, 0).unwrap();
        let config = TrainConfig {
            lambda0: 0.0,
            epochs: 5,
            learning_rate: 1.0,
            batch_size: 8,
            lr_schedule: LrSchedule::Constant,
            warmup_ratio: 0.0,
            ..TrainConfig::default()
        };
        let (policy, _) = train(&corpus, &ensemble, &config).unwrap();
        // The lone pair has prompt 0, winner candidate index 1.
        let p = policy.row_distribution(0).unwrap();
        assert!(p[1] > 0.5, "winner probability {}", p[1]);
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let (corpus, ensemble) = small_setup(2);
        let config = quick_config();
        let (p1, r1) = train(&corpus, &ensemble, &config).unwrap();
        let (p2, r2) = train(&corpus, &ensemble, &config).unwrap();
        assert_eq!(p1.logits(), p2.logits());
        assert_eq!(r1, r2);
        let other = TrainConfig { seed: 7, ..config };
        let (p3, _) = train(&corpus, &ensemble, &other).unwrap();
        assert_ne!(p1.logits(), p3.logits());
    }

    #[test]
    fn loss_is_non_increasing_on_a_convex_instance() {
        let corpus = tiny_corpus();
        let ensemble = fit_ensemble(&corpus, 2, 0).unwrap();
        let config = TrainConfig {
            lambda0: 0.0,
            kl_budget: 10.0,
            learning_rate: 0.2,
            epochs: 25,
            batch_size: 8,
            lr_schedule: LrSchedule::Constant,
            warmup_ratio: 0.0,
            ..TrainConfig::default()
        };
        let (_, report) = train(&corpus, &ensemble, &config).unwrap();
        for pair in report.rows.windows(2) {
            assert!(
                pair[1].loss <= pair[0].loss + 1e-12,
                "loss rose from {} to {}",
                pair[0].loss,
                pair[1].loss
            );
        }
    }

    #[test]
    fn end_to_end_training_improves_both_scores_within_budget() {
        let (corpus, ensemble) = small_setup(3);
        let config = quick_config();
        let (policy, report) = train(&corpus, &ensemble, &config).unwrap();
        let reference = PolicyTable::uniform(&corpus.shape()).unwrap();
        let trained = evaluate(&policy, &corpus, &ensemble).unwrap();
        let base = evaluate(&reference, &corpus, &ensemble).unwrap();
        assert!(trained.exp_pref >= base.exp_pref, "{} < {}", trained.exp_pref, base.exp_pref);
        assert!(trained.exp_risk <= base.exp_risk, "{} > {}", trained.exp_risk, base.exp_risk);
        assert!(trained.kl <= config.kl_budget * KL_SLACK);
        assert_eq!(report.rows.len(), config.epochs);
        assert!(report.rows.iter().all(|r| r.kl >= 0.0 && r.loss.is_finite()));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences_on_the_full_objective() {
        let (corpus, ensemble) = small_setup(4);
        let config = TrainConfig::default();
        let n = corpus.n_prompts();
        let mu = uniform_weights(n);
        let reference = PolicyTable::uniform(&corpus.shape()).unwrap();
        // A mildly perturbed point so no term is at a symmetric zero.
        let mut theta = reference.clone();
        let mut rng = StdRng::seed_from_u64(9);
        for row in theta.logits_mut() {
            for v in row.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
            }
        }
        let mut risk_cost = Vec::new();
        for (x, prompt) in corpus.prompts.iter().enumerate() {
            let mut costs = Vec::new();
            for cand in &corpus.candidates[x] {
                let pred = ensemble.predict(prompt, cand).unwrap();
                costs.push(lambda_weight(config.lambda0, pred.u).unwrap() * pred.r_s);
            }
            risk_cost.push(costs);
        }
        let lambdas: Vec<f64> = corpus.pairs.iter().map(|_| 0.3).collect();
        let batch = PairBatch::from_corpus(&corpus, &corpus.pairs, lambdas, 0.7).unwrap();
        let beta = 0.7;

        let objective = |t: &PolicyTable| -> f64 {
            let mut loss = carpo_loss(&batch, t, &reference).unwrap();
            let mut sink: Vec<Vec<f64>> = t.shape().iter().map(|&m| vec![0.0; m]).collect();
            loss += add_risk_exposure(&mut sink, t, &risk_cost, &mu).unwrap();
            loss += add_kl_anchor(&mut sink, t, &reference, beta, &mu).unwrap();
            loss
        };
        let mut grad = carpo_gradient(&batch, &theta, &reference).unwrap();
        add_risk_exposure(&mut grad, &theta, &risk_cost, &mu).unwrap();
        add_kl_anchor(&mut grad, &theta, &reference, beta, &mu).unwrap();

        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for x in 0..n {
            for y in 0..corpus.candidates[x].len() {
                let mut plus = theta.clone();
                plus.logits_mut()[x][y] += h;
                let mut minus = theta.clone();
                minus.logits_mut()[x][y] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let denom = grad[x][y].abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max((grad[x][y] - fd).abs() / denom);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn uniform_policy_evaluates_to_zero_kl() {
        let (corpus, ensemble) = small_setup(5);
        let reference = PolicyTable::uniform(&corpus.shape()).unwrap();
        let m = evaluate(&reference, &corpus, &ensemble).unwrap();
        assert_eq!(m.kl, 0.0);
    }

    #[test]
    fn optimal_policy_from_gold_advantages_gets_perfect_pair_accuracy() {
        let (mut corpus, ensemble) = small_setup(6);
        // Gold advantage per cell from label means with lambda0 weighting.
        let means = covered_label_means(&corpus).unwrap();
        let values: Vec<Vec<f64>> = means
            .iter()
            .map(|row| row.iter().map(|&(p, s)| p - DEFAULT_LAMBDA0 * s).collect())
            .collect();
        // Rebuild pairs so every winner has the strictly larger gold
        // advantage (pair construction ranks by preference alone).
        let mut pairs = std::mem::take(&mut corpus.pairs);
        pairs.retain(|p| {
            let x = corpus.prompt_index(p.prompt_id).unwrap();
            let w = corpus.candidate_index(x, p.winner_id).unwrap();
            let l = corpus.candidate_index(x, p.loser_id).unwrap();
            values[x][w] != values[x][l]
        });
        for pair in &mut pairs {
            let x = corpus.prompt_index(pair.prompt_id).unwrap();
            let w = corpus.candidate_index(x, pair.winner_id).unwrap();
            let l = corpus.candidate_index(x, pair.loser_id).unwrap();
            if values[x][w] < values[x][l] {
                std::mem::swap(&mut pair.winner_id, &mut pair.loser_id);
                std::mem::swap(&mut pair.winner_scores, &mut pair.loser_scores);
            }
            // Winner preference must still dominate for corpus validity;
            // swapped pairs may violate that, so clamp the stored scores.
            if pair.winner_scores.0 < pair.loser_scores.0 {
                pair.loser_scores.0 = pair.winner_scores.0;
            }
        }
        corpus.pairs = pairs;
        assert!(!corpus.pairs.is_empty());
        let reference = PolicyTable::uniform(&corpus.shape()).unwrap();
        let adv = AdvantageTable::new(values, 0.5).unwrap();
        let star = optimal_policy(&reference, &adv).unwrap();
        let m = evaluate(&star, &corpus, &ensemble).unwrap();
        assert_eq!(m.bt_accuracy, 1.0);
    }

    #[test]
    fn min_risk_concentration_recovers_per_prompt_min_risk_mean() {
        let (corpus, ensemble) = small_setup(7);
        let means = covered_label_means(&corpus).unwrap();
        let mut logits = Vec::new();
        let mut want = 0.0;
        for row in &means {
            let (argmin, min_risk) = row
                .iter()
                .enumerate()
                .map(|(i, &(_, s))| (i, s))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            want += min_risk / means.len() as f64;
            let mut r = vec![0.0; row.len()];
            r[argmin] = 200.0;
            logits.push(r);
        }
        let policy = PolicyTable::new(logits).unwrap();
        let m = evaluate(&policy, &corpus, &ensemble).unwrap();
        assert!((m.exp_risk - want).abs() < 1e-9, "{} vs {}", m.exp_risk, want);
    }

    #[test]
    fn evaluate_rejects_mismatched_or_uncovered_input() {
        let (corpus, ensemble) = small_setup(8);
        let wrong = PolicyTable::uniform(&[3, 3]).unwrap();
        assert!(evaluate(&wrong, &corpus, &ensemble).is_err());

        let mut no_pairs = corpus.clone();
        no_pairs.pairs.clear();
        let reference = PolicyTable::uniform(&corpus.shape()).unwrap();
        assert!(evaluate(&reference, &no_pairs, &ensemble).is_err());

        let mut uncovered = corpus.clone();
        uncovered.records.retain(|r| !(r.prompt_id == 0 && r.response_id == 0));
        assert!(evaluate(&reference, &uncovered, &ensemble).is_err());
    }

    #[test]
    fn ablation_recovers_the_directional_findings() {
        let (corpus, ensemble) = small_setup(9);
        let config = TrainConfig::default();
        let rows = run_ablation(&corpus, &ensemble, &config).unwrap();
        for r in &rows {
            eprintln!(
                "{:>16}: exp_pref {:.4} exp_risk {:.4} kl {:.4} bt {:.3}",
                r.variant, r.exp_pref, r.exp_risk, r.kl, r.bt_accuracy
            );
        }
        assert_eq!(rows.len(), 4);
        let by = |label: &str| rows.iter().find(|r| r.variant == label).unwrap();
        let full = by("full");
        let no_risk = by("no-risk-penalty");
        let no_kl = by("no-kl-constraint");
        assert!(by("constant-lambda").exp_risk <= no_risk.exp_risk);
        // Dropping the risk penalty leaves a strictly riskier policy.
        assert!(no_risk.exp_risk > full.exp_risk, "{} vs {}", no_risk.exp_risk, full.exp_risk);
        // Removing the KL constraint at least doubles the drift.
        assert!(no_kl.kl >= 2.0 * full.kl, "{} vs {}", no_kl.kl, full.kl);

        let mut csv = Vec::new();
        ablation_to_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("variant,exp_pref,exp_risk,kl,bt_accuracy\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn absurd_learning_rate_fails_loudly() {
        let (corpus, ensemble) = small_setup(10);
        let config = TrainConfig { learning_rate: 1e10, epochs: 3, ..TrainConfig::default() };
        match train(&corpus, &ensemble, &config) {
            Err(Error::Numerical(_)) => {}
            other => panic!("expected numerical failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        for mutate in [
            |c: &mut TrainConfig| c.beta0 = 0.0,
            |c: &mut TrainConfig| c.beta0 = -1.0,
            |c: &mut TrainConfig| c.lambda0 = -0.1,
            |c: &mut TrainConfig| c.kl_budget = 0.0,
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.learning_rate = f64::NAN,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.warmup_ratio = 1.0,
            |c: &mut TrainConfig| c.warmup_ratio = -0.1,
        ] {
            let mut config = TrainConfig::default();
            mutate(&mut config);
            assert!(config.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn config_loads_from_toml_and_json_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("train.toml");
        std::fs::write(&toml_path, "epochs = 3\nlr_schedule = \"constant\"\n").unwrap();
        let config = TrainConfig::load(&toml_path).unwrap();
        assert_eq!(config.epochs, 3);
        assert_eq!(config.lr_schedule, LrSchedule::Constant);
        assert_eq!(config.beta0, 0.1);

        let json_path = dir.path().join("train.json");
        std::fs::write(&json_path, r#"{"lambda0": 0.0, "kl_budget": 1.5}"#).unwrap();
        let config = TrainConfig::load(&json_path).unwrap();
        assert_eq!(config.lambda0, 0.0);
        assert_eq!(config.kl_budget, 1.5);
        assert_eq!(config.lr_schedule, LrSchedule::Cosine);

        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "beta override = yes\n").unwrap();
        assert!(TrainConfig::load(&bad).is_err());
        let unknown = dir.path().join("unknown.toml");
        std::fs::write(&unknown, "betaO = 0.2\n").unwrap();
        assert!(TrainConfig::load(&unknown).is_err());
    }

    #[test]
    fn warmup_and_cosine_shapes_are_correct() {
        let config = TrainConfig {
            learning_rate: 8.0,
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        // Warmup ramps linearly to the peak.
        assert_eq!(learning_rate_at(0, 100, 10, &config), 0.8);
        assert_eq!(learning_rate_at(4, 100, 10, &config), 4.0);
        assert_eq!(learning_rate_at(9, 100, 10, &config), 8.0);
        // Cosine starts at the peak and decays toward zero.
        assert_eq!(learning_rate_at(10, 100, 10, &config), 8.0);
        let mid = learning_rate_at(55, 100, 10, &config);
        assert!((mid - 4.0).abs() < 0.01, "midpoint {mid}");
        assert!(learning_rate_at(99, 100, 10, &config) < 0.05);
        // Constant schedule holds the peak after warmup.
        let constant = TrainConfig { lr_schedule: LrSchedule::Constant, ..config };
        assert_eq!(learning_rate_at(73, 100, 10, &constant), constant.learning_rate);
        assert_eq!(learning_rate_at(0, 100, 0, &constant), constant.learning_rate);
    }

    #[test]
    fn report_csv_has_header_and_one_row_per_epoch() {
        let (corpus, ensemble) = small_setup(11);
        let config = TrainConfig { epochs: 4, ..quick_config() };
        let (_, report) = train(&corpus, &ensemble, &config).unwrap();
        let mut out = Vec::new();
        report.to_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,loss,kl,exp_pref,exp_risk,beta"));
        assert_eq!(lines.count(), 4);
        assert!(text.lines().nth(1).unwrap().starts_with("1,"));
    }
}
