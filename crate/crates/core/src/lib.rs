//! Risk-calibrated preference optimization on small tabular policies.
//!
//! The crate implements an exactly-verifiable, desk-scale version of the
//! CARPO training pipeline: bounded preference/risk annotations over a
//! synthetic prompt-response corpus, a bootstrap ensemble of linear reward
//! heads with an epistemic uncertainty signal, a risk-adjusted advantage
//! `delta = r_p - lambda(u) * r_s`, and a DPO-style pairwise loss with an
//! uncertainty-weighted safety hinge on top of a KL-constrained tabular
//! policy update.  Everything is deterministic given a seed, and every
//! closed-form quantity (optimal policy, partition function, gradients,
//! kappa, screening metrics) is computed exactly rather than approximated.
//!
//! Module map:
//!
//! * [`corpus`] — annotated corpus types, score normalization, validation,
//!   and the JSONL interchange format.
//! * [`datagen`] — seeded synthetic corpus generation with a ground-truth
//!   sidecar, plus preference-pair construction.
//! * [`reward`] — linear reward heads, bootstrap ensembles, epistemic
//!   uncertainty, and the risk-adjusted advantage.
//! * [`policy`] — tabular softmax policies, exact KL divergence, and the
//!   closed-form optimum of the KL-regularized objective.
//! * [`carpo`] — pairwise CARPO/DPO losses, analytic gradients, the
//!   Bradley-Terry link, and the inference-time risk guard.
//! * [`trainer`] — gradient-descent training loop with a KL budget
//!   controller, evaluation, and the ablation harness.
//! * [`annotate`] — annotation quality control: Fleiss' kappa, Delphi
//!   adjudication, audit sampling, screening metrics, and Kalman-filtered
//!   per-group risk weights.
//! * [`seed`] / [`numerics`] — deterministic sub-seed derivation and the
//!   numerically stable primitives shared by the modules above.

pub mod annotate;
pub mod carpo;
pub mod corpus;
pub mod datagen;
pub mod error;
pub mod numerics;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod trainer;

pub use annotate::{
    audit_sample, delphi_adjudicate, fleiss_kappa, kalman_update, screening_metrics,
    update_group_weights, ConfusionCounts, KalmanState, KappaResult, RatingMatrix,
    ScreeningMetrics,
};
pub use carpo::{
    apply_guard, bt_probability, carpo_gradient, carpo_loss, dpo_loss, gradient_check,
    sweep_threshold, threshold_grid, EvalItem, GuardDecision, PairBatch, ThresholdCurve,
};
pub use corpus::{validate_corpus, Corpus, ValidationReport};
pub use datagen::{generate_corpus, make_pairs, GeneratorSpec, GroundTruth};
pub use error::{Error, Result};
pub use policy::{kl_divergence, optimal_policy, AdvantageTable, PolicyTable};
pub use reward::{advantage, fit_ensemble, lambda_weight, Prediction, RewardEnsemble};
pub use trainer::{
    evaluate, kl_schedule_step, run_ablation, train, train_variant, AblationVariant,
    EvalMetrics, TrainConfig, TrainReport,
};
