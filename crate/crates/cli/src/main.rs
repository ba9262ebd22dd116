//! Command-line front end wiring the library into reproducible experiments.
//!
//! Every subcommand writes its artifacts into `--out` together with a
//! `manifest.json` (schema `carpo-manifest/1`) recording the subcommand,
//! resolved configuration, seed, thread count, SHA-256 of every input file
//! and the names of every output file.  The manifest is written before any
//! other artifact, and re-running the recorded command single-threaded
//! reproduces every artifact byte for byte.
//!
//! Exit codes: 0 success, 1 validation/numerical failure, 2 I/O failure,
//! 64 usage error.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use carpo_core::annotate::{DEFAULT_OBS_NOISE, DEFAULT_PROCESS_NOISE, DEFAULT_WINDOW};
use carpo_core::carpo::EvalItem;
use carpo_core::datagen::GroundTruth;
use carpo_core::trainer::ablation_to_csv;
use carpo_core::{
    audit_sample, evaluate, fit_ensemble, fleiss_kappa, generate_corpus, gradient_check,
    run_ablation, sweep_threshold, threshold_grid, train, update_group_weights, Corpus, Error,
    GeneratorSpec, PolicyTable, RatingMatrix, Result, RewardEnsemble, TrainConfig,
};

/// Schema tag of `manifest.json`.
const MANIFEST_SCHEMA: &str = "carpo-manifest/1";

/// Gradient check passes only below this maximum relative error.
const GRAD_TOLERANCE: f64 = 1e-6;

/// Ensemble size when a subcommand has to fit one on the fly.
const DEFAULT_ENSEMBLE_MEMBERS: usize = 4;

#[derive(Parser)]
#[command(
    name = "carpo",
    version,
    about = "Risk-calibrated preference optimization toolkit",
    after_help = "Artifacts land in --out next to a manifest.json sufficient to \
                  re-run the command bit-identically with --threads 1."
)]
struct Cli {
    /// Override the seed from the spec/config file (or its default).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving all output artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads; 1 forces bit-exact mode.  Execution is sequential
    /// either way, so every thread count is bit-exact today.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus plus its ground-truth sidecar.
    Gen {
        /// Generator spec (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a policy on a corpus and write the per-epoch report.
    Train {
        /// Corpus JSONL produced by `gen` (or hand-built).
        #[arg(long)]
        corpus: PathBuf,
        /// Trainer config (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reward ensemble JSON; fitted from the corpus when omitted.
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Evaluate a trained policy against a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Policy JSON written by `train`.
        #[arg(long)]
        policy: PathBuf,
        /// Reward ensemble JSON written by `train` (or `fit` by hand).
        #[arg(long)]
        ensemble: PathBuf,
    },
    /// Trace the guard's refusal/leakage curve over a threshold grid.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        /// Ground-truth sidecar written by `gen` (gold high-risk flags).
        #[arg(long)]
        truth: PathBuf,
        /// Reward ensemble JSON; fitted from the corpus when omitted.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Threshold grid as start:end:step.
        #[arg(long, default_value = "0:4:0.05")]
        grid: String,
    },
    /// Compute Fleiss' kappa for a ratings file.
    Kappa {
        /// Ratings JSON: {"counts": [[..]], "n_raters": n} or
        /// {"labels": [[..]], "categories": k}.
        #[arg(long)]
        ratings: PathBuf,
    },
    /// Draw the 10% uniform + 10% stratified audit sample for a batch.
    Audit {
        /// Batch JSON: [[item_id, risk_score], ...].
        #[arg(long)]
        batch: PathBuf,
    },
    /// Run the per-group weight filters over an observation stream.
    Weights {
        /// Stream JSON: [[group, observed_weight], ...] in arrival order.
        #[arg(long)]
        stream: PathBuf,
        /// Number of demographic groups.
        #[arg(long, default_value_t = 4)]
        groups: usize,
        /// Tumbling window size (observations per filter update).
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
    },
    /// Check the analytic gradient against central finite differences.
    GradCheck {
        /// Number of random batches to test.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Train the full arm plus all three ablation arms and compare.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
}

/// One hashed input file as recorded in the manifest.
#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

/// Reproducibility record written to `manifest.json` before any artifact.
#[derive(Debug, Serialize)]
struct Manifest {
    schema: &'static str,
    tool_version: &'static str,
    subcommand: &'static str,
    /// Config/spec file path as given on the command line, when any.
    config_path: Option<String>,
    /// Resolved seed actually driving the run, when the command uses one.
    seed: Option<u64>,
    threads: u32,
    /// Fully resolved configuration (file values with flag overrides applied).
    config: serde_json::Value,
    inputs: Vec<InputRecord>,
    /// Output artifact names, relative to the manifest's directory.
    outputs: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here too; they are not usage errors.
            let kind = err.kind();
            let _ = err.print();
            return match kind {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(64),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let out = cli.out.as_path();
    let seed = cli.seed;
    let threads = cli.threads;
    match cli.command {
        Command::Gen { spec } => cmd_gen(out, seed, threads, spec.as_deref()),
        Command::Train { corpus, config, ensemble } => {
            cmd_train(out, seed, threads, &corpus, config.as_deref(), ensemble.as_deref())
        }
        Command::Eval { corpus, policy, ensemble } => {
            cmd_eval(out, threads, &corpus, &policy, &ensemble)
        }
        Command::Sweep { corpus, truth, ensemble, grid } => {
            cmd_sweep(out, seed, threads, &corpus, &truth, ensemble.as_deref(), &grid)
        }
        Command::Kappa { ratings } => cmd_kappa(out, threads, &ratings),
        Command::Audit { batch } => cmd_audit(out, seed, threads, &batch),
        Command::Weights { stream, groups, window } => {
            cmd_weights(out, threads, &stream, groups, window)
        }
        Command::GradCheck { instances } => cmd_grad_check(out, seed, threads, instances),
        Command::Ablate { corpus, config, ensemble } => {
            cmd_ablate(out, seed, threads, &corpus, config.as_deref(), ensemble.as_deref())
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen(out: &Path, seed: Option<u64>, threads: u32, spec_path: Option<&Path>) -> Result<()> {
    let mut spec = match spec_path {
        Some(path) => GeneratorSpec::load(path)?,
        None => GeneratorSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let inputs = hash_inputs(spec_path.into_iter())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "gen",
            config_path: spec_path.map(display_path),
            seed: Some(spec.seed),
            threads,
            config: serde_json::to_value(&spec)?,
            inputs,
            outputs: names(&["corpus.jsonl", "truth.jsonl"]),
        },
    )?;

    let (corpus, truth) = generate_corpus(&spec)?;
    corpus.save(out.join("corpus.jsonl"))?;
    truth.save(out.join("truth.jsonl"))?;
    println!(
        "generated {} prompts, {} cells, {} pairs (seed {})",
        corpus.n_prompts(),
        corpus.candidates.iter().map(Vec::len).sum::<usize>(),
        corpus.pairs.len(),
        spec.seed
    );
    Ok(())
}

fn cmd_train(
    out: &Path,
    seed: Option<u64>,
    threads: u32,
    corpus_path: &Path,
    config_path: Option<&Path>,
    ensemble_path: Option<&Path>,
) -> Result<()> {
    let mut config = match config_path {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let corpus = Corpus::load(corpus_path)?;
    let fitted;
    let ensemble = match ensemble_path {
        Some(path) => {
            fitted = false;
            RewardEnsemble::load(path)?
        }
        None => {
            fitted = true;
            fit_ensemble(&corpus, DEFAULT_ENSEMBLE_MEMBERS, config.seed)?
        }
    };

    let mut outputs = Vec::new();
    if fitted {
        outputs.push("ensemble.json".to_string());
    }
    outputs.extend(names(&["policy.json", "report.csv"]));
    let inputs =
        hash_inputs([Some(corpus_path), config_path, ensemble_path].into_iter().flatten())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "train",
            config_path: config_path.map(display_path),
            seed: Some(config.seed),
            threads,
            config: serde_json::to_value(&config)?,
            inputs,
            outputs,
        },
    )?;

    if fitted {
        ensemble.save(out.join("ensemble.json"))?;
    }
    let (policy, report) = train(&corpus, &ensemble, &config)?;
    policy.save(out.join("policy.json"))?;
    write_csv(out, "report.csv", |w| report.to_csv(w))?;
    let last = report.rows.last().expect("trained report has rows");
    println!(
        "trained {} epochs: loss {:.4}, kl {:.4}, beta {:.4}",
        last.epoch, last.loss, last.kl, last.beta
    );
    Ok(())
}

fn cmd_eval(
    out: &Path,
    threads: u32,
    corpus_path: &Path,
    policy_path: &Path,
    ensemble_path: &Path,
) -> Result<()> {
    let corpus = Corpus::load(corpus_path)?;
    let policy = PolicyTable::load(policy_path)?;
    let ensemble = RewardEnsemble::load(ensemble_path)?;
    let inputs = hash_inputs([corpus_path, policy_path, ensemble_path].into_iter())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "eval",
            config_path: None,
            seed: None,
            threads,
            config: serde_json::Value::Null,
            inputs,
            outputs: names(&["metrics.json"]),
        },
    )?;

    let metrics = evaluate(&policy, &corpus, &ensemble)?;
    write_json(out, "metrics.json", &WithManifest { manifest: "manifest.json", payload: &metrics })?;
    println!(
        "exp_pref {:.4}, exp_risk {:.4}, kl {:.4}, bt_accuracy {:.4}",
        metrics.exp_pref, metrics.exp_risk, metrics.kl, metrics.bt_accuracy
    );
    Ok(())
}

fn cmd_sweep(
    out: &Path,
    seed: Option<u64>,
    threads: u32,
    corpus_path: &Path,
    truth_path: &Path,
    ensemble_path: Option<&Path>,
    grid_spec: &str,
) -> Result<()> {
    let corpus = Corpus::load(corpus_path)?;
    let truth = GroundTruth::load(truth_path)?;
    let fit_seed = seed.unwrap_or(corpus.metadata.seed);
    let fitted;
    let ensemble = match ensemble_path {
        Some(path) => {
            fitted = false;
            RewardEnsemble::load(path)?
        }
        None => {
            fitted = true;
            fit_ensemble(&corpus, DEFAULT_ENSEMBLE_MEMBERS, fit_seed)?
        }
    };
    let (start, end, step) = parse_grid(grid_spec)?;
    let grid = threshold_grid(start, end, step)?;
    let eval_set = eval_items(&corpus, &truth)?;

    let mut outputs = Vec::new();
    if fitted {
        outputs.push("ensemble.json".to_string());
    }
    outputs.extend(names(&["curve.csv", "sweep.json"]));
    let inputs =
        hash_inputs([Some(corpus_path), Some(truth_path), ensemble_path].into_iter().flatten())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "sweep",
            config_path: None,
            seed: fitted.then_some(fit_seed),
            threads,
            config: serde_json::json!({ "grid": grid_spec }),
            inputs,
            outputs,
        },
    )?;

    if fitted {
        ensemble.save(out.join("ensemble.json"))?;
    }
    let curve = sweep_threshold(&eval_set, &ensemble, &grid)?;
    write_csv(out, "curve.csv", |w| curve.to_csv(w))?;
    let knee = *curve.knee();
    write_json(
        out,
        "sweep.json",
        &WithManifest {
            manifest: "manifest.json",
            payload: &serde_json::json!({
                "items": eval_set.len(),
                "grid_points": grid.len(),
                "knee": knee,
            }),
        },
    )?;
    println!(
        "swept {} thresholds over {} items; knee t={} (refusal {:.4}, leakage {:.4})",
        grid.len(),
        eval_set.len(),
        knee.t,
        knee.refusal_rate,
        knee.leakage_rate
    );
    Ok(())
}

/// Accepted shapes of the `kappa --ratings` file.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RatingsFile {
    /// Per-item per-category rating counts with a fixed rater count.
    Counts { counts: Vec<Vec<u64>>, n_raters: u64 },
    /// Per-item per-rater category labels.
    Labels { labels: Vec<Vec<usize>>, categories: usize },
}

fn cmd_kappa(out: &Path, threads: u32, ratings_path: &Path) -> Result<()> {
    let file: RatingsFile = serde_json::from_reader(File::open(ratings_path)?)?;
    let matrix = match file {
        RatingsFile::Counts { counts, n_raters } => RatingMatrix::new(counts, n_raters)?,
        RatingsFile::Labels { labels, categories } => {
            RatingMatrix::from_labels(&labels, categories)?
        }
    };
    let inputs = hash_inputs([ratings_path].into_iter())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "kappa",
            config_path: None,
            seed: None,
            threads,
            config: serde_json::Value::Null,
            inputs,
            outputs: names(&["kappa.json"]),
        },
    )?;

    let result = fleiss_kappa(&matrix);
    write_json(
        out,
        "kappa.json",
        &WithManifest {
            manifest: "manifest.json",
            payload: &serde_json::json!({
                "items": matrix.n_items(),
                "categories": matrix.n_categories(),
                "n_raters": matrix.n_raters(),
                "kappa": result,
            }),
        },
    )?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn cmd_audit(out: &Path, seed: Option<u64>, threads: u32, batch_path: &Path) -> Result<()> {
    let batch: Vec<(u32, f64)> = serde_json::from_reader(File::open(batch_path)?)?;
    let audit_seed = seed.unwrap_or(0);
    let inputs = hash_inputs([batch_path].into_iter())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "audit",
            config_path: None,
            seed: Some(audit_seed),
            threads,
            config: serde_json::Value::Null,
            inputs,
            outputs: names(&["audit.json"]),
        },
    )?;

    let sample = audit_sample(&batch, audit_seed)?;
    write_json(out, "audit.json", &WithManifest { manifest: "manifest.json", payload: &sample })?;
    let uniform = sample.items.iter().filter(|i| i.uniform).count();
    let stratified = sample.items.iter().filter(|i| i.stratified).count();
    println!(
        "audit over {} items: {} selected ({uniform} uniform, {stratified} stratified)",
        batch.len(),
        sample.items.len()
    );
    Ok(())
}

fn cmd_weights(
    out: &Path,
    threads: u32,
    stream_path: &Path,
    groups: usize,
    window: usize,
) -> Result<()> {
    let stream: Vec<(u32, f64)> = serde_json::from_reader(File::open(stream_path)?)?;
    let inputs = hash_inputs([stream_path].into_iter())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "weights",
            config_path: None,
            seed: None,
            threads,
            config: serde_json::json!({
                "groups": groups,
                "window": window,
                "process_noise": DEFAULT_PROCESS_NOISE,
                "obs_noise": DEFAULT_OBS_NOISE,
            }),
            inputs,
            outputs: names(&["weights.json"]),
        },
    )?;

    let weights =
        update_group_weights(&stream, groups, window, DEFAULT_PROCESS_NOISE, DEFAULT_OBS_NOISE)?;
    write_json(out, "weights.json", &WithManifest { manifest: "manifest.json", payload: &weights })?;
    for traj in &weights.groups {
        println!(
            "group {}: lambda {:.4} after {} window(s){}",
            traj.group,
            traj.current(),
            traj.lambdas.len(),
            if traj.flagged_empty { " [no complete window]" } else { "" }
        );
    }
    Ok(())
}

fn cmd_grad_check(out: &Path, seed: Option<u64>, threads: u32, instances: usize) -> Result<()> {
    let check_seed = seed.unwrap_or(0);
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "grad-check",
            config_path: None,
            seed: Some(check_seed),
            threads,
            config: serde_json::json!({
                "instances": instances,
                "tolerance": GRAD_TOLERANCE,
            }),
            inputs: Vec::new(),
            outputs: names(&["gradcheck.json"]),
        },
    )?;

    let report = gradient_check(check_seed, instances)?;
    let passed = report.max_rel_err < GRAD_TOLERANCE;
    write_json(
        out,
        "gradcheck.json",
        &WithManifest {
            manifest: "manifest.json",
            payload: &serde_json::json!({
                "instances": report.instances,
                "max_rel_err": report.max_rel_err,
                "tolerance": GRAD_TOLERANCE,
                "passed": passed,
            }),
        },
    )?;
    println!("max relative error: {:e} over {} instances", report.max_rel_err, report.instances);
    if !passed {
        return Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:e} >= {GRAD_TOLERANCE:e}",
            report.max_rel_err
        )));
    }
    Ok(())
}

fn cmd_ablate(
    out: &Path,
    seed: Option<u64>,
    threads: u32,
    corpus_path: &Path,
    config_path: Option<&Path>,
    ensemble_path: Option<&Path>,
) -> Result<()> {
    let mut config = match config_path {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let corpus = Corpus::load(corpus_path)?;
    let fitted;
    let ensemble = match ensemble_path {
        Some(path) => {
            fitted = false;
            RewardEnsemble::load(path)?
        }
        None => {
            fitted = true;
            fit_ensemble(&corpus, DEFAULT_ENSEMBLE_MEMBERS, config.seed)?
        }
    };

    let mut outputs = Vec::new();
    if fitted {
        outputs.push("ensemble.json".to_string());
    }
    outputs.push("ablation.csv".to_string());
    let inputs =
        hash_inputs([Some(corpus_path), config_path, ensemble_path].into_iter().flatten())?;
    write_manifest(
        out,
        &Manifest {
            schema: MANIFEST_SCHEMA,
            tool_version: env!("CARGO_PKG_VERSION"),
            subcommand: "ablate",
            config_path: config_path.map(display_path),
            seed: Some(config.seed),
            threads,
            config: serde_json::to_value(&config)?,
            inputs,
            outputs,
        },
    )?;

    if fitted {
        ensemble.save(out.join("ensemble.json"))?;
    }
    let rows = run_ablation(&corpus, &ensemble, &config)?;
    write_csv(out, "ablation.csv", |w| ablation_to_csv(&rows, w))?;
    for row in &rows {
        println!(
            "{}: exp_pref {:.4}, exp_risk {:.4}, kl {:.4}, bt_accuracy {:.4}",
            row.variant, row.exp_pref, row.exp_risk, row.kl, row.bt_accuracy
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// JSON envelope pointing each structured output back at its manifest.
#[derive(Debug, Serialize)]
struct WithManifest<'a, T: Serialize> {
    manifest: &'static str,
    #[serde(flatten)]
    payload: &'a T,
}

fn display_path(path: &Path) -> String {
    path.display().to_string()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// SHA-256 each input file, in argument order.
fn hash_inputs<'a>(paths: impl Iterator<Item = &'a Path>) -> Result<Vec<InputRecord>> {
    let mut out = Vec::new();
    for path in paths {
        let mut file = File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 8192];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let sha256 = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        out.push(InputRecord { path: display_path(path), sha256 });
    }
    Ok(out)
}

/// Create the output directory and write `manifest.json` into it.
fn write_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(out, "manifest.json", manifest)
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(out.join(name))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_csv(out: &Path, name: &str, emit: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(out.join(name))?);
    emit(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Parse a `start:end:step` grid spec.
fn parse_grid(spec: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidInput(format!("grid must be start:end:step, got {spec:?}")));
    }
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::InvalidInput(format!("grid component {s:?} is not a number")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

/// Pair every corpus cell with its gold high-risk flag from the sidecar.
fn eval_items(corpus: &Corpus, truth: &GroundTruth) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for (x, prompt) in corpus.prompts.iter().enumerate() {
        for candidate in &corpus.candidates[x] {
            let entry = truth.truth_for(prompt.id, candidate.id).ok_or_else(|| {
                Error::Validation(format!(
                    "truth sidecar has no entry for prompt {} response {}",
                    prompt.id, candidate.id
                ))
            })?;
            items.push(EvalItem {
                prompt: prompt.clone(),
                candidate: candidate.clone(),
                gold_high_risk: entry.high_risk,
            });
        }
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spec_parses_three_components() {
        assert_eq!(parse_grid("0:4:0.05").unwrap(), (0.0, 4.0, 0.05));
        assert_eq!(parse_grid("1.5:2:0.25").unwrap(), (1.5, 2.0, 0.25));
    }

    #[test]
    fn grid_spec_rejects_malformed_input() {
        assert!(parse_grid("0:4").is_err());
        assert!(parse_grid("0:4:x").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn ratings_file_accepts_both_shapes() {
        let counts: RatingsFile =
            serde_json::from_str(r#"{"counts": [[3, 0], [1, 2]], "n_raters": 3}"#).unwrap();
        assert!(matches!(counts, RatingsFile::Counts { .. }));
        let labels: RatingsFile =
            serde_json::from_str(r#"{"labels": [[0, 0, 1]], "categories": 2}"#).unwrap();
        assert!(matches!(labels, RatingsFile::Labels { .. }));
    }
}
