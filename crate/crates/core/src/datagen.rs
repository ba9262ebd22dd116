//! Seeded synthetic corpus generation with an exact ground-truth sidecar.
//!
//! The generator draws prompt and response features from a standard
//! normal, assigns demographic groups by largest-remainder apportionment
//! of the configured proportions, and scores every (prompt, response) cell
//! with two latent linear functions: a preference function centered
//! mid-scale and a risk function whose intercept is calibrated so a target
//! fraction of cells lands at or above the high-risk cutoff.  Annotation
//! records are the clamped true scores plus per-annotator Gaussian noise.
//!
//! Everything is a pure function of the spec (including its seed): the
//! corpus, the sidecar, and the derived preference pairs are reproduced
//! byte for byte.  The sidecar stores the unclamped-to-record mapping
//! exactly — `record = clamp(truth + noise)` holds bitwise — so tests can
//! audit the generator without re-deriving its internals.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    AnnotationRecord, Corpus, CorpusMetadata, PreferencePair, Prompt, ResponseCandidate,
    HIGH_RISK_CUTOFF, MAX_GROUPS, PREF_MAX, PREF_MIN, RISK_MAX, RISK_MIN,
};
use crate::error::{Error, Result};
use crate::seed::subseed;

/// Schema tag of the ground-truth sidecar.
pub const TRUTH_SCHEMA: &str = "carpo-truth/1";
/// Allowed gap between the requested and realized high-risk fraction.
pub const HIGH_RISK_TOLERANCE: f64 = 0.05;

/// Standard deviation of the latent preference score across cells.
const TARGET_PREF_SD: f64 = 1.2;
/// Standard deviation of the latent risk score across cells.
const TARGET_RISK_SD: f64 = 0.55;
/// Correlation between derived preference and risk weight vectors, so
/// preferred responses are not automatically safe ones.
const WEIGHT_CORRELATION: f64 = 0.3;

/// Full description of a synthetic corpus.  Serializable as TOML or JSON;
/// omitted fields take the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Number of prompts `n`.
    #[serde(default = "default_n_prompts")]
    pub n_prompts: usize,
    /// Response candidates per prompt `m`.
    #[serde(default = "default_m_candidates")]
    pub m_candidates: usize,
    /// Per-entity feature dimension `d`.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Demographic group proportions (must sum to one; at most 16 groups).
    #[serde(default = "default_group_proportions")]
    pub group_proportions: Vec<f64>,
    /// Annotators per (prompt, response) cell.
    #[serde(default = "default_annotators")]
    pub annotators: usize,
    /// Standard deviation of annotator noise.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    /// Target fraction of cells with true risk at or above the cutoff.
    #[serde(default = "default_high_risk_fraction")]
    pub high_risk_fraction: f64,
    /// Preference pairs requested per prompt.
    #[serde(default = "default_per_prompt_pairs")]
    pub per_prompt_pairs: usize,
    /// Run seed; every stream below derives from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Explicit preference weights (length `2d`); drawn from the seed when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pref_weights: Option<Vec<f64>>,
    /// Preference intercept.
    #[serde(default = "default_pref_bias")]
    pub pref_bias: f64,
    /// Explicit risk weights (length `2d`); drawn from the seed when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_weights: Option<Vec<f64>>,
    /// Risk intercept; calibrated to hit `high_risk_fraction` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_bias: Option<f64>,
}

fn default_n_prompts() -> usize {
    200
}
fn default_m_candidates() -> usize {
    8
}
fn default_feature_dim() -> usize {
    16
}
fn default_group_proportions() -> Vec<f64> {
    vec![0.36, 0.32, 0.18, 0.14]
}
fn default_annotators() -> usize {
    3
}
fn default_noise_sigma() -> f64 {
    0.3
}
fn default_high_risk_fraction() -> f64 {
    0.15
}
fn default_per_prompt_pairs() -> usize {
    4
}
fn default_seed() -> u64 {
    42
}
fn default_pref_bias() -> f64 {
    4.0
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_prompts: default_n_prompts(),
            m_candidates: default_m_candidates(),
            feature_dim: default_feature_dim(),
            group_proportions: default_group_proportions(),
            annotators: default_annotators(),
            noise_sigma: default_noise_sigma(),
            high_risk_fraction: default_high_risk_fraction(),
            per_prompt_pairs: default_per_prompt_pairs(),
            seed: default_seed(),
            pref_weights: None,
            pref_bias: default_pref_bias(),
            risk_weights: None,
            risk_bias: None,
        }
    }
}

impl GeneratorSpec {
    /// Read a spec from TOML (`.toml`) or JSON (anything else).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            Ok(toml::from_str(&text)?)
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    /// Canonical JSON used for hashing and for the corpus metadata echo.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// SHA-256 (hex) of the canonical JSON.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 {
            return Err(Error::invalid("n_prompts must be at least 1"));
        }
        if self.m_candidates < 2 {
            return Err(Error::invalid("m_candidates must be at least 2"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be at least 1"));
        }
        if self.annotators == 0 {
            return Err(Error::invalid("annotators must be at least 1"));
        }
        if self.per_prompt_pairs == 0 {
            return Err(Error::invalid("per_prompt_pairs must be at least 1"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::invalid(format!(
                "noise_sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !self.high_risk_fraction.is_finite() || !(0.0..=1.0).contains(&self.high_risk_fraction) {
            return Err(Error::invalid(format!(
                "high_risk_fraction must lie in [0, 1], got {}",
                self.high_risk_fraction
            )));
        }
        if self.group_proportions.is_empty() || self.group_proportions.len() > MAX_GROUPS {
            return Err(Error::invalid(format!(
                "group_proportions needs 1..={MAX_GROUPS} entries, got {}",
                self.group_proportions.len()
            )));
        }
        if !self.group_proportions.iter().all(|&p| p.is_finite() && p >= 0.0) {
            return Err(Error::invalid("group proportions must be finite and nonnegative"));
        }
        let sum: f64 = self.group_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("group proportions sum to {sum}, expected 1")));
        }
        for (name, w) in [("pref_weights", &self.pref_weights), ("risk_weights", &self.risk_weights)] {
            if let Some(w) = w {
                if w.len() != 2 * self.feature_dim {
                    return Err(Error::invalid(format!(
                        "{name} has length {}, expected 2 * d = {}",
                        w.len(),
                        2 * self.feature_dim
                    )));
                }
                if !w.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid(format!("{name} has a non-finite entry")));
                }
            }
        }
        if !self.pref_bias.is_finite() {
            return Err(Error::invalid("pref_bias must be finite"));
        }
        if let Some(b) = self.risk_bias {
            if !b.is_finite() {
                return Err(Error::invalid("risk_bias must be finite"));
            }
        }
        Ok(())
    }
}

/// Exact truth for one (prompt, response) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub prompt_id: u32,
    pub response_id: u32,
    /// Clamped latent preference score.
    pub true_r_p: f64,
    /// Clamped latent risk score.
    pub true_r_s: f64,
    /// `true_r_s` meets the high-risk cutoff.
    pub high_risk: bool,
}

/// The noise draw behind one annotation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub prompt_id: u32,
    pub response_id: u32,
    pub annotator_id: u32,
    pub noise_p: f64,
    pub noise_s: f64,
}

/// Ground-truth sidecar emitted alongside a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub spec_hash: String,
    pub truths: Vec<TruthEntry>,
    pub noises: Vec<NoiseEntry>,
}

impl GroundTruth {
    /// Truth entry for a cell, if present.
    pub fn truth_for(&self, prompt_id: u32, response_id: u32) -> Option<&TruthEntry> {
        self.truths
            .iter()
            .find(|t| t.prompt_id == prompt_id && t.response_id == response_id)
    }

    /// Write the sidecar as `carpo-truth/1` JSONL.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = TruthHeader {
            schema: TRUTH_SCHEMA.to_string(),
            seed: self.seed,
            spec_hash: self.spec_hash.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.truths {
            serde_json::to_writer(&mut w, &TruthLine::Truth(t.clone()))?;
            w.write_all(b"\n")?;
        }
        for n in &self.noises {
            serde_json::to_writer(&mut w, &TruthLine::Noise(n.clone()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a `carpo-truth/1` JSONL sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::invalid("empty truth file: missing header line"))??;
        let header: TruthHeader = serde_json::from_str(&header_line)?;
        if header.schema != TRUTH_SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported truth schema {:?} (expected {:?})",
                header.schema, TRUTH_SCHEMA
            )));
        }
        let mut truth = GroundTruth {
            seed: header.seed,
            spec_hash: header.spec_hash,
            truths: Vec::new(),
            noises: Vec::new(),
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                TruthLine::Truth(t) => truth.truths.push(t),
                TruthLine::Noise(n) => truth.noises.push(n),
            }
        }
        Ok(truth)
    }
}

#[derive(Serialize, Deserialize)]
struct TruthHeader {
    schema: String,
    seed: u64,
    spec_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TruthLine {
    Truth(TruthEntry),
    Noise(NoiseEntry),
}

/// Apportion `n` items over proportions by largest remainder; counts
/// differ from `p * n` by at most one.
pub fn apportion_groups(proportions: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions.iter().map(|&p| (p * n as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // Largest fractional part first; ties go to the smaller group index.
    order.sort_by(|&a, &b| {
        let fa = proportions[a] * n as f64 - (proportions[a] * n as f64).floor();
        let fb = proportions[b] * n as f64 - (proportions[b] * n as f64).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Generate a corpus and its ground-truth sidecar from a spec.
///
/// Deterministic: the same spec produces identical artifacts.  Errors when
/// the spec is invalid or when no risk intercept can realize the requested
/// high-risk fraction within [`HIGH_RISK_TOLERANCE`].
pub fn generate_corpus(spec: &GeneratorSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let n = spec.n_prompts;
    let m = spec.m_candidates;
    let d = spec.feature_dim;

    // Features, prompt-major then candidate-major, from one stream.
    let mut feat_rng = StdRng::seed_from_u64(subseed(spec.seed, "datagen/features"));
    let draw = |rng: &mut StdRng| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    let prompt_features: Vec<Vec<f64>> =
        (0..n).map(|_| (0..d).map(|_| draw(&mut feat_rng)).collect()).collect();
    let candidate_features: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..m).map(|_| (0..d).map(|_| draw(&mut feat_rng)).collect()).collect())
        .collect();

    // Group labels by largest-remainder apportionment, then shuffled so
    // group membership is independent of prompt id.
    let counts = apportion_groups(&spec.group_proportions, n);
    let mut group_of: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat(g as u32).take(c))
        .collect();
    let mut group_rng = StdRng::seed_from_u64(subseed(spec.seed, "datagen/groups"));
    group_of.shuffle(&mut group_rng);

    // Latent weights: explicit, or drawn with a controlled correlation so
    // the preferred response is not automatically the safe one.
    let mut latent_rng = StdRng::seed_from_u64(subseed(spec.seed, "datagen/latents"));
    let a: Vec<f64> = (0..2 * d).map(|_| draw(&mut latent_rng)).collect();
    let b: Vec<f64> = (0..2 * d).map(|_| draw(&mut latent_rng)).collect();
    let per_entry = 1.0 / (2.0 * d as f64).sqrt();
    let w_p: Vec<f64> = match &spec.pref_weights {
        Some(w) => w.clone(),
        None => a.iter().map(|&x| TARGET_PREF_SD * per_entry * x).collect(),
    };
    let w_s: Vec<f64> = match &spec.risk_weights {
        Some(w) => w.clone(),
        None => {
            let ortho = (1.0 - WEIGHT_CORRELATION * WEIGHT_CORRELATION).sqrt();
            a.iter()
                .zip(&b)
                .map(|(&x, &y)| TARGET_RISK_SD * per_entry * (WEIGHT_CORRELATION * x + ortho * y))
                .collect()
        }
    };

    // Latent projections for every cell, prompt-major.
    let dot = |w: &[f64], pf: &[f64], cf: &[f64]| {
        w[..d].iter().zip(pf).map(|(a, b)| a * b).sum::<f64>()
            + w[d..].iter().zip(cf).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut proj_p = Vec::with_capacity(n * m);
    let mut proj_s = Vec::with_capacity(n * m);
    for x in 0..n {
        for y in 0..m {
            proj_p.push(dot(&w_p, &prompt_features[x], &candidate_features[x][y]));
            proj_s.push(dot(&w_s, &prompt_features[x], &candidate_features[x][y]));
        }
    }

    let risk_bias = match spec.risk_bias {
        Some(b) => b,
        None => calibrate_risk_bias(&proj_s, spec.high_risk_fraction),
    };
    let realized = proj_s.iter().filter(|&&p| p + risk_bias >= HIGH_RISK_CUTOFF).count() as f64
        / (n * m) as f64;
    if (realized - spec.high_risk_fraction).abs() > HIGH_RISK_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "no risk intercept realizes high_risk_fraction {} (closest achievable here: {realized:.4})",
            spec.high_risk_fraction
        )));
    }

    // Assemble prompts, candidates, truths, and noisy records.
    let mut prompts = Vec::with_capacity(n);
    let mut candidates = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n * m);
    let mut noises = Vec::with_capacity(n * m * spec.annotators);
    let mut records = Vec::with_capacity(n * m * spec.annotators);
    let mut noise_rng = StdRng::seed_from_u64(subseed(spec.seed, "datagen/noise"));
    for x in 0..n {
        prompts.push(Prompt {
            id: x as u32,
            feature: prompt_features[x].clone(),
            age_group: group_of[x],
        });
        let mut row = Vec::with_capacity(m);
        for y in 0..m {
            row.push(ResponseCandidate { id: y as u32, feature: candidate_features[x][y].clone() });
            let raw_p = spec.pref_bias + proj_p[x * m + y];
            let raw_s = risk_bias + proj_s[x * m + y];
            let true_r_p = raw_p.clamp(PREF_MIN, PREF_MAX);
            let true_r_s = raw_s.clamp(RISK_MIN, RISK_MAX);
            truths.push(TruthEntry {
                prompt_id: x as u32,
                response_id: y as u32,
                true_r_p,
                true_r_s,
                high_risk: true_r_s >= HIGH_RISK_CUTOFF,
            });
            for annotator in 0..spec.annotators {
                let noise_p = spec.noise_sigma * draw(&mut noise_rng);
                let noise_s = spec.noise_sigma * draw(&mut noise_rng);
                noises.push(NoiseEntry {
                    prompt_id: x as u32,
                    response_id: y as u32,
                    annotator_id: annotator as u32,
                    noise_p,
                    noise_s,
                });
                records.push(AnnotationRecord {
                    prompt_id: x as u32,
                    response_id: y as u32,
                    r_p: (true_r_p + noise_p).clamp(PREF_MIN, PREF_MAX),
                    r_s: (true_r_s + noise_s).clamp(RISK_MIN, RISK_MAX),
                    annotator_id: annotator as u32,
                    age_group: group_of[x],
                });
            }
        }
        candidates.push(row);
    }

    let mut corpus = Corpus {
        prompts,
        candidates,
        records,
        pairs: Vec::new(),
        metadata: CorpusMetadata {
            seed: spec.seed,
            generator: Some(serde_json::from_str(&spec.canonical_json()).expect("spec json")),
            spec_hash: Some(spec.hash()),
        },
    };
    corpus.pairs = make_pairs(&corpus, spec.per_prompt_pairs, subseed(spec.seed, "datagen/pairs"))?.pairs;

    let truth = GroundTruth { seed: spec.seed, spec_hash: spec.hash(), truths, noises };
    Ok((corpus, truth))
}

/// Pick the risk intercept placing the requested fraction of projections
/// at or above the cutoff (up to ties).
fn calibrate_risk_bias(proj: &[f64], fraction: f64) -> f64 {
    let n = proj.len();
    let mut sorted = proj.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        // Everything strictly below the cutoff.
        let top = sorted[0];
        HIGH_RISK_CUTOFF - top - 1e-9 * (1.0 + top.abs())
    } else {
        // The k-th largest projection lands exactly on the cutoff.
        HIGH_RISK_CUTOFF - sorted[k - 1]
    }
}

/// Preference pairs derived from a corpus, with the prompts that could
/// supply none.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    /// Prompts whose candidates were all tied (or uncovered), yielding
    /// zero pairs.
    pub flagged_prompts: Vec<u32>,
}

/// Build up to `per_prompt` preference pairs per prompt from mean
/// annotated scores.
///
/// Candidates are compared by mean `r_p`; exactly tied candidate pairs are
/// skipped (no arbitrary winner), and a prompt whose comparisons are all
/// ties — or with fewer than two record-covered candidates — contributes
/// nothing and is flagged.  Pair scores carry the mean `(r_p, r_s)` of
/// each side.  Sampling without replacement from each prompt's comparison
/// pool is deterministic in `seed`.
pub fn make_pairs(corpus: &Corpus, per_prompt: usize, seed: u64) -> Result<PairSet> {
    if per_prompt == 0 {
        return Err(Error::invalid("per_prompt must be at least 1"));
    }
    let means = corpus.label_means();
    let mut pairs = Vec::new();
    let mut flagged = Vec::new();
    for (x, prompt) in corpus.prompts.iter().enumerate() {
        // All unordered candidate pairs with distinct mean preference.
        let mut pool = Vec::new();
        for i in 0..corpus.candidates[x].len() {
            for j in (i + 1)..corpus.candidates[x].len() {
                if let (Some((pi, si)), Some((pj, sj))) = (means[x][i], means[x][j]) {
                    if pi != pj {
                        pool.push(if pi > pj {
                            (i, j, (pi, si), (pj, sj))
                        } else {
                            (j, i, (pj, sj), (pi, si))
                        });
                    }
                }
            }
        }
        if pool.is_empty() {
            flagged.push(prompt.id);
            continue;
        }
        let mut rng = StdRng::seed_from_u64(subseed(seed, &format!("pairs/{}", prompt.id)));
        pool.shuffle(&mut rng);
        for &(w, l, ws, ls) in pool.iter().take(per_prompt) {
            pairs.push(PreferencePair {
                prompt_id: prompt.id,
                winner_id: corpus.candidates[x][w].id,
                loser_id: corpus.candidates[x][l].id,
                winner_scores: ws,
                loser_scores: ls,
            });
        }
    }
    Ok(PairSet { pairs, flagged_prompts: flagged })
}
