//! Annotated corpus types, validation, score normalization, and the JSONL
//! interchange format.
//!
//! A corpus holds `n` prompts, `m` response candidates per prompt, bounded
//! per-(prompt, response) annotation records, and derived preference pairs.
//! Preference scores live on a 7-point scale (`[1, 7]`) and risk scores on
//! a 5-point scale (`[0, 4]`); both normalize affinely onto `[0, 1]`.
//!
//! On disk a corpus is a JSONL file under the `carpo-corpus/1` schema: a
//! header line carrying the schema tag and metadata, followed by one object
//! per line tagged with `"kind"` (`prompt`, `candidate`, `record`, `pair`).
//! Reading back a written corpus reproduces every field exactly.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound of the preference scale.
pub const PREF_MIN: f64 = 1.0;
/// Upper bound of the preference scale.
pub const PREF_MAX: f64 = 7.0;
/// Lower bound of the risk scale.
pub const RISK_MIN: f64 = 0.0;
/// Upper bound of the risk scale.
pub const RISK_MAX: f64 = 4.0;
/// Risk scores at or above this value count as high-risk (top two rungs of
/// the 5-point scale).
pub const HIGH_RISK_CUTOFF: f64 = 3.0;
/// Maximum number of demographic groups a corpus may use.
pub const MAX_GROUPS: usize = 16;

/// Schema tag written to the JSONL header line.
pub const CORPUS_SCHEMA: &str = "carpo-corpus/1";

/// A prompt (context) with its feature vector and demographic group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u32,
    pub feature: Vec<f64>,
    pub age_group: u32,
}

/// One response candidate attached to a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCandidate {
    pub id: u32,
    pub feature: Vec<f64>,
}

/// A single annotator's scores for one (prompt, response) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub prompt_id: u32,
    pub response_id: u32,
    /// Preference score on `[1, 7]`.
    pub r_p: f64,
    /// Risk score on `[0, 4]`.
    pub r_s: f64,
    pub annotator_id: u32,
    /// Demographic group of the prompt, denormalized onto the record.
    pub age_group: u32,
}

/// A preference pair: the winner was scored at least as preferred as the
/// loser.  Scores are `(r_p, r_s)` aggregates carried along for the losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: u32,
    pub winner_id: u32,
    pub loser_id: u32,
    pub winner_scores: (f64, f64),
    pub loser_scores: (f64, f64),
}

/// Provenance carried in the corpus header.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusMetadata {
    /// Seed the corpus was generated from (0 for hand-built corpora).
    pub seed: u64,
    /// Echo of the generator spec, when the corpus is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
    /// SHA-256 of the canonical generator-spec JSON, when synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_hash: Option<String>,
}

/// A full annotated corpus.
///
/// `candidates[i]` holds the response set of `prompts[i]`; records and
/// pairs reference prompts and candidates by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub prompts: Vec<Prompt>,
    pub candidates: Vec<Vec<ResponseCandidate>>,
    pub records: Vec<AnnotationRecord>,
    pub pairs: Vec<PreferencePair>,
    pub metadata: CorpusMetadata,
}

/// What a validation violation is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A score or group index is outside its documented range.
    Range,
    /// An id points at a prompt or candidate that does not exist.
    Reference,
    /// Two entities collide on an identity that must be unique.
    Duplicate,
    /// A structural requirement fails (dimensions, candidate counts,
    /// winner/loser ordering).
    Structure,
}

/// One validation failure with a human-readable description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

/// Outcome of [`validate_corpus`]: valid iff `violations` is empty.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }
}

impl Corpus {
    /// Number of prompts.
    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    /// Candidate-count per prompt, in prompt order — the table shape used
    /// by policies fit to this corpus.
    pub fn shape(&self) -> Vec<usize> {
        self.candidates.iter().map(Vec::len).collect()
    }

    /// Number of demographic groups spanned (`max age_group + 1`).
    pub fn n_groups(&self) -> usize {
        self.prompts
            .iter()
            .map(|p| p.age_group as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Feature dimension, taken from the first prompt (validation enforces
    /// that all features agree).
    pub fn feature_dim(&self) -> usize {
        self.prompts.first().map(|p| p.feature.len()).unwrap_or(0)
    }

    /// Index of the prompt with `id`.
    pub fn prompt_index(&self, id: u32) -> Option<usize> {
        self.prompts.iter().position(|p| p.id == id)
    }

    /// Index of candidate `id` within prompt `prompt_idx`'s response set.
    pub fn candidate_index(&self, prompt_idx: usize, id: u32) -> Option<usize> {
        self.candidates
            .get(prompt_idx)?
            .iter()
            .position(|c| c.id == id)
    }

    /// Mean annotated `(r_p, r_s)` per (prompt, response) cell, `None` for
    /// cells no record covers.  Indexed `[prompt][candidate]`.
    pub fn label_means(&self) -> Vec<Vec<Option<(f64, f64)>>> {
        let mut sums: Vec<Vec<(f64, f64, usize)>> = self
            .candidates
            .iter()
            .map(|row| vec![(0.0, 0.0, 0); row.len()])
            .collect();
        for rec in &self.records {
            if let Some(pi) = self.prompt_index(rec.prompt_id) {
                if let Some(ci) = self.candidate_index(pi, rec.response_id) {
                    let cell = &mut sums[pi][ci];
                    cell.0 += rec.r_p;
                    cell.1 += rec.r_s;
                    cell.2 += 1;
                }
            }
        }
        sums.into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(sp, ss, n)| {
                        if n == 0 {
                            None
                        } else {
                            Some((sp / n as f64, ss / n as f64))
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Write the corpus to `path` in `carpo-corpus/1` JSONL.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Read a corpus from a `carpo-corpus/1` JSONL file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_jsonl(BufReader::new(file))
    }

    /// Serialize to JSONL: one header line, then one line per entity.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            schema: CORPUS_SCHEMA.to_string(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.prompts {
            write_line(w, &Line::Prompt(p.clone()))?;
        }
        for (p, row) in self.prompts.iter().zip(&self.candidates) {
            for c in row {
                write_line(
                    w,
                    &Line::Candidate(CandidateLine {
                        prompt_id: p.id,
                        id: c.id,
                        feature: c.feature.clone(),
                    }),
                )?;
            }
        }
        for r in &self.records {
            write_line(w, &Line::Record(r.clone()))?;
        }
        for pair in &self.pairs {
            write_line(w, &Line::Pair(pair.clone()))?;
        }
        Ok(())
    }

    /// Parse a corpus from JSONL.  The header must come first and carry the
    /// `carpo-corpus/1` schema tag; every candidate must follow its prompt.
    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::invalid("empty corpus file: missing header line"))??;
        let header: Header = serde_json::from_str(&header_line)?;
        if header.schema != CORPUS_SCHEMA {
            return Err(Error::invalid(format!(
                "unsupported corpus schema {:?} (expected {:?})",
                header.schema, CORPUS_SCHEMA
            )));
        }

        let mut corpus = Corpus {
            prompts: Vec::new(),
            candidates: Vec::new(),
            records: Vec::new(),
            pairs: Vec::new(),
            metadata: header.metadata,
        };
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| {
                Error::invalid(format!("corpus line {}: {}", lineno + 2, e))
            })?;
            match parsed {
                Line::Prompt(p) => {
                    corpus.prompts.push(p);
                    corpus.candidates.push(Vec::new());
                }
                Line::Candidate(c) => {
                    let idx = corpus.prompt_index(c.prompt_id).ok_or_else(|| {
                        Error::invalid(format!(
                            "corpus line {}: candidate references unknown prompt {}",
                            lineno + 2,
                            c.prompt_id
                        ))
                    })?;
                    corpus.candidates[idx].push(ResponseCandidate {
                        id: c.id,
                        feature: c.feature,
                    });
                }
                Line::Record(rec) => corpus.records.push(rec),
                Line::Pair(pair) => corpus.pairs.push(pair),
            }
        }
        Ok(corpus)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    metadata: CorpusMetadata,
}

/// Candidate line with its owning prompt spelled out (the in-memory layout
/// keeps candidates nested under prompts instead).
#[derive(Serialize, Deserialize)]
struct CandidateLine {
    prompt_id: u32,
    id: u32,
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Prompt(Prompt),
    Candidate(CandidateLine),
    Record(AnnotationRecord),
    Pair(PreferencePair),
}

fn write_line(w: &mut impl Write, line: &Line) -> Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Map raw scores onto the unit interval: `r_p` via `(r_p - 1) / 6`, `r_s`
/// via `r_s / 4`.  Errors if either score is outside its scale.
pub fn normalize_scores(r_p: f64, r_s: f64) -> Result<(f64, f64)> {
    check_score_ranges(r_p, r_s)?;
    Ok(((r_p - PREF_MIN) / (PREF_MAX - PREF_MIN), (r_s - RISK_MIN) / (RISK_MAX - RISK_MIN)))
}

/// Inverse of [`normalize_scores`].  Errors if either input leaves `[0, 1]`.
pub fn denormalize_scores(p: f64, s: f64) -> Result<(f64, f64)> {
    for (name, v) in [("normalized preference", p), ("normalized risk", s)] {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok((PREF_MIN + p * (PREF_MAX - PREF_MIN), RISK_MIN + s * (RISK_MAX - RISK_MIN)))
}

fn check_score_ranges(r_p: f64, r_s: f64) -> Result<()> {
    if !r_p.is_finite() || !(PREF_MIN..=PREF_MAX).contains(&r_p) {
        return Err(Error::invalid(format!(
            "preference score {r_p} outside [{PREF_MIN}, {PREF_MAX}]"
        )));
    }
    if !r_s.is_finite() || !(RISK_MIN..=RISK_MAX).contains(&r_s) {
        return Err(Error::invalid(format!(
            "risk score {r_s} outside [{RISK_MIN}, {RISK_MAX}]"
        )));
    }
    Ok(())
}

fn score_in_range(r_p: f64, r_s: f64) -> bool {
    check_score_ranges(r_p, r_s).is_ok()
}

/// Check a corpus against the structural and range rules.  Returns a report
/// listing every violation found; the corpus is valid iff the report is
/// empty.  One out-of-range or dangling field produces exactly one
/// violation.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport::default();

    if corpus.prompts.len() != corpus.candidates.len() {
        report.push(
            ViolationKind::Structure,
            format!(
                "{} prompts but {} candidate rows",
                corpus.prompts.len(),
                corpus.candidates.len()
            ),
        );
        // The row/prompt pairing below would misattribute everything.
        return report;
    }

    let dim = corpus.feature_dim();
    let mut prompt_ids = BTreeSet::new();
    for p in &corpus.prompts {
        if !prompt_ids.insert(p.id) {
            report.push(ViolationKind::Duplicate, format!("duplicate prompt id {}", p.id));
        }
        if p.feature.len() != dim {
            report.push(
                ViolationKind::Structure,
                format!("prompt {} has feature dim {} (expected {dim})", p.id, p.feature.len()),
            );
        }
        if !p.feature.iter().all(|x| x.is_finite()) {
            report.push(ViolationKind::Range, format!("prompt {} has non-finite feature", p.id));
        }
        if p.age_group as usize >= MAX_GROUPS {
            report.push(
                ViolationKind::Range,
                format!("prompt {} age_group {} exceeds maximum {}", p.id, p.age_group, MAX_GROUPS - 1),
            );
        }
    }

    for (p, row) in corpus.prompts.iter().zip(&corpus.candidates) {
        if row.len() < 2 {
            report.push(
                ViolationKind::Structure,
                format!("prompt {} has {} candidates (need at least 2)", p.id, row.len()),
            );
        }
        let mut cand_ids = BTreeSet::new();
        for c in row {
            if !cand_ids.insert(c.id) {
                report.push(
                    ViolationKind::Duplicate,
                    format!("prompt {} has duplicate candidate id {}", p.id, c.id),
                );
            }
            if c.feature.len() != dim {
                report.push(
                    ViolationKind::Structure,
                    format!(
                        "candidate {} of prompt {} has feature dim {} (expected {dim})",
                        c.id,
                        p.id,
                        c.feature.len()
                    ),
                );
            }
            if !c.feature.iter().all(|x| x.is_finite()) {
                report.push(
                    ViolationKind::Range,
                    format!("candidate {} of prompt {} has non-finite feature", c.id, p.id),
                );
            }
        }
    }

    let mut seen_records = BTreeSet::new();
    for rec in &corpus.records {
        if !score_in_range(rec.r_p, rec.r_s) {
            report.push(
                ViolationKind::Range,
                format!(
                    "record ({}, {}, annotator {}) scores ({}, {}) outside [1,7] x [0,4]",
                    rec.prompt_id, rec.response_id, rec.annotator_id, rec.r_p, rec.r_s
                ),
            );
        }
        match corpus.prompt_index(rec.prompt_id) {
            None => report.push(
                ViolationKind::Reference,
                format!("record references unknown prompt {}", rec.prompt_id),
            ),
            Some(pi) => {
                if corpus.candidate_index(pi, rec.response_id).is_none() {
                    report.push(
                        ViolationKind::Reference,
                        format!(
                            "record references unknown response {} under prompt {}",
                            rec.response_id, rec.prompt_id
                        ),
                    );
                }
                if corpus.prompts[pi].age_group != rec.age_group {
                    report.push(
                        ViolationKind::Structure,
                        format!(
                            "record ({}, {}) carries age_group {} but prompt has {}",
                            rec.prompt_id, rec.response_id, rec.age_group, corpus.prompts[pi].age_group
                        ),
                    );
                }
            }
        }
        if !seen_records.insert((rec.prompt_id, rec.response_id, rec.annotator_id)) {
            report.push(
                ViolationKind::Duplicate,
                format!(
                    "duplicate record for ({}, {}) by annotator {}",
                    rec.prompt_id, rec.response_id, rec.annotator_id
                ),
            );
        }
    }

    for pair in &corpus.pairs {
        match corpus.prompt_index(pair.prompt_id) {
            None => {
                report.push(
                    ViolationKind::Reference,
                    format!("pair references unknown prompt {}", pair.prompt_id),
                );
                continue;
            }
            Some(pi) => {
                for (role, id) in [("winner", pair.winner_id), ("loser", pair.loser_id)] {
                    if corpus.candidate_index(pi, id).is_none() {
                        report.push(
                            ViolationKind::Reference,
                            format!(
                                "pair under prompt {} references unknown {role} {id}",
                                pair.prompt_id
                            ),
                        );
                    }
                }
            }
        }
        if pair.winner_id == pair.loser_id {
            report.push(
                ViolationKind::Structure,
                format!(
                    "pair under prompt {} compares candidate {} with itself",
                    pair.prompt_id, pair.winner_id
                ),
            );
        }
        for (role, (rp, rs)) in [("winner", pair.winner_scores), ("loser", pair.loser_scores)] {
            if !score_in_range(rp, rs) {
                report.push(
                    ViolationKind::Range,
                    format!(
                        "pair under prompt {} has {role} scores ({rp}, {rs}) outside [1,7] x [0,4]",
                        pair.prompt_id
                    ),
                );
            }
        }
        if pair.winner_scores.0 < pair.loser_scores.0 {
            report.push(
                ViolationKind::Structure,
                format!(
                    "pair under prompt {}: winner preference {} below loser preference {}",
                    pair.prompt_id, pair.winner_scores.0, pair.loser_scores.0
                ),
            );
        }
    }

    report
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Two prompts, two candidates each, one record per cell, one pair.
    pub(crate) fn tiny_corpus() -> Corpus {
        let prompts = vec![
            Prompt { id: 0, feature: vec![0.5, -1.0], age_group: 0 },
            Prompt { id: 1, feature: vec![1.5, 0.25], age_group: 1 },
        ];
        let candidates = vec![
            vec![
                ResponseCandidate { id: 0, feature: vec![0.1, 0.2] },
                ResponseCandidate { id: 1, feature: vec![-0.3, 0.4] },
            ],
            vec![
                ResponseCandidate { id: 0, feature: vec![1.0, 1.0] },
                ResponseCandidate { id: 1, feature: vec![0.0, -1.0] },
            ],
        ];
        let mut records = Vec::new();
        for (pid, group) in [(0u32, 0u32), (1, 1)] {
            for rid in 0..2u32 {
                records.push(AnnotationRecord {
                    prompt_id: pid,
                    response_id: rid,
                    r_p: 4.0 + rid as f64,
                    r_s: 1.0 + pid as f64,
                    annotator_id: 0,
                    age_group: group,
                });
            }
        }
        let pairs = vec![PreferencePair {
            prompt_id: 0,
            winner_id: 1,
            loser_id: 0,
            winner_scores: (5.0, 1.0),
            loser_scores: (4.0, 1.0),
        }];
        Corpus {
            prompts,
            candidates,
            records,
            pairs,
            metadata: CorpusMetadata { seed: 0, generator: None, spec_hash: None },
        }
    }

    #[test]
    fn tiny_corpus_is_valid() {
        assert!(validate_corpus(&tiny_corpus()).is_valid());
    }

    #[test]
    fn out_of_range_record_yields_exactly_one_violation() {
        let mut c = tiny_corpus();
        c.records[0].r_p = 8.0;
        let report = validate_corpus(&c);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::Range);
        assert!(report.violations[0].message.contains("[1,7]"));
    }

    #[test]
    fn dangling_reference_detected() {
        let mut c = tiny_corpus();
        c.records[0].prompt_id = 99;
        let report = validate_corpus(&c);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::Reference);
    }

    #[test]
    fn duplicate_prompt_id_detected() {
        let mut c = tiny_corpus();
        c.prompts[1].id = 0;
        let report = validate_corpus(&c);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::Duplicate && v.message.contains("prompt id 0")));
    }

    #[test]
    fn single_candidate_prompt_rejected() {
        let mut c = tiny_corpus();
        c.candidates[0].truncate(1);
        // Dropping candidate 1 also dangles one record and the pair.
        let report = validate_corpus(&c);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::Structure && v.message.contains("at least 2")));
    }

    #[test]
    fn pair_with_reversed_preference_rejected() {
        let mut c = tiny_corpus();
        c.pairs[0].winner_scores.0 = 3.0;
        let report = validate_corpus(&c);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::Structure);
    }

    #[test]
    fn oversized_age_group_rejected() {
        let mut c = tiny_corpus();
        c.prompts[0].age_group = 16;
        let report = validate_corpus(&c);
        // The prompt range violation plus the two records that now disagree
        // is not what we want to count here; records copy the old group, so
        // expect the range violation and two mismatch notes.
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::Range && v.message.contains("age_group")));
    }

    #[test]
    fn normalize_maps_scale_endpoints_to_unit_interval() {
        assert_eq!(normalize_scores(1.0, 0.0).unwrap(), (0.0, 0.0));
        assert_eq!(normalize_scores(7.0, 4.0).unwrap(), (1.0, 1.0));
        let (p, s) = normalize_scores(4.0, 1.0).unwrap();
        assert_relative_eq!(p, 0.5);
        assert_relative_eq!(s, 0.25);
    }

    #[test]
    fn normalize_rejects_out_of_scale() {
        assert!(normalize_scores(0.5, 0.0).is_err());
        assert!(normalize_scores(4.0, 4.5).is_err());
        assert!(normalize_scores(f64::NAN, 0.0).is_err());
        assert!(denormalize_scores(-0.1, 0.5).is_err());
        assert!(denormalize_scores(0.5, 1.1).is_err());
    }

    #[test]
    fn normalize_roundtrip() {
        for (rp, rs) in [(1.0, 0.0), (7.0, 4.0), (3.3, 2.7), (5.5, 0.1)] {
            let (p, s) = normalize_scores(rp, rs).unwrap();
            let (rp2, rs2) = denormalize_scores(p, s).unwrap();
            assert_relative_eq!(rp, rp2, epsilon = 1e-12);
            assert_relative_eq!(rs, rs2, epsilon = 1e-12);
        }
    }

    #[test]
    fn jsonl_roundtrip_preserves_every_field() {
        let corpus = tiny_corpus();
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.contains("carpo-corpus/1"));
        let back = Corpus::read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn jsonl_rejects_wrong_schema() {
        let corpus = tiny_corpus();
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("carpo-corpus/1", "carpo-corpus/9");
        let err = Corpus::read_jsonl(std::io::Cursor::new(text.into_bytes())).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = tiny_corpus();
        corpus.save(&path).unwrap();
        assert_eq!(Corpus::load(&path).unwrap(), corpus);
        // A missing file is an I/O error, not a validation failure.
        let err = Corpus::load(dir.path().join("absent.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn label_means_average_duplicate_records() {
        let mut c = tiny_corpus();
        c.records.push(AnnotationRecord {
            prompt_id: 0,
            response_id: 0,
            r_p: 6.0,
            r_s: 3.0,
            annotator_id: 1,
            age_group: 0,
        });
        let means = c.label_means();
        let (rp, rs) = means[0][0].unwrap();
        assert_relative_eq!(rp, 5.0); // (4 + 6) / 2
        assert_relative_eq!(rs, 2.0); // (1 + 3) / 2
        assert!(means[1][1].is_some());
    }
}
