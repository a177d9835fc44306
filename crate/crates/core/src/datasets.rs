//! Benchmark loaders and reproducible sampling.
//!
//! Each source is JSON Lines in one pinned schema. Required fields that are
//! missing or mistyped abort the load with [`DatasetError::SchemaMismatch`];
//! records whose answer cannot be mapped to an option letter are skipped
//! and reported.
//!
//! | kind | required fields | gold | id |
//! |---|---|---|---|
//! | MedQA (US, 4 options) | `question`, `options` {A..D}, `answer_idx` | `answer_idx` | `medqa-<line>` |
//! | MedMCQA | `id`, `question`, `opa`..`opd`, `cop` (0-based) | `cop` index | `medmcqa-<id>` |
//! | PubMedQA (labeled) | `pubid`, `question`, `context.contexts`, `final_decision` | yes=A, no=B | `pubmedqa-<pubid>` |
//!
//! MedQA and MedMCQA items carry an empty context. PubMedQA contexts are
//! joined with newlines and its options are always `A. yes` / `B. no`;
//! `maybe` labels are skipped.
//!
//! Sampling shuffles with Fisher-Yates driven by `ChaCha8Rng::seed_from_u64`
//! (bounded draws by rejection on `next_u64`) and keeps the first `n`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{Dataset, DomainError, Question};

pub const DEFAULT_SAMPLE_N: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: schema mismatch: {reason}")]
    SchemaMismatch { line: usize, reason: String },
    #[error("line {line}: duplicate question id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: DomainError,
    },
    #[error("requested {requested} questions but only {available} are available")]
    InsufficientData { requested: usize, available: usize },
}

/// How the file at `path` is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    /// The benchmark's own schema, see the module docs.
    #[default]
    Published,
    /// Canonical question JSON Lines as written by this crate.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: Dataset,
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_sample_n")]
    pub sample_n: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub format: SourceFormat,
}

fn default_split() -> String {
    "test".into()
}
fn default_sample_n() -> usize {
    DEFAULT_SAMPLE_N
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl DatasetSpec {
    pub fn new(kind: Dataset, path: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            path: path.into(),
            split: default_split(),
            sample_n: DEFAULT_SAMPLE_N,
            seed: DEFAULT_SEED,
            format: SourceFormat::Published,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    UnmappableAnswer,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::UnmappableAnswer => f.write_str("unmappable answer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub line: usize,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub questions: Vec<Question>,
    pub skipped: Vec<Skipped>,
}

enum LineOutcome {
    Keep(Question),
    Skip(String),
}

fn mismatch(line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::SchemaMismatch {
        line,
        reason: reason.into(),
    }
}

fn req_str<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
    line: usize,
) -> Result<&'a str, DatasetError> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| mismatch(line, format!("`{key}` missing or not a string")))
}

fn normalize_medqa(obj: &Map<String, Value>, line: usize) -> Result<LineOutcome, DatasetError> {
    let stem = req_str(obj, "question", line)?;
    let opts = obj
        .get("options")
        .and_then(Value::as_object)
        .ok_or_else(|| mismatch(line, "`options` missing or not an object"))?;
    let mut options = Vec::with_capacity(4);
    for key in ["A", "B", "C", "D"] {
        let text = opts
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| mismatch(line, format!("`options.{key}` missing or not a string")))?;
        options.push((key.to_string(), text.to_string()));
    }
    if opts.len() != 4 {
        return Err(mismatch(
            line,
            format!("expected 4 options, found {}", opts.len()),
        ));
    }
    let gold = req_str(obj, "answer_idx", line)?
        .trim()
        .to_ascii_uppercase();
    if !["A", "B", "C", "D"].contains(&gold.as_str()) {
        return Ok(LineOutcome::Skip(format!("answer_idx {gold:?}")));
    }
    let q = Question::new(
        format!("medqa-{line}"),
        stem,
        "",
        options,
        &gold,
        Dataset::MedQA,
    )
    .map_err(|source| DatasetError::Invalid { line, source })?;
    Ok(LineOutcome::Keep(q))
}

fn normalize_medmcqa(obj: &Map<String, Value>, line: usize) -> Result<LineOutcome, DatasetError> {
    let id = req_str(obj, "id", line)?;
    let stem = req_str(obj, "question", line)?;
    let mut options = Vec::with_capacity(4);
    for (label, key) in [("A", "opa"), ("B", "opb"), ("C", "opc"), ("D", "opd")] {
        options.push((label.to_string(), req_str(obj, key, line)?.to_string()));
    }
    let cop = obj
        .get("cop")
        .and_then(Value::as_i64)
        .ok_or_else(|| mismatch(line, "`cop` missing or not an integer"))?;
    let gold = match cop {
        0..=3 => ["A", "B", "C", "D"][cop as usize],
        _ => return Ok(LineOutcome::Skip(format!("cop {cop}"))),
    };
    let q = Question::new(
        format!("medmcqa-{id}"),
        stem,
        "",
        options,
        gold,
        Dataset::MedMCQA,
    )
    .map_err(|source| DatasetError::Invalid { line, source })?;
    Ok(LineOutcome::Keep(q))
}

fn normalize_pubmedqa(obj: &Map<String, Value>, line: usize) -> Result<LineOutcome, DatasetError> {
    let pubid = match obj.get("pubid") {
        Some(Value::Number(n)) if n.is_u64() => n.to_string(),
        _ => return Err(mismatch(line, "`pubid` missing or not an integer")),
    };
    let stem = req_str(obj, "question", line)?;
    let contexts = obj
        .get("context")
        .and_then(|c| c.get("contexts"))
        .and_then(Value::as_array)
        .ok_or_else(|| mismatch(line, "`context.contexts` missing or not an array"))?;
    let context = contexts
        .iter()
        .map(|c| {
            c.as_str()
                .ok_or_else(|| mismatch(line, "`context.contexts` holds a non-string"))
        })
        .collect::<Result<Vec<_>, _>>()?
        .join("\n");
    let decision = req_str(obj, "final_decision", line)?;
    let gold = match decision.trim().to_ascii_lowercase().as_str() {
        "yes" => "A",
        "no" => "B",
        other => return Ok(LineOutcome::Skip(format!("final_decision {other:?}"))),
    };
    let options = vec![("A".into(), "yes".into()), ("B".into(), "no".into())];
    let q = Question::new(
        format!("pubmedqa-{pubid}"),
        stem,
        context,
        options,
        gold,
        Dataset::PubMedQA,
    )
    .map_err(|source| DatasetError::Invalid { line, source })?;
    Ok(LineOutcome::Keep(q))
}

/// Loads and normalizes every record of `spec.path`. Does not sample.
pub fn load(spec: &DatasetSpec) -> Result<LoadReport, DatasetError> {
    let io = |source| DatasetError::Io {
        path: spec.path.clone(),
        source,
    };
    let file = fs::File::open(&spec.path).map_err(io)?;
    let mut questions = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();

    for (idx, raw) in BufReader::new(file).lines().enumerate() {
        let line = idx + 1;
        let raw = raw.map_err(io)?;
        if raw.trim().is_empty() {
            continue;
        }
        let outcome = match spec.format {
            SourceFormat::Normalized => {
                let q: Question = serde_json::from_str(&raw)
                    .map_err(|e| mismatch(line, format!("not a normalized question: {e}")))?;
                if q.dataset() != spec.kind {
                    return Err(mismatch(
                        line,
                        format!(
                            "question is {} but the spec says {}",
                            q.dataset(),
                            spec.kind
                        ),
                    ));
                }
                LineOutcome::Keep(q)
            }
            SourceFormat::Published => {
                let value: Value = serde_json::from_str(&raw)
                    .map_err(|e| mismatch(line, format!("invalid JSON: {e}")))?;
                let obj = value
                    .as_object()
                    .ok_or_else(|| mismatch(line, "record is not a JSON object"))?;
                match spec.kind {
                    Dataset::MedQA => normalize_medqa(obj, line)?,
                    Dataset::MedMCQA => normalize_medmcqa(obj, line)?,
                    Dataset::PubMedQA => normalize_pubmedqa(obj, line)?,
                }
            }
        };
        match outcome {
            LineOutcome::Keep(q) => {
                if !seen.insert(q.id().to_string()) {
                    return Err(DatasetError::DuplicateId {
                        line,
                        id: q.id().to_string(),
                    });
                }
                questions.push(q);
            }
            LineOutcome::Skip(detail) => {
                tracing::debug!(line, %detail, "skipping record");
                skipped.push(Skipped {
                    line,
                    reason: SkipReason::UnmappableAnswer,
                    detail,
                });
            }
        }
    }
    Ok(LoadReport { questions, skipped })
}

/// Uniform draw from `0..bound` without modulo bias.
fn bounded(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// Seeded shuffle, then the first `n`.
pub fn sample(questions: &[Question], n: usize, seed: u64) -> Result<Vec<Question>, DatasetError> {
    if n > questions.len() {
        return Err(DatasetError::InsufficientData {
            requested: n,
            available: questions.len(),
        });
    }
    let mut order: Vec<usize> = (0..questions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        order.swap(i, j);
    }
    Ok(order[..n].iter().map(|&i| questions[i].clone()).collect())
}

/// Load, then sample `spec.sample_n` with `spec.seed`.
pub fn load_sampled(spec: &DatasetSpec) -> Result<(Vec<Question>, LoadReport), DatasetError> {
    let report = load(spec)?;
    let picked = sample(&report.questions, spec.sample_n, spec.seed)?;
    Ok((picked, report))
}

pub fn to_jsonl(questions: &[Question]) -> String {
    let mut out = String::new();
    for q in questions {
        out.push_str(&serde_json::to_string(q).expect("questions always serialize"));
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of the canonical JSON Lines form.
pub fn dataset_digest(questions: &[Question]) -> String {
    hex::encode(Sha256::digest(to_jsonl(questions).as_bytes()))
}

pub fn write_jsonl(questions: &[Question], path: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(to_jsonl(questions).as_bytes()).map_err(io)?;
    Ok(())
}

/// Reads canonical question JSON Lines of any dataset.
pub fn read_jsonl(path: &Path) -> Result<Vec<Question>, DatasetError> {
    let raw = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| mismatch(i + 1, format!("not a normalized question: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn write_lines(lines: &[Value]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    fn spec(kind: Dataset, f: &tempfile::NamedTempFile) -> DatasetSpec {
        DatasetSpec::new(kind, f.path())
    }

    fn pubmed(pubid: u64, decision: &str) -> Value {
        json!({
            "pubid": pubid,
            "question": format!("Does treatment {pubid} work?"),
            "context": {"contexts": ["Background.", "Results."], "labels": ["B", "R"], "meshes": []},
            "long_answer": "...",
            "final_decision": decision
        })
    }

    fn medmcqa(id: &str, q: &str, opts: [&str; 4], cop: i64) -> Value {
        json!({
            "id": id, "question": q,
            "opa": opts[0], "opb": opts[1], "opc": opts[2], "opd": opts[3],
            "cop": cop, "choice_type": "single", "exp": null,
            "subject_name": "x", "topic_name": null
        })
    }

    #[test]
    fn pubmedqa_yes_maps_to_a_with_context() {
        let f = write_lines(&[pubmed(1, "yes"), pubmed(2, "no")]);
        let r = load(&spec(Dataset::PubMedQA, &f)).unwrap();
        let q = &r.questions[0];
        assert_eq!(q.id(), "pubmedqa-1");
        assert_eq!(q.gold().as_char(), 'A');
        assert_eq!(q.context(), "Background.\nResults.");
        let texts: Vec<_> = q.options().iter().map(|o| o.text.as_str()).collect();
        assert_eq!(texts, ["yes", "no"]);
        assert_eq!(r.questions[1].gold().as_char(), 'B');
    }

    #[test]
    fn pubmedqa_maybe_is_skipped_and_counted() {
        let f = write_lines(&[pubmed(1, "yes"), pubmed(2, "maybe"), pubmed(3, "no")]);
        let r = load(&spec(Dataset::PubMedQA, &f)).unwrap();
        assert_eq!(r.questions.len(), 2);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].line, 2);
        assert_eq!(r.skipped[0].reason, SkipReason::UnmappableAnswer);
    }

    #[test]
    fn pubmedqa_skip_count_matches_label_distribution() {
        // The labeled split has 552 yes, 338 no and 110 maybe.
        let mut lines = Vec::new();
        let mut id = 0;
        for (label, count) in [("yes", 552), ("no", 338), ("maybe", 110)] {
            for _ in 0..count {
                id += 1;
                lines.push(pubmed(id, label));
            }
        }
        let f = write_lines(&lines);
        let r = load(&spec(Dataset::PubMedQA, &f)).unwrap();
        assert_eq!(r.questions.len(), 890);
        assert_eq!(r.skipped.len(), 110);
        let yes = r
            .questions
            .iter()
            .filter(|q| q.gold().as_char() == 'A')
            .count();
        assert_eq!(yes, 552);
    }

    #[test]
    fn medmcqa_cop_is_zero_based() {
        // Records shaped like the public train split, with their keyed answers.
        let records = [
            (medmcqa("e9ad821a", "Chronic urethral obstruction due to benzn prostatic hyperplasia can lead to the following change in kidney parenchyma", ["Hyperplasia", "Hyperophy", "Atrophy", "Dyplasia"], 2), 'C', "Atrophy"),
            (medmcqa("e3d3c4e1", "Which vitamin is supplied from only animal source:", ["Vitamin C", "Vitamin B7", "Vitamin B12", "Vitamin D"], 2), 'C', "Vitamin B12"),
            (medmcqa("5c38bea6", "All of the following are surgical options for morbid obesity except -", ["Adjustable gastric banding", "Biliopancreatic diversion", "Duodenal Switch", "Roux en Y Duodenal By pass"], 3), 'D', "Roux en Y Duodenal By pass"),
            (medmcqa("cdeedb04", "Following endarterectomy on the right common carotid, a patient is blind in the right eye. Which artery would be blocked?", ["Central artery of the retina", "Infraorbital artery", "Lacrimal artery", "Nasociliary artery"], 0), 'A', "Central artery of the retina"),
            (medmcqa("0e2a1d39", "Growth hormone has its effect on growth through?", ["Directly", "IGF-1", "Thyroxine", "Intranuclear receptors"], 1), 'B', "IGF-1"),
        ];
        let lines: Vec<Value> = records.iter().map(|(v, ..)| v.clone()).collect();
        let f = write_lines(&lines);
        let r = load(&spec(Dataset::MedMCQA, &f)).unwrap();
        assert_eq!(r.questions.len(), 5);
        for (q, (_, gold, text)) in r.questions.iter().zip(records.iter()) {
            assert_eq!(q.gold().as_char(), *gold);
            assert_eq!(q.option(q.gold()).unwrap().text, *text);
            assert_eq!(q.context(), "");
            assert_eq!(q.options().len(), 4);
            assert!(q.id().starts_with("medmcqa-"));
        }
    }

    #[test]
    fn medmcqa_unlabeled_cop_is_skipped() {
        let f = write_lines(&[medmcqa("x", "q", ["a", "b", "c", "d"], -1)]);
        let r = load(&spec(Dataset::MedMCQA, &f)).unwrap();
        assert!(r.questions.is_empty());
        assert_eq!(r.skipped.len(), 1);
    }

    #[test]
    fn medqa_schema() {
        let f = write_lines(&[json!({
            "question": "A 23-year-old woman presents with...",
            "answer": "Nitrofurantoin",
            "options": {"A": "Ampicillin", "B": "Ceftriaxone", "C": "Doxycycline", "D": "Nitrofurantoin"},
            "meta_info": "step2&3",
            "answer_idx": "D",
            "metamap_phrases": ["woman"]
        })]);
        let r = load(&spec(Dataset::MedQA, &f)).unwrap();
        let q = &r.questions[0];
        assert_eq!(q.id(), "medqa-1");
        assert_eq!(q.gold().as_char(), 'D');
        assert_eq!(q.option(q.gold()).unwrap().text, "Nitrofurantoin");
    }

    #[test]
    fn schema_drift_hard_fails_with_line_number() {
        let f = write_lines(&[
            json!({"question": "q", "options": {"A": "a", "B": "b", "C": "c", "D": "d"}, "answer_idx": "A"}),
            json!({"question": "q", "choices": ["a", "b"], "answer_idx": "A"}),
        ]);
        let err = load(&spec(Dataset::MedQA, &f)).unwrap_err();
        assert!(
            matches!(err, DatasetError::SchemaMismatch { line: 2, .. }),
            "{err}"
        );

        let f = write_lines(&[
            json!({"question": "q", "options": {"A": "a", "B": "b", "C": "c", "D": "d", "E": "e"}, "answer_idx": "A"}),
        ]);
        assert!(matches!(
            load(&spec(Dataset::MedQA, &f)).unwrap_err(),
            DatasetError::SchemaMismatch { line: 1, .. }
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let f = write_lines(&[pubmed(7, "yes"), pubmed(7, "no")]);
        assert!(matches!(
            load(&spec(Dataset::PubMedQA, &f)).unwrap_err(),
            DatasetError::DuplicateId { line: 2, .. }
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let s = DatasetSpec::new(Dataset::MedQA, "/nonexistent/medqa.jsonl");
        assert!(matches!(load(&s).unwrap_err(), DatasetError::Io { .. }));
    }

    fn synthetic(n: usize) -> Vec<Question> {
        (0..n)
            .map(|i| {
                Question::new(
                    format!("s{i}"),
                    format!("stem {i}"),
                    "",
                    vec![("A".into(), "x".into()), ("B".into(), "y".into())],
                    "A",
                    Dataset::MedQA,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn full_sample_is_a_permutation() {
        let qs = synthetic(100);
        let s = sample(&qs, 100, 42).unwrap();
        let mut ids: Vec<_> = s.iter().map(|q| q.id().to_string()).collect();
        ids.sort();
        let mut expected: Vec<_> = qs.iter().map(|q| q.id().to_string()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let qs = synthetic(100);
        assert_eq!(sample(&qs, 10, 7).unwrap(), sample(&qs, 10, 7).unwrap());
        assert_ne!(sample(&qs, 100, 1).unwrap(), sample(&qs, 100, 2).unwrap());
        assert!(matches!(
            sample(&qs, 101, 1),
            Err(DatasetError::InsufficientData {
                requested: 101,
                available: 100
            })
        ));
    }

    #[test]
    fn sampling_order_is_pinned() {
        // Frozen output of ChaCha8 Fisher-Yates for seed 42.
        let qs = synthetic(10);
        let ids: Vec<_> = sample(&qs, 10, 42)
            .unwrap()
            .iter()
            .map(|q| q.id().to_string())
            .collect();
        assert_eq!(ids, PINNED_ORDER_SEED_42);
    }

    const PINNED_ORDER_SEED_42: [&str; 10] =
        ["s1", "s5", "s9", "s6", "s3", "s2", "s0", "s8", "s4", "s7"];

    #[test]
    fn digest_and_roundtrip() {
        let qs = synthetic(5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        write_jsonl(&qs, &p).unwrap();
        let back = read_jsonl(&p).unwrap();
        assert_eq!(back, qs);
        assert_eq!(dataset_digest(&back), dataset_digest(&qs));
        assert_ne!(dataset_digest(&qs[..4]), dataset_digest(&qs));

        let mut s = DatasetSpec::new(Dataset::MedQA, &p);
        s.format = SourceFormat::Normalized;
        assert_eq!(load(&s).unwrap().questions, qs);
        s.kind = Dataset::PubMedQA;
        assert!(load(&s).is_err());
    }
}
