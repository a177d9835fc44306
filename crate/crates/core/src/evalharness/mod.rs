//! Grading, metrics and ablation runs.

mod fixtures;
mod report;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fixtures::{published_fixture, FixtureRun, PublishedFixture, ReferenceGroup, ReferenceRow};
pub use report::{emit_report, FigureSeries, ReportBundle, ReportRow, RowSource, REPORT_FILES};

use crate::domain::{Dataset, Degradation, Mode, Pathway, PipelineRecord, Question};
use crate::engine::{Engine, EngineError};

/// Tolerance for the pathway-weighted accuracy identity in floating point.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("record is for `{record}` but the question is `{question}`")]
    IdMismatch { record: String, question: String },
    #[error("records do not cover the questions exactly once (missing {missing:?}, duplicated {duplicated:?}, unknown {unknown:?})")]
    CoverageGap {
        missing: Vec<String>,
        duplicated: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("records mix modes: expected {expected}, found {found}")]
    ModeMismatch { expected: Mode, found: Mode },
    #[error("questions mix datasets {0} and {1}")]
    MixedDatasets(Dataset, Dataset),
    #[error("cannot compute metrics over zero questions")]
    Empty,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("report validation failed: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} of {total} questions failed; first error: {first}")]
    Engine {
        failed: usize,
        total: usize,
        first: EngineError,
    },
}

/// True iff the record's final answer is the question's gold label.
pub fn grade(record: &PipelineRecord, q: &Question) -> Result<bool, HarnessError> {
    if record.question_id != q.id() {
        return Err(HarnessError::IdMismatch {
            record: record.question_id.clone(),
            question: q.id().to_string(),
        });
    }
    Ok(record.final_answer == q.gold())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dataset: Dataset,
    pub mode: Mode,
    pub n_total: usize,
    pub n_direct: usize,
    pub n_collab: usize,
    pub n_correct: usize,
    pub n_direct_correct: usize,
    pub n_collab_correct: usize,
    pub acc_overall: f64,
    /// Absent when no question took this pathway.
    pub acc_direct: Option<f64>,
    pub acc_collab: Option<f64>,
    /// Share of collaborative questions on which each helper's own choice
    /// was the gold answer, over the questions where that helper answered.
    pub helper1_gold_rate: Option<f64>,
    pub helper2_gold_rate: Option<f64>,
    pub n_fallback: usize,
    pub n_degraded: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    /// |acc_overall·n − (acc_direct·n_direct + acc_collab·n_collab)|
    pub fn identity_residual(&self) -> f64 {
        let lhs = self.acc_overall * self.n_total as f64;
        let rhs = self.acc_direct.unwrap_or(0.0) * self.n_direct as f64
            + self.acc_collab.unwrap_or(0.0) * self.n_collab as f64;
        (lhs - rhs).abs()
    }

    /// Builds metrics from pathway counts alone.
    pub fn from_counts(
        dataset: Dataset,
        mode: Mode,
        n_direct: usize,
        n_direct_correct: usize,
        n_collab: usize,
        n_collab_correct: usize,
    ) -> Result<Self, HarnessError> {
        let n_total = n_direct + n_collab;
        if n_total == 0 {
            return Err(HarnessError::Empty);
        }
        let n_correct = n_direct_correct + n_collab_correct;
        Ok(Self {
            dataset,
            mode,
            n_total,
            n_direct,
            n_collab,
            n_correct,
            n_direct_correct,
            n_collab_correct,
            acc_overall: n_correct as f64 / n_total as f64,
            acc_direct: ratio(n_direct_correct, n_direct),
            acc_collab: ratio(n_collab_correct, n_collab),
            helper1_gold_rate: None,
            helper2_gold_rate: None,
            n_fallback: 0,
            n_degraded: 0,
        })
    }
}

/// Per-pathway counts and accuracies over a record stream.
///
/// Records must cover `questions` exactly once; correctness is re-graded
/// against the questions rather than read from the records.
pub fn compute_metrics(
    records: &[PipelineRecord],
    questions: &[Question],
    mode: Mode,
) -> Result<Metrics, HarnessError> {
    let first = questions.first().ok_or(HarnessError::Empty)?;
    let dataset = first.dataset();
    if let Some(other) = questions.iter().find(|q| q.dataset() != dataset) {
        return Err(HarnessError::MixedDatasets(dataset, other.dataset()));
    }

    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id(), q)).collect();
    let mut seen = HashSet::new();
    let mut duplicated = Vec::new();
    let mut unknown = Vec::new();
    for r in records {
        if !by_id.contains_key(r.question_id.as_str()) {
            unknown.push(r.question_id.clone());
        } else if !seen.insert(r.question_id.as_str()) {
            duplicated.push(r.question_id.clone());
        }
    }
    let missing: Vec<String> = questions
        .iter()
        .filter(|q| !seen.contains(q.id()))
        .map(|q| q.id().to_string())
        .collect();
    if !(missing.is_empty() && duplicated.is_empty() && unknown.is_empty()) {
        return Err(HarnessError::CoverageGap {
            missing,
            duplicated,
            unknown,
        });
    }

    let (mut n_direct, mut n_direct_correct, mut n_collab, mut n_collab_correct) = (0, 0, 0, 0);
    let (mut h1_hits, mut h1_n, mut h2_hits, mut h2_n) = (0, 0, 0, 0);
    let (mut n_fallback, mut n_degraded) = (0, 0);
    for r in records {
        if r.mode != mode {
            return Err(HarnessError::ModeMismatch {
                expected: mode,
                found: r.mode,
            });
        }
        let q = by_id[r.question_id.as_str()];
        r.validate_against(q)
            .map_err(|e| HarnessError::InvalidRecord(e.to_string()))?;
        let correct = grade(r, q)?;
        match r.pathway {
            Pathway::Direct => {
                n_direct += 1;
                n_direct_correct += usize::from(correct);
            }
            Pathway::Collaborative => {
                n_collab += 1;
                n_collab_correct += usize::from(correct);
                if let Some([c1, c2]) = &r.candidates {
                    let h1_ok = !matches!(
                        r.degradation,
                        Some(Degradation::Helper1Failed | Degradation::BothHelpersFailed)
                    );
                    let h2_ok = !matches!(
                        r.degradation,
                        Some(Degradation::Helper2Failed | Degradation::BothHelpersFailed)
                    );
                    if h1_ok {
                        h1_n += 1;
                        h1_hits += usize::from(c1.chosen_label == q.gold());
                    }
                    if h2_ok {
                        h2_n += 1;
                        h2_hits += usize::from(c2.chosen_label == q.gold());
                    }
                }
            }
        }
        n_fallback += usize::from(r.fallback_used);
        n_degraded += usize::from(r.degradation.is_some());
    }

    let mut m = Metrics::from_counts(
        dataset,
        mode,
        n_direct,
        n_direct_correct,
        n_collab,
        n_collab_correct,
    )?;
    m.helper1_gold_rate = ratio(h1_hits, h1_n);
    m.helper2_gold_rate = ratio(h2_hits, h2_n);
    m.n_fallback = n_fallback;
    m.n_degraded = n_degraded;
    Ok(m)
}

/// Runs one pipeline variant over a question set and scores it.
pub async fn run_ablation(
    engine: &Engine,
    mode: Mode,
    questions: &[Question],
    concurrency: usize,
) -> Result<(Metrics, Vec<PipelineRecord>), HarnessError> {
    let results = engine.run_batch(mode, questions, concurrency).await;
    let total = results.len();
    let mut records = Vec::with_capacity(total);
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(e),
        }
    }
    if let Some(first) = errors.first() {
        return Err(HarnessError::Engine {
            failed: errors.len(),
            total,
            first: first.clone(),
        });
    }
    let metrics = compute_metrics(&records, questions, mode)?;
    Ok((metrics, records))
}

/// One compact JSON object per line, in the given order.
pub fn records_to_jsonl(records: &[PipelineRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_records(records: &[PipelineRecord], path: &Path) -> Result<(), HarnessError> {
    write_file(path, records_to_jsonl(records).as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<PipelineRecord>, HarnessError> {
    let raw = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                HarnessError::InvalidRecord(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TelemetryLine<'a> {
    question_id: &'a str,
    call: usize,
    role: crate::domain::Role,
    template_id: crate::prompts::TemplateId,
    #[serde(flatten)]
    timing: &'a crate::domain::CallTiming,
}

/// Per-call latency and cache provenance, one line per backend call.
pub fn write_telemetry(records: &[PipelineRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in records {
        for (i, (entry, timing)) in r.call_log.iter().zip(&r.timings).enumerate() {
            let line = TelemetryLine {
                question_id: &r.question_id,
                call: i,
                role: entry.role,
                template_id: entry.template_id,
                timing,
            };
            out.push_str(&serde_json::to_string(&line).expect("telemetry serializes"));
            out.push('\n');
        }
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}
