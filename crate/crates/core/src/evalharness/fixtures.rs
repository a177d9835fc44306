//! Recorded benchmark results shipped with the crate, and their expansion
//! into synthetic record streams that the harness can score end to end.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::report::{FigureSeries, ReportBundle, ReportRow};
use super::{compute_metrics, HarnessError, Metrics};
use crate::domain::{
    Agent, CallLogEntry, CandidateAnswer, CandidateLabel, Confidence, ConfidenceScores, Dataset,
    FinalDecision, Mode, OptionLabel, ParseRule, Pathway, PipelineRecord, Question, Role, Verdict,
};
use crate::prompts::TemplateId;

const RAW: &str = include_str!("../../fixtures/published_results.json");

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct FixtureRun {
    pub dataset: Dataset,
    pub mode: Mode,
    pub n_direct: usize,
    pub n_direct_correct: usize,
    pub n_collab: usize,
    pub n_collab_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    #[serde(rename = "MedQA")]
    pub medqa: f64,
    #[serde(rename = "MedMCQA")]
    pub medmcqa: f64,
    #[serde(rename = "PubMedQA")]
    pub pubmedqa: f64,
}

impl ReferenceRow {
    pub fn accuracies(&self) -> BTreeMap<Dataset, f64> {
        BTreeMap::from([
            (Dataset::MedQA, self.medqa),
            (Dataset::MedMCQA, self.medmcqa),
            (Dataset::PubMedQA, self.pubmedqa),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceGroup {
    pub group: String,
    pub rows: Vec<ReferenceRow>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedFixture {
    pub primary_model: String,
    pub proposed_label: String,
    pub note: String,
    pub runs: Vec<FixtureRun>,
    pub reference_groups: Vec<ReferenceGroup>,
    pub recorded_series: Vec<FigureSeries>,
}

/// The fixture compiled into the crate.
pub fn published_fixture() -> PublishedFixture {
    serde_json::from_str(RAW).expect("shipped fixture parses")
}

fn digest_stub(kind: &str, i: usize) -> String {
    format!("fixture-{kind}-{i}")
}

fn log(role: Role, template_id: TemplateId, i: usize) -> CallLogEntry {
    CallLogEntry {
        role,
        template_id,
        prompt_digest: digest_stub(template_id.short_name(), i),
        reask: 0,
        ok: true,
    }
}

impl FixtureRun {
    fn question(&self, i: usize) -> Question {
        let options: Vec<(String, String)> = match self.dataset {
            Dataset::PubMedQA => vec![("A".into(), "yes".into()), ("B".into(), "no".into())],
            _ => ["A", "B", "C", "D"]
                .iter()
                .map(|l| (l.to_string(), format!("option {l}")))
                .collect(),
        };
        Question::new(
            format!("{}-fixture-{i:04}", self.dataset.name().to_lowercase()),
            format!("Recorded item {i}"),
            "",
            options,
            "A",
            self.dataset,
        )
        .expect("fixture question is well formed")
    }

    /// Synthetic questions (gold always `A`) and one valid record per
    /// question reproducing the recorded per-pathway counts. Direct-pathway
    /// records come first.
    pub fn expand(&self) -> (Vec<Question>, Vec<PipelineRecord>) {
        let a = OptionLabel::parse("A").unwrap();
        let b = OptionLabel::parse("B").unwrap();
        let n = self.n_direct + self.n_collab;
        let questions: Vec<Question> = (0..n).map(|i| self.question(i)).collect();
        let records = questions
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let collab = i >= self.n_direct;
                let correct = if collab {
                    i - self.n_direct < self.n_collab_correct
                } else {
                    i < self.n_direct_correct
                };
                let final_answer = if correct { a } else { b };
                self.record(q, i, collab, final_answer, a, b)
            })
            .collect();
        (questions, records)
    }

    fn record(
        &self,
        q: &Question,
        i: usize,
        collab: bool,
        final_answer: OptionLabel,
        a: OptionLabel,
        b: OptionLabel,
    ) -> PipelineRecord {
        let mut rec = PipelineRecord {
            question_id: q.id().to_string(),
            mode: self.mode,
            pathway: Pathway::Direct,
            verdict: None,
            candidates: None,
            decision: None,
            final_answer,
            correct: final_answer == q.gold(),
            degradation: None,
            fallback_used: false,
            call_log: Vec::new(),
            timings: Vec::new(),
        };
        match self.mode {
            Mode::ZeroShotOnly => {
                rec.call_log
                    .push(log(Role::Primary, TemplateId::DirectAnswerV1, i));
            }
            Mode::SingleModelCoT => {
                rec.call_log
                    .push(log(Role::Primary, TemplateId::CotAnswerV1, i));
            }
            Mode::FullFramework if !collab => {
                rec.verdict =
                    Some(Verdict::new(Confidence::Sure, "Sure", ParseRule::ExactMatch).unwrap());
                rec.call_log
                    .push(log(Role::Primary, TemplateId::ConfidenceV1, i));
                rec.call_log
                    .push(log(Role::Primary, TemplateId::DirectAnswerV1, i));
            }
            Mode::FullFramework => {
                rec.pathway = Pathway::Collaborative;
                rec.verdict = Some(
                    Verdict::new(Confidence::NotSure, "Not Sure", ParseRule::ExactMatch).unwrap(),
                );
                rec.candidates = Some([
                    CandidateAnswer::new(Agent::Agent1, a, "A", q).unwrap(),
                    CandidateAnswer::new(Agent::Agent2, b, "B", q).unwrap(),
                ]);
                let (candidate_label, scores) = if final_answer == a {
                    (CandidateLabel::A, ConfidenceScores::new(70, 30).unwrap())
                } else {
                    (CandidateLabel::B, ConfidenceScores::new(30, 70).unwrap())
                };
                rec.decision = Some(FinalDecision {
                    candidate_label,
                    mapped_option: final_answer,
                    reasoning: "recorded".into(),
                    confidence_scores: scores,
                    via_fallback: false,
                });
                rec.call_log
                    .push(log(Role::Primary, TemplateId::ConfidenceV1, i));
                rec.call_log
                    .push(log(Role::Helper1, TemplateId::DirectAnswerV1, i));
                rec.call_log
                    .push(log(Role::Helper2, TemplateId::DirectAnswerV1, i));
                rec.call_log
                    .push(log(Role::Primary, TemplateId::SynthesisV1, i));
            }
        }
        rec
    }

    /// Metrics recomputed through the harness from the expanded stream.
    pub fn metrics(&self) -> Result<Metrics, HarnessError> {
        let (qs, rs) = self.expand();
        compute_metrics(&rs, &qs, self.mode)
    }
}

impl PublishedFixture {
    pub fn run(&self, dataset: Dataset, mode: Mode) -> Option<&FixtureRun> {
        self.runs
            .iter()
            .find(|r| r.dataset == dataset && r.mode == mode)
    }

    /// Metrics for every dataset recorded under `mode`, in dataset order.
    pub fn mode_metrics(&self, mode: Mode) -> Result<Vec<Metrics>, HarnessError> {
        Dataset::ALL
            .iter()
            .filter_map(|&d| self.run(d, mode))
            .map(FixtureRun::metrics)
            .collect()
    }

    /// Reference rows by group, then the full framework as the proposed row.
    pub fn methods_table(&self) -> Result<ReportBundle, HarnessError> {
        let mut bundle = ReportBundle::new("Methods");
        for g in &self.reference_groups {
            for r in &g.rows {
                bundle.rows.push(ReportRow::reference(
                    &r.label,
                    Some(g.group.clone()),
                    r.accuracies(),
                ));
            }
        }
        bundle.rows.push(ReportRow::computed(
            &self.proposed_label,
            Mode::FullFramework,
            self.mode_metrics(Mode::FullFramework)?,
        )?);
        bundle.series = self.recorded_series.clone();
        Ok(bundle)
    }

    /// One row per pipeline variant.
    pub fn ablation_table(&self) -> Result<ReportBundle, HarnessError> {
        let mut bundle = ReportBundle::new("Variant");
        for mode in Mode::ALL {
            bundle.rows.push(ReportRow::computed(
                mode.table_label(&self.primary_model),
                mode,
                self.mode_metrics(mode)?,
            )?);
        }
        Ok(bundle)
    }
}
