//! Core data types shared by the engine, client and harness.
//!
//! Every type that carries an invariant is validated when it is built,
//! including when it is deserialized, so holding a value means holding a
//! valid one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` has the wrong type: {expected}")]
    WrongType {
        field: &'static str,
        expected: &'static str,
    },
    #[error("invalid option label `{0}`")]
    InvalidLabel(String),
    #[error("duplicate option label `{0}`")]
    DuplicateLabel(OptionLabel),
    #[error(
        "option labels must run A, B, C... without gaps, found `{found}` at position {position}"
    )]
    NonConsecutiveLabels { position: usize, found: OptionLabel },
    #[error("expected between 2 and 5 options, found {0}")]
    OptionCount(usize),
    #[error("option `{0}` has empty text")]
    EmptyOptionText(OptionLabel),
    #[error("gold label `{0}` is not one of the options")]
    GoldNotInOptions(String),
    #[error("label `{0}` is not an option of question `{1}`")]
    LabelNotInQuestion(OptionLabel, String),
    #[error("verdict parsed by fallback must be NotSure")]
    FallbackMustBeNotSure,
    #[error("confidence scores invalid: {0}")]
    InvalidScores(String),
    #[error("pipeline record `{id}` violates invariant: {reason}")]
    RecordInvariant { id: String, reason: String },
    #[error("endpoint configuration invalid: {0}")]
    InvalidEndpoint(String),
}

/// A single uppercase option letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OptionLabel(char);

impl OptionLabel {
    /// Accepts a single ASCII letter in either case.
    pub fn parse(raw: &str) -> Result<Self, DomainError> {
        let trimmed = raw.trim();
        let mut chars = trimmed.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => Ok(Self(c.to_ascii_uppercase())),
            _ => Err(DomainError::InvalidLabel(raw.to_string())),
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < 26).then(|| Self((b'A' + index as u8) as char))
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for OptionLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_char(self.0)
    }
}

impl<'de> Deserialize<'de> for OptionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        OptionLabel::parse(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dataset {
    MedQA,
    MedMCQA,
    PubMedQA,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::MedQA, Dataset::MedMCQA, Dataset::PubMedQA];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::MedQA => "MedQA",
            Dataset::MedMCQA => "MedMCQA",
            Dataset::PubMedQA => "PubMedQA",
        }
    }

    /// Case-insensitive lookup used by config files and CLI flags.
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(name.trim()))
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: OptionLabel,
    pub text: String,
}

/// A normalized multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "QuestionFields")]
pub struct Question {
    id: String,
    stem: String,
    context: String,
    options: Vec<AnswerOption>,
    gold: OptionLabel,
    dataset: Dataset,
}

#[derive(Deserialize)]
struct QuestionFields {
    id: String,
    stem: String,
    #[serde(default)]
    context: String,
    options: Vec<AnswerOption>,
    gold: String,
    dataset: Dataset,
}

impl TryFrom<QuestionFields> for Question {
    type Error = DomainError;

    fn try_from(f: QuestionFields) -> Result<Self, Self::Error> {
        let options = f
            .options
            .into_iter()
            .map(|o| (o.label.to_string(), o.text))
            .collect();
        Question::new(f.id, f.stem, f.context, options, &f.gold, f.dataset)
    }
}

impl Question {
    /// Builds a question from `(label, text)` pairs, uppercasing labels.
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        context: impl Into<String>,
        options: Vec<(String, String)>,
        gold: &str,
        dataset: Dataset,
    ) -> Result<Self, DomainError> {
        let id = id.into();
        let stem = stem.into();
        if id.trim().is_empty() {
            return Err(DomainError::MissingField("id"));
        }
        if stem.trim().is_empty() {
            return Err(DomainError::MissingField("stem"));
        }

        let mut parsed = Vec::with_capacity(options.len());
        let mut seen = BTreeSet::new();
        for (label, text) in options {
            let label = OptionLabel::parse(&label)?;
            if !seen.insert(label) {
                return Err(DomainError::DuplicateLabel(label));
            }
            parsed.push(AnswerOption { label, text });
        }
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&parsed.len()) {
            return Err(DomainError::OptionCount(parsed.len()));
        }
        for (position, option) in parsed.iter().enumerate() {
            if option.label.index() != position {
                return Err(DomainError::NonConsecutiveLabels {
                    position,
                    found: option.label,
                });
            }
            if option.text.trim().is_empty() {
                return Err(DomainError::EmptyOptionText(option.label));
            }
        }

        let gold = OptionLabel::parse(gold)
            .ok()
            .filter(|g| seen.contains(g))
            .ok_or_else(|| DomainError::GoldNotInOptions(gold.to_string()))?;

        Ok(Self {
            id,
            stem,
            context: context.into(),
            options: parsed,
            gold,
            dataset,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn stem(&self) -> &str {
        &self.stem
    }

    /// Empty for datasets without supporting passages.
    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn options(&self) -> &[AnswerOption] {
        &self.options
    }

    pub fn gold(&self) -> OptionLabel {
        self.gold
    }

    pub fn dataset(&self) -> Dataset {
        self.dataset
    }

    pub fn labels(&self) -> impl Iterator<Item = OptionLabel> + '_ {
        self.options.iter().map(|o| o.label)
    }

    pub fn has_label(&self, label: OptionLabel) -> bool {
        label.index() < self.options.len()
    }

    pub fn option(&self, label: OptionLabel) -> Option<&AnswerOption> {
        self.options.get(label.index()).filter(|o| o.label == label)
    }
}

/// Validates a loosely-typed field map into a [`Question`].
///
/// `options` may be an array of `{label, text}` objects or an object keyed
/// by label. A missing `id` is derived from the content. A missing
/// `dataset` is inferred: a yes/no option pair is PubMedQA, anything else
/// MedQA.
pub fn validate_question(raw: &Value) -> Result<Question, DomainError> {
    let map = raw.as_object().ok_or(DomainError::WrongType {
        field: "question",
        expected: "object",
    })?;

    let stem = string_field(map, "stem")?.ok_or(DomainError::MissingField("stem"))?;
    let gold = string_field(map, "gold")?.ok_or(DomainError::MissingField("gold"))?;
    let context = string_field(map, "context")?.unwrap_or_default();

    let options: Vec<(String, String)> = match map.get("options") {
        None | Some(Value::Null) => return Err(DomainError::MissingField("options")),
        Some(Value::Array(items)) => items
            .iter()
            .map(|item| {
                let label = item.get("label").and_then(Value::as_str);
                let text = item.get("text").and_then(Value::as_str);
                match (label, text) {
                    (Some(l), Some(t)) => Ok((l.to_string(), t.to_string())),
                    _ => Err(DomainError::WrongType {
                        field: "options",
                        expected: "array of {label, text} objects",
                    }),
                }
            })
            .collect::<Result<_, _>>()?,
        Some(Value::Object(entries)) => entries
            .iter()
            .map(|(l, t)| match t.as_str() {
                Some(t) => Ok((l.clone(), t.to_string())),
                None => Err(DomainError::WrongType {
                    field: "options",
                    expected: "object of label -> text strings",
                }),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => {
            return Err(DomainError::WrongType {
                field: "options",
                expected: "array or object",
            })
        }
    };

    let dataset = match map.get("dataset") {
        None | Some(Value::Null) => infer_dataset(&options),
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| DomainError::WrongType {
            field: "dataset",
            expected: "one of MedQA, MedMCQA, PubMedQA",
        })?,
    };

    let id = match string_field(map, "id")? {
        Some(id) => id,
        None => content_id(&stem, &options),
    };

    Question::new(id, stem, context, options, &gold, dataset)
}

fn string_field(
    map: &serde_json::Map<String, Value>,
    field: &'static str,
) -> Result<Option<String>, DomainError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(DomainError::WrongType {
            field,
            expected: "string",
        }),
    }
}

fn infer_dataset(options: &[(String, String)]) -> Dataset {
    let yes_no = options.len() == 2
        && options[0].1.trim().eq_ignore_ascii_case("yes")
        && options[1].1.trim().eq_ignore_ascii_case("no");
    if yes_no {
        Dataset::PubMedQA
    } else {
        Dataset::MedQA
    }
}

fn content_id(stem: &str, options: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    h.update(stem.as_bytes());
    for (l, t) in options {
        h.update([0]);
        h.update(l.as_bytes());
        h.update([0]);
        h.update(t.as_bytes());
    }
    format!("q-{}", &hex::encode(h.finalize())[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Primary,
    Helper1,
    Helper2,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Primary => "primary",
            Role::Helper1 => "helper1",
            Role::Helper2 => "helper2",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(with = "duration_ms", rename = "timeout_ms")]
    pub timeout: Duration,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            timeout: Duration::from_secs(120),
        }
    }
}

impl Decoding {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(DomainError::InvalidEndpoint(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(DomainError::InvalidEndpoint(
                "max_tokens must be positive".into(),
            ));
        }
        if self.timeout.is_zero() {
            return Err(DomainError::InvalidEndpoint(
                "timeout must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// One model's network identity and decoding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub role: Role,
    pub model_id: String,
    pub base_url: Url,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_ref: Option<String>,
    #[serde(default)]
    pub decoding: Decoding,
}

impl EndpointConfig {
    pub fn new(role: Role, model_id: impl Into<String>, base_url: Url) -> Self {
        Self {
            role,
            model_id: model_id.into(),
            base_url,
            api_key_ref: None,
            decoding: Decoding::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.model_id.trim().is_empty() {
            return Err(DomainError::InvalidEndpoint(format!(
                "{} endpoint has an empty model_id",
                self.role
            )));
        }
        self.decoding.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Confidence {
    Sure,
    NotSure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseRule {
    ExactMatch,
    PrefixMatch,
    Fallback,
}

/// Outcome of the confidence gate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VerdictFields")]
pub struct Verdict {
    value: Confidence,
    raw_text: String,
    parse_rule: ParseRule,
}

#[derive(Deserialize)]
struct VerdictFields {
    value: Confidence,
    raw_text: String,
    parse_rule: ParseRule,
}

impl TryFrom<VerdictFields> for Verdict {
    type Error = DomainError;

    fn try_from(f: VerdictFields) -> Result<Self, Self::Error> {
        Verdict::new(f.value, f.raw_text, f.parse_rule)
    }
}

impl Verdict {
    pub fn new(
        value: Confidence,
        raw_text: impl Into<String>,
        parse_rule: ParseRule,
    ) -> Result<Self, DomainError> {
        if parse_rule == ParseRule::Fallback && value != Confidence::NotSure {
            return Err(DomainError::FallbackMustBeNotSure);
        }
        Ok(Self {
            value,
            raw_text: raw_text.into(),
            parse_rule,
        })
    }

    pub fn value(&self) -> Confidence {
        self.value
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn parse_rule(&self) -> ParseRule {
        self.parse_rule
    }

    pub fn is_sure(&self) -> bool {
        self.value == Confidence::Sure
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Agent {
    Agent1,
    Agent2,
}

impl Agent {
    pub fn role(self) -> Role {
        match self {
            Agent::Agent1 => Role::Helper1,
            Agent::Agent2 => Role::Helper2,
        }
    }
}

/// One helper's option selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub agent: Agent,
    pub chosen_label: OptionLabel,
    pub raw_text: String,
}

impl CandidateAnswer {
    pub fn new(
        agent: Agent,
        chosen_label: OptionLabel,
        raw_text: impl Into<String>,
        question: &Question,
    ) -> Result<Self, DomainError> {
        if !question.has_label(chosen_label) {
            return Err(DomainError::LabelNotInQuestion(
                chosen_label,
                question.id().to_string(),
            ));
        }
        Ok(Self {
            agent,
            chosen_label,
            raw_text: raw_text.into(),
        })
    }
}

/// Integer confidence scores over the synthesis candidate labels, summing to 100.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, u32>", into = "BTreeMap<String, u32>")]
pub struct ConfidenceScores {
    a: u32,
    b: u32,
}

impl ConfidenceScores {
    pub const EVEN: ConfidenceScores = ConfidenceScores { a: 50, b: 50 };

    pub fn new(a: u32, b: u32) -> Result<Self, DomainError> {
        if a.checked_add(b) != Some(100) {
            return Err(DomainError::InvalidScores(format!(
                "scores {a} + {b} do not sum to 100"
            )));
        }
        Ok(Self { a, b })
    }

    pub fn get(&self, label: CandidateLabel) -> u32 {
        match label {
            CandidateLabel::A => self.a,
            CandidateLabel::B => self.b,
        }
    }
}

impl TryFrom<BTreeMap<String, u32>> for ConfidenceScores {
    type Error = DomainError;

    fn try_from(map: BTreeMap<String, u32>) -> Result<Self, Self::Error> {
        let keys: Vec<&str> = map.keys().map(String::as_str).collect();
        if keys != ["A", "B"] {
            return Err(DomainError::InvalidScores(format!(
                "keys must be exactly A and B, got {keys:?}"
            )));
        }
        ConfidenceScores::new(map["A"], map["B"])
    }
}

impl From<ConfidenceScores> for BTreeMap<String, u32> {
    fn from(s: ConfidenceScores) -> Self {
        BTreeMap::from([("A".to_string(), s.a), ("B".to_string(), s.b)])
    }
}

/// Label in the synthesis prompt's two-slot candidate space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CandidateLabel {
    A,
    B,
}

impl CandidateLabel {
    pub fn agent(self) -> Agent {
        match self {
            CandidateLabel::A => Agent::Agent1,
            CandidateLabel::B => Agent::Agent2,
        }
    }
}

impl fmt::Display for CandidateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateLabel::A => "A",
            CandidateLabel::B => "B",
        })
    }
}

/// The synthesized answer, mapped back into the question's option space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalDecision {
    pub candidate_label: CandidateLabel,
    pub mapped_option: OptionLabel,
    pub reasoning: String,
    pub confidence_scores: ConfidenceScores,
    /// Set when the decision came from the fallback policy rather than a
    /// parsed synthesis response.
    #[serde(default)]
    pub via_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pathway {
    Direct,
    Collaborative,
}

/// Pipeline variant being executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    ZeroShotOnly,
    SingleModelCoT,
    FullFramework,
}

impl Mode {
    pub const ALL: [Mode; 3] = [
        Mode::ZeroShotOnly,
        Mode::SingleModelCoT,
        Mode::FullFramework,
    ];

    /// Short name used on the command line and in directory names.
    pub fn slug(self) -> &'static str {
        match self {
            Mode::ZeroShotOnly => "zero-shot",
            Mode::SingleModelCoT => "single-cot",
            Mode::FullFramework => "full",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|m| m.slug().eq_ignore_ascii_case(s) || format!("{m:?}").eq_ignore_ascii_case(s))
    }

    /// Row label used in comparison tables.
    pub fn table_label(self, primary_model: &str) -> String {
        match self {
            Mode::ZeroShotOnly => format!("Zero-shot {primary_model}"),
            Mode::SingleModelCoT => format!("CoT Reasoning {primary_model}"),
            Mode::FullFramework => {
                "Full Framework (Confidence Routing + Multi-Model CoT)".to_string()
            }
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Which helpers failed terminally during consultation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degradation {
    Helper1Failed,
    Helper2Failed,
    BothHelpersFailed,
}

/// One backend call made while answering a question.
///
/// Only deterministic fields are stored here; wall-clock latency and cache
/// provenance live in [`CallTiming`] so persisted record streams are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub role: Role,
    pub template_id: crate::prompts::TemplateId,
    pub prompt_digest: String,
    /// 0 for the first ask, n for the n-th re-ask after an unparseable reply.
    pub reask: u32,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTiming {
    #[serde(with = "duration_ms", rename = "latency_ms")]
    pub latency: Duration,
    pub cache_hit: bool,
}

/// Full per-question trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub question_id: String,
    pub mode: Mode,
    pub pathway: Pathway,
    /// Absent when the mode skips the confidence gate.
    pub verdict: Option<Verdict>,
    pub candidates: Option<[CandidateAnswer; 2]>,
    pub decision: Option<FinalDecision>,
    pub final_answer: OptionLabel,
    pub correct: bool,
    #[serde(default)]
    pub degradation: Option<Degradation>,
    #[serde(default)]
    pub fallback_used: bool,
    pub call_log: Vec<CallLogEntry>,
    /// Parallel to `call_log`; not persisted in the record stream.
    #[serde(skip)]
    pub timings: Vec<CallTiming>,
}

impl PipelineRecord {
    pub fn helper_calls(&self) -> usize {
        self.call_log
            .iter()
            .filter(|c| c.role != Role::Primary)
            .count()
    }

    pub fn primary_calls(&self) -> usize {
        self.call_log
            .iter()
            .filter(|c| c.role == Role::Primary)
            .count()
    }

    /// Checks the structural invariants that do not need the question.
    pub fn validate(&self) -> Result<(), DomainError> {
        let fail = |reason: &str| {
            Err(DomainError::RecordInvariant {
                id: self.question_id.clone(),
                reason: reason.to_string(),
            })
        };
        match self.pathway {
            Pathway::Direct => {
                if self.candidates.is_some() || self.decision.is_some() {
                    return fail("direct pathway carries candidates or a decision");
                }
                if self.helper_calls() != 0 {
                    return fail("direct pathway made helper calls");
                }
            }
            Pathway::Collaborative => {
                let (Some(cands), Some(decision)) = (&self.candidates, &self.decision) else {
                    return fail("collaborative pathway lacks candidates or decision");
                };
                if cands[0].agent != Agent::Agent1 || cands[1].agent != Agent::Agent2 {
                    return fail("candidates out of agent order");
                }
                if self.helper_calls() < 2 {
                    return fail("collaborative pathway made fewer than two helper calls");
                }
                if decision.mapped_option != self.final_answer {
                    return fail("final answer differs from decision");
                }
                let proposed = [cands[0].chosen_label, cands[1].chosen_label];
                if !decision.via_fallback && !proposed.contains(&decision.mapped_option) {
                    return fail("decision maps to an option no agent proposed");
                }
                if decision.via_fallback && !self.fallback_used {
                    return fail("fallback decision not flagged on record");
                }
            }
        }
        if let Some(v) = &self.verdict {
            let gated_ok = matches!(
                (v.value(), self.pathway),
                (Confidence::Sure, Pathway::Direct) | (Confidence::NotSure, Pathway::Collaborative)
            );
            if !gated_ok {
                return fail("pathway disagrees with verdict");
            }
            if self.call_log.first().map(|c| c.template_id)
                != Some(crate::prompts::TemplateId::ConfidenceV1)
            {
                return fail("confidence call is not the first call");
            }
        }
        Ok(())
    }

    /// Checks the invariants that need the question as well.
    pub fn validate_against(&self, question: &Question) -> Result<(), DomainError> {
        self.validate()?;
        let fail = |reason: String| {
            Err(DomainError::RecordInvariant {
                id: self.question_id.clone(),
                reason,
            })
        };
        if self.question_id != question.id() {
            return fail(format!("record is for question `{}`", question.id()));
        }
        if !question.has_label(self.final_answer) {
            return fail(format!(
                "final answer {} is not an option",
                self.final_answer
            ));
        }
        if self.correct != (self.final_answer == question.gold()) {
            return fail("stored correctness disagrees with gold".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn four_options() -> Vec<(String, String)> {
        ["A", "B", "C", "D"]
            .iter()
            .zip(["one", "two", "three", "four"])
            .map(|(l, t)| (l.to_string(), t.to_string()))
            .collect()
    }

    #[test]
    fn minimal_binary_item_is_pubmedqa() {
        let q = validate_question(&json!({
            "stem": "q",
            "options": [{"label": "A", "text": "yes"}, {"label": "B", "text": "no"}],
            "gold": "A"
        }))
        .unwrap();
        assert_eq!(q.dataset(), Dataset::PubMedQA);
        assert_eq!(q.gold(), OptionLabel::parse("A").unwrap());
        assert_eq!(q.context(), "");
        assert!(q.id().starts_with("q-"));
    }

    #[test]
    fn gold_outside_options_is_rejected() {
        let err = validate_question(&json!({
            "stem": "q",
            "options": {"A": "1", "B": "2", "C": "3", "D": "4"},
            "gold": "E"
        }))
        .unwrap_err();
        assert_eq!(err, DomainError::GoldNotInOptions("E".into()));
    }

    #[test]
    fn duplicate_label_is_rejected() {
        let err = validate_question(&json!({
            "stem": "q",
            "options": [
                {"label": "A", "text": "x"},
                {"label": "A", "text": "y"},
                {"label": "B", "text": "z"}
            ],
            "gold": "A"
        }))
        .unwrap_err();
        assert!(matches!(err, DomainError::DuplicateLabel(l) if l.as_char() == 'A'));
    }

    #[test]
    fn missing_fields_are_named() {
        let err = validate_question(&json!({"options": [], "gold": "A"})).unwrap_err();
        assert_eq!(err, DomainError::MissingField("stem"));
        let err = validate_question(&json!({"stem": "s", "gold": "A"})).unwrap_err();
        assert_eq!(err, DomainError::MissingField("options"));
        let err =
            validate_question(&json!({"stem": "s", "options": {"A": "x", "B": "y"}})).unwrap_err();
        assert_eq!(err, DomainError::MissingField("gold"));
    }

    #[test]
    fn labels_are_uppercased_and_must_be_consecutive() {
        let q = Question::new(
            "id",
            "s",
            "",
            vec![("a".into(), "x".into()), ("b".into(), "y".into())],
            "b",
            Dataset::MedQA,
        )
        .unwrap();
        assert_eq!(q.gold().as_char(), 'B');

        let err = Question::new(
            "id",
            "s",
            "",
            vec![("A".into(), "x".into()), ("C".into(), "y".into())],
            "A",
            Dataset::MedQA,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DomainError::NonConsecutiveLabels { position: 1, .. }
        ));
    }

    #[test]
    fn option_count_and_text_bounds() {
        let one = vec![("A".to_string(), "x".to_string())];
        assert_eq!(
            Question::new("i", "s", "", one, "A", Dataset::MedQA).unwrap_err(),
            DomainError::OptionCount(1)
        );
        let six: Vec<_> = (0..6)
            .map(|i| {
                (
                    OptionLabel::from_index(i).unwrap().to_string(),
                    "t".to_string(),
                )
            })
            .collect();
        assert_eq!(
            Question::new("i", "s", "", six, "A", Dataset::MedQA).unwrap_err(),
            DomainError::OptionCount(6)
        );
        let mut opts = four_options();
        opts[2].1 = "  ".into();
        assert!(matches!(
            Question::new("i", "s", "", opts, "A", Dataset::MedQA).unwrap_err(),
            DomainError::EmptyOptionText(_)
        ));
    }

    #[test]
    fn deserialization_enforces_invariants() {
        let bad = r#"{"id":"x","stem":"s","context":"","options":[{"label":"A","text":"a"},{"label":"B","text":"b"}],"gold":"C","dataset":"MedQA"}"#;
        assert!(serde_json::from_str::<Question>(bad).is_err());
        let bad_verdict = r#"{"value":"Sure","raw_text":"?","parse_rule":"Fallback"}"#;
        assert!(serde_json::from_str::<Verdict>(bad_verdict).is_err());
        assert!(serde_json::from_str::<ConfidenceScores>(r#"{"A":60,"B":50}"#).is_err());
        assert!(serde_json::from_str::<ConfidenceScores>(r#"{"A":60,"C":40}"#).is_err());
    }

    #[test]
    fn fallback_verdict_must_be_not_sure() {
        assert!(Verdict::new(Confidence::Sure, "", ParseRule::Fallback).is_err());
        assert!(Verdict::new(Confidence::NotSure, "", ParseRule::Fallback).is_ok());
    }

    #[test]
    fn candidate_must_be_an_option() {
        let q = Question::new("i", "s", "", four_options(), "A", Dataset::MedQA).unwrap();
        let e = OptionLabel::parse("E").unwrap();
        assert!(CandidateAnswer::new(Agent::Agent1, e, "E", &q).is_err());
    }

    #[test]
    fn decoding_validation() {
        let mut d = Decoding::default();
        assert!(d.validate().is_ok());
        d.temperature = -0.1;
        assert!(d.validate().is_err());
        d.temperature = 0.0;
        d.max_tokens = 0;
        assert!(d.validate().is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn arb_question() -> impl Strategy<Value = Question> {
            (
                "[a-z0-9-]{1,12}",
                "\\PC{1,40}",
                "\\PC{0,40}",
                prop::collection::vec("[a-zA-Z0-9 ]{0,10}[a-z]", 2..=5),
                any::<prop::sample::Index>(),
                prop::sample::select(Dataset::ALL.to_vec()),
            )
                .prop_filter("stem must be non-blank", |(_, s, ..)| !s.trim().is_empty())
                .prop_map(|(id, stem, ctx, texts, gold, ds)| {
                    let n = texts.len();
                    let opts = texts
                        .into_iter()
                        .enumerate()
                        .map(|(i, t)| (OptionLabel::from_index(i).unwrap().to_string(), t))
                        .collect();
                    let gold = OptionLabel::from_index(gold.index(n)).unwrap().to_string();
                    Question::new(id, stem, ctx, opts, &gold, ds).unwrap()
                })
        }

        proptest! {
            #[test]
            fn question_roundtrips_through_json(q in arb_question()) {
                let line = serde_json::to_string(&q).unwrap();
                prop_assert!(!line.contains('\n'));
                let back: Question = serde_json::from_str(&line).unwrap();
                prop_assert_eq!(back, q);
            }
        }
    }
}
