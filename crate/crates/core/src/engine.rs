//! The confidence-gated pipeline.
//!
//! Every question first goes to the primary model's confidence gate. A
//! `Sure` verdict sends it down the direct pathway (the primary answers
//! alone); anything else sends it down the collaborative pathway, where both
//! helpers answer independently and the primary synthesizes a final choice
//! from their two candidates.

use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::client::{Client, ClientError, CompletionRequest, ResponseSource};
use crate::domain::{
    Agent, CallLogEntry, CallTiming, CandidateAnswer, CandidateLabel, Confidence, ConfidenceScores,
    Degradation, DomainError, EndpointConfig, FinalDecision, Mode, OptionLabel, ParseRule, Pathway,
    PipelineRecord, Question, Role, Verdict,
};
use crate::prompts::{self, PromptText};

pub const DEFAULT_MAX_JSON_RETRIES: u32 = 2;

/// Reasoning text attached to decisions produced by the fallback policy.
pub const FALLBACK_REASONING: &str = "fallback";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FallbackPolicy {
    /// Answer with the primary model's direct answer.
    #[default]
    PrimaryDirect,
}

/// Per-stage token budgets. The effective budget of a call is the smaller
/// of the stage budget and the endpoint's own `max_tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageTokens {
    pub confidence: u32,
    pub direct: u32,
    pub synthesis: u32,
    pub cot: u32,
}

impl Default for StageTokens {
    fn default() -> Self {
        Self {
            confidence: 64,
            direct: 16,
            synthesis: 1024,
            cot: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{slot} endpoint has role {found}, expected {expected}")]
    RoleMismatch {
        slot: &'static str,
        expected: Role,
        found: Role,
    },
    #[error(transparent)]
    Endpoint(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub primary: EndpointConfig,
    pub helper1: EndpointConfig,
    pub helper2: EndpointConfig,
    #[serde(default = "default_json_retries")]
    pub max_json_retries: u32,
    #[serde(default)]
    pub fallback_policy: FallbackPolicy,
    #[serde(default)]
    pub stage_tokens: StageTokens,
}

fn default_json_retries() -> u32 {
    DEFAULT_MAX_JSON_RETRIES
}

impl PipelineConfig {
    pub fn new(
        primary: EndpointConfig,
        helper1: EndpointConfig,
        helper2: EndpointConfig,
    ) -> Result<Self, ConfigError> {
        let cfg = Self {
            primary,
            helper1,
            helper2,
            max_json_retries: DEFAULT_MAX_JSON_RETRIES,
            fallback_policy: FallbackPolicy::default(),
            stage_tokens: StageTokens::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Exactly one endpoint per role, each individually valid.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (slot, expected, ep) in [
            ("primary", Role::Primary, &self.primary),
            ("helper1", Role::Helper1, &self.helper1),
            ("helper2", Role::Helper2, &self.helper2),
        ] {
            if ep.role != expected {
                return Err(ConfigError::RoleMismatch {
                    slot,
                    expected,
                    found: ep.role,
                });
            }
            ep.validate()?;
        }
        Ok(())
    }
}

/// Maps the synthesis prompt's `A`/`B` back to the agents' option letters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateMap {
    pairs: [(CandidateLabel, OptionLabel); 2],
}

impl CandidateMap {
    pub fn new(first: &CandidateAnswer, second: &CandidateAnswer) -> Self {
        Self {
            pairs: [
                (CandidateLabel::A, first.chosen_label),
                (CandidateLabel::B, second.chosen_label),
            ],
        }
    }

    pub fn resolve(&self, label: CandidateLabel) -> OptionLabel {
        match label {
            CandidateLabel::A => self.pairs[0].1,
            CandidateLabel::B => self.pairs[1].1,
        }
    }

    pub fn pairs(&self) -> &[(CandidateLabel, OptionLabel); 2] {
        &self.pairs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("{role} call failed for question `{question_id}`: {source}")]
    Client {
        role: Role,
        question_id: String,
        #[source]
        source: ClientError,
    },
    #[error("{role} gave no usable option letter for question `{question_id}` after {attempts} asks; last reply: {last_text:?}")]
    UnparsableAnswer {
        role: Role,
        question_id: String,
        attempts: u32,
        last_text: String,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Brings a verdict reply into canonical form: trimmed, trailing
/// punctuation removed, lowercased. Applying it twice changes nothing.
pub fn normalize_verdict_text(text: &str) -> String {
    let mut s = text.trim();
    loop {
        let stripped = s
            .trim_end_matches(|c: char| c.is_ascii_punctuation() || matches!(c, '。' | '！' | '…'))
            .trim();
        if stripped == s {
            break;
        }
        s = stripped;
    }
    s.to_lowercase()
}

/// Total parser for confidence-gate replies.
pub fn parse_verdict(text: &str) -> Verdict {
    let norm = normalize_verdict_text(text);
    let (value, rule) = if norm == "not sure" {
        (Confidence::NotSure, ParseRule::ExactMatch)
    } else if norm == "sure" {
        (Confidence::Sure, ParseRule::ExactMatch)
    } else if norm.starts_with("not sure") {
        (Confidence::NotSure, ParseRule::PrefixMatch)
    } else if norm.starts_with("sure") {
        (Confidence::Sure, ParseRule::PrefixMatch)
    } else {
        (Confidence::NotSure, ParseRule::Fallback)
    };
    Verdict::new(value, text, rule).expect("fallback is always NotSure")
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '’' || c == '_'
}

/// First standalone letter (no word characters on either side) that names
/// one of the question's options, case-insensitively.
pub fn extract_option_letter(text: &str, q: &Question) -> Option<OptionLabel> {
    let chars: Vec<char> = text.chars().collect();
    chars.iter().enumerate().find_map(|(i, &c)| {
        if !c.is_ascii_alphabetic() {
            return None;
        }
        let before_ok = i == 0 || !is_word_char(chars[i - 1]);
        let after_ok = chars.get(i + 1).is_none_or(|&n| !is_word_char(n));
        if !(before_ok && after_ok) {
            return None;
        }
        let label = OptionLabel::parse(&c.to_string()).ok()?;
        q.has_label(label).then_some(label)
    })
}

/// Reads the final `Answer: X` of a chain-of-thought reply, falling back to
/// the first option letter on the last non-empty line.
pub fn extract_cot_answer(text: &str, q: &Question) -> Option<OptionLabel> {
    static ANSWER: std::sync::LazyLock<regex::Regex> = std::sync::LazyLock::new(|| {
        regex::Regex::new(r"(?i)\banswer\s*(?:is)?\s*[:\-]?\s*\(?([a-z])\)?(?:[^a-z0-9]|$)")
            .expect("valid regex")
    });
    let from_marker = ANSWER
        .captures_iter(text)
        .filter_map(|c| OptionLabel::parse(c.get(1)?.as_str()).ok())
        .filter(|l| q.has_label(*l))
        .last();
    from_marker.or_else(|| {
        text.lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .and_then(|l| extract_option_letter(l, q))
    })
}

/// Why a synthesis reply was rejected. Each one triggers a re-ask.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFailure {
    #[error("no JSON object found")]
    NoJson,
    #[error("missing \"answer\"")]
    MissingAnswer,
    #[error("answer {0:?} is not \"A\" or \"B\"")]
    AnswerOutOfSpace(String),
    #[error("missing or unusable \"confidence_scores\"")]
    MissingScores,
    #[error("confidence score keys {0:?} are not within A, B")]
    WrongKeys(Vec<String>),
    #[error("confidence score for {0} is not an integer")]
    NonIntegerScore(String),
    #[error("confidence score for {0} is negative")]
    NegativeScore(String),
    #[error("confidence scores sum to {0}, not 100")]
    SumNot100(i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDecision {
    pub candidate_label: CandidateLabel,
    pub reasoning: String,
    pub confidence_scores: ConfidenceScores,
}

fn first_fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // Skip an info string such as `json`.
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let info = &after[..body_start];
    let body_start = if info
        .trim()
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        body_start
    } else {
        0
    };
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].trim())
}

fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn as_object(s: &str) -> Option<serde_json::Map<String, Value>> {
    match serde_json::from_str::<Value>(s.trim()) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

/// Extracts and validates the synthesis decision.
///
/// Tries, in order, the whole reply, the first fenced code block and the
/// first balanced `{...}` span; the first that parses as a JSON object is
/// validated. A single missing score is repaired to `100 - other`.
pub fn parse_decision_json(text: &str) -> Result<ParsedDecision, ParseFailure> {
    let obj = as_object(text)
        .or_else(|| first_fenced_block(text).and_then(as_object))
        .or_else(|| first_balanced_object(text).and_then(as_object))
        .ok_or(ParseFailure::NoJson)?;

    let answer = match obj.get("answer") {
        None | Some(Value::Null) => return Err(ParseFailure::MissingAnswer),
        Some(Value::String(s)) => s.trim().to_ascii_uppercase(),
        Some(other) => return Err(ParseFailure::AnswerOutOfSpace(other.to_string())),
    };
    let candidate_label = match answer.as_str() {
        "A" => CandidateLabel::A,
        "B" => CandidateLabel::B,
        _ => return Err(ParseFailure::AnswerOutOfSpace(answer)),
    };

    let reasoning = match obj.get("reasoning") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };

    let Some(Value::Object(scores)) = obj.get("confidence_scores") else {
        return Err(ParseFailure::MissingScores);
    };
    let mut a = None;
    let mut b = None;
    let mut bad_keys = Vec::new();
    for (key, value) in scores {
        let slot = match key.trim().to_ascii_uppercase().as_str() {
            "A" => &mut a,
            "B" => &mut b,
            _ => {
                bad_keys.push(key.clone());
                continue;
            }
        };
        let v = match value {
            Value::Number(n) => n
                .as_i64()
                .ok_or_else(|| ParseFailure::NonIntegerScore(key.clone()))?,
            _ => return Err(ParseFailure::NonIntegerScore(key.clone())),
        };
        if v < 0 {
            return Err(ParseFailure::NegativeScore(key.clone()));
        }
        *slot = Some(v);
    }
    if !bad_keys.is_empty() {
        return Err(ParseFailure::WrongKeys(bad_keys));
    }
    let given_sum = a.unwrap_or(0) + b.unwrap_or(0);
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, 100 - a),
        (None, Some(b)) => (100 - b, b),
        (None, None) => return Err(ParseFailure::MissingScores),
    };
    if a < 0 || b < 0 || a + b != 100 {
        return Err(ParseFailure::SumNot100(given_sum));
    }
    let confidence_scores =
        ConfidenceScores::new(a as u32, b as u32).map_err(|_| ParseFailure::SumNot100(a + b))?;
    Ok(ParsedDecision {
        candidate_label,
        reasoning,
        confidence_scores,
    })
}

/// Helper consultation result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Consultation {
    pub candidates: [CandidateAnswer; 2],
    pub degradation: Option<Degradation>,
}

#[derive(Debug, Default)]
struct Trace {
    log: Vec<CallLogEntry>,
    timings: Vec<CallTiming>,
}

impl Trace {
    fn append(&mut self, other: Trace) {
        self.log.extend(other.log);
        self.timings.extend(other.timings);
    }
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Confidence,
    Direct,
    Synthesis,
    Cot,
}

/// Runs the pipeline against a [`Client`].
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: PipelineConfig,
    client: Arc<Client>,
}

impl Engine {
    pub fn new(cfg: PipelineConfig, client: Arc<Client>) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn client(&self) -> &Arc<Client> {
        &self.client
    }

    fn endpoint(&self, role: Role, stage: Stage) -> EndpointConfig {
        let mut ep = match role {
            Role::Primary => self.cfg.primary.clone(),
            Role::Helper1 => self.cfg.helper1.clone(),
            Role::Helper2 => self.cfg.helper2.clone(),
        };
        let t = &self.cfg.stage_tokens;
        let budget = match stage {
            Stage::Confidence => t.confidence,
            Stage::Direct => t.direct,
            Stage::Synthesis => t.synthesis,
            Stage::Cot => t.cot,
        };
        ep.decoding.max_tokens = ep.decoding.max_tokens.min(budget).max(1);
        ep
    }

    async fn call(
        &self,
        trace: &mut Trace,
        role: Role,
        stage: Stage,
        prompt: &PromptText,
        question_id: &str,
        reask: u32,
    ) -> Result<String, EngineError> {
        let ep = self.endpoint(role, stage);
        let prompt = prompt.reask(reask);
        let req = CompletionRequest::new(&ep, &prompt, question_id).with_reask(reask);
        let result = self.client.complete(&req).await;
        trace.log.push(CallLogEntry {
            role,
            template_id: prompt.template_id,
            prompt_digest: prompt.slot_digest.clone(),
            reask,
            ok: result.is_ok(),
        });
        match result {
            Ok(r) => {
                trace.timings.push(CallTiming {
                    latency: r.latency,
                    cache_hit: r.source == ResponseSource::Cache,
                });
                Ok(r.text)
            }
            Err(source) => {
                trace.timings.push(CallTiming {
                    latency: std::time::Duration::ZERO,
                    cache_hit: false,
                });
                Err(EngineError::Client {
                    role,
                    question_id: question_id.to_string(),
                    source,
                })
            }
        }
    }

    /// Asks until `parse` accepts the reply or the re-ask budget runs out.
    async fn ask_letter(
        &self,
        trace: &mut Trace,
        role: Role,
        stage: Stage,
        prompt: &PromptText,
        q: &Question,
        parse: fn(&str, &Question) -> Option<OptionLabel>,
    ) -> Result<(OptionLabel, String), EngineError> {
        let mut last_text = String::new();
        for reask in 0..=self.cfg.max_json_retries {
            let text = self.call(trace, role, stage, prompt, q.id(), reask).await?;
            if let Some(label) = parse(&text, q) {
                return Ok((label, text));
            }
            tracing::debug!(question = q.id(), %role, reask, "unparseable answer");
            last_text = text;
        }
        Err(EngineError::UnparsableAnswer {
            role,
            question_id: q.id().to_string(),
            attempts: self.cfg.max_json_retries + 1,
            last_text,
        })
    }

    async fn detect_traced(&self, trace: &mut Trace, q: &Question) -> Result<Verdict, EngineError> {
        let prompt = prompts::render_confidence_prompt(q);
        let text = self
            .call(trace, Role::Primary, Stage::Confidence, &prompt, q.id(), 0)
            .await?;
        Ok(parse_verdict(&text))
    }

    async fn direct_traced(
        &self,
        trace: &mut Trace,
        q: &Question,
    ) -> Result<(OptionLabel, String), EngineError> {
        let prompt = prompts::render_direct_answer_prompt(q);
        self.ask_letter(
            trace,
            Role::Primary,
            Stage::Direct,
            &prompt,
            q,
            extract_option_letter,
        )
        .await
    }

    async fn cot_traced(
        &self,
        trace: &mut Trace,
        q: &Question,
    ) -> Result<(OptionLabel, String), EngineError> {
        let prompt = prompts::render_cot_answer_prompt(q);
        self.ask_letter(
            trace,
            Role::Primary,
            Stage::Cot,
            &prompt,
            q,
            extract_cot_answer,
        )
        .await
    }

    async fn helper_traced(
        &self,
        agent: Agent,
        q: &Question,
    ) -> (Trace, Result<CandidateAnswer, EngineError>) {
        let mut trace = Trace::default();
        let prompt = prompts::render_direct_answer_prompt(q);
        let result = self
            .ask_letter(
                &mut trace,
                agent.role(),
                Stage::Direct,
                &prompt,
                q,
                extract_option_letter,
            )
            .await
            .and_then(|(label, text)| Ok(CandidateAnswer::new(agent, label, text, q)?));
        (trace, result)
    }

    async fn consult_traced(
        &self,
        trace: &mut Trace,
        q: &Question,
    ) -> Result<Consultation, EngineError> {
        let ((t1, r1), (t2, r2)) = tokio::join!(
            self.helper_traced(Agent::Agent1, q),
            self.helper_traced(Agent::Agent2, q)
        );
        // Agent order, not completion order.
        trace.append(t1);
        trace.append(t2);

        let relabel = |c: &CandidateAnswer, agent: Agent| CandidateAnswer { agent, ..c.clone() };
        match (r1, r2) {
            (Ok(c1), Ok(c2)) => Ok(Consultation {
                candidates: [c1, c2],
                degradation: None,
            }),
            (Ok(c1), Err(e)) => {
                tracing::warn!(question = q.id(), error = %e, "helper2 failed, duplicating helper1");
                let c2 = relabel(&c1, Agent::Agent2);
                Ok(Consultation {
                    candidates: [c1, c2],
                    degradation: Some(Degradation::Helper2Failed),
                })
            }
            (Err(e), Ok(c2)) => {
                tracing::warn!(question = q.id(), error = %e, "helper1 failed, duplicating helper2");
                let c1 = relabel(&c2, Agent::Agent1);
                Ok(Consultation {
                    candidates: [c1, c2],
                    degradation: Some(Degradation::Helper1Failed),
                })
            }
            (Err(e1), Err(e2)) => {
                tracing::warn!(question = q.id(), %e1, %e2, "both helpers failed, answering directly");
                let (label, text) = self.direct_traced(trace, q).await?;
                let c1 = CandidateAnswer::new(Agent::Agent1, label, text.clone(), q)?;
                let c2 = CandidateAnswer::new(Agent::Agent2, label, text, q)?;
                Ok(Consultation {
                    candidates: [c1, c2],
                    degradation: Some(Degradation::BothHelpersFailed),
                })
            }
        }
    }

    async fn fallback_decision(
        &self,
        trace: &mut Trace,
        q: &Question,
        candidates: &[CandidateAnswer; 2],
    ) -> Result<FinalDecision, EngineError> {
        match self.cfg.fallback_policy {
            FallbackPolicy::PrimaryDirect => {
                let (label, _) = self.direct_traced(trace, q).await?;
                let candidate_label =
                    if label == candidates[1].chosen_label && label != candidates[0].chosen_label {
                        CandidateLabel::B
                    } else {
                        CandidateLabel::A
                    };
                Ok(FinalDecision {
                    candidate_label,
                    mapped_option: label,
                    reasoning: FALLBACK_REASONING.to_string(),
                    confidence_scores: ConfidenceScores::EVEN,
                    via_fallback: true,
                })
            }
        }
    }

    async fn synthesize_traced(
        &self,
        trace: &mut Trace,
        q: &Question,
        candidates: &[CandidateAnswer; 2],
    ) -> Result<FinalDecision, EngineError> {
        let map = CandidateMap::new(&candidates[0], &candidates[1]);
        let prompt = prompts::render_synthesis_prompt(q, &candidates[0], &candidates[1]);
        for reask in 0..=self.cfg.max_json_retries {
            let text = match self
                .call(
                    trace,
                    Role::Primary,
                    Stage::Synthesis,
                    &prompt,
                    q.id(),
                    reask,
                )
                .await
            {
                Ok(t) => t,
                Err(e) => {
                    tracing::warn!(question = q.id(), error = %e, "synthesis call failed");
                    break;
                }
            };
            match parse_decision_json(&text) {
                Ok(parsed) => {
                    return Ok(FinalDecision {
                        candidate_label: parsed.candidate_label,
                        mapped_option: map.resolve(parsed.candidate_label),
                        reasoning: parsed.reasoning,
                        confidence_scores: parsed.confidence_scores,
                        via_fallback: false,
                    })
                }
                Err(why) => {
                    tracing::debug!(question = q.id(), reask, %why, "synthesis reply rejected")
                }
            }
        }
        self.fallback_decision(trace, q, candidates).await
    }

    /// One primary call through the confidence gate.
    pub async fn detect_confidence(&self, q: &Question) -> Result<Verdict, EngineError> {
        self.detect_traced(&mut Trace::default(), q).await
    }

    /// The primary model's own answer, re-asking on unparseable replies.
    pub async fn answer_direct(&self, q: &Question) -> Result<OptionLabel, EngineError> {
        Ok(self.direct_traced(&mut Trace::default(), q).await?.0)
    }

    /// Both helpers' answers, concurrently, tagged by agent.
    pub async fn consult_helpers(&self, q: &Question) -> Result<Consultation, EngineError> {
        self.consult_traced(&mut Trace::default(), q).await
    }

    /// The primary's chain-of-thought choice between the two candidates.
    pub async fn synthesize(
        &self,
        q: &Question,
        candidates: &[CandidateAnswer; 2],
    ) -> Result<FinalDecision, EngineError> {
        self.synthesize_traced(&mut Trace::default(), q, candidates)
            .await
    }

    /// The full gated pipeline for one question.
    pub async fn run_pipeline(&self, q: &Question) -> Result<PipelineRecord, EngineError> {
        self.run_mode(Mode::FullFramework, q).await
    }

    pub async fn run_mode(&self, mode: Mode, q: &Question) -> Result<PipelineRecord, EngineError> {
        let mut trace = Trace::default();
        let mut verdict = None;
        let mut candidates = None;
        let mut decision = None;
        let mut degradation = None;
        let mut fallback_used = false;

        let (pathway, final_answer) = match mode {
            Mode::ZeroShotOnly => (Pathway::Direct, self.direct_traced(&mut trace, q).await?.0),
            Mode::SingleModelCoT => (Pathway::Direct, self.cot_traced(&mut trace, q).await?.0),
            Mode::FullFramework => {
                let v = self.detect_traced(&mut trace, q).await?;
                let sure = v.is_sure();
                verdict = Some(v);
                if sure {
                    (Pathway::Direct, self.direct_traced(&mut trace, q).await?.0)
                } else {
                    let consult = self.consult_traced(&mut trace, q).await?;
                    degradation = consult.degradation;
                    let d = if consult.degradation == Some(Degradation::BothHelpersFailed) {
                        let label = consult.candidates[0].chosen_label;
                        FinalDecision {
                            candidate_label: CandidateLabel::A,
                            mapped_option: label,
                            reasoning: FALLBACK_REASONING.to_string(),
                            confidence_scores: ConfidenceScores::EVEN,
                            via_fallback: true,
                        }
                    } else {
                        self.synthesize_traced(&mut trace, q, &consult.candidates)
                            .await?
                    };
                    fallback_used = d.via_fallback;
                    let answer = d.mapped_option;
                    candidates = Some(consult.candidates);
                    decision = Some(d);
                    (Pathway::Collaborative, answer)
                }
            }
        };

        let record = PipelineRecord {
            question_id: q.id().to_string(),
            mode,
            pathway,
            verdict,
            candidates,
            decision,
            final_answer,
            correct: final_answer == q.gold(),
            degradation,
            fallback_used,
            call_log: trace.log,
            timings: trace.timings,
        };
        debug_assert!(
            record.validate_against(q).is_ok(),
            "{:?}",
            record.validate_against(q)
        );
        Ok(record)
    }

    /// Runs every question, up to `concurrency` at a time; results come back
    /// in input order.
    pub async fn run_batch(
        &self,
        mode: Mode,
        questions: &[Question],
        concurrency: usize,
    ) -> Vec<Result<PipelineRecord, EngineError>> {
        stream::iter(questions)
            .map(|q| self.run_mode(mode, q))
            .buffered(concurrency.max(1))
            .collect()
            .await
    }
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use url::Url;

    use super::*;
    use crate::client::{FailKind, Matcher, MockResponse, MockRule, MockScript};
    use crate::domain::Dataset;
    use crate::prompts::TemplateId;

    fn label(s: &str) -> OptionLabel {
        OptionLabel::parse(s).unwrap()
    }

    fn q4(id: &str, gold: &str) -> Question {
        Question::new(
            id,
            "Which vitamin deficiency causes scurvy?",
            "",
            vec![
                ("A".into(), "Vitamin A".into()),
                ("B".into(), "Vitamin B12".into()),
                ("C".into(), "Vitamin C".into()),
                ("D".into(), "Vitamin D".into()),
            ],
            gold,
            Dataset::MedQA,
        )
        .unwrap()
    }

    fn config() -> PipelineConfig {
        let url = Url::parse("http://mock.invalid/v1").unwrap();
        PipelineConfig::new(
            EndpointConfig::new(Role::Primary, "primary-m", url.clone()),
            EndpointConfig::new(Role::Helper1, "helper1-m", url.clone()),
            EndpointConfig::new(Role::Helper2, "helper2-m", url),
        )
        .unwrap()
    }

    fn engine(script: MockScript) -> Engine {
        Engine::new(config(), Arc::new(Client::mock(script))).unwrap()
    }

    fn primary(t: TemplateId) -> Matcher {
        Matcher::role(Role::Primary).template(t)
    }

    #[test]
    fn verdict_examples() {
        let v = parse_verdict("Sure");
        assert_eq!(
            (v.value(), v.parse_rule()),
            (Confidence::Sure, ParseRule::ExactMatch)
        );
        let v = parse_verdict("Not Sure");
        assert_eq!(
            (v.value(), v.parse_rule()),
            (Confidence::NotSure, ParseRule::ExactMatch)
        );
        let v = parse_verdict("I think the answer is B");
        assert_eq!(
            (v.value(), v.parse_rule()),
            (Confidence::NotSure, ParseRule::Fallback)
        );
        let v = parse_verdict("  sure.\n");
        assert_eq!(
            (v.value(), v.parse_rule()),
            (Confidence::Sure, ParseRule::ExactMatch)
        );
        assert_eq!(v.raw_text(), "  sure.\n");
        let v = parse_verdict("Not sure about this one");
        assert_eq!(
            (v.value(), v.parse_rule()),
            (Confidence::NotSure, ParseRule::PrefixMatch)
        );
        let v = parse_verdict("");
        assert_eq!(
            (v.value(), v.parse_rule()),
            (Confidence::NotSure, ParseRule::Fallback)
        );
    }

    #[test]
    fn letter_extraction_examples() {
        let q = q4("q", "A");
        assert_eq!(extract_option_letter("B", &q), Some(label("B")));
        assert_eq!(
            extract_option_letter("The answer is (c)", &q),
            Some(label("C"))
        );
        assert_eq!(extract_option_letter("E", &q), None);
        assert_eq!(extract_option_letter("I'd pick d", &q), Some(label("D")));
        assert_eq!(extract_option_letter("", &q), None);
    }

    #[test]
    fn cot_extraction_prefers_final_marker() {
        let q = q4("q", "A");
        let text = "A patient with bleeding gums...\nOption B is wrong.\nAnswer: C";
        assert_eq!(extract_cot_answer(text, &q), Some(label("C")));
        assert_eq!(
            extract_cot_answer("the answer is (d).\nFinal answer: b", &q),
            Some(label("B"))
        );
        assert_eq!(extract_cot_answer("reasoning...\nD", &q), Some(label("D")));
        assert_eq!(extract_cot_answer("no idea", &q), None);
    }

    #[test]
    fn decision_json_examples() {
        let ok = parse_decision_json(
            r#"{"answer":"A","reasoning":"r","confidence_scores":{"A":70,"B":30}}"#,
        )
        .unwrap();
        assert_eq!(ok.candidate_label, CandidateLabel::A);
        assert_eq!(ok.reasoning, "r");
        assert_eq!(ok.confidence_scores, ConfidenceScores::new(70, 30).unwrap());

        assert_eq!(
            parse_decision_json(r#"{"answer":"A","confidence_scores":{"A":60,"B":50}}"#),
            Err(ParseFailure::SumNot100(110))
        );
        assert_eq!(
            parse_decision_json(r#"{"answer":"C","confidence_scores":{"A":60,"B":40}}"#),
            Err(ParseFailure::AnswerOutOfSpace("C".into()))
        );
        let repaired =
            parse_decision_json(r#"{"answer":"B","confidence_scores":{"B":65}}"#).unwrap();
        assert_eq!(
            repaired.confidence_scores,
            ConfidenceScores::new(35, 65).unwrap()
        );
        let fenced = "Let me think.\n```json\n{\"answer\": \"b\", \"reasoning\": \"x\", \"confidence_scores\": {\"A\": 10, \"B\": 90}}\n```\nDone.";
        assert_eq!(
            parse_decision_json(fenced).unwrap().candidate_label,
            CandidateLabel::B
        );
        let prose = "Final: {\"answer\": \"A\", \"reasoning\": \"has } brace\", \"confidence_scores\": {\"A\": 55, \"B\": 45}} ok";
        assert_eq!(parse_decision_json(prose).unwrap().reasoning, "has } brace");
    }

    #[test]
    fn candidate_map_uses_agent_slots() {
        let q = q4("q", "D");
        let c1 = CandidateAnswer::new(Agent::Agent1, label("B"), "B", &q).unwrap();
        let c2 = CandidateAnswer::new(Agent::Agent2, label("D"), "D", &q).unwrap();
        let map = CandidateMap::new(&c1, &c2);
        assert_eq!(map.resolve(CandidateLabel::A), label("B"));
        assert_eq!(map.resolve(CandidateLabel::B), label("D"));
    }

    #[tokio::test]
    async fn detect_confidence_uses_one_primary_call() {
        let mut s = MockScript::default();
        s.push(
            primary(TemplateId::ConfidenceV1),
            MockResponse::text("Not Sure"),
        );
        let e = engine(s);
        let v = e.detect_confidence(&q4("q", "A")).await.unwrap();
        assert_eq!(v.value(), Confidence::NotSure);
        assert_eq!(e.client().backend_calls(), 1);
    }

    #[tokio::test]
    async fn direct_answer_reasks_then_fails() {
        let mut s = MockScript::default();
        s.push(primary(TemplateId::DirectAnswerV1), MockResponse::text("E"));
        let e = engine(s);
        let err = e.answer_direct(&q4("q", "A")).await.unwrap_err();
        assert!(matches!(
            err,
            EngineError::UnparsableAnswer { attempts: 3, .. }
        ));
        assert_eq!(e.client().backend_calls(), 3);
    }

    #[tokio::test]
    async fn direct_answer_recovers_on_reask() {
        let mut s = MockScript::default();
        s.push(
            primary(TemplateId::DirectAnswerV1).reask(0),
            MockResponse::text("hmm"),
        )
        .push(
            primary(TemplateId::DirectAnswerV1),
            MockResponse::text("The answer is (c)"),
        );
        let e = engine(s);
        assert_eq!(e.answer_direct(&q4("q", "A")).await.unwrap(), label("C"));
    }

    #[tokio::test]
    async fn helpers_keep_agent_order_regardless_of_completion() {
        let s = MockScript::new(vec![
            MockRule::new(Matcher::role(Role::Helper1), MockResponse::text("D")).delayed(40),
            MockRule::new(Matcher::role(Role::Helper2), MockResponse::text("B")),
        ]);
        let e = engine(s);
        let c = e.consult_helpers(&q4("q", "A")).await.unwrap();
        assert_eq!(c.candidates[0].agent, Agent::Agent1);
        assert_eq!(c.candidates[0].chosen_label, label("D"));
        assert_eq!(c.candidates[1].agent, Agent::Agent2);
        assert_eq!(c.candidates[1].chosen_label, label("B"));
        assert_eq!(c.degradation, None);
    }

    #[tokio::test]
    async fn helper_failure_policy() {
        // (helper1 ok, helper2 ok) is covered above; enumerate the rest.
        let cases = [
            (true, false, Some(Degradation::Helper2Failed), "A", "A"),
            (false, true, Some(Degradation::Helper1Failed), "C", "C"),
            (false, false, Some(Degradation::BothHelpersFailed), "B", "B"),
        ];
        for (h1_ok, h2_ok, expected, l1, l2) in cases {
            let mut s = MockScript::default();
            s.push(
                Matcher::role(Role::Helper1),
                if h1_ok {
                    MockResponse::text("A")
                } else {
                    MockResponse::Fail(FailKind::Timeout)
                },
            )
            .push(
                Matcher::role(Role::Helper2),
                if h2_ok {
                    MockResponse::text("C")
                } else {
                    MockResponse::Fail(FailKind::Timeout)
                },
            )
            .push(primary(TemplateId::DirectAnswerV1), MockResponse::text("B"));
            let c = engine(s).consult_helpers(&q4("q", "A")).await.unwrap();
            assert_eq!(c.degradation, expected);
            assert_eq!(c.candidates[0].chosen_label, label(l1));
            assert_eq!(c.candidates[1].chosen_label, label(l2));
            assert_eq!(c.candidates[0].agent, Agent::Agent1);
            assert_eq!(c.candidates[1].agent, Agent::Agent2);
        }
    }

    #[tokio::test]
    async fn helper_timeout_degrades_to_survivor() {
        let s = MockScript::new(vec![
            MockRule::new(Matcher::role(Role::Helper1), MockResponse::text("A")),
            MockRule::new(Matcher::role(Role::Helper2), MockResponse::text("B")).delayed(5_000),
        ]);
        let mut cfg = config();
        cfg.helper2.decoding.timeout = Duration::from_millis(10);
        let e = Engine::new(cfg, Arc::new(Client::mock(s))).unwrap();
        let c = e.consult_helpers(&q4("q", "A")).await.unwrap();
        assert_eq!(c.degradation, Some(Degradation::Helper2Failed));
        assert_eq!(c.candidates[1].chosen_label, label("A"));
    }

    #[tokio::test]
    async fn synthesis_maps_candidate_b_to_agent2() {
        let mut s = MockScript::default();
        s.push(
            primary(TemplateId::SynthesisV1),
            MockResponse::text(
                r#"{"answer":"B","reasoning":"r","confidence_scores":{"A":20,"B":80}}"#,
            ),
        );
        let e = engine(s);
        let q = q4("q", "D");
        let cands = [
            CandidateAnswer::new(Agent::Agent1, label("B"), "B", &q).unwrap(),
            CandidateAnswer::new(Agent::Agent2, label("D"), "D", &q).unwrap(),
        ];
        let d = e.synthesize(&q, &cands).await.unwrap();
        assert_eq!(d.mapped_option, label("D"));
        assert!(!d.via_fallback);
    }

    #[tokio::test]
    async fn synthesis_falls_back_after_retries() {
        let mut s = MockScript::default();
        s.push(
            primary(TemplateId::SynthesisV1),
            MockResponse::text("not json"),
        )
        .push(primary(TemplateId::DirectAnswerV1), MockResponse::text("C"));
        let e = engine(s);
        let q = q4("q", "C");
        let cands = [
            CandidateAnswer::new(Agent::Agent1, label("A"), "A", &q).unwrap(),
            CandidateAnswer::new(Agent::Agent2, label("B"), "B", &q).unwrap(),
        ];
        let d = e.synthesize(&q, &cands).await.unwrap();
        assert!(d.via_fallback);
        assert_eq!(d.mapped_option, label("C"));
        assert_eq!(d.reasoning, FALLBACK_REASONING);
        assert_eq!(d.confidence_scores, ConfidenceScores::EVEN);
        // 1 ask + 2 re-asks, then one direct call.
        assert_eq!(e.client().backend_calls(), 4);
    }

    #[tokio::test]
    async fn direct_pathway_record() {
        let mut s = MockScript::default();
        s.push(
            primary(TemplateId::ConfidenceV1),
            MockResponse::text("Sure"),
        )
        .push(primary(TemplateId::DirectAnswerV1), MockResponse::text("B"));
        let r = engine(s).run_pipeline(&q4("q", "B")).await.unwrap();
        assert_eq!(r.pathway, Pathway::Direct);
        assert_eq!(r.final_answer, label("B"));
        assert!(r.correct);
        assert_eq!(r.primary_calls(), 2);
        assert_eq!(r.helper_calls(), 0);
        assert_eq!(r.call_log[0].template_id, TemplateId::ConfidenceV1);
        assert_eq!(r.timings.len(), r.call_log.len());
    }

    #[tokio::test]
    async fn collaborative_pathway_record() {
        let mut s = MockScript::default();
        s.push(
            primary(TemplateId::ConfidenceV1),
            MockResponse::text("Not Sure"),
        )
        .push(Matcher::role(Role::Helper1), MockResponse::text("B"))
        .push(Matcher::role(Role::Helper2), MockResponse::text("D"))
        .push(
            primary(TemplateId::SynthesisV1),
            MockResponse::text(
                r#"{"answer":"B","reasoning":"r","confidence_scores":{"A":30,"B":70}}"#,
            ),
        );
        let r = engine(s).run_pipeline(&q4("q", "D")).await.unwrap();
        assert_eq!(r.pathway, Pathway::Collaborative);
        assert_eq!(r.final_answer, label("D"));
        assert!(r.correct);
        assert_eq!(r.primary_calls(), 2);
        assert_eq!(r.helper_calls(), 2);
        r.validate().unwrap();
    }

    #[tokio::test]
    async fn confidence_failure_propagates() {
        let mut s = MockScript::default();
        s.push(Matcher::default(), MockResponse::Fail(FailKind::Http(500)));
        let err = engine(s).run_pipeline(&q4("q", "A")).await.unwrap_err();
        assert!(matches!(
            err,
            EngineError::Client {
                role: Role::Primary,
                ..
            }
        ));
    }

    #[tokio::test]
    async fn stage_budgets_cap_max_tokens() {
        let e = engine(MockScript::default());
        assert_eq!(
            e.endpoint(Role::Primary, Stage::Confidence)
                .decoding
                .max_tokens,
            64
        );
        assert_eq!(
            e.endpoint(Role::Primary, Stage::Direct).decoding.max_tokens,
            16
        );
        assert_eq!(
            e.endpoint(Role::Primary, Stage::Synthesis)
                .decoding
                .max_tokens,
            1024
        );
        assert_eq!(
            e.endpoint(Role::Helper2, Stage::Direct).decoding.max_tokens,
            16
        );
    }

    #[test]
    fn role_mismatch_is_rejected() {
        let mut cfg = config();
        cfg.helper1.role = Role::Helper2;
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::RoleMismatch {
                slot: "helper1",
                ..
            })
        ));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn verdict_parser_is_total_and_idempotent(s in "\\PC{0,40}") {
                let v = parse_verdict(&s);
                let norm = normalize_verdict_text(&s);
                prop_assert_eq!(normalize_verdict_text(&norm), norm.clone());
                let again = parse_verdict(&norm);
                prop_assert_eq!(again.value(), v.value());
                prop_assert_eq!(again.parse_rule(), v.parse_rule());
                if v.parse_rule() == ParseRule::Fallback {
                    prop_assert_eq!(v.value(), Confidence::NotSure);
                }
            }

            #[test]
            fn verdict_variants_with_noise(
                word in prop::sample::select(vec!["sure", "not sure"]),
                upper in any::<bool>(),
                lead in "[ \t\n]{0,3}",
                trail in "[.!?,;: \n]{0,4}",
            ) {
                let body = if upper { word.to_uppercase() } else { word.to_string() };
                let v = parse_verdict(&format!("{lead}{body}{trail}"));
                prop_assert_eq!(v.parse_rule(), ParseRule::ExactMatch);
                let expected = if word == "sure" { Confidence::Sure } else { Confidence::NotSure };
                prop_assert_eq!(v.value(), expected);
            }

            #[test]
            fn decision_scores_roundtrip(a in 0u32..=100, pick_b in any::<bool>()) {
                let b = 100 - a;
                let ans = if pick_b { "B" } else { "A" };
                let text = format!(r#"{{"answer":"{ans}","reasoning":"x","confidence_scores":{{"A":{a},"B":{b}}}}}"#);
                let p = parse_decision_json(&text).unwrap();
                prop_assert_eq!(p.confidence_scores.get(CandidateLabel::A), a);
                prop_assert_eq!(p.confidence_scores.get(CandidateLabel::B), b);
            }
        }
    }
}
