//! Prompt rendering.
//!
//! Templates are frozen text resources compiled into the crate. Slots are
//! written `{name}` with a lowercase identifier; any other brace is literal,
//! which keeps the JSON block in the synthesis template intact.

use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{CandidateAnswer, OptionLabel, Question};

/// Rendered in place of an empty context.
pub const EMPTY_CONTEXT: &str = "N/A";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    ConfidenceV1,
    SynthesisV1,
    DirectAnswerV1,
    CotAnswerV1,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::ConfidenceV1,
        TemplateId::SynthesisV1,
        TemplateId::DirectAnswerV1,
        TemplateId::CotAnswerV1,
    ];

    /// The frozen template text, placeholders included.
    pub fn text(self) -> &'static str {
        self.template().text
    }

    /// Short name accepted by `inspect templates <name>`.
    pub fn short_name(self) -> &'static str {
        match self {
            TemplateId::ConfidenceV1 => "confidence",
            TemplateId::SynthesisV1 => "synthesis",
            TemplateId::DirectAnswerV1 => "direct",
            TemplateId::CotAnswerV1 => "cot",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Self> {
        let name = name.trim();
        Self::ALL.into_iter().find(|t| {
            t.short_name().eq_ignore_ascii_case(name) || format!("{t:?}").eq_ignore_ascii_case(name)
        })
    }

    /// Hex SHA-256 of the frozen text; recorded in run manifests.
    pub fn version_digest(self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))
    }

    fn template(self) -> &'static Template {
        match self {
            TemplateId::ConfidenceV1 => &CONFIDENCE,
            TemplateId::SynthesisV1 => &SYNTHESIS,
            TemplateId::DirectAnswerV1 => &DIRECT,
            TemplateId::CotAnswerV1 => &COT,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug)]
enum Segment {
    Literal(&'static str),
    Slot(&'static str),
}

#[derive(Debug)]
struct Template {
    text: &'static str,
    segments: Vec<Segment>,
}

impl Template {
    fn parse(raw: &'static str) -> Self {
        let text = raw.strip_suffix('\n').unwrap_or(raw);
        let mut segments = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let name_len = after
                .find(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'))
                .unwrap_or(after.len());
            if name_len > 0 && after[name_len..].starts_with('}') {
                if open > 0 {
                    segments.push(Segment::Literal(&rest[..open]));
                }
                segments.push(Segment::Slot(&after[..name_len]));
                rest = &after[name_len + 1..];
            } else {
                segments.push(Segment::Literal(&rest[..=open]));
                rest = after;
            }
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest));
        }
        Self { text, segments }
    }

    fn slots(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(name) => Some(*name),
            Segment::Literal(_) => None,
        })
    }

    /// Single pass: substituted values are never rescanned for slots.
    fn render(&self, id: TemplateId, values: &[(&str, &str)]) -> PromptText {
        let lookup = |name: &str| {
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| panic!("template {id} has no value for slot `{name}`"))
        };
        let mut body = String::with_capacity(self.text.len() * 2);
        let mut digest = Sha256::new();
        digest.update(format!("{id:?}").as_bytes());
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => body.push_str(s),
                Segment::Slot(name) => {
                    let value = lookup(name);
                    body.push_str(value);
                    digest.update([0xff]);
                    digest.update(name.as_bytes());
                    digest.update((value.len() as u64).to_be_bytes());
                    digest.update(value.as_bytes());
                }
            }
        }
        PromptText {
            body,
            template_id: id,
            slot_digest: hex::encode(digest.finalize()),
        }
    }
}

static CONFIDENCE: LazyLock<Template> =
    LazyLock::new(|| Template::parse(include_str!("../templates/confidence_v1.txt")));
static SYNTHESIS: LazyLock<Template> =
    LazyLock::new(|| Template::parse(include_str!("../templates/synthesis_v1.txt")));
static DIRECT: LazyLock<Template> =
    LazyLock::new(|| Template::parse(include_str!("../templates/direct_answer_v1.txt")));
static COT: LazyLock<Template> =
    LazyLock::new(|| Template::parse(include_str!("../templates/cot_answer_v1.txt")));

/// A fully rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub body: String,
    pub template_id: TemplateId,
    /// Hex SHA-256 over the template id and the substituted slot values.
    pub slot_digest: String,
}

impl PromptText {
    /// The same prompt addressed as the n-th re-ask after an unusable reply.
    ///
    /// The body is unchanged; only the digest moves so the re-ask is cached
    /// under its own key.
    pub fn reask(&self, n: u32) -> PromptText {
        if n == 0 {
            return self.clone();
        }
        let mut h = Sha256::new();
        h.update(self.slot_digest.as_bytes());
        h.update(b"/reask/");
        h.update(n.to_be_bytes());
        PromptText {
            body: self.body.clone(),
            template_id: self.template_id,
            slot_digest: hex::encode(h.finalize()),
        }
    }
}

fn render_context(q: &Question) -> &str {
    if q.context().trim().is_empty() {
        EMPTY_CONTEXT
    } else {
        q.context()
    }
}

/// One `LABEL. text` line per option.
pub fn render_options(q: &Question) -> String {
    q.options()
        .iter()
        .map(|o| format!("{}. {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_choice(q: &Question, label: OptionLabel) -> String {
    let text = q.option(label).map(|o| o.text.as_str()).unwrap_or_default();
    format!("{label}. {text}")
}

/// "A or B", "A, B, or C", ...
pub fn letter_list(q: &Question) -> String {
    let letters: Vec<String> = q.labels().map(|l| l.to_string()).collect();
    match letters.as_slice() {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} or {b}"),
        [init @ .., last] => format!("{}, or {last}", init.join(", ")),
    }
}

pub fn render_confidence_prompt(q: &Question) -> PromptText {
    let options = render_options(q);
    CONFIDENCE.render(
        TemplateId::ConfidenceV1,
        &[
            ("question", q.stem()),
            ("context", render_context(q)),
            ("options", &options),
        ],
    )
}

/// Agent order is preserved as given; identical choices are both listed.
pub fn render_synthesis_prompt(
    q: &Question,
    first: &CandidateAnswer,
    second: &CandidateAnswer,
) -> PromptText {
    let options = render_options(q);
    let option1 = render_choice(q, first.chosen_label);
    let option2 = render_choice(q, second.chosen_label);
    SYNTHESIS.render(
        TemplateId::SynthesisV1,
        &[
            ("question", q.stem()),
            ("context", render_context(q)),
            ("options", &options),
            ("option1", &option1),
            ("option2", &option2),
        ],
    )
}

pub fn render_direct_answer_prompt(q: &Question) -> PromptText {
    let options = render_options(q);
    let letters = letter_list(q);
    DIRECT.render(
        TemplateId::DirectAnswerV1,
        &[
            ("question", q.stem()),
            ("context", render_context(q)),
            ("options", &options),
            ("letters", &letters),
        ],
    )
}

/// Single-model chain-of-thought prompt used by the CoT ablation.
pub fn render_cot_answer_prompt(q: &Question) -> PromptText {
    let options = render_options(q);
    let letters = letter_list(q);
    COT.render(
        TemplateId::CotAnswerV1,
        &[
            ("question", q.stem()),
            ("context", render_context(q)),
            ("options", &options),
            ("letters", &letters),
        ],
    )
}

/// Slot names a template expects, in order of appearance.
pub fn template_slots(id: TemplateId) -> Vec<&'static str> {
    id.template().slots().collect()
}
