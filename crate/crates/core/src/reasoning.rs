//! Answer selection: build the zero-shot or knowledge-informed prompt, score
//! each choice label by its next-token log-probability and take the argmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::QueryView;
use crate::knowledge::KnowledgeList;
use crate::llm::{
    fill_label_logprobs, first_label_token, ChatGateway, ChatMessage, ChatPrompt, ChatRequest,
    GatewayError, LABEL_SENTINEL,
};
use crate::prompt::{
    fill_template, question_block, ACKNOWLEDGEMENT, ANSWER_CUE, INFORMED_SYSTEM_TEMPLATE,
    QA_SYSTEM_TEMPLATE,
};

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("knowledge-informed prompt needs at least one explanation")]
    EmptyKnowledge,
    #[error("invalid reasoning config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaPromptConfig {
    pub qa_system_template: String,
    pub informed_system_template: String,
    /// Token budget for the greedy fallback when logprobs are unavailable.
    pub fallback_max_new_tokens: u32,
}

impl Default for QaPromptConfig {
    fn default() -> Self {
        Self {
            qa_system_template: QA_SYSTEM_TEMPLATE.to_string(),
            informed_system_template: INFORMED_SYSTEM_TEMPLATE.to_string(),
            fallback_max_new_tokens: 8,
        }
    }
}

impl QaPromptConfig {
    pub fn validate(&self) -> Result<(), ReasoningError> {
        for (name, t) in [
            ("qa_system_template", &self.qa_system_template),
            ("informed_system_template", &self.informed_system_template),
        ] {
            if !t.contains("{num_choices}") || !t.contains("{labels}") {
                return Err(ReasoningError::Config(format!(
                    "{name} needs {{num_choices}} and {{labels}}"
                )));
            }
        }
        if self.fallback_max_new_tokens == 0 {
            return Err(ReasoningError::Config(
                "fallback_max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn answer_prompt(system: String, user: String) -> ChatPrompt {
    ChatPrompt::new(vec![
        ChatMessage::system(system),
        ChatMessage::assistant(ACKNOWLEDGEMENT),
        ChatMessage::user(user),
        ChatMessage::assistant(ANSWER_CUE),
    ])
}

/// Zero-shot answering prompt.
pub fn build_qa_prompt(query: &QueryView, cfg: &QaPromptConfig) -> ChatPrompt {
    answer_prompt(
        fill_template(&cfg.qa_system_template, &query.choices),
        question_block(&query.question, &query.choices),
    )
}

/// Answering prompt with the knowledge list appended to the question.
pub fn build_ir_prompt(
    query: &QueryView,
    knowledge: &KnowledgeList,
    cfg: &QaPromptConfig,
) -> Result<ChatPrompt, ReasoningError> {
    if knowledge.is_empty() {
        return Err(ReasoningError::EmptyKnowledge);
    }
    let user = format!(
        "{}\nExplanations\n{}",
        question_block(&query.question, &query.choices),
        knowledge.items().join("\n")
    );
    Ok(answer_prompt(
        fill_template(&cfg.informed_system_template, &query.choices),
        user,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    Zebra,
    /// Uses the dataset's own explanations instead of generated ones.
    Oracle,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero_shot",
            Mode::Zebra => "zebra",
            Mode::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero_shot" | "zero-shot" => Ok(Mode::ZeroShot),
            "zebra" => Ok(Mode::Zebra),
            "oracle" => Ok(Mode::Oracle),
            other => Err(format!("unknown mode {other:?} (zero_shot, zebra, oracle)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionFlag {
    /// Scores came from greedy generation, not logprobs.
    FallbackScored,
    /// No candidate label received a real score.
    Unconfident,
    /// Zebra mode produced no knowledge, so the zero-shot prompt was used.
    EmptyKnowledgeFallback,
}

/// Log-probability per candidate label, in label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChoiceScores(BTreeMap<char, f64>);

impl ChoiceScores {
    pub fn new(scores: BTreeMap<char, f64>) -> Self {
        Self(scores)
    }

    pub fn get(&self, label: char) -> Option<f64> {
        self.0.get(&label).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, f64)> + '_ {
        self.0.iter().map(|(l, s)| (*l, *s))
    }

    pub fn as_map(&self) -> &BTreeMap<char, f64> {
        &self.0
    }

    /// At least one label scored above the sentinel.
    pub fn is_confident(&self) -> bool {
        self.0.values().any(|&s| s > LABEL_SENTINEL)
    }
}

/// Highest-scoring label; the earliest label wins ties.
pub fn select_answer(scores: &ChoiceScores) -> Option<char> {
    let mut best: Option<(char, f64)> = None;
    for (label, score) in scores.iter() {
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((label, score));
        }
    }
    best.map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChoices {
    pub scores: ChoiceScores,
    pub flags: Vec<PredictionFlag>,
}

fn from_generation(text: &str, labels: &[char]) -> BTreeMap<char, f64> {
    let chosen = first_label_token(text, labels);
    labels
        .iter()
        .map(|&l| {
            (
                l,
                if Some(l) == chosen {
                    0.0
                } else {
                    LABEL_SENTINEL
                },
            )
        })
        .collect()
}

/// Score `labels` as continuations of `prompt`. Models without logprob
/// support are asked to generate greedily instead; the first label in the
/// output gets 0 and every other label the sentinel.
pub fn score_choices(
    gateway: &dyn ChatGateway,
    prompt: &ChatPrompt,
    labels: &[char],
    cfg: &QaPromptConfig,
) -> Result<ScoredChoices, ReasoningError> {
    let request = ChatRequest::new(prompt, 0.0, 1).with_label_logprobs(labels.to_vec());
    let mut flags = Vec::new();
    let map = match gateway.chat(&request) {
        Ok(resp) => match resp.label_logprobs {
            Some(found) => fill_label_logprobs(&found, labels),
            None => {
                flags.push(PredictionFlag::FallbackScored);
                from_generation(&resp.text, labels)
            }
        },
        Err(e) if e.is_logprobs_unsupported() => {
            flags.push(PredictionFlag::FallbackScored);
            let greedy = ChatRequest::new(prompt, 0.0, cfg.fallback_max_new_tokens);
            from_generation(&gateway.chat(&greedy)?.text, labels)
        }
        Err(e) => return Err(e.into()),
    };
    let scores = ChoiceScores::new(map);
    if !scores.is_confident() {
        flags.push(PredictionFlag::Unconfident);
    }
    Ok(ScoredChoices { scores, flags })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerPrediction {
    pub chosen: char,
    pub scores: ChoiceScores,
    pub flags: Vec<PredictionFlag>,
}

/// Score and select. An unconfident prediction still picks a label (the
/// first, since every score ties at the sentinel).
pub fn predict(
    gateway: &dyn ChatGateway,
    prompt: &ChatPrompt,
    query: &QueryView,
    cfg: &QaPromptConfig,
) -> Result<AnswerPrediction, ReasoningError> {
    let labels = query.labels();
    let scored = score_choices(gateway, prompt, &labels, cfg)?;
    let chosen = select_answer(&scored.scores).unwrap_or('A');
    Ok(AnswerPrediction {
        chosen,
        scores: scored.scores,
        flags: scored.flags,
    })
}
