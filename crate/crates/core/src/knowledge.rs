//! Knowledge generation: retrieve similar solved examples, show them to the
//! model as demonstrations, and parse the explanations it writes for a new
//! question.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{Example, ExampleSet, QueryView};
use crate::llm::{ChatGateway, ChatMessage, ChatPrompt, ChatRequest, GatewayError};
use crate::prompt::{
    fill_template, question_block, ACKNOWLEDGEMENT, KNOWLEDGE_CUE, KNOWLEDGE_SYSTEM_TEMPLATE,
};
use crate::retrieval::{EmbeddingTable, ExampleIndex, QueryEmbedder, RetrievalError, RetrievalHit};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("no demonstration examples")]
    NoExamples,
    #[error("demonstration {0:?} has no explanations")]
    NoExplanations(String),
    #[error("knowledge base has no entries with explanations")]
    EmptyKnowledgeBase,
    #[error("invalid knowledge config: {0}")]
    Config(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgPromptConfig {
    pub max_explanations_per_example: usize,
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// Must contain `{num_choices}`.
    pub system_template: String,
    /// Cap on parsed knowledge items.
    pub max_items: usize,
}

impl Default for KgPromptConfig {
    fn default() -> Self {
        Self {
            max_explanations_per_example: 10,
            temperature: 0.0,
            max_new_tokens: 256,
            system_template: KNOWLEDGE_SYSTEM_TEMPLATE.to_string(),
            max_items: 10,
        }
    }
}

impl KgPromptConfig {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if !self.system_template.contains("{num_choices}") {
            return Err(KnowledgeError::Config(
                "system_template lacks {num_choices}".into(),
            ));
        }
        if self.max_explanations_per_example == 0 || self.max_items == 0 {
            return Err(KnowledgeError::Config(
                "explanation caps must be positive".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(KnowledgeError::Config(
                "max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Ordered, deduplicated, non-empty explanation strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgeList(Vec<String>);

impl KnowledgeList {
    /// Trims, drops empties and repeats, keeps at most `cap`.
    pub fn new<I, S>(items: I, cap: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for item in items {
            let item = item.as_ref().trim();
            if item.is_empty() || !seen.insert(item.to_string()) {
                continue;
            }
            if out.len() == cap {
                break;
            }
            out.push(item.to_string());
        }
        Self(out)
    }

    pub fn items(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn knowledge_turn(explanations: &[String]) -> String {
    let mut out = String::from(KNOWLEDGE_CUE);
    for (i, e) in explanations.iter().enumerate() {
        out.push_str(&format!("\n{}. {e}", i + 1));
    }
    out
}

/// Few-shot knowledge prompt: system instructions, acknowledgement, one
/// user/assistant pair per demonstration, the target question and a trailing
/// assistant cue.
pub fn build_kg_prompt(
    examples: &[&Example],
    query: &QueryView,
    cfg: &KgPromptConfig,
) -> Result<ChatPrompt, KnowledgeError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(KnowledgeError::NoExamples);
    }
    let mut messages = vec![
        ChatMessage::system(fill_template(&cfg.system_template, &query.choices)),
        ChatMessage::assistant(ACKNOWLEDGEMENT),
    ];
    for ex in examples {
        if ex.explanations.is_empty() {
            return Err(KnowledgeError::NoExplanations(ex.id.clone()));
        }
        let shown = ex.explanations.len().min(cfg.max_explanations_per_example);
        messages.push(ChatMessage::user(question_block(&ex.question, &ex.choices)));
        messages.push(ChatMessage::assistant(knowledge_turn(
            &ex.explanations[..shown],
        )));
    }
    messages.push(ChatMessage::user(question_block(
        &query.question,
        &query.choices,
    )));
    messages.push(ChatMessage::assistant(KNOWLEDGE_CUE));
    Ok(ChatPrompt::new(messages))
}

fn strip_marker(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["-", "*", "•"] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim_start();
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim_start();
        }
    }
    line
}

/// Split a generation into knowledge items: one per line, enumeration and
/// bullet markers removed, the cue line dropped, duplicates removed.
pub fn parse_knowledge(text: &str, cap: usize) -> KnowledgeList {
    let items = text
        .lines()
        .filter(|l| !l.trim().eq_ignore_ascii_case(KNOWLEDGE_CUE))
        .map(strip_marker);
    KnowledgeList::new(items, cap)
}

/// Retrievable examples (those with explanations) plus their index.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    examples: ExampleSet,
    index: ExampleIndex,
    skipped: usize,
}

impl KnowledgeBase {
    /// Entries without explanations are left out of the index. Every
    /// remaining entry needs a passage vector in `passages`.
    pub fn new(set: &ExampleSet, passages: &EmbeddingTable) -> Result<Self, KnowledgeError> {
        let usable: Vec<Example> = set
            .iter()
            .filter(|ex| !ex.explanations.is_empty())
            .cloned()
            .collect();
        if usable.is_empty() {
            return Err(KnowledgeError::EmptyKnowledgeBase);
        }
        let skipped = set.len() - usable.len();
        let table = passages.select(usable.iter().map(|ex| ex.id.as_str()))?;
        let index = ExampleIndex::from_table(&table)?;
        let examples = ExampleSet::from_examples(set.source_name.clone(), usable)
            .expect("subset of a valid set has unique ids");
        Ok(Self {
            examples,
            index,
            skipped,
        })
    }

    pub fn examples(&self) -> &ExampleSet {
        &self.examples
    }

    pub fn index(&self) -> &ExampleIndex {
        &self.index
    }

    /// Entries dropped for lack of explanations.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Top-`k` entries for a query, never including the query's own id.
    pub fn retrieve(
        &self,
        embedder: &dyn QueryEmbedder,
        query: &QueryView,
        k: usize,
    ) -> Result<Vec<RetrievalHit>, KnowledgeError> {
        let vector = embedder.embed_query(query)?;
        let exclude = HashSet::from([query.id.clone()]);
        Ok(self.index.search(&vector, k, &exclude)?)
    }
}

/// What was retrieved and generated for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeOutcome {
    pub query_id: String,
    pub hits: Vec<RetrievalHit>,
    pub knowledge: KnowledgeList,
}

impl KnowledgeOutcome {
    pub fn is_empty(&self) -> bool {
        self.knowledge.is_empty()
    }
}

/// Retrieve `k` demonstrations and ask the model for knowledge about `query`.
/// With nothing to retrieve the outcome is empty and no call is made.
pub fn generate_knowledge(
    gateway: &dyn ChatGateway,
    kb: &KnowledgeBase,
    embedder: &dyn QueryEmbedder,
    query: &QueryView,
    k: usize,
    cfg: &KgPromptConfig,
) -> Result<KnowledgeOutcome, KnowledgeError> {
    let hits = kb.retrieve(embedder, query, k)?;
    if hits.is_empty() {
        return Ok(KnowledgeOutcome {
            query_id: query.id.clone(),
            hits,
            knowledge: KnowledgeList::default(),
        });
    }
    let demos: Vec<&Example> = hits
        .iter()
        .map(|h| {
            kb.examples
                .get(&h.example_id)
                .expect("index ids come from the set")
        })
        .collect();
    let prompt = build_kg_prompt(&demos, query, cfg)?;
    let request = ChatRequest::new(&prompt, cfg.temperature, cfg.max_new_tokens);
    let response = gateway.chat(&request)?;
    Ok(KnowledgeOutcome {
        query_id: query.id.clone(),
        hits,
        knowledge: parse_knowledge(&response.text, cfg.max_items),
    })
}
