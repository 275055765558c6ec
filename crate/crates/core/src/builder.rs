//! Silver knowledge-base construction: for each solved training example ask
//! the model for one sentence per choice, given the gold label, and store the
//! sentences as that example's explanations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kb::{Example, ExampleSet};
use crate::knowledge::KnowledgeList;
use crate::llm::{ChatGateway, ChatMessage, ChatPrompt, ChatRequest};
use crate::par::ordered_map;
use crate::prompt::{fill_template, question_block, SILVER_SYSTEM_TEMPLATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SilverConfig {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub max_explanations: usize,
    pub concurrency: usize,
    pub system_template: String,
}

impl Default for SilverConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 256,
            max_explanations: 10,
            concurrency: 4,
            system_template: SILVER_SYSTEM_TEMPLATE.to_string(),
        }
    }
}

/// Prompt for one solved example. Returns `None` without a gold label.
pub fn build_silver_prompt(ex: &Example, cfg: &SilverConfig) -> Option<ChatPrompt> {
    let gold = ex.answer_label?;
    Some(ChatPrompt::new(vec![
        ChatMessage::system(fill_template(&cfg.system_template, &ex.choices)),
        ChatMessage::user(format!(
            "{}\nCorrect answer:\n{gold}",
            question_block(&ex.question, &ex.choices)
        )),
    ]))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SilverParse {
    /// Sentences per label, in output order.
    pub buckets: BTreeMap<char, Vec<String>>,
    /// Labels with no sentence.
    pub missing: Vec<char>,
}

fn label_header(line: &str, labels: &[char]) -> Option<(char, String)> {
    let mut chars = line.chars();
    let label = chars.next()?;
    if !labels.contains(&label) {
        return None;
    }
    let rest = chars.as_str();
    let body = rest
        .strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .or_else(|| rest.strip_prefix(':'))?;
    if !(body.is_empty() || body.starts_with(char::is_whitespace)) {
        return None;
    }
    Some((label, body.trim().to_string()))
}

/// Split a silver generation into per-label buckets. Lines before the first
/// label header are ignored; later unlabeled lines extend the current bucket.
pub fn parse_silver(text: &str, labels: &[char]) -> SilverParse {
    let mut buckets: BTreeMap<char, Vec<String>> = BTreeMap::new();
    let mut current = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some((label, body)) = label_header(line, labels) {
            current = Some(label);
            let bucket = buckets.entry(label).or_default();
            if !body.is_empty() {
                bucket.push(body);
            }
        } else if let Some(label) = current {
            buckets.entry(label).or_default().push(line.to_string());
        }
    }
    buckets.retain(|_, v| !v.is_empty());
    let missing = labels
        .iter()
        .filter(|l| !buckets.contains_key(l))
        .copied()
        .collect();
    SilverParse { buckets, missing }
}

/// Flatten buckets into an explanation list: the gold bucket first, then the
/// others in label order.
pub fn order_explanations(parse: &SilverParse, gold: char, cap: usize) -> KnowledgeList {
    let gold_items = parse.buckets.get(&gold).into_iter().flatten();
    let others = parse
        .buckets
        .iter()
        .filter(|(l, _)| **l != gold)
        .flat_map(|(_, v)| v);
    KnowledgeList::new(gold_items.chain(others), cap)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildFailure {
    pub id: String,
    pub reason: String,
}

pub fn failures_jsonl(failures: &[BuildFailure]) -> String {
    failures
        .iter()
        .map(|f| serde_json::to_string(f).expect("failure serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct KbBuildOutcome {
    pub kb: ExampleSet,
    pub failures: Vec<BuildFailure>,
    /// Entries whose output lacked some labels (kept, not failed).
    pub incomplete: Vec<(String, Vec<char>)>,
}

enum Built {
    Ok(Example, Vec<char>),
    Failed(BuildFailure),
}

fn build_one(gateway: &dyn ChatGateway, ex: &Example, cfg: &SilverConfig) -> Built {
    let fail = |reason: String| {
        Built::Failed(BuildFailure {
            id: ex.id.clone(),
            reason,
        })
    };
    let (Some(gold), Some(prompt)) = (ex.answer_label, build_silver_prompt(ex, cfg)) else {
        return fail("no gold answer".into());
    };
    let request = ChatRequest::new(&prompt, cfg.temperature, cfg.max_new_tokens);
    let text = match gateway.chat(&request) {
        Ok(resp) => resp.text,
        Err(e) => return fail(e.to_string()),
    };
    let parse = parse_silver(&text, &ex.labels());
    let explanations = order_explanations(&parse, gold, cfg.max_explanations);
    if explanations.is_empty() {
        return fail("no explanations parsed from output".into());
    }
    let mut out = ex.clone();
    out.explanations = explanations.items().to_vec();
    Built::Ok(out, parse.missing)
}

/// Generate explanations for every example of `dataset`. Failed entries are
/// left out of the knowledge base and listed in `failures`.
pub fn generate_kb(
    dataset: &ExampleSet,
    gateway: &dyn ChatGateway,
    cfg: &SilverConfig,
) -> KbBuildOutcome {
    let built = ordered_map(dataset.examples(), cfg.concurrency, |_, ex| {
        build_one(gateway, ex, cfg)
    });
    let mut examples = Vec::new();
    let mut failures = Vec::new();
    let mut incomplete = Vec::new();
    for b in built {
        match b {
            Built::Ok(ex, missing) => {
                if !missing.is_empty() {
                    incomplete.push((ex.id.clone(), missing));
                }
                examples.push(ex);
            }
            Built::Failed(f) => failures.push(f),
        }
    }
    let kb = ExampleSet::from_examples(dataset.source_name.clone(), examples)
        .expect("ids unique in the source set");
    KbBuildOutcome {
        kb,
        failures,
        incomplete,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockGateway, MockReply, MockRule};

    fn example() -> Example {
        Example::new("e1", "Where do fish live?", ["sand", "water", "air"]).with_answer('B')
    }

    #[test]
    fn silver_prompt_text() {
        let p = build_silver_prompt(&example(), &SilverConfig::default()).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(
            p.messages[1].content,
            "Question:\nWhere do fish live?\nChoices:\nA. sand\nB. water\nC. air\nCorrect answer:\nB"
        );
        assert!(build_silver_prompt(
            &Example::new("x", "q", ["a", "b"]),
            &SilverConfig::default()
        )
        .is_none());
    }

    #[test]
    fn parse_buckets() {
        let text = "Sure, here you go:\nA. Sand is dry land.\nB. Fish breathe in water.\nGills need water.\nD. not a label\nC: Air has no water.";
        let p = parse_silver(text, &['A', 'B', 'C']);
        assert_eq!(p.buckets[&'A'], ["Sand is dry land."]);
        assert_eq!(
            p.buckets[&'B'],
            [
                "Fish breathe in water.",
                "Gills need water.",
                "D. not a label"
            ]
        );
        assert_eq!(p.buckets[&'C'], ["Air has no water."]);
        assert!(p.missing.is_empty());
        let ordered = order_explanations(&p, 'B', 10);
        assert_eq!(ordered.items()[0], "Fish breathe in water.");
        assert_eq!(ordered.items()[3], "Sand is dry land.");
    }

    #[test]
    fn missing_labels_are_reported() {
        let p = parse_silver("A. only one", &['A', 'B']);
        assert_eq!(p.missing, ['B']);
        assert!(parse_silver("Apples are red.", &['A']).buckets.is_empty());
    }

    #[test]
    fn failures_go_to_the_manifest() {
        let set = ExampleSet::from_examples(
            "train",
            [
                example(),
                Example::new("e2", "Silent?", ["yes", "no"]).with_answer('A'),
                Example::new("e3", "No gold?", ["yes", "no"]),
            ],
        )
        .unwrap();
        let gw = MockGateway::new(
            vec![
                MockRule::contains(
                    "fish",
                    MockReply::text("A. Sand is dry.\nB. Fish need water."),
                ),
                MockRule::contains("Silent", MockReply::text("")),
            ],
            0,
        );
        let out = generate_kb(&set, &gw, &SilverConfig::default());
        assert_eq!(out.kb.len(), 1);
        assert_eq!(
            out.kb.get("e1").unwrap().explanations[0],
            "Fish need water."
        );
        assert_eq!(out.incomplete, [("e1".to_string(), vec!['C'])]);
        let ids: Vec<_> = out.failures.iter().map(|f| f.id.as_str()).collect();
        assert_eq!(ids, ["e2", "e3"]);
    }
}
