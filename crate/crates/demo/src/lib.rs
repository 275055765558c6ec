//! Browser bindings. Every export takes plain strings and returns a JSON or
//! text string, so the page needs no generated types.

use std::collections::HashSet;

use serde_json::json;
use wasm_bindgen::prelude::*;
use zebra_core::builder::{build_silver_prompt, SilverConfig};
use zebra_core::kb::{read_examples, Example, ExampleSet, QueryView};
use zebra_core::knowledge::{build_kg_prompt, KgPromptConfig, KnowledgeList};
use zebra_core::reasoning::{build_ir_prompt, build_qa_prompt, QaPromptConfig};
use zebra_core::retrieval::{embed_passages, ExampleIndex, HashingProvider};
use zebra_core::trainer::nce_with_sim_grad;

fn parse_set(jsonl: &str, name: &str) -> Result<ExampleSet, String> {
    read_examples(jsonl.as_bytes(), name).map_err(|e| e.to_string())
}

fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

/// Top-k entries of a toy knowledge base for a question, using the hash
/// encoder. `choices` holds one option per line.
#[wasm_bindgen]
pub fn retrieve(
    kb_jsonl: &str,
    question: &str,
    choices: &str,
    k: usize,
    dim: usize,
    seed: u32,
) -> Result<String, String> {
    if dim == 0 {
        return Err("dimension must be positive".into());
    }
    let set = parse_set(kb_jsonl, "kb")?;
    let encoder = HashingProvider::new(dim, seed as u64);
    let table = embed_passages(&encoder, &set).map_err(|e| e.to_string())?;
    let index = ExampleIndex::from_table(&table).map_err(|e| e.to_string())?;
    let options: Vec<&str> = choices
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let query = QueryView::new("query", question.trim(), options);
    let vector = encoder.embed_one(&query.serialize());
    let hits = index
        .search(&vector, k, &HashSet::new())
        .map_err(|e| e.to_string())?;
    let rows: Vec<_> = hits
        .iter()
        .map(|h| {
            let ex = set.get(&h.example_id);
            json!({
                "id": h.example_id,
                "score": h.score,
                "question": ex.map(|e| e.question.as_str()),
                "explanations": ex.map(|e| &e.explanations),
            })
        })
        .collect();
    Ok(json!({ "query": query.serialize(), "hits": rows }).to_string())
}

/// Loss and its derivatives with respect to each similarity.
#[wasm_bindgen]
pub fn nce(positives: &str, negatives: &str) -> Result<String, String> {
    let pos = parse_numbers(positives)?;
    let neg = parse_numbers(negatives)?;
    let (loss, d_pos, d_neg) = nce_with_sim_grad(&pos, &neg).map_err(|e| e.to_string())?;
    Ok(json!({ "loss": loss, "d_pos": d_pos, "d_neg": d_neg }).to_string())
}

/// Rendered prompt of the given kind (`kg`, `qa`, `ir` or `silver`). The
/// first line of `examples_jsonl` is the target; the rest are demonstrations.
#[wasm_bindgen]
pub fn render_prompt(kind: &str, examples_jsonl: &str) -> Result<String, String> {
    let set = parse_set(examples_jsonl, "examples")?;
    let (target, demos): (&Example, Vec<&Example>) = match set.examples() {
        [first, rest @ ..] => (first, rest.iter().collect()),
        [] => return Err("need at least one example".into()),
    };
    let q = target.query_view();
    let qa = QaPromptConfig::default();
    let prompt = match kind {
        "kg" => {
            build_kg_prompt(&demos, &q, &KgPromptConfig::default()).map_err(|e| e.to_string())?
        }
        "qa" => build_qa_prompt(&q, &qa),
        "ir" => build_ir_prompt(&q, &KnowledgeList::new(&target.explanations, 10), &qa)
            .map_err(|e| e.to_string())?,
        "silver" => build_silver_prompt(target, &SilverConfig::default())
            .ok_or("the target needs an answer label for a silver prompt")?,
        other => return Err(format!("unknown prompt kind {other:?}")),
    };
    Ok(prompt.render())
}
