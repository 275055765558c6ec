//! End-to-end answering and accuracy evaluation over a labeled dataset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{Example, ExampleSet};
use crate::knowledge::{
    generate_knowledge, KgPromptConfig, KnowledgeBase, KnowledgeError, KnowledgeList,
};
use crate::llm::ChatGateway;
use crate::par::try_ordered_map;
use crate::reasoning::{
    build_ir_prompt, build_qa_prompt, predict, ChoiceScores, Mode, PredictionFlag, QaPromptConfig,
    ReasoningError,
};
use crate::retrieval::QueryEmbedder;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Precondition(String),
    #[error("{id}: {source}")]
    Knowledge {
        id: String,
        #[source]
        source: KnowledgeError,
    },
    #[error("{id}: {source}")]
    Reasoning {
        id: String,
        #[source]
        source: ReasoningError,
    },
    /// A query failed mid-run; `completed` holds the records that finished.
    #[error("run aborted after {} records: {source}", completed.len())]
    Aborted {
        completed: Vec<PredictionRecord>,
        #[source]
        source: Box<EvalError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: Mode,
    /// Demonstrations retrieved per query in zebra mode.
    pub k: usize,
    pub concurrency: usize,
    pub knowledge: KgPromptConfig,
    pub answering: QaPromptConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Zebra,
            k: 5,
            concurrency: 4,
            knowledge: KgPromptConfig::default(),
            answering: QaPromptConfig::default(),
        }
    }
}

/// What a run needs beyond configuration. `kb` and `embedder` are only
/// consulted in zebra mode.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub gateway: &'a dyn ChatGateway,
    pub kb: Option<&'a KnowledgeBase>,
    pub embedder: Option<&'a dyn QueryEmbedder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub mode: Mode,
    pub chosen: char,
    pub gold: Option<char>,
    pub scores: ChoiceScores,
    pub knowledge: Vec<String>,
    /// Ids of the retrieved demonstrations, best first.
    pub retrieval: Vec<String>,
    pub flags: Vec<PredictionFlag>,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.gold == Some(self.chosen)
    }
}

fn check_pipeline(pipeline: &Pipeline<'_>, cfg: &EvalConfig) -> Result<(), EvalError> {
    cfg.knowledge
        .validate()
        .map_err(|e| EvalError::Precondition(e.to_string()))?;
    cfg.answering
        .validate()
        .map_err(|e| EvalError::Precondition(e.to_string()))?;
    if cfg.mode == Mode::Zebra {
        if pipeline.kb.is_none() {
            return Err(EvalError::Precondition(
                "zebra mode needs a knowledge base".into(),
            ));
        }
        if pipeline.embedder.is_none() {
            return Err(EvalError::Precondition(
                "zebra mode needs a query embedder".into(),
            ));
        }
        if cfg.k == 0 {
            return Err(EvalError::Precondition("k must be at least 1".into()));
        }
    }
    Ok(())
}

/// Answer one example in the configured mode.
pub fn answer_one(
    pipeline: &Pipeline<'_>,
    ex: &Example,
    cfg: &EvalConfig,
) -> Result<PredictionRecord, EvalError> {
    check_pipeline(pipeline, cfg)?;
    answer_checked(pipeline, ex, cfg)
}

fn answer_checked(
    pipeline: &Pipeline<'_>,
    ex: &Example,
    cfg: &EvalConfig,
) -> Result<PredictionRecord, EvalError> {
    let query = ex.query_view();
    let mut flags = Vec::new();
    let mut retrieval = Vec::new();
    let knowledge = match cfg.mode {
        Mode::ZeroShot => KnowledgeList::default(),
        Mode::Oracle => {
            if ex.explanations.is_empty() {
                return Err(EvalError::Precondition(format!(
                    "{}: oracle mode needs stored explanations",
                    ex.id
                )));
            }
            KnowledgeList::new(&ex.explanations, usize::MAX)
        }
        Mode::Zebra => {
            let (Some(kb), Some(embedder)) = (pipeline.kb, pipeline.embedder) else {
                return Err(EvalError::Precondition(
                    "zebra mode needs a knowledge base".into(),
                ));
            };
            let outcome = generate_knowledge(
                pipeline.gateway,
                kb,
                embedder,
                &query,
                cfg.k,
                &cfg.knowledge,
            )
            .map_err(|source| EvalError::Knowledge {
                id: ex.id.clone(),
                source,
            })?;
            retrieval = outcome.hits.into_iter().map(|h| h.example_id).collect();
            if outcome.knowledge.is_empty() {
                flags.push(PredictionFlag::EmptyKnowledgeFallback);
            }
            outcome.knowledge
        }
    };
    let prompt = if knowledge.is_empty() {
        build_qa_prompt(&query, &cfg.answering)
    } else {
        build_ir_prompt(&query, &knowledge, &cfg.answering).expect("knowledge is non-empty")
    };
    let prediction =
        predict(pipeline.gateway, &prompt, &query, &cfg.answering).map_err(|source| {
            EvalError::Reasoning {
                id: ex.id.clone(),
                source,
            }
        })?;
    flags.extend(prediction.flags);
    Ok(PredictionRecord {
        id: ex.id.clone(),
        mode: cfg.mode,
        chosen: prediction.chosen,
        gold: ex.answer_label,
        scores: prediction.scores,
        knowledge: knowledge.items().to_vec(),
        retrieval,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

impl EvalReport {
    fn new(config: EvalConfig, records: Vec<PredictionRecord>) -> Self {
        let n = records.len();
        let correct = records.iter().filter(|r| r.is_correct()).count();
        let accuracy = if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        };
        Self {
            config,
            n,
            correct,
            accuracy,
            records,
        }
    }

    /// Summary document: config, n, correct and accuracy.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One JSON object per line, in dataset order.
    pub fn records_jsonl(&self) -> String {
        records_jsonl(&self.records)
    }
}

pub fn records_jsonl(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Answer every dataset entry and score against the gold labels. Records
/// come back in dataset order whatever the concurrency.
pub fn evaluate(
    dataset: &ExampleSet,
    pipeline: &Pipeline<'_>,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    check_pipeline(pipeline, cfg)?;
    let unlabeled: Vec<&str> = dataset
        .iter()
        .filter(|ex| ex.answer_label.is_none())
        .map(|ex| ex.id.as_str())
        .take(5)
        .collect();
    if !unlabeled.is_empty() {
        return Err(EvalError::Precondition(format!(
            "evaluation needs gold answers; missing for {}",
            unlabeled.join(", ")
        )));
    }
    if cfg.mode == Mode::Oracle {
        if let Some(ex) = dataset.iter().find(|ex| ex.explanations.is_empty()) {
            return Err(EvalError::Precondition(format!(
                "oracle mode needs explanations for every entry; {} has none",
                ex.id
            )));
        }
    }
    let records = answer_all_checked(dataset, pipeline, cfg)?;
    Ok(EvalReport::new(cfg.clone(), records))
}

/// Answer every entry (gold labels optional), in dataset order.
pub fn answer_all(
    dataset: &ExampleSet,
    pipeline: &Pipeline<'_>,
    cfg: &EvalConfig,
) -> Result<Vec<PredictionRecord>, EvalError> {
    check_pipeline(pipeline, cfg)?;
    answer_all_checked(dataset, pipeline, cfg)
}

fn answer_all_checked(
    dataset: &ExampleSet,
    pipeline: &Pipeline<'_>,
    cfg: &EvalConfig,
) -> Result<Vec<PredictionRecord>, EvalError> {
    try_ordered_map(dataset.examples(), cfg.concurrency, |_, ex| {
        answer_checked(pipeline, ex, cfg)
    })
    .map_err(|(done, source)| EvalError::Aborted {
        completed: done.into_iter().flatten().collect(),
        source: Box::new(source),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub accuracy: f64,
    pub n: usize,
}

/// Zebra-mode accuracy for each `k`.
pub fn sweep_k(
    dataset: &ExampleSet,
    pipeline: &Pipeline<'_>,
    ks: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>, EvalError> {
    ks.iter()
        .map(|&k| {
            let cfg = EvalConfig {
                mode: Mode::Zebra,
                k,
                ..cfg.clone()
            };
            let report = evaluate(dataset, pipeline, &cfg)?;
            Ok(SweepRow {
                k,
                accuracy: report.accuracy,
                n: report.n,
            })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,accuracy,n\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.k, r.accuracy, r.n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{GatewayError, MockGateway, MockReply, MockRule};
    use crate::retrieval::{EmbeddingProvider, EmbeddingTable, HashingProvider, ProviderQueries};

    fn dataset() -> ExampleSet {
        ExampleSet::from_examples(
            "dev",
            [
                Example::new("q1", "Where do fish live?", ["water", "sand"])
                    .with_answer('A')
                    .with_explanations(["Fish need water."]),
                Example::new("q2", "What melts ice?", ["cold", "heat"])
                    .with_answer('B')
                    .with_explanations(["Heat melts ice."]),
            ],
        )
        .unwrap()
    }

    fn gateway() -> MockGateway {
        MockGateway::new(
            vec![
                MockRule::contains("fish live?\nChoices", MockReply::text("A")),
                MockRule::contains("melts ice?\nChoices", MockReply::text("A")),
            ],
            3,
        )
    }

    #[test]
    fn zero_shot_accuracy() {
        let gw = gateway();
        let pipeline = Pipeline {
            gateway: &gw,
            kb: None,
            embedder: None,
        };
        let cfg = EvalConfig {
            mode: Mode::ZeroShot,
            ..EvalConfig::default()
        };
        let report = evaluate(&dataset(), &pipeline, &cfg).unwrap();
        assert_eq!((report.n, report.correct), (2, 1));
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.records[0].id, "q1");
        let line = report.records_jsonl();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(v["mode"], "zero_shot");
        assert_eq!(v["chosen"], "A");
        assert_eq!(v["scores"]["B"], -1e9);
    }

    #[test]
    fn zebra_needs_a_kb() {
        let gw = gateway();
        let pipeline = Pipeline {
            gateway: &gw,
            kb: None,
            embedder: None,
        };
        assert!(matches!(
            evaluate(&dataset(), &pipeline, &EvalConfig::default()),
            Err(EvalError::Precondition(_))
        ));
    }

    #[test]
    fn oracle_uses_stored_explanations() {
        let gw = gateway();
        let pipeline = Pipeline {
            gateway: &gw,
            kb: None,
            embedder: None,
        };
        let cfg = EvalConfig {
            mode: Mode::Oracle,
            ..EvalConfig::default()
        };
        let report = evaluate(&dataset(), &pipeline, &cfg).unwrap();
        assert_eq!(report.records[1].knowledge, ["Heat melts ice."]);
    }

    #[test]
    fn zebra_records_retrieval() {
        let set = dataset();
        let provider = HashingProvider::new(16, 0);
        let texts: Vec<String> = set.iter().map(Example::passage).collect();
        let table = EmbeddingTable::new(
            set.ids().map(String::from).collect(),
            provider.embed_batch(&texts).unwrap(),
        )
        .unwrap();
        let kb = KnowledgeBase::new(&set, &table).unwrap();
        let gw = gateway();
        let embedder = ProviderQueries(&provider);
        let pipeline = Pipeline {
            gateway: &gw,
            kb: Some(&kb),
            embedder: Some(&embedder),
        };
        let report = evaluate(&set, &pipeline, &EvalConfig::default()).unwrap();
        assert_eq!(report.records[0].retrieval, ["q2"]);
        // The mock's fallback reply has no list markers, so it parses as one item.
        assert_eq!(report.records[0].knowledge.len(), 1);
    }

    #[test]
    fn failure_aborts_with_partial_records() {
        struct FailOn(&'static str, MockGateway);
        impl ChatGateway for FailOn {
            fn model_name(&self) -> &str {
                "fail"
            }
            fn chat(
                &self,
                req: &crate::llm::ChatRequest,
            ) -> Result<crate::llm::ChatResponse, GatewayError> {
                if req.render().contains(self.0) {
                    Err(GatewayError::Auth("denied".into()))
                } else {
                    self.1.chat(req)
                }
            }
        }
        let gw = FailOn("melts", gateway());
        let pipeline = Pipeline {
            gateway: &gw,
            kb: None,
            embedder: None,
        };
        let cfg = EvalConfig {
            mode: Mode::ZeroShot,
            concurrency: 1,
            ..EvalConfig::default()
        };
        match evaluate(&dataset(), &pipeline, &cfg) {
            Err(EvalError::Aborted { completed, .. }) => assert_eq!(completed.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sweep_csv() {
        let rows = [SweepRow {
            k: 1,
            accuracy: 0.5,
            n: 2,
        }];
        assert_eq!(sweep_to_csv(&rows), "k,accuracy,n\n1,0.5,2\n");
    }
}
