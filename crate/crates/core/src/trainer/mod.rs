//! Contrastive training of a linear retrieval adapter over frozen base
//! embeddings.

mod adapter;
mod batch;
mod loss;
mod radam;

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{ExampleSet, QueryView};
use crate::retrieval::{
    embed_texts, Embedding, EmbeddingProvider, EmbeddingTable, ExampleIndex, QueryEmbedder,
    RetrievalError,
};

pub use adapter::{loss_and_grad, mean_loss, AdapterWeights, QueryTerms};
pub use batch::{
    assemble_batch, augment_passages, mine_positives, topic_key, BatchEntry, Passage, TrainingBatch,
};
pub use loss::{nce_from_sims, nce_loss, nce_with_sim_grad, LossError};
pub use radam::RAdam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("untopiced query {0:?}")]
    UntopicedQuery(String),
    #[error("unusable batch: {0}")]
    UnusableBatch(String),
    #[error("unknown example id {0:?}")]
    UnknownId(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub positive_cap: usize,
    pub negative_cap: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Augmented variants added per mined positive (needs an embedding
    /// provider at training time).
    pub augmentations_per_positive: usize,
    /// Output dimension; defaults to the base dimension.
    pub d_out: Option<usize>,
    pub init_noise: f64,
    /// Validation loss is computed every this many steps when a validation
    /// split is supplied.
    pub validation_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            max_steps: 500,
            positive_cap: 64,
            negative_cap: 200,
            batch_size: 8,
            seed: 0,
            augmentations_per_positive: 1,
            d_out: None,
            init_noise: 0.01,
            validation_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.positive_cap == 0 || self.negative_cap == 0 {
            return bad("positive_cap and negative_cap must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.validation_every == 0 {
            return bad("validation_every must be at least 1");
        }
        if self.d_out == Some(0) {
            return bad("d_out must be positive");
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return bad("init_noise must be non-negative");
        }
        Ok(())
    }

    /// Linear decay to zero over `max_steps`; `step` is zero-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.max_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (self.max_steps - step.min(self.max_steps)) as f64
            / self.max_steps as f64
    }
}

/// splitmix64 finalizer over `seed + salt`, for deriving independent streams.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for row in trace {
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.lr));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best weights by validation loss when a validation split was given,
    /// otherwise the final weights.
    pub weights: AdapterWeights,
    pub final_weights: AdapterWeights,
    pub trace: Vec<TraceRow>,
    /// `(step, mean validation loss)`; step 0 is the initialization.
    pub validation: Vec<(usize, f64)>,
    pub best_step: Option<usize>,
}

/// Optional collaborators for [`train_adapter`].
#[derive(Default, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub validation: Option<&'a ExampleSet>,
    /// Embeds augmented passage variants into the base space.
    pub augmenter: Option<&'a dyn EmbeddingProvider>,
}

/// Resolves batch passages to base vectors, embedding augmented variants on
/// first use.
struct PassageVectors<'a> {
    base: &'a EmbeddingTable,
    augmenter: Option<&'a dyn EmbeddingProvider>,
    variants: HashMap<String, Embedding>,
}

impl<'a> PassageVectors<'a> {
    fn prepare(&mut self, batch: &TrainingBatch) -> Result<(), TrainError> {
        let mut missing: Vec<String> = Vec::new();
        let mut queued = HashSet::new();
        for entry in &batch.entries {
            self.base.require(&entry.query_id)?;
            for p in entry.positives.iter().chain(&entry.negatives) {
                match &p.variant {
                    None => {
                        self.base.require(&p.source_id)?;
                    }
                    Some(text) => {
                        if !self.variants.contains_key(text) && queued.insert(text.clone()) {
                            missing.push(text.clone());
                        }
                    }
                }
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        let provider = self.augmenter.ok_or_else(|| {
            TrainError::Config("augmented passages need an embedding provider".into())
        })?;
        let vectors = embed_texts(provider, &missing)?;
        if let Some(v) = vectors.first() {
            if v.dim() != self.base.dim() {
                return Err(RetrievalError::DimMismatch {
                    position: 0,
                    expected: self.base.dim(),
                    actual: v.dim(),
                }
                .into());
            }
        }
        self.variants.extend(missing.into_iter().zip(vectors));
        Ok(())
    }

    fn get(&self, p: &Passage) -> &[f64] {
        match &p.variant {
            None => self.base.get(&p.source_id).expect("prepared").values(),
            Some(text) => self.variants[text].values(),
        }
    }

    fn terms<'b>(&'b self, batch: &TrainingBatch) -> Vec<QueryTerms<'b>> {
        batch
            .entries
            .iter()
            .map(|entry| QueryTerms {
                query: self.base.get(&entry.query_id).expect("prepared").values(),
                positives: entry.positives.iter().map(|p| self.get(p)).collect(),
                negatives: entry.negatives.iter().map(|p| self.get(p)).collect(),
            })
            .collect()
    }
}

/// Ids with a topic and at least one topic-mate, in set order.
pub fn trainable_ids(set: &ExampleSet) -> Vec<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in set {
        if let Some(t) = topic_key(ex) {
            *counts.entry(t).or_default() += 1;
        }
    }
    set.iter()
        .filter(|ex| topic_key(ex).is_some_and(|t| counts[&t] >= 2))
        .map(|ex| ex.id.clone())
        .collect()
}

fn validation_batches(
    set: &ExampleSet,
    cfg: &TrainConfig,
) -> Result<Vec<TrainingBatch>, TrainError> {
    let ids = trainable_ids(set);
    let mut batches = Vec::new();
    for (i, chunk) in ids.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        batches.push(assemble_batch(
            chunk,
            set,
            cfg,
            mix_seed(cfg.seed, u64::MAX - i as u64),
        )?);
    }
    Ok(batches)
}

/// Train a linear adapter with RAdam on the mean per-query contrastive loss.
/// Deterministic for a fixed `cfg.seed`.
pub fn train_adapter(
    cfg: &TrainConfig,
    base: &EmbeddingTable,
    set: &ExampleSet,
    inputs: TrainInputs<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if base.is_empty() {
        return Err(TrainError::Config("no base embeddings".into()));
    }
    let d_in = base.dim();
    let d_out = cfg.d_out.unwrap_or(d_in);
    let mut weights = AdapterWeights::near_identity(d_out, d_in, cfg.init_noise, cfg.seed);
    let mut vectors = PassageVectors {
        base,
        augmenter: inputs.augmenter,
        variants: HashMap::new(),
    };

    let pool = trainable_ids(set);
    if cfg.max_steps > 0 && pool.len() < 2 {
        return Err(TrainError::UnusableBatch(format!(
            "need at least 2 examples with topic-mates, found {}",
            pool.len()
        )));
    }

    let validation = match inputs.validation {
        Some(v) => Some((v, validation_batches(v, cfg)?)),
        None => None,
    };
    let validation_loss =
        |w: &AdapterWeights, vectors: &mut PassageVectors<'_>| -> Result<Option<f64>, TrainError> {
            let Some((_, batches)) = &validation else {
                return Ok(None);
            };
            let (mut total, mut count) = (0.0, 0usize);
            for b in batches {
                vectors.prepare(b)?;
                let terms = vectors.terms(b);
                total += mean_loss(w, &terms)? * terms.len() as f64;
                count += terms.len();
            }
            Ok((count > 0).then(|| total / count as f64))
        };

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, AdapterWeights)> = None;
    let mut record =
        |step: usize, loss: Option<f64>, w: &AdapterWeights, history: &mut Vec<(usize, f64)>| {
            if let Some(l) = loss {
                history.push((step, l));
                if best.as_ref().is_none_or(|(_, b, _)| l < *b) {
                    best = Some((step, l, w.clone()));
                }
            }
        };
    let l0 = validation_loss(&weights, &mut vectors)?;
    record(0, l0, &weights, &mut history);

    let mut optimizer = RAdam::new(d_in * d_out);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xBA7C));
    let mut trace = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let size = cfg.batch_size.min(pool.len());
        let mut picked = index::sample(&mut rng, pool.len(), size).into_vec();
        picked.sort_unstable();
        let ids: Vec<String> = picked.into_iter().map(|i| pool[i].clone()).collect();
        let batch = assemble_batch(&ids, set, cfg, mix_seed(cfg.seed, step as u64 + 1))?;
        vectors.prepare(&batch)?;
        let terms = vectors.terms(&batch);
        let (loss, grad) = loss_and_grad(&weights, &terms)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite { step });
        }
        let lr = cfg.lr_at(step);
        trace.push(TraceRow {
            step: step + 1,
            loss,
            lr,
        });
        optimizer.step(weights.as_mut_slice(), &grad, lr);
        if !weights.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let done = step + 1;
        if validation.is_some() && (done % cfg.validation_every == 0 || done == cfg.max_steps) {
            let l = validation_loss(&weights, &mut vectors)?;
            if history.last().map(|(s, _)| *s) != Some(done) {
                record(done, l, &weights, &mut history);
            }
        }
    }

    let (chosen, best_step) = match best {
        Some((step, _, w)) => (w, Some(step)),
        None => (weights.clone(), None),
    };
    Ok(TrainOutcome {
        weights: chosen,
        final_weights: weights,
        trace,
        validation: history,
        best_step,
    })
}

/// Mean per-query loss of `weights` on one assembled batch.
pub fn batch_loss(
    weights: &AdapterWeights,
    batch: &TrainingBatch,
    base: &EmbeddingTable,
    augmenter: Option<&dyn EmbeddingProvider>,
) -> Result<f64, TrainError> {
    let mut vectors = PassageVectors {
        base,
        augmenter,
        variants: HashMap::new(),
    };
    vectors.prepare(batch)?;
    Ok(mean_loss(weights, &vectors.terms(batch))?)
}

/// Apply the adapter to every vector of a table.
pub fn adapt_table(
    weights: &AdapterWeights,
    table: &EmbeddingTable,
) -> Result<EmbeddingTable, RetrievalError> {
    table.map_vectors(|v| weights.apply(v))
}

/// Query embedder that passes another embedder's output through an adapter.
pub struct AdaptedQueries<'a, E> {
    pub inner: E,
    pub weights: &'a AdapterWeights,
}

impl<E: QueryEmbedder> QueryEmbedder for AdaptedQueries<'_, E> {
    fn embed_query(&self, query: &QueryView) -> Result<Embedding, RetrievalError> {
        self.weights.apply(&self.inner.embed_query(query)?)
    }
}

/// Fraction of topiced examples (with at least one topic-mate) whose nearest
/// other example by dot product shares their topic.
pub fn topic_recall_at_1(set: &ExampleSet, table: &EmbeddingTable) -> Result<f64, TrainError> {
    let ids: Vec<&str> = set.ids().filter(|id| table.get(id).is_some()).collect();
    let sub = table.select(ids.iter().copied())?;
    let index = ExampleIndex::from_table(&sub)?;
    let queries = trainable_ids(set);
    let mut hits = 0usize;
    let mut total = 0usize;
    for qid in &queries {
        let Some(v) = table.get(qid) else { continue };
        let exclude = HashSet::from([qid.clone()]);
        let top = index.search(v, 1, &exclude)?;
        total += 1;
        let want = topic_key(set.get(qid).expect("listed"));
        if let Some(hit) = top.first() {
            if set.get(&hit.example_id).and_then(topic_key) == want {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(TrainError::UnusableBatch(
            "no example has a topic-mate".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}
