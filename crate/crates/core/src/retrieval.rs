//! Exact dense retrieval: embeddings, the embedding-provider contract, a
//! brute-force dot-product index and the JSONL embedding interchange format.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{ExampleSet, QueryView};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("embedding is empty")]
    EmptyVector,
    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),
    #[error("dimension mismatch at position {position}: expected {expected}, got {actual}")]
    DimMismatch {
        position: usize,
        expected: usize,
        actual: usize,
    },
    #[error("length mismatch: {ids} ids but {vectors} vectors")]
    LengthMismatch { ids: usize, vectors: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("provider {provider}: {message}")]
    Provider { provider: String, message: String },
    #[error("{path}: line {line}: {reason}")]
    File {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("no embedding for id {0:?}")]
    MissingId(String),
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::EmptyVector);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, RetrievalError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = RetrievalError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Turns text into fixed-dimension vectors. One encoder serves both queries
/// and passages.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, RetrievalError>;
}

/// Embed a batch, checking count and dimension of what the provider returns.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
) -> Result<Vec<Embedding>, RetrievalError> {
    if texts.is_empty() {
        return Err(RetrievalError::EmptyBatch);
    }
    let vectors = provider.embed_batch(texts)?;
    if vectors.len() != texts.len() {
        return Err(RetrievalError::Provider {
            provider: provider.name().to_string(),
            message: format!(
                "returned {} vectors for {} texts",
                vectors.len(),
                texts.len()
            ),
        });
    }
    let expected = provider.dim();
    for (position, v) in vectors.iter().enumerate() {
        if v.dim() != expected {
            return Err(RetrievalError::DimMismatch {
                position,
                expected,
                actual: v.dim(),
            });
        }
    }
    Ok(vectors)
}

/// Deterministic feature-hashing encoder: lower-cased word unigrams and
/// bigrams are hashed (with a seed) into signed buckets, then L2-normalized.
/// Texts sharing vocabulary land close together, which makes it usable as an
/// offline stand-in for a neural encoder.
#[derive(Debug, Clone)]
pub struct HashingProvider {
    name: String,
    dim: usize,
    seed: u64,
}

impl HashingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            name: format!("hash-{dim}"),
            dim,
            seed,
        }
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty() && *t != "SEP")
            .map(str::to_lowercase)
            .collect();
        let mut values = vec![0.0; self.dim];
        let mut add = |feature: &str, weight: f64| {
            let h = self.feature_hash(feature);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign * weight;
        };
        for t in &tokens {
            add(t, 1.0);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        let norm = dot(&values, &values).sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Embedding(values)
    }

    fn feature_hash(&self, feature: &str) -> u64 {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(feature.as_bytes())
            .finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl EmbeddingProvider for HashingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>, RetrievalError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    #[serde(rename = "id")]
    pub example_id: String,
    pub score: f64,
}

/// Immutable id-aligned embedding matrix searched by exact dot product.
#[derive(Debug, Clone)]
pub struct ExampleIndex {
    ids: Vec<String>,
    matrix: Vec<Embedding>,
    dim: usize,
}

#[derive(PartialEq)]
struct Ranked {
    score: f64,
    position: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    // "Greater" means better: higher score, then earlier insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.position.cmp(&self.position))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl ExampleIndex {
    pub fn build(ids: Vec<String>, vectors: Vec<Embedding>) -> Result<Self, RetrievalError> {
        if ids.len() != vectors.len() {
            return Err(RetrievalError::LengthMismatch {
                ids: ids.len(),
                vectors: vectors.len(),
            });
        }
        let dim = vectors.first().ok_or(RetrievalError::EmptyBatch)?.dim();
        if let Some(position) = vectors.iter().position(|v| v.dim() != dim) {
            return Err(RetrievalError::DimMismatch {
                position,
                expected: dim,
                actual: vectors[position].dim(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            matrix: vectors,
            dim,
        })
    }

    pub fn from_table(table: &EmbeddingTable) -> Result<Self, RetrievalError> {
        Self::build(table.ids.clone(), table.vectors.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Embedding] {
        &self.matrix
    }

    /// Top-`k` by dot product, descending; ties go to the earlier entry.
    pub fn search(
        &self,
        query: &Embedding,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimMismatch {
                position: 0,
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        // Min-heap of the best k seen so far.
        let mut heap: BinaryHeap<std::cmp::Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
        for (position, (id, v)) in self.ids.iter().zip(&self.matrix).enumerate() {
            if exclude.contains(id) {
                continue;
            }
            let candidate = Ranked {
                score: query.dot(v),
                position,
            };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(candidate));
            } else if let Some(worst) = heap.peek() {
                if candidate > worst.0 {
                    heap.pop();
                    heap.push(std::cmp::Reverse(candidate));
                }
            }
        }
        let mut ranked: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
        ranked.sort_by(|a, b| b.cmp(a));
        Ok(ranked
            .into_iter()
            .map(|r| RetrievalHit {
                example_id: self.ids[r.position].clone(),
                score: r.score,
            })
            .collect())
    }
}

/// Id-keyed embeddings as read from / written to the interchange file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    positions: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Vec<Embedding>) -> Result<Self, RetrievalError> {
        // Same invariants as the index.
        let index = ExampleIndex::build(ids, vectors)?;
        let positions = index
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            ids: index.ids,
            vectors: index.matrix,
            positions,
        })
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.positions.get(id).map(|&i| &self.vectors[i])
    }

    pub fn require(&self, id: &str) -> Result<&Embedding, RetrievalError> {
        self.get(id)
            .ok_or_else(|| RetrievalError::MissingId(id.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Embedding::dim)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    /// Subset in the given id order.
    pub fn select<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, RetrievalError> {
        let mut out_ids = Vec::new();
        let mut out_vecs = Vec::new();
        for id in ids {
            out_vecs.push(self.require(id)?.clone());
            out_ids.push(id.to_string());
        }
        Self::new(out_ids, out_vecs)
    }

    pub fn map_vectors(
        &self,
        f: impl Fn(&Embedding) -> Result<Embedding, RetrievalError>,
    ) -> Result<Self, RetrievalError> {
        let vectors = self.vectors.iter().map(f).collect::<Result<Vec<_>, _>>()?;
        Self::new(self.ids.clone(), vectors)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, v) in self.iter() {
            let line = EmbeddingLine {
                id: id.to_string(),
                vector: v.values().to_vec(),
            };
            out.push_str(&serde_json::to_string(&line).expect("finite vectors serialize"));
            out.push('\n');
        }
        out
    }

    pub fn read_jsonl(reader: impl BufRead, source: &str) -> Result<Self, RetrievalError> {
        let file_err = |line: usize, reason: String| RetrievalError::File {
            path: source.to_string(),
            line,
            reason,
        };
        let mut ids = Vec::new();
        let mut vectors: Vec<Embedding> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| file_err(line_no, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine =
                serde_json::from_str(&line).map_err(|e| file_err(line_no, e.to_string()))?;
            let v = Embedding::new(parsed.vector).map_err(|e| file_err(line_no, e.to_string()))?;
            if let Some(first) = vectors.first() {
                if first.dim() != v.dim() {
                    return Err(file_err(
                        line_no,
                        format!("vector length {} differs from {}", v.dim(), first.dim()),
                    ));
                }
            }
            ids.push(parsed.id);
            vectors.push(v);
        }
        if ids.is_empty() {
            return Err(file_err(0, "no vectors".to_string()));
        }
        Self::new(ids, vectors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let file = File::open(path).map_err(|e| RetrievalError::File {
            path: name.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        Self::read_jsonl(BufReader::new(file), &name)
    }
}

/// Embed every example's passage text, keyed by example id.
pub fn embed_passages(
    provider: &dyn EmbeddingProvider,
    set: &ExampleSet,
) -> Result<EmbeddingTable, RetrievalError> {
    let texts: Vec<String> = set.iter().map(|ex| ex.passage()).collect();
    let vectors = embed_texts(provider, &texts)?;
    EmbeddingTable::new(set.ids().map(String::from).collect(), vectors)
}

/// Produces the query-side vector for a question. Passages are embedded
/// ahead of time; queries may be encoded live or looked up by id.
pub trait QueryEmbedder: Send + Sync {
    fn embed_query(&self, query: &QueryView) -> Result<Embedding, RetrievalError>;
}

/// Encodes the serialized query with a provider.
pub struct ProviderQueries<'a>(pub &'a dyn EmbeddingProvider);

impl QueryEmbedder for ProviderQueries<'_> {
    fn embed_query(&self, query: &QueryView) -> Result<Embedding, RetrievalError> {
        let mut v = embed_texts(self.0, &[query.serialize()])?;
        Ok(v.remove(0))
    }
}

/// Looks up precomputed query embeddings by question id.
pub struct TableQueries<'a>(pub &'a EmbeddingTable);

impl QueryEmbedder for TableQueries<'_> {
    fn embed_query(&self, query: &QueryView) -> Result<Embedding, RetrievalError> {
        self.0.require(&query.id).cloned()
    }
}
