use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::retrieval::{dot, Embedding, RetrievalError};

use super::loss::{nce_with_sim_grad, LossError};

/// Linear map applied to frozen base embeddings. Similarity between adapted
/// vectors is `(M b_q) . (M b_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdapterFile", into = "AdapterFile")]
pub struct AdapterWeights {
    d_in: usize,
    d_out: usize,
    /// Row-major, `d_out` rows of `d_in`.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdapterFile {
    d_in: usize,
    d_out: usize,
    matrix: Vec<Vec<f64>>,
}

impl TryFrom<AdapterFile> for AdapterWeights {
    type Error = String;

    fn try_from(file: AdapterFile) -> Result<Self, String> {
        if file.d_in == 0 || file.d_out == 0 {
            return Err("adapter dimensions must be positive".into());
        }
        if file.matrix.len() != file.d_out {
            return Err(format!(
                "expected {} rows, found {}",
                file.d_out,
                file.matrix.len()
            ));
        }
        let mut data = Vec::with_capacity(file.d_in * file.d_out);
        for (r, row) in file.matrix.into_iter().enumerate() {
            if row.len() != file.d_in {
                return Err(format!(
                    "row {r} has {} entries, expected {}",
                    row.len(),
                    file.d_in
                ));
            }
            data.extend(row);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err("adapter contains non-finite entries".into());
        }
        Ok(Self {
            d_in: file.d_in,
            d_out: file.d_out,
            data,
        })
    }
}

impl From<AdapterWeights> for AdapterFile {
    fn from(w: AdapterWeights) -> Self {
        Self {
            d_in: w.d_in,
            d_out: w.d_out,
            matrix: w.data.chunks(w.d_in).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl AdapterWeights {
    pub fn identity(d: usize) -> Self {
        Self::eye(d, d)
    }

    /// Ones on the main diagonal, zeros elsewhere.
    pub fn eye(d_out: usize, d_in: usize) -> Self {
        let mut data = vec![0.0; d_in * d_out];
        for i in 0..d_in.min(d_out) {
            data[i * d_in + i] = 1.0;
        }
        Self { d_in, d_out, data }
    }

    /// Identity plus seeded Gaussian noise.
    pub fn near_identity(d_out: usize, d_in: usize, sigma: f64, seed: u64) -> Self {
        let mut w = Self::eye(d_out, d_in);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut w.data {
                *v += normal.sample(&mut rng);
            }
        }
        w
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, String> {
        let d_out = rows.len();
        let d_in = rows.first().map_or(0, Vec::len);
        AdapterFile {
            d_in,
            d_out,
            matrix: rows,
        }
        .try_into()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d_in)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn apply_slice(&self, base: &[f64]) -> Vec<f64> {
        debug_assert_eq!(base.len(), self.d_in);
        self.rows().map(|row| dot(row, base)).collect()
    }

    pub fn apply(&self, base: &Embedding) -> Result<Embedding, RetrievalError> {
        if base.dim() != self.d_in {
            return Err(RetrievalError::DimMismatch {
                position: 0,
                expected: self.d_in,
                actual: base.dim(),
            });
        }
        Embedding::new(self.apply_slice(base.values()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("adapter serializes")
    }
}

/// Base embeddings entering one query's loss term.
#[derive(Debug, Clone)]
pub struct QueryTerms<'a> {
    pub query: &'a [f64],
    pub positives: Vec<&'a [f64]>,
    pub negatives: Vec<&'a [f64]>,
}

/// Mean loss over `terms` and its gradient with respect to the adapter
/// matrix (row-major, same layout as the weights). Per-query contributions
/// are accumulated in slice order.
pub fn loss_and_grad(
    weights: &AdapterWeights,
    terms: &[QueryTerms<'_>],
) -> Result<(f64, Vec<f64>), LossError> {
    let d_in = weights.d_in;
    let mut grad = vec![0.0; weights.data.len()];
    if terms.is_empty() {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    let scale = 1.0 / terms.len() as f64;
    for term in terms {
        for p in term.positives.iter().chain(&term.negatives) {
            if p.len() != term.query.len() {
                return Err(LossError::DimMismatch {
                    query: term.query.len(),
                    passage: p.len(),
                });
            }
        }
        let uq = weights.apply_slice(term.query);
        let up: Vec<Vec<f64>> = term
            .positives
            .iter()
            .map(|b| weights.apply_slice(b))
            .collect();
        let un: Vec<Vec<f64>> = term
            .negatives
            .iter()
            .map(|b| weights.apply_slice(b))
            .collect();
        let pos: Vec<f64> = up.iter().map(|u| dot(&uq, u)).collect();
        let neg: Vec<f64> = un.iter().map(|u| dot(&uq, u)).collect();
        let (loss, gp, gn) = nce_with_sim_grad(&pos, &neg)?;
        total += loss;

        // d sim / dM = (M b_p) b_q^T + (M b_q) b_p^T
        let mut weighted_u = vec![0.0; weights.d_out];
        let passages = term.positives.iter().zip(&up).zip(&gp);
        let passages = passages.chain(term.negatives.iter().zip(&un).zip(&gn));
        for ((b, u), &g) in passages {
            if g == 0.0 {
                continue;
            }
            for (acc, &x) in weighted_u.iter_mut().zip(u) {
                *acc += g * x;
            }
            for (r, &uq_r) in uq.iter().enumerate() {
                let row = &mut grad[r * d_in..(r + 1) * d_in];
                let coef = scale * g * uq_r;
                for (cell, &bx) in row.iter_mut().zip(b.iter()) {
                    *cell += coef * bx;
                }
            }
        }
        for (r, &w) in weighted_u.iter().enumerate() {
            let row = &mut grad[r * d_in..(r + 1) * d_in];
            for (cell, &bq) in row.iter_mut().zip(term.query) {
                *cell += scale * w * bq;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Mean loss only.
pub fn mean_loss(weights: &AdapterWeights, terms: &[QueryTerms<'_>]) -> Result<f64, LossError> {
    if terms.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for term in terms {
        let uq = weights.apply_slice(term.query);
        let pos: Vec<f64> = term
            .positives
            .iter()
            .map(|b| dot(&uq, &weights.apply_slice(b)))
            .collect();
        let neg: Vec<f64> = term
            .negatives
            .iter()
            .map(|b| dot(&uq, &weights.apply_slice(b)))
            .collect();
        total += super::loss::nce_from_sims(&pos, &neg)?;
    }
    Ok(total / terms.len() as f64)
}
