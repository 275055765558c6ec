//! Multi-label noise-contrastive loss over dot-product similarities.
//!
//! For a query with positive similarities `s_i` and negative similarities
//! `n_j` the loss is
//!
//! ```text
//! -log sum_i  exp(s_i) / (exp(s_i) + sum_j exp(n_j))
//! ```
//!
//! Each positive has its own denominator. With several positives the sum can
//! exceed one, so the loss can be negative.

use thiserror::Error;

use crate::retrieval::Embedding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("at least one positive is required")]
    NoPositives,
    #[error("dimension mismatch: query has {query}, passage has {passage}")]
    DimMismatch { query: usize, passage: usize },
}

/// `log(sum(exp(xs)))`, shifted by the maximum. `xs` must be non-empty.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-positive log ratio `s_i - log(exp(s_i) + sum_j exp(n_j))`.
fn log_ratios(pos: &[f64], neg: &[f64]) -> Vec<f64> {
    pos.iter()
        .map(|&s| s - log_sum_exp(std::iter::once(s).chain(neg.iter().copied())))
        .collect()
}

pub fn nce_from_sims(pos: &[f64], neg: &[f64]) -> Result<f64, LossError> {
    if pos.is_empty() {
        return Err(LossError::NoPositives);
    }
    let ratios = log_ratios(pos, neg);
    Ok(0.0 - log_sum_exp(ratios.iter().copied()))
}

/// Loss with its gradient with respect to every positive and negative
/// similarity.
pub fn nce_with_sim_grad(pos: &[f64], neg: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    if pos.is_empty() {
        return Err(LossError::NoPositives);
    }
    let ratios = log_ratios(pos, neg);
    let total = log_sum_exp(ratios.iter().copied());
    let mut grad_pos = vec![0.0; pos.len()];
    let mut grad_neg = vec![0.0; neg.len()];
    for (i, (&s, &log_ratio)) in pos.iter().zip(&ratios).enumerate() {
        // Weight of this positive's term in the outer sum.
        let weight = (log_ratio - total).exp();
        let ratio = log_ratio.exp();
        grad_pos[i] = -weight * (1.0 - ratio);
        // log of the per-term denominator
        let log_denominator = s - log_ratio;
        for (g, &n) in grad_neg.iter_mut().zip(neg) {
            *g += weight * (n - log_denominator).exp();
        }
    }
    Ok((0.0 - total, grad_pos, grad_neg))
}

fn checked_sim(query: &Embedding, passage: &Embedding) -> Result<f64, LossError> {
    if query.dim() != passage.dim() {
        return Err(LossError::DimMismatch {
            query: query.dim(),
            passage: passage.dim(),
        });
    }
    Ok(query.dot(passage))
}

/// Loss for one query given its positive and negative passage embeddings.
pub fn nce_loss(
    query: &Embedding,
    positives: &[Embedding],
    negatives: &[Embedding],
) -> Result<f64, LossError> {
    let pos = positives
        .iter()
        .map(|p| checked_sim(query, p))
        .collect::<Result<Vec<_>, _>>()?;
    let neg = negatives
        .iter()
        .map(|p| checked_sim(query, p))
        .collect::<Result<Vec<_>, _>>()?;
    nce_from_sims(&pos, &neg)
}
