//! Positive mining by shared topic, choice-list augmentation and in-batch
//! negative assembly.

use std::collections::HashSet;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::kb::{label_index, serialize_parts, Example, ExampleSet};

use super::{mix_seed, TrainConfig, TrainError};

/// Normalized topic key: trimmed and lower-cased. Blank topics count as
/// missing.
pub fn topic_key(ex: &Example) -> Option<String> {
    ex.topic
        .as_deref()
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Other examples sharing the query's topic, in set order. When more than
/// `cap` qualify, a seeded uniform sample of `cap` is kept (still in set
/// order).
pub fn mine_positives(
    set: &ExampleSet,
    query_id: &str,
    cap: usize,
    seed: u64,
) -> Result<Vec<String>, TrainError> {
    let query = set
        .get(query_id)
        .ok_or_else(|| TrainError::UnknownId(query_id.to_string()))?;
    let topic = topic_key(query).ok_or_else(|| TrainError::UntopicedQuery(query_id.to_string()))?;
    let peers: Vec<&str> = set
        .iter()
        .filter(|ex| ex.id != query_id && topic_key(ex).as_deref() == Some(topic.as_str()))
        .map(|ex| ex.id.as_str())
        .collect();
    if peers.len() <= cap {
        return Ok(peers.into_iter().map(String::from).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, peers.len(), cap).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| peers[i].to_string()).collect())
}

// Up to this many choices every permutation is enumerated.
const ENUMERATE_MAX_CHOICES: usize = 6;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn recurse(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                recurse(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    recurse(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Every subset of `items` with size in `1..=max_size`, as sorted lists.
fn subsets(items: &[usize], max_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 1u64..(1u64 << items.len()) {
        if mask.count_ones() as usize <= max_size {
            out.push(
                items
                    .iter()
                    .enumerate()
                    .filter(|(bit, _)| mask & (1 << bit) != 0)
                    .map(|(_, &i)| i)
                    .collect(),
            );
        }
    }
    out
}

/// Serialized passage variants of `ex`, each made by one seeded edit of its
/// choice list: a permutation, or removal of some non-gold choices (at least
/// two choices always remain). Variants are distinct from the original and
/// from each other; fewer than `n_variants` come back when fewer exist.
pub fn augment_passages(ex: &Example, seed: u64, n_variants: usize) -> Vec<String> {
    let texts: Vec<&str> = ex.choices.iter().map(|c| c.text.as_str()).collect();
    let n = texts.len();
    let gold = ex.answer_label.and_then(label_index);
    let removable: Vec<usize> = (0..n).filter(|&i| Some(i) != gold).collect();
    let max_removed = n.saturating_sub(2).min(removable.len());

    let render = |order: &[usize]| serialize_parts(&ex.question, order.iter().map(|&i| texts[i]));
    let mut seen: HashSet<String> = HashSet::from([ex.passage()]);
    let mut out = Vec::with_capacity(n_variants);
    let mut push = |passage: String, out: &mut Vec<String>| {
        if seen.insert(passage.clone()) {
            out.push(passage);
        }
    };
    if n_variants == 0 || n == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if n <= ENUMERATE_MAX_CHOICES {
        let mut perms = permutations(n);
        let mut removals = subsets(&removable, max_removed);
        perms.shuffle(&mut rng);
        removals.shuffle(&mut rng);
        let mut perms = perms.into_iter();
        let mut removals = removals.into_iter();
        // Alternate edit kinds so both are represented.
        loop {
            let mut progressed = false;
            if let Some(p) = perms.next() {
                push(render(&p), &mut out);
                progressed = true;
            }
            if out.len() >= n_variants {
                break;
            }
            if let Some(removed) = removals.next() {
                let kept: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
                push(render(&kept), &mut out);
                progressed = true;
            }
            if out.len() >= n_variants || !progressed {
                break;
            }
        }
        return out;
    }

    let budget = 50 * n_variants + 100;
    let mut order: Vec<usize> = (0..n).collect();
    for attempt in 0..budget {
        if out.len() >= n_variants {
            break;
        }
        if attempt % 2 == 0 || max_removed == 0 {
            order.shuffle(&mut rng);
            push(render(&order), &mut out);
        } else {
            let k = rng.random_range(1..=max_removed);
            let removed: HashSet<usize> = removable.choose_multiple(&mut rng, k).copied().collect();
            let kept: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
            push(render(&kept), &mut out);
        }
    }
    out
}

/// A passage entering the loss: an example as stored, or one of its
/// augmented variants.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Passage {
    pub source_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

impl Passage {
    pub fn original(id: impl Into<String>) -> Self {
        Self {
            source_id: id.into(),
            variant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchEntry {
    pub query_id: String,
    pub positives: Vec<Passage>,
    pub negatives: Vec<Passage>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingBatch {
    pub entries: Vec<BatchEntry>,
    /// Queries dropped because they have no topic or no topic-mates.
    pub skipped: Vec<String>,
}

/// Assemble positives (mined plus augmented) and in-batch negatives for
/// each query. Negatives come from the other queries' positives, excluding
/// anything sharing this query's topic and the query itself, sampled down to
/// `negative_cap`.
pub fn assemble_batch(
    query_ids: &[String],
    set: &ExampleSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingBatch, TrainError> {
    if query_ids.len() < 2 {
        return Err(TrainError::UnusableBatch(format!(
            "a batch needs at least 2 queries, got {}",
            query_ids.len()
        )));
    }
    let mut mined: Vec<(String, String, Vec<Passage>)> = Vec::new();
    let mut skipped = Vec::new();
    for (slot, qid) in query_ids.iter().enumerate() {
        let query_seed = mix_seed(seed, slot as u64);
        let ids = match mine_positives(set, qid, cfg.positive_cap, query_seed) {
            Ok(ids) => ids,
            Err(TrainError::UntopicedQuery(id)) => {
                skipped.push(id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let topic = topic_key(set.get(qid).expect("mined query exists")).expect("topiced");
        let mut positives: Vec<Passage> = ids.iter().map(Passage::original).collect();
        if cfg.augmentations_per_positive > 0 {
            for (j, id) in ids.iter().enumerate() {
                let ex = set.get(id).expect("mined id exists");
                let variants = augment_passages(
                    ex,
                    mix_seed(query_seed, j as u64 + 1),
                    cfg.augmentations_per_positive,
                );
                positives.extend(variants.into_iter().map(|text| Passage {
                    source_id: id.clone(),
                    variant: Some(text),
                }));
            }
        }
        mined.push((qid.clone(), topic, positives));
    }
    if mined.is_empty() {
        return Err(TrainError::UnusableBatch("every query is untopiced".into()));
    }

    let mut entries = Vec::new();
    for (slot, (qid, topic, positives)) in mined.iter().enumerate() {
        if positives.is_empty() {
            skipped.push(qid.clone());
            continue;
        }
        let mut seen = HashSet::new();
        let candidates: Vec<&Passage> = mined
            .iter()
            .filter(|(other, other_topic, _)| other != qid && other_topic != topic)
            .flat_map(|(_, _, ps)| ps)
            .filter(|p| p.source_id != *qid)
            .filter(|p| {
                set.get(&p.source_id).and_then(topic_key).as_deref() != Some(topic.as_str())
            })
            .filter(|p| seen.insert(*p))
            .collect();
        let negatives = if candidates.len() > cfg.negative_cap {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1_000_003 + slot as u64));
            let mut picked = index::sample(&mut rng, candidates.len(), cfg.negative_cap).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| candidates[i].clone()).collect()
        } else {
            candidates.into_iter().cloned().collect()
        };
        entries.push(BatchEntry {
            query_id: qid.clone(),
            positives: positives.clone(),
            negatives,
        });
    }
    if entries.is_empty() {
        return Err(TrainError::UnusableBatch(
            "no query has a topic-mate".into(),
        ));
    }
    Ok(TrainingBatch { entries, skipped })
}
