//! Full-ranking top-K evaluation.
//!
//! Every item the user has not interacted with in the masked splits is a
//! candidate. Scores are `e_u·e_i`; ties go to the smaller item index.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionDataset;
use crate::model::{dot, EmbeddingModel};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no user has both train interactions and {0} pairs")]
    NoEvaluableUsers(Split),
    #[error("cutoff list is empty or contains 0")]
    BadCutoffs,
    #[error("model shape ({0} users, {1} items) does not match dataset ({2}, {3})")]
    ShapeMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Targets are validation pairs; train items are masked.
    Valid,
    /// Targets are test pairs; train and validation items are masked.
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Valid => "validation",
            Split::Test => "test",
        })
    }
}

#[inline]
fn by_score_then_index(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Top `cutoff` items of `scores` in descending order, ties by smaller index,
/// skipping every item in `masked` (sorted ascending).
pub fn top_k_from_scores(scores: &[f64], masked: &[u32], cutoff: usize) -> Vec<u32> {
    let mut cands: Vec<(f64, u32)> = Vec::with_capacity(scores.len());
    let mut mask = masked.iter().peekable();
    for (i, &s) in scores.iter().enumerate() {
        let i = i as u32;
        while mask.peek().is_some_and(|&&m| m < i) {
            mask.next();
        }
        if mask.peek() == Some(&&i) {
            continue;
        }
        cands.push((s, i));
    }
    if cutoff == 0 {
        return Vec::new();
    }
    if cands.len() > cutoff {
        cands.select_nth_unstable_by(cutoff - 1, by_score_then_index);
        cands.truncate(cutoff);
    }
    cands.sort_unstable_by(by_score_then_index);
    cands.into_iter().map(|(_, i)| i).collect()
}

/// Top `cutoff` items for user `u`, excluding `masked` (sorted ascending).
pub fn rank_user(model: &EmbeddingModel, u: u32, masked: &[u32], cutoff: usize) -> Vec<u32> {
    let eu = model.user(u);
    let scores: Vec<f64> = (0..model.num_items() as u32)
        .map(|i| dot(eu, model.item(i)))
        .collect();
    top_k_from_scores(&scores, masked, cutoff)
}

/// `|topk[..k] ∩ test| / |test|`; 0 for an empty test set.
pub fn recall_at_k(topk: &[u32], test: &HashSet<u32>, k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let hits = topk.iter().take(k).filter(|i| test.contains(i)).count();
    hits as f64 / test.len() as f64
}

/// Binary-relevance NDCG with a `1/log₂(rank+1)` discount, ranks from 1.
pub fn ndcg_at_k(topk: &[u32], test: &HashSet<u32>, k: usize) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..test.len().min(k))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    dcg / idcg
}

/// Per-cutoff means over the evaluated users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub num_evaluated_users: usize,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.cutoffs
            .iter()
            .position(|&c| c == k)
            .map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.cutoffs
            .iter()
            .position(|&c| c == k)
            .map(|p| self.ndcg[p])
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} users evaluated on {}",
            self.num_evaluated_users, self.split
        );
        let _ = writeln!(s, "{:>8}  {:>10}  {:>10}", "cutoff", "recall", "ndcg");
        for (p, k) in self.cutoffs.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>8}  {:>10.6}  {:>10.6}",
                k, self.recall[p], self.ndcg[p]
            );
        }
        s
    }
}

fn group_by_user(num_users: usize, pairs: &[(u32, u32)], lists: &mut [Vec<u32>]) {
    debug_assert_eq!(lists.len(), num_users);
    for &(u, i) in pairs {
        lists[u as usize].push(i);
    }
}

/// Ranks every user that has train interactions and at least one target pair.
pub fn evaluate(
    model: &EmbeddingModel,
    dataset: &InteractionDataset,
    cutoffs: &[usize],
    split: Split,
) -> Result<EvalReport, EvalError> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(EvalError::BadCutoffs);
    }
    if model.num_users() != dataset.num_users || model.num_items() != dataset.num_items {
        return Err(EvalError::ShapeMismatch(
            model.num_users(),
            model.num_items(),
            dataset.num_users,
            dataset.num_items,
        ));
    }
    let n = dataset.num_users;
    let mut masked = vec![Vec::new(); n];
    group_by_user(n, &dataset.train_pairs, &mut masked);
    let has_train: Vec<bool> = masked.iter().map(|m| !m.is_empty()).collect();
    let targets_pairs = match split {
        Split::Valid => &dataset.valid_pairs,
        Split::Test => {
            group_by_user(n, &dataset.valid_pairs, &mut masked);
            &dataset.test_pairs
        }
    };
    for m in masked.iter_mut() {
        m.sort_unstable();
    }
    let mut targets = vec![Vec::new(); n];
    group_by_user(n, targets_pairs, &mut targets);

    let users: Vec<u32> = (0..n as u32)
        .filter(|&u| has_train[u as usize] && !targets[u as usize].is_empty())
        .collect();
    if users.is_empty() {
        return Err(EvalError::NoEvaluableUsers(split));
    }
    let max_k = *cutoffs.iter().max().unwrap();
    let per_user: Vec<(Vec<f64>, Vec<f64>)> = users
        .par_iter()
        .map(|&u| {
            let top = rank_user(model, u, &masked[u as usize], max_k);
            let test: HashSet<u32> = targets[u as usize].iter().copied().collect();
            let r = cutoffs
                .iter()
                .map(|&k| recall_at_k(&top, &test, k))
                .collect();
            let g = cutoffs.iter().map(|&k| ndcg_at_k(&top, &test, k)).collect();
            (r, g)
        })
        .collect();

    // sequential reduction in user order keeps the report independent of
    // the thread count
    let mut recall = vec![0.0; cutoffs.len()];
    let mut ndcg = vec![0.0; cutoffs.len()];
    for (r, g) in &per_user {
        for p in 0..cutoffs.len() {
            recall[p] += r[p];
            ndcg[p] += g[p];
        }
    }
    let count = users.len() as f64;
    recall.iter_mut().for_each(|x| *x /= count);
    ndcg.iter_mut().for_each(|x| *x /= count);
    Ok(EvalReport {
        split,
        cutoffs: cutoffs.to_vec(),
        recall,
        ndcg,
        num_evaluated_users: users.len(),
    })
}
