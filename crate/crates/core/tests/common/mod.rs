#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ultragcn::graph::{build_item_neighbors, build_user_neighbors, NeighborIndex};
use ultragcn::model::{gradients, Gradients, GraphContext, Node};
use ultragcn::training::{init_embeddings, sample_negatives};
use ultragcn::{BipartiteGraph, ConstraintWeights, EmbeddingModel, Objective, TrainBatch};

/// A seeded random problem small enough for per-coordinate differencing.
pub struct Fixture {
    pub model: EmbeddingModel,
    pub batch: TrainBatch,
    pub constraint: ConstraintWeights,
    pub items: NeighborIndex,
    pub users: NeighborIndex,
}

impl Fixture {
    pub fn new(seed: u64, dim: usize, positives: usize, negatives: usize, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni) = (5usize, 9usize);
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for u in 0..nu as u32 {
            // every user gets a pair, the rest at random
            pairs.push((u, rng.random_range(0..ni as u32)));
            for i in 0..ni as u32 {
                if rng.random_bool(0.4) {
                    pairs.push((u, i));
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let graph = BipartiteGraph::from_pairs(nu, ni, &pairs);
        let constraint = ConstraintWeights::new(&graph);
        let items = build_item_neighbors(&graph, k).unwrap();
        let users = build_user_neighbors(&graph, k).unwrap();
        let model = init_embeddings(nu, ni, dim, 0.5, &mut rng);
        let mut chosen = pairs.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(positives);
        let mut neg = Vec::new();
        for &(_, i) in &chosen {
            neg.extend(sample_negatives(&mut rng, i, negatives, ni).unwrap());
        }
        Fixture {
            model,
            batch: TrainBatch::new(chosen, neg, negatives),
            constraint,
            items,
            users,
        }
    }

    pub fn ctx(&self) -> GraphContext<'_> {
        GraphContext {
            constraint: &self.constraint,
            item_neighbors: &self.items,
            user_neighbors: Some(&self.users),
        }
    }

    /// Analytic gradient of the full objective as one flat vector (users,
    /// then items).
    pub fn analytic(&self, obj: &Objective) -> Vec<f64> {
        let mut g = Gradients::for_model(&self.model);
        gradients(&self.model, &self.batch, &self.ctx(), obj, &mut g);
        flatten(&self.model, |node| g.row(node).to_vec())
    }
}

fn flatten(model: &EmbeddingModel, row: impl Fn(Node) -> Vec<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for u in 0..model.num_users() as u32 {
        out.extend(row(Node::User(u)));
    }
    for i in 0..model.num_items() as u32 {
        out.extend(row(Node::Item(i)));
    }
    out
}

/// Central differences of `f` over every embedding coordinate.
pub fn numeric(model: &EmbeddingModel, h: f64, f: impl Fn(&EmbeddingModel) -> f64) -> Vec<f64> {
    let mut m = model.clone();
    let d = model.dim();
    let mut out = Vec::new();
    let nodes = (0..model.num_users() as u32)
        .map(Node::User)
        .chain((0..model.num_items() as u32).map(Node::Item));
    for node in nodes {
        for k in 0..d {
            let x = m.row(node)[k];
            m.row_mut(node)[k] = x + h;
            let up = f(&m);
            m.row_mut(node)[k] = x - h;
            let down = f(&m);
            m.row_mut(node)[k] = x;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Largest per-coordinate `|a − n| / max(|a|, |n|)`; coordinates where both
/// sides are below `floor` are compared against `floor` instead, so exact
/// zeros are not divided by themselves.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}
