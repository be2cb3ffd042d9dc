//! Adaptive-moment optimizer with row-sparse updates.
//!
//! Only the rows present in a [`Gradients`] buffer are updated; untouched rows
//! keep both their values and their moment estimates. Bias correction uses
//! the global step count, as in the usual sparse/lazy variant. Weight decay,
//! when set, is decoupled: it shrinks touched rows by `lr · decay · e`
//! outside the moment estimates.

use serde::{Deserialize, Serialize};

use crate::model::{EmbeddingModel, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    config: AdamConfig,
    decay: f64,
    step: u64,
    dim: usize,
    user_m: Vec<f64>,
    user_v: Vec<f64>,
    item_m: Vec<f64>,
    item_v: Vec<f64>,
}

impl Adam {
    pub fn new(model: &EmbeddingModel, lr: f64, config: AdamConfig) -> Self {
        let users = model.num_users() * model.dim();
        let items = model.num_items() * model.dim();
        Adam {
            lr,
            config,
            decay: 0.0,
            step: 0,
            dim: model.dim(),
            user_m: vec![0.0; users],
            user_v: vec![0.0; users],
            item_m: vec![0.0; items],
            item_v: vec![0.0; items],
        }
    }

    pub fn with_weight_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn moments_finite(&self) -> bool {
        self.user_m
            .iter()
            .chain(&self.user_v)
            .chain(&self.item_m)
            .chain(&self.item_v)
            .all(|x| x.is_finite())
    }

    pub fn step(&mut self, model: &mut EmbeddingModel, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.lr;
        let decay = self.decay;
        let d = self.dim;
        let update = |e: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..d {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                e[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * e[k]);
            }
        };
        for &u in grads.touched_users() {
            let span = u as usize * d..(u as usize + 1) * d;
            update(
                model.user_mut(u),
                grads.user(u),
                &mut self.user_m[span.clone()],
                &mut self.user_v[span],
            );
        }
        for &i in grads.touched_items() {
            let span = i as usize * d..(i as usize + 1) * d;
            update(
                model.item_mut(i),
                grads.item(i),
                &mut self.item_m[span.clone()],
                &mut self.item_v[span],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BipartiteGraph, ConstraintWeights, NeighborIndex};
    use crate::model::{gradients, GraphContext, Objective, TrainBatch};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut model =
            EmbeddingModel::from_parts(2, 1, 2, vec![1.0, 0.0, 5.0, 5.0], vec![1.0, 0.5]).unwrap();
        let g = BipartiteGraph::from_pairs(2, 1, &[(0, 0)]);
        let cw = ConstraintWeights::new(&g);
        let idx = NeighborIndex::empty(1);
        let ctx = GraphContext {
            constraint: &cw,
            item_neighbors: &idx,
            user_neighbors: None,
        };
        let mut grads = Gradients::for_model(&model);
        gradients(
            &model,
            &TrainBatch::new(vec![(0, 0)], vec![], 0),
            &ctx,
            &Objective::default(),
            &mut grads,
        );
        let mut adam = Adam::new(&model, 0.01, AdamConfig::default());
        let before = model.clone();
        adam.step(&mut model, &grads);
        // bias-corrected first step is lr·g/(|g|+eps) ≈ lr·sign(g)
        for k in 0..2 {
            let g = grads.user(0)[k];
            let moved = model.user(0)[k] - before.user(0)[k];
            assert!(
                (moved + 0.01 * g.signum()).abs() < 1e-6,
                "k={k} moved={moved}"
            );
        }
        // untouched user row is unchanged
        assert_eq!(model.user(1), before.user(1));
        assert_eq!(adam.steps(), 1);
        assert!(adam.moments_finite());
    }

    #[test]
    fn decay_shrinks_touched_rows_only() {
        let mut model = EmbeddingModel::from_parts(2, 1, 1, vec![2.0, 3.0], vec![1.0]).unwrap();
        let mut grads = Gradients::for_model(&model);
        let g = BipartiteGraph::from_pairs(2, 1, &[(0, 0)]);
        let cw = ConstraintWeights::new(&g);
        let idx = NeighborIndex::empty(1);
        let ctx = GraphContext {
            constraint: &cw,
            item_neighbors: &idx,
            user_neighbors: None,
        };
        let batch = TrainBatch::new(vec![(0, 0)], vec![], 0);
        gradients(&model, &batch, &ctx, &Objective::default(), &mut grads);
        let plain = {
            let mut m = model.clone();
            Adam::new(&m, 0.1, AdamConfig::default()).step(&mut m, &grads);
            m
        };
        Adam::new(&model, 0.1, AdamConfig::default())
            .with_weight_decay(0.5)
            .step(&mut model, &grads);
        assert!((model.user(0)[0] - (plain.user(0)[0] - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(model.user(1), plain.user(1));
    }
}
