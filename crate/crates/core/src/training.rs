//! Negative sampling, mini-batch training and validation-based early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionDataset;
use crate::evaluation::{evaluate, EvalError, Split};
use crate::graph::{
    build_item_neighbors, build_user_neighbors, BipartiteGraph, ConstraintWeights, NeighborIndex,
};
use crate::model::{
    gradients, regularization, EmbeddingModel, Gradients, GraphContext, ItemTerm, LossBreakdown,
    Objective, ScoreMode, TrainBatch,
};
use crate::optim::{Adam, AdamConfig};

/// Cutoff used for model selection on the validation split.
pub const SELECTION_CUTOFF: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no negative candidate for user {user} (positive item {item})")]
    NoNegativeCandidate { user: u32, item: u32 },
    #[error("non-finite loss in epoch {epoch}, batch {batch}: {loss:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: LossBreakdown,
    },
    #[error("train split is empty")]
    EmptyTrain,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Hyperparameters for [`fit`]. Defaults follow the reference settings
/// (d = 64, lr = 1e-4, batch 1024, R = 300, K = 10, L2 1e-4, init std 1e-4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Negatives per positive (R).
    pub negatives: usize,
    /// Neighbors kept per item (K); 0 disables the item–item term.
    pub neighbors: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub reg: f64,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Replace the user–item form of the item–item term with the
    /// item–item-pair form.
    pub item_pair_ablation: bool,
    /// Add the user–user co-occurrence term.
    pub user_user: bool,
    /// Weight of the user–user term when enabled.
    pub user_weight: f64,
    /// Neighbors kept per user for the user–user term.
    pub user_neighbors: usize,
    /// Reject negatives the user has interacted with in train, not just the
    /// paired positive.
    pub strict_negatives: bool,
    /// Score pairs by cosine instead of raw dot product inside the losses.
    pub normalize_in_loss: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            lr: 1e-4,
            batch_size: 1024,
            negatives: 300,
            neighbors: 10,
            lambda: 1.0,
            gamma: 2.5,
            reg: 1e-4,
            max_epochs: 100,
            patience: 10,
            eval_interval: 5,
            seed: 2021,
            init_std: 1e-4,
            item_pair_ablation: false,
            user_user: false,
            user_weight: 1.0,
            user_neighbors: 10,
            strict_negatives: false,
            normalize_in_loss: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        let finite = [
            self.lr,
            self.lambda,
            self.gamma,
            self.reg,
            self.init_std,
            self.user_weight,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return fail("all real-valued settings must be finite");
        }
        if self.dim == 0 {
            return fail("dim must be positive");
        }
        if self.lr <= 0.0 {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.lambda < 0.0 || self.gamma < 0.0 || self.user_weight < 0.0 {
            return fail("loss weights must be non-negative");
        }
        if self.reg < 0.0 || self.init_std < 0.0 {
            return fail("reg and init_std must be non-negative");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be positive");
        }
        if self.user_user && self.user_neighbors == 0 {
            return fail("user_user needs user_neighbors >= 1");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.lambda,
            gamma: if self.neighbors == 0 { 0.0 } else { self.gamma },
            item_term: if self.item_pair_ablation {
                ItemTerm::ItemItem
            } else {
                ItemTerm::UserItem
            },
            user_weight: if self.user_user {
                self.user_weight
            } else {
                0.0
            },
            reg: self.reg,
            score_mode: if self.normalize_in_loss {
                ScoreMode::Cosine
            } else {
                ScoreMode::Dot
            },
        }
    }
}

/// Draws `count` items uniformly with replacement from `[0, num_items)`
/// excluding `positive`.
pub fn sample_negatives<R: Rng>(
    rng: &mut R,
    positive: u32,
    count: usize,
    num_items: usize,
) -> Option<Vec<u32>> {
    let mut out = Vec::with_capacity(count);
    sample_negatives_into(rng, positive, count, num_items, &mut out).then_some(out)
}

fn sample_negatives_into<R: Rng>(
    rng: &mut R,
    positive: u32,
    count: usize,
    num_items: usize,
    out: &mut Vec<u32>,
) -> bool {
    if count == 0 {
        return true;
    }
    if num_items < 2 {
        return false;
    }
    let upper = num_items as u32 - 1;
    for _ in 0..count {
        // uniform over the num_items − 1 other items
        let j = rng.random_range(0..upper);
        out.push(if j >= positive { j + 1 } else { j });
    }
    true
}

/// Entries i.i.d. `N(0, std²)`, users first then items.
pub fn init_embeddings<R: Rng>(
    num_users: usize,
    num_items: usize,
    dim: usize,
    std: f64,
    rng: &mut R,
) -> EmbeddingModel {
    let mut model = EmbeddingModel::zeros(num_users, num_items, dim);
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        for u in 0..num_users as u32 {
            model
                .user_mut(u)
                .iter_mut()
                .for_each(|x| *x = normal.sample(rng));
        }
        for i in 0..num_items as u32 {
            model
                .item_mut(i)
                .iter_mut()
                .for_each(|x| *x = normal.sample(rng));
        }
    }
    model
}

/// Per-positive mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    pub loss_o: f64,
    pub loss_c: f64,
    pub loss_i: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    /// Weighted objective including L2.
    pub loss_total: f64,
    pub seconds: f64,
}

/// Owns the model, optimizer state and RNG for one training run.
pub struct Trainer<'a> {
    dataset: &'a InteractionDataset,
    config: TrainConfig,
    objective: Objective,
    graph: BipartiteGraph,
    constraint: ConstraintWeights,
    item_neighbors: NeighborIndex,
    user_neighbors: Option<NeighborIndex>,
    model: EmbeddingModel,
    optimizer: Adam,
    grads: Gradients,
    rng: ChaCha8Rng,
    order: Vec<u32>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a InteractionDataset, config: TrainConfig) -> Result<Self, TrainError> {
        Self::with_item_neighbors(dataset, config, None)
    }

    /// Like [`new`](Self::new), reusing a prebuilt (e.g. cached) item index.
    pub fn with_item_neighbors(
        dataset: &'a InteractionDataset,
        config: TrainConfig,
        item_neighbors: Option<NeighborIndex>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if dataset.train_pairs.is_empty() {
            return Err(TrainError::EmptyTrain);
        }
        // decay is applied by the optimizer; the penalty is only logged
        let objective = Objective {
            reg: 0.0,
            ..config.objective()
        };
        let graph = BipartiteGraph::build(dataset);
        let constraint = ConstraintWeights::new(&graph);
        let item_neighbors = match item_neighbors {
            Some(idx) if idx.num_nodes() == dataset.num_items => idx,
            _ if objective.gamma != 0.0 => build_item_neighbors(&graph, config.neighbors)
                .map_err(|e| TrainError::Config(e.to_string()))?,
            _ => NeighborIndex::empty(dataset.num_items),
        };
        let user_neighbors = if config.user_user {
            Some(
                build_user_neighbors(&graph, config.user_neighbors)
                    .map_err(|e| TrainError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = init_embeddings(
            dataset.num_users,
            dataset.num_items,
            config.dim,
            config.init_std,
            &mut rng,
        );
        let optimizer = Adam::new(&model, config.lr, config.adam).with_weight_decay(config.reg);
        let grads = Gradients::for_model(&model);
        let order = (0..dataset.train_pairs.len() as u32).collect();
        Ok(Trainer {
            dataset,
            config,
            objective,
            graph,
            constraint,
            item_neighbors,
            user_neighbors,
            model,
            optimizer,
            grads,
            rng,
            order,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn into_model(self) -> EmbeddingModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn graph(&self) -> &BipartiteGraph {
        &self.graph
    }

    pub fn item_neighbors(&self) -> &NeighborIndex {
        &self.item_neighbors
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn fill_negatives(&mut self, batch: &mut TrainBatch) -> Result<(), TrainError> {
        let r = self.config.negatives;
        let n = self.dataset.num_items;
        batch.negatives.clear();
        batch.num_negatives = r;
        for &(u, i) in &batch.positives {
            if self.config.strict_negatives {
                let seen = self.graph.user_items.row(u as usize);
                if r > 0 && seen.len() >= n {
                    return Err(TrainError::NoNegativeCandidate { user: u, item: i });
                }
                for _ in 0..r {
                    loop {
                        let j = self.rng.random_range(0..n as u32);
                        if seen.binary_search(&j).is_err() {
                            batch.negatives.push(j);
                            break;
                        }
                    }
                }
            } else if !sample_negatives_into(&mut self.rng, i, r, n, &mut batch.negatives) {
                return Err(TrainError::NoNegativeCandidate { user: u, item: i });
            }
        }
        Ok(())
    }

    /// One shuffled pass over the train pairs.
    pub fn train_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let penalty = Objective {
            reg: self.config.reg,
            ..self.objective
        };
        let start = Instant::now();
        self.epoch += 1;
        let mut order = std::mem::take(&mut self.order);
        order.shuffle(&mut self.rng);
        let mut sums = LossBreakdown::default();
        let mut total = 0.0;
        let mut batch = TrainBatch::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            batch.positives.clear();
            batch
                .positives
                .extend(chunk.iter().map(|&p| self.dataset.train_pairs[p as usize]));
            self.fill_negatives(&mut batch)?;
            let ctx = GraphContext {
                constraint: &self.constraint,
                item_neighbors: &self.item_neighbors,
                user_neighbors: self.user_neighbors.as_ref(),
            };
            let mut loss = gradients(&self.model, &batch, &ctx, &self.objective, &mut self.grads);
            loss.reg = regularization(&self.model, &batch, &ctx, &penalty);
            if !loss.is_finite() {
                self.order = order;
                return Err(TrainError::NonFinite {
                    epoch: self.epoch,
                    batch: b,
                    loss,
                });
            }
            self.optimizer.step(&mut self.model, &self.grads);
            sums.o += loss.o;
            sums.c += loss.c;
            sums.i += loss.i;
            sums.u += loss.u;
            sums.reg += loss.reg;
            total += loss.total(&self.objective);
            batches += 1;
        }
        self.order = order;
        let n = self.dataset.train_pairs.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            batches,
            loss_o: sums.o / n,
            loss_c: sums.c / n,
            loss_i: sums.i / n,
            loss_u: sums.u / n,
            loss_reg: sums.reg / n,
            loss_total: total / n,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Validation metrics recorded in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidMetrics {
    pub recall: f64,
    pub ndcg: f64,
    pub improved: bool,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(flatten)]
    pub stats: EpochStats,
    /// Seconds since the start of training, excluding validation.
    pub train_seconds: f64,
    pub valid: Option<ValidMetrics>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Best checkpoint by validation Recall@20, or the final model when there
    /// is no validation split.
    pub model: EmbeddingModel,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_valid_recall: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub fn fit(dataset: &InteractionDataset, config: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_with(dataset, config, None, |_| {})
}

/// [`fit`] with an optional prebuilt item index and a per-epoch callback.
pub fn fit_with(
    dataset: &InteractionDataset,
    config: &TrainConfig,
    item_neighbors: Option<NeighborIndex>,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<FitResult, TrainError> {
    let mut trainer = Trainer::with_item_neighbors(dataset, config.clone(), item_neighbors)?;
    let can_validate = !dataset.valid_pairs.is_empty();
    if !can_validate {
        log::warn!("validation split is empty; early stopping disabled");
    }
    let mut log_records = Vec::new();
    let mut best: Option<(f64, usize, EmbeddingModel)> = None;
    let mut stale = 0;
    let mut train_seconds = 0.0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let stats = trainer.train_epoch()?;
        train_seconds += stats.seconds;
        let due = epoch % config.eval_interval == 0 || epoch == config.max_epochs;
        let valid = if can_validate && due {
            let report = evaluate(trainer.model(), dataset, &[SELECTION_CUTOFF], Split::Valid)?;
            let recall = report.recall[0];
            let improved = best.as_ref().is_none_or(|(b, _, _)| recall > *b);
            if improved {
                best = Some((recall, epoch, trainer.model().clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            Some(ValidMetrics {
                recall,
                ndcg: report.ndcg[0],
                improved,
            })
        } else {
            None
        };
        let record = LogRecord {
            stats,
            train_seconds,
            valid,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} ({:.2}s){}",
            record.stats.loss_total,
            record.stats.seconds,
            valid
                .map(|v| format!(" valid recall@20 {:.5}", v.recall))
                .unwrap_or_default()
        );
        on_record(&record);
        log_records.push(record);
        if can_validate && stale >= config.patience.max(1) {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    let epochs_run = trainer.epochs_done();
    Ok(match best {
        Some((recall, epoch, model)) => FitResult {
            model,
            log: log_records,
            best_epoch: epoch,
            best_valid_recall: Some(recall),
            epochs_run,
            stopped_early,
        },
        None => FitResult {
            model: trainer.into_model(),
            log: log_records,
            best_epoch: epochs_run,
            best_valid_recall: None,
            epochs_run,
            stopped_early,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_negatives_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_negatives(&mut rng, 0, 0, 10), Some(vec![]));
    }

    #[test]
    fn single_item_has_no_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_negatives(&mut rng, 0, 3, 1), None);
    }

    #[test]
    fn negatives_never_hit_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_negatives(&mut rng, 2, 5_000, 4).unwrap();
        assert!(s.iter().all(|&j| j != 2 && j < 4));
        for j in [0, 1, 3] {
            assert!(s.contains(&j));
        }
    }

    #[test]
    fn init_is_seeded_gaussian() {
        let a = init_embeddings(50, 60, 16, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        let b = init_embeddings(50, 60, 16, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let vals: Vec<f64> = a
            .user_table()
            .iter()
            .chain(a.item_table())
            .copied()
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.lambda = -1.0));
        assert!(bad(|c| c.gamma = f64::NAN));
        assert!(bad(|c| c.dim = 0));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.eval_interval = 0));
    }

    #[test]
    fn config_toml_like_round_trip_via_json() {
        let c = TrainConfig {
            lambda: 0.5,
            ..TrainConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = serde_json::from_str(r#"{"gamma": 1.5}"#).unwrap();
        assert_eq!(partial.gamma, 1.5);
        assert_eq!(partial.negatives, 300);
    }

    #[test]
    fn strict_negatives_exclude_history() {
        let ds = InteractionDataset::from_indices(1, 4, [(0, 0), (0, 1), (0, 2)], [], []).unwrap();
        let config = TrainConfig {
            strict_negatives: true,
            negatives: 20,
            neighbors: 0,
            dim: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&ds, config).unwrap();
        let mut batch = TrainBatch {
            positives: vec![(0, 0)],
            ..TrainBatch::default()
        };
        t.fill_negatives(&mut batch).unwrap();
        assert!(batch.negatives.iter().all(|&j| j == 3));
    }

    #[test]
    fn strict_negatives_error_when_user_saw_everything() {
        let ds = InteractionDataset::from_indices(1, 2, [(0, 0), (0, 1)], [], []).unwrap();
        let config = TrainConfig {
            strict_negatives: true,
            negatives: 1,
            neighbors: 0,
            dim: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&ds, config).unwrap();
        assert!(matches!(
            t.train_epoch(),
            Err(TrainError::NoNegativeCandidate { user: 0, .. })
        ));
    }
}
