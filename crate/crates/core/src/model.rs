//! Embedding storage, the loss terms and their analytic gradients.
//!
//! Every loss is a weighted sum of `softplus(−s·x)` = `−log σ(s·x)` over
//! pairs of embedding rows, where `x` is the pair score and `s = ±1` marks a
//! positive or negative pair:
//!
//! | term   | pairs                                   | weight     |
//! |--------|-----------------------------------------|------------|
//! | `L_O`  | `(u,i)` positives, `(u,j)` negatives    | 1          |
//! | `L_C`  | same pairs as `L_O`                     | `β`        |
//! | `L_I`  | `(u,j)`, `j ∈ S(i)` for each positive   | `ω_ij`     |
//! | `L'_I` | `(i,j)`, `j ∈ S(i)` for each positive   | `ω_ij`     |
//! | `L_U`  | `(v,i)`, `v ∈ S_U(u)` for each positive | `ω^U_uv`   |
//!
//! Only the negative pairs carry `s = −1`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ConstraintWeights, NeighborIndex};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("embedding shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("embedding contains a non-finite value")]
    NonFinite,
}

/// Dense user and item embedding tables, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    dim: usize,
    num_users: usize,
    num_items: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UGCNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl EmbeddingModel {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        EmbeddingModel {
            dim,
            num_users,
            num_items,
            users: vec![0.0; num_users * dim],
            items: vec![0.0; num_items * dim],
        }
    }

    pub fn from_parts(
        num_users: usize,
        num_items: usize,
        dim: usize,
        users: Vec<f64>,
        items: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if users.len() != num_users * dim || items.len() != num_items * dim {
            return Err(ModelError::Shape(format!(
                "expected {}x{dim} users and {}x{dim} items, got {} and {} values",
                num_users,
                num_items,
                users.len(),
                items.len()
            )));
        }
        let model = EmbeddingModel {
            dim,
            num_users,
            num_items,
            users,
            items,
        };
        if !model.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    #[inline]
    pub fn user(&self, u: u32) -> &[f64] {
        let s = u as usize * self.dim;
        &self.users[s..s + self.dim]
    }

    #[inline]
    pub fn item(&self, i: u32) -> &[f64] {
        let s = i as usize * self.dim;
        &self.items[s..s + self.dim]
    }

    #[inline]
    pub fn user_mut(&mut self, u: u32) -> &mut [f64] {
        let s = u as usize * self.dim;
        &mut self.users[s..s + self.dim]
    }

    #[inline]
    pub fn item_mut(&mut self, i: u32) -> &mut [f64] {
        let s = i as usize * self.dim;
        &mut self.items[s..s + self.dim]
    }

    #[inline]
    pub fn row(&self, node: Node) -> &[f64] {
        match node {
            Node::User(u) => self.user(u),
            Node::Item(i) => self.item(i),
        }
    }

    pub fn row_mut(&mut self, node: Node) -> &mut [f64] {
        match node {
            Node::User(u) => self.user_mut(u),
            Node::Item(i) => self.item_mut(i),
        }
    }

    pub fn user_table(&self) -> &[f64] {
        &self.users
    }

    pub fn item_table(&self) -> &[f64] {
        &self.items
    }

    /// Ranking score `e_u·e_i`.
    #[inline]
    pub fn score(&self, u: u32, i: u32) -> f64 {
        dot(self.user(u), self.item(i))
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|x| x.is_finite())
    }

    /// Header (magic, version u32, num_users u64, num_items u64, dim u64)
    /// followed by the user then item tables as little-endian f64, row-major.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [self.num_users, self.num_items, self.dim] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity((self.users.len() + self.items.len()) * 8);
        for x in self.users.iter().chain(&self.items) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut v = [0u8; 4];
        input.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::BadVersion(version));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *d = u64::from_le_bytes(b) as usize;
        }
        let [num_users, num_items, dim] = dims;
        let total = num_users
            .checked_add(num_items)
            .and_then(|n| n.checked_mul(dim))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ModelError::Shape("checkpoint header overflows".into()))?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != total {
            return Err(ModelError::Shape(format!(
                "checkpoint body has {} bytes, header implies {total}",
                bytes.len()
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let users: Vec<f64> = values.by_ref().take(num_users * dim).collect();
        let items: Vec<f64> = values.collect();
        Self::from_parts(num_users, num_items, dim, users, items)
    }
}

/// A row of either embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    User(u32),
    Item(u32),
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(z)`.
#[inline]
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// How a pair of embedding rows is turned into a logit inside the losses.
/// Ranking always uses the raw dot product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    #[default]
    Dot,
    /// Dot product of the unit-normalized rows.
    Cosine,
}

const NORM_FLOOR: f64 = 1e-12;

impl ScoreMode {
    #[inline]
    pub fn logit(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            ScoreMode::Dot => dot(a, b),
            ScoreMode::Cosine => {
                let na = dot(a, a).sqrt().max(NORM_FLOOR);
                let nb = dot(b, b).sqrt().max(NORM_FLOOR);
                dot(a, b) / (na * nb)
            }
        }
    }
}

/// Training examples for one step: positives and `R` sampled negatives each.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainBatch {
    pub positives: Vec<(u32, u32)>,
    /// `num_negatives` item indices per positive, flattened.
    pub negatives: Vec<u32>,
    pub num_negatives: usize,
}

impl TrainBatch {
    pub fn new(positives: Vec<(u32, u32)>, negatives: Vec<u32>, num_negatives: usize) -> Self {
        assert_eq!(negatives.len(), positives.len() * num_negatives);
        TrainBatch {
            positives,
            negatives,
            num_negatives,
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    #[inline]
    pub fn negatives_of(&self, p: usize) -> &[u32] {
        &self.negatives[p * self.num_negatives..(p + 1) * self.num_negatives]
    }
}

/// Precomputed graph tables a batch is scored against.
#[derive(Debug, Clone, Copy)]
pub struct GraphContext<'a> {
    pub constraint: &'a ConstraintWeights,
    pub item_neighbors: &'a NeighborIndex,
    /// Only needed when the user–user term is enabled.
    pub user_neighbors: Option<&'a NeighborIndex>,
}

/// Which pairs the item–item constraint is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemTerm {
    /// `(u, j)` for `j ∈ S(i)`.
    #[default]
    UserItem,
    /// `(i, j)` for `j ∈ S(i)` (ablation).
    ItemItem,
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Weight of `L_C`.
    pub lambda: f64,
    /// Weight of the item–item term.
    pub gamma: f64,
    pub item_term: ItemTerm,
    /// Weight of `L_U`; zero disables it.
    pub user_weight: f64,
    /// L2 weight on rows touched by the batch.
    pub reg: f64,
    pub score_mode: ScoreMode,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            lambda: 1.0,
            gamma: 2.5,
            item_term: ItemTerm::UserItem,
            user_weight: 0.0,
            reg: 0.0,
            score_mode: ScoreMode::Dot,
        }
    }
}

impl Objective {
    fn uses_user_term(&self) -> bool {
        self.user_weight != 0.0
    }
}

/// Unweighted value of each loss component over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub o: f64,
    pub c: f64,
    /// `L_I` or `L'_I`, depending on [`ItemTerm`].
    pub i: f64,
    pub u: f64,
    pub reg: f64,
}

impl LossBreakdown {
    /// Weighted objective including the L2 part.
    pub fn total(&self, obj: &Objective) -> f64 {
        combine(self.o, self.c, self.i, self.u, obj) + self.reg
    }

    pub fn is_finite(&self) -> bool {
        [self.o, self.c, self.i, self.u, self.reg]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// `o + λc + γi + μu`, skipping zero-weighted terms so that a zero weight
/// leaves `o` bit-for-bit unchanged.
fn combine(o: f64, c: f64, i: f64, u: f64, obj: &Objective) -> f64 {
    let mut total = o;
    if obj.lambda != 0.0 {
        total += obj.lambda * c;
    }
    if obj.gamma != 0.0 {
        total += obj.gamma * i;
    }
    if obj.uses_user_term() {
        total += obj.user_weight * u;
    }
    total
}

pub fn loss_o(model: &EmbeddingModel, batch: &TrainBatch, mode: ScoreMode) -> f64 {
    let mut loss = 0.0;
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        let eu = model.user(u);
        loss += neg_log_sigmoid(mode.logit(eu, model.item(i)));
        for &j in batch.negatives_of(p) {
            loss += neg_log_sigmoid(-mode.logit(eu, model.item(j)));
        }
    }
    loss
}

pub fn loss_c(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    constraint: &ConstraintWeights,
    mode: ScoreMode,
) -> f64 {
    let mut loss = 0.0;
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        let eu = model.user(u);
        loss += constraint.beta(u, i) * neg_log_sigmoid(mode.logit(eu, model.item(i)));
        for &j in batch.negatives_of(p) {
            loss += constraint.beta(u, j) * neg_log_sigmoid(-mode.logit(eu, model.item(j)));
        }
    }
    loss
}

pub fn loss_i(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    neighbors: &NeighborIndex,
    mode: ScoreMode,
) -> f64 {
    let mut loss = 0.0;
    for &(u, i) in &batch.positives {
        let (items, weights) = neighbors.neighbors(i);
        for (&j, &w) in items.iter().zip(weights) {
            loss += w * neg_log_sigmoid(mode.logit(model.user(u), model.item(j)));
        }
    }
    loss
}

pub fn loss_i_prime(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    neighbors: &NeighborIndex,
    mode: ScoreMode,
) -> f64 {
    let mut loss = 0.0;
    for &(_, i) in &batch.positives {
        let (items, weights) = neighbors.neighbors(i);
        for (&j, &w) in items.iter().zip(weights) {
            loss += w * neg_log_sigmoid(mode.logit(model.item(i), model.item(j)));
        }
    }
    loss
}

pub fn loss_u(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    user_neighbors: &NeighborIndex,
    mode: ScoreMode,
) -> f64 {
    let mut loss = 0.0;
    for &(u, i) in &batch.positives {
        let (users, weights) = user_neighbors.neighbors(u);
        for (&v, &w) in users.iter().zip(weights) {
            loss += w * neg_log_sigmoid(mode.logit(model.user(v), model.item(i)));
        }
    }
    loss
}

fn item_component(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    ctx: &GraphContext,
    obj: &Objective,
) -> f64 {
    match obj.item_term {
        ItemTerm::UserItem => loss_i(model, batch, ctx.item_neighbors, obj.score_mode),
        ItemTerm::ItemItem => loss_i_prime(model, batch, ctx.item_neighbors, obj.score_mode),
    }
}

fn user_component(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    ctx: &GraphContext,
    obj: &Objective,
) -> f64 {
    match ctx.user_neighbors {
        Some(idx) if obj.uses_user_term() => loss_u(model, batch, idx, obj.score_mode),
        _ => 0.0,
    }
}

/// `L_O + λL_C + γL_I (+ μL_U)`, without the L2 part.
pub fn total_loss(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    ctx: &GraphContext,
    obj: &Objective,
) -> f64 {
    let o = loss_o(model, batch, obj.score_mode);
    let c = if obj.lambda != 0.0 {
        loss_c(model, batch, ctx.constraint, obj.score_mode)
    } else {
        0.0
    };
    let i = if obj.gamma != 0.0 {
        item_component(model, batch, ctx, obj)
    } else {
        0.0
    };
    let u = user_component(model, batch, ctx, obj);
    combine(o, c, i, u, obj)
}

/// Rows that receive a gradient from `batch` under `obj`, sorted and unique.
pub fn touched_rows(
    batch: &TrainBatch,
    ctx: &GraphContext,
    obj: &Objective,
) -> (Vec<u32>, Vec<u32>) {
    let mut users = Vec::new();
    let mut items = Vec::new();
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        users.push(u);
        items.push(i);
        items.extend_from_slice(batch.negatives_of(p));
        if obj.gamma != 0.0 {
            items.extend_from_slice(ctx.item_neighbors.neighbors(i).0);
        }
        if let (true, Some(idx)) = (obj.uses_user_term(), ctx.user_neighbors) {
            users.extend_from_slice(idx.neighbors(u).0);
        }
    }
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    (users, items)
}

/// `reg · Σ ‖e‖²` over the rows touched by the batch.
pub fn regularization(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    ctx: &GraphContext,
    obj: &Objective,
) -> f64 {
    if obj.reg == 0.0 {
        return 0.0;
    }
    let (users, items) = touched_rows(batch, ctx, obj);
    let sq: f64 = users
        .iter()
        .map(|&u| dot(model.user(u), model.user(u)))
        .chain(items.iter().map(|&i| dot(model.item(i), model.item(i))))
        .sum();
    obj.reg * sq
}

pub fn loss_breakdown(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    ctx: &GraphContext,
    obj: &Objective,
) -> LossBreakdown {
    LossBreakdown {
        o: loss_o(model, batch, obj.score_mode),
        c: loss_c(model, batch, ctx.constraint, obj.score_mode),
        i: item_component(model, batch, ctx, obj),
        u: user_component(model, batch, ctx, obj),
        reg: regularization(model, batch, ctx, obj),
    }
}

/// Sparse gradient accumulator sized like the model; only rows touched since
/// the last [`clear`](Self::clear) are nonzero.
#[derive(Debug, Clone)]
pub struct Gradients {
    dim: usize,
    user_grad: Vec<f64>,
    item_grad: Vec<f64>,
    user_mark: Vec<bool>,
    item_mark: Vec<bool>,
    touched_users: Vec<u32>,
    touched_items: Vec<u32>,
}

impl Gradients {
    pub fn for_model(model: &EmbeddingModel) -> Self {
        Gradients {
            dim: model.dim,
            user_grad: vec![0.0; model.users.len()],
            item_grad: vec![0.0; model.items.len()],
            user_mark: vec![false; model.num_users],
            item_mark: vec![false; model.num_items],
            touched_users: Vec::new(),
            touched_items: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        let d = self.dim;
        for &u in &self.touched_users {
            self.user_grad[u as usize * d..(u as usize + 1) * d].fill(0.0);
            self.user_mark[u as usize] = false;
        }
        for &i in &self.touched_items {
            self.item_grad[i as usize * d..(i as usize + 1) * d].fill(0.0);
            self.item_mark[i as usize] = false;
        }
        self.touched_users.clear();
        self.touched_items.clear();
    }

    /// Touched user rows in first-touch order.
    pub fn touched_users(&self) -> &[u32] {
        &self.touched_users
    }

    pub fn touched_items(&self) -> &[u32] {
        &self.touched_items
    }

    pub fn user(&self, u: u32) -> &[f64] {
        &self.user_grad[u as usize * self.dim..(u as usize + 1) * self.dim]
    }

    pub fn item(&self, i: u32) -> &[f64] {
        &self.item_grad[i as usize * self.dim..(i as usize + 1) * self.dim]
    }

    pub fn row(&self, node: Node) -> &[f64] {
        match node {
            Node::User(u) => self.user(u),
            Node::Item(i) => self.item(i),
        }
    }

    #[inline]
    fn row_mut(&mut self, node: Node) -> &mut [f64] {
        let d = self.dim;
        match node {
            Node::User(u) => {
                if !self.user_mark[u as usize] {
                    self.user_mark[u as usize] = true;
                    self.touched_users.push(u);
                }
                &mut self.user_grad[u as usize * d..(u as usize + 1) * d]
            }
            Node::Item(i) => {
                if !self.item_mark[i as usize] {
                    self.item_mark[i as usize] = true;
                    self.touched_items.push(i);
                }
                &mut self.item_grad[i as usize * d..(i as usize + 1) * d]
            }
        }
    }

    /// Adds `weight · softplus(−sign·x(a,b))` to the objective's gradient and
    /// returns the unweighted softplus value.
    #[inline]
    fn add_term(
        &mut self,
        model: &EmbeddingModel,
        a: Node,
        b: Node,
        sign: f64,
        weight: f64,
        mode: ScoreMode,
    ) -> f64 {
        let ea = model.row(a);
        let eb = model.row(b);
        match mode {
            ScoreMode::Dot => {
                let x = dot(ea, eb);
                let dldx = -weight * sign * sigmoid(-sign * x);
                axpy(self.row_mut(a), dldx, eb);
                axpy(self.row_mut(b), dldx, ea);
                softplus(-sign * x)
            }
            ScoreMode::Cosine => {
                let na = dot(ea, ea).sqrt().max(NORM_FLOOR);
                let nb = dot(eb, eb).sqrt().max(NORM_FLOOR);
                let x = dot(ea, eb) / (na * nb);
                let dldx = -weight * sign * sigmoid(-sign * x);
                // ∂x/∂e_a = e_b/(|a||b|) − x·e_a/|a|²
                let ga = self.row_mut(a);
                for k in 0..ea.len() {
                    ga[k] += dldx * (eb[k] / (na * nb) - x * ea[k] / (na * na));
                }
                let gb = self.row_mut(b);
                for k in 0..eb.len() {
                    gb[k] += dldx * (ea[k] / (na * nb) - x * eb[k] / (nb * nb));
                }
                softplus(-sign * x)
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Clears `grads` and fills it with `∂/∂e` of the full objective
/// (`total_loss + regularization`), returning the loss components evaluated
/// on the way.
///
/// `L_O` and `L_C` share their pairs, so each such pair is scored once with
/// weight `1 + λβ`.
pub fn gradients(
    model: &EmbeddingModel,
    batch: &TrainBatch,
    ctx: &GraphContext,
    obj: &Objective,
    grads: &mut Gradients,
) -> LossBreakdown {
    grads.clear();
    let mode = obj.score_mode;
    let mut out = LossBreakdown::default();
    for (p, &(u, i)) in batch.positives.iter().enumerate() {
        let user = Node::User(u);
        let beta = ctx.constraint.beta(u, i);
        let sp = grads.add_term(
            model,
            user,
            Node::Item(i),
            1.0,
            1.0 + obj.lambda * beta,
            mode,
        );
        out.o += sp;
        out.c += beta * sp;
        for &j in batch.negatives_of(p) {
            let beta = ctx.constraint.beta(u, j);
            let sp = grads.add_term(
                model,
                user,
                Node::Item(j),
                -1.0,
                1.0 + obj.lambda * beta,
                mode,
            );
            out.o += sp;
            out.c += beta * sp;
        }
        if obj.gamma != 0.0 {
            let (items, weights) = ctx.item_neighbors.neighbors(i);
            let anchor = match obj.item_term {
                ItemTerm::UserItem => user,
                ItemTerm::ItemItem => Node::Item(i),
            };
            for (&j, &w) in items.iter().zip(weights) {
                out.i += w * grads.add_term(model, anchor, Node::Item(j), 1.0, obj.gamma * w, mode);
            }
        }
        if let (true, Some(idx)) = (obj.uses_user_term(), ctx.user_neighbors) {
            let (users, weights) = idx.neighbors(u);
            for (&v, &w) in users.iter().zip(weights) {
                out.u += w * grads.add_term(
                    model,
                    Node::User(v),
                    Node::Item(i),
                    1.0,
                    obj.user_weight * w,
                    mode,
                );
            }
        }
    }
    if obj.reg != 0.0 {
        let mut sq = 0.0;
        let d = grads.dim;
        for idx in 0..grads.touched_users.len() {
            let u = grads.touched_users[idx] as usize;
            let e = model.user(u as u32);
            sq += dot(e, e);
            axpy(&mut grads.user_grad[u * d..(u + 1) * d], 2.0 * obj.reg, e);
        }
        for idx in 0..grads.touched_items.len() {
            let i = grads.touched_items[idx] as usize;
            let e = model.item(i as u32);
            sq += dot(e, e);
            axpy(&mut grads.item_grad[i * d..(i + 1) * d], 2.0 * obj.reg, e);
        }
        out.reg = obj.reg * sq;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BipartiteGraph, NeighborIndex};
    use std::f64::consts::LN_2;

    fn model_with(users: &[&[f64]], items: &[&[f64]]) -> EmbeddingModel {
        let d = users[0].len();
        EmbeddingModel::from_parts(users.len(), items.len(), d, users.concat(), items.concat())
            .unwrap()
    }

    #[test]
    fn score_examples() {
        let m = model_with(&[&[1.0, 0.0], &[0.0, 0.0]], &[&[0.5, 2.0]]);
        assert_eq!(m.score(0, 0), 0.5);
        assert_eq!(m.score(1, 0), 0.0);
    }

    #[test]
    fn stable_log_sigmoid() {
        for z in [-80.0, -30.0, -1.0, 0.0, 1.0, 30.0, 80.0, 800.0, -800.0] {
            let v = neg_log_sigmoid(z);
            assert!(v.is_finite() && v >= 0.0, "z={z} v={v}");
        }
        assert!((neg_log_sigmoid(0.0) - LN_2).abs() < 1e-16);
        assert!((neg_log_sigmoid(-80.0) - 80.0).abs() < 1e-12);
        assert!(neg_log_sigmoid(80.0) < 1e-34);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
    }

    #[test]
    fn loss_o_zero_embeddings() {
        let m = EmbeddingModel::zeros(1, 3, 4);
        let batch = TrainBatch::new(vec![(0, 0)], vec![1, 2], 2);
        assert!((loss_o(&m, &batch, ScoreMode::Dot) - 3.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_o_large_positive_score_vanishes() {
        let m = model_with(&[&[40.0]], &[&[40.0]]);
        let batch = TrainBatch::new(vec![(0, 0)], vec![], 0);
        assert!(loss_o(&m, &batch, ScoreMode::Dot) < 1e-300);
    }

    fn constraint_fixture() -> (EmbeddingModel, ConstraintWeights) {
        // user 0 has degree 1 (item 0, degree 1); item 1 has degree 3
        let g = BipartiteGraph::from_pairs(4, 2, &[(0, 0), (1, 1), (2, 1), (3, 1)]);
        (EmbeddingModel::zeros(4, 2, 3), ConstraintWeights::new(&g))
    }

    #[test]
    fn loss_c_examples() {
        let (m, w) = constraint_fixture();
        let only_pos = TrainBatch::new(vec![(0, 0)], vec![], 0);
        assert!((loss_c(&m, &only_pos, &w, ScoreMode::Dot) - LN_2).abs() < 1e-15);
        let with_neg = TrainBatch::new(vec![(0, 0)], vec![1], 1);
        let expected = LN_2 * (1.0 + 0.5f64.sqrt());
        assert!((loss_c(&m, &with_neg, &w, ScoreMode::Dot) - expected).abs() < 1e-12);
        assert!((expected - 1.1832).abs() < 1e-4);
    }

    fn two_user_index() -> NeighborIndex {
        let g = BipartiteGraph::from_pairs(2, 3, &[(0, 0), (0, 1), (1, 1), (1, 2)]);
        crate::graph::build_item_neighbors(&g, 1).unwrap()
    }

    #[test]
    fn loss_i_examples() {
        let m = EmbeddingModel::zeros(2, 3, 2);
        let idx = two_user_index();
        // S(0) = {1} with ω = √½
        let batch = TrainBatch::new(vec![(0, 0)], vec![], 0);
        let li = loss_i(&m, &batch, &idx, ScoreMode::Dot);
        assert!((li - 0.5f64.sqrt() * LN_2).abs() < 1e-15);
        assert!((li - 0.49013).abs() < 1e-5);
        let doubled = loss_i(&m, &batch, &idx.scaled(2.0), ScoreMode::Dot);
        assert!((doubled - 2.0 * li).abs() < 1e-15);
        let empty = NeighborIndex::empty(3);
        assert_eq!(loss_i(&m, &batch, &empty, ScoreMode::Dot), 0.0);
        assert!((loss_i_prime(&m, &batch, &idx, ScoreMode::Dot) - li).abs() < 1e-15);
    }

    #[test]
    fn loss_u_examples() {
        let m = EmbeddingModel::zeros(2, 2, 2);
        let batch = TrainBatch::new(vec![(0, 0)], vec![], 0);
        assert_eq!(
            loss_u(&m, &batch, &NeighborIndex::empty(2), ScoreMode::Dot),
            0.0
        );
        // B = AAᵀ = [[2,1],[1,1]], b = [3,2]: ω^U_{0,1} = 1/(3−2)·√(3/2)
        let g = BipartiteGraph::from_pairs(2, 2, &[(0, 0), (0, 1), (1, 1)]);
        let users = crate::graph::build_user_neighbors(&g, 1).unwrap();
        let (n, w) = users.neighbors(0);
        assert_eq!(n, &[1]);
        assert!((w[0] - 1.5f64.sqrt()).abs() < 1e-15);
        let one = NeighborIndex::build(
            &crate::graph::CooccurrenceGraph::build(
                &BipartiteGraph::from_pairs(2, 1, &[(0, 0), (1, 0)]).transposed(),
            ),
            1,
        )
        .unwrap();
        assert_eq!(one.neighbors(0).1, &[1.0]);
        assert!((loss_u(&m, &batch, &one, ScoreMode::Dot) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_single_positive() {
        let m = model_with(&[&[1.0, 0.0]], &[&[1.0, 0.0]]);
        let g = BipartiteGraph::from_pairs(1, 1, &[(0, 0)]);
        let cw = ConstraintWeights::new(&g);
        let idx = NeighborIndex::empty(1);
        let ctx = GraphContext {
            constraint: &cw,
            item_neighbors: &idx,
            user_neighbors: None,
        };
        let obj = Objective {
            lambda: 0.0,
            gamma: 0.0,
            ..Objective::default()
        };
        let batch = TrainBatch::new(vec![(0, 0)], vec![], 0);
        let mut grads = Gradients::for_model(&m);
        gradients(&m, &batch, &ctx, &obj, &mut grads);
        let expect = -(1.0 - sigmoid(1.0));
        assert!((grads.user(0)[0] - expect).abs() < 1e-15);
        assert!((expect + 0.268_941_42).abs() < 1e-8);
        assert_eq!(grads.user(0)[1], 0.0);
    }

    #[test]
    fn zero_embeddings_zero_gradients() {
        let m = EmbeddingModel::zeros(2, 3, 4);
        let g = BipartiteGraph::from_pairs(2, 3, &[(0, 0), (0, 1), (1, 1), (1, 2)]);
        let cw = ConstraintWeights::new(&g);
        let idx = two_user_index();
        let ctx = GraphContext {
            constraint: &cw,
            item_neighbors: &idx,
            user_neighbors: None,
        };
        let batch = TrainBatch::new(vec![(0, 0), (1, 2)], vec![2, 0], 1);
        let mut grads = Gradients::for_model(&m);
        let obj = Objective {
            reg: 1e-4,
            ..Objective::default()
        };
        gradients(&m, &batch, &ctx, &obj, &mut grads);
        for u in 0..2 {
            assert!(grads.user(u).iter().all(|&x| x == 0.0));
        }
        for i in 0..3 {
            assert!(grads.item(i).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn clear_resets_only_touched() {
        let m = model_with(&[&[1.0], &[2.0]], &[&[1.0], &[3.0]]);
        let g = BipartiteGraph::from_pairs(2, 2, &[(0, 0), (1, 1)]);
        let cw = ConstraintWeights::new(&g);
        let idx = NeighborIndex::empty(2);
        let ctx = GraphContext {
            constraint: &cw,
            item_neighbors: &idx,
            user_neighbors: None,
        };
        let mut grads = Gradients::for_model(&m);
        gradients(
            &m,
            &TrainBatch::new(vec![(0, 0)], vec![], 0),
            &ctx,
            &Objective::default(),
            &mut grads,
        );
        assert_eq!(grads.touched_users(), &[0]);
        gradients(
            &m,
            &TrainBatch::new(vec![(1, 1)], vec![], 0),
            &ctx,
            &Objective::default(),
            &mut grads,
        );
        assert_eq!(grads.touched_users(), &[1]);
        assert_eq!(grads.user(0), &[0.0]);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = model_with(&[&[1.0, -2.5], &[0.0, 3.0]], &[&[0.125, 7.0]]);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 24 + 6 * 8);
        assert_eq!(EmbeddingModel::read_checkpoint(buf.as_slice()).unwrap(), m);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingModel::read_checkpoint(bad.as_slice()),
            Err(ModelError::BadMagic)
        ));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            EmbeddingModel::read_checkpoint(short),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn from_parts_validates() {
        assert!(EmbeddingModel::from_parts(1, 1, 2, vec![0.0; 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            EmbeddingModel::from_parts(1, 1, 1, vec![f64::NAN], vec![0.0]),
            Err(ModelError::NonFinite)
        ));
    }

    #[test]
    fn cosine_logit_is_scale_free() {
        let a = [3.0, 4.0];
        let b = [6.0, 8.0];
        assert!((ScoreMode::Cosine.logit(&a, &b) - 1.0).abs() < 1e-15);
        assert_eq!(ScoreMode::Cosine.logit(&[0.0, 0.0], &b), 0.0);
    }
}
