//! Sparse interaction structure and the precomputed coefficient tables used by
//! the constraint losses.
//!
//! * [`BipartiteGraph`]: user→item CSR, its transpose, and degrees.
//! * [`beta`]: weight that pulls a user towards the fixed point of infinite
//!   symmetric-normalized propagation, `(1/d_u)·sqrt((d_u+1)/(d_i+1))`.
//! * [`CooccurrenceGraph`]: `G = AᵀA`, built by joining items through shared
//!   users, with row sums `g`.
//! * [`omega`] / [`NeighborIndex`]: co-occurrence similarity
//!   `G_ij/(g_i − G_ii)·sqrt(g_i/g_j)` and the per-item top-K lists.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{self, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::InteractionDataset;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("beta undefined for a user with no train interactions")]
    ZeroUserDegree,
    #[error("omega undefined: item {0} has zero co-occurrence degree")]
    ZeroItemDegree(u32),
    #[error("omega requires two distinct items, got {0} twice")]
    SameItem(u32),
    #[error("neighbor count K must be at least 1")]
    ZeroNeighbors,
}

/// Compressed sparse rows of column indices, each row sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl Csr {
    /// `pairs` must be sorted by `(row, col)` and unique.
    fn from_sorted_pairs(num_rows: usize, pairs: impl Iterator<Item = (u32, u32)>) -> Self {
        let mut offsets = vec![0usize; num_rows + 1];
        let mut indices = Vec::new();
        for (r, c) in pairs {
            offsets[r as usize + 1] += 1;
            indices.push(c);
        }
        for r in 0..num_rows {
            offsets[r + 1] += offsets[r];
        }
        Csr { offsets, indices }
    }

    fn transpose(&self, num_cols: usize) -> Self {
        let mut counts = vec![0usize; num_cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for c in 0..num_cols {
            counts[c + 1] += counts[c];
        }
        let mut cursor = counts.clone();
        let mut indices = vec![0u32; self.indices.len()];
        // rows visited in ascending order keep every transposed row sorted
        for r in 0..self.num_rows() {
            for &c in self.row(r) {
                indices[cursor[c as usize]] = r as u32;
                cursor[c as usize] += 1;
            }
        }
        Csr {
            offsets: counts,
            indices,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.offsets[r + 1] - self.offsets[r]
    }

    pub fn contains(&self, r: usize, c: u32) -> bool {
        self.row(r).binary_search(&c).is_ok()
    }
}

/// User–item adjacency built from train pairs only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    pub user_items: Csr,
    pub item_users: Csr,
    pub user_degree: Vec<u32>,
    pub item_degree: Vec<u32>,
}

impl BipartiteGraph {
    pub fn build(dataset: &InteractionDataset) -> Self {
        Self::from_pairs(dataset.num_users, dataset.num_items, &dataset.train_pairs)
    }

    /// `pairs` must be sorted and unique, as in [`InteractionDataset`].
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[(u32, u32)]) -> Self {
        let user_items = Csr::from_sorted_pairs(num_users, pairs.iter().copied());
        let item_users = user_items.transpose(num_items);
        let user_degree = (0..num_users)
            .map(|u| user_items.row_len(u) as u32)
            .collect();
        let item_degree = (0..num_items)
            .map(|i| item_users.row_len(i) as u32)
            .collect();
        BipartiteGraph {
            user_items,
            item_users,
            user_degree,
            item_degree,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_degree.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_degree.len()
    }

    pub fn num_edges(&self) -> usize {
        self.user_items.nnz()
    }

    /// The same graph with the roles of users and items swapped.
    pub fn transposed(&self) -> Self {
        BipartiteGraph {
            user_items: self.item_users.clone(),
            item_users: self.user_items.clone(),
            user_degree: self.item_degree.clone(),
            item_degree: self.user_degree.clone(),
        }
    }
}

/// Constraint coefficient for a (user, item) pair.
///
/// `item_degree` may be zero (items never seen in train still get a weight
/// when sampled as negatives).
pub fn beta(user_degree: u32, item_degree: u32) -> Result<f64, GraphError> {
    if user_degree == 0 {
        return Err(GraphError::ZeroUserDegree);
    }
    let du = user_degree as f64;
    let di = item_degree as f64;
    Ok((1.0 / du) * ((du + 1.0) / (di + 1.0)).sqrt())
}

/// β factored into per-user and per-item parts so it can be looked up in the
/// training loop without a division per pair.
///
/// Users with no train interactions get a user factor of 0; they never occur
/// in training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintWeights {
    user_factor: Vec<f64>,
    item_factor: Vec<f64>,
}

impl ConstraintWeights {
    pub fn new(graph: &BipartiteGraph) -> Self {
        let user_factor = graph
            .user_degree
            .iter()
            .map(|&d| {
                if d == 0 {
                    0.0
                } else {
                    let d = d as f64;
                    (d + 1.0).sqrt() / d
                }
            })
            .collect();
        let item_factor = graph
            .item_degree
            .iter()
            .map(|&d| 1.0 / (d as f64 + 1.0).sqrt())
            .collect();
        ConstraintWeights {
            user_factor,
            item_factor,
        }
    }

    #[inline]
    pub fn beta(&self, user: u32, item: u32) -> f64 {
        self.user_factor[user as usize] * self.item_factor[item as usize]
    }
}

/// Symmetric co-occurrence counts between the "item" side of a bipartite
/// graph, joined through the "user" side.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceGraph {
    offsets: Vec<usize>,
    columns: Vec<u32>,
    counts: Vec<u32>,
    /// Row sums over the full (untruncated) product.
    degree: Vec<u64>,
    truncated_rows: usize,
}

/// Default per-row entry cap for [`CooccurrenceGraph::build_with_cap`].
pub const DEFAULT_ROW_CAP: usize = 50_000;

impl CooccurrenceGraph {
    /// Exact `AᵀA` over items.
    pub fn build(graph: &BipartiteGraph) -> Self {
        Self::build_with_cap(graph, DEFAULT_ROW_CAP)
    }

    /// `AᵀA` with each row limited to its `row_cap` largest off-diagonal
    /// counts (ties to the smaller column). The diagonal entry and the row sums
    /// `g` are always exact. Rows at or below the cap are exact, so for
    /// `row_cap >= num_items` the result is the full symmetric product.
    pub fn build_with_cap(graph: &BipartiteGraph, row_cap: usize) -> Self {
        let n = graph.num_items();
        let rows: Vec<(Vec<(u32, u32)>, u64, bool)> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0u32; n], Vec::<u32>::new()),
                |(acc, touched), i| {
                    for &u in graph.item_users.row(i) {
                        for &k in graph.user_items.row(u as usize) {
                            if acc[k as usize] == 0 {
                                touched.push(k);
                            }
                            acc[k as usize] += 1;
                        }
                    }
                    let degree: u64 = graph
                        .item_users
                        .row(i)
                        .iter()
                        .map(|&u| graph.user_degree[u as usize] as u64)
                        .sum();
                    touched.sort_unstable();
                    let truncate = touched.len() > row_cap.saturating_add(1);
                    let row: Vec<(u32, u32)> = if truncate {
                        let diag = acc[i];
                        let mut heap = BinaryHeap::with_capacity(row_cap + 1);
                        for &k in touched.iter().filter(|&&k| k as usize != i) {
                            // min-heap on (count, Reverse(col)): evicts smallest count,
                            // and among equals the larger column
                            heap.push(Reverse((acc[k as usize], Reverse(k))));
                            if heap.len() > row_cap {
                                heap.pop();
                            }
                        }
                        let mut kept: Vec<(u32, u32)> = heap
                            .into_iter()
                            .map(|Reverse((c, Reverse(k)))| (k, c))
                            .collect();
                        if diag > 0 {
                            kept.push((i as u32, diag));
                        }
                        kept.sort_unstable();
                        kept
                    } else {
                        touched.iter().map(|&k| (k, acc[k as usize])).collect()
                    };
                    for &k in touched.iter() {
                        acc[k as usize] = 0;
                    }
                    touched.clear();
                    (row, degree, truncate)
                },
            )
            .collect();

        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut columns = Vec::new();
        let mut counts = Vec::new();
        let mut degree = Vec::with_capacity(n);
        let mut truncated_rows = 0;
        for (row, g, truncated) in rows {
            for (k, c) in row {
                columns.push(k);
                counts.push(c);
            }
            offsets.push(columns.len());
            degree.push(g);
            truncated_rows += truncated as usize;
        }
        if truncated_rows > 0 {
            log::warn!("{truncated_rows} co-occurrence rows truncated to {row_cap} entries");
        }
        CooccurrenceGraph {
            offsets,
            columns,
            counts,
            degree,
            truncated_rows,
        }
    }

    pub fn num_items(&self) -> usize {
        self.degree.len()
    }

    pub fn nnz(&self) -> usize {
        self.columns.len()
    }

    pub fn truncated_rows(&self) -> usize {
        self.truncated_rows
    }

    /// `(column, count)` entries of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        let span = self.offsets[i]..self.offsets[i + 1];
        self.columns[span.clone()]
            .iter()
            .copied()
            .zip(self.counts[span].iter().copied())
    }

    pub fn get(&self, i: u32, j: u32) -> u32 {
        let span = self.offsets[i as usize]..self.offsets[i as usize + 1];
        match self.columns[span.clone()].binary_search(&j) {
            Ok(pos) => self.counts[span.start + pos],
            Err(_) => 0,
        }
    }

    /// `g_i = Σ_k G_ik`.
    pub fn degree(&self, i: u32) -> u64 {
        self.degree[i as usize]
    }

    pub fn degrees(&self) -> &[u64] {
        &self.degree
    }

    pub fn to_dense(&self) -> Vec<Vec<u32>> {
        let n = self.num_items();
        let mut dense = vec![vec![0u32; n]; n];
        for (i, row) in dense.iter_mut().enumerate() {
            for (k, c) in self.row(i) {
                row[k as usize] = c;
            }
        }
        dense
    }
}

/// Co-occurrence similarity of item `j` as seen from item `i`.
///
/// Zero when item `i` co-occurs with nothing but itself.
pub fn omega(g: &CooccurrenceGraph, i: u32, j: u32) -> Result<f64, GraphError> {
    if i == j {
        return Err(GraphError::SameItem(i));
    }
    let gj = g.degree(j);
    if gj == 0 {
        return Err(GraphError::ZeroItemDegree(j));
    }
    Ok(omega_from_parts(g.get(i, j), g.degree(i), g.get(i, i), gj))
}

#[inline]
fn omega_from_parts(gij: u32, gi: u64, gii: u32, gj: u64) -> f64 {
    let off_diagonal = gi - gii as u64;
    if off_diagonal == 0 || gij == 0 {
        return 0.0;
    }
    (gij as f64 / off_diagonal as f64) * (gi as f64 / gj as f64).sqrt()
}

/// Per-node top-K neighbor lists with weights, sorted by weight descending
/// (ties by smaller index). Used for item–item lists and, in the user–user
/// ablation, user–user lists.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    weights: Vec<f64>,
}

pub type ItemNeighborIndex = NeighborIndex;

impl NeighborIndex {
    /// An index in which every node has no neighbors.
    pub fn empty(num_nodes: usize) -> Self {
        NeighborIndex {
            k: 0,
            offsets: vec![0; num_nodes + 1],
            neighbors: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Keeps for each node the `k` candidates with the largest positive ω.
    pub fn build(g: &CooccurrenceGraph, k: usize) -> Result<Self, GraphError> {
        if k == 0 {
            return Err(GraphError::ZeroNeighbors);
        }
        let lists: Vec<Vec<(u32, f64)>> = (0..g.num_items())
            .into_par_iter()
            .map(|i| {
                let gi = g.degree(i as u32);
                let gii = g.get(i as u32, i as u32);
                let mut cands: Vec<(u32, f64)> = g
                    .row(i)
                    .filter(|&(j, _)| j as usize != i)
                    .map(|(j, gij)| (j, omega_from_parts(gij, gi, gii, g.degree(j))))
                    .filter(|&(_, w)| w > 0.0)
                    .collect();
                let by_weight =
                    |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
                if cands.len() > k {
                    cands.select_nth_unstable_by(k - 1, by_weight);
                    cands.truncate(k);
                }
                cands.sort_unstable_by(by_weight);
                cands
            })
            .collect();
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        for list in lists {
            for (j, w) in list {
                neighbors.push(j);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Ok(NeighborIndex {
            k,
            offsets,
            neighbors,
            weights,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: u32) -> (&[u32], &[f64]) {
        let span = self.offsets[i as usize]..self.offsets[i as usize + 1];
        (&self.neighbors[span.clone()], &self.weights[span])
    }

    pub fn total_entries(&self) -> usize {
        self.neighbors.len()
    }

    /// Returns a copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= factor);
        out
    }

    const MAGIC: &'static [u8; 8] = b"UGCNNBR1";

    /// Binary cache layout: magic, key length + key bytes, k, node count,
    /// entry count, offsets, neighbors, weights; all integers u64 and all
    /// floats f64, little endian.
    pub fn write_cache<W: Write>(&self, key: &str, mut out: W) -> io::Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&(key.len() as u64).to_le_bytes())?;
        out.write_all(key.as_bytes())?;
        for v in [self.k, self.num_nodes(), self.neighbors.len()] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for &o in &self.offsets {
            out.write_all(&(o as u64).to_le_bytes())?;
        }
        for &n in &self.neighbors {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        for &w in &self.weights {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a cache written by [`write_cache`](Self::write_cache); returns
    /// `Ok(None)` if it was written under a different key.
    pub fn read_cache<R: Read>(key: &str, mut input: R) -> io::Result<Option<Self>> {
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("not a neighbor-index cache"));
        }
        let read_u64 = |input: &mut R| -> io::Result<u64> {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        };
        let key_len = read_u64(&mut input)? as usize;
        if key_len > 1 << 16 {
            return Err(bad("cache key too long"));
        }
        let mut stored = vec![0u8; key_len];
        input.read_exact(&mut stored)?;
        if stored != key.as_bytes() {
            return Ok(None);
        }
        let k = read_u64(&mut input)? as usize;
        let nodes = read_u64(&mut input)? as usize;
        let entries = read_u64(&mut input)? as usize;
        let mut offsets = Vec::with_capacity(nodes + 1);
        for _ in 0..=nodes {
            offsets.push(read_u64(&mut input)? as usize);
        }
        let mut neighbors = Vec::with_capacity(entries);
        for _ in 0..entries {
            neighbors.push(read_u64(&mut input)? as u32);
        }
        let mut weights = Vec::with_capacity(entries);
        for _ in 0..entries {
            weights.push(f64::from_bits(read_u64(&mut input)?));
        }
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&entries)
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(bad("corrupt offsets"));
        }
        Ok(Some(NeighborIndex {
            k,
            offsets,
            neighbors,
            weights,
        }))
    }
}

/// Item–item co-occurrence graph followed by top-K selection.
pub fn build_item_neighbors(graph: &BipartiteGraph, k: usize) -> Result<NeighborIndex, GraphError> {
    NeighborIndex::build(&CooccurrenceGraph::build(graph), k)
}

/// User–user co-occurrence graph `AAᵀ` followed by top-K selection.
pub fn build_user_neighbors(graph: &BipartiteGraph, k: usize) -> Result<NeighborIndex, GraphError> {
    NeighborIndex::build(&CooccurrenceGraph::build(&graph.transposed()), k)
}
