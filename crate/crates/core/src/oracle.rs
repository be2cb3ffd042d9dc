//! Dense reference for symmetric-normalized message passing with self-loops.
//!
//! Nothing here is used in training. It exists to check, by direct
//! computation on tiny graphs, the two facts the constraint losses rest on:
//!
//! * powers of `P = D̂^{-1/2}(A+I)D̂^{-1/2}` converge on a connected graph to
//!   `L_ij = sqrt((d_i+1)(d_j+1)) / (2m+n)`;
//! * the dot product of two once-propagated embeddings expands into four
//!   weighted sums over user–item, item–item, user–user and neighbor–neighbor
//!   dot products.

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest node count accepted by [`DenseGraph`].
pub const MAX_NODES: usize = 1_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("dense oracle graphs are limited to {MAX_NODES} nodes, got {0}")]
    TooLarge(usize),
    #[error("graph needs at least one node")]
    Empty,
    #[error("edge ({0}, {1}) out of range or a self-loop")]
    BadEdge(usize, usize),
    #[error("graph is disconnected ({0} components); the limit is per component")]
    Disconnected(usize),
    #[error("node {0} is not a {1} node")]
    WrongSide(usize, &'static str),
    #[error("embedding matrix has {0} rows, graph has {1} nodes")]
    ShapeMismatch(usize, usize),
}

/// Undirected simple graph stored as a dense 0/1 adjacency without
/// self-loops. For bipartite graphs, users come first (`0..num_users`),
/// then items.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGraph {
    adjacency: DMatrix<f64>,
    degrees: Vec<usize>,
    num_edges: usize,
    num_users: Option<usize>,
}

impl DenseGraph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, OracleError> {
        if n == 0 {
            return Err(OracleError::Empty);
        }
        if n > MAX_NODES {
            return Err(OracleError::TooLarge(n));
        }
        let mut adjacency = DMatrix::zeros(n, n);
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(OracleError::BadEdge(a, b));
            }
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        let degrees: Vec<usize> = (0..n)
            .map(|i| adjacency.row(i).iter().filter(|&&x| x != 0.0).count())
            .collect();
        let num_edges = degrees.iter().sum::<usize>() / 2;
        Ok(DenseGraph {
            adjacency,
            degrees,
            num_edges,
            num_users: None,
        })
    }

    /// User `u` becomes node `u`, item `i` becomes node `num_users + i`.
    pub fn bipartite(
        num_users: usize,
        num_items: usize,
        pairs: &[(usize, usize)],
    ) -> Result<Self, OracleError> {
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .map(|&(u, i)| {
                if u >= num_users || i >= num_items {
                    Err(OracleError::BadEdge(u, num_users + i))
                } else {
                    Ok((u, num_users + i))
                }
            })
            .collect::<Result<_, _>>()?;
        let mut g = Self::from_edges(num_users + num_items, &edges)?;
        g.num_users = Some(num_users);
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.degrees.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_nodes()).filter(move |&j| self.adjacency[(node, j)] != 0.0)
    }

    pub fn num_components(&self) -> usize {
        let n = self.num_nodes();
        let mut uf = UnionFind::<usize>::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency[(i, j)] != 0.0 {
                    uf.union(i, j);
                }
            }
        }
        let mut roots = uf.into_labeling();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    pub fn is_connected(&self) -> bool {
        self.num_components() == 1
    }

    /// Random connected graph: a random spanning tree plus each remaining
    /// pair independently with probability `extra_edge_prob`.
    pub fn random_connected<R: Rng>(
        n: usize,
        extra_edge_prob: f64,
        rng: &mut R,
    ) -> Result<Self, OracleError> {
        let mut edges = Vec::new();
        for v in 1..n {
            edges.push((rng.random_range(0..v), v));
        }
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_bool(extra_edge_prob) {
                    edges.push((a, b));
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    /// Random bipartite graph with each pair present with probability `density`.
    pub fn random_bipartite<R: Rng>(
        num_users: usize,
        num_items: usize,
        density: f64,
        rng: &mut R,
    ) -> Result<Self, OracleError> {
        let mut pairs = Vec::new();
        for u in 0..num_users {
            for i in 0..num_items {
                if rng.random_bool(density) {
                    pairs.push((u, i));
                }
            }
        }
        Self::bipartite(num_users, num_items, &pairs)
    }

    fn is_user(&self, node: usize) -> bool {
        self.num_users.is_some_and(|nu| node < nu)
    }

    fn is_item(&self, node: usize) -> bool {
        self.num_users
            .is_some_and(|nu| node >= nu && node < self.num_nodes())
    }
}

/// `P_ij = 1/sqrt((d_i+1)(d_j+1))` on edges and the diagonal, zero elsewhere.
pub fn propagation_matrix(g: &DenseGraph) -> DMatrix<f64> {
    let n = g.num_nodes();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j || g.adjacency[(i, j)] != 0.0 {
            1.0 / (((g.degrees[i] + 1) * (g.degrees[j] + 1)) as f64).sqrt()
        } else {
            0.0
        }
    })
}

/// Closed-form limit of `Pˡ` for a connected graph.
pub fn limit_matrix(g: &DenseGraph) -> Result<DMatrix<f64>, OracleError> {
    let components = g.num_components();
    if components != 1 {
        return Err(OracleError::Disconnected(components));
    }
    let denom = (2 * g.num_edges() + g.num_nodes()) as f64;
    let n = g.num_nodes();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        (((g.degrees[i] + 1) * (g.degrees[j] + 1)) as f64).sqrt() / denom
    }))
}

/// `Pˡ` by `l` successive multiplications; `l = 0` is the identity.
pub fn power_iterate(p: &DMatrix<f64>, layers: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::identity(p.nrows(), p.ncols());
    for _ in 0..layers {
        acc = &acc * p;
    }
    acc
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Outcome of [`converge_to_limit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// First power whose max-entry distance to the limit is within tolerance,
    /// or `None` if `max_layers` was exhausted.
    pub layers: Option<usize>,
    /// Distance at the last power computed.
    pub max_error: f64,
}

/// Multiplies `P` into an accumulator until `‖Pˡ − L‖_∞ ≤ tol` or `max_layers`.
pub fn converge_to_limit(
    g: &DenseGraph,
    tol: f64,
    max_layers: usize,
) -> Result<Convergence, OracleError> {
    let limit = limit_matrix(g)?;
    let p = propagation_matrix(g);
    let mut acc = DMatrix::identity(p.nrows(), p.ncols());
    let mut err = max_abs_diff(&acc, &limit);
    for l in 1..=max_layers {
        acc = &acc * &p;
        err = max_abs_diff(&acc, &limit);
        if err <= tol {
            return Ok(Convergence {
                layers: Some(l),
                max_error: err,
            });
        }
    }
    Ok(Convergence {
        layers: None,
        max_error: err,
    })
}

/// `|e_u'·e_i' − (four weighted sums)|` after one propagation step `E' = P·E`,
/// where `u` is a user node and `i` an item node of a bipartite graph.
///
/// The left side goes through the matrix product; the right side is assembled
/// term by term from neighbor lists and the closed-form weights.
pub fn dot_decomposition_residual(
    g: &DenseGraph,
    embeddings: &DMatrix<f64>,
    u: usize,
    i: usize,
) -> Result<f64, OracleError> {
    if embeddings.nrows() != g.num_nodes() {
        return Err(OracleError::ShapeMismatch(
            embeddings.nrows(),
            g.num_nodes(),
        ));
    }
    if !g.is_user(u) {
        return Err(OracleError::WrongSide(u, "user"));
    }
    if !g.is_item(i) {
        return Err(OracleError::WrongSide(i, "item"));
    }
    let propagated = propagation_matrix(g) * embeddings;
    let lhs = propagated.row(u).dot(&propagated.row(i));

    let dot = |a: usize, b: usize| embeddings.row(a).dot(&embeddings.row(b));
    let shifted = |node: usize| (g.degree(node) + 1) as f64;
    let du = shifted(u);
    let di = shifted(i);

    let mut rhs = dot(u, i) / (du * di);
    for k in g.neighbors(u) {
        rhs += dot(i, k) / (du.sqrt() * shifted(k).sqrt() * di);
    }
    for v in g.neighbors(i) {
        rhs += dot(u, v) / (shifted(v).sqrt() * di.sqrt() * du);
    }
    for k in g.neighbors(u) {
        for v in g.neighbors(i) {
            rhs += dot(k, v) / (du.sqrt() * shifted(k).sqrt() * shifted(v).sqrt() * di.sqrt());
        }
    }
    Ok((lhs - rhs).abs())
}

/// Largest residual over every (user, item) node pair.
pub fn max_dot_decomposition_residual(
    g: &DenseGraph,
    embeddings: &DMatrix<f64>,
) -> Result<f64, OracleError> {
    let nu = g.num_users.ok_or(OracleError::WrongSide(0, "user"))?;
    let mut worst = 0.0f64;
    for u in 0..nu {
        for i in nu..g.num_nodes() {
            worst = worst.max(dot_decomposition_residual(g, embeddings, u, i)?);
        }
    }
    Ok(worst)
}
