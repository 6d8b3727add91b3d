//! Network topology and left-stochastic combination matrices.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{RngStream, StreamPurpose};

/// Absolute tolerance on every column sum of a combination matrix.
pub const STOCHASTICITY_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("a network needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("average neighbor count {0} must be at least 1 for a connected network")]
    DegreeTooSmall(f64),
    #[error("average neighbor count {target} must be below the node count {nodes}")]
    DegreeTooLarge { target: f64, nodes: usize },
    #[error("neighbor index {neighbor} of node {node} is out of range")]
    NodeOutOfRange { node: usize, neighbor: usize },
    #[error("neighbor sets are not symmetric: {from} lists {to} but not vice versa")]
    Asymmetric { from: usize, to: usize },
    #[error("topology is not connected")]
    Disconnected,
    #[error("matrix is {rows}x{cols} but the topology has {nodes} nodes")]
    DimensionMismatch { rows: usize, cols: usize, nodes: usize },
}

/// Undirected neighborhood graph. Every node is its own neighbor.
///
/// Directed links `l -> k` (with `l != k`) are enumerated sink-major: all
/// incoming links of node 0 first, each sink's sources in ascending order.
/// Link-indexed data elsewhere in the crate follows this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct NetworkTopology {
    neighbors: Vec<Vec<usize>>,
    link_offsets: Vec<usize>,
}

/// On-disk form: the non-self neighbors of each node.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyRepr {
    neighbors: Vec<Vec<usize>>,
}

impl TryFrom<TopologyRepr> for NetworkTopology {
    type Error = NetworkError;

    fn try_from(repr: TopologyRepr) -> Result<Self, Self::Error> {
        NetworkTopology::from_neighbor_lists(repr.neighbors)
    }
}

impl From<NetworkTopology> for TopologyRepr {
    fn from(t: NetworkTopology) -> Self {
        let neighbors = (0..t.num_nodes()).map(|k| t.incoming(k).map(|(_, l)| l).collect()).collect();
        TopologyRepr { neighbors }
    }
}

impl NetworkTopology {
    /// Builds a topology from non-self neighbor lists (self-loops are added,
    /// duplicates and an explicit self entry are tolerated).
    pub fn from_neighbor_lists(lists: Vec<Vec<usize>>) -> Result<Self, NetworkError> {
        let n = lists.len();
        if n == 0 {
            return Err(NetworkError::TooFewNodes(0));
        }
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (k, list) in lists.iter().enumerate() {
            sets[k].insert(k);
            for &l in list {
                if l >= n {
                    return Err(NetworkError::NodeOutOfRange { node: k, neighbor: l });
                }
                sets[k].insert(l);
            }
        }
        for k in 0..n {
            for &l in &sets[k] {
                if !sets[l].contains(&k) {
                    return Err(NetworkError::Asymmetric { from: k, to: l });
                }
            }
        }
        let topology = Self::from_sets(sets);
        if !topology.is_connected() {
            return Err(NetworkError::Disconnected);
        }
        Ok(topology)
    }

    fn from_sets(sets: Vec<BTreeSet<usize>>) -> Self {
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let mut link_offsets = Vec::with_capacity(neighbors.len() + 1);
        let mut acc = 0;
        link_offsets.push(0);
        for nk in &neighbors {
            acc += nk.len() - 1;
            link_offsets.push(acc);
        }
        Self { neighbors, link_offsets }
    }

    /// The fully connected network on `n` nodes.
    pub fn complete(n: usize) -> Self {
        Self::from_sets((0..n).map(|_| (0..n).collect()).collect())
    }

    /// A single node with only its self-loop.
    pub fn single() -> Self {
        Self::from_sets(vec![BTreeSet::from([0])])
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// 𝒩_k, sorted, including `k`.
    pub fn neighborhood(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn contains_edge(&self, from: usize, to: usize) -> bool {
        self.neighbors[to].binary_search(&from).is_ok()
    }

    /// Number of directed links `l -> k` with `l != k`.
    pub fn num_links(&self) -> usize {
        *self.link_offsets.last().unwrap_or(&0)
    }

    /// Incoming links of node `k` as `(link_index, source)` pairs, self excluded.
    pub fn incoming(&self, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let base = self.link_offsets[k];
        self.neighbors[k].iter().copied().filter(move |&l| l != k).enumerate().map(move |(j, l)| (base + j, l))
    }

    /// All directed links as `(from, to)` in link-index order.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |k| self.incoming(k).map(move |(_, l)| (l, k)))
    }

    pub fn link_index(&self, from: usize, to: usize) -> Option<usize> {
        if from == to || to >= self.num_nodes() {
            return None;
        }
        self.incoming(to).find(|&(_, l)| l == from).map(|(j, _)| j)
    }

    /// Mean number of non-self neighbors.
    pub fn average_degree(&self) -> f64 {
        self.num_links() as f64 / self.num_nodes() as f64
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(k) = stack.pop() {
            for &l in &self.neighbors[k] {
                if !seen[l] {
                    seen[l] = true;
                    stack.push(l);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Random connected topology: a random spanning tree, then uniformly sampled
/// extra edges until the mean non-self degree reaches the target.
pub fn generate_topology(num_nodes: usize, target_avg_neighbors: f64, seed: u64) -> Result<NetworkTopology, NetworkError> {
    if num_nodes < 2 {
        return Err(NetworkError::TooFewNodes(num_nodes));
    }
    if !(target_avg_neighbors >= 1.0) {
        return Err(NetworkError::DegreeTooSmall(target_avg_neighbors));
    }
    if target_avg_neighbors >= num_nodes as f64 {
        return Err(NetworkError::DegreeTooLarge { target: target_avg_neighbors, nodes: num_nodes });
    }
    let mut rng = RngStream::new(seed, StreamPurpose::Topology, 0);
    let n = num_nodes;
    let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|k| BTreeSet::from([k])).collect();
    let mut edges = 0usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for i in 1..n {
        let a = order[i];
        let b = order[rng.random_range(0..i)];
        sets[a].insert(b);
        sets[b].insert(a);
        edges += 1;
    }

    // Closest achievable edge count; mean degree is 2E/N.
    let max_edges = n * (n - 1) / 2;
    let wanted = ((target_avg_neighbors * n as f64) / 2.0).round() as usize;
    let wanted = wanted.clamp(n - 1, max_edges);
    if edges < wanted {
        let mut candidates: Vec<(usize, usize)> =
            (0..n).flat_map(|a| ((a + 1)..n).map(move |b| (a, b))).filter(|&(a, b)| !sets[a].contains(&b)).collect();
        candidates.shuffle(&mut rng);
        for (a, b) in candidates.into_iter().take(wanted - edges) {
            sets[a].insert(b);
            sets[b].insert(a);
        }
    }
    Ok(NetworkTopology::from_sets(sets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinationRole {
    /// Weights for the combination that precedes adaptation.
    First,
    /// Weights for the combination that follows adaptation.
    Second,
}

/// N×N matrix of weights `a_{lk}`: entry `(l, k)` is the weight node `k`
/// gives to the estimate received from node `l`. Columns sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix {
    weights: DMatrix<f64>,
    role: CombinationRole,
}

impl CombinationMatrix {
    /// Wraps arbitrary weights; run [`validate_combination`] before use.
    pub fn new(weights: DMatrix<f64>, role: CombinationRole) -> Self {
        Self { weights, role }
    }

    pub fn identity(n: usize, role: CombinationRole) -> Self {
        Self { weights: DMatrix::identity(n, n), role }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn role(&self) -> CombinationRole {
        self.role
    }

    pub fn num_nodes(&self) -> usize {
        self.weights.ncols()
    }

    #[inline]
    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.weights[(from, to)]
    }

    pub fn with_role(mut self, role: CombinationRole) -> Self {
        self.role = role;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.weights == DMatrix::identity(self.weights.nrows(), self.weights.ncols())
    }
}

/// `a_{lk} = 1/|𝒩_k|` on the neighborhood of `k`.
pub fn build_uniform_combination(topology: &NetworkTopology, role: CombinationRole) -> CombinationMatrix {
    let n = topology.num_nodes();
    let mut weights = DMatrix::zeros(n, n);
    for k in 0..n {
        let nk = topology.neighborhood(k);
        let w = 1.0 / nk.len() as f64;
        for &l in nk {
            weights[(l, k)] = w;
        }
    }
    CombinationMatrix { weights, role }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    OutOfRange { from: usize, to: usize, value: f64 },
    NonEdgeWeight { from: usize, to: usize, value: f64 },
    ColumnSum { column: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfRange { from, to, value } => write!(f, "a({from},{to}) = {value} is outside [0, 1]"),
            Violation::NonEdgeWeight { from, to, value } => {
                write!(f, "a({from},{to}) = {value} but {from} is not a neighbor of {to}")
            }
            Violation::ColumnSum { column, sum } => write!(f, "column {column} sums to {sum}"),
        }
    }
}

/// Returns every invariant violation, or `Ok(())` when the matrix is a valid
/// combination matrix for `topology`. A size mismatch is a hard error.
pub fn validate_combination(
    matrix: &CombinationMatrix,
    topology: &NetworkTopology,
) -> Result<Result<(), Vec<Violation>>, NetworkError> {
    let n = topology.num_nodes();
    let w = matrix.weights();
    if w.nrows() != n || w.ncols() != n {
        return Err(NetworkError::DimensionMismatch { rows: w.nrows(), cols: w.ncols(), nodes: n });
    }
    let mut violations = Vec::new();
    for k in 0..n {
        let mut sum = 0.0;
        for l in 0..n {
            let a = w[(l, k)];
            sum += a;
            if !(0.0..=1.0).contains(&a) {
                violations.push(Violation::OutOfRange { from: l, to: k, value: a });
            }
            if a != 0.0 && !topology.contains_edge(l, k) {
                violations.push(Violation::NonEdgeWeight { from: l, to: k, value: a });
            }
        }
        if (sum - 1.0).abs() > STOCHASTICITY_TOL {
            violations.push(Violation::ColumnSum { column: k, sum });
        }
    }
    Ok(if violations.is_empty() { Ok(()) } else { Err(violations) })
}
