//! Entry-selection schedules for partial diffusion.
//!
//! The M weight entries are split into contiguous blocks of (at most) `L`
//! entries. Each iteration a node transmits exactly one block: the block is
//! chosen cyclically (sequential scheme) or uniformly at random (stochastic
//! scheme). Selection never looks at data, only at the iteration counter,
//! the node index and the random stream.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("cannot select {entries} of {dim} entries")]
    TooManyEntries { entries: usize, dim: usize },
    #[error("parameter dimension must be positive")]
    ZeroDimension,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sequential,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseCoupling {
    /// All nodes transmit the same block each iteration.
    Shared,
    /// Nodes choose independently: staggered cycle offsets (sequential) or
    /// independent draws (stochastic).
    Independent,
}

impl Scheme {
    pub fn default_coupling(self) -> PhaseCoupling {
        match self {
            Scheme::Sequential => PhaseCoupling::Shared,
            Scheme::Stochastic => PhaseCoupling::Independent,
        }
    }
}

/// Diagonal of a 0/1 entry-selection matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMatrix {
    diagonal: Vec<bool>,
}

impl SelectionMatrix {
    pub fn from_indices(dim: usize, indices: &[usize]) -> Self {
        let mut diagonal = vec![false; dim];
        for &j in indices {
            diagonal[j] = true;
        }
        Self { diagonal }
    }

    pub fn identity(dim: usize) -> Self {
        Self { diagonal: vec![true; dim] }
    }

    pub fn diagonal(&self) -> &[bool] {
        &self.diagonal
    }

    #[inline]
    pub fn is_selected(&self, entry: usize) -> bool {
        self.diagonal[entry]
    }

    pub fn count(&self) -> usize {
        self.diagonal.iter().filter(|&&b| b).count()
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    /// Diagonal as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.diagonal.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Contiguous blocks `{rL, …, min((r+1)L, M) - 1}` (0-based) covering `0..M`.
/// `L = 0` yields no blocks.
pub fn build_partition(param_dim: usize, entries_per_iter: usize) -> Result<Vec<Vec<usize>>, SelectionError> {
    if entries_per_iter > param_dim {
        return Err(SelectionError::TooManyEntries { entries: entries_per_iter, dim: param_dim });
    }
    if entries_per_iter == 0 {
        return Ok(Vec::new());
    }
    Ok((0..param_dim).step_by(entries_per_iter).map(|s| (s..(s + entries_per_iter).min(param_dim)).collect()).collect())
}

/// `p = L / M`.
pub fn transmission_probability(entries_per_iter: usize, param_dim: usize) -> f64 {
    entries_per_iter as f64 / param_dim as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSchedule {
    scheme: Scheme,
    coupling: PhaseCoupling,
    param_dim: usize,
    entries_per_iter: usize,
    partition: Vec<Vec<usize>>,
    /// One mask per block; a single empty mask when `L = 0`.
    masks: Vec<SelectionMatrix>,
}

impl SelectionSchedule {
    pub fn new(
        scheme: Scheme,
        param_dim: usize,
        entries_per_iter: usize,
        coupling: PhaseCoupling,
    ) -> Result<Self, SelectionError> {
        if param_dim == 0 {
            return Err(SelectionError::ZeroDimension);
        }
        let partition = build_partition(param_dim, entries_per_iter)?;
        let masks = if partition.is_empty() {
            vec![SelectionMatrix::from_indices(param_dim, &[])]
        } else {
            partition.iter().map(|block| SelectionMatrix::from_indices(param_dim, block)).collect()
        };
        Ok(Self { scheme, coupling, param_dim, entries_per_iter, partition, masks })
    }

    /// Schedule with the scheme's default phase coupling.
    pub fn with_default_coupling(scheme: Scheme, param_dim: usize, entries_per_iter: usize) -> Result<Self, SelectionError> {
        Self::new(scheme, param_dim, entries_per_iter, scheme.default_coupling())
    }

    /// Every entry, every iteration.
    pub fn full(param_dim: usize) -> Self {
        Self::new(Scheme::Sequential, param_dim, param_dim, PhaseCoupling::Shared).expect("L = M is always valid")
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn coupling(&self) -> PhaseCoupling {
        self.coupling
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn entries_per_iter(&self) -> usize {
        self.entries_per_iter
    }

    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    /// `B̄ = ⌈M/L⌉`; 1 for the empty `L = 0` schedule.
    pub fn num_blocks(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[SelectionMatrix] {
        &self.masks
    }

    pub fn mask(&self, block: usize) -> &SelectionMatrix {
        &self.masks[block]
    }

    /// Whether every node always transmits the same block.
    pub fn is_network_shared(&self) -> bool {
        self.coupling == PhaseCoupling::Shared || self.num_blocks() == 1
    }

    /// Block index active at `node` in `iteration`. The stochastic scheme
    /// draws one index from `rng` per call; the sequential scheme ignores it.
    pub fn select_index(&self, iteration: u64, node: usize, rng: &mut RngStream) -> usize {
        let blocks = self.num_blocks();
        if blocks == 1 {
            return 0;
        }
        match (self.scheme, self.coupling) {
            (Scheme::Sequential, PhaseCoupling::Shared) => (iteration % blocks as u64) as usize,
            (Scheme::Sequential, PhaseCoupling::Independent) => ((iteration + node as u64) % blocks as u64) as usize,
            (Scheme::Stochastic, _) => rng.random_range(0..blocks),
        }
    }

    pub fn select(&self, iteration: u64, node: usize, rng: &mut RngStream) -> &SelectionMatrix {
        &self.masks[self.select_index(iteration, node, rng)]
    }

    /// Block indices for all nodes at once, honoring the phase coupling.
    pub fn select_network(&self, iteration: u64, rng: &mut RngStream, out: &mut [usize]) {
        if self.scheme == Scheme::Stochastic && self.coupling == PhaseCoupling::Shared {
            let r = self.select_index(iteration, 0, rng);
            out.fill(r);
        } else {
            for (node, slot) in out.iter_mut().enumerate() {
                *slot = self.select_index(iteration, node, rng);
            }
        }
    }

    /// Diagonal of `E[Λ]`: the fraction of blocks that contain each entry.
    pub fn expected_selection(&self) -> Vec<f64> {
        let blocks = self.num_blocks() as f64;
        let mut e = vec![0.0; self.param_dim];
        for mask in &self.masks {
            for (acc, &b) in e.iter_mut().zip(mask.diagonal()) {
                if b {
                    *acc += 1.0;
                }
            }
        }
        e.iter_mut().for_each(|x| *x /= blocks);
        e
    }

    /// Size of the joint support of `(Λ_1, …, Λ_N)` for one draw.
    pub fn joint_support_size(&self, num_nodes: usize) -> Option<u128> {
        let blocks = self.num_blocks() as u128;
        if self.scheme == Scheme::Stochastic && !self.is_network_shared() {
            blocks.checked_pow(num_nodes as u32)
        } else {
            Some(blocks)
        }
    }

    /// Calls `f(probability, block_per_node)` for every joint configuration of
    /// the network's selections. The caller bounds the support size first.
    pub fn for_each_joint_config(&self, num_nodes: usize, mut f: impl FnMut(f64, &[usize])) {
        let blocks = self.num_blocks();
        let mut config = vec![0usize; num_nodes];
        if self.scheme == Scheme::Stochastic && !self.is_network_shared() {
            let p = (blocks as f64).powi(num_nodes as i32).recip();
            loop {
                f(p, &config);
                // Odometer increment.
                let mut pos = 0;
                loop {
                    if pos == num_nodes {
                        return;
                    }
                    config[pos] += 1;
                    if config[pos] < blocks {
                        break;
                    }
                    config[pos] = 0;
                    pos += 1;
                }
            }
        } else {
            // One cycle phase per configuration; staggered offsets for
            // independent sequential coupling.
            let p = 1.0 / blocks as f64;
            let staggered = self.scheme == Scheme::Sequential && self.coupling == PhaseCoupling::Independent;
            for r in 0..blocks {
                for (node, slot) in config.iter_mut().enumerate() {
                    *slot = if staggered { (r + node) % blocks } else { r };
                }
                f(p, &config);
            }
        }
    }
}
