//! Mean and mean-square analysis of the stacked error recursion
//!
//! ```text
//! w̃_i = 𝒜₂ (I − ℳℛ_i) 𝒜₁ w̃_{i−1} − 𝒜₂ (I − ℳℛ_i) v^w − 𝒜₂ ℳ s_i − v^ψ
//! ```
//!
//! and its closed-form steady-state network MSD
//!
//! ```text
//! MSD = (1/N) [vec(G)ᵀ D₂ + vec(H Rw H)ᵀ D₂ + vec(Rψ)ᵀ] (I − F)⁻¹ vec(I),
//! F   = D₁ (H ⊗ H) D₂,   D_r = E[𝒜_rᵀ ⊗ 𝒜_rᵀ],   H = I − ℳ E[ℛ].
//! ```
//!
//! Every `𝒜_r` is sparse (one nonzero per neighbor per entry) and so are the
//! Kronecker expectations, which are stored in CSR form. Regressor
//! covariances are diagonal, so `H`, `G` and the noise covariances are kept as
//! diagonals.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Schur};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Environment, LinkKind, RngStream, StreamPurpose};
use crate::engine::{AlgorithmConfig, IterationDraws, Links};
use crate::network::{CombinationMatrix, NetworkTopology};
use crate::selection::{Scheme, SelectionMatrix, SelectionSchedule};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch { what: &'static str, got: usize, expected: usize },
    #[error("joint selection support has {size} configurations, above the cap of {cap}")]
    SupportTooLarge { size: u128, cap: u64 },
    #[error("Monte Carlo estimation needs at least two samples")]
    TooFewSamples,
    #[error("mean-square unstable: spectral radius of F is {radius}")]
    Unstable { radius: f64 },
    #[error("I - F is singular")]
    Singular,
    #[error("iterative solve stopped after {iterations} iterations with relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
}

type Triplet = (usize, usize, f64);

/// `𝒜_r` as an `N × N` grid of `M × M` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCombination {
    num_nodes: usize,
    dim: usize,
    matrix: DMatrix<f64>,
}

impl BlockCombination {
    /// Builds `𝒜_r` from the diagonals of each node's `Λ_l` (0/1 for a draw,
    /// fractional for an expectation).
    pub fn from_diagonals(a: &CombinationMatrix, diagonals: &[Vec<f64>]) -> Result<Self, AnalysisError> {
        let n = a.num_nodes();
        if diagonals.len() != n {
            return Err(AnalysisError::DimensionMismatch { what: "selections", got: diagonals.len(), expected: n });
        }
        let m = diagonals.first().map_or(0, Vec::len);
        if let Some(d) = diagonals.iter().find(|d| d.len() != m) {
            return Err(AnalysisError::DimensionMismatch { what: "selection dimension", got: d.len(), expected: m });
        }
        let mut matrix = DMatrix::zeros(n * m, n * m);
        for (r, c, v) in block_triplets(a, m, |l| &diagonals[l]) {
            matrix[(r, c)] = v;
        }
        Ok(Self { num_nodes: n, dim: m, matrix })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn block(&self, p: usize, q: usize) -> DMatrix<f64> {
        let m = self.dim;
        self.matrix.view((p * m, q * m), (m, m)).into_owned()
    }
}

/// Nonzeros of `𝒜` in row-major node order:
/// block `(p,p) = I − Σ_{l≠p} a_lp Λ_l`, block `(p,l) = a_lp Λ_l`.
fn block_triplets<'a>(
    a: &CombinationMatrix,
    m: usize,
    diag: impl Fn(usize) -> &'a [f64],
) -> Vec<Triplet> {
    let n = a.num_nodes();
    let mut out = Vec::new();
    for p in 0..n {
        for j in 0..m {
            let row = p * m + j;
            let mut own = 1.0;
            let start = out.len();
            out.push((row, row, 0.0));
            for l in (0..n).filter(|&l| l != p) {
                let v = a.weight(l, p) * diag(l)[j];
                if v != 0.0 {
                    own -= v;
                    out.push((row, l * m + j, v));
                }
            }
            if own == 0.0 {
                out.remove(start);
            } else {
                out[start].2 = own;
            }
        }
    }
    out
}

/// `𝒜_r` for one realization of the selections.
pub fn build_block_combination(a: &CombinationMatrix, selections: &[&SelectionMatrix]) -> Result<BlockCombination, AnalysisError> {
    let diagonals: Vec<Vec<f64>> = selections.iter().map(|s| s.to_f64()).collect();
    BlockCombination::from_diagonals(a, &diagonals)
}

/// `Q_r = E[𝒜_r]`: every `Λ_l` replaced by `E[Λ]`.
pub fn expected_block_combination(a: &CombinationMatrix, schedule: &SelectionSchedule) -> BlockCombination {
    let e = schedule.expected_selection();
    let diagonals = vec![e; a.num_nodes()];
    BlockCombination::from_diagonals(a, &diagonals).expect("consistent by construction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `2 / λ_max(R_{u,k})` per node.
    pub mu_max: Vec<f64>,
    /// Whether `0 < μ_k < μ_max(k)` holds at every node.
    pub stable: bool,
}

pub fn mean_stability_bounds(env: &Environment, step_sizes: &[f64]) -> StabilityReport {
    let mu_max: Vec<f64> = (0..env.num_nodes()).map(|k| 2.0 / env.max_regressor_eigenvalue(k)).collect();
    let stable = step_sizes.len() == mu_max.len() && step_sizes.iter().zip(&mu_max).all(|(&mu, &b)| mu > 0.0 && mu < b);
    StabilityReport { mu_max, stable }
}

/// How `E[𝒜ᵀ ⊗ 𝒜ᵀ]` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KronMethod {
    /// Closed form for independent per-node stochastic selection; exact
    /// averaging over the cycle phases otherwise. Valid at any network size.
    Exact,
    /// Brute-force average over the whole joint selection support.
    Enumerate { cap: u64 },
    MonteCarlo { samples: u64, seed: u64 },
}

impl Default for KronMethod {
    fn default() -> Self {
        KronMethod::Exact
    }
}

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct KronEstimate {
    pub matrix: CsrMatrix<f64>,
    /// Entrywise standard error, same pattern as `matrix` (Monte Carlo only).
    pub std_error: Option<CsrMatrix<f64>>,
}

fn transposed(t: &[Triplet]) -> Vec<Triplet> {
    t.iter().map(|&(r, c, v)| (c, r, v)).collect()
}

fn push_kron(a: &[Triplet], b: &[Triplet], nb: usize, scale: f64, out: &mut CooMatrix<f64>) {
    for &(ra, ca, va) in a {
        for &(rb, cb, vb) in b {
            out.push(ra * nb + rb, ca * nb + cb, scale * va * vb);
        }
    }
}

/// Sums triplets into a CSR matrix, flushing in batches to bound memory.
struct Accumulator {
    dim: usize,
    coo: CooMatrix<f64>,
    total: Option<CsrMatrix<f64>>,
}

impl Accumulator {
    const FLUSH: usize = 1 << 22;

    fn new(dim: usize) -> Self {
        Self { dim, coo: CooMatrix::new(dim, dim), total: None }
    }

    fn kron(&mut self, a: &[Triplet], b: &[Triplet], nb: usize, scale: f64) {
        push_kron(a, b, nb, scale, &mut self.coo);
        if self.coo.nnz() > Self::FLUSH {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let batch = CsrMatrix::from(&self.coo);
        self.coo = CooMatrix::new(self.dim, self.dim);
        self.total = Some(match self.total.take() {
            Some(t) => &t + &batch,
            None => batch,
        });
    }

    fn finish(mut self) -> CsrMatrix<f64> {
        self.flush();
        self.total.expect("flushed")
    }
}

fn selection_triplets(a: &CombinationMatrix, schedule: &SelectionSchedule, blocks: &[usize]) -> Vec<Triplet> {
    let m = schedule.param_dim();
    let diagonals: Vec<Vec<f64>> = blocks.iter().map(|&b| schedule.mask(b).to_f64()).collect();
    block_triplets(a, m, |l| &diagonals[l])
}

/// `D_r = E[𝒜_rᵀ ⊗ 𝒜_rᵀ]` over the selection distribution of `schedule`.
pub fn expected_kron(a: &CombinationMatrix, schedule: &SelectionSchedule, method: KronMethod) -> Result<KronEstimate, AnalysisError> {
    let n = a.num_nodes();
    let m = schedule.param_dim();
    let nm = n * m;
    match method {
        KronMethod::Exact if schedule.scheme() == Scheme::Stochastic && !schedule.is_network_shared() => {
            Ok(KronEstimate { matrix: independent_closed_form(a, schedule), std_error: None })
        }
        KronMethod::Exact => enumerate(a, schedule, u64::MAX),
        KronMethod::Enumerate { cap } => enumerate(a, schedule, cap),
        KronMethod::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(AnalysisError::TooFewSamples);
            }
            let mut rng = RngStream::new(seed, StreamPurpose::KronSampling, 0);
            let blocks = schedule.num_blocks();
            let mut config = vec![0usize; n];
            let mut moments: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
            let mut kron = CooMatrix::new(nm * nm, nm * nm);
            for _ in 0..samples {
                // A uniformly drawn cycle phase makes the sequential scheme random too.
                let phase = rng.random_range(0..blocks) as u64;
                schedule.select_network(phase, &mut rng, &mut config);
                let t = transposed(&selection_triplets(a, schedule, &config));
                kron.clear_triplets();
                push_kron(&t, &t, nm, 1.0, &mut kron);
                for (r, c, &v) in kron.triplet_iter() {
                    let e = moments.entry((r, c)).or_insert((0.0, 0.0));
                    e.0 += v;
                    e.1 += v * v;
                }
            }
            let s = samples as f64;
            let mut mean = CooMatrix::new(nm * nm, nm * nm);
            let mut se = CooMatrix::new(nm * nm, nm * nm);
            for (&(r, c), &(sum, sumsq)) in &moments {
                let mu = sum / s;
                let var = ((sumsq - s * mu * mu) / (s - 1.0)).max(0.0);
                mean.push(r, c, mu);
                se.push(r, c, (var / s).sqrt());
            }
            Ok(KronEstimate { matrix: CsrMatrix::from(&mean), std_error: Some(CsrMatrix::from(&se)) })
        }
    }
}

fn enumerate(a: &CombinationMatrix, schedule: &SelectionSchedule, cap: u64) -> Result<KronEstimate, AnalysisError> {
    let n = a.num_nodes();
    let nm = n * schedule.param_dim();
    let size = schedule.joint_support_size(n).unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(AnalysisError::SupportTooLarge { size, cap });
    }
    let mut acc = Accumulator::new(nm * nm);
    schedule.for_each_joint_config(n, |p, config| {
        let t = transposed(&selection_triplets(a, schedule, config));
        acc.kron(&t, &t, nm, p);
    });
    Ok(KronEstimate { matrix: acc.finish(), std_error: None })
}

/// With `𝒜 = I + Σ_l C_l ⊗ Λ_l` and the `Λ_l` independent across nodes,
/// `E[𝒜 ⊗ 𝒜] = Ā ⊗ Ā + Σ_l (E[T_l ⊗ T_l] − E[T_l] ⊗ E[T_l])` with `T_l = C_l ⊗ Λ_l`.
fn independent_closed_form(a: &CombinationMatrix, schedule: &SelectionSchedule) -> CsrMatrix<f64> {
    let n = a.num_nodes();
    let m = schedule.param_dim();
    let nm = n * m;
    let expected = schedule.expected_selection();
    let mut acc = Accumulator::new(nm * nm);

    let mean = transposed(&block_triplets(a, m, |_| &expected));
    acc.kron(&mean, &mean, nm, 1.0);

    // Nonzeros of C_l ⊗ diag(λ), transposed.
    let fluctuation = |l: usize, lambda: &[f64]| -> Vec<Triplet> {
        let mut t = Vec::new();
        for p in (0..n).filter(|&p| p != l) {
            let w = a.weight(l, p);
            if w == 0.0 {
                continue;
            }
            for (j, &x) in lambda.iter().enumerate() {
                if x != 0.0 {
                    t.push((l * m + j, p * m + j, w * x));
                    t.push((p * m + j, p * m + j, -w * x));
                }
            }
        }
        t
    };
    let blocks = schedule.num_blocks();
    let masks: Vec<Vec<f64>> = schedule.masks().iter().map(|s| s.to_f64()).collect();
    for l in 0..n {
        let te = fluctuation(l, &expected);
        if te.is_empty() {
            continue;
        }
        acc.kron(&te, &te, nm, -1.0);
        for mask in &masks {
            let tr = fluctuation(l, mask);
            acc.kron(&tr, &tr, nm, 1.0 / blocks as f64);
        }
    }
    acc.finish()
}

/// Diagonals of the stacked expected link-noise covariances
/// `Rw = blkdiag{Σ_l a1_lk² E[Λ] σ²_{w,lk}}` and the analogous `Rψ`.
/// Both vanish when the corresponding exchange is skipped or links are ideal.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariances {
    pub rw: Vec<f64>,
    pub rpsi: Vec<f64>,
}

pub fn aggregate_noise_covariances(env: &Environment, config: &AlgorithmConfig) -> NoiseCovariances {
    let n = env.num_nodes();
    let m = env.param_dim;
    let expected = config.schedule().expected_selection();
    let build = |active: bool, a: &CombinationMatrix, kind: LinkKind| {
        let mut r = vec![0.0; n * m];
        if !active || config.links() == Links::Ideal {
            return r;
        }
        for (j, link) in env.links.iter().enumerate() {
            let w = a.weight(link.from, link.to);
            let var = env.link_variance(j, kind);
            let k = link.to;
            for (x, &e) in r[k * m..(k + 1) * m].iter_mut().zip(&expected) {
                *x += w * w * e * var;
            }
        }
        r
    };
    NoiseCovariances {
        rw: build(config.first_phase_active(), config.a1(), LinkKind::W),
        rpsi: build(config.second_phase_active(), config.a2(), LinkKind::Psi),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Largest `N²M²` solved with a dense factorization.
    pub dense_cap: usize,
    pub restart: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { dense_cap: 1024, restart: 80, tolerance: 1e-12, max_iterations: 50_000 }
    }
}

/// Everything the steady-state expression needs, built once per configuration.
#[derive(Debug, Clone)]
pub struct AnalysisWorkspace {
    pub num_nodes: usize,
    pub dim: usize,
    /// Diagonal of `ℳ`.
    pub step: Vec<f64>,
    /// Diagonal of `E[ℛ_u]`.
    pub reg_mean: Vec<f64>,
    pub q1: BlockCombination,
    pub q2: BlockCombination,
    pub d1: KronEstimate,
    pub d2: KronEstimate,
    /// Diagonal of `G = diag{μ_k² σ²_{v,k} R_{u,k}}`.
    pub g: Vec<f64>,
    /// Diagonal of `H = I − ℳ E[ℛ_u]`.
    pub h: Vec<f64>,
    pub noise: NoiseCovariances,
    pub solver: SolverOptions,
}

impl AnalysisWorkspace {
    pub fn new(env: &Environment, config: &AlgorithmConfig, method: KronMethod, solver: SolverOptions) -> Result<Self, AnalysisError> {
        let n = env.num_nodes();
        let m = env.param_dim;
        let check = |what, got, expected| {
            if got == expected {
                Ok(())
            } else {
                Err(AnalysisError::DimensionMismatch { what, got, expected })
            }
        };
        check("combination matrix", config.a1().num_nodes(), n)?;
        check("selection dimension", config.schedule().param_dim(), m)?;
        let nm = n * m;
        let step: Vec<f64> = (0..nm).map(|i| config.step_sizes()[i / m]).collect();
        let reg_mean: Vec<f64> = env.regressor_variances.iter().flatten().copied().collect();
        let g = (0..nm).map(|i| step[i] * step[i] * env.meas_noise_vars[i / m] * reg_mean[i]).collect();
        let h = (0..nm).map(|i| 1.0 - step[i] * reg_mean[i]).collect();
        let schedule = config.schedule();
        let kron = |active: bool, a: &CombinationMatrix| {
            if active {
                expected_kron(a, schedule, method)
            } else {
                Ok(KronEstimate { matrix: CsrMatrix::identity(nm * nm), std_error: None })
            }
        };
        Ok(Self {
            num_nodes: n,
            dim: m,
            step,
            reg_mean,
            q1: expected_block_combination(config.a1(), schedule),
            q2: expected_block_combination(config.a2(), schedule),
            d1: kron(config.first_phase_active(), config.a1())?,
            d2: kron(config.second_phase_active(), config.a2())?,
            g,
            h,
            noise: aggregate_noise_covariances(env, config),
            solver,
        })
    }

    fn nm(&self) -> usize {
        self.num_nodes * self.dim
    }

    /// Diagonal of `H ⊗ H`: entry `r + c·NM` is `h_r h_c`.
    fn hh(&self) -> Vec<f64> {
        let nm = self.nm();
        let mut out = Vec::with_capacity(nm * nm);
        for c in 0..nm {
            out.extend(self.h.iter().map(|&hr| hr * self.h[c]));
        }
        out
    }

    /// `x ↦ F x = D₁ (H ⊗ H) D₂ x`.
    pub fn apply_f(&self, x: &[f64], out: &mut [f64]) {
        let hh = self.hh();
        let mut tmp = vec![0.0; x.len()];
        csr_mul(&self.d2.matrix, x, &mut tmp);
        tmp.iter_mut().zip(&hh).for_each(|(t, h)| *t *= h);
        csr_mul(&self.d1.matrix, &tmp, out);
    }

    pub fn dense_f(&self) -> DMatrix<f64> {
        let d1 = nalgebra_sparse::convert::serial::convert_csr_dense(&self.d1.matrix);
        let mut d2 = nalgebra_sparse::convert::serial::convert_csr_dense(&self.d2.matrix);
        for (i, h) in self.hh().into_iter().enumerate() {
            d2.row_mut(i).scale_mut(h);
        }
        d1 * d2
    }

    /// Row vector `vec(G)ᵀ D₂ + vec(H Rw H)ᵀ D₂ + vec(Rψ)ᵀ`, as a column.
    pub fn driving_vector(&self) -> Vec<f64> {
        let nm = self.nm();
        let mut x = vec![0.0; nm * nm];
        for i in 0..nm {
            x[i + i * nm] = self.g[i] + self.h[i] * self.h[i] * self.noise.rw[i];
        }
        let mut b = vec![0.0; nm * nm];
        csr_mul_transposed(&self.d2.matrix, &x, &mut b);
        for i in 0..nm {
            b[i + i * nm] += self.noise.rpsi[i];
        }
        b
    }

    /// Spectral radius of `Q₂ H Q₁`, which governs the mean of the error.
    pub fn mean_spectral_radius(&self) -> f64 {
        let mut hq1 = self.q1.matrix().clone();
        for (i, h) in self.h.iter().enumerate() {
            hq1.row_mut(i).scale_mut(*h);
        }
        spectral_radius_dense(&(self.q2.matrix() * hq1))
    }

    /// `‖F‖₁ ≤ ‖D₁‖₁ max|h_r h_c| ‖D₂‖₁`.
    fn norm_bound(&self) -> f64 {
        let hmax = self.h.iter().fold(0.0f64, |a, h| a.max(h.abs()));
        column_norm(&self.d1.matrix) * hmax * hmax * column_norm(&self.d2.matrix)
    }
}

fn csr_mul(a: &CsrMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (offsets, cols, vals) = a.csr_data();
    for (i, o) in out.iter_mut().enumerate() {
        let r = offsets[i]..offsets[i + 1];
        *o = cols[r.clone()].iter().zip(&vals[r]).map(|(&c, &v)| v * x[c]).sum();
    }
}

fn csr_mul_transposed(a: &CsrMatrix<f64>, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let (offsets, cols, vals) = a.csr_data();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for k in offsets[i]..offsets[i + 1] {
            out[cols[k]] += vals[k] * xi;
        }
    }
}

/// Largest absolute column sum.
fn column_norm(a: &CsrMatrix<f64>) -> f64 {
    let mut sums = vec![0.0; a.ncols()];
    for (_, c, v) in a.triplet_iter() {
        sums[c] += v.abs();
    }
    sums.into_iter().fold(0.0, f64::max)
}

pub fn spectral_radius_dense(a: &DMatrix<f64>) -> f64 {
    dense_radius(a).0
}

/// Eigenvalue-based radius; the unbounded Schur iteration can stall on
/// defective matrices, so it is capped and power iteration takes over.
fn dense_radius(a: &DMatrix<f64>) -> (f64, RadiusMethod) {
    let cap = 100 * a.nrows().max(10);
    match Schur::try_new(a.clone(), f64::EPSILON, cap) {
        Some(schur) => (schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max), RadiusMethod::Eigenvalues),
        None => {
            let radius = power_iteration(|x, y| y.copy_from_slice((a * DVector::from_column_slice(x)).as_slice()), a.nrows(), 3000);
            (radius, RadiusMethod::PowerIteration)
        }
    }
}

/// Column sums of a sparse matrix.
pub fn column_sums(a: &CsrMatrix<f64>) -> Vec<f64> {
    let mut sums = vec![0.0; a.ncols()];
    for (_, c, v) in a.triplet_iter() {
        sums[c] += v;
    }
    sums
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusMethod {
    /// All eigenvalues of the dense `F`.
    Eigenvalues,
    /// Upper bound from the induced 1-norm.
    NormBound,
    PowerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    DenseLu,
    Gmres { iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsdReport {
    pub linear: f64,
    pub db: f64,
    /// Spectral radius of `F` (or an upper bound on it, see `radius_method`).
    pub radius: f64,
    pub radius_method: RadiusMethod,
    pub solve_method: SolveMethod,
}

/// Lower limit applied to every dB conversion.
pub const DB_FLOOR: f64 = -200.0;

pub fn to_db(x: f64) -> f64 {
    if x > 0.0 {
        (10.0 * x.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Steady-state network MSD of the configuration captured in `ws`.
pub fn theoretical_msd(ws: &AnalysisWorkspace) -> Result<MsdReport, AnalysisError> {
    let nm = ws.nm();
    let dim = nm * nm;
    let mut rhs = vec![0.0; dim];
    for i in 0..nm {
        rhs[i + i * nm] = 1.0 / ws.num_nodes as f64;
    }
    let b = ws.driving_vector();

    let (sigma, radius, radius_method, solve_method) = if dim <= ws.solver.dense_cap {
        let f = ws.dense_f();
        let (radius, method) = dense_radius(&f);
        if radius >= stability_limit(method) {
            return Err(AnalysisError::Unstable { radius });
        }
        let system = DMatrix::identity(dim, dim) - f;
        let sol = system.lu().solve(&DVector::from_vec(rhs)).ok_or(AnalysisError::Singular)?;
        (sol.data.into(), radius, method, SolveMethod::DenseLu)
    } else {
        let (radius, method) = match ws.norm_bound() {
            bound if bound < 1.0 => (bound, RadiusMethod::NormBound),
            _ => (power_iteration(|x, y| ws.apply_f(x, y), dim, 3000), RadiusMethod::PowerIteration),
        };
        if radius >= stability_limit(method) {
            return Err(AnalysisError::Unstable { radius });
        }
        let (x, iterations) = gmres(
            |x, y| {
                ws.apply_f(x, y);
                y.iter_mut().zip(x).for_each(|(yi, xi)| *yi = xi - *yi);
            },
            &rhs,
            &ws.solver,
        )?;
        (x, radius, method, SolveMethod::Gmres { iterations })
    };
    let linear: f64 = b.iter().zip(&sigma).map(|(x, y)| x * y).sum();
    Ok(MsdReport { linear, db: to_db(linear), radius, radius_method, solve_method })
}

/// Power iteration approaches the radius from below, so a marginal estimate
/// is not trusted.
fn stability_limit(method: RadiusMethod) -> f64 {
    match method {
        RadiusMethod::PowerIteration => 1.0 - 1e-8,
        _ => 1.0,
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn power_iteration(apply: impl Fn(&[f64], &mut [f64]), dim: usize, iterations: usize) -> f64 {
    let mut x = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut y = vec![0.0; dim];
    let mut estimate = 0.0;
    for _ in 0..iterations {
        apply(&x, &mut y);
        let ny = norm(&y);
        if ny == 0.0 || !ny.is_finite() {
            return if ny == 0.0 { 0.0 } else { f64::INFINITY };
        }
        estimate = ny;
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / ny;
        }
    }
    estimate
}

/// Restarted GMRES with modified Gram–Schmidt and Givens rotations.
fn gmres(apply: impl Fn(&[f64], &mut [f64]), b: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, usize), AnalysisError> {
    let n = b.len();
    let restart = opts.restart.max(1);
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut total = 0;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut rel = 1.0;
    while total < opts.max_iterations {
        apply(&x, &mut r);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        let beta = norm(&r);
        rel = beta / bnorm;
        if rel <= opts.tolerance {
            return Ok((x, total));
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut hess = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k = 0;
        while k < restart && total < opts.max_iterations {
            apply(&v[k], &mut w);
            for (j, vj) in v.iter().enumerate() {
                let hjk: f64 = w.iter().zip(vj).map(|(a, b)| a * b).sum();
                hess[j][k] = hjk;
                w.iter_mut().zip(vj).for_each(|(wi, vi)| *wi -= hjk * vi);
            }
            let hn = norm(&w);
            hess[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let d = hess[k][k].hypot(hess[k + 1][k]);
            cs[k] = hess[k][k] / d;
            sn[k] = hess[k + 1][k] / d;
            hess[k][k] = d;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k += 1;
            total += 1;
            rel = g[k].abs() / bnorm;
            if rel <= opts.tolerance || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|wi| wi / hn).collect());
        }
        // Back-substitution for the least-squares coefficients.
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| hess[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&v[j]).for_each(|(xi, vi)| *xi += yj * vi);
        }
    }
    apply(&x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let final_rel = norm(&r) / bnorm;
    if final_rel <= opts.tolerance * 10.0 {
        Ok((x, total))
    } else {
        Err(AnalysisError::NotConverged { iterations: total, residual: final_rel.max(rel) })
    }
}

/// One step of the stacked error recursion driven by recorded draws.
pub fn error_recursion_step(
    prev: &DVector<f64>,
    draws: &IterationDraws,
    topology: &NetworkTopology,
    config: &AlgorithmConfig,
) -> Result<DVector<f64>, AnalysisError> {
    let n = topology.num_nodes();
    let m = config.schedule().param_dim();
    let nm = n * m;
    let check = |what, got, expected| {
        if got == expected {
            Ok(())
        } else {
            Err(AnalysisError::DimensionMismatch { what, got, expected })
        }
    };
    check("error vector", prev.len(), nm)?;
    check("regressors", draws.regressors.len(), nm)?;
    check("measurement noise", draws.measurement_noise.len(), n)?;

    let schedule = config.schedule();
    // 𝒜 and the aggregate link noise Σ_l a_lk Λ_l v_lk for one exchange.
    let phase = |active: bool, a: &CombinationMatrix, sel: &[usize], noise: &[f64]| -> Result<(DMatrix<f64>, DVector<f64>), AnalysisError> {
        if !active {
            return Ok((DMatrix::identity(nm, nm), DVector::zeros(nm)));
        }
        check("selections", sel.len(), n)?;
        let masks: Vec<&SelectionMatrix> = sel.iter().map(|&b| schedule.mask(b)).collect();
        let big_a = build_block_combination(a, &masks)?.matrix;
        let mut v = DVector::zeros(nm);
        if !noise.is_empty() {
            check("link noise", noise.len(), topology.num_links() * m)?;
            for (j, (l, k)) in topology.links().enumerate() {
                for e in 0..m {
                    if masks[l].is_selected(e) {
                        v[k * m + e] += a.weight(l, k) * noise[j * m + e];
                    }
                }
            }
        }
        Ok((big_a, v))
    };
    let (a1, vw) = phase(config.first_phase_active(), config.a1(), &draws.first_selection, &draws.first_link_noise)?;
    let (a2, vpsi) = phase(config.second_phase_active(), config.a2(), &draws.second_selection, &draws.second_link_noise)?;

    // I − ℳℛ_i with ℛ_i = blkdiag{u_kᵀ u_k}, and s_i = col{u_kᵀ v_k}.
    let mut b = DMatrix::identity(nm, nm);
    let mut s = DVector::zeros(nm);
    for k in 0..n {
        let u = DVector::from_column_slice(draws.regressor(k, m));
        let mu = config.step_sizes()[k];
        let mut blk = b.view_mut((k * m, k * m), (m, m));
        blk -= mu * &u * u.transpose();
        s.rows_mut(k * m, m).copy_from(&(mu * draws.measurement_noise[k] * &u));
    }
    Ok(&a2 * (&b * (&a1 * prev - vw) - s) - vpsi)
}
