//! The general partial-diffusion LMS recursion with noisy exchanges.
//!
//! One iteration runs three steps at every node `k`:
//!
//! ```text
//! φ_k = a1_kk w_k + Σ_{l≠k} a1_lk [Λ_l w_l + (I - Λ_l) w_k] + Σ_{l≠k} a1_lk Λ_l v^w_lk
//! ψ_k = φ_k + μ_k u_kᵀ (d_k - u_k φ_k)
//! w_k = a2_kk ψ_k + Σ_{l≠k} a2_lk [Λ'_l ψ_l + (I - Λ'_l) ψ_k] + Σ_{l≠k} a2_lk Λ'_l v^ψ_lk
//! ```
//!
//! A node only receives the entries its neighbor selected (plus link noise
//! on those entries) and fills the rest from its own estimate. A combination
//! step whose matrix is the identity transmits nothing and is skipped, which
//! gives ATC (`A1 = I`) and CTA (`A2 = I`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{dot, Environment, LinkKind, RngStream, StreamPurpose};
use crate::network::{validate_combination, CombinationMatrix, CombinationRole, NetworkTopology};
use crate::selection::{SelectionMatrix, SelectionSchedule};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch { what: &'static str, got: usize, expected: usize },
    #[error("combination matrix {role:?} is invalid: {detail}")]
    InvalidCombination { role: CombinationRole, detail: String },
    #[error("step size {mu} at node {node} is outside the mean-stability range (0, {bound})")]
    UnstableStep { node: usize, mu: f64, bound: f64 },
    #[error("step size {mu} at node {node} must be non-negative")]
    NegativeStep { node: usize, mu: f64 },
    #[error("non-finite estimate at node {node} in iteration {iteration}")]
    Diverged { iteration: u64, node: usize },
    #[error("horizon must be at least one iteration")]
    EmptyHorizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Adapt then combine: `A1 = I`.
    Atc,
    /// Combine then adapt: `A2 = I`.
    Cta,
    /// Both combination steps active.
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Links {
    Ideal,
    Noisy,
}

#[derive(Debug, Clone)]
pub struct AlgorithmConfig {
    mode: Mode,
    step_sizes: Vec<f64>,
    links: Links,
    schedule: SelectionSchedule,
    a1: CombinationMatrix,
    a2: CombinationMatrix,
}

impl AlgorithmConfig {
    /// Validates both matrices against `topology`. In ATC mode `A1` is
    /// replaced by the identity, in CTA mode `A2` is.
    pub fn new(
        mode: Mode,
        step_sizes: Vec<f64>,
        links: Links,
        schedule: SelectionSchedule,
        a1: CombinationMatrix,
        a2: CombinationMatrix,
        topology: &NetworkTopology,
    ) -> Result<Self, EngineError> {
        let n = topology.num_nodes();
        if step_sizes.len() != n {
            return Err(EngineError::DimensionMismatch { what: "step sizes", got: step_sizes.len(), expected: n });
        }
        if let Some((node, &mu)) = step_sizes.iter().enumerate().find(|(_, &mu)| !(mu >= 0.0)) {
            return Err(EngineError::NegativeStep { node, mu });
        }
        let a1 = if mode == Mode::Atc { CombinationMatrix::identity(n, CombinationRole::First) } else { a1 };
        let a2 = if mode == Mode::Cta { CombinationMatrix::identity(n, CombinationRole::Second) } else { a2 };
        for a in [&a1, &a2] {
            match validate_combination(a, topology) {
                Ok(Ok(())) => {}
                Ok(Err(violations)) => {
                    let detail = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
                    return Err(EngineError::InvalidCombination { role: a.role(), detail });
                }
                Err(e) => return Err(EngineError::InvalidCombination { role: a.role(), detail: e.to_string() }),
            }
        }
        Ok(Self { mode, step_sizes, links, schedule, a1, a2 })
    }

    /// Uniform weights in every active combination step and one step size
    /// shared by all nodes.
    pub fn uniform(
        mode: Mode,
        step_size: f64,
        links: Links,
        schedule: SelectionSchedule,
        topology: &NetworkTopology,
    ) -> Result<Self, EngineError> {
        let a1 = crate::network::build_uniform_combination(topology, CombinationRole::First);
        let a2 = crate::network::build_uniform_combination(topology, CombinationRole::Second);
        Self::new(mode, vec![step_size; topology.num_nodes()], links, schedule, a1, a2, topology)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.step_sizes
    }

    pub fn links(&self) -> Links {
        self.links
    }

    pub fn schedule(&self) -> &SelectionSchedule {
        &self.schedule
    }

    pub fn a1(&self) -> &CombinationMatrix {
        &self.a1
    }

    pub fn a2(&self) -> &CombinationMatrix {
        &self.a2
    }

    /// Whether the pre-adaptation combination exchanges anything.
    pub fn first_phase_active(&self) -> bool {
        !self.a1.is_identity()
    }

    pub fn second_phase_active(&self) -> bool {
        !self.a2.is_identity()
    }

    /// Strict check of `0 < μ_k < 2 / λ_max(R_{u,k})` at every node.
    pub fn check_mean_stability(&self, env: &Environment) -> Result<(), EngineError> {
        for (node, &mu) in self.step_sizes.iter().enumerate() {
            let bound = 2.0 / env.max_regressor_eigenvalue(node);
            if !(mu > 0.0 && mu < bound) {
                return Err(EngineError::UnstableStep { node, mu, bound });
            }
        }
        Ok(())
    }
}

/// Stacked per-node estimates, node-major (`N × M`).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    num_nodes: usize,
    dim: usize,
    pub weights: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl NetworkState {
    /// `w_{k,-1} = 0` everywhere.
    pub fn zeros(num_nodes: usize, dim: usize) -> Self {
        let z = vec![0.0; num_nodes * dim];
        Self { num_nodes, dim, weights: z.clone(), phi: z.clone(), psi: z }
    }

    /// Every node starts from the same weight vector.
    pub fn uniform(num_nodes: usize, weight: &[f64]) -> Self {
        let mut s = Self::zeros(num_nodes, weight.len());
        for k in 0..num_nodes {
            s.weights[k * weight.len()..(k + 1) * weight.len()].copy_from_slice(weight);
        }
        s
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    /// `‖w° − w_k‖²` for every node.
    pub fn squared_deviations<'a>(&'a self, truth: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        (0..self.num_nodes).map(move |k| self.weight(k).iter().zip(truth).map(|(w, t)| (t - w) * (t - w)).sum())
    }
}

/// Selection matrices of all nodes for one combination step, by block index.
#[derive(Debug, Clone, Copy)]
pub struct Selections<'a> {
    schedule: &'a SelectionSchedule,
    blocks: &'a [usize],
}

impl<'a> Selections<'a> {
    pub fn new(schedule: &'a SelectionSchedule, blocks: &'a [usize]) -> Self {
        Self { schedule, blocks }
    }

    #[inline]
    pub fn get(&self, node: usize) -> &'a SelectionMatrix {
        self.schedule.mask(self.blocks[node])
    }
}

/// Everything random consumed by one iteration, kept so the stacked error
/// recursion can replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDraws {
    pub iteration: u64,
    /// `u_{k,i}`, node-major.
    pub regressors: Vec<f64>,
    pub measurements: Vec<f64>,
    pub measurement_noise: Vec<f64>,
    /// Block index per node for the first combination; empty if it is skipped.
    pub first_selection: Vec<usize>,
    pub second_selection: Vec<usize>,
    /// `v^w_{lk}` per directed link (topology order), `M` entries each; empty
    /// when the first combination is skipped or links are ideal.
    pub first_link_noise: Vec<f64>,
    pub second_link_noise: Vec<f64>,
}

impl IterationDraws {
    pub fn empty() -> Self {
        Self {
            iteration: 0,
            regressors: Vec::new(),
            measurements: Vec::new(),
            measurement_noise: Vec::new(),
            first_selection: Vec::new(),
            second_selection: Vec::new(),
            first_link_noise: Vec::new(),
            second_link_noise: Vec::new(),
        }
    }

    pub fn regressor(&self, k: usize, dim: usize) -> &[f64] {
        &self.regressors[k * dim..(k + 1) * dim]
    }
}

/// Version tag of the serialized draw log.
pub const DRAW_LOG_VERSION: u32 = 1;

/// Replayable record of a trial's randomness, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawLog {
    pub version: u32,
    pub draws: Vec<IterationDraws>,
}

impl DrawLog {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Per-trial random streams.
#[derive(Debug, Clone)]
pub struct DrawSource {
    regressor: RngStream,
    meas: RngStream,
    link_first: RngStream,
    link_second: RngStream,
    select_first: RngStream,
    select_second: RngStream,
}

impl DrawSource {
    pub fn new(seed: u64, trial: u64) -> Self {
        let s = |p| RngStream::new(seed, p, trial);
        Self {
            regressor: s(StreamPurpose::Regressor),
            meas: s(StreamPurpose::MeasurementNoise),
            link_first: s(StreamPurpose::LinkNoiseFirst),
            link_second: s(StreamPurpose::LinkNoiseSecond),
            select_first: s(StreamPurpose::SelectionFirst),
            select_second: s(StreamPurpose::SelectionSecond),
        }
    }

    /// Draws iteration `i` into `out`, reusing its buffers.
    ///
    /// The first combination of iteration `i` uses the selection of phase
    /// `i - 1` (phase 0 when `i = 0`); the second uses phase `i`. Stochastic
    /// selections of the two steps come from separate streams.
    pub fn fill(
        &mut self,
        iteration: u64,
        env: &Environment,
        topology: &NetworkTopology,
        config: &AlgorithmConfig,
        out: &mut IterationDraws,
    ) {
        let n = topology.num_nodes();
        let m = env.param_dim;
        out.iteration = iteration;
        out.regressors.resize(n * m, 0.0);
        out.measurements.resize(n, 0.0);
        out.measurement_noise.resize(n, 0.0);
        for k in 0..n {
            let u = &mut out.regressors[k * m..(k + 1) * m];
            env.fill_regressor(k, &mut self.regressor, u);
            let (d, v) = env.sample_measurement_with_noise(k, u, &mut self.meas);
            out.measurements[k] = d;
            out.measurement_noise[k] = v;
        }

        let noisy = config.links() == Links::Noisy;
        let schedule = config.schedule();
        let phases = [
            (config.first_phase_active(), iteration.saturating_sub(1), LinkKind::W),
            (config.second_phase_active(), iteration, LinkKind::Psi),
        ];
        for (phase, (active, phase_iter, kind)) in phases.into_iter().enumerate() {
            let (sel, noise, sel_rng, noise_rng) = if phase == 0 {
                (&mut out.first_selection, &mut out.first_link_noise, &mut self.select_first, &mut self.link_first)
            } else {
                (&mut out.second_selection, &mut out.second_link_noise, &mut self.select_second, &mut self.link_second)
            };
            if !active {
                sel.clear();
                noise.clear();
                continue;
            }
            sel.resize(n, 0);
            schedule.select_network(phase_iter, sel_rng, sel);
            if noisy {
                noise.resize(topology.num_links() * m, 0.0);
                for (j, chunk) in noise.chunks_exact_mut(m).enumerate() {
                    env.fill_link_noise(j, kind, noise_rng, chunk);
                }
            } else {
                noise.clear();
            }
        }
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), EngineError> {
    if got == expected {
        Ok(())
    } else {
        Err(EngineError::DimensionMismatch { what, got, expected })
    }
}

/// Partial combination at `node` over stacked `estimates`, written to `out`.
fn partial_combine(
    node: usize,
    topology: &NetworkTopology,
    a: &CombinationMatrix,
    estimates: &[f64],
    selections: Selections<'_>,
    link_noise: Option<&[f64]>,
    out: &mut [f64],
) {
    let m = out.len();
    let own = &estimates[node * m..(node + 1) * m];
    let a_kk = a.weight(node, node);
    for (o, &x) in out.iter_mut().zip(own) {
        *o = a_kk * x;
    }
    for (link, l) in topology.incoming(node) {
        let a_lk = a.weight(l, node);
        if a_lk == 0.0 {
            continue;
        }
        let theirs = &estimates[l * m..(l + 1) * m];
        let mask = selections.get(l).diagonal();
        match link_noise {
            Some(noise) => {
                let v = &noise[link * m..(link + 1) * m];
                for j in 0..m {
                    out[j] += a_lk * if mask[j] { theirs[j] + v[j] } else { own[j] };
                }
            }
            None => {
                for j in 0..m {
                    out[j] += a_lk * if mask[j] { theirs[j] } else { own[j] };
                }
            }
        }
    }
}

fn check_combine_inputs(
    topology: &NetworkTopology,
    a: &CombinationMatrix,
    estimates: &[f64],
    selections: &Selections<'_>,
    link_noise: Option<&[f64]>,
    out: &[f64],
) -> Result<(), EngineError> {
    let n = topology.num_nodes();
    let m = out.len();
    check_len("combination matrix", a.num_nodes(), n)?;
    check_len("stacked estimates", estimates.len(), n * m)?;
    check_len("selections", selections.blocks.len(), n)?;
    check_len("selection dimension", selections.schedule.param_dim(), m)?;
    if let Some(v) = link_noise {
        check_len("link noise", v.len(), topology.num_links() * m)?;
    }
    Ok(())
}

/// `φ_{k,i-1}` from the previous weights `w_{·,i-1}`, the neighbors'
/// selections `Λ_{l,i-1}` and the first-exchange link noise.
pub fn combine_first(
    node: usize,
    topology: &NetworkTopology,
    a1: &CombinationMatrix,
    weights: &[f64],
    selections: Selections<'_>,
    link_noise: Option<&[f64]>,
    out: &mut [f64],
) -> Result<(), EngineError> {
    check_combine_inputs(topology, a1, weights, &selections, link_noise, out)?;
    partial_combine(node, topology, a1, weights, selections, link_noise, out);
    Ok(())
}

/// `w_{k,i}` from the intermediate estimates `ψ_{·,i}`; mirrors [`combine_first`].
pub fn combine_second(
    node: usize,
    topology: &NetworkTopology,
    a2: &CombinationMatrix,
    psi: &[f64],
    selections: Selections<'_>,
    link_noise: Option<&[f64]>,
    out: &mut [f64],
) -> Result<(), EngineError> {
    check_combine_inputs(topology, a2, psi, &selections, link_noise, out)?;
    partial_combine(node, topology, a2, psi, selections, link_noise, out);
    Ok(())
}

/// LMS step about the combined estimate: `ψ = φ + μ uᵀ (d − u φ)`.
#[inline]
pub fn adapt(phi: &[f64], regressor: &[f64], measurement: f64, step: f64, out: &mut [f64]) {
    let e = measurement - dot(regressor, phi);
    for ((o, &p), &u) in out.iter_mut().zip(phi).zip(regressor) {
        *o = p + step * e * u;
    }
}

/// Advances `state` by one iteration using `draws`.
pub fn run_iteration(
    state: &mut NetworkState,
    topology: &NetworkTopology,
    config: &AlgorithmConfig,
    draws: &IterationDraws,
) -> Result<(), EngineError> {
    let n = state.num_nodes;
    let m = state.dim;
    check_len("nodes", topology.num_nodes(), n)?;
    check_len("regressors", draws.regressors.len(), n * m)?;
    check_len("measurements", draws.measurements.len(), n)?;
    let schedule = config.schedule();

    if config.first_phase_active() {
        let sel = Selections::new(schedule, &draws.first_selection);
        let noise = (!draws.first_link_noise.is_empty()).then_some(&draws.first_link_noise[..]);
        check_combine_inputs(topology, config.a1(), &state.weights, &sel, noise, &state.phi[..m])?;
        for k in 0..n {
            partial_combine(k, topology, config.a1(), &state.weights, sel, noise, &mut state.phi[k * m..(k + 1) * m]);
        }
    } else {
        state.phi.copy_from_slice(&state.weights);
    }

    for k in 0..n {
        let r = k * m..(k + 1) * m;
        adapt(&state.phi[r.clone()], &draws.regressors[r.clone()], draws.measurements[k], config.step_sizes()[k], &mut state.psi[r]);
    }

    if config.second_phase_active() {
        let sel = Selections::new(schedule, &draws.second_selection);
        let noise = (!draws.second_link_noise.is_empty()).then_some(&draws.second_link_noise[..]);
        check_combine_inputs(topology, config.a2(), &state.psi, &sel, noise, &state.weights[..m])?;
        for k in 0..n {
            partial_combine(k, topology, config.a2(), &state.psi, sel, noise, &mut state.weights[k * m..(k + 1) * m]);
        }
    } else {
        state.weights.copy_from_slice(&state.psi);
    }

    if let Some(pos) = state.weights.iter().position(|w| !w.is_finite()) {
        return Err(EngineError::Diverged { iteration: draws.iteration, node: pos / m });
    }
    Ok(())
}

/// Squared deviations `‖w° − w_{k,i}‖²` of one trial, iteration-major (`T × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub num_nodes: usize,
    pub squared_deviation: Vec<f64>,
    pub draws: Option<DrawLog>,
}

impl TrialRecord {
    pub fn iterations(&self) -> usize {
        self.squared_deviation.len() / self.num_nodes
    }

    /// `(1/N) Σ_k ‖w° − w_{k,i}‖²` per iteration.
    pub fn network_msd(&self) -> Vec<f64> {
        self.squared_deviation.chunks_exact(self.num_nodes).map(|row| row.iter().sum::<f64>() / self.num_nodes as f64).collect()
    }
}

#[derive(Debug, Error)]
#[error("trial diverged: {source}")]
pub struct TrialDiverged {
    pub source: EngineError,
    /// Iterations completed before the failure.
    pub partial: TrialRecord,
}

/// Runs `horizon` iterations from `w_{k,-1} = 0`, drawing randomness from the
/// streams of `(seed, trial)`. With `keep_draws` the draw log is returned too.
pub fn run_trial(
    env: &Environment,
    topology: &NetworkTopology,
    config: &AlgorithmConfig,
    horizon: usize,
    seed: u64,
    trial: u64,
    keep_draws: bool,
) -> Result<TrialRecord, Box<TrialDiverged>> {
    let n = topology.num_nodes();
    let mut record = TrialRecord {
        num_nodes: n,
        squared_deviation: Vec::with_capacity(horizon * n),
        draws: keep_draws.then(|| DrawLog { version: DRAW_LOG_VERSION, draws: Vec::with_capacity(horizon) }),
    };
    if horizon == 0 {
        return Err(Box::new(TrialDiverged { source: EngineError::EmptyHorizon, partial: record }));
    }
    let mut state = NetworkState::zeros(n, env.param_dim);
    let mut source = DrawSource::new(seed, trial);
    let mut draws = IterationDraws::empty();
    for i in 0..horizon as u64 {
        source.fill(i, env, topology, config, &mut draws);
        if let Err(e) = run_iteration(&mut state, topology, config, &draws) {
            return Err(Box::new(TrialDiverged { source: e, partial: record }));
        }
        record.squared_deviation.extend(state.squared_deviations(&env.true_param));
        if let Some(log) = record.draws.as_mut() {
            log.draws.push(draws.clone());
        }
    }
    Ok(record)
}
