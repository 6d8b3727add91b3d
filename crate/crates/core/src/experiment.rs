//! Config-driven Monte Carlo experiments: learning curves, steady-state
//! estimates, theory comparison and file outputs.
//!
//! Every grid entry reuses the same per-trial random streams (trial `t` draws
//! the same regressors and noises whatever the entry), so differences between
//! entries are estimated from paired trials.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    mean_stability_bounds, theoretical_msd, to_db, AnalysisWorkspace, KronMethod, MsdReport, SolverOptions,
    StabilityReport,
};
use crate::data::{generate_environment, DataError, Environment, EnvironmentSpec};
use crate::engine::{run_trial, AlgorithmConfig, EngineError, Links, Mode};
use crate::network::{generate_topology, NetworkError, NetworkTopology};
use crate::selection::{PhaseCoupling, Scheme, SelectionError, SelectionSchedule};

pub const MANIFEST_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("grid entry {entry}: {source}")]
    Selection { entry: String, source: SelectionError },
    #[error("grid entry {entry}: {source}")]
    Engine { entry: String, source: EngineError },
    #[error("duplicate grid entry {0}")]
    DuplicateEntry(String),
    #[error("manifest does not match the regenerated {0}")]
    ManifestMismatch(&'static str),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: Option<usize>,
    pub avg_neighbors: Option<f64>,
    pub seed: Option<u64>,
    /// Explicit non-self neighbor lists; excludes the three generator keys.
    pub neighbors: Option<Vec<Vec<usize>>>,
}

impl TopologyConfig {
    pub fn generated(nodes: usize, avg_neighbors: f64, seed: u64) -> Self {
        Self { nodes: Some(nodes), avg_neighbors: Some(avg_neighbors), seed: Some(seed), neighbors: None }
    }

    pub fn build(&self) -> Result<NetworkTopology, ExperimentError> {
        match (&self.neighbors, self.nodes, self.avg_neighbors, self.seed) {
            (Some(lists), None, None, None) => Ok(NetworkTopology::from_neighbor_lists(lists.clone())?),
            (None, Some(n), Some(avg), Some(seed)) => Ok(generate_topology(n, avg, seed)?),
            _ => Err(ExperimentError::Config(
                "topology needs either `neighbors` or all of `nodes`, `avg_neighbors`, `seed`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    pub step_size: Option<f64>,
    /// Per-node step sizes; excludes `step_size`.
    pub step_sizes: Option<Vec<f64>>,
    /// Reject step sizes outside the mean-stability range before running.
    #[serde(default)]
    pub strict_stability: bool,
}

impl AlgorithmSection {
    fn step_sizes(&self, n: usize) -> Result<Vec<f64>, ExperimentError> {
        match (self.step_size, &self.step_sizes) {
            (Some(mu), None) => Ok(vec![mu; n]),
            (None, Some(v)) if v.len() == n => Ok(v.clone()),
            (None, Some(v)) => Err(ExperimentError::Config(format!("{} step sizes for {n} nodes", v.len()))),
            _ => Err(ExperimentError::Config("set exactly one of `step_size`, `step_sizes`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub seed: u64,
    /// Trailing fraction of the horizon averaged for the steady state.
    #[serde(default = "default_window")]
    pub steady_state_window: f64,
    #[serde(default)]
    pub kron_method: KronMethod,
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
}

fn default_trials() -> usize {
    200
}
fn default_iterations() -> usize {
    2000
}
fn default_window() -> f64 {
    0.1
}
fn default_dense_cap() -> usize {
    SolverOptions::default().dense_cap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub plots: bool,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_true() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out_dir(), plots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// A grid block; list-valued fields expand to their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub mode: OneOrMany<Mode>,
    pub scheme: OneOrMany<Scheme>,
    /// Entries transmitted per exchange, `L`.
    pub entries: OneOrMany<usize>,
    pub links: OneOrMany<Links>,
    pub phase_coupling: Option<PhaseCoupling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub environment: EnvironmentSpec,
    pub algorithm: AlgorithmSection,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub grid: Vec<GridBlock>,
}

/// One expanded grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub mode: Mode,
    pub scheme: Scheme,
    pub entries: usize,
    pub links: Links,
    pub coupling: PhaseCoupling,
}

impl GridEntry {
    pub fn id(&self) -> String {
        let mode = match self.mode {
            Mode::Atc => "atc",
            Mode::Cta => "cta",
            Mode::General => "general",
        };
        let scheme = match self.scheme {
            Scheme::Sequential => "seq",
            Scheme::Stochastic => "sto",
        };
        let links = match self.links {
            Links::Ideal => "ideal",
            Links::Noisy => "noisy",
        };
        let mut id = format!("{mode}-{scheme}-L{}-{links}", self.entries);
        if self.coupling != self.scheme.default_coupling() {
            id.push_str(match self.coupling {
                PhaseCoupling::Shared => "-shared",
                PhaseCoupling::Independent => "-independent",
            });
        }
        id
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self, ExperimentError> {
        toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Grid entries in execution order (sorted by id).
    pub fn expand_grid(&self) -> Result<Vec<GridEntry>, ExperimentError> {
        let mut out = Vec::new();
        for block in &self.grid {
            for mode in block.mode.to_vec() {
                for scheme in block.scheme.to_vec() {
                    for entries in block.entries.to_vec() {
                        for links in block.links.to_vec() {
                            let coupling = block.phase_coupling.unwrap_or(scheme.default_coupling());
                            out.push(GridEntry { mode, scheme, entries, links, coupling });
                        }
                    }
                }
            }
        }
        out.sort_by_key(GridEntry::id);
        if let Some(w) = out.windows(2).find(|w| w[0].id() == w[1].id()) {
            return Err(ExperimentError::DuplicateEntry(w[0].id()));
        }
        Ok(out)
    }
}

/// Loads either a config file or an emitted manifest (recognized by its
/// `manifest_version` key). A manifest's recorded topology and environment
/// must match what its config regenerates.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
    if !value.contains_key("manifest_version") {
        return ExperimentConfig::from_toml(&text);
    }
    let manifest: Manifest = toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
    if manifest.manifest_version != MANIFEST_VERSION {
        return Err(ExperimentError::Config(format!("unsupported manifest version {}", manifest.manifest_version)));
    }
    let prepared = prepare(&manifest.config)?;
    if prepared.topology != manifest.topology {
        return Err(ExperimentError::ManifestMismatch("topology"));
    }
    if prepared.environment != manifest.environment {
        return Err(ExperimentError::ManifestMismatch("environment"));
    }
    Ok(manifest.config)
}

/// A validated configuration, ready to run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub topology: NetworkTopology,
    pub environment: Environment,
    pub entries: Vec<(GridEntry, AlgorithmConfig)>,
    pub stability: StabilityReport,
}

/// Checks every precondition without running any trial.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let run = &config.run;
    if run.trials == 0 || run.iterations == 0 {
        return Err(ExperimentError::Config("`trials` and `iterations` must be positive".into()));
    }
    if !(run.steady_state_window > 0.0 && run.steady_state_window <= 1.0) {
        return Err(ExperimentError::Config("`steady_state_window` must lie in (0, 1]".into()));
    }
    let topology = config.topology.build()?;
    let environment = generate_environment(&topology, &config.environment)?;
    let steps = config.algorithm.step_sizes(topology.num_nodes())?;
    let stability = mean_stability_bounds(&environment, &steps);
    let mut entries = Vec::new();
    for entry in config.expand_grid()? {
        let id = entry.id();
        let schedule = SelectionSchedule::new(entry.scheme, environment.param_dim, entry.entries, entry.coupling)
            .map_err(|source| ExperimentError::Selection { entry: id.clone(), source })?;
        let engine_err = |source| ExperimentError::Engine { entry: id.clone(), source };
        let uniform = AlgorithmConfig::uniform(entry.mode, 0.0, entry.links, schedule, &topology).map_err(engine_err)?;
        let cfg = AlgorithmConfig::new(
            entry.mode,
            steps.clone(),
            entry.links,
            uniform.schedule().clone(),
            uniform.a1().clone(),
            uniform.a2().clone(),
            &topology,
        )
        .map_err(engine_err)?;
        if config.algorithm.strict_stability {
            cfg.check_mean_stability(&environment).map_err(engine_err)?;
        }
        entries.push((entry, cfg));
    }
    Ok(Prepared { config: config.clone(), topology, environment, entries, stability })
}

/// Simulated network MSD of one grid entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    pub entry_id: String,
    pub trials: usize,
    pub seed: u64,
    /// `(1/N) Σ_k ‖w° − w_{k,i}‖²` per trial, trial-major.
    pub trial_msd: Vec<Vec<f64>>,
    /// Ensemble average per iteration (linear).
    pub msd: Vec<f64>,
    /// Theoretical steady state (linear), when available.
    pub theory: Option<f64>,
}

impl LearningCurve {
    pub fn from_trials(entry_id: impl Into<String>, seed: u64, trial_msd: Vec<Vec<f64>>, theory: Option<f64>) -> Self {
        let t = trial_msd.first().map_or(0, Vec::len);
        let mut msd = vec![0.0; t];
        for curve in &trial_msd {
            msd.iter_mut().zip(curve).for_each(|(a, x)| *a += x);
        }
        let n = trial_msd.len() as f64;
        msd.iter_mut().for_each(|a| *a /= n);
        Self { entry_id: entry_id.into(), trials: trial_msd.len(), seed, trial_msd, msd, theory }
    }

    pub fn msd_db(&self) -> Vec<f64> {
        self.msd.iter().map(|&x| to_db(x)).collect()
    }

    fn window_start(&self, window: f64) -> usize {
        let t = self.msd.len();
        let len = ((window * t as f64).ceil() as usize).clamp(1, t.max(1));
        t - len
    }

    /// Per-trial mean over the trailing `window` fraction.
    pub fn trial_steady_states(&self, window: f64) -> Vec<f64> {
        let start = self.window_start(window);
        self.trial_msd.iter().map(|c| c[start..].iter().sum::<f64>() / (c.len() - start) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub linear: f64,
    pub db: f64,
    pub stderr_linear: f64,
    pub stderr_db: f64,
    /// False when the two halves of the window differ by more than 10%.
    pub converged: bool,
}

fn mean_and_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 || x.iter().all(|&v| v == x[0]) {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn estimate_steady_state(curve: &LearningCurve, window: f64) -> SteadyState {
    let (linear, stderr_linear) = mean_and_stderr(&curve.trial_steady_states(window));
    let tail = &curve.msd[curve.window_start(window)..];
    let half = tail.len() / 2;
    let converged = linear.is_finite()
        && (half == 0 || {
            let first = tail[..half].iter().sum::<f64>() / half as f64;
            let second = tail[half..].iter().sum::<f64>() / (tail.len() - half) as f64;
            (first - second).abs() <= 0.1 * linear.max(f64::MIN_POSITIVE)
        });
    let stderr_db = if linear > 0.0 { 10.0 / std::f64::consts::LN_10 * stderr_linear / linear } else { 0.0 };
    SteadyState { linear, db: to_db(linear), stderr_linear, stderr_db, converged }
}

/// Mean and standard error of `b − a` over paired trials' steady states.
pub fn paired_difference(a: &LearningCurve, b: &LearningCurve, window: f64) -> (f64, f64) {
    let diff: Vec<f64> =
        a.trial_steady_states(window).iter().zip(b.trial_steady_states(window)).map(|(x, y)| y - x).collect();
    mean_and_stderr(&diff)
}

#[derive(Debug, Clone)]
pub struct EntryResult {
    pub entry: GridEntry,
    pub id: String,
    /// The curve, or the divergence diagnostic.
    pub curve: Result<LearningCurve, String>,
    pub theory: Result<MsdReport, String>,
    /// Spectral radius of `Q₂ H Q₁`.
    pub mean_radius: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub prepared: Prepared,
    pub entries: Vec<EntryResult>,
}

/// Theory for every entry without running trials.
pub fn analyze(prepared: &Prepared) -> Vec<(String, Result<MsdReport, String>, f64)> {
    prepared
        .entries
        .iter()
        .map(|(entry, cfg)| {
            let (theory, radius) = entry_theory(prepared, cfg);
            (entry.id(), theory, radius)
        })
        .collect()
}

fn entry_theory(prepared: &Prepared, cfg: &AlgorithmConfig) -> (Result<MsdReport, String>, f64) {
    let run = &prepared.config.run;
    let solver = SolverOptions { dense_cap: run.dense_cap, ..SolverOptions::default() };
    match AnalysisWorkspace::new(&prepared.environment, cfg, run.kron_method, solver) {
        Ok(ws) => (theoretical_msd(&ws).map_err(|e| e.to_string()), ws.mean_spectral_radius()),
        Err(e) => (Err(e.to_string()), f64::NAN),
    }
}

/// Runs every grid entry; trials run in parallel and are reduced in trial order.
pub fn run_experiment(prepared: &Prepared) -> ExperimentResults {
    let run = &prepared.config.run;
    let entries = prepared
        .entries
        .iter()
        .map(|(entry, cfg)| {
            let (theory, mean_radius) = entry_theory(prepared, cfg);
            let trials: Result<Vec<Vec<f64>>, String> = (0..run.trials as u64)
                .into_par_iter()
                .map(|trial| {
                    run_trial(&prepared.environment, &prepared.topology, cfg, run.iterations, run.seed, trial, false)
                        .map(|r| r.network_msd())
                        .map_err(|e| format!("trial {trial}: {}", e.source))
                })
                .collect();
            let curve = trials.map(|t| LearningCurve::from_trials(entry.id(), run.seed, t, theory.as_ref().ok().map(|r| r.linear)));
            EntryResult { entry: *entry, id: entry.id(), curve, theory, mean_radius }
        })
        .collect();
    ExperimentResults { prepared: prepared.clone(), entries }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub entry_id: String,
    pub mode: Mode,
    pub scheme: Scheme,
    #[serde(rename = "L")]
    pub entries: usize,
    pub links: Links,
    pub sim_db: Option<f64>,
    pub theory_db: Option<f64>,
    pub gap_db: Option<f64>,
    pub stderr_db: Option<f64>,
    pub converged: bool,
}

pub fn compare_theory_simulation(results: &ExperimentResults) -> Vec<ComparisonRow> {
    let window = results.prepared.config.run.steady_state_window;
    results
        .entries
        .iter()
        .map(|r| {
            let steady = r.curve.as_ref().ok().map(|c| estimate_steady_state(c, window));
            let sim_db = steady.map(|s| s.db);
            let theory_db = r.theory.as_ref().ok().map(|t| t.db);
            ComparisonRow {
                entry_id: r.id.clone(),
                mode: r.entry.mode,
                scheme: r.entry.scheme,
                entries: r.entry.entries,
                links: r.entry.links,
                sim_db,
                theory_db,
                gap_db: sim_db.zip(theory_db).map(|(s, t)| s - t),
                stderr_db: steady.map(|s| s.stderr_db),
                converged: steady.is_some_and(|s| s.converged),
            }
        })
        .collect()
}

/// Everything needed to reproduce a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub topology: NetworkTopology,
    pub environment: Environment,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub trials: usize,
    pub seed: u64,
    pub status: String,
}

/// Per-entry analysis summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct AnalysisReport {
    mu_max: Vec<f64>,
    mean_stable: bool,
    entries: Vec<AnalysisEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct AnalysisEntry {
    id: String,
    mean_spectral_radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    msd: Option<MsdReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn fmt_db(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt_db)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes `manifest.toml` and, for a non-empty grid, `analysis.toml`,
/// `comparison.csv`, `curves.csv` and (optionally) SVG plots. Returns the
/// written paths.
pub fn emit_outputs(results: &ExperimentResults, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let prepared = &results.prepared;
    let mut written = Vec::new();

    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config: prepared.config.clone(),
        topology: prepared.topology.clone(),
        environment: prepared.environment.clone(),
        entries: results
            .entries
            .iter()
            .map(|r| ManifestEntry {
                id: r.id.clone(),
                trials: prepared.config.run.trials,
                seed: prepared.config.run.seed,
                status: match &r.curve {
                    Ok(_) => "ok".to_string(),
                    Err(e) => format!("diverged: {e}"),
                },
            })
            .collect(),
    };
    let path = dir.join("manifest.toml");
    write_file(&path, &toml::to_string(&manifest).map_err(|e| ExperimentError::Config(e.to_string()))?)?;
    written.push(path);
    if results.entries.is_empty() {
        return Ok(written);
    }

    let report = AnalysisReport {
        mu_max: prepared.stability.mu_max.clone(),
        mean_stable: prepared.stability.stable,
        entries: results
            .entries
            .iter()
            .map(|r| AnalysisEntry {
                id: r.id.clone(),
                mean_spectral_radius: r.mean_radius,
                msd: r.theory.as_ref().ok().copied(),
                error: r.theory.as_ref().err().cloned(),
            })
            .collect(),
    };
    let path = dir.join("analysis.toml");
    write_file(&path, &toml::to_string(&report).map_err(|e| ExperimentError::Config(e.to_string()))?)?;
    written.push(path);

    let rows = compare_theory_simulation(results);
    let path = dir.join("comparison.csv");
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ExperimentError::Csv { path: p, source }
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["entry_id", "mode", "scheme", "L", "links", "sim_db", "theory_db", "gap_db", "stderr_db"])
        .map_err(csv_err(&path))?;
    for (row, r) in rows.iter().zip(&results.entries) {
        let id = r.entry;
        w.write_record([
            row.entry_id.clone(),
            format!("{:?}", id.mode).to_lowercase(),
            format!("{:?}", id.scheme).to_lowercase(),
            row.entries.to_string(),
            format!("{:?}", id.links).to_lowercase(),
            fmt_opt(row.sim_db),
            fmt_opt(row.theory_db),
            fmt_opt(row.gap_db),
            fmt_opt(row.stderr_db),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);

    let curves: Vec<&LearningCurve> = results.entries.iter().filter_map(|r| r.curve.as_ref().ok()).collect();
    if curves.is_empty() {
        return Ok(written);
    }
    let path = dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["entry_id", "iteration", "msd_db_sim", "msd_db_theory_line"]).map_err(csv_err(&path))?;
    for c in &curves {
        let theory = fmt_opt(c.theory.map(to_db));
        for (i, db) in c.msd_db().into_iter().enumerate() {
            w.write_record([c.entry_id.as_str(), &i.to_string(), &fmt_db(db), &theory]).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);

    if prepared.config.output.plots {
        let plots = dir.join("plots");
        fs::create_dir_all(&plots).map_err(io_err(&plots))?;
        for ((mode, links), family) in curve_families(results) {
            let path = plots.join(format!("{mode}-{links}.svg"));
            write_file(&path, &render_svg(&format!("{} / {} links", mode.to_uppercase(), links), &family))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Curves grouped by (mode, links), one panel each.
fn curve_families(results: &ExperimentResults) -> Vec<((String, String), Vec<&LearningCurve>)> {
    let mut families: Vec<((String, String), Vec<&LearningCurve>)> = Vec::new();
    for r in &results.entries {
        let Ok(curve) = &r.curve else { continue };
        let key = (format!("{:?}", r.entry.mode).to_lowercase(), format!("{:?}", r.entry.links).to_lowercase());
        match families.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(curve),
            None => families.push((key, vec![curve])),
        }
    }
    families
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn render_svg(title: &str, curves: &[&LearningCurve]) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 460.0, 70.0, 190.0, 40.0, 50.0);
    let series: Vec<Vec<f64>> = curves.iter().map(|c| c.msd_db()).collect();
    let all = series.iter().flatten().copied().chain(curves.iter().filter_map(|c| c.theory.map(to_db)));
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = ((lo / 5.0).floor() * 5.0, (hi / 5.0).ceil() * 5.0 + if hi == lo { 5.0 } else { 0.0 });
    let t = series.iter().map(Vec::len).max().unwrap_or(1).max(2) as f64;
    let px = |i: f64| left + (w - left - right) * i / (t - 1.0);
    let py = |db: f64| top + (h - top - bottom) * (hi - db) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#, (w - right + left) / 2.0);
    let mut tick = lo;
    while tick <= hi + 1e-9 {
        let y = py(tick);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##, w - right, left - 6.0, y + 4.0);
        tick += 5.0;
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text>"#, (w - right + left) / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">network MSD (dB)</text>"#, h / 2.0, h / 2.0);
    for (i, (curve, ys)) in curves.iter().zip(&series).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let step = (ys.len() / 400).max(1);
        let points: Vec<String> =
            ys.iter().enumerate().step_by(step).map(|(j, &y)| format!("{:.1},{:.1}", px(j as f64), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, points.join(" "));
        if let Some(th) = curve.theory {
            let y = py(to_db(th));
            let _ = writeln!(s, r#"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-dasharray="5,4"/>"#, w - right);
        }
        let ly = top + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#, w - right + 12.0, w - right + 32.0, w - right + 38.0, ly + 4.0, curve.entry_id);
    }
    s.push_str("</svg>\n");
    s
}
