use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pdlms::analysis::to_db;
use pdlms::experiment::{
    analyze, compare_theory_simulation, emit_outputs, load_config, prepare, run_experiment, ExperimentConfig, OneOrMany,
};
use pdlms::selection::Scheme;

#[derive(Parser)]
#[command(name = "pdlms", version, about = "Partial-diffusion LMS over noisy links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo grid and write curves, comparison table and manifest.
    Run {
        /// Experiment config or a previously emitted manifest.toml.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        grid: GridOverride,
    },
    /// Theoretical steady-state MSD of every grid entry; no trials.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        grid: GridOverride,
    },
    /// Check the config and report step-size stability bounds.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Replaces the scheme and/or entry counts of every grid block.
#[derive(Args)]
struct GridOverride {
    #[arg(long, value_parser = ["sequential", "stochastic"])]
    scheme: Option<String>,
    /// Entries transmitted per iteration; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    entries: Vec<usize>,
}

impl GridOverride {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let scheme = self.scheme.as_deref().map(|s| if s == "sequential" { Scheme::Sequential } else { Scheme::Stochastic });
        for block in &mut cfg.grid {
            if let Some(s) = scheme {
                block.scheme = OneOrMany::One(s);
            }
            if !self.entries.is_empty() {
                block.entries = OneOrMany::Many(self.entries.clone());
            }
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, trials, iters, seed, out, grid } => {
            let mut cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            grid.apply(&mut cfg);
            if let Some(t) = trials {
                cfg.run.trials = t;
            }
            if let Some(t) = iters {
                cfg.run.iterations = t;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            let prepared = prepare(&cfg)?;
            let results = run_experiment(&prepared);
            for row in compare_theory_simulation(&results) {
                let f = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:8.2}"));
                println!(
                    "{:<28} sim {} dB ± {}  theory {} dB  gap {}{}",
                    row.entry_id,
                    f(row.sim_db),
                    f(row.stderr_db),
                    f(row.theory_db),
                    f(row.gap_db),
                    if row.sim_db.is_some() && !row.converged { "  (not converged)" } else { "" }
                );
            }
            for r in results.entries.iter().filter(|r| r.curve.is_err()) {
                eprintln!("{}: {}", r.id, r.curve.as_ref().unwrap_err());
            }
            let dir = &cfg.output.dir;
            let written = emit_outputs(&results, dir)?;
            println!("wrote {} files to {}", written.len(), dir.display());
        }
        Command::Analyze { config, grid } => {
            let mut cfg = load_config(&config)?;
            grid.apply(&mut cfg);
            let prepared = prepare(&cfg)?;
            for (id, theory, radius) in analyze(&prepared) {
                match theory {
                    Ok(r) => println!(
                        "{id:<28} {:8.2} dB  ({:.4e})  rho(F) {:.6} [{:?}]  rho(mean) {:.6}",
                        r.db, r.linear, r.radius, r.radius_method, radius
                    ),
                    Err(e) => println!("{id:<28} NA  ({e})"),
                }
            }
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let prepared = prepare(&cfg)?;
            println!(
                "ok: {} nodes, {} links, M = {}, {} grid entries",
                prepared.topology.num_nodes(),
                prepared.topology.num_links(),
                prepared.environment.param_dim,
                prepared.entries.len()
            );
            let steps = prepared.entries.first().map(|(_, c)| c.step_sizes().to_vec());
            for (k, bound) in prepared.stability.mu_max.iter().enumerate() {
                let mu = steps.as_ref().map(|s| s[k]);
                println!(
                    "node {k}: mu_max {bound:.6}{}",
                    mu.map_or(String::new(), |m| format!("  mu {m}  {}", if m > 0.0 && m < *bound { "stable" } else { "UNSTABLE" }))
                );
            }
            println!("mean stability: {}", if prepared.stability.stable { "all nodes within bounds" } else { "violated" });
            let noise = prepared.environment.average_model_noise_power();
            println!("average measurement-noise power {:.3} dB", to_db(noise));
        }
    }
    Ok(())
}
