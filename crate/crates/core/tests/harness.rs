use std::fs;

use pdlms::analysis::DB_FLOOR;
use pdlms::engine::{DrawSource, IterationDraws};
use pdlms::experiment::{
    compare_theory_simulation, emit_outputs, estimate_steady_state, load_config, paired_difference, prepare,
    run_experiment, ExperimentConfig, ExperimentError, LearningCurve,
};

const BASE: &str = r#"
[topology]
nodes = 6
avg_neighbors = 2.0
seed = 5

[environment]
param_dim = 4
link_noise_gap_db = 10.0
seed = 8

[algorithm]
step_size = 0.02

[run]
trials = 60
iterations = 1500
seed = 13
"#;

fn config(grid: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!("{BASE}\n{grid}")).unwrap()
}

fn curve<'a>(results: &'a pdlms::experiment::ExperimentResults, id: &str) -> &'a LearningCurve {
    let r = results.entries.iter().find(|r| r.id == id).unwrap_or_else(|| panic!("no entry {id}"));
    r.curve.as_ref().unwrap()
}

/// Plain ATC diffusion LMS over full vectors, fed from the same data streams.
fn reference_atc(prepared: &pdlms::experiment::Prepared, trials: u64, horizon: usize) -> Vec<f64> {
    let (env, topo) = (&prepared.environment, &prepared.topology);
    let cfg = &prepared.entries[0].1;
    let (n, m) = (topo.num_nodes(), env.param_dim);
    let a = cfg.a2().weights();
    let mu = cfg.step_sizes();
    let mut msd = vec![0.0; horizon];
    for trial in 0..trials {
        let mut w = vec![vec![0.0; m]; n];
        let mut src = DrawSource::new(prepared.config.run.seed, trial);
        let mut draws = IterationDraws::empty();
        for (i, slot) in msd.iter_mut().enumerate() {
            src.fill(i as u64, env, topo, cfg, &mut draws);
            let psi: Vec<Vec<f64>> = (0..n)
                .map(|k| {
                    let u = draws.regressor(k, m);
                    let e = draws.measurements[k] - u.iter().zip(&w[k]).map(|(x, y)| x * y).sum::<f64>();
                    w[k].iter().zip(u).map(|(wk, uk)| wk + mu[k] * e * uk).collect()
                })
                .collect();
            for k in 0..n {
                for j in 0..m {
                    w[k][j] = (0..n).map(|l| a[(l, k)] * psi[l][j]).sum();
                }
            }
            let dev: f64 =
                w.iter().flat_map(|wk| wk.iter().zip(&env.true_param).map(|(x, t)| (t - x) * (t - x))).sum();
            *slot += dev / n as f64 / trials as f64;
        }
    }
    msd
}

#[test]
fn full_diffusion_matches_reference_curve() {
    let mut cfg = config("[[grid]]\nmode = \"atc\"\nscheme = \"sequential\"\nentries = 4\nlinks = \"ideal\"");
    cfg.run.trials = 200;
    cfg.run.iterations = 600;
    let prepared = prepare(&cfg).unwrap();
    let results = run_experiment(&prepared);
    let sim = curve(&results, "atc-seq-L4-ideal").msd_db();
    let reference = reference_atc(&prepared, 200, 600);
    let worst = sim.iter().zip(&reference).map(|(s, r)| (s - pdlms::analysis::to_db(*r)).abs()).fold(0.0, f64::max);
    assert!(worst < 0.5, "max curve gap {worst} dB");
    assert!(worst < 1e-9, "same draws should give the same curve, gap {worst} dB");
}

#[test]
fn single_trial_runs_repeat_exactly() {
    let mut cfg = config("[[grid]]\nmode = \"cta\"\nscheme = \"stochastic\"\nentries = 1\nlinks = \"noisy\"");
    cfg.run.trials = 1;
    let prepared = prepare(&cfg).unwrap();
    let a = run_experiment(&prepared);
    let b = run_experiment(&prepared);
    assert_eq!(a.entries[0].curve, b.entries[0].curve);
}

#[test]
fn noisy_links_degrade_and_ideal_links_improve_with_more_entries() {
    let cfg = config(
        "[[grid]]\nmode = [\"atc\", \"cta\"]\nscheme = [\"sequential\", \"stochastic\"]\nentries = [1, 2, 4]\nlinks = [\"ideal\", \"noisy\"]",
    );
    let prepared = prepare(&cfg).unwrap();
    let results = run_experiment(&prepared);
    let window = cfg.run.steady_state_window;
    for mode in ["atc", "cta"] {
        for scheme in ["seq", "sto"] {
            for l in [1, 2, 4] {
                let ideal = curve(&results, &format!("{mode}-{scheme}-L{l}-ideal"));
                let noisy = curve(&results, &format!("{mode}-{scheme}-L{l}-noisy"));
                let (diff, se) = paired_difference(ideal, noisy, window);
                assert!(diff >= se && se > 0.0, "{mode}-{scheme}-L{l}: noisy − ideal = {diff:e}, se {se:e}");
            }
            // Not significantly worse with more entries, and strictly better in theory.
            for (small, large) in [(1, 2), (2, 4)] {
                let a = curve(&results, &format!("{mode}-{scheme}-L{small}-ideal"));
                let b = curve(&results, &format!("{mode}-{scheme}-L{large}-ideal"));
                let (diff, se) = paired_difference(a, b, window);
                assert!(diff <= 2.0 * se, "{mode}-{scheme}: L{large} − L{small} = {diff:e}, se {se:e}");
                assert!(b.theory.unwrap() <= a.theory.unwrap() * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn empty_grid_writes_only_the_manifest() {
    let cfg = config("");
    let results = run_experiment(&prepare(&cfg).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let written = emit_outputs(&results, dir.path()).unwrap();
    assert_eq!(written, vec![dir.path().join("manifest.toml")]);
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["manifest.toml"]);
}

#[test]
fn curves_csv_has_one_block_per_entry() {
    let mut cfg = config("[[grid]]\nmode = \"atc\"\nscheme = \"sequential\"\nentries = [1, 4]\nlinks = \"noisy\"");
    cfg.run.trials = 3;
    cfg.run.iterations = 50;
    let results = run_experiment(&prepare(&cfg).unwrap());
    let dir = tempfile::tempdir().unwrap();
    emit_outputs(&results, dir.path()).unwrap();

    let mut reader = csv::Reader::from_path(dir.path().join("curves.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["entry_id", "iteration", "msd_db_sim", "msd_db_theory_line"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 100);
    let mut ids: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    ids.dedup();
    assert_eq!(ids, vec!["atc-seq-L1-noisy", "atc-seq-L4-noisy"]);
    for r in &rows {
        r[2].parse::<f64>().unwrap();
        r[3].parse::<f64>().unwrap();
    }

    let mut reader = csv::Reader::from_path(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["entry_id", "mode", "scheme", "L", "links", "sim_db", "theory_db", "gap_db", "stderr_db"]
    );
    assert_eq!(reader.records().count(), 2);
}

#[test]
fn tampered_manifest_is_rejected() {
    let mut cfg = config("[[grid]]\nmode = \"atc\"\nscheme = \"sequential\"\nentries = 2\nlinks = \"noisy\"");
    cfg.run.trials = 2;
    cfg.run.iterations = 20;
    let results = run_experiment(&prepare(&cfg).unwrap());
    let dir = tempfile::tempdir().unwrap();
    emit_outputs(&results, dir.path()).unwrap();
    let path = dir.path().join("manifest.toml");
    load_config(&path).unwrap();

    let mut manifest: toml::Table = fs::read_to_string(&path).unwrap().parse().unwrap();
    let env = manifest["environment"].as_table_mut().unwrap();
    let vars = env["meas_noise_vars"].as_array_mut().unwrap();
    vars[0] = toml::Value::Float(vars[0].as_float().unwrap() * 1.000001);
    fs::write(&path, toml::to_string(&manifest).unwrap()).unwrap();
    assert!(matches!(load_config(&path), Err(ExperimentError::ManifestMismatch("environment"))));
}

#[test]
fn noiseless_entry_sits_on_the_floor() {
    let mut cfg = config("[[grid]]\nmode = \"atc\"\nscheme = \"sequential\"\nentries = 4\nlinks = \"ideal\"");
    cfg.environment.link_noise_gap_db = f64::INFINITY;
    cfg.algorithm.step_size = Some(0.2);
    cfg.run.trials = 4;
    cfg.run.iterations = 6000;
    let mut prepared = prepare(&cfg).unwrap();
    prepared.environment.meas_noise_vars.iter_mut().for_each(|v| *v = 0.0);
    let results = run_experiment(&prepared);
    let row = &compare_theory_simulation(&results)[0];
    assert_eq!(row.theory_db, Some(DB_FLOOR));
    assert_eq!(row.sim_db, Some(DB_FLOOR));
}

#[test]
fn zero_step_leaves_the_initial_deviation() {
    let mut cfg = config("[[grid]]\nmode = \"cta\"\nscheme = \"stochastic\"\nentries = 1\nlinks = \"ideal\"");
    cfg.algorithm.step_size = Some(0.0);
    cfg.run.trials = 3;
    cfg.run.iterations = 30;
    let prepared = prepare(&cfg).unwrap();
    let norm2: f64 = prepared.environment.true_param.iter().map(|x| x * x).sum();
    let results = run_experiment(&prepared);
    let ss = estimate_steady_state(curve(&results, "cta-sto-L1-ideal"), 0.1);
    assert_eq!(ss.db, 10.0 * norm2.log10());
    assert_eq!(ss.stderr_linear, 0.0);
    let theory = results.entries[0].theory.as_ref();
    assert!(theory.is_err(), "no steady state without adaptation: {theory:?}");
}

#[test]
fn single_node_matches_theory() {
    let cfg = ExperimentConfig::from_toml(
        r#"
[topology]
neighbors = [[]]

[environment]
param_dim = 2
link_noise_gap_db = 35.0
seed = 3

[algorithm]
step_size = 0.01

[run]
trials = 400
iterations = 6000
seed = 21
steady_state_window = 0.5

[[grid]]
mode = "atc"
scheme = "sequential"
entries = 2
links = "noisy"
"#,
    )
    .unwrap();
    let results = run_experiment(&prepare(&cfg).unwrap());
    let row = &compare_theory_simulation(&results)[0];
    let ratio = 10f64.powf(row.gap_db.unwrap() / 10.0);
    assert!((ratio - 1.0).abs() < 0.05, "sim/theory = {ratio}");
}
