use nalgebra::DVector;
use pdlms::analysis::{column_sums, expected_kron, AnalysisWorkspace, KronMethod, SolverOptions};
use pdlms::data::{generate_environment, EnvironmentSpec, RngStream, StreamPurpose};
use pdlms::engine::{
    combine_first, run_iteration, AlgorithmConfig, DrawSource, IterationDraws, Links, Mode, NetworkState, Selections,
};
use pdlms::network::{build_uniform_combination, generate_topology, CombinationRole};
use pdlms::selection::{PhaseCoupling, Scheme, SelectionSchedule};
use proptest::prelude::*;
use rand::Rng;

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Sequential), Just(Scheme::Stochastic)]
}

fn coupling() -> impl Strategy<Value = PhaseCoupling> {
    prop_oneof![Just(PhaseCoupling::Shared), Just(PhaseCoupling::Independent)]
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Atc), Just(Mode::Cta), Just(Mode::General)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn kron_expectations_are_column_stochastic(
        n in 2usize..5, m in 1usize..4, l in 0usize..4, scheme in scheme(), coupling in coupling(), seed in 0u64..1000,
    ) {
        let l = l.min(m);
        let t = generate_topology(n, 1.5, seed).unwrap();
        let a = build_uniform_combination(&t, CombinationRole::First);
        let s = SelectionSchedule::new(scheme, m, l, coupling).unwrap();
        let d = expected_kron(&a, &s, KronMethod::Exact).unwrap();
        for c in column_sums(&d.matrix) {
            prop_assert!((c - 1.0).abs() < 1e-10, "column sum {}", c);
        }
        prop_assert!(d.matrix.values().iter().all(|&v| v > -1e-15));
    }

    #[test]
    fn truth_is_invariant_without_noise(mode in mode(), scheme in scheme(), l in 0usize..4, seed in 0u64..1000) {
        let t = generate_topology(4, 2.0, seed).unwrap();
        let mut env = generate_environment(&t, &EnvironmentSpec::new(3, f64::INFINITY, seed)).unwrap();
        env.meas_noise_vars.iter_mut().for_each(|v| *v = 0.0);
        let s = SelectionSchedule::with_default_coupling(scheme, 3, l).unwrap();
        let cfg = AlgorithmConfig::uniform(mode, 0.1, Links::Noisy, s, &t).unwrap();
        let mut state = NetworkState::uniform(4, &env.true_param);
        let mut src = DrawSource::new(seed, 0);
        let mut draws = IterationDraws::empty();
        for i in 0..30 {
            src.fill(i, &env, &t, &cfg, &mut draws);
            run_iteration(&mut state, &t, &cfg, &draws).unwrap();
        }
        for k in 0..4 {
            for (w, o) in state.weight(k).iter().zip(&env.true_param) {
                prop_assert!((w - o).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn noise_on_unselected_entries_never_matters(l in 0usize..5, seed in 0u64..1000) {
        let t = generate_topology(5, 2.5, seed).unwrap();
        let a = build_uniform_combination(&t, CombinationRole::First);
        let s = SelectionSchedule::with_default_coupling(Scheme::Stochastic, 4, l).unwrap();
        let mut rng = RngStream::new(seed, StreamPurpose::KronSampling, 1);
        let w: Vec<f64> = (0..20).map(|_| rng.standard_normal()).collect();
        let noise: Vec<f64> = (0..t.num_links() * 4).map(|_| rng.standard_normal()).collect();
        let mut blocks = [0usize; 5];
        s.select_network(0, &mut rng, &mut blocks);
        // Keep noise only where the sending node selected the entry.
        let mut masked = noise.clone();
        for (j, (from, _)) in t.links().enumerate() {
            for e in 0..4 {
                if !s.mask(blocks[from]).is_selected(e) {
                    masked[j * 4 + e] = rng.random::<f64>() * 1e3;
                }
            }
        }
        for k in 0..5 {
            let (mut x, mut y) = ([0.0; 4], [0.0; 4]);
            combine_first(k, &t, &a, &w, Selections::new(&s, &blocks), Some(&noise), &mut x).unwrap();
            combine_first(k, &t, &a, &w, Selections::new(&s, &blocks), Some(&masked), &mut y).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mean_recursion_is_stable_within_the_step_bound(
        mode in mode(), scheme in scheme(), l in 1usize..4, seed in 0u64..10_000, fractions in prop::collection::vec(0.01f64..0.99, 5),
    ) {
        let t = generate_topology(5, 2.0, seed).unwrap();
        let env = generate_environment(&t, &EnvironmentSpec::new(3, 20.0, seed)).unwrap();
        let steps: Vec<f64> = fractions.iter().enumerate().map(|(k, f)| f * 2.0 / env.max_regressor_eigenvalue(k)).collect();
        let s = SelectionSchedule::with_default_coupling(scheme, 3, l).unwrap();
        let base = AlgorithmConfig::uniform(mode, 0.0, Links::Noisy, s.clone(), &t).unwrap();
        let cfg = AlgorithmConfig::new(mode, steps, Links::Noisy, s, base.a1().clone(), base.a2().clone(), &t).unwrap();
        cfg.check_mean_stability(&env).unwrap();
        let ws = AnalysisWorkspace::new(&env, &cfg, KronMethod::Exact, SolverOptions::default()).unwrap();
        let r = ws.mean_spectral_radius();
        prop_assert!(r < 1.0, "spectral radius {}", r);
    }
}

#[test]
fn ensemble_mean_error_decays() {
    let t = generate_topology(4, 2.0, 6).unwrap();
    let env = generate_environment(&t, &EnvironmentSpec::new(3, 20.0, 6)).unwrap();
    let s = SelectionSchedule::with_default_coupling(Scheme::Stochastic, 3, 1).unwrap();
    let cfg = AlgorithmConfig::uniform(Mode::Atc, 0.05, Links::Noisy, s, &t).unwrap();
    let trials = 1000;
    let horizon = 400;
    let mut mean = DVector::<f64>::zeros(12);
    for trial in 0..trials {
        let mut state = NetworkState::zeros(4, 3);
        let mut src = DrawSource::new(2, trial);
        let mut draws = IterationDraws::empty();
        for i in 0..horizon {
            src.fill(i, &env, &t, &cfg, &mut draws);
            run_iteration(&mut state, &t, &cfg, &draws).unwrap();
        }
        for (idx, w) in state.weights.iter().enumerate() {
            mean[idx] += (env.true_param[idx % 3] - w) / trials as f64;
        }
    }
    let initial = 2.0; // ‖col{w°}‖ for four unit-norm copies
    assert!(mean.norm() < 0.02 * initial, "{}", mean.norm());
}
