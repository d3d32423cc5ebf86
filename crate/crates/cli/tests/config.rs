//! Config ingestion contract: parsing, defaults, validation messages that
//! name the offending field, path resolution, and the write/load round trip.

use std::path::{Path, PathBuf};

use approx::assert_relative_eq;
use cli::config::{
    build_drmpc_spec, load_config, parse_config, write_config, AlgorithmConfig, AmbiguityConfig,
    ConstraintConfig, CostConfig, ExperimentConfig, IndexSetConfig, Mode, RowConfig, SimConfig,
    SisdpConfig, SolverConfig, SystemConfig,
};
use proptest::prelude::*;

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn minimal_system() -> String {
    "[system]\n\
     A = [[0.9]]\n\
     B = [[0.5]]\n\
     C = [[[0.3]]]\n\
     D = [[[0.1]]]\n"
        .to_string()
}

#[test]
fn bundled_benchmark_config_builds_the_two_state_plant() {
    let cfg = load_config(&repo_path("configs/benchmark.toml")).expect("loads");
    assert_eq!(cfg.mode, Mode::DrmpcClosedLoop);
    assert_eq!(cfg.sim.n_traj, 40);
    assert_eq!(cfg.sim.run_horizon, 30);
    assert_eq!(cfg.initial_state().as_slice(), &[0.1, 1.2]);
    assert_eq!(cfg.true_variance().as_slice(), &[1.0]);

    let spec = build_drmpc_spec(&cfg).expect("builds");
    let model = spec.model();
    assert_eq!(model.a().as_slice(), &[1.02, 0.1, -0.1, 0.98]);
    assert_eq!(model.b().as_slice(), &[0.1, 0.05, 0.0, 0.01]);
    assert_eq!(model.channels(), 1);
    assert_eq!(model.state_noise()[0].as_slice(), &[0.04, 0.0, 0.0, 0.04]);
    assert_eq!(model.input_noise()[0].as_slice(), &[0.04, -0.04, 0.0, 0.008]);
    assert_eq!(spec.cost().horizon(), 5);
    assert_eq!(spec.cost().state_weight().get(0, 0), 2.0);
    assert_eq!(spec.cost().input_weight().get(1, 1), 20.0);
    assert_relative_eq!(spec.cost().terminal_weight().get(0, 1), -5.7929);
    assert_eq!(spec.constraints().state_only().len(), 1);
    assert_eq!(spec.constraints().state_only()[0].linear.as_slice(), &[-2.0, 1.0]);
    assert_eq!(spec.constraints().state_only_bound(), 2.3);
    assert_eq!(spec.constraints().terminal_bound(), 45.0);
    assert_eq!(spec.ambiguity().gamma(), 1.2);

    // The estimate is the diagonal second moment of the bundled samples,
    // recomputed here from the raw text.
    let text = std::fs::read_to_string(repo_path("data/noise_samples.csv")).expect("readable");
    let samples: Vec<f64> = text.lines().map(|l| l.trim().parse().expect("a float")).collect();
    assert_eq!(samples.len(), 30);
    let second_moment = samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64;
    let sigma_hat = spec.ambiguity().sigma_hat();
    assert_eq!(sigma_hat.len(), 1);
    assert_relative_eq!(sigma_hat[0], second_moment, epsilon = 1e-12);
    assert!((0.7..=1.4).contains(&sigma_hat[0]), "estimate {}", sigma_hat[0]);
}

#[test]
fn missing_input_matrix_names_the_field() {
    let text = "[system]\nA = [[0.9]]\nC = [[[0.3]]]\nD = [[[0.1]]]\n";
    let err = parse_config(text).expect_err("B is required");
    assert!(err.to_string().contains("`B`"), "message: {err}");
}

#[test]
fn zero_horizon_is_rejected() {
    let text = format!("{}[cost]\nN = 0\n", minimal_system());
    let err = parse_config(&text).expect_err("N = 0 is invalid");
    let msg = err.to_string();
    assert!(msg.contains("cost.N"), "message: {msg}");
}

#[test]
fn unknown_keys_are_named() {
    let err = parse_config("oops = 3\n").expect_err("unknown key");
    assert!(err.to_string().contains("`oops`"), "message: {err}");
}

#[test]
fn defaults_fill_the_documented_values() {
    let cfg = parse_config(&minimal_system()).expect("valid");
    assert_eq!(cfg.mode, Mode::DrmpcClosedLoop);
    assert_eq!(cfg.output_dir, PathBuf::from("out"));
    assert_eq!(cfg.cost.horizon, 5);
    assert_eq!(cfg.ambiguity.gamma, 1.0);
    assert_eq!(cfg.algorithm.max_iters, 10);
    assert_eq!(cfg.algorithm.patience, 50);
    assert_eq!(cfg.algorithm.min_improvement, 1e-6);
    assert_eq!(cfg.algorithm.seed, 2024);
    assert_eq!(cfg.solver.eps_gap, 1e-7);
    assert_eq!(cfg.solver.eps_feas, 1e-7);
    assert_eq!(cfg.solver.max_iters, 200);
    assert_eq!(cfg.sim.run_horizon, 30);
    assert_eq!(cfg.sim.n_traj, 40);
    assert_eq!(cfg.initial_state().as_slice(), &[0.0]);
    assert_eq!(cfg.true_variance().as_slice(), &[1.0]);

    // Dimension-dependent defaults materialize at build time.
    let spec = build_drmpc_spec(&cfg).expect("builds");
    assert_eq!(spec.cost().state_weight().get(0, 0), 1.0);
    assert_eq!(spec.cost().input_weight().get(0, 0), 1.0);
    assert_eq!(spec.cost().terminal_weight().get(0, 0), 0.0);
    assert_eq!(spec.ambiguity().sigma_hat().as_slice(), &[1.0]);
    assert_eq!(spec.constraints().state_only().len(), 0);
    assert_eq!(spec.constraints().terminal().get(0, 0), 0.0);
}

#[test]
fn sigma_hat_and_samples_path_are_exclusive() {
    let text = format!(
        "{}[ambiguity]\nsigma_hat = [1.0]\nsamples_path = \"somewhere.csv\"\n",
        minimal_system()
    );
    let err = parse_config(&text).expect_err("both sources");
    assert!(err.to_string().contains("ambiguity"), "message: {err}");
}

#[test]
fn shape_errors_name_field_and_expectation() {
    let text = format!("{}[cost]\nQ = [[1.0, 0.0]]\n", minimal_system());
    let err = parse_config(&text).expect_err("Q must be 1x1");
    let msg = err.to_string();
    assert!(msg.contains("cost.Q") && msg.contains("1x1"), "message: {msg}");

    let text = format!("{}[sim]\ninitial_state = [0.1, 0.2]\n", minimal_system());
    let err = parse_config(&text).expect_err("x0 must have length 1");
    let msg = err.to_string();
    assert!(msg.contains("sim.initial_state"), "message: {msg}");
}

#[test]
fn missing_problem_tables_are_mode_errors() {
    let err = parse_config("mode = \"sisdp\"\n").expect_err("no [sisdp] table");
    assert!(err.to_string().contains("sisdp"), "message: {err}");
    let err = parse_config("mode = \"drmpc-open-loop\"\n").expect_err("no [system] table");
    assert!(err.to_string().contains("system"), "message: {err}");
}

#[test]
fn short_tuples_are_rejected_for_the_search() {
    let text = "mode = \"sisdp\"\n\
                [algorithm]\ntuple_len = 2\n\
                [sisdp]\ncost = [[-1.0, 0.0], [0.0, -1.0]]\nbound = 1.0\n\
                index_set = { kind = \"finite-list\", members = [[[1.0, 0.0], [0.0, 1.0]]] }\n";
    let err = parse_config(text).expect_err("tuple shorter than the decision dimension");
    assert!(err.to_string().contains("tuple_len"), "message: {err}");
}

#[test]
fn relative_samples_path_resolves_against_the_config_file() {
    let dir = tempfile::tempdir().expect("tempdir");
    std::fs::write(dir.path().join("noise.csv"), "2.0\n2.0\n").expect("samples");
    let text = format!("{}[ambiguity]\nsamples_path = \"noise.csv\"\n", minimal_system());
    let config_path = dir.path().join("experiment.toml");
    std::fs::write(&config_path, text).expect("config");
    let cfg = load_config(&config_path).expect("loads");
    let spec = build_drmpc_spec(&cfg).expect("builds");
    assert_relative_eq!(spec.ambiguity().sigma_hat()[0], 4.0);
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(1.0), -1.0e6..1.0e6_f64]
}

fn rows(n: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(finite(), m), n)
}

fn symmetric(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(finite(), n * (n + 1) / 2).prop_map(move |packed| {
        let mut rows = vec![vec![0.0; n]; n];
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                rows[i][j] = packed[k];
                rows[j][i] = packed[k];
                k += 1;
            }
        }
        rows
    })
}

fn drmpc_config(d: usize, m: usize, q: usize) -> impl Strategy<Value = ExperimentConfig> {
    let system = (rows(d, d), rows(d, m), prop::collection::vec(rows(d, d), q), {
        prop::collection::vec(rows(d, m), q)
    })
        .prop_map(|(a, b, c, dd)| SystemConfig { a, b, c, d: dd });
    let cost = (
        prop::option::of(symmetric(d)),
        prop::option::of(symmetric(m)),
        prop::option::of(symmetric(d)),
        1usize..4,
    )
        .prop_map(|(q, r, s, horizon)| CostConfig { q, r, s, horizon });
    let constraints = (
        prop::collection::vec(
            (prop::option::of(symmetric(d)), prop::collection::vec(finite(), d))
                .prop_map(|(weight, linear)| RowConfig { weight, linear }),
            0..2,
        ),
        finite(),
        prop::option::of(symmetric(d)),
        finite(),
    )
        .prop_map(|(state_rows, state_bound, terminal, terminal_bound)| ConstraintConfig {
            state_rows,
            state_bound,
            state_action_rows: vec![],
            state_action_bound: 1.0,
            terminal,
            terminal_bound,
        });
    let ambiguity = (0.001..10.0_f64, prop::option::of(prop::collection::vec(0.01..5.0_f64, q)))
        .prop_map(|(gamma, sigma_hat)| AmbiguityConfig { gamma, sigma_hat, samples_path: None });
    let algorithm = (1usize..100, 0usize..100, finite(), any::<u64>()).prop_map(
        |(max_iters, patience, min_improvement, seed)| AlgorithmConfig {
            max_iters,
            patience,
            min_improvement,
            tuple_len: None,
            seed,
        },
    );
    let sim = (
        1usize..50,
        1usize..50,
        prop::option::of(prop::collection::vec(0.0..3.0_f64, q)),
        prop::option::of(prop::collection::vec(finite(), d)),
    )
        .prop_map(|(run_horizon, n_traj, true_variance, initial_state)| SimConfig {
            run_horizon,
            n_traj,
            true_variance,
            initial_state,
        });
    (
        prop_oneof![Just(Mode::DrmpcOpenLoop), Just(Mode::DrmpcClosedLoop)],
        system,
        cost,
        constraints,
        ambiguity,
        algorithm,
        sim,
    )
        .prop_map(|(mode, system, cost, constraints, ambiguity, algorithm, sim)| {
            ExperimentConfig {
                mode,
                output_dir: PathBuf::from("out"),
                system: Some(system),
                cost,
                constraints,
                ambiguity,
                algorithm,
                solver: SolverConfig::default(),
                sim,
                sisdp: None,
            }
        })
}

fn sisdp_config(n: usize) -> impl Strategy<Value = ExperimentConfig> {
    let index_set = prop_oneof![
        (symmetric(n), symmetric(n)).prop_map(|(a0, a1)| IndexSetConfig::Segment { a0, a1 }),
        prop::collection::vec(symmetric(n), 1..3)
            .prop_map(|members| IndexSetConfig::FiniteList { members }),
        (symmetric(n), symmetric(n))
            .prop_map(|(lower, upper)| IndexSetConfig::MatrixBox { lower, upper }),
    ];
    (symmetric(n), finite(), index_set).prop_map(move |(cost, bound, index_set)| {
        ExperimentConfig {
            mode: Mode::Sisdp,
            output_dir: PathBuf::from("result"),
            system: None,
            cost: CostConfig::default(),
            constraints: ConstraintConfig::default(),
            ambiguity: AmbiguityConfig::default(),
            algorithm: AlgorithmConfig::default(),
            solver: SolverConfig::default(),
            sim: SimConfig::default(),
            sisdp: Some(SisdpConfig { cost, bound, index_set }),
        }
    })
}

fn valid_config() -> impl Strategy<Value = ExperimentConfig> {
    prop_oneof![
        (1usize..3, 1usize..3, 1usize..3).prop_flat_map(|(d, m, q)| drmpc_config(d, m, q)),
        (1usize..4).prop_flat_map(sisdp_config),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Serialization is lossless: writing a valid config and parsing it back
    // reproduces it field for field.
    #[test]
    fn round_trip_reproduces_the_config(cfg in valid_config()) {
        prop_assume!(cfg.validate().is_ok());
        let text = write_config(&cfg);
        let back = parse_config(&text).expect("a written config parses");
        prop_assert_eq!(back, cfg);
    }
}
