//! Runner contract: artifact files, their pinned schemas, determinism, and
//! the truncated-marker flush on failed solves.

use std::path::{Path, PathBuf};

use cli::config::{load_config, parse_config, Mode};
use cli::run::{run, RunError};

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Loosely capped scalar plant: cheap receding-horizon solves.
fn scalar_closed_loop(run_horizon: usize, n_traj: usize) -> String {
    format!(
        "mode = \"drmpc-closed-loop\"\n\
         [system]\n\
         A = [[0.9]]\n\
         B = [[0.5]]\n\
         C = [[[0.3]]]\n\
         D = [[[0.1]]]\n\
         [cost]\n\
         N = 2\n\
         S = [[2.0]]\n\
         [constraints]\n\
         state_rows = [{{ linear = [1.0] }}]\n\
         state_bound = 1e6\n\
         [ambiguity]\n\
         gamma = 1.5\n\
         sigma_hat = [1.0]\n\
         [algorithm]\n\
         max_iters = 1\n\
         seed = 11\n\
         [sim]\n\
         run_horizon = {run_horizon}\n\
         n_traj = {n_traj}\n\
         true_variance = [0.5]\n\
         initial_state = [0.8]\n"
    )
}

fn summary_json(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("summary.json")).expect("summary written");
    serde_json::from_str(&text).expect("valid json")
}

/// Pinned key set (serialized maps order keys alphabetically).
const SUMMARY_KEYS: [&str; 13] = [
    "error",
    "g_history",
    "gamma",
    "iterations",
    "mode",
    "seed",
    "sigma_hat",
    "solver",
    "trajectories",
    "truncated",
    "value",
    "violation_stats",
    "wall_seconds_total",
];

fn assert_summary_schema(summary: &serde_json::Value) {
    let map = summary.as_object().expect("an object");
    let keys: Vec<&str> = map.keys().map(String::as_str).collect();
    assert_eq!(keys, SUMMARY_KEYS, "the summary key set is pinned");
    let solver = summary["solver"].as_object().expect("solver table");
    let solver_keys: Vec<&str> = solver.keys().map(String::as_str).collect();
    assert_eq!(solver_keys, ["eps_feas", "eps_gap", "max_iters"]);
}

#[test]
fn segment_summary_holds_the_nondecreasing_history() {
    let mut cfg = load_config(&repo_path("configs/segment.toml")).expect("loads");
    cfg.algorithm.max_iters = 40;
    let dir = tempfile::tempdir().expect("tempdir");
    cfg.output_dir = dir.path().to_path_buf();
    let artifacts = run(&cfg, false).expect("solves");

    let history = artifacts.summary.g_history.as_ref().expect("history present");
    assert!(!history.is_empty());
    for pair in history.windows(2) {
        assert!(pair[1] >= pair[0], "running maximum must not decrease");
    }
    let value = artifacts.summary.value.expect("value present");
    assert_eq!(*history.last().unwrap(), value);
    assert_eq!(artifacts.summary.iterations.unwrap(), history.len());

    let summary = summary_json(dir.path());
    assert_summary_schema(&summary);
    assert_eq!(summary["mode"], "sisdp");
    assert_eq!(summary["gamma"], serde_json::Value::Null);
    assert_eq!(summary["truncated"], false);

    // No trajectories in this mode: headers only.
    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).expect("written");
    assert_eq!(csv, "traj_id,t\n");
    let portrait = std::fs::read_to_string(dir.path().join("phase_portrait.csv")).expect("written");
    assert_eq!(portrait, "x1,x2\n");
}

#[test]
fn closed_loop_writes_one_row_per_recorded_state() {
    let mut cfg = parse_config(&scalar_closed_loop(3, 2)).expect("valid");
    let dir = tempfile::tempdir().expect("tempdir");
    cfg.output_dir = dir.path().to_path_buf();
    let artifacts = run(&cfg, false).expect("solves");
    assert_eq!(artifacts.records.len(), 2);

    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).expect("written");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "traj_id,t,x1,u1");
    // Two rollouts, each 4 states (3 executed steps): 8 data rows.
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[1].starts_with("0,0,0.8,"), "first row starts at x0: {}", lines[1]);
    // Final state of each rollout has no applied input: empty trailing cell.
    assert!(lines[4].starts_with("0,3,") && lines[4].ends_with(','), "row: {}", lines[4]);
    assert!(lines[8].starts_with("1,3,") && lines[8].ends_with(','), "row: {}", lines[8]);

    // Scalar state: the portrait stays empty.
    let portrait = std::fs::read_to_string(dir.path().join("phase_portrait.csv")).expect("written");
    assert_eq!(portrait, "x1,x2\n");

    let summary = summary_json(dir.path());
    assert_summary_schema(&summary);
    assert_eq!(summary["sigma_hat"], serde_json::json!([1.0]));
    assert_eq!(summary["trajectories"].as_array().unwrap().len(), 2);
    let stats = &summary["violation_stats"];
    assert_eq!(stats["state_rows"].as_array().unwrap().len(), 1);
    assert_eq!(stats["state_rows"][0]["bound"], 1e6);
    assert_eq!(stats["state_rows"][0]["steps"].as_array().unwrap().len(), 4);
    assert_eq!(stats["state_action_rows"].as_array().unwrap().len(), 0);
    let step0 = &stats["state_rows"][0]["steps"][0];
    for key in ["t", "mean", "std_error", "count", "exceeds"] {
        assert!(step0.get(key).is_some(), "step stat key {key}");
    }
}

#[test]
fn same_seed_rewrites_identical_bytes() {
    let run_once = || {
        let mut cfg = parse_config(&scalar_closed_loop(3, 2)).expect("valid");
        let dir = tempfile::tempdir().expect("tempdir");
        cfg.output_dir = dir.path().to_path_buf();
        run(&cfg, false).expect("solves");
        std::fs::read(dir.path().join("trajectories.csv")).expect("written")
    };
    assert_eq!(run_once(), run_once());
}

#[test]
fn open_loop_records_the_planned_rollout() {
    let mut cfg = load_config(&repo_path("configs/benchmark.toml")).expect("loads");
    cfg.mode = Mode::DrmpcOpenLoop;
    let dir = tempfile::tempdir().expect("tempdir");
    cfg.output_dir = dir.path().to_path_buf();
    let artifacts = run(&cfg, true).expect("solves");

    assert_eq!(artifacts.records.len(), 1);
    let plan = &artifacts.records[0];
    assert_eq!(plan.states.len(), 6, "horizon 5 plans 6 means");
    assert_eq!(plan.inputs.len(), 5);
    assert_eq!(plan.states[0].as_slice(), &[0.1, 1.2]);
    let value = artifacts.summary.value.expect("value present");
    assert!(value > 0.0);

    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).expect("written");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "traj_id,t,x1,x2,u1,u2");
    assert_eq!(lines.len(), 1 + 6);
    let portrait = std::fs::read_to_string(dir.path().join("phase_portrait.csv")).expect("written");
    assert_eq!(portrait.lines().count(), 1 + 6);

    // --dump-program writes the corner-assembled constraint listing.
    let listing = std::fs::read_to_string(dir.path().join("program.txt")).expect("written");
    assert!(listing.starts_with("variables: "), "listing: {}", &listing[..40]);
    assert!(listing.contains("lmi"));
}

#[test]
fn unreachable_cap_flushes_truncated_artifacts_and_fails() {
    // The cap E[x^2] <= 0.0025 cannot be held: the uncontrollable plant
    // grows x by 1.3 per step from 0.025. Early receding-horizon steps are
    // feasible; a later one is not and truncates every trajectory.
    let text = "mode = \"drmpc-closed-loop\"\n\
                [system]\n\
                A = [[1.3]]\n\
                B = [[0.0]]\n\
                C = [[[0.3]]]\n\
                D = [[[0.0]]]\n\
                [cost]\n\
                N = 1\n\
                [constraints]\n\
                state_rows = [{ weight = [[1.0]], linear = [0.0] }]\n\
                state_bound = 0.0025\n\
                [ambiguity]\n\
                sigma_hat = [1.0]\n\
                [algorithm]\n\
                max_iters = 1\n\
                seed = 5\n\
                [sim]\n\
                run_horizon = 6\n\
                n_traj = 1\n\
                true_variance = [0.0]\n\
                initial_state = [0.025]\n";
    let mut cfg = parse_config(text).expect("valid");
    let dir = tempfile::tempdir().expect("tempdir");
    cfg.output_dir = dir.path().to_path_buf();
    let err = run(&cfg, false).expect_err("the cap must fail");
    assert!(matches!(err, RunError::Solve { .. }), "got {err}");

    // The partial artifacts are on disk with the truncated marker.
    let summary = summary_json(dir.path());
    assert_summary_schema(&summary);
    assert_eq!(summary["truncated"], true);
    let trajectories = summary["trajectories"].as_array().expect("present");
    let reason = trajectories[0]["truncation"].as_str().expect("a reason");
    assert!(reason.contains("feasible"), "reason: {reason}");
    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).expect("written");
    assert!(csv.lines().count() > 1, "partial rows are flushed");
}
