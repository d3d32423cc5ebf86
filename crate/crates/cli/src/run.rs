//! Experiment orchestration and artifact serialization.
//!
//! Every run writes the same three artifacts into the output directory:
//! `trajectories.csv` (header `traj_id,t,x1..xd,u1..um`, one row per recorded
//! state with the input applied there, empty input cells on final states),
//! `summary.json` (a fixed key set; keys that do not apply to the mode hold
//! null), and `phase_portrait.csv` (`x1,x2` pairs of every recorded state
//! when the state has at least two dimensions, header only otherwise). A
//! failed or truncated solve still flushes all three with the `truncated`
//! marker set before the error propagates.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sisdp::drmpc;
use sisdp::sdp::ConicProgram;
use sisdp::semi_infinite::{build_relaxed_program, sample_index_tuple, solve_sisdp};
use sisdp::sim::{self, NoiseModel, TrajectoryRecord, ViolationStats};
use thiserror::Error;

use crate::config::{
    build_drmpc_spec, build_sisdp_problem, ConfigError, ExperimentConfig, Mode, SolverConfig,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {message}")]
    Solve { context: &'static str, message: String },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    fn solve(context: &'static str, err: impl std::fmt::Display) -> Self {
        Self::Solve { context, message: err.to_string() }
    }

    fn io(path: &Path, err: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self::Io { path: path.to_path_buf(), source: std::io::Error::other(err) }
    }
}

/// Per-trajectory solve telemetry mirrored into `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectorySummary {
    pub id: usize,
    /// Certified optimal value of each receding-horizon solve.
    pub values: Vec<f64>,
    /// Terminal moment trace of each solve's plan.
    pub terminal_traces: Vec<f64>,
    pub wall_seconds: Vec<f64>,
    pub truncation: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepSummary {
    pub t: usize,
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
    pub exceeds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowSeriesSummary {
    pub bound: f64,
    pub steps: Vec<StepSummary>,
}

/// Empirical constraint-row series, one entry per configured row.
#[derive(Debug, Clone, Serialize)]
pub struct ViolationSummary {
    pub state_rows: Vec<RowSeriesSummary>,
    pub state_action_rows: Vec<RowSeriesSummary>,
}

impl From<&ViolationStats> for ViolationSummary {
    fn from(stats: &ViolationStats) -> Self {
        let series = |rows: &[sim::RowSeries]| {
            rows.iter()
                .map(|r| RowSeriesSummary {
                    bound: r.bound,
                    steps: r
                        .steps
                        .iter()
                        .map(|s| StepSummary {
                            t: s.t,
                            mean: s.mean,
                            std_error: s.std_error,
                            count: s.count,
                            exceeds: s.exceeds,
                        })
                        .collect(),
                })
                .collect()
        };
        Self {
            state_rows: series(&stats.state_only),
            state_action_rows: series(&stats.state_action),
        }
    }
}

/// The structured run summary. The key set is fixed across modes; keys that
/// do not apply hold null.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Ambiguity-band scale (policy modes).
    pub gamma: Option<f64>,
    /// Estimated noise covariance diagonal (policy modes).
    pub sigma_hat: Option<Vec<f64>>,
    /// Best certified value (search and open-loop modes).
    pub value: Option<f64>,
    /// Running maximum of the relaxation search (sisdp mode, nondecreasing).
    pub g_history: Option<Vec<f64>>,
    /// Samples the search consumed (sisdp mode).
    pub iterations: Option<usize>,
    /// Whether anything stopped early: a failed solve or a truncated
    /// trajectory.
    pub truncated: bool,
    pub error: Option<String>,
    pub wall_seconds_total: f64,
    pub trajectories: Option<Vec<TrajectorySummary>>,
    pub violation_stats: Option<ViolationSummary>,
}

/// What a run leaves behind: the artifact directory, the summary as written,
/// and the raw rollout records (closed-loop and open-loop modes).
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub summary: Summary,
    pub records: Vec<TrajectoryRecord>,
}

/// Runs the configured experiment and writes the artifacts. The config must
/// already be validated (loaders validate; [`ExperimentConfig::validate`] is
/// re-run here as a cheap guard for hand-built configs).
pub fn run(cfg: &ExperimentConfig, dump_program: bool) -> Result<RunArtifacts, RunError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| RunError::io(&cfg.output_dir, e))?;
    match cfg.mode {
        Mode::Sisdp => run_sisdp(cfg, dump_program),
        Mode::DrmpcOpenLoop => run_open_loop(cfg, dump_program),
        Mode::DrmpcClosedLoop => run_closed_loop(cfg, dump_program),
    }
}

fn blank_summary(cfg: &ExperimentConfig) -> Summary {
    Summary {
        mode: cfg.mode,
        seed: cfg.algorithm.seed,
        solver: cfg.solver.clone(),
        gamma: None,
        sigma_hat: None,
        value: None,
        g_history: None,
        iterations: None,
        truncated: false,
        error: None,
        wall_seconds_total: 0.0,
        trajectories: None,
        violation_stats: None,
    }
}

fn run_sisdp(cfg: &ExperimentConfig, dump_program: bool) -> Result<RunArtifacts, RunError> {
    let problem = build_sisdp_problem(cfg)?;
    let tuple_len = cfg.algorithm.tuple_len.unwrap_or_else(|| problem.decision_dim());
    if dump_program {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.algorithm.seed);
        let tuple = sample_index_tuple(&problem, tuple_len, &mut rng);
        write_program(&cfg.output_dir, &build_relaxed_program(&problem, &tuple))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.algorithm.seed);
    let mut summary = blank_summary(cfg);
    let start = Instant::now();
    let outcome = solve_sisdp(
        &problem,
        &cfg.search_budget(),
        tuple_len,
        &cfg.solver_options(),
        &mut rng,
    );
    summary.wall_seconds_total = start.elapsed().as_secs_f64();
    let result = match &outcome {
        Ok(o) => {
            summary.value = Some(o.value);
            summary.g_history = Some(o.history.clone());
            summary.iterations = Some(o.iterations);
            Ok(())
        }
        Err(e) => {
            summary.truncated = true;
            summary.error = Some(e.to_string());
            Err(RunError::solve("relaxation search", e))
        }
    };
    write_trajectories(&cfg.output_dir, &[], 0, 0)?;
    write_phase_portrait(&cfg.output_dir, &[])?;
    write_summary(&cfg.output_dir, &summary)?;
    result.map(|()| RunArtifacts { out_dir: cfg.output_dir.clone(), summary, records: vec![] })
}

fn run_open_loop(cfg: &ExperimentConfig, dump_program: bool) -> Result<RunArtifacts, RunError> {
    let spec = build_drmpc_spec(cfg)?;
    let x0 = cfg.initial_state();
    if dump_program {
        let corner = spec.ambiguity().corner();
        write_program(&cfg.output_dir, &drmpc::assemble_program(&spec, &x0, &[corner]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.algorithm.seed);
    let mut summary = blank_summary(cfg);
    summary.gamma = Some(spec.ambiguity().gamma());
    summary.sigma_hat = Some(spec.ambiguity().sigma_hat().iter().copied().collect());
    let start = Instant::now();
    let solved = drmpc::solve_drmpc(
        &spec,
        &x0,
        &cfg.search_budget(),
        &cfg.solver_options(),
        &mut rng,
    );
    summary.wall_seconds_total = start.elapsed().as_secs_f64();
    let (records, result) = match &solved {
        Ok(policy) => {
            // The plan as a single pseudo-rollout: nominal means and inputs.
            let record = TrajectoryRecord {
                id: 0,
                states: policy.stages.mu.clone(),
                inputs: policy.stages.ubar.clone(),
                values: vec![policy.value],
                terminal_traces: vec![policy.stages.pxn.dot(spec.constraints().terminal())],
                wall_seconds: vec![summary.wall_seconds_total],
                truncation: None,
            };
            summary.value = Some(policy.value);
            summary.trajectories = Some(summarize_records(std::slice::from_ref(&record)));
            (vec![record], Ok(()))
        }
        Err(e) => {
            summary.truncated = true;
            summary.error = Some(e.to_string());
            (vec![], Err(RunError::solve("policy solve", e)))
        }
    };
    let (d, m) = (spec.model().state_dim(), spec.model().input_dim());
    write_trajectories(&cfg.output_dir, &records, d, m)?;
    write_phase_portrait(&cfg.output_dir, &records)?;
    write_summary(&cfg.output_dir, &summary)?;
    result.map(|()| RunArtifacts { out_dir: cfg.output_dir.clone(), summary, records })
}

fn run_closed_loop(cfg: &ExperimentConfig, dump_program: bool) -> Result<RunArtifacts, RunError> {
    let spec = build_drmpc_spec(cfg)?;
    let x0 = cfg.initial_state();
    if dump_program {
        let corner = spec.ambiguity().corner();
        write_program(&cfg.output_dir, &drmpc::assemble_program(&spec, &x0, &[corner]))?;
    }
    let noise = NoiseModel::new(cfg.true_variance(), cfg.algorithm.seed)
        .map_err(|e| ConfigError::Invalid { field: "sim.true_variance".into(), reason: e.to_string() })?;
    let mut summary = blank_summary(cfg);
    summary.gamma = Some(spec.ambiguity().gamma());
    summary.sigma_hat = Some(spec.ambiguity().sigma_hat().iter().copied().collect());
    let (d, m) = (spec.model().state_dim(), spec.model().input_dim());
    let start = Instant::now();
    let solved = sim::run_closed_loop(
        &spec,
        &x0,
        cfg.sim.run_horizon,
        cfg.sim.n_traj,
        &noise,
        &cfg.search_budget(),
        &cfg.solver_options(),
    );
    summary.wall_seconds_total = start.elapsed().as_secs_f64();
    let records = match solved {
        Ok(records) => records,
        Err(e) => {
            summary.truncated = true;
            summary.error = Some(e.to_string());
            write_trajectories(&cfg.output_dir, &[], d, m)?;
            write_phase_portrait(&cfg.output_dir, &[])?;
            write_summary(&cfg.output_dir, &summary)?;
            return Err(RunError::solve("closed loop", e));
        }
    };
    let truncated: usize = records.iter().filter(|r| r.truncation.is_some()).count();
    summary.truncated = truncated > 0;
    summary.trajectories = Some(summarize_records(&records));
    summary.violation_stats =
        Some(ViolationSummary::from(&sim::violation_stats(&records, spec.constraints())));
    write_trajectories(&cfg.output_dir, &records, d, m)?;
    write_phase_portrait(&cfg.output_dir, &records)?;
    write_summary(&cfg.output_dir, &summary)?;
    if truncated > 0 {
        return Err(RunError::Solve {
            context: "closed loop",
            message: format!(
                "{truncated} of {} trajectories truncated; see summary.json",
                records.len()
            ),
        });
    }
    Ok(RunArtifacts { out_dir: cfg.output_dir.clone(), summary, records })
}

fn summarize_records(records: &[TrajectoryRecord]) -> Vec<TrajectorySummary> {
    records
        .iter()
        .map(|r| TrajectorySummary {
            id: r.id,
            values: r.values.clone(),
            terminal_traces: r.terminal_traces.clone(),
            wall_seconds: r.wall_seconds.clone(),
            truncation: r.truncation.clone(),
        })
        .collect()
}

/// Shortest exact decimal form; rereading the cell reproduces the bits.
fn cell(v: f64) -> String {
    format!("{v}")
}

fn write_trajectories(
    out_dir: &Path,
    records: &[TrajectoryRecord],
    d: usize,
    m: usize,
) -> Result<(), RunError> {
    let path = out_dir.join("trajectories.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| RunError::io(&path, e))?;
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|k| format!("u{k}")));
    w.write_record(&header).map_err(|e| RunError::io(&path, e))?;
    for r in records {
        for (t, x) in r.states.iter().enumerate() {
            let mut row = vec![r.id.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| cell(*v)));
            match r.inputs.get(t) {
                Some(u) => row.extend(u.iter().map(|v| cell(*v))),
                None => row.extend((0..m).map(|_| String::new())),
            }
            w.write_record(&row).map_err(|e| RunError::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| RunError::io(&path, e))
}

fn write_phase_portrait(out_dir: &Path, records: &[TrajectoryRecord]) -> Result<(), RunError> {
    let path = out_dir.join("phase_portrait.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| RunError::io(&path, e))?;
    w.write_record(["x1", "x2"]).map_err(|e| RunError::io(&path, e))?;
    for r in records {
        for x in &r.states {
            if x.len() >= 2 {
                w.write_record([cell(x[0]), cell(x[1])]).map_err(|e| RunError::io(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| RunError::io(&path, e))
}

fn write_summary(out_dir: &Path, summary: &Summary) -> Result<(), RunError> {
    let path = out_dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| RunError::io(&path, e))
}

fn write_program(out_dir: &Path, prog: &ConicProgram) -> Result<(), RunError> {
    let path = out_dir.join("program.txt");
    let mut file = File::create(&path).map_err(|e| RunError::io(&path, e))?;
    prog.write_listing(&mut file).map_err(|e| RunError::io(&path, e))
}
