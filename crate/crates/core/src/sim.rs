//! Plant simulation for the ambiguity-band controller: the exact noise-driven
//! state recursion, parallel closed-loop rollouts that re-solve the policy at
//! every step, and empirical statistics for the expectation constraints.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::drmpc::{solve_drmpc_seeded, ConstraintSpec, DrmpcSpec, QuadRow, SystemModel};
use crate::sdp::SolverOptions;
use crate::semi_infinite::SearchBudget;

/// Simulation setup rejected before any trajectory runs. Solver failures
/// mid-run never surface here; they truncate the affected trajectory instead.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("malformed noise model: {0}")]
    BadNoise(String),
    #[error("noise drives {noise} channels but the model has {model}")]
    ChannelMismatch { noise: usize, model: usize },
    #[error("initial state has length {got}, the model expects {expected}")]
    BadInitialState { expected: usize, got: usize },
}

/// The plant's actual disturbance: zero-mean Gaussian per channel with the
/// given variances, independent across channels and time. A zero variance
/// degenerates to a noise-free channel, which closed-loop consistency tests
/// rely on. The seed roots every per-trajectory stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    true_variance: DVector<f64>,
    seed: u64,
}

impl NoiseModel {
    pub fn new(true_variance: DVector<f64>, seed: u64) -> Result<Self, Error> {
        if true_variance.is_empty() {
            return Err(Error::BadNoise("needs at least one channel".into()));
        }
        if true_variance.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadNoise("variances must be finite and nonnegative".into()));
        }
        Ok(Self { true_variance, seed })
    }

    pub fn channels(&self) -> usize {
        self.true_variance.len()
    }

    pub fn true_variance(&self) -> &DVector<f64> {
        &self.true_variance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One disturbance vector: `w_j = sqrt(var_j) * z_j`, `z_j ~ N(0, 1)`.
    pub fn draw(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_iterator(
            self.true_variance.len(),
            self.true_variance.iter().map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal)),
        )
    }
}

/// What one closed-loop rollout recorded. A full run has `T + 1` states and
/// `T` of everything else; a truncated run stops at the step whose solve
/// failed and keeps the failure's description.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub id: usize,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Certified relaxation value of the solve at each executed step.
    pub values: Vec<f64>,
    /// `<P_N, S_f>` of each solve's plan, for auditing the terminal cap
    /// without re-solving.
    pub terminal_traces: Vec<f64>,
    /// Wall-clock seconds each solve took. Excluded from `PartialEq` use in
    /// determinism checks by comparing the other fields directly.
    pub wall_seconds: Vec<f64>,
    pub truncation: Option<String>,
}

impl TrajectoryRecord {
    /// Number of steps actually executed.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

/// One exact step of the plant: `x+ = Ax + Bu + sum_j (C_j x + D_j u) w_j`.
pub fn step(
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> DVector<f64> {
    assert_eq!(x.len(), model.state_dim(), "state length");
    assert_eq!(u.len(), model.input_dim(), "input length");
    assert_eq!(w.len(), model.channels(), "noise length");
    let mut next = model.a() * x + model.b() * u;
    for j in 0..model.channels() {
        next += (&model.state_noise()[j] * x + &model.input_noise()[j] * u) * w[j];
    }
    next
}

/// Receding-horizon rollout: at every step solve the policy from the current
/// state, apply its first nominal input, draw the plant noise, advance.
///
/// Trajectories run in parallel and are returned ordered by id. Each owns two
/// RNG streams derived from `(noise.seed, id)`, one for the plant noise and
/// one for the policy search, so records depend only on the seed and id,
/// never on scheduling. The winning covariance tuple of each solve seeds the
/// next step's search (a speed heuristic; it cannot change any solve's
/// feasible set). A solve that fails marks its trajectory truncated with the
/// failure's description and the batch carries on.
pub fn run_closed_loop(
    spec: &DrmpcSpec,
    x0: &DVector<f64>,
    run_horizon: usize,
    n_traj: usize,
    noise: &NoiseModel,
    budget: &SearchBudget,
    opts: &SolverOptions,
) -> Result<Vec<TrajectoryRecord>, Error> {
    assert!(run_horizon >= 1, "need at least one step");
    assert!(n_traj >= 1, "need at least one trajectory");
    if noise.channels() != spec.model().channels() {
        return Err(Error::ChannelMismatch {
            noise: noise.channels(),
            model: spec.model().channels(),
        });
    }
    if x0.len() != spec.model().state_dim() {
        return Err(Error::BadInitialState {
            expected: spec.model().state_dim(),
            got: x0.len(),
        });
    }
    Ok((0..n_traj)
        .into_par_iter()
        .map(|id| run_single(spec, x0, run_horizon, noise, budget, opts, id))
        .collect())
}

fn run_single(
    spec: &DrmpcSpec,
    x0: &DVector<f64>,
    run_horizon: usize,
    noise: &NoiseModel,
    budget: &SearchBudget,
    opts: &SolverOptions,
    id: usize,
) -> TrajectoryRecord {
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise.seed());
    noise_rng.set_stream(2 * id as u64);
    let mut search_rng = ChaCha8Rng::seed_from_u64(noise.seed());
    search_rng.set_stream(2 * id as u64 + 1);
    let mut record = TrajectoryRecord {
        id,
        states: vec![x0.clone()],
        inputs: Vec::with_capacity(run_horizon),
        values: Vec::with_capacity(run_horizon),
        terminal_traces: Vec::with_capacity(run_horizon),
        wall_seconds: Vec::with_capacity(run_horizon),
        truncation: None,
    };
    let mut x = x0.clone();
    let mut warm: Option<Vec<DVector<f64>>> = None;
    for _ in 0..run_horizon {
        let start = Instant::now();
        match solve_drmpc_seeded(spec, &x, budget, opts, warm.as_deref(), &mut search_rng) {
            Ok((policy, tuple)) => {
                record.wall_seconds.push(start.elapsed().as_secs_f64());
                let u = policy.stages.ubar[0].clone();
                let w = noise.draw(&mut noise_rng);
                x = step(spec.model(), &x, &u, &w);
                record.inputs.push(u);
                record.values.push(policy.value);
                record
                    .terminal_traces
                    .push(policy.stages.pxn.dot(spec.constraints().terminal()));
                record.states.push(x.clone());
                warm = Some(tuple);
            }
            Err(err) => {
                record.truncation = Some(err.to_string());
                break;
            }
        }
    }
    record
}

/// Empirical mean of one expectation-constraint row at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStat {
    pub t: usize,
    pub mean: f64,
    /// Standard error of the mean (zero when fewer than two samples).
    pub std_error: f64,
    /// Trajectories contributing at this step after truncations.
    pub count: usize,
    /// Whether the empirical mean exceeds the row's bound.
    pub exceeds: bool,
}

/// Per-step empirical series for one constraint row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSeries {
    pub bound: f64,
    pub steps: Vec<StepStat>,
}

/// Empirical constraint summary over a batch of trajectories, one series per
/// in-horizon expectation row. The planner bounds expectations, so these are
/// sample means, not per-realization checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationStats {
    pub state_only: Vec<RowSeries>,
    pub state_action: Vec<RowSeries>,
}

/// Evaluates every state-only row on the recorded states and every
/// state-action row on the recorded `(state, input)` pairs, averaging across
/// trajectories at each step. Empty row lists produce empty summaries.
pub fn violation_stats(records: &[TrajectoryRecord], constraints: &ConstraintSpec) -> ViolationStats {
    let state_only = constraints
        .state_only()
        .iter()
        .map(|row| {
            row_series(records, row, constraints.state_only_bound(), |r, t| {
                (r.states.len() > t).then(|| r.states[t].clone())
            })
        })
        .collect();
    let state_action = constraints
        .state_action()
        .iter()
        .map(|row| {
            row_series(records, row, constraints.state_action_bound(), |r, t| {
                (r.inputs.len() > t).then(|| stack(&r.states[t], &r.inputs[t]))
            })
        })
        .collect();
    ViolationStats { state_only, state_action }
}

fn row_series(
    records: &[TrajectoryRecord],
    row: &QuadRow,
    bound: f64,
    point: impl Fn(&TrajectoryRecord, usize) -> Option<DVector<f64>>,
) -> RowSeries {
    let weight = row.weight.to_dense();
    let horizon = records.iter().map(|r| (0..).find(|&t| point(r, t).is_none()).unwrap()).max();
    let mut steps = Vec::new();
    for t in 0..horizon.unwrap_or(0) {
        let values: Vec<f64> = records
            .iter()
            .filter_map(|r| point(r, t))
            .map(|z| (z.transpose() * &weight * &z)[(0, 0)] + row.linear.dot(&z))
            .collect();
        if values.is_empty() {
            break;
        }
        let count = values.len();
        let mean = values.iter().sum::<f64>() / count as f64;
        let std_error = if count >= 2 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            (var / count as f64).sqrt()
        } else {
            0.0
        };
        steps.push(StepStat { t, mean, std_error, count, exceeds: mean > bound });
    }
    RowSeries { bound, steps }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}
