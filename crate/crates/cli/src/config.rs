//! Experiment configuration: one TOML file, nested tables, matrices as
//! row-lists. Every orchestration field has a default; the problem data
//! (system matrices, SI-SDP cost/bound/index set) must be spelled out.
//!
//! [`load_config`] parses, resolves the sample path against the config file's
//! directory, and validates shapes before anything solves. Validation errors
//! name the offending field and the expected shape.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sisdp::drmpc::{
    self, AmbiguitySet, ConstraintSpec, CostSpec, DrmpcSpec, QuadRow, SystemModel,
};
use sisdp::sdp::SolverOptions;
use sisdp::semi_infinite::{IndexSetDescriptor, SisdpProblem};
use sisdp::sym::SymMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {source}")]
    Parse { source: Box<toml::de::Error> },
    #[error("{field}: expected {expected}, got {got}")]
    Shape { field: String, expected: String, got: String },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    fn shape(field: &str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Self::Shape { field: field.into(), expected: expected.into(), got: got.into() }
    }

    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Self::Invalid { field: field.into(), reason: reason.into() }
    }
}

/// What the run does with the configured problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Random-search solve of the configured semi-infinite SDP.
    Sisdp,
    /// One robust policy solve from the initial state; artifacts hold the plan.
    DrmpcOpenLoop,
    /// Receding-horizon Monte-Carlo rollouts on the configured plant.
    DrmpcClosedLoop,
}

/// Row-list matrix as it appears in TOML.
pub type Rows = Vec<Vec<f64>>;

/// Dynamics `x+ = A x + B u + sum_j (C_j x + D_j u) w^j`; `C` and `D` list
/// one matrix per noise channel. The one table without defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "C")]
    pub c: Vec<Rows>,
    #[serde(rename = "D")]
    pub d: Vec<Rows>,
}

/// Stage cost weights and horizon. `Q` defaults to identity, `R` to identity,
/// `S` to zero (no terminal cost), `N` to 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Rows>,
    #[serde(rename = "N", default = "default_horizon")]
    pub horizon: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { q: None, r: None, s: None, horizon: default_horizon() }
    }
}

/// One expectation-constraint row `E[z' weight z + linear' z] <= bound`;
/// `weight` defaults to zero (a mean constraint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Rows>,
    pub linear: Vec<f64>,
}

/// Expectation constraints. All default empty / non-binding: no rows, unit
/// bounds, zero terminal weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Rows over the state, one shared bound.
    #[serde(default)]
    pub state_rows: Vec<RowConfig>,
    #[serde(default = "default_bound")]
    pub state_bound: f64,
    /// Rows over the stacked state-action vector, one shared bound.
    #[serde(default)]
    pub state_action_rows: Vec<RowConfig>,
    #[serde(default = "default_bound")]
    pub state_action_bound: f64,
    /// Terminal second-moment cap `trace(terminal * Px_N) <= terminal_bound`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<Rows>,
    #[serde(default = "default_bound")]
    pub terminal_bound: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            state_rows: Vec::new(),
            state_bound: default_bound(),
            state_action_rows: Vec::new(),
            state_action_bound: default_bound(),
            terminal: None,
            terminal_bound: default_bound(),
        }
    }
}

/// Noise covariance band `floor <= Sigma_w <= gamma * Sigma_hat` (diagonal).
/// `sigma_hat` comes either directly or as a CSV of noise samples (one sample
/// per row, one column per channel) whose diagonal second moment estimates
/// it; setting both is an error, setting neither defaults to ones. `gamma`
/// defaults to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguityConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_hat: Option<Vec<f64>>,
    /// Resolved against the config file's directory by [`load_config`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_path: Option<PathBuf>,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        Self { gamma: default_gamma(), sigma_hat: None, samples_path: None }
    }
}

/// Outer random-search budget and seeding. Defaults: 10 iterations, patience
/// 50, improvement threshold 1e-6, tuple length equal to the decision
/// dimension, seed 2024.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    #[serde(default = "default_search_iters")]
    pub max_iters: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_improvement")]
    pub min_improvement: f64,
    /// Entries per sampled tuple (sisdp mode only; the policy search always
    /// uses its decision dimension).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuple_len: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            max_iters: default_search_iters(),
            patience: default_patience(),
            min_improvement: default_min_improvement(),
            tuple_len: None,
            seed: default_seed(),
        }
    }
}

/// Inner interior-point tolerances. Defaults: 1e-7 gap, 1e-7 feasibility,
/// 200 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_eps")]
    pub eps_gap: f64,
    #[serde(default = "default_eps")]
    pub eps_feas: f64,
    #[serde(default = "default_solver_iters")]
    pub max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps_gap: default_eps(),
            eps_feas: default_eps(),
            max_iters: default_solver_iters(),
        }
    }
}

/// Closed-loop rollout shape. Defaults: 30 steps, 40 trajectories, unit true
/// variance per channel, zero initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_run_horizon")]
    pub run_horizon: usize,
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_variance: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            run_horizon: default_run_horizon(),
            n_traj: default_n_traj(),
            true_variance: None,
            initial_state: None,
        }
    }
}

/// The semi-infinite SDP `min <cost, X> s.t. <A, X> <= bound for all A in the
/// index set, X >= 0`. Like the system matrices, the problem data has no
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisdpConfig {
    pub cost: Rows,
    pub bound: f64,
    pub index_set: IndexSetConfig,
}

/// Index-set descriptor, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IndexSetConfig {
    /// `(1 - t) a0 + t a1` for `t` in `[0, 1]`.
    Segment { a0: Rows, a1: Rows },
    /// Explicit members.
    FiniteList { members: Vec<Rows> },
    /// Entrywise box between two symmetric matrices.
    MatrixBox { lower: Rows, upper: Rows },
}

/// The whole experiment file. [`Self::validate`] checks mode requirements and
/// dimensional consistency; builders hand the checked data to the solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub constraints: ConstraintConfig,
    #[serde(default)]
    pub ambiguity: AmbiguityConfig,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sisdp: Option<SisdpConfig>,
}

fn default_mode() -> Mode {
    Mode::DrmpcClosedLoop
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_horizon() -> usize {
    5
}

fn default_bound() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    1.0
}

fn default_search_iters() -> usize {
    10
}

fn default_patience() -> usize {
    50
}

fn default_min_improvement() -> f64 {
    1e-6
}

fn default_seed() -> u64 {
    2024
}

fn default_eps() -> f64 {
    1e-7
}

fn default_solver_iters() -> usize {
    200
}

fn default_run_horizon() -> usize {
    30
}

fn default_n_traj() -> usize {
    40
}

/// Parses and validates a config from TOML text. Relative sample paths are
/// kept as written (callers with a file location use [`load_config`]).
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse { source: Box::new(e) })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses and validates a config file. A relative `samples_path` is
/// resolved against the file's directory, so the loaded config is
/// location-independent.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| ConfigError::Parse { source: Box::new(e) })?;
    if let Some(rel) = &cfg.ambiguity.samples_path {
        if rel.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            cfg.ambiguity.samples_path = Some(base.join(rel));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes a config back to TOML. Inverse of [`parse_config`] on loaded
/// configs: defaults were materialized structurally, omitted optionals stay
/// omitted.
pub fn write_config(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

/// Shape check for one row-list matrix.
fn check_rows(field: &str, rows: &Rows, nrows: usize, ncols: usize) -> Result<(), ConfigError> {
    let expected = format!("a {nrows}x{ncols} matrix as a row-list");
    if rows.len() != nrows {
        return Err(ConfigError::shape(field, expected, format!("{} rows", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(ConfigError::shape(
                field,
                expected,
                format!("row {i} of length {}", row.len()),
            ));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(ConfigError::shape(field, expected, format!("entry ({i}, {j}) = {v}")));
            }
        }
    }
    Ok(())
}

fn check_vector(field: &str, v: &[f64], len: usize) -> Result<(), ConfigError> {
    let expected = format!("a vector of {len} finite entries");
    if v.len() != len {
        return Err(ConfigError::shape(field, expected, format!("length {}", v.len())));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(ConfigError::shape(field, expected, format!("entry {bad}")));
    }
    Ok(())
}

fn check_square(field: &str, rows: &Rows) -> Result<usize, ConfigError> {
    let n = rows.len();
    if n == 0 {
        return Err(ConfigError::shape(field, "a nonempty square matrix", "0 rows"));
    }
    check_rows(field, rows, n, n)?;
    Ok(n)
}

impl ExperimentConfig {
    /// Mode requirements plus dimensional consistency of everything the mode
    /// will touch. Runs before any file beyond the config itself is read and
    /// before any solve.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.algorithm.max_iters == 0 {
            return Err(ConfigError::invalid(
                "algorithm.max_iters",
                "the search needs at least one iteration",
            ));
        }
        match self.mode {
            Mode::Sisdp => self.validate_sisdp(),
            Mode::DrmpcOpenLoop | Mode::DrmpcClosedLoop => self.validate_drmpc(),
        }
    }

    fn validate_sisdp(&self) -> Result<(), ConfigError> {
        let Some(s) = &self.sisdp else {
            return Err(ConfigError::invalid(
                "sisdp",
                "mode \"sisdp\" needs a [sisdp] table with cost, bound and index_set",
            ));
        };
        let n = check_square("sisdp.cost", &s.cost)?;
        if !s.bound.is_finite() {
            return Err(ConfigError::shape("sisdp.bound", "a finite scalar", s.bound.to_string()));
        }
        match &s.index_set {
            IndexSetConfig::Segment { a0, a1 } => {
                check_rows("sisdp.index_set.a0", a0, n, n)?;
                check_rows("sisdp.index_set.a1", a1, n, n)?;
            }
            IndexSetConfig::FiniteList { members } => {
                if members.is_empty() {
                    return Err(ConfigError::shape(
                        "sisdp.index_set.members",
                        "at least one member matrix",
                        "an empty list",
                    ));
                }
                for (k, m) in members.iter().enumerate() {
                    check_rows(&format!("sisdp.index_set.members[{k}]"), m, n, n)?;
                }
            }
            IndexSetConfig::MatrixBox { lower, upper } => {
                check_rows("sisdp.index_set.lower", lower, n, n)?;
                check_rows("sisdp.index_set.upper", upper, n, n)?;
            }
        }
        if let Some(len) = self.algorithm.tuple_len {
            let need = sisdp::sym::packed_len(n);
            if len < need {
                return Err(ConfigError::invalid(
                    "algorithm.tuple_len",
                    format!("tuples need at least the decision dimension {need}, got {len}"),
                ));
            }
        }
        Ok(())
    }

    fn validate_drmpc(&self) -> Result<(), ConfigError> {
        let Some(sys) = &self.system else {
            return Err(ConfigError::invalid(
                "system",
                "drmpc modes need a [system] table with A, B, C and D",
            ));
        };
        let d = check_square("system.A", &sys.a)?;
        if sys.b.is_empty() || sys.b[0].is_empty() {
            return Err(ConfigError::shape("system.B", "a d x m matrix with m >= 1", "no columns"));
        }
        let m = sys.b[0].len();
        check_rows("system.B", &sys.b, d, m)?;
        if sys.c.is_empty() || sys.c.len() != sys.d.len() {
            return Err(ConfigError::shape(
                "system.C / system.D",
                "matching nonempty channel lists",
                format!("{} and {} channels", sys.c.len(), sys.d.len()),
            ));
        }
        let q = sys.c.len();
        for (j, c) in sys.c.iter().enumerate() {
            check_rows(&format!("system.C[{j}]"), c, d, d)?;
        }
        for (j, dm) in sys.d.iter().enumerate() {
            check_rows(&format!("system.D[{j}]"), dm, d, m)?;
        }

        if self.cost.horizon == 0 {
            return Err(ConfigError::invalid("cost.N", "the horizon must be at least 1"));
        }
        if let Some(qw) = &self.cost.q {
            check_rows("cost.Q", qw, d, d)?;
        }
        if let Some(rw) = &self.cost.r {
            check_rows("cost.R", rw, m, m)?;
        }
        if let Some(sw) = &self.cost.s {
            check_rows("cost.S", sw, d, d)?;
        }

        for (l, row) in self.constraints.state_rows.iter().enumerate() {
            check_vector(&format!("constraints.state_rows[{l}].linear"), &row.linear, d)?;
            if let Some(w) = &row.weight {
                check_rows(&format!("constraints.state_rows[{l}].weight"), w, d, d)?;
            }
        }
        for (l, row) in self.constraints.state_action_rows.iter().enumerate() {
            check_vector(
                &format!("constraints.state_action_rows[{l}].linear"),
                &row.linear,
                d + m,
            )?;
            if let Some(w) = &row.weight {
                check_rows(
                    &format!("constraints.state_action_rows[{l}].weight"),
                    w,
                    d + m,
                    d + m,
                )?;
            }
        }
        if let Some(t) = &self.constraints.terminal {
            check_rows("constraints.terminal", t, d, d)?;
        }

        if !self.ambiguity.gamma.is_finite() || self.ambiguity.gamma <= 0.0 {
            return Err(ConfigError::invalid(
                "ambiguity.gamma",
                format!("the band scale must be a positive finite scalar, got {}", self.ambiguity.gamma),
            ));
        }
        if self.ambiguity.sigma_hat.is_some() && self.ambiguity.samples_path.is_some() {
            return Err(ConfigError::invalid(
                "ambiguity",
                "give sigma_hat or samples_path, not both",
            ));
        }
        if let Some(sh) = &self.ambiguity.sigma_hat {
            check_vector("ambiguity.sigma_hat", sh, q)?;
        }
        if let Some(path) = &self.ambiguity.samples_path {
            if !path.exists() {
                return Err(ConfigError::invalid(
                    "ambiguity.samples_path",
                    format!("{} does not exist", path.display()),
                ));
            }
        }

        if self.mode == Mode::DrmpcClosedLoop && self.sim.run_horizon == 0 {
            return Err(ConfigError::invalid("sim.run_horizon", "need at least one step"));
        }
        if self.mode == Mode::DrmpcClosedLoop && self.sim.n_traj == 0 {
            return Err(ConfigError::invalid("sim.n_traj", "need at least one trajectory"));
        }
        if let Some(tv) = &self.sim.true_variance {
            check_vector("sim.true_variance", tv, q)?;
        }
        if let Some(x0) = &self.sim.initial_state {
            check_vector("sim.initial_state", x0, d)?;
        }
        Ok(())
    }

    /// The initial state, defaulted to the origin.
    pub fn initial_state(&self) -> DVector<f64> {
        let d = self.system.as_ref().map_or(0, |s| s.a.len());
        match &self.sim.initial_state {
            Some(x0) => DVector::from_column_slice(x0),
            None => DVector::zeros(d),
        }
    }

    /// The plant's true noise variance, defaulted to ones.
    pub fn true_variance(&self) -> DVector<f64> {
        let q = self.system.as_ref().map_or(0, |s| s.c.len());
        match &self.sim.true_variance {
            Some(tv) => DVector::from_column_slice(tv),
            None => DVector::from_element(q, 1.0),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            eps_gap: self.solver.eps_gap,
            eps_feas: self.solver.eps_feas,
            max_iters: self.solver.max_iters,
        }
    }

    pub fn search_budget(&self) -> sisdp::semi_infinite::SearchBudget {
        sisdp::semi_infinite::SearchBudget {
            max_iters: self.algorithm.max_iters,
            patience: self.algorithm.patience,
            min_improvement: self.algorithm.min_improvement,
        }
    }
}

fn to_dmatrix(rows: &Rows) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}

/// Symmetric conversion, naming the field when the rows are not symmetric
/// (shape was already validated).
fn to_sym(field: &str, rows: &Rows) -> Result<SymMatrix, ConfigError> {
    SymMatrix::from_rows(rows).map_err(|e| ConfigError::invalid(field, e.to_string()))
}

/// Estimated diagonal noise covariance: the configured value, or the
/// second-moment estimate over the sample file, or ones.
pub fn resolve_sigma_hat(cfg: &ExperimentConfig) -> Result<DVector<f64>, ConfigError> {
    let q = cfg.system.as_ref().map_or(1, |s| s.c.len());
    if let Some(sh) = &cfg.ambiguity.sigma_hat {
        return Ok(DVector::from_column_slice(sh));
    }
    let Some(path) = &cfg.ambiguity.samples_path else {
        return Ok(DVector::from_element(q, 1.0));
    };
    let samples = read_noise_samples(path, q)?;
    drmpc::empirical_covariance(&samples)
        .map_err(|e| ConfigError::invalid("ambiguity.samples_path", e.to_string()))
}

/// Reads a headerless CSV of noise samples, one sample per row, `channels`
/// columns per row.
pub fn read_noise_samples(path: &Path, channels: usize) -> Result<Vec<DVector<f64>>, ConfigError> {
    let field = "ambiguity.samples_path";
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ConfigError::invalid(field, e.to_string()))?;
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ConfigError::invalid(field, e.to_string()))?;
        if record.len() != channels {
            return Err(ConfigError::shape(
                field,
                format!("{channels} columns per sample row"),
                format!("row {i} with {} columns", record.len()),
            ));
        }
        let mut sample = DVector::zeros(channels);
        for (j, cell) in record.iter().enumerate() {
            sample[j] = cell.parse::<f64>().map_err(|e| {
                ConfigError::invalid(field, format!("row {i}, column {j}: {e}"))
            })?;
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(ConfigError::invalid(field, "the sample file is empty"));
    }
    Ok(samples)
}

/// Builds the checked policy-synthesis problem. Errors from the solver-side
/// constructors (definiteness and the like) are reported under the table
/// that supplied the data.
pub fn build_drmpc_spec(cfg: &ExperimentConfig) -> Result<DrmpcSpec, ConfigError> {
    let sys = cfg.system.as_ref().expect("validated drmpc config");
    let d = sys.a.len();
    let m = sys.b[0].len();
    let model = SystemModel::new(
        to_dmatrix(&sys.a),
        to_dmatrix(&sys.b),
        sys.c.iter().map(to_dmatrix).collect(),
        sys.d.iter().map(to_dmatrix).collect(),
    )
    .map_err(|e| ConfigError::invalid("system", e.to_string()))?;

    let zeros = |n: usize| vec![vec![0.0; n]; n];
    let eye = |n: usize| {
        let mut rows = zeros(n);
        (0..n).for_each(|i| rows[i][i] = 1.0);
        rows
    };
    let q_rows = cfg.cost.q.clone().unwrap_or_else(|| eye(d));
    let r_rows = cfg.cost.r.clone().unwrap_or_else(|| eye(m));
    let s_rows = cfg.cost.s.clone().unwrap_or_else(|| zeros(d));
    let cost = CostSpec::new(
        to_sym("cost.Q", &q_rows)?,
        to_sym("cost.R", &r_rows)?,
        to_sym("cost.S", &s_rows)?,
        cfg.cost.horizon,
    )
    .map_err(|e| ConfigError::invalid("cost", e.to_string()))?;

    let row = |field: String, rc: &RowConfig, n: usize| -> Result<QuadRow, ConfigError> {
        let weight = match &rc.weight {
            Some(w) => to_sym(&format!("{field}.weight"), w)?,
            None => SymMatrix::zeros(n),
        };
        Ok(QuadRow { weight, linear: DVector::from_column_slice(&rc.linear) })
    };
    let state_rows = cfg
        .constraints
        .state_rows
        .iter()
        .enumerate()
        .map(|(l, rc)| row(format!("constraints.state_rows[{l}]"), rc, d))
        .collect::<Result<Vec<_>, _>>()?;
    let state_action_rows = cfg
        .constraints
        .state_action_rows
        .iter()
        .enumerate()
        .map(|(l, rc)| row(format!("constraints.state_action_rows[{l}]"), rc, d + m))
        .collect::<Result<Vec<_>, _>>()?;
    let terminal = match &cfg.constraints.terminal {
        Some(t) => to_sym("constraints.terminal", t)?,
        None => SymMatrix::zeros(d),
    };
    let constraints = ConstraintSpec::new(
        state_action_rows,
        cfg.constraints.state_action_bound,
        state_rows,
        cfg.constraints.state_bound,
        terminal,
        cfg.constraints.terminal_bound,
    )
    .map_err(|e| ConfigError::invalid("constraints", e.to_string()))?;

    let sigma_hat = resolve_sigma_hat(cfg)?;
    let ambiguity = AmbiguitySet::new(sigma_hat, cfg.ambiguity.gamma)
        .map_err(|e| ConfigError::invalid("ambiguity", e.to_string()))?;

    DrmpcSpec::new(model, cost, constraints, ambiguity)
        .map_err(|e| ConfigError::invalid("system", e.to_string()))
}

/// Builds the checked semi-infinite SDP.
pub fn build_sisdp_problem(cfg: &ExperimentConfig) -> Result<SisdpProblem, ConfigError> {
    let s = cfg.sisdp.as_ref().expect("validated sisdp config");
    let cost = to_sym("sisdp.cost", &s.cost)?;
    let index_set = match &s.index_set {
        IndexSetConfig::Segment { a0, a1 } => IndexSetDescriptor::Segment {
            a0: to_sym("sisdp.index_set.a0", a0)?,
            a1: to_sym("sisdp.index_set.a1", a1)?,
        },
        IndexSetConfig::FiniteList { members } => IndexSetDescriptor::FiniteList(
            members
                .iter()
                .enumerate()
                .map(|(k, m)| to_sym(&format!("sisdp.index_set.members[{k}]"), m))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        IndexSetConfig::MatrixBox { lower, upper } => IndexSetDescriptor::MatrixBox {
            lower: to_sym("sisdp.index_set.lower", lower)?,
            upper: to_sym("sisdp.index_set.upper", upper)?,
        },
    };
    SisdpProblem::new(cost, s.bound, index_set)
        .map_err(|e| ConfigError::invalid("sisdp", e.to_string()))
}
