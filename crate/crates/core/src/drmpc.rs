//! Distributionally robust receding-horizon control for linear systems with
//! multiplicative noise: `x+ = Ax + Bu + sum_j (C_j x + D_j u) w^j` under an
//! affine feedback `u_t = ubar_t + K_t (x_t - mu_t)`.
//!
//! The expected cost and expectation constraints close over the mean and
//! covariance of the state, whose recursions are certified by linear matrix
//! inequalities in the lifted variables `(ubar_t, mu_t, P_t, Sigma_t, U_t)`
//! with `U_t = K_t Sigma_t`. The noise covariance is only known to lie in a
//! diagonal band `floor <= Sigma_w <= gamma * Sigma_hat`; the worst case over
//! that band is approached from below by a sampled relaxation
//! ([`eval_relaxation`]) whose running maximum over random covariance tuples
//! ([`solve_drmpc`]) is the certified value. For diagonal bands the worst
//! case sits at the upper corner, so the search always evaluates the corner
//! first and random tuples can only confirm it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::sdp::{self, ConicProgram, LinearRow, LmiBlock, SolveStatus, SolverOptions};
use crate::semi_infinite::SearchBudget;
use crate::sym::{packed_index, packed_len, SymMatrix};

/// Uniform floor `Sigma_t >= EPS_STRICT * I` keeping every solved covariance
/// invertible for gain recovery.
pub const EPS_STRICT: f64 = 1e-8;
/// Condition-number bound above which gain recovery refuses to invert.
const COND_LIMIT: f64 = 1e12;
/// The ambiguity band's lower edge, relative to its upper edge per channel.
const FLOOR_FACTOR: f64 = 1e-6;
/// Relative slack for ambiguity-set membership checks.
const MEMBER_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("malformed model: {0}")]
    BadModel(String),
    #[error("malformed cost: {0}")]
    BadCost(String),
    #[error("malformed constraints: {0}")]
    BadConstraints(String),
    #[error("malformed ambiguity set: {0}")]
    BadAmbiguity(String),
    #[error("malformed specification: {0}")]
    BadSpec(String),
    #[error("covariance sample {index} lies outside the ambiguity set")]
    SampleOutsideSet { index: usize },
    #[error("no samples provided")]
    NoSamples,
    #[error("covariance is singular at the working tolerance (min eigenvalue {min_eig:.3e})")]
    SingularCovariance { min_eig: f64 },
    #[error("covariance at stage {stage} is too ill-conditioned to invert (condition {cond:.3e})")]
    IllConditioned { stage: usize, cond: f64 },
    #[error("no feasible policy exists from the given initial state")]
    Infeasible,
    #[error("relaxation solve failed numerically after {iterations} iterations (tol {achieved:.3e})")]
    Numerical { achieved: f64, iterations: usize },
    #[error("every sampled relaxation failed ({attempts} attempts)")]
    AllSamplesFailed { attempts: usize },
    #[error(transparent)]
    Program(#[from] sdp::Error),
    #[error(transparent)]
    Eigen(#[from] crate::sym::EigenFailure),
}

/// Time-invariant linear dynamics with multiplicative noise channels:
/// `x+ = A x + B u + sum_j (state_noise[j] x + input_noise[j] u) w^j`
/// where the `w^j` are scalar, zero-mean, unit-variance and uncorrelated.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    state_noise: Vec<DMatrix<f64>>,
    input_noise: Vec<DMatrix<f64>>,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        state_noise: Vec<DMatrix<f64>>,
        input_noise: Vec<DMatrix<f64>>,
    ) -> Result<Self, Error> {
        let d = a.nrows();
        if a.ncols() != d || d == 0 {
            return Err(Error::BadModel(format!(
                "system matrix must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != d || b.ncols() == 0 {
            return Err(Error::BadModel(format!(
                "input matrix must be {d}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if state_noise.is_empty() || state_noise.len() != input_noise.len() {
            return Err(Error::BadModel(format!(
                "need matching nonempty noise channel lists, got {} state and {} input",
                state_noise.len(),
                input_noise.len()
            )));
        }
        let m = b.ncols();
        for (j, c) in state_noise.iter().enumerate() {
            if c.nrows() != d || c.ncols() != d {
                return Err(Error::BadModel(format!(
                    "state noise channel {j} must be {d}x{d}, got {}x{}",
                    c.nrows(),
                    c.ncols()
                )));
            }
        }
        for (j, dm) in input_noise.iter().enumerate() {
            if dm.nrows() != d || dm.ncols() != m {
                return Err(Error::BadModel(format!(
                    "input noise channel {j} must be {d}x{m}, got {}x{}",
                    dm.nrows(),
                    dm.ncols()
                )));
            }
        }
        Ok(Self { a, b, state_noise, input_noise })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn channels(&self) -> usize {
        self.state_noise.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_noise(&self) -> &[DMatrix<f64>] {
        &self.state_noise
    }

    pub fn input_noise(&self) -> &[DMatrix<f64>] {
        &self.input_noise
    }
}

/// Quadratic stage cost `x'Qx + u'Ru`, terminal cost `x'Sx`, and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    state_weight: SymMatrix,
    input_weight: SymMatrix,
    terminal_weight: SymMatrix,
    horizon: usize,
}

impl CostSpec {
    pub fn new(
        state_weight: SymMatrix,
        input_weight: SymMatrix,
        terminal_weight: SymMatrix,
        horizon: usize,
    ) -> Result<Self, Error> {
        if horizon == 0 {
            return Err(Error::BadCost("horizon must be at least 1".into()));
        }
        if !state_weight.is_psd(1e-9)? {
            return Err(Error::BadCost("state weight must be positive semidefinite".into()));
        }
        if input_weight.min_eig()? <= 0.0 {
            return Err(Error::BadCost("input weight must be positive definite".into()));
        }
        if !terminal_weight.is_psd(1e-9)? {
            return Err(Error::BadCost("terminal weight must be positive semidefinite".into()));
        }
        if terminal_weight.order() != state_weight.order() {
            return Err(Error::BadCost(format!(
                "terminal weight has order {} but the state weight has order {}",
                terminal_weight.order(),
                state_weight.order()
            )));
        }
        Ok(Self { state_weight, input_weight, terminal_weight, horizon })
    }

    pub fn state_weight(&self) -> &SymMatrix {
        &self.state_weight
    }

    pub fn input_weight(&self) -> &SymMatrix {
        &self.input_weight
    }

    pub fn terminal_weight(&self) -> &SymMatrix {
        &self.terminal_weight
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// One expectation constraint `E[z'Wz + f'z] <= bound` over a moment bound:
/// `W` must be positive semidefinite so the trace surrogate is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRow {
    pub weight: SymMatrix,
    pub linear: DVector<f64>,
}

/// Expectation constraints on the state-action vector (enforced for
/// `t = 1..N-1`), on the state alone (`t = 1..N`), and the terminal
/// second-moment cap `trace(terminal * Px_N) <= terminal_bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    state_action: Vec<QuadRow>,
    state_action_bound: f64,
    state_only: Vec<QuadRow>,
    state_only_bound: f64,
    terminal: SymMatrix,
    terminal_bound: f64,
}

impl ConstraintSpec {
    pub fn new(
        state_action: Vec<QuadRow>,
        state_action_bound: f64,
        state_only: Vec<QuadRow>,
        state_only_bound: f64,
        terminal: SymMatrix,
        terminal_bound: f64,
    ) -> Result<Self, Error> {
        for (what, rows) in [("state-action", &state_action), ("state-only", &state_only)] {
            for (l, row) in rows.iter().enumerate() {
                if row.weight.order() != row.linear.len() {
                    return Err(Error::BadConstraints(format!(
                        "{what} row {l}: weight order {} does not match linear length {}",
                        row.weight.order(),
                        row.linear.len()
                    )));
                }
                if !row.weight.is_psd(1e-9)? {
                    return Err(Error::BadConstraints(format!(
                        "{what} row {l}: weight must be positive semidefinite"
                    )));
                }
            }
        }
        if !terminal.is_psd(1e-9)? {
            return Err(Error::BadConstraints(
                "terminal weight must be positive semidefinite".into(),
            ));
        }
        Ok(Self {
            state_action,
            state_action_bound,
            state_only,
            state_only_bound,
            terminal,
            terminal_bound,
        })
    }

    pub fn state_action(&self) -> &[QuadRow] {
        &self.state_action
    }

    pub fn state_action_bound(&self) -> f64 {
        self.state_action_bound
    }

    pub fn state_only(&self) -> &[QuadRow] {
        &self.state_only
    }

    pub fn state_only_bound(&self) -> f64 {
        self.state_only_bound
    }

    pub fn terminal(&self) -> &SymMatrix {
        &self.terminal
    }

    pub fn terminal_bound(&self) -> f64 {
        self.terminal_bound
    }
}

/// Diagonal covariance band `floor <= Sigma_w <= gamma * Sigma_hat`, stored
/// through its diagonals. The floor keeps every member strictly positive
/// definite; it is pinned at `FLOOR_FACTOR` times the upper edge.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguitySet {
    sigma_hat: DVector<f64>,
    gamma: f64,
    floor: DVector<f64>,
}

impl AmbiguitySet {
    pub fn new(sigma_hat: DVector<f64>, gamma: f64) -> Result<Self, Error> {
        if sigma_hat.is_empty() {
            return Err(Error::BadAmbiguity("need at least one noise channel".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::BadAmbiguity(format!("inflation must be positive, got {gamma}")));
        }
        for (j, s) in sigma_hat.iter().enumerate() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::BadAmbiguity(format!(
                    "channel {j} variance must be positive, got {s}"
                )));
            }
        }
        let floor = sigma_hat.map(|s| FLOOR_FACTOR * gamma * s);
        Ok(Self { sigma_hat, gamma, floor })
    }

    pub fn channels(&self) -> usize {
        self.sigma_hat.len()
    }

    pub fn sigma_hat(&self) -> &DVector<f64> {
        &self.sigma_hat
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn floor(&self) -> &DVector<f64> {
        &self.floor
    }

    /// The band's upper corner, which dominates every member elementwise.
    pub fn corner(&self) -> DVector<f64> {
        self.sigma_hat.map(|s| self.gamma * s)
    }

    /// Membership of a diagonal covariance, with relative slack.
    pub fn contains(&self, sigma: &DVector<f64>) -> bool {
        sigma.len() == self.channels()
            && sigma.iter().enumerate().all(|(j, s)| {
                let hi = self.gamma * self.sigma_hat[j];
                let slack = MEMBER_TOL * (1.0 + hi);
                *s >= self.floor[j] - slack && *s <= hi + slack
            })
    }

    /// Uniform draw from the band, one independent coordinate per channel.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.channels(), |j, _| {
            rng.random_range(self.floor[j]..self.gamma * self.sigma_hat[j])
        })
    }
}

/// Full problem description: dynamics, cost, expectation constraints, and
/// the covariance band the noise distribution is only known to lie in.
#[derive(Debug, Clone, PartialEq)]
pub struct DrmpcSpec {
    model: SystemModel,
    cost: CostSpec,
    constraints: ConstraintSpec,
    ambiguity: AmbiguitySet,
}

impl DrmpcSpec {
    pub fn new(
        model: SystemModel,
        cost: CostSpec,
        constraints: ConstraintSpec,
        ambiguity: AmbiguitySet,
    ) -> Result<Self, Error> {
        let (d, m, q) = (model.state_dim(), model.input_dim(), model.channels());
        if cost.state_weight().order() != d || cost.input_weight().order() != m {
            return Err(Error::BadSpec(format!(
                "cost weights have orders {} and {} but the model is {d}x{m}",
                cost.state_weight().order(),
                cost.input_weight().order()
            )));
        }
        for (l, row) in constraints.state_action().iter().enumerate() {
            if row.weight.order() != d + m {
                return Err(Error::BadSpec(format!(
                    "state-action row {l} has order {} but the model needs {}",
                    row.weight.order(),
                    d + m
                )));
            }
        }
        for (l, row) in constraints.state_only().iter().enumerate() {
            if row.weight.order() != d {
                return Err(Error::BadSpec(format!(
                    "state-only row {l} has order {} but the state dimension is {d}",
                    row.weight.order()
                )));
            }
        }
        if constraints.terminal().order() != d {
            return Err(Error::BadSpec(format!(
                "terminal constraint has order {} but the state dimension is {d}",
                constraints.terminal().order()
            )));
        }
        if ambiguity.channels() != q {
            return Err(Error::BadSpec(format!(
                "ambiguity set has {} channels but the model has {q}",
                ambiguity.channels()
            )));
        }
        Ok(Self { model, cost, constraints, ambiguity })
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn constraints(&self) -> &ConstraintSpec {
        &self.constraints
    }

    pub fn ambiguity(&self) -> &AmbiguitySet {
        &self.ambiguity
    }

    pub fn layout(&self) -> StageLayout {
        StageLayout::new(self.model.state_dim(), self.model.input_dim(), self.cost.horizon())
    }

    /// Total decision dimension of the lifted program; also the default
    /// covariance-tuple length of the outer search.
    pub fn decision_dim(&self) -> usize {
        self.layout().total()
    }

    fn check_initial_state(&self, x0: &DVector<f64>) -> Result<(), Error> {
        if x0.len() != self.model.state_dim() {
            return Err(Error::BadSpec(format!(
                "initial state has length {} but the state dimension is {}",
                x0.len(),
                self.model.state_dim()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadSpec("initial state has a non-finite entry".into()));
        }
        Ok(())
    }
}

/// Packing of the lifted decision variables into one flat vector:
/// the epigraph scalar, then per-stage inputs, means, covariances, gain
/// products and moment bounds, then the terminal state moment bound.
/// The measured-state quantities (`mu_0 = x0`, `Sigma_0 = 0`, `U_0 = 0`)
/// are constants, not variables.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLayout {
    state_dim: usize,
    input_dim: usize,
    horizon: usize,
    ubar0: usize,
    mu0: usize,
    sigma0: usize,
    umat0: usize,
    pmat0: usize,
    pxn0: usize,
    total: usize,
}

impl StageLayout {
    pub fn new(state_dim: usize, input_dim: usize, horizon: usize) -> Self {
        assert!(state_dim >= 1 && input_dim >= 1 && horizon >= 1);
        let (d, m, n) = (state_dim, input_dim, horizon);
        let ubar0 = 1;
        let mu0 = ubar0 + n * m;
        let sigma0 = mu0 + n * d;
        let umat0 = sigma0 + n * packed_len(d);
        let pmat0 = umat0 + (n - 1) * m * d;
        let pxn0 = pmat0 + n * packed_len(d + m);
        let total = pxn0 + packed_len(d);
        Self { state_dim, input_dim, horizon, ubar0, mu0, sigma0, umat0, pmat0, pxn0, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Epigraph scalar bounding the total expected cost.
    pub fn r0(&self) -> usize {
        0
    }

    /// Nominal input `ubar_t[k]`, `t = 0..N-1`.
    pub fn ubar(&self, t: usize, k: usize) -> usize {
        assert!(t < self.horizon && k < self.input_dim);
        self.ubar0 + t * self.input_dim + k
    }

    /// State mean `mu_t[i]`, `t = 1..=N`.
    pub fn mu(&self, t: usize, i: usize) -> usize {
        assert!((1..=self.horizon).contains(&t) && i < self.state_dim);
        self.mu0 + (t - 1) * self.state_dim + i
    }

    /// State covariance entry `Sigma_t[i, j]`, `t = 1..=N`, packed.
    pub fn sigma(&self, t: usize, i: usize, j: usize) -> usize {
        assert!((1..=self.horizon).contains(&t));
        self.sigma0 + (t - 1) * packed_len(self.state_dim) + packed_index(self.state_dim, i, j)
    }

    /// Gain product entry `U_t[r, c] = (K_t Sigma_t)[r, c]`, `t = 1..N-1`.
    pub fn umat(&self, t: usize, r: usize, c: usize) -> usize {
        assert!((1..self.horizon).contains(&t) && r < self.input_dim && c < self.state_dim);
        self.umat0 + (t - 1) * self.input_dim * self.state_dim + r * self.state_dim + c
    }

    /// State-action second-moment bound entry `P_t[i, j]`, `t = 0..N-1`,
    /// packed over order `d + m`.
    pub fn pmat(&self, t: usize, i: usize, j: usize) -> usize {
        assert!(t < self.horizon);
        self.pmat0
            + t * packed_len(self.state_dim + self.input_dim)
            + packed_index(self.state_dim + self.input_dim, i, j)
    }

    /// Terminal state second-moment bound entry `Px_N[i, j]`, packed.
    pub fn pxn(&self, i: usize, j: usize) -> usize {
        self.pxn0 + packed_index(self.state_dim, i, j)
    }
}

/// Decoded solution of the lifted program, with the measured-state constants
/// (`mu[0] = x0`, `sigma[0] = 0`, `umat[0] = 0`) materialized so consumers
/// can index uniformly by stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageVariables {
    pub r0: f64,
    /// Nominal inputs, `t = 0..N-1`.
    pub ubar: Vec<DVector<f64>>,
    /// State means, `t = 0..=N`.
    pub mu: Vec<DVector<f64>>,
    /// State covariances, `t = 0..=N`.
    pub sigma: Vec<SymMatrix>,
    /// Gain products `K_t Sigma_t`, `t = 0..N-1`; stage 0 is structurally 0.
    pub umat: Vec<DMatrix<f64>>,
    /// State-action second-moment bounds, `t = 0..N-1`.
    pub pmat: Vec<SymMatrix>,
    /// Terminal state second-moment bound.
    pub pxn: SymMatrix,
}

impl StageVariables {
    pub fn from_solution(layout: &StageLayout, z: &DVector<f64>, x0: &DVector<f64>) -> Self {
        let (d, m, n) = (layout.state_dim, layout.input_dim, layout.horizon);
        let ubar = (0..n)
            .map(|t| DVector::from_fn(m, |k, _| z[layout.ubar(t, k)]))
            .collect();
        let mut mu = vec![x0.clone()];
        mu.extend((1..=n).map(|t| DVector::from_fn(d, |i, _| z[layout.mu(t, i)])));
        let mut sigma = vec![SymMatrix::zeros(d)];
        sigma.extend((1..=n).map(|t| {
            let mut s = SymMatrix::zeros(d);
            for i in 0..d {
                for j in i..d {
                    s.set(i, j, z[layout.sigma(t, i, j)]);
                }
            }
            s
        }));
        let mut umat = vec![DMatrix::zeros(m, d)];
        umat.extend((1..n).map(|t| DMatrix::from_fn(m, d, |r, c| z[layout.umat(t, r, c)])));
        let pmat = (0..n)
            .map(|t| {
                let mut p = SymMatrix::zeros(d + m);
                for i in 0..d + m {
                    for j in i..d + m {
                        p.set(i, j, z[layout.pmat(t, i, j)]);
                    }
                }
                p
            })
            .collect();
        let mut pxn = SymMatrix::zeros(d);
        for i in 0..d {
            for j in i..d {
                pxn.set(i, j, z[layout.pxn(i, j)]);
            }
        }
        Self { r0: z[layout.r0()], ubar, mu, sigma, umat, pmat, pxn }
    }
}

/// Solved policy: the optimal lifted variables plus the recovered feedback
/// gains `K_t = U_t Sigma_t^-1` (`t = 1..N-1`; stage 0 has no feedback since
/// the state is measured exactly).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub value: f64,
    pub stages: StageVariables,
    /// Feedback gains, `t = 0..N-1`; stage 0 is structurally 0.
    pub gains: Vec<DMatrix<f64>>,
}

/// Result of one sampled relaxation: `Optimal` carries the decoded solution;
/// `Infeasible` means no policy satisfies the constraints from this initial
/// state (the value is `+inf`, the infimum over an empty set).
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationOutcome {
    pub value: f64,
    pub vars: Option<StageVariables>,
    pub status: SolveStatus,
}

/// One-step mean recursion `mu+ = A mu + B ubar`.
pub fn mean_propagate(model: &SystemModel, mu: &DVector<f64>, ubar: &DVector<f64>) -> DVector<f64> {
    assert_eq!(mu.len(), model.state_dim());
    assert_eq!(ubar.len(), model.input_dim());
    model.a() * mu + model.b() * ubar
}

/// One-step covariance recursion under the affine policy with gain `k` and
/// diagonal noise covariance `sigma_w`:
/// `Sigma+ = Abar Sigma Abar' + sum_j s_j (Cbar_j Sigma^-1 Cbar_j' + Dbar_j Dbar_j')`
/// with `Abar = A + B K`, `Cbar_j = (C_j + D_j K) Sigma`, `Dbar_j = C_j mu + D_j ubar`.
///
/// This is the exact recursion the stage LMIs certify from above; it serves
/// as the truth oracle in consistency checks.
pub fn covariance_propagate(
    model: &SystemModel,
    sigma: &SymMatrix,
    k: &DMatrix<f64>,
    ubar: &DVector<f64>,
    mu: &DVector<f64>,
    sigma_w: &DVector<f64>,
) -> Result<SymMatrix, Error> {
    let d = model.state_dim();
    assert_eq!(sigma.order(), d);
    assert_eq!(k.nrows(), model.input_dim());
    assert_eq!(k.ncols(), d);
    assert_eq!(sigma_w.len(), model.channels());
    let dense = sigma.to_dense();
    let eig = nalgebra::linalg::SymmetricEigen::try_new(dense.clone(), 1e-13, 120)
        .ok_or(crate::sym::EigenFailure { order: d })?;
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if min_eig <= 1e-12 * max_eig.max(1.0) {
        return Err(Error::SingularCovariance { min_eig });
    }
    let q = &eig.eigenvectors;
    let inv = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * q.transpose();
    let abar = model.a() + model.b() * k;
    let mut acc = &abar * &dense * abar.transpose();
    for j in 0..model.channels() {
        let cbar = (&model.state_noise()[j] + &model.input_noise()[j] * k) * &dense;
        acc += (&cbar * &inv * cbar.transpose()).scale(sigma_w[j]);
        let dbar = &model.state_noise()[j] * mu + &model.input_noise()[j] * ubar;
        acc += (&dbar * dbar.transpose()).scale(sigma_w[j]);
    }
    Ok(SymMatrix::from_dense(&acc))
}

/// Accumulates entries of one symmetric coefficient matrix; `add` writes a
/// symmetric pair at a time.
struct SymAccum(DMatrix<f64>);

impl SymAccum {
    fn new(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        self.0[(r, c)] += v;
        if r != c {
            self.0[(c, r)] += v;
        }
    }

    fn into_sym(self) -> SymMatrix {
        SymMatrix::from_dense(&self.0)
    }
}

fn accum<'a>(map: &'a mut BTreeMap<usize, SymAccum>, var: usize, order: usize) -> &'a mut SymAccum {
    map.entry(var).or_insert_with(|| SymAccum::new(order))
}

fn finish_block(f0: SymAccum, map: BTreeMap<usize, SymAccum>) -> LmiBlock {
    LmiBlock::new(f0.into_sym(), map.into_iter().map(|(i, a)| (i, a.into_sym())).collect())
}

/// Emits the covariance-recursion certificates at one noise covariance
/// `sigma_w`, one block per stage.
///
/// For `t >= 1` the block is the arrow matrix with diagonal
/// `(Sigma_{t+1}, Sigma_t, Sigma_t per channel, 1 per channel)` and first
/// block column `(A Sigma_t + B U_t, s_j^(1/2) (C_j Sigma_t + D_j U_t),
/// s_j^(1/2) (C_j mu_t + D_j ubar_t))'`; its Schur complement against the
/// trailing diagonal is exactly `Sigma_{t+1} - [covariance_propagate]`. For
/// `t = 0` the measured state kills every `Sigma_0` term and the block
/// reduces to `[[Sigma_1, s_j^(1/2) Dbar_{j,0}], [., I]]`.
pub fn build_stage_lmis(
    model: &SystemModel,
    layout: &StageLayout,
    x0: &DVector<f64>,
    sigma_w: &DVector<f64>,
) -> Vec<LmiBlock> {
    let (d, m, q) = (model.state_dim(), model.input_dim(), model.channels());
    let n = layout.horizon();
    let sqrt_s: Vec<f64> = sigma_w.iter().map(|s| s.sqrt()).collect();
    let mut blocks = Vec::with_capacity(n);

    // Stage 0: only the mean-driven noise terms survive.
    {
        let order = d + q;
        let mut f0 = SymAccum::new(order);
        let mut coeffs = BTreeMap::new();
        for j in 0..q {
            f0.add(d + j, d + j, 1.0);
            let cx = &model.state_noise()[j] * x0;
            for i in 0..d {
                f0.add(i, d + j, sqrt_s[j] * cx[i]);
                for k in 0..m {
                    accum(&mut coeffs, layout.ubar(0, k), order).add(
                        i,
                        d + j,
                        sqrt_s[j] * model.input_noise()[j][(i, k)],
                    );
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                accum(&mut coeffs, layout.sigma(1, a, b), order).add(a, b, 1.0);
            }
        }
        blocks.push(finish_block(f0, coeffs));
    }

    for t in 1..n {
        let order = 2 * d + q * d + q;
        let col_c = |j: usize| 2 * d + j * d;
        let col_d = |j: usize| 2 * d + q * d + j;
        let mut f0 = SymAccum::new(order);
        for j in 0..q {
            f0.add(col_d(j), col_d(j), 1.0);
        }
        let mut coeffs = BTreeMap::new();
        for a in 0..d {
            for b in a..d {
                let next = accum(&mut coeffs, layout.sigma(t + 1, a, b), order);
                next.add(a, b, 1.0);
                let cur = accum(&mut coeffs, layout.sigma(t, a, b), order);
                cur.add(d + a, d + b, 1.0);
                for j in 0..q {
                    cur.add(col_c(j) + a, col_c(j) + b, 1.0);
                }
                // The first block row is linear in Sigma_t as well:
                // (A Sigma_t)[i, k] and (C_j Sigma_t)[i, k].
                for i in 0..d {
                    cur.add(i, d + b, model.a()[(i, a)]);
                    if a != b {
                        cur.add(i, d + a, model.a()[(i, b)]);
                    }
                    for j in 0..q {
                        cur.add(i, col_c(j) + b, sqrt_s[j] * model.state_noise()[j][(i, a)]);
                        if a != b {
                            cur.add(i, col_c(j) + a, sqrt_s[j] * model.state_noise()[j][(i, b)]);
                        }
                    }
                }
            }
        }
        for r in 0..m {
            for c in 0..d {
                let u = accum(&mut coeffs, layout.umat(t, r, c), order);
                for i in 0..d {
                    u.add(i, d + c, model.b()[(i, r)]);
                    for j in 0..q {
                        u.add(i, col_c(j) + c, sqrt_s[j] * model.input_noise()[j][(i, r)]);
                    }
                }
            }
        }
        for s in 0..d {
            let mu = accum(&mut coeffs, layout.mu(t, s), order);
            for j in 0..q {
                for i in 0..d {
                    mu.add(i, col_d(j), sqrt_s[j] * model.state_noise()[j][(i, s)]);
                }
            }
        }
        for k in 0..m {
            let ub = accum(&mut coeffs, layout.ubar(t, k), order);
            for j in 0..q {
                for i in 0..d {
                    ub.add(i, col_d(j), sqrt_s[j] * model.input_noise()[j][(i, k)]);
                }
            }
        }
        blocks.push(finish_block(f0, coeffs));
    }
    blocks
}

/// Emits the second-moment dominance certificates: per stage
/// `[[P_t, G'], [G, blkdiag(Sigma_t, 1)]] >= 0` with
/// `G = [[Sigma_t, U_t'], [mu_t', ubar_t']]`, whose Schur complement bounds
/// `P_t` above the second moment of the state-action vector; the stage-0
/// block collapses (measured state) to `[[P_0, (x0; ubar_0)], [., 1]]`; and
/// the terminal block `[[Px_N - Sigma_N, mu_N], [., 1]]`.
pub fn build_moment_lmis(layout: &StageLayout, x0: &DVector<f64>) -> Vec<LmiBlock> {
    let (d, m, n) = (layout.state_dim, layout.input_dim, layout.horizon);
    let mut blocks = Vec::with_capacity(n + 1);

    // Stage 0, reduced: P_0 >= (x0; ubar_0)(x0; ubar_0)'.
    {
        let order = d + m + 1;
        let mut f0 = SymAccum::new(order);
        f0.add(d + m, d + m, 1.0);
        for i in 0..d {
            f0.add(i, d + m, x0[i]);
        }
        let mut coeffs = BTreeMap::new();
        for a in 0..d + m {
            for b in a..d + m {
                accum(&mut coeffs, layout.pmat(0, a, b), order).add(a, b, 1.0);
            }
        }
        for k in 0..m {
            accum(&mut coeffs, layout.ubar(0, k), order).add(d + k, d + m, 1.0);
        }
        blocks.push(finish_block(f0, coeffs));
    }

    for t in 1..n {
        let order = 2 * d + m + 1;
        let mut f0 = SymAccum::new(order);
        f0.add(2 * d + m, 2 * d + m, 1.0);
        let mut coeffs = BTreeMap::new();
        for a in 0..d + m {
            for b in a..d + m {
                accum(&mut coeffs, layout.pmat(t, a, b), order).add(a, b, 1.0);
            }
        }
        for a in 0..d {
            for b in a..d {
                let s = accum(&mut coeffs, layout.sigma(t, a, b), order);
                // Inside G (both symmetric images land in distinct slots)
                // and inside the trailing diagonal.
                s.add(d + m + a, b, 1.0);
                if a != b {
                    s.add(d + m + b, a, 1.0);
                }
                s.add(d + m + a, d + m + b, 1.0);
            }
        }
        for r in 0..m {
            for c in 0..d {
                accum(&mut coeffs, layout.umat(t, r, c), order).add(d + m + c, d + r, 1.0);
            }
        }
        for i in 0..d {
            accum(&mut coeffs, layout.mu(t, i), order).add(2 * d + m, i, 1.0);
        }
        for k in 0..m {
            accum(&mut coeffs, layout.ubar(t, k), order).add(2 * d + m, d + k, 1.0);
        }
        blocks.push(finish_block(f0, coeffs));
    }

    // Terminal: Px_N >= Sigma_N + mu_N mu_N'.
    {
        let order = d + 1;
        let mut f0 = SymAccum::new(order);
        f0.add(d, d, 1.0);
        let mut coeffs = BTreeMap::new();
        for a in 0..d {
            for b in a..d {
                accum(&mut coeffs, layout.pxn(a, b), order).add(a, b, 1.0);
                accum(&mut coeffs, layout.sigma(n, a, b), order).add(a, b, -1.0);
            }
        }
        for i in 0..d {
            accum(&mut coeffs, layout.mu(n, i), order).add(i, d, 1.0);
        }
        blocks.push(finish_block(f0, coeffs));
    }
    blocks
}

/// Linear coefficients of `P -> trace(W P)` over packed variables addressed
/// through `var(i, j)`; off-diagonal entries carry weight 2.
fn trace_coeffs(w: &SymMatrix, var: impl Fn(usize, usize) -> usize, out: &mut Vec<(usize, f64)>) {
    let n = w.order();
    for i in 0..n {
        for j in i..n {
            let v = if i == j { w.get(i, i) } else { 2.0 * w.get(i, j) };
            if v != 0.0 {
                out.push((var(i, j), v));
            }
        }
    }
}

/// Emits every scalar inequality: the expectation constraints over the
/// moment bounds, the terminal second-moment cap, the cost epigraph
/// `sum_t trace(blkdiag(Q, R) P_t) + trace(S Px_N) <= r0`, and `r0 >= 0`.
pub fn build_trace_constraints(
    cost: &CostSpec,
    constraints: &ConstraintSpec,
    layout: &StageLayout,
) -> Vec<LinearRow> {
    let (d, m, n) = (layout.state_dim, layout.input_dim, layout.horizon);
    let mut rows = Vec::new();

    for t in 1..n {
        for row in constraints.state_action() {
            let mut coeffs = Vec::new();
            trace_coeffs(&row.weight, |i, j| layout.pmat(t, i, j), &mut coeffs);
            for i in 0..d {
                if row.linear[i] != 0.0 {
                    coeffs.push((layout.mu(t, i), row.linear[i]));
                }
            }
            for k in 0..m {
                if row.linear[d + k] != 0.0 {
                    coeffs.push((layout.ubar(t, k), row.linear[d + k]));
                }
            }
            rows.push(LinearRow::new(coeffs, constraints.state_action_bound()));
        }
    }

    for t in 1..=n {
        for row in constraints.state_only() {
            let mut coeffs = Vec::new();
            if t < n {
                trace_coeffs(&row.weight, |i, j| layout.pmat(t, i, j), &mut coeffs);
            } else {
                trace_coeffs(&row.weight, |i, j| layout.pxn(i, j), &mut coeffs);
            }
            for i in 0..d {
                if row.linear[i] != 0.0 {
                    coeffs.push((layout.mu(t, i), row.linear[i]));
                }
            }
            rows.push(LinearRow::new(coeffs, constraints.state_only_bound()));
        }
    }

    let mut terminal = Vec::new();
    trace_coeffs(constraints.terminal(), |i, j| layout.pxn(i, j), &mut terminal);
    rows.push(LinearRow::new(terminal, constraints.terminal_bound()));

    let mut epigraph = Vec::new();
    for t in 0..n {
        trace_coeffs(cost.state_weight(), |i, j| layout.pmat(t, i, j), &mut epigraph);
        trace_coeffs(cost.input_weight(), |i, j| layout.pmat(t, d + i, d + j), &mut epigraph);
    }
    trace_coeffs(cost.terminal_weight(), |i, j| layout.pxn(i, j), &mut epigraph);
    epigraph.push((layout.r0(), -1.0));
    rows.push(LinearRow::new(epigraph, 0.0));

    rows.push(LinearRow::new(vec![(layout.r0(), -1.0)], 0.0));
    rows
}

/// Equality rows pinning the mean plan to the recursion
/// `mu_{t+1} = A mu_t + B ubar_t` (with `mu_0 = x0` folded into constants).
fn mean_rows(model: &SystemModel, layout: &StageLayout, x0: &DVector<f64>) -> Vec<LinearRow> {
    let (d, m, n) = (model.state_dim(), model.input_dim(), layout.horizon());
    let mut rows = Vec::with_capacity(n * d);
    for t in 0..n {
        for i in 0..d {
            let mut coeffs = vec![(layout.mu(t + 1, i), 1.0)];
            let mut rhs = 0.0;
            if t == 0 {
                rhs = (model.a() * x0)[i];
            } else {
                for s in 0..d {
                    if model.a()[(i, s)] != 0.0 {
                        coeffs.push((layout.mu(t, s), -model.a()[(i, s)]));
                    }
                }
            }
            for k in 0..m {
                if model.b()[(i, k)] != 0.0 {
                    coeffs.push((layout.ubar(t, k), -model.b()[(i, k)]));
                }
            }
            rows.push(LinearRow::new(coeffs, rhs));
        }
    }
    rows
}

/// Covariance floors `Sigma_t >= EPS_STRICT * I`, `t = 1..=N`.
fn covariance_floors(layout: &StageLayout) -> Vec<LmiBlock> {
    let (d, n) = (layout.state_dim, layout.horizon);
    (1..=n)
        .map(|t| {
            let mut f0 = SymMatrix::zeros(d);
            for i in 0..d {
                f0.set(i, i, -EPS_STRICT);
            }
            let mut coeffs = Vec::with_capacity(packed_len(d));
            for a in 0..d {
                for b in a..d {
                    let mut e = SymMatrix::zeros(d);
                    e.set(a, b, 1.0);
                    coeffs.push((layout.sigma(t, a, b), e));
                }
            }
            LmiBlock::new(f0, coeffs)
        })
        .collect()
}

/// Assembles the full lifted program at the given covariance samples. The
/// covariance-independent constraints appear once; the stage LMIs are
/// instantiated per distinct sample over the shared decision variables
/// (exact duplicates add nothing to the feasible set and are skipped).
pub fn assemble_program(
    spec: &DrmpcSpec,
    x0: &DVector<f64>,
    samples: &[DVector<f64>],
) -> ConicProgram {
    let layout = spec.layout();
    let mut prog = ConicProgram::new(layout.total());
    prog.objective[layout.r0()] = 1.0;
    prog.equalities = mean_rows(spec.model(), &layout, x0);
    prog.inequalities = build_trace_constraints(spec.cost(), spec.constraints(), &layout);
    prog.lmi_blocks = build_moment_lmis(&layout, x0);
    prog.lmi_blocks.extend(covariance_floors(&layout));
    let mut seen: Vec<&DVector<f64>> = Vec::new();
    for s in samples {
        if seen.iter().any(|t| *t == s) {
            continue;
        }
        seen.push(s);
        prog.lmi_blocks.extend(build_stage_lmis(spec.model(), &layout, x0, s));
    }
    prog
}

/// Solves the relaxation at one covariance sample list and returns its value
/// together with the decoded solution. Infeasibility is reported in-band
/// (the initial state admits no policy); numerical failure is an error.
pub fn eval_relaxation(
    spec: &DrmpcSpec,
    x0: &DVector<f64>,
    samples: &[DVector<f64>],
    opts: &SolverOptions,
) -> Result<RelaxationOutcome, Error> {
    spec.check_initial_state(x0)?;
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    for (index, s) in samples.iter().enumerate() {
        if !spec.ambiguity().contains(s) {
            return Err(Error::SampleOutsideSet { index });
        }
    }
    let prog = assemble_program(spec, x0, samples);
    let res = sdp::solve(&prog, opts)?;
    match res.status {
        SolveStatus::Optimal => Ok(RelaxationOutcome {
            value: res.value,
            vars: Some(StageVariables::from_solution(&spec.layout(), &res.z, x0)),
            status: SolveStatus::Optimal,
        }),
        SolveStatus::Infeasible => Ok(RelaxationOutcome {
            value: f64::INFINITY,
            vars: None,
            status: SolveStatus::Infeasible,
        }),
        SolveStatus::Unbounded | SolveStatus::NumericalFailure => {
            // The epigraph is bounded below by zero, so an unbounded status
            // can only be a numerical artifact.
            Err(Error::Numerical { achieved: res.achieved_tol, iterations: res.iterations })
        }
    }
}

/// Recovers the feedback gain `K = U Sigma^-1` at one stage, refusing when
/// the covariance is too ill-conditioned for the product to be trustworthy.
pub fn recover_gains(sigma: &SymMatrix, u: &DMatrix<f64>, stage: usize) -> Result<DMatrix<f64>, Error> {
    let d = sigma.order();
    assert_eq!(u.ncols(), d);
    let eig = nalgebra::linalg::SymmetricEigen::try_new(sigma.to_dense(), 1e-13, 120)
        .ok_or(crate::sym::EigenFailure { order: d })?;
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if min_eig <= 0.0 || max_eig / min_eig > COND_LIMIT {
        let cond = if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY };
        return Err(Error::IllConditioned { stage, cond });
    }
    let q = &eig.eigenvectors;
    let inv = q * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * q.transpose();
    Ok(u * inv)
}

/// Diagonal second-moment estimate `diag((1/n) sum_i xi_i xi_i')` of the
/// noise samples. The noise model is zero-mean, so no centering is applied.
pub fn empirical_covariance(samples: &[DVector<f64>]) -> Result<DVector<f64>, Error> {
    let Some(first) = samples.first() else {
        return Err(Error::NoSamples);
    };
    let q = first.len();
    let mut acc = DVector::zeros(q);
    for (i, s) in samples.iter().enumerate() {
        if s.len() != q {
            return Err(Error::BadAmbiguity(format!(
                "noise sample {i} has length {} but the first has {q}",
                s.len()
            )));
        }
        for j in 0..q {
            acc[j] += s[j] * s[j];
        }
    }
    Ok(acc / samples.len() as f64)
}

/// Randomized outer maximization of the relaxation value over covariance
/// tuples. Iteration 0 deterministically evaluates the band's upper corner
/// (the analytic worst case for a diagonal band, which the sampled search
/// should never underperform); later iterations draw tuples of
/// [`DrmpcSpec::decision_dim`] independent members. The best feasible
/// solution wins; its gains are recovered stage by stage.
pub fn solve_drmpc(
    spec: &DrmpcSpec,
    x0: &DVector<f64>,
    budget: &SearchBudget,
    opts: &SolverOptions,
    rng: &mut impl Rng,
) -> Result<PolicyParams, Error> {
    solve_drmpc_seeded(spec, x0, budget, opts, None, rng).map(|(policy, _)| policy)
}

/// [`solve_drmpc`] with an optional extra candidate tuple evaluated right
/// after the corner, and the winning tuple returned alongside the policy.
/// A receding-horizon caller threads the winner into the next step's solve;
/// the warm candidate never changes what the search can return, only which
/// tuple gets evaluated on iteration 1.
pub fn solve_drmpc_seeded(
    spec: &DrmpcSpec,
    x0: &DVector<f64>,
    budget: &SearchBudget,
    opts: &SolverOptions,
    warm: Option<&[DVector<f64>]>,
    rng: &mut impl Rng,
) -> Result<(PolicyParams, Vec<DVector<f64>>), Error> {
    assert!(budget.max_iters >= 1, "need at least one iteration");
    spec.check_initial_state(x0)?;
    let nbar = spec.decision_dim();
    let corner = vec![spec.ambiguity().corner()];
    // A warm candidate that is empty or just the corner again adds nothing.
    let warm: Option<Vec<DVector<f64>>> = warm
        .filter(|w| !w.is_empty() && *w != corner.as_slice())
        .map(<[DVector<f64>]>::to_vec);
    let mut best: Option<(f64, StageVariables, Vec<DVector<f64>>)> = None;
    let mut streak = 0usize;
    let mut saw_infeasible = false;
    let mut last_failure: Option<Error> = None;
    let mut attempts = 0usize;
    for iter in 0..budget.max_iters {
        let tuple: Vec<DVector<f64>> = if iter == 0 {
            corner.clone()
        } else if let (1, Some(w)) = (iter, &warm) {
            w.clone()
        } else {
            (0..nbar).map(|_| spec.ambiguity().sample(rng)).collect()
        };
        attempts += 1;
        match eval_relaxation(spec, x0, &tuple, opts) {
            Ok(out) => match out.status {
                SolveStatus::Optimal => {
                    let improved = best
                        .as_ref()
                        .is_none_or(|(v, _, _)| out.value > v + budget.min_improvement);
                    if best.as_ref().is_none_or(|(v, _, _)| out.value > *v) {
                        best = Some((
                            out.value,
                            out.vars.expect("solution present at optimal"),
                            tuple,
                        ));
                    }
                    if improved {
                        streak = 0;
                    } else {
                        streak += 1;
                    }
                }
                _ => {
                    saw_infeasible = true;
                    streak += 1;
                }
            },
            Err(e @ Error::Numerical { .. }) => {
                last_failure = Some(e);
                streak += 1;
            }
            Err(e) => return Err(e),
        }
        if streak > budget.patience {
            break;
        }
    }
    let Some((value, stages, tuple)) = best else {
        return if saw_infeasible {
            Err(Error::Infeasible)
        } else {
            Err(last_failure.unwrap_or(Error::AllSamplesFailed { attempts }))
        };
    };
    let (m, d) = (spec.model().input_dim(), spec.model().state_dim());
    let mut gains = vec![DMatrix::zeros(m, d)];
    for t in 1..spec.cost().horizon() {
        gains.push(recover_gains(&stages.sigma[t], &stages.umat[t], t)?);
    }
    Ok((PolicyParams { value, stages, gains }, tuple))
}
