//! Semi-infinite SDPs: minimize `<C, X>` subject to `<A, X> <= b` for every
//! `A` in a compact index set `U` and `X >= 0`, with the cone membership
//! expressed through `v' X v >= 0` over the unit ball.
//!
//! The finite surrogate replaces both infinite families by a sampled tuple of
//! `(A, v)` pairs; its optimum `G` never exceeds the true value, and the outer
//! search keeps the running maximum of `G` over independently drawn tuples.
//! [`solve_sisdp`] is that search; [`verify_feasibility`] is the a posteriori
//! check that the winning iterate is near-feasible for the full family.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::sdp::{self, ConicProgram, LinearRow, SolveStatus, SolverOptions};
use crate::sym::{packed_index, packed_len, SymMatrix};

/// Relative tolerance for index-set membership checks.
const MEMBER_TOL: f64 = 1e-9;
/// Samples evaluated per parallel round. Fixed (not thread-count dependent)
/// so the consumed sample order, and with it every output, is identical
/// across machines.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("malformed problem: {0}")]
    BadProblem(String),
    #[error("tuple entry {index} is invalid: {reason}")]
    BadTupleEntry { index: usize, reason: String },
    #[error("tuple has {got} entries but the decision space needs at least {need}")]
    TupleTooShort { got: usize, need: usize },
    #[error("a sampled relaxation is infeasible, so the full constraint family is too")]
    RelaxationInfeasible,
    #[error("relaxation solve failed numerically after {iterations} iterations (tol {achieved:.3e})")]
    Numerical { achieved: f64, iterations: usize },
    #[error("every sampled relaxation failed numerically ({attempts} attempts)")]
    AllSamplesFailed { attempts: usize },
    #[error(transparent)]
    Program(#[from] sdp::Error),
}

/// Compact constraint index set. Each variant supports uniform sampling,
/// membership testing and a deterministic evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub enum IndexSetDescriptor {
    /// Explicit finite family.
    FiniteList(Vec<SymMatrix>),
    /// Elementwise interval `lower <= A <= upper` on symmetric matrices.
    MatrixBox { lower: SymMatrix, upper: SymMatrix },
    /// Convex segment `(1 - t) A0 + t A1`, `t` in `[0, 1]`.
    Segment { a0: SymMatrix, a1: SymMatrix },
}

impl IndexSetDescriptor {
    fn validate(&self, n: usize) -> Result<(), Error> {
        match self {
            Self::FiniteList(members) => {
                if members.is_empty() {
                    return Err(Error::BadProblem("finite index set has no members".into()));
                }
                for (k, m) in members.iter().enumerate() {
                    if m.order() != n {
                        return Err(Error::BadProblem(format!(
                            "index-set member {k} has order {} but the problem has order {n}",
                            m.order()
                        )));
                    }
                }
            }
            Self::MatrixBox { lower, upper } => {
                if lower.order() != n || upper.order() != n {
                    return Err(Error::BadProblem(format!(
                        "box bounds have orders {} and {} but the problem has order {n}",
                        lower.order(),
                        upper.order()
                    )));
                }
                for (lo, hi) in lower.packed().iter().zip(upper.packed()) {
                    if lo > hi {
                        return Err(Error::BadProblem(
                            "box lower bound exceeds upper bound".into(),
                        ));
                    }
                }
            }
            Self::Segment { a0, a1 } => {
                if a0.order() != n || a1.order() != n {
                    return Err(Error::BadProblem(format!(
                        "segment endpoints have orders {} and {} but the problem has order {n}",
                        a0.order(),
                        a1.order()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Membership at tolerance `MEMBER_TOL`, relative to the set's own scale.
    pub fn contains(&self, a: &SymMatrix) -> bool {
        match self {
            Self::FiniteList(members) => members.iter().any(|m| {
                a.order() == m.order()
                    && a.packed()
                        .iter()
                        .zip(m.packed())
                        .all(|(x, y)| (x - y).abs() <= MEMBER_TOL * (1.0 + y.abs()))
            }),
            Self::MatrixBox { lower, upper } => {
                a.order() == lower.order()
                    && a.packed().iter().zip(lower.packed().iter().zip(upper.packed())).all(
                        |(x, (lo, hi))| {
                            let slack = MEMBER_TOL * (1.0 + hi.abs().max(lo.abs()));
                            *x >= lo - slack && *x <= hi + slack
                        },
                    )
            }
            Self::Segment { a0, a1 } => {
                if a.order() != a0.order() {
                    return false;
                }
                // Project onto the segment and check the residual.
                let dir = a1.axpy(-1.0, a0);
                let len2 = dir.dot(&dir);
                let t = if len2 > 0.0 {
                    (a.axpy(-1.0, a0).dot(&dir) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let proj = a0.axpy(t, &dir);
                let scale = 1.0 + a0.norm_fro().max(a1.norm_fro());
                a.axpy(-1.0, &proj).norm_fro() <= MEMBER_TOL * scale
            }
        }
    }

    /// One uniform draw from the set.
    fn sample(&self, rng: &mut impl Rng) -> SymMatrix {
        match self {
            Self::FiniteList(members) => members[rng.random_range(0..members.len())].clone(),
            Self::MatrixBox { lower, upper } => {
                let n = lower.order();
                let data: Vec<f64> = lower
                    .packed()
                    .iter()
                    .zip(upper.packed())
                    .map(|(lo, hi)| if lo < hi { rng.random_range(*lo..*hi) } else { *lo })
                    .collect();
                SymMatrix::from_packed(n, &data)
            }
            Self::Segment { a0, a1 } => {
                let t: f64 = rng.random();
                a0.scale(1.0 - t).axpy(t, a1)
            }
        }
    }

    /// Deterministic grid with roughly `density` points for the continuous
    /// variants. The box collapses to its extreme corners plus midpoint: a
    /// linear functional attains its maximum over the box at a corner, and
    /// [`verify_feasibility`] picks the exact maximizing corner separately.
    fn grid(&self, density: usize) -> Vec<SymMatrix> {
        match self {
            Self::FiniteList(members) => members.clone(),
            Self::MatrixBox { lower, upper } => {
                let mid = lower.scale(0.5).axpy(0.5, upper);
                vec![lower.clone(), mid, upper.clone()]
            }
            Self::Segment { a0, a1 } => {
                let k = density.max(2);
                (0..k)
                    .map(|i| {
                        let t = i as f64 / (k - 1) as f64;
                        a0.scale(1.0 - t).axpy(t, a1)
                    })
                    .collect()
            }
        }
    }

    /// The exact maximum of `<A, X>` over the set, by variant structure:
    /// finite sets by enumeration, boxes by the sign-matched corner, segments
    /// by endpoint comparison (the functional is linear in `A`).
    fn max_inner_product(&self, x: &SymMatrix) -> f64 {
        match self {
            Self::FiniteList(members) => {
                members.iter().map(|m| m.dot(x)).fold(f64::NEG_INFINITY, f64::max)
            }
            Self::MatrixBox { lower, upper } => {
                let n = lower.order();
                let mut acc = 0.0;
                for i in 0..n {
                    for j in i..n {
                        let mult = if i == j { 1.0 } else { 2.0 };
                        let c = mult * x.get(i, j);
                        let a = if c >= 0.0 { upper.get(i, j) } else { lower.get(i, j) };
                        acc += c * a;
                    }
                }
                acc
            }
            Self::Segment { a0, a1 } => a0.dot(x).max(a1.dot(x)),
        }
    }
}

/// A semi-infinite SDP instance: cost `C`, shared bound `b` and the
/// constraint index set.
#[derive(Debug, Clone, PartialEq)]
pub struct SisdpProblem {
    n: usize,
    c: SymMatrix,
    b: f64,
    index_set: IndexSetDescriptor,
}

impl SisdpProblem {
    pub fn new(c: SymMatrix, b: f64, index_set: IndexSetDescriptor) -> Result<Self, Error> {
        let n = c.order();
        if n == 0 {
            return Err(Error::BadProblem("order must be at least 1".into()));
        }
        if !b.is_finite() {
            return Err(Error::BadProblem("bound must be finite".into()));
        }
        index_set.validate(n)?;
        Ok(Self { n, c, b, index_set })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn cost(&self) -> &SymMatrix {
        &self.c
    }

    pub fn bound(&self) -> f64 {
        self.b
    }

    pub fn index_set(&self) -> &IndexSetDescriptor {
        &self.index_set
    }

    /// Dimension of the decision space: the free entries of a symmetric
    /// matrix of this order, `n (n + 1) / 2`. Also the default tuple length.
    pub fn decision_dim(&self) -> usize {
        packed_len(self.n)
    }

    /// Strict-feasibility probe: maximizes `t` such that `<A, X> <= b - t`
    /// over a coarse grid of the index set and `X >= t I`. A positive margin
    /// certifies an interior feasible point for the gridded family; callers
    /// treat a nonpositive margin as a warning, not an error, because the
    /// grid both under- and over-approximates nothing binding.
    pub fn slater_margin(&self, density: usize, opts: &SolverOptions) -> Result<f64, Error> {
        let dim = self.decision_dim();
        let t_var = dim;
        let mut prog = ConicProgram::new(dim + 1);
        prog.objective = vec![0.0; dim + 1];
        prog.objective[t_var] = -1.0;
        for a in self.index_set.grid(density) {
            let mut coeffs = inner_product_coeffs(&a);
            coeffs.push((t_var, 1.0));
            prog.inequalities.push(LinearRow::new(coeffs, self.b));
        }
        // Caps the margin so the probe is bounded even for exotic sets.
        prog.inequalities.push(LinearRow::new(vec![(t_var, 1.0)], 1.0 + self.b.abs()));
        let mut coeffs = packed_basis(self.n);
        let mut neg_i = SymMatrix::zeros(self.n);
        for i in 0..self.n {
            neg_i.set(i, i, -1.0);
        }
        coeffs.push((t_var, neg_i));
        prog.lmi_blocks.push(sdp::LmiBlock::new(SymMatrix::zeros(self.n), coeffs));
        let res = sdp::solve(&prog, opts)?;
        match res.status {
            SolveStatus::Optimal => Ok(-res.value),
            SolveStatus::Unbounded => Ok(1.0 + self.b.abs()),
            SolveStatus::Infeasible => Ok(f64::NEG_INFINITY),
            SolveStatus::NumericalFailure => {
                Err(Error::Numerical { achieved: res.achieved_tol, iterations: res.iterations })
            }
        }
    }
}

/// A sampled tuple of `(A, v)` pairs: `A` from the index set, `v` in the unit
/// ball. Valid tuples have at least `decision_dim` entries; longer tuples
/// only tighten the relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTuple {
    entries: Vec<(SymMatrix, DVector<f64>)>,
}

impl IndexTuple {
    pub fn new(
        problem: &SisdpProblem,
        entries: Vec<(SymMatrix, DVector<f64>)>,
    ) -> Result<Self, Error> {
        let need = problem.decision_dim();
        if entries.len() < need {
            return Err(Error::TupleTooShort { got: entries.len(), need });
        }
        for (index, (a, v)) in entries.iter().enumerate() {
            if a.order() != problem.n {
                return Err(Error::BadTupleEntry {
                    index,
                    reason: format!("matrix order {} does not match problem order {}", a.order(), problem.n),
                });
            }
            if v.len() != problem.n {
                return Err(Error::BadTupleEntry {
                    index,
                    reason: format!("vector length {} does not match problem order {}", v.len(), problem.n),
                });
            }
            if !problem.index_set.contains(a) {
                return Err(Error::BadTupleEntry {
                    index,
                    reason: "matrix lies outside the index set".into(),
                });
            }
            if v.norm() > 1.0 + 1e-12 {
                return Err(Error::BadTupleEntry {
                    index,
                    reason: format!("vector norm {} exceeds the unit ball", v.norm()),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(SymMatrix, DVector<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A copy with extra entries appended (validated against the problem).
    pub fn extended(
        &self,
        problem: &SisdpProblem,
        extra: Vec<(SymMatrix, DVector<f64>)>,
    ) -> Result<Self, Error> {
        let mut entries = self.entries.clone();
        entries.extend(extra);
        Self::new(problem, entries)
    }
}

/// The outcome of solving one sampled relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct GEvaluation {
    /// Relaxation optimum; `-inf` when the relaxation is unbounded below.
    pub value: f64,
    /// Minimizer, present when the value is finite.
    pub x: Option<SymMatrix>,
    pub status: SolveStatus,
}

/// Stopping policy for the outer search: a hard iteration budget plus a
/// patience window on improvements of the running maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchBudget {
    pub max_iters: usize,
    /// Consecutive samples without a `min_improvement` gain tolerated before
    /// stopping early.
    pub patience: usize,
    pub min_improvement: f64,
}

impl SearchBudget {
    pub fn new(max_iters: usize) -> Self {
        Self { max_iters, patience: 50, min_improvement: 1e-6 }
    }
}

/// Result of the outer search: the best sampled relaxation.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Best value seen; `-inf` when every evaluated sample was unbounded.
    pub value: f64,
    pub x: Option<SymMatrix>,
    /// Samples consumed, including ones that failed numerically.
    pub iterations: usize,
    /// Running maximum after each consumed sample (nondecreasing).
    pub history: Vec<f64>,
    /// `Optimal` when a finite best exists, `Unbounded` otherwise.
    pub status: SolveStatus,
}

/// Coefficients of `x -> <A, X>` over packed upper-triangle variables
/// (off-diagonal entries carry weight 2).
fn inner_product_coeffs(a: &SymMatrix) -> Vec<(usize, f64)> {
    let n = a.order();
    let mut coeffs = Vec::new();
    for i in 0..n {
        for j in i..n {
            let mult = if i == j { 1.0 } else { 2.0 };
            let c = mult * a.get(i, j);
            if c != 0.0 {
                coeffs.push((packed_index(n, i, j), c));
            }
        }
    }
    coeffs
}

/// LMI coefficients identifying the packed variables with a symmetric matrix:
/// variable `(i, j)` scales the basis matrix with ones at `(i, j)`, `(j, i)`.
fn packed_basis(n: usize) -> Vec<(usize, SymMatrix)> {
    let mut coeffs = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        for j in i..n {
            let mut e = SymMatrix::zeros(n);
            e.set(i, j, 1.0);
            coeffs.push((packed_index(n, i, j), e));
        }
    }
    coeffs
}

/// Transcribes the sampled relaxation: one `<A, X> <= b` row and one
/// `v' X v >= 0` row per tuple entry, objective `<C, X>`, no matrix cone
/// (the cone is represented only through the sampled `v` rows). Duplicate
/// entries produce duplicate rows.
pub fn build_relaxed_program(problem: &SisdpProblem, tuple: &IndexTuple) -> ConicProgram {
    let n = problem.n;
    let mut prog = ConicProgram::new(packed_len(n));
    let mut objective = vec![0.0; packed_len(n)];
    for i in 0..n {
        for j in i..n {
            let mult = if i == j { 1.0 } else { 2.0 };
            objective[packed_index(n, i, j)] = mult * problem.c.get(i, j);
        }
    }
    prog.objective = objective;
    for (a, v) in &tuple.entries {
        prog.inequalities.push(LinearRow::new(inner_product_coeffs(a), problem.b));
        // v' X v >= 0 as -(v' X v) <= 0.
        let mut coeffs = Vec::new();
        for i in 0..n {
            for j in i..n {
                let mult = if i == j { 1.0 } else { 2.0 };
                let c = -mult * v[i] * v[j];
                if c != 0.0 {
                    coeffs.push((packed_index(n, i, j), c));
                }
            }
        }
        prog.inequalities.push(LinearRow::new(coeffs, 0.0));
    }
    prog
}

/// Solves one sampled relaxation. Unbounded relaxations are legal and map to
/// `-inf`; an infeasible relaxation certifies the full problem infeasible
/// (the relaxed set contains the true feasible set) and surfaces as an error.
pub fn eval_g(
    problem: &SisdpProblem,
    tuple: &IndexTuple,
    opts: &SolverOptions,
) -> Result<GEvaluation, Error> {
    let prog = build_relaxed_program(problem, tuple);
    let res = sdp::solve(&prog, opts)?;
    match res.status {
        SolveStatus::Optimal => Ok(GEvaluation {
            value: res.value,
            x: Some(SymMatrix::from_packed(problem.n, res.z.as_slice())),
            status: res.status,
        }),
        SolveStatus::Unbounded => {
            Ok(GEvaluation { value: f64::NEG_INFINITY, x: None, status: res.status })
        }
        SolveStatus::Infeasible => Err(Error::RelaxationInfeasible),
        SolveStatus::NumericalFailure => {
            Err(Error::Numerical { achieved: res.achieved_tol, iterations: res.iterations })
        }
    }
}

/// Draws a tuple of `len` entries: matrices uniform over the index set,
/// vectors uniform over the unit ball (normal direction, radius `u^(1/n)`).
pub fn sample_index_tuple(
    problem: &SisdpProblem,
    len: usize,
    rng: &mut impl Rng,
) -> IndexTuple {
    assert!(
        len >= problem.decision_dim(),
        "tuple length {len} below the decision dimension {}",
        problem.decision_dim()
    );
    let n = problem.n;
    let entries = (0..len)
        .map(|_| {
            let a = problem.index_set.sample(rng);
            let v = loop {
                let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = dir.norm();
                if norm > 0.0 {
                    let radius: f64 = rng.random::<f64>().powf(1.0 / n as f64);
                    break dir * (radius / norm);
                }
            };
            (a, v)
        })
        .collect();
    IndexTuple { entries }
}

/// Random-search outer loop: samples tuples, evaluates each relaxation and
/// keeps the running maximum, stopping on the budget or the patience window.
///
/// Samples are evaluated in fixed-size parallel chunks but consumed in sample
/// order, so the outcome (including the stopping point) matches a sequential
/// run exactly. Individual numerical failures burn budget and are otherwise
/// skipped; a run where every sample fails is an error.
pub fn solve_sisdp(
    problem: &SisdpProblem,
    budget: &SearchBudget,
    tuple_len: usize,
    opts: &SolverOptions,
    rng: &mut impl Rng,
) -> Result<SearchOutcome, Error> {
    if budget.max_iters == 0 {
        return Err(Error::BadProblem("search budget must allow at least one iteration".into()));
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_x: Option<SymMatrix> = None;
    let mut any_evaluated = false;
    let mut history = Vec::new();
    let mut consumed = 0usize;
    let mut streak = 0usize;

    'outer: while consumed < budget.max_iters {
        let round = EVAL_CHUNK.min(budget.max_iters - consumed);
        let tuples: Vec<IndexTuple> =
            (0..round).map(|_| sample_index_tuple(problem, tuple_len, rng)).collect();
        let evals: Vec<Result<GEvaluation, Error>> =
            tuples.par_iter().map(|t| eval_g(problem, t, opts)).collect();
        for eval in evals {
            consumed += 1;
            match eval {
                Ok(g) => {
                    any_evaluated = true;
                    if g.value > best + budget.min_improvement {
                        streak = 0;
                    } else {
                        streak += 1;
                    }
                    if g.value > best {
                        best = g.value;
                        best_x = g.x;
                    }
                }
                Err(Error::RelaxationInfeasible) => return Err(Error::RelaxationInfeasible),
                Err(Error::Numerical { .. }) => streak += 1,
                Err(e) => return Err(e),
            }
            history.push(best);
            if streak > budget.patience || consumed == budget.max_iters {
                break 'outer;
            }
        }
    }

    if !any_evaluated {
        return Err(Error::AllSamplesFailed { attempts: consumed });
    }
    let status = if best.is_finite() { SolveStatus::Optimal } else { SolveStatus::Unbounded };
    Ok(SearchOutcome { value: best, x: best_x, iterations: consumed, history, status })
}

/// Worst-case constraint violation of `X` against the full family:
/// `max(0, max_A <A, X> - b, -lambda_min(X))`. The matrix maximum is exact
/// for every descriptor variant (enumeration, sign-matched box corner,
/// segment endpoints); `density` is accepted for symmetry with other grid
/// consumers and cross-checked against the segment grid.
pub fn verify_feasibility(x: &SymMatrix, problem: &SisdpProblem, density: usize) -> f64 {
    let mut worst = problem.index_set.max_inner_product(x) - problem.b;
    if let IndexSetDescriptor::Segment { .. } = problem.index_set {
        for a in problem.index_set.grid(density) {
            worst = worst.max(a.dot(x) - problem.b);
        }
    }
    let eig_term = match x.min_eig() {
        Ok(lmin) => -lmin,
        Err(_) => f64::INFINITY,
    };
    worst.max(eig_term).max(0.0)
}
