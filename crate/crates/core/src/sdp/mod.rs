//! Finite conic programs and a self-contained dense interior-point solver.
//!
//! A [`ConicProgram`] minimizes a linear objective over decision vector
//! `z` in R^p subject to
//!
//! - LMI blocks `F0 + sum_i z_i F_i >= 0` (positive semidefinite),
//! - scalar inequality rows `a'z <= b`,
//! - scalar equality rows `a'z = b`.
//!
//! [`solve`] runs an infeasible-start primal-dual path-following method with
//! Nesterov-Todd scaling. Scalar rows are handled as order-1 cone blocks, so a
//! program with only scalar rows is just a linear program to the solver. One
//! solve is single-threaded and allocation-happy by design: problem sizes here
//! are tens of variables and blocks of small order, and a dense Schur
//! complement is both simpler and faster than anything sparse at that scale.

mod solver;

use nalgebra::DVector;
use thiserror::Error;

use crate::sym::SymMatrix;

/// One linear matrix inequality `F0 + sum_i z_i F_i >= 0`.
///
/// Coefficients are stored sparsely as `(decision index, matrix)` pairs; all
/// matrices share the block order of `f0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub f0: SymMatrix,
    pub coeffs: Vec<(usize, SymMatrix)>,
}

impl LmiBlock {
    pub fn new(f0: SymMatrix, coeffs: Vec<(usize, SymMatrix)>) -> Self {
        Self { f0, coeffs }
    }

    pub fn order(&self) -> usize {
        self.f0.order()
    }
}

/// A scalar row `sum_i coeffs_i z_i (<=|=) rhs`, stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    /// Builds from a dense coefficient vector, dropping exact zeros.
    pub fn from_dense(coeffs: &[f64], rhs: f64) -> Self {
        let coeffs = coeffs
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(i, &c)| (i, c))
            .collect();
        Self { coeffs, rhs }
    }

    /// `sum_i coeffs_i z_i`.
    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * z[i]).sum()
    }
}

/// A finite conic program over `num_vars` scalar decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub num_vars: usize,
    /// Minimized objective; length `num_vars`.
    pub objective: Vec<f64>,
    pub lmi_blocks: Vec<LmiBlock>,
    /// Rows `a'z <= b`.
    pub inequalities: Vec<LinearRow>,
    /// Rows `a'z = b`.
    pub equalities: Vec<LinearRow>,
}

impl ConicProgram {
    /// An empty program (zero objective, no constraints) over `num_vars`
    /// variables.
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: vec![0.0; num_vars],
            lmi_blocks: Vec::new(),
            inequalities: Vec::new(),
            equalities: Vec::new(),
        }
    }

    /// Checks the structural invariants: at least one variable, objective
    /// length `num_vars`, every referenced decision index in range, and every
    /// coefficient matrix matching its block order.
    pub fn validate(&self) -> Result<(), Error> {
        if self.num_vars == 0 {
            return Err(Error::BadProgram("num_vars must be at least 1".into()));
        }
        if self.objective.len() != self.num_vars {
            return Err(Error::BadProgram(format!(
                "objective has length {}, expected {}",
                self.objective.len(),
                self.num_vars
            )));
        }
        for (k, blk) in self.lmi_blocks.iter().enumerate() {
            if blk.order() == 0 {
                return Err(Error::BadProgram(format!("lmi block {k} has order 0")));
            }
            for (i, m) in &blk.coeffs {
                if *i >= self.num_vars {
                    return Err(Error::BadProgram(format!(
                        "lmi block {k} references variable {i}, but num_vars = {}",
                        self.num_vars
                    )));
                }
                if m.order() != blk.order() {
                    return Err(Error::BadProgram(format!(
                        "lmi block {k}: coefficient for variable {i} has order {}, block order {}",
                        m.order(),
                        blk.order()
                    )));
                }
            }
        }
        for (what, rows) in [("inequality", &self.inequalities), ("equality", &self.equalities)] {
            for (r, row) in rows.iter().enumerate() {
                for (i, _) in &row.coeffs {
                    if *i >= self.num_vars {
                        return Err(Error::BadProgram(format!(
                            "{what} row {r} references variable {i}, but num_vars = {}",
                            self.num_vars
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Evaluates `F0 + sum_i z_i F_i` for one block.
    pub fn block_value(&self, k: usize, z: &DVector<f64>) -> SymMatrix {
        let blk = &self.lmi_blocks[k];
        let mut s = blk.f0.clone();
        for (i, m) in &blk.coeffs {
            s = s.axpy(z[*i], m);
        }
        s
    }

    /// Writes a human-readable listing, one constraint per line. Intended for
    /// debugging dumps from the command line.
    pub fn write_listing(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        let term = |i: usize, c: f64| format!("{c:+.6e} z{i}");
        let row_terms = |row: &LinearRow| {
            row.coeffs
                .iter()
                .map(|&(i, c)| term(i, c))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(out, "variables: {}", self.num_vars)?;
        let obj = self
            .objective
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(i, &c)| term(i, c))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(out, "minimize: {}", if obj.is_empty() { "0" } else { &obj })?;
        for (k, blk) in self.lmi_blocks.iter().enumerate() {
            let vars: Vec<String> = blk.coeffs.iter().map(|(i, _)| format!("z{i}")).collect();
            writeln!(
                out,
                "lmi {k}: order {}, psd in [{}], |F0| = {:.6e}",
                blk.order(),
                vars.join(", "),
                blk.f0.norm_fro()
            )?;
        }
        for (r, row) in self.inequalities.iter().enumerate() {
            writeln!(out, "ineq {r}: {} <= {:.6e}", row_terms(row), row.rhs)?;
        }
        for (r, row) in self.equalities.iter().enumerate() {
            writeln!(out, "eq {r}: {} = {:.6e}", row_terms(row), row.rhs)?;
        }
        Ok(())
    }
}

/// Outcome category of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Converged: primal feasible within `eps_feas` (absolute) and duality gap
    /// within `eps_gap` (relative).
    Optimal,
    /// No feasible point. Declared on a verified improving dual ray, or
    /// heuristically when the primal residual stalls above `1e-6` for 20
    /// consecutive iterations while the barrier parameter has bottomed out.
    Infeasible,
    /// Objective decreases without bound along a detected feasible ray.
    Unbounded,
    /// Iteration budget exhausted or a linear-algebra breakdown before any of
    /// the above could be certified.
    NumericalFailure,
}

/// Result of [`solve`].
///
/// `value` is the primal objective at the final iterate when `Optimal`; by
/// convention it is `+inf` for `Infeasible` (infimum over an empty set),
/// `-inf` for `Unbounded`, and `NaN` for `NumericalFailure`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub value: f64,
    pub dual_value: f64,
    pub z: DVector<f64>,
    /// Max of the absolute primal residual, scaled dual residual, and relative
    /// duality gap at the final iterate.
    pub achieved_tol: f64,
    pub iterations: usize,
}

/// Tolerances and budget for [`solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Relative duality-gap target at termination.
    pub eps_gap: f64,
    /// Absolute feasibility target: every LMI block at the returned point has
    /// minimum eigenvalue at least `-eps_feas`, and every scalar row is
    /// violated by at most `eps_feas`.
    pub eps_feas: f64,
    /// Interior-point iteration budget.
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { eps_gap: 1e-7, eps_feas: 1e-7, max_iters: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("malformed program: {0}")]
    BadProgram(String),
}

/// Solves the program to the requested tolerances.
///
/// Statuses other than `Optimal` are reported in-band in the result; `Err` is
/// reserved for structurally malformed input. The solve is deterministic:
/// identical program and options produce a bitwise-identical result within one
/// build.
pub fn solve(prog: &ConicProgram, opts: &SolverOptions) -> Result<SolveResult, Error> {
    prog.validate()?;
    Ok(solver::run(prog, opts))
}

#[cfg(test)]
mod tests;
