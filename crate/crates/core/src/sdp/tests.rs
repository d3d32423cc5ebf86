use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::sym::SymMatrix;

fn sm(rows: &[&[f64]]) -> SymMatrix {
    SymMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Coefficients of the packed order-2 variable triple (x00, x01, x11) seen as
/// a matrix variable X: one LMI block representing X itself.
fn x_block_order2() -> Vec<(usize, SymMatrix)> {
    vec![
        (0, sm(&[&[1.0, 0.0], &[0.0, 0.0]])),
        (1, sm(&[&[0.0, 1.0], &[1.0, 0.0]])),
        (2, sm(&[&[0.0, 0.0], &[0.0, 1.0]])),
    ]
}

/// Closed-form eigenvalues of a symmetric 2x2 matrix, smallest first.
fn eig2_min(a: f64, b: f64, c: f64) -> f64 {
    let tr = a + c;
    let det = a * c - b * b;
    0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
}

/// Closed-form smallest eigenvalue of a symmetric 3x3 matrix (trigonometric
/// solution of the characteristic cubic).
fn eig3_min(m: &DMatrix<f64>) -> f64 {
    let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    if p1 == 0.0 {
        return m[(0, 0)].min(m[(1, 1)]).min(m[(2, 2)]);
    }
    let q = m.trace() / 3.0;
    let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (m - DMatrix::identity(3, 3) * q) / p;
    let det_b = b[(0, 0)] * (b[(1, 1)] * b[(2, 2)] - b[(1, 2)] * b[(2, 1)])
        - b[(0, 1)] * (b[(1, 0)] * b[(2, 2)] - b[(1, 2)] * b[(2, 0)])
        + b[(0, 2)] * (b[(1, 0)] * b[(2, 1)] - b[(1, 1)] * b[(2, 0)]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
}

/// Contract of an `Optimal` result: absolute cone feasibility and a duality
/// gap certificate at the returned point.
fn assert_optimal_contract(prog: &ConicProgram, res: &SolveResult, opts: &SolverOptions) {
    assert_eq!(res.status, SolveStatus::Optimal, "expected optimal, tol {}", res.achieved_tol);
    for k in 0..prog.lmi_blocks.len() {
        let s = prog.block_value(k, &res.z);
        assert!(
            s.min_eig().unwrap() >= -opts.eps_feas,
            "lmi block {k} violates feasibility: min eig {}",
            s.min_eig().unwrap()
        );
    }
    for (r, row) in prog.inequalities.iter().enumerate() {
        assert!(
            row.eval(&res.z) <= row.rhs + opts.eps_feas,
            "inequality {r} violated: {} > {}",
            row.eval(&res.z),
            row.rhs
        );
    }
    for (r, row) in prog.equalities.iter().enumerate() {
        assert!(
            (row.eval(&res.z) - row.rhs).abs() <= opts.eps_feas,
            "equality {r} violated"
        );
    }
    let gap = (res.value - res.dual_value).abs();
    assert!(
        gap <= opts.eps_gap * (1.0 + res.value.abs() + res.dual_value.abs()),
        "duality gap {gap} exceeds certificate"
    );
}

#[test]
fn scalar_variable_in_cone() {
    // min z s.t. [z] >= 0.
    let mut prog = ConicProgram::new(1);
    prog.objective = vec![1.0];
    prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(1), vec![(0, SymMatrix::identity(1))]));
    let opts = SolverOptions::default();
    let res = solve(&prog, &opts).unwrap();
    assert_optimal_contract(&prog, &res, &opts);
    assert!(res.value.abs() <= 1e-6, "value {}", res.value);
}

#[test]
fn trace_minimization_with_matrix_lower_bound() {
    // min trace(X) s.t. X >= I, X of order 2 as three packed variables.
    let mut prog = ConicProgram::new(3);
    prog.objective = vec![1.0, 0.0, 1.0];
    prog.lmi_blocks.push(LmiBlock::new(
        sm(&[&[-1.0, 0.0], &[0.0, -1.0]]),
        x_block_order2(),
    ));
    let opts = SolverOptions::default();
    let res = solve(&prog, &opts).unwrap();
    assert_optimal_contract(&prog, &res, &opts);
    assert!((res.value - 2.0).abs() <= 1e-6, "value {}", res.value);
    assert!((res.z[0] - 1.0).abs() <= 1e-5 && (res.z[2] - 1.0).abs() <= 1e-5);
}

#[test]
fn smallest_eigenvalue_via_unit_trace() {
    // min <C, X> s.t. trace X = 1, X >= 0 equals the smallest eigenvalue of C.
    let expected = eig2_min(2.0, 1.0, 2.0);
    assert_eq!(expected, 1.0);
    let mut prog = ConicProgram::new(3);
    prog.objective = vec![2.0, 2.0, 2.0]; // <C, X> with the off-diagonal counted twice
    prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(2), x_block_order2()));
    prog.equalities.push(LinearRow::new(vec![(0, 1.0), (2, 1.0)], 1.0));
    let opts = SolverOptions::default();
    let res = solve(&prog, &opts).unwrap();
    assert_optimal_contract(&prog, &res, &opts);
    assert!((res.value - expected).abs() <= 1e-6, "value {}", res.value);
}

#[test]
fn randomized_instances_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = SolverOptions::default();

    // Family A: min <C, X>, trace X = 1, X >= 0 over order 2; optimum is the
    // smallest eigenvalue of C by the Rayleigh quotient.
    for _ in 0..7 {
        let (a, b, c) = (
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        let expected = eig2_min(a, b, c);
        let mut prog = ConicProgram::new(3);
        prog.objective = vec![a, 2.0 * b, c];
        prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(2), x_block_order2()));
        prog.equalities.push(LinearRow::new(vec![(0, 1.0), (2, 1.0)], 1.0));
        let res = solve(&prog, &opts).unwrap();
        assert_optimal_contract(&prog, &res, &opts);
        assert!(
            (res.value - expected).abs() <= 1e-6 * (1.0 + expected.abs()),
            "value {} expected {expected}",
            res.value
        );
    }

    // Family B: max t s.t. M - t I >= 0 recovers the smallest eigenvalue of a
    // random symmetric order-3 matrix; checked against the trigonometric
    // closed form of the characteristic cubic.
    for _ in 0..13 {
        let mut m = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in i..3 {
                let v = rng.random_range(-5.0..5.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let expected = eig3_min(&m);
        let mut prog = ConicProgram::new(1);
        prog.objective = vec![-1.0];
        prog.lmi_blocks.push(LmiBlock::new(
            SymMatrix::from_dense(&m),
            vec![(0, SymMatrix::identity(3).scale(-1.0))],
        ));
        let res = solve(&prog, &opts).unwrap();
        assert_optimal_contract(&prog, &res, &opts);
        assert!(
            (res.value + expected).abs() <= 1e-6 * (1.0 + expected.abs()),
            "value {} expected {}",
            res.value,
            -expected
        );
    }
}

#[test]
fn agrees_with_spectral_grid_search() {
    // Exhaustive parameterization of the unit-trace PSD cone in order 2:
    // X = t qq' + (1-t) pp' with q = (cos w, sin w), p the orthogonal unit.
    let grid_min = |a: f64, b: f64, c: f64| -> f64 {
        let mut best = f64::INFINITY;
        for iw in 0..400 {
            let w = std::f64::consts::PI * (iw as f64) / 400.0;
            let (cw, sw) = (w.cos(), w.sin());
            // <C, qq'> and <C, pp'> with p = (-sin w, cos w).
            let vq = a * cw * cw + 2.0 * b * cw * sw + c * sw * sw;
            let vp = a * sw * sw - 2.0 * b * cw * sw + c * cw * cw;
            for it in 0..=100 {
                let t = it as f64 / 100.0;
                best = best.min(t * vq + (1.0 - t) * vp);
            }
        }
        best
    };

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = SolverOptions::default();
    for _ in 0..6 {
        let (a, b, c) = (
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let mut prog = ConicProgram::new(3);
        prog.objective = vec![a, 2.0 * b, c];
        prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(2), x_block_order2()));
        prog.equalities.push(LinearRow::new(vec![(0, 1.0), (2, 1.0)], 1.0));
        let res = solve(&prog, &opts).unwrap();
        assert_optimal_contract(&prog, &res, &opts);
        assert!(
            (res.value - grid_min(a, b, c)).abs() <= 1e-4,
            "value {} grid {}",
            res.value,
            grid_min(a, b, c)
        );
    }
}

#[test]
fn infeasible_scalar_rows() {
    // x <= -1 and x >= 0 cannot both hold.
    let mut prog = ConicProgram::new(1);
    prog.inequalities.push(LinearRow::new(vec![(0, 1.0)], -1.0));
    prog.inequalities.push(LinearRow::new(vec![(0, -1.0)], 0.0));
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Infeasible);
    assert_eq!(res.value, f64::INFINITY);
}

#[test]
fn infeasible_lmi_against_row() {
    // [x] >= 0 as a cone block, x <= -1 as a row.
    let mut prog = ConicProgram::new(1);
    prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(1), vec![(0, SymMatrix::identity(1))]));
    prog.inequalities.push(LinearRow::new(vec![(0, 1.0)], -1.0));
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Infeasible);
}

#[test]
fn unbounded_direction_is_detected() {
    // min -x s.t. x >= 0.
    let mut prog = ConicProgram::new(1);
    prog.objective = vec![-1.0];
    prog.inequalities.push(LinearRow::new(vec![(0, -1.0)], 0.0));
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Unbounded);
    assert_eq!(res.value, f64::NEG_INFINITY);
}

#[test]
fn duplicated_rows_are_kept_and_harmless() {
    let mut prog = ConicProgram::new(1);
    prog.objective = vec![-1.0];
    for _ in 0..5 {
        prog.inequalities.push(LinearRow::new(vec![(0, 1.0)], 1.0));
    }
    let opts = SolverOptions::default();
    let res = solve(&prog, &opts).unwrap();
    assert_optimal_contract(&prog, &res, &opts);
    assert!((res.value + 1.0).abs() <= 1e-6);
}

#[test]
fn equality_only_programs() {
    // Constant on the feasible affine set.
    let mut prog = ConicProgram::new(2);
    prog.objective = vec![1.0, 1.0];
    prog.equalities.push(LinearRow::new(vec![(0, 1.0), (1, 1.0)], 3.0));
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Optimal);
    assert!((res.value - 3.0).abs() <= 1e-9);

    // Objective with a null-space component.
    let mut prog = ConicProgram::new(2);
    prog.objective = vec![1.0, 0.0];
    prog.equalities.push(LinearRow::new(vec![(0, 1.0), (1, 1.0)], 3.0));
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Unbounded);

    // Contradictory equalities.
    let mut prog = ConicProgram::new(1);
    prog.equalities.push(LinearRow::new(vec![(0, 1.0)], 3.0));
    prog.equalities.push(LinearRow::new(vec![(0, 1.0)], 4.0));
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Infeasible);
}

#[test]
fn unconstrained_programs() {
    let prog = ConicProgram::new(2);
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Optimal);
    assert_eq!(res.value, 0.0);

    let mut prog = ConicProgram::new(2);
    prog.objective = vec![1.0, 0.0];
    let res = solve(&prog, &SolverOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Unbounded);
}

#[test]
fn exhausted_budget_reports_numerical_failure() {
    let mut prog = ConicProgram::new(3);
    prog.objective = vec![1.0, 0.0, 1.0];
    prog.lmi_blocks.push(LmiBlock::new(
        sm(&[&[-1.0, 0.0], &[0.0, -1.0]]),
        x_block_order2(),
    ));
    let res = solve(&prog, &SolverOptions { max_iters: 1, ..Default::default() }).unwrap();
    assert_eq!(res.status, SolveStatus::NumericalFailure);
    assert!(res.value.is_nan());
}

#[test]
fn solve_is_bitwise_deterministic() {
    let mut prog = ConicProgram::new(3);
    prog.objective = vec![2.0, 2.0, 2.0];
    prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(2), x_block_order2()));
    prog.equalities.push(LinearRow::new(vec![(0, 1.0), (2, 1.0)], 1.0));
    let opts = SolverOptions::default();
    let a = solve(&prog, &opts).unwrap();
    let b = solve(&prog, &opts).unwrap();
    assert_eq!(a.status, b.status);
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.dual_value.to_bits(), b.dual_value.to_bits());
    assert_eq!(a.z, b.z);
}

#[test]
fn validation_names_the_offense() {
    let mut prog = ConicProgram::new(2);
    prog.objective = vec![1.0];
    let err = solve(&prog, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::BadProgram(ref s) if s.contains("objective")));

    let mut prog = ConicProgram::new(1);
    prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(1), vec![(5, SymMatrix::identity(1))]));
    let err = solve(&prog, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::BadProgram(ref s) if s.contains("variable 5")));
}

#[test]
fn listing_is_one_line_per_constraint() {
    let mut prog = ConicProgram::new(2);
    prog.objective = vec![1.0, 0.0];
    prog.lmi_blocks.push(LmiBlock::new(SymMatrix::zeros(1), vec![(0, SymMatrix::identity(1))]));
    prog.inequalities.push(LinearRow::new(vec![(1, 2.0)], 4.0));
    prog.equalities.push(LinearRow::new(vec![(0, 1.0), (1, 1.0)], 1.0));
    let mut buf = Vec::new();
    prog.write_listing(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 5); // header, objective, one per constraint
    assert!(text.contains("lmi 0"));
    assert!(text.contains("ineq 0"));
    assert!(text.contains("eq 0"));
}
