//! Primal active-set solver for small dense strictly convex QPs:
//! minimize `1/2 x'Gx + g'x` subject to `a_i'x <= b_i`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One non-negative multiplier per constraint row (zero when inactive).
    pub multipliers: DVector<f64>,
    pub iterations: usize,
}

/// Solve from a feasible starting point `x0`. Rows of `a` are constraints.
pub fn solve_qp(g_mat: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>, x0: DVector<f64>) -> Result<QpSolution> {
    let n = g.len();
    let m = b.len();
    assert_eq!(g_mat.shape(), (n, n));
    assert_eq!(a.shape(), (m, n));
    let scale = |i: usize| a.row(i).norm().max(1.0);
    let feas_tol = 1e-10;
    for i in 0..m {
        let r = (a.row(i) * &x0)[0] - b[i];
        if r > feas_tol * scale(i) * (1.0 + x0.amax()) {
            return Err(Error::Solver(format!("QP start violates constraint {i} by {r:e}")));
        }
    }

    let mut x = x0;
    let mut working: Vec<usize> = Vec::new();
    // a full unblocked step lands on the working-set minimizer; the next
    // step is then pure roundoff, whatever its size
    let mut at_minimizer = false;
    let max_iter = 10 * (n + m) + 50;
    for iter in 0..max_iter {
        // equality-constrained step on the working set
        let w = working.len();
        let mut kkt = DMatrix::zeros(n + w, n + w);
        kkt.view_mut((0, 0), (n, n)).copy_from(g_mat);
        for (k, &i) in working.iter().enumerate() {
            for j in 0..n {
                kkt[(n + k, j)] = a[(i, j)];
                kkt[(j, n + k)] = a[(i, j)];
            }
        }
        let grad = g_mat * &x + g;
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-&grad));
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("singular QP working-set system (degenerate constraints)".into()))?;
        let p = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n, w).into_owned();

        if at_minimizer || p.amax() <= 1e-13 * (1.0 + x.amax()) {
            at_minimizer = false;
            // optimal on this working set: check multiplier signs
            let (worst, min_l) = lambda
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0f64), |acc, (k, &l)| if l < acc.1 { (k, l) } else { acc });
            let grad_scale = 1.0 + grad.amax();
            if worst == usize::MAX || min_l >= -1e-12 * grad_scale {
                let mut multipliers = DVector::zeros(m);
                for (k, &i) in working.iter().enumerate() {
                    multipliers[i] = lambda[k].max(0.0);
                }
                return Ok(QpSolution {
                    x,
                    multipliers,
                    iterations: iter,
                });
            }
            working.remove(worst);
            continue;
        }

        // longest feasible step along p
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let ap = (a.row(i) * &p)[0];
            if ap > 1e-14 * scale(i) * p.amax() {
                let slack = b[i] - (a.row(i) * &x)[0];
                let step = (slack.max(0.0)) / ap;
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        x += alpha * &p;
        match blocking {
            Some(i) => working.push(i),
            None => at_minimizer = true,
        }
    }
    Err(Error::Solver(format!("QP active-set iteration limit ({max_iter}) reached")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(gm: &[f64], g: &[f64], a: &[f64], b: &[f64], x0: &[f64]) -> QpSolution {
        let n = g.len();
        let m = b.len();
        solve_qp(
            &DMatrix::from_row_slice(n, n, gm),
            &DVector::from_column_slice(g),
            &DMatrix::from_row_slice(m, n, a),
            &DVector::from_column_slice(b),
            DVector::from_column_slice(x0),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_minimum_inside() {
        // min (x-1)^2 + (y+2)^2 with a loose box
        let s = solve(&[2.0, 0.0, 0.0, 2.0], &[-2.0, 4.0], &[1.0, 0.0, 0.0, 1.0], &[10.0, 10.0], &[0.0, 0.0]);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] + 2.0).abs() < 1e-12);
        assert_eq!(s.multipliers.amax(), 0.0);
    }

    #[test]
    fn projection_onto_half_plane() {
        // min (x-1)^2 + (y-2)^2 s.t. x + y <= 1 -> (0, 1), lambda = 2
        let s = solve(&[2.0, 0.0, 0.0, 2.0], &[-2.0, -4.0], &[1.0, 1.0], &[1.0], &[0.0, 0.0]);
        assert!((s.x[0]).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12, "{}", s.x);
        assert!((s.multipliers[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn drops_constraint_with_wrong_sign() {
        // start on x <= 0 (active) but the optimum pulls away from it
        let s = solve(
            &[1.0, 0.0, 0.0, 1.0],
            &[1.0, 0.0],
            &[1.0, 0.0, -1.0, 0.0],
            &[0.0, 5.0],
            &[0.0, 0.0],
        );
        assert!((s.x[0] + 1.0).abs() < 1e-12);
        assert_eq!(s.multipliers[0], 0.0);
    }

    #[test]
    fn vertex_with_two_active() {
        // min x^2 + y^2 - 4x - 4y s.t. x <= 1, y <= 1 -> (1,1), lambdas 2,2
        let s = solve(
            &[2.0, 0.0, 0.0, 2.0],
            &[-4.0, -4.0],
            &[1.0, 0.0, 0.0, 1.0],
            &[1.0, 1.0],
            &[-3.0, 0.5],
        );
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
        assert!((s.multipliers[0] - 2.0).abs() < 1e-10 && (s.multipliers[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let r = solve_qp(
            &DMatrix::identity(1, 1),
            &DVector::zeros(1),
            &DMatrix::from_row_slice(1, 1, &[1.0]),
            &DVector::from_column_slice(&[0.0]),
            DVector::from_column_slice(&[1.0]),
        );
        assert!(r.is_err());
    }

    #[test]
    fn ill_conditioned_interior_minimum_terminates() {
        // G = Q diag(1 .. 1e-10) Q' with a Householder Q: the working-set
        // step after reaching the minimizer is roundoff far above 1e-13
        let n = 12;
        let v = DVector::from_fn(n, |i, _| 1.0 + i as f64);
        let q = DMatrix::identity(n, n) - 2.0 * &v * v.transpose() / v.norm_squared();
        let d = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 10f64.powf(-(i as f64) * 10.0 / (n - 1) as f64)));
        let g_mat = &q * d * q.transpose();
        let x_star = DVector::from_fn(n, |i, _| ((i as f64) * 0.7).sin());
        let g = -(&g_mat * &x_star);
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for j in 0..n {
            a[(j, j)] = 1.0;
            a[(n + j, j)] = -1.0;
            b[j] = 5.0;
            b[n + j] = 5.0;
        }
        let s = solve_qp(&g_mat, &g, &a, &b, DVector::zeros(n)).unwrap();
        let residual = (&g_mat * &s.x + &g).amax();
        assert!(residual < 1e-12, "gradient residual {residual:e}");
        assert_eq!(s.multipliers.amax(), 0.0);
    }
}
