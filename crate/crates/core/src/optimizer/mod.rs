//! Sequential quadratic programming for bound- and inequality-constrained
//! black-box problems with finite-difference sensitivities.

pub mod qp;
pub mod wing;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::{Error, Result};

pub use wing::{
    constraint_values, evaluate_constraints, fom_verify, multi_start, write_campaign_csv, Coefficients, FomSurrogate,
    LiftDistribution, MultiStartReport, Surrogate, Surrogates, VerificationReport, VerifiedDesign, WingProblem, WingRun,
    WingSettings,
};

/// Objective and inequality constraint values (`c <= 0` is feasible).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub objective: f64,
    pub constraints: Vec<f64>,
}

/// Black-box problem: minimize the objective subject to constraints and bounds.
pub trait Problem: Sync {
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn n_constraints(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> Result<Evaluation>;

    fn dim(&self) -> usize {
        self.lower().len()
    }
}

fn fd_step(rel: f64, lo: f64, hi: f64, x: f64) -> f64 {
    let range = hi - lo;
    if range.is_finite() && range > 0.0 {
        rel * range
    } else {
        rel * x.abs().max(1.0)
    }
}

/// Finite-difference gradients of every output of `f` at `x`, given the
/// base values `f0`. Central differences with step `rel * (upper - lower)`
/// per coordinate; one-sided where a central stencil would leave the bounds.
/// Returns one gradient per output.
pub fn fd_gradients<F>(f: F, x: &[f64], f0: &[f64], lower: &[f64], upper: &[f64], rel: f64, exec: Exec) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = x.len();
    let outputs = f0.len();
    let columns: Vec<Result<Vec<f64>>> = exec.map(n, |i| {
        let h = fd_step(rel, lower[i], upper[i], x[i]);
        let eval = |v: f64| -> Result<Vec<f64>> {
            let mut p = x.to_vec();
            p[i] = v;
            let out = f(&p)?;
            if out.len() != outputs || out.iter().any(|y| !y.is_finite()) {
                return Err(Error::Numerical(format!("non-finite function value perturbing coordinate {i}")));
            }
            Ok(out)
        };
        let up = x[i] + h <= upper[i];
        let down = x[i] - h >= lower[i];
        let column = if up && down {
            let (a, b) = (eval(x[i] + h)?, eval(x[i] - h)?);
            a.iter().zip(&b).map(|(p, m)| (p - m) / (2.0 * h)).collect()
        } else if up {
            let a = eval(x[i] + h)?;
            a.iter().zip(f0).map(|(p, c)| (p - c) / h).collect()
        } else if down {
            let b = eval(x[i] - h)?;
            f0.iter().zip(&b).map(|(c, m)| (c - m) / h).collect()
        } else {
            return Err(Error::validation(format!("coordinate {i}: bound range smaller than the difference step")));
        };
        Ok(column)
    });
    let mut grads = vec![vec![0.0; n]; outputs];
    for (i, col) in columns.into_iter().enumerate() {
        for (k, v) in col?.into_iter().enumerate() {
            grads[k][i] = v;
        }
    }
    Ok(grads)
}

/// Gradient of a scalar black box; see [`fd_gradients`].
pub fn fd_gradient<F>(f: F, x: &[f64], lower: &[f64], upper: &[f64], rel: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let f0 = f(x)?;
    if !f0.is_finite() {
        return Err(Error::Numerical("non-finite function value at the base point".into()));
    }
    let mut g = fd_gradients(|p| f(p).map(|v| vec![v]), x, &[f0], lower, upper, rel, Exec::Sequential)?;
    Ok(g.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpOptions {
    pub kkt_tol: f64,
    pub feasibility_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub fd_rel_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for SqpOptions {
    fn default() -> Self {
        SqpOptions {
            kkt_tol: 1e-6,
            feasibility_tol: 1e-6,
            step_tol: 1e-9,
            max_iter: 100,
            fd_rel_step: 1e-3,
            armijo: 1e-4,
            max_backtracks: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Converged,
    Infeasible,
    MaxIter,
    /// Step or line search collapsed before the KKT test passed.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub x: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub max_violation: f64,
    pub feasible: bool,
    pub kkt_residual: f64,
    pub step_norm: f64,
    pub alpha: f64,
    pub merit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub x_start: Vec<f64>,
    pub x_final: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub kkt_residual: f64,
    pub status: OptStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<IterationRecord>,
}

impl OptResult {
    pub fn max_violation(&self) -> f64 {
        max_violation(&self.constraints)
    }

    pub fn converged(&self) -> bool {
        self.status == OptStatus::Converged
    }
}

fn max_violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0f64, |m, &v| m.max(v))
}

/// First-order optimality measure at `x` for multipliers `lambda`:
/// the largest of the bound-projected stationarity residual, the
/// constraint violation and the complementarity products.
pub fn kkt_residual(x: &[f64], grad: &[f64], jac: &[Vec<f64>], c: &[f64], lambda: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let r = grad[i] + jac.iter().zip(lambda).map(|(row, l)| l * row[i]).sum::<f64>();
        let tol = 1e-12 * (upper[i] - lower[i]).abs().min(1e12).max(1.0);
        let at_lo = x[i] - lower[i] <= tol;
        let at_hi = upper[i] - x[i] <= tol;
        let res = match (at_lo, at_hi) {
            (true, true) => 0.0,
            // a lower-bound multiplier absorbs a positive residual
            (true, false) => (-r).max(0.0),
            (false, true) => r.max(0.0),
            (false, false) => r.abs(),
        };
        worst = worst.max(res);
    }
    for (ci, li) in c.iter().zip(lambda) {
        worst = worst.max(ci.max(0.0)).max((li * ci).abs());
    }
    worst
}

struct Linearization {
    eval: Evaluation,
    grad: Vec<f64>,
    jac: Vec<Vec<f64>>,
}

fn linearize<P: Problem + ?Sized>(problem: &P, x: &[f64], eval: Evaluation, opts: &SqpOptions, exec: Exec, evals: &mut usize) -> Result<Linearization> {
    let f0: Vec<f64> = std::iter::once(eval.objective).chain(eval.constraints.iter().copied()).collect();
    let n = x.len();
    let mut grads = fd_gradients(
        |p| {
            let e = problem.evaluate(p)?;
            Ok(std::iter::once(e.objective).chain(e.constraints).collect())
        },
        x,
        &f0,
        problem.lower(),
        problem.upper(),
        opts.fd_rel_step,
        exec,
    )?;
    // each coordinate costs two evaluations unless it sits at a bound
    *evals += 2 * n;
    let grad = grads.remove(0);
    Ok(Linearization { eval, grad, jac: grads })
}

struct QpStep {
    d: Vec<f64>,
    slack: Vec<f64>,
    lambda: Vec<f64>,
}

/// Elastic QP subproblem: the linearized constraints may be violated by
/// non-negative slacks at cost `rho` each; `rho` grows until the slacks
/// vanish or a cap is reached.
fn solve_subproblem(b: &DMatrix<f64>, lin: &Linearization, x: &[f64], lower: &[f64], upper: &[f64], rho0: f64) -> Result<QpStep> {
    let n = x.len();
    let m = lin.eval.constraints.len();
    let nv = n + m;
    let mut g_mat = DMatrix::zeros(nv, nv);
    g_mat.view_mut((0, 0), (n, n)).copy_from(b);
    let delta = 1e-8 * b.diagonal().amax().max(1.0);
    for k in 0..m {
        g_mat[(n + k, n + k)] = delta;
    }
    let rows = 2 * m + 2 * n;
    let mut a = DMatrix::zeros(rows, nv);
    let mut rhs = DVector::zeros(rows);
    for k in 0..m {
        for j in 0..n {
            a[(k, j)] = lin.jac[k][j];
        }
        a[(k, n + k)] = -1.0;
        rhs[k] = -lin.eval.constraints[k];
        a[(m + k, n + k)] = -1.0;
    }
    for j in 0..n {
        a[(2 * m + j, j)] = 1.0;
        rhs[2 * m + j] = upper[j] - x[j];
        a[(2 * m + n + j, j)] = -1.0;
        rhs[2 * m + n + j] = x[j] - lower[j];
    }
    let mut start = DVector::zeros(nv);
    for k in 0..m {
        start[n + k] = lin.eval.constraints[k].max(0.0);
    }
    let mut rho = rho0;
    loop {
        let mut g = DVector::zeros(nv);
        for j in 0..n {
            g[j] = lin.grad[j];
        }
        for k in 0..m {
            g[n + k] = rho;
        }
        let sol = qp::solve_qp(&g_mat, &g, &a, &rhs, start.clone())?;
        let slack: Vec<f64> = (0..m).map(|k| sol.x[n + k].max(0.0)).collect();
        let elastic = slack.iter().any(|&t| t > 1e-12);
        if !elastic || rho >= 1e8 {
            return Ok(QpStep {
                d: (0..n).map(|j| sol.x[j]).collect(),
                slack,
                lambda: (0..m).map(|k| sol.multipliers[k]).collect(),
            });
        }
        rho *= 10.0;
    }
}

fn clip(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// SQP with a damped-BFGS Lagrangian Hessian and an l1 merit line search.
pub fn sqp_minimize<P: Problem + ?Sized>(problem: &P, x0: &[f64], opts: &SqpOptions, exec: Exec) -> Result<OptResult> {
    let (lower, upper) = (problem.lower(), problem.upper());
    let n = problem.dim();
    let m = problem.n_constraints();
    if x0.len() != n {
        return Err(Error::dimension(format!("start has {} variables, problem has {n}", x0.len())));
    }
    for i in 0..n {
        let tol = 1e-9 * (upper[i] - lower[i]).abs().min(1e9).max(1.0);
        if !(x0[i] >= lower[i] - tol && x0[i] <= upper[i] + tol) {
            return Err(Error::validation(format!("start coordinate {i} = {} outside bounds", x0[i])));
        }
    }
    let mut x = x0.to_vec();
    clip(&mut x, lower, upper);

    let mut evals = 1;
    let first = problem.evaluate(&x)?;
    if first.constraints.len() != m || !first.objective.is_finite() || first.constraints.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("start point evaluation is not finite".into()));
    }
    let mut lin = linearize(problem, &x, first, opts, exec, &mut evals)?;
    let mut b = DMatrix::<f64>::identity(n, n);
    let mut fresh_hessian = true;
    let mut mu = 1.0f64;
    let mut history = Vec::new();
    let mut lambda = vec![0.0; m];
    let mut kkt = f64::INFINITY;
    let mut status = OptStatus::MaxIter;
    let mut iterations = 0;

    for k in 0..=opts.max_iter {
        iterations = k;
        let step = solve_subproblem(&b, &lin, &x, lower, upper, (100.0f64).max(10.0 * mu))?;
        lambda = step.lambda.clone();
        kkt = kkt_residual(&x, &lin.grad, &lin.jac, &lin.eval.constraints, &lambda, lower, upper);
        let viol = max_violation(&lin.eval.constraints);
        let merit = lin.eval.objective + mu * lin.eval.constraints.iter().map(|c| c.max(0.0)).sum::<f64>();
        let d_norm = step.d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        history.push(IterationRecord {
            iteration: k,
            x: x.clone(),
            objective: lin.eval.objective,
            constraints: lin.eval.constraints.clone(),
            max_violation: viol,
            feasible: viol <= opts.feasibility_tol,
            kkt_residual: kkt,
            step_norm: d_norm,
            alpha: 0.0,
            merit,
        });
        if kkt <= opts.kkt_tol && viol <= opts.feasibility_tol {
            status = OptStatus::Converged;
            break;
        }
        if k == opts.max_iter {
            status = OptStatus::MaxIter;
            break;
        }
        if d_norm <= opts.step_tol {
            status = OptStatus::Stalled;
            break;
        }

        // merit penalty must dominate the multipliers
        let lam_max = lambda.iter().fold(0.0f64, |a, &l| a.max(l));
        if mu < 1.1 * lam_max {
            mu = 2.0 * lam_max;
        }
        let pos = |c: &[f64]| c.iter().map(|v| v.max(0.0)).sum::<f64>();
        let merit0 = lin.eval.objective + mu * pos(&lin.eval.constraints);
        let gd: f64 = lin.grad.iter().zip(&step.d).map(|(g, d)| g * d).sum();
        let slack_sum: f64 = step.slack.iter().sum();
        let slope = (gd - mu * (pos(&lin.eval.constraints) - slack_sum)).min(-0.0);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&step.d).map(|(xi, di)| xi + alpha * di).collect();
            clip(&mut trial, lower, upper);
            evals += 1;
            if let Ok(e) = problem.evaluate(&trial) {
                if e.objective.is_finite() && e.constraints.iter().all(|c| c.is_finite()) {
                    let merit_t = e.objective + mu * pos(&e.constraints);
                    if merit_t <= merit0 + opts.armijo * alpha * slope {
                        accepted = Some((trial, e));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, e_new)) = accepted else {
            if fresh_hessian {
                status = OptStatus::Stalled;
                break;
            }
            b = DMatrix::identity(n, n);
            fresh_hessian = true;
            continue;
        };
        if let Some(last) = history.last_mut() {
            last.alpha = alpha;
        }

        let new_lin = linearize(problem, &x_new, e_new, opts, exec, &mut evals)?;
        // damped BFGS on the Lagrangian gradient difference
        let lag = |l: &Linearization| -> DVector<f64> {
            DVector::from_iterator(
                n,
                (0..n).map(|i| l.grad[i] + l.jac.iter().zip(&lambda).map(|(row, la)| la * row[i]).sum::<f64>()),
            )
        };
        let s = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = lag(&new_lin) - lag(&lin);
        let sy = s.dot(&y);
        if fresh_hessian && sy > 0.0 {
            b = DMatrix::identity(n, n) * (y.dot(&y) / sy);
        }
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        if sbs > 0.0 {
            let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
            let r = theta * &y + (1.0 - theta) * &bs;
            let sr = s.dot(&r);
            if sr > 0.0 {
                b = &b - (&bs * bs.transpose()) / sbs + (&r * r.transpose()) / sr;
                fresh_hessian = false;
            }
        }
        x = x_new;
        lin = new_lin;
    }

    let viol = max_violation(&lin.eval.constraints);
    if status != OptStatus::Converged && viol > opts.feasibility_tol {
        status = OptStatus::Infeasible;
    }
    Ok(OptResult {
        x_start: x0.to_vec(),
        x_final: x,
        objective: lin.eval.objective,
        constraints: lin.eval.constraints,
        multipliers: lambda,
        kkt_residual: kkt,
        status,
        iterations,
        evaluations: evals,
        history,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `min (x0 - a)^2 + (x1 - b)^2` s.t. `x0 + x1 <= 1`, optionally scaled.
    pub struct Projection {
        pub target: [f64; 2],
        pub scale: f64,
        pub lower: Vec<f64>,
        pub upper: Vec<f64>,
    }

    impl Projection {
        pub fn new(target: [f64; 2]) -> Self {
            Projection {
                target,
                scale: 1.0,
                lower: vec![-5.0; 2],
                upper: vec![5.0; 2],
            }
        }
    }

    impl Problem for Projection {
        fn lower(&self) -> &[f64] {
            &self.lower
        }
        fn upper(&self) -> &[f64] {
            &self.upper
        }
        fn n_constraints(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
            let [a, b] = self.target;
            Ok(Evaluation {
                objective: self.scale * ((x[0] - a).powi(2) + (x[1] - b).powi(2)),
                constraints: vec![x[0] + x[1] - 1.0],
            })
        }
    }

    /// Unconstrained convex quadratic `1/2 x'Hx - h'x` in 4 variables.
    pub struct Quadratic;

    pub const Q_H: [[f64; 4]; 4] = [
        [4.0, 1.0, 0.0, 0.5],
        [1.0, 3.0, 0.2, 0.0],
        [0.0, 0.2, 2.0, 0.1],
        [0.5, 0.0, 0.1, 1.5],
    ];
    pub const Q_RHS: [f64; 4] = [1.0, -2.0, 0.5, 3.0];

    impl Problem for Quadratic {
        fn lower(&self) -> &[f64] {
            &[-10.0; 4]
        }
        fn upper(&self) -> &[f64] {
            &[10.0; 4]
        }
        fn n_constraints(&self) -> usize {
            0
        }
        fn evaluate(&self, x: &[f64]) -> Result<Evaluation> {
            let mut f = 0.0;
            for i in 0..4 {
                f -= Q_RHS[i] * x[i];
                for j in 0..4 {
                    f += 0.5 * x[i] * Q_H[i][j] * x[j];
                }
            }
            Ok(Evaluation {
                objective: f,
                constraints: vec![],
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn fd_is_exact_on_quadratics() {
        let lo = [-10.0; 3];
        let hi = [10.0; 3];
        let g = fd_gradient(|u| Ok(u[1] * u[1]), &[0.5, 3.0, -1.0], &lo, &hi, 1e-3).unwrap();
        assert!((g[1] - 6.0).abs() < 1e-9 && g[0] == 0.0 && g[2] == 0.0);
        let g = fd_gradient(|_| Ok(2.5), &[0.5, 3.0, -1.0], &lo, &hi, 1e-3).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let a = [1.5, -2.0, 0.25];
        let g = fd_gradient(|u| Ok(a.iter().zip(u).map(|(p, q)| p * q).sum()), &[1.0, 2.0, 3.0], &lo, &hi, 1e-3).unwrap();
        for (x, y) in g.iter().zip(&a) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_goes_one_sided_at_bounds() {
        let lo = [0.0, 0.0];
        let hi = [1.0, 1.0];
        // linear, so one-sided differences are exact too
        let g = fd_gradient(|u| Ok(3.0 * u[0] - u[1]), &[0.0, 1.0], &lo, &hi, 1e-3).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-10 && (g[1] + 1.0).abs() < 1e-10);
        let err = fd_gradient(|u| Ok(if u[1] > 0.5 { f64::NAN } else { 0.0 }), &[0.5, 0.5], &lo, &hi, 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn projection_from_feasible_and_infeasible_starts() {
        let p = Projection::new([1.0, 2.0]);
        for start in [[0.0, 0.0], [4.0, 3.0]] {
            let r = sqp_minimize(&p, &start, &SqpOptions::default(), Exec::Sequential).unwrap();
            assert_eq!(r.status, OptStatus::Converged, "{r:?}");
            assert!(r.x_final[0].abs() < 1e-6 && (r.x_final[1] - 1.0).abs() < 1e-6, "{:?}", r.x_final);
            assert!(r.kkt_residual <= 1e-6);
            assert!((r.multipliers[0] - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn unconstrained_quadratic_converges_fast() {
        let r = sqp_minimize(&Quadratic, &[0.0; 4], &SqpOptions::default(), Exec::Sequential).unwrap();
        assert_eq!(r.status, OptStatus::Converged);
        assert!(r.iterations <= 10, "{} iterations", r.iterations);
        let h = DMatrix::from_fn(4, 4, |i, j| Q_H[i][j]);
        let exact = h.lu().solve(&DVector::from_column_slice(&Q_RHS)).unwrap();
        for i in 0..4 {
            assert!((r.x_final[i] - exact[i]).abs() < 1e-8, "{:?} vs {exact}", r.x_final);
        }
    }

    #[test]
    fn optimal_start_stops_immediately() {
        let p = Projection::new([1.0, 2.0]);
        let r = sqp_minimize(&p, &[0.0, 1.0], &SqpOptions::default(), Exec::Sequential).unwrap();
        assert_eq!(r.status, OptStatus::Converged);
        assert!(r.iterations <= 1);
        assert!(r.x_final[0].abs() < 1e-9 && (r.x_final[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iterates_respect_bounds_and_merit_decreases() {
        let mut p = Projection::new([3.0, -4.0]);
        p.lower = vec![-1.0, -1.0];
        p.upper = vec![2.0, 2.0];
        let r = sqp_minimize(&p, &[1.5, 1.5], &SqpOptions::default(), Exec::Sequential).unwrap();
        for h in &r.history {
            assert!(h.x.iter().zip(&p.lower).all(|(x, l)| x >= l));
            assert!(h.x.iter().zip(&p.upper).all(|(x, u)| x <= u));
        }
        assert_eq!(r.status, OptStatus::Converged);
        // optimum at the corner (2, -1)
        assert!((r.x_final[0] - 2.0).abs() < 1e-9 && (r.x_final[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn objective_scale_does_not_move_the_argmin() {
        let mut p = Projection::new([1.0, 2.0]);
        let a = sqp_minimize(&p, &[0.0, 0.0], &SqpOptions::default(), Exec::Sequential).unwrap();
        p.scale = 25.0;
        let b = sqp_minimize(&p, &[0.0, 0.0], &SqpOptions::default(), Exec::Sequential).unwrap();
        for (x, y) in a.x_final.iter().zip(&b.x_final) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
