//! Dense SQP solver for equality constraints with an augmented-Lagrangian treatment
//! of inequalities.
//!
//! Problem form:
//!
//! ```text
//! min f(z)   s.t.   c(z) = 0,   g(z) >= 0
//! ```
//!
//! Each iteration takes a Newton-KKT step on `f + psi(g)` subject to the linearized
//! equalities, where `psi` is the Powell-Hestenes-Rockafellar penalty of the
//! inequalities with Gauss-Newton curvature. Steps are globalized with an l1 merit
//! function, backtracking and a second-order correction. Inequality multipliers
//! are updated whenever the subproblem is solved to the current tolerance.

use faer::linalg::solvers::Solve;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Sparse matrix as `(row, col, value)` entries; duplicates are summed.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.entries.push((r, c, v));
        }
    }

    pub fn to_dense(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// `A^T x`.
    pub fn tr_mul(&self, x: &DVector<f64>, cols: usize) -> DVector<f64> {
        let mut out = DVector::zeros(cols);
        for &(r, c, v) in &self.entries {
            out[c] += v * x[r];
        }
        out
    }

    /// `A x`.
    pub fn mul(&self, x: &DVector<f64>, rows: usize) -> DVector<f64> {
        let mut out = DVector::zeros(rows);
        for &(r, c, v) in &self.entries {
            out[r] += v * x[c];
        }
        out
    }
}

pub trait NlpProblem {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn objective(&self, z: &DVector<f64>) -> f64;
    fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64>;
    /// Equality residuals `c(z)` and inequality values `g(z)`.
    fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    /// Jacobians of `c` and `g`.
    fn jacobians(&self, z: &DVector<f64>) -> (Triplets, Triplets);
    /// Hessian of `obj_factor * f(z) - lambda^T c(z) - ineq_mult^T g(z)`.
    fn lagrangian_hessian(
        &self,
        z: &DVector<f64>,
        obj_factor: f64,
        lambda: &DVector<f64>,
        ineq_mult: &DVector<f64>,
    ) -> DMatrix<f64>;
    /// Positive row scales applied to `g` inside the solver.
    fn ineq_scale(&self) -> DVector<f64> {
        DVector::from_element(self.n_ineq(), 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub constraint_tol: f64,
    pub optimality_tol: f64,
    pub max_iter: usize,
    /// Initial inequality penalty.
    pub rho_init: f64,
    /// Penalty growth when inequality violation stalls.
    pub rho_growth: f64,
    pub rho_max: f64,
    /// Print one line per iteration to stderr.
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            constraint_tol: 1e-6,
            optimality_tol: 1e-4,
            max_iter: 500,
            rho_init: 10.0,
            rho_growth: 10.0,
            rho_max: 1e9,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub objective: f64,
    pub max_eq_violation: f64,
    pub max_ineq_violation: f64,
    pub optimality: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
}

impl SolveReport {
    pub fn max_violation(&self) -> f64 {
        self.max_eq_violation.max(self.max_ineq_violation)
    }
}

/// Warm-start information for [`solve`].
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub lambda: Option<DVector<f64>>,
    pub mu: Option<DVector<f64>>,
    pub rho: Option<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Kkt {
    lu: faer::linalg::solvers::PartialPivLu<f64>,
    n: usize,
    m: usize,
}

impl Kkt {
    fn solve(
        &self,
        top: &DVector<f64>,
        bottom: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let rhs = faer::Mat::from_fn(self.n + self.m, 1, |i, _| {
            if i < self.n {
                top[i]
            } else {
                bottom[i - self.n]
            }
        });
        let sol = self.lu.solve(&rhs);
        let dz = DVector::from_fn(self.n, |i, _| sol[(i, 0)]);
        let y = DVector::from_fn(self.m, |i, _| sol[(self.n + i, 0)]);
        if dz.iter().chain(y.iter()).all(|v| v.is_finite()) {
            Some((dz, y))
        } else {
            None
        }
    }
}

fn factor(w: &DMatrix<f64>, jc: &Triplets, n: usize, m: usize, delta_c: f64) -> Kkt {
    let mut k = faer::Mat::<f64>::zeros(n + m, n + m);
    for j in 0..n {
        for i in 0..n {
            k[(i, j)] = w[(i, j)];
        }
    }
    for &(r, c, v) in &jc.entries {
        k[(n + r, c)] += v;
        k[(c, n + r)] += v;
    }
    for i in 0..m {
        k[(n + i, n + i)] = -delta_c;
    }
    Kkt {
        lu: k.partial_piv_lu(),
        n,
        m,
    }
}

struct Eval {
    f: f64,
    c: DVector<f64>,
    g: DVector<f64>,
}

fn evaluate<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>, scale: &DVector<f64>) -> Eval {
    let (c, g) = p.constraints(z);
    Eval {
        f: p.objective(z),
        c,
        g: g.component_mul(scale),
    }
}

/// Penalty of scaled inequalities.
fn psi(g: &DVector<f64>, mu: &DVector<f64>, rho: f64) -> f64 {
    g.iter()
        .zip(mu.iter())
        .map(|(&gi, &mi)| {
            let t = (mi - rho * gi).max(0.0);
            (t * t - mi * mi) / (2.0 * rho)
        })
        .sum()
}

fn merit(e: &Eval, mu: &DVector<f64>, rho: f64, nu: f64) -> f64 {
    if !e.f.is_finite() || e.c.iter().chain(e.g.iter()).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    e.f + psi(&e.g, mu, rho) + nu * e.c.lp_norm(1)
}

pub fn solve<P: NlpProblem + ?Sized>(
    problem: &P,
    z0: &DVector<f64>,
    warm: &WarmStart,
    opts: &SolverOptions,
) -> SolveReport {
    let n = problem.n_vars();
    let m = problem.n_eq();
    let p = problem.n_ineq();
    let scale = problem.ineq_scale();
    let mut z = z0.clone();
    let mut lambda = warm.lambda.clone().unwrap_or_else(|| DVector::zeros(m));
    let mut mu = warm.mu.clone().unwrap_or_else(|| DVector::zeros(p));
    let mut rho = warm.rho.unwrap_or(opts.rho_init);
    let mut delta: f64 = 0.0;
    let delta_c = 1e-10;
    let mut nu: f64 = 1.0;
    // Inner tolerance for the next multiplier update.
    let mut omega = 1e-1_f64;
    let mut last_ineq_violation = f64::INFINITY;

    let mut e = evaluate(problem, &z, &scale);
    let mut status = String::from("iteration limit");
    let mut converged = false;
    let mut iterations = 0;
    let mut report_opt = f64::INFINITY;

    for iter in 0..=opts.max_iter {
        iterations = iter;
        let grad = problem.objective_grad(&z);
        let (jc, jg_raw) = problem.jacobians(&z);
        let jg = Triplets {
            entries: jg_raw
                .entries
                .iter()
                .map(|&(r, c, v)| (r, c, v * scale[r]))
                .collect(),
        };
        let shifted = DVector::from_fn(p, |i, _| (mu[i] - rho * e.g[i]).max(0.0));
        let grad_phi = &grad - jg.tr_mul(&shifted, n);
        let stationarity = &grad_phi - jc.tr_mul(&lambda, n);
        let s_d =
            ((lambda.lp_norm(1) + shifted.lp_norm(1)) / ((m + p).max(1) as f64)).max(100.0) / 100.0;
        let opt = inf_norm(&stationarity) / s_d;
        let compl =
            e.g.iter()
                .zip(shifted.iter())
                .fold(0.0_f64, |a, (g, s)| a.max((g * s).abs()))
                / s_d;
        let eq_viol = inf_norm(&e.c);
        let ineq_viol =
            e.g.iter()
                .zip(scale.iter())
                .fold(0.0_f64, |a, (g, s)| a.max((-g / s).max(0.0)));
        report_opt = opt.max(compl);
        if opts.verbose {
            eprintln!(
                "it {iter:3} f {:.6e} eq {eq_viol:.2e} in {ineq_viol:.2e} opt {opt:.2e} compl {compl:.2e} rho {rho:.1e} delta {delta:.1e}",
                e.f
            );
        }
        if eq_viol <= opts.constraint_tol
            && ineq_viol <= opts.constraint_tol
            && opt <= opts.optimality_tol
            && compl <= opts.optimality_tol
        {
            converged = true;
            status = "converged".into();
            break;
        }
        if iter == opts.max_iter {
            break;
        }

        // Multiplier update once the subproblem is solved well enough.
        if opt <= omega.max(opts.optimality_tol) && eq_viol <= omega.max(opts.constraint_tol) {
            mu = shifted.clone();
            if ineq_viol > 0.25 * last_ineq_violation && ineq_viol > opts.constraint_tol {
                rho = (rho * opts.rho_growth).min(opts.rho_max);
            }
            last_ineq_violation = ineq_viol;
            omega = (omega * 0.1).max(0.1 * opts.optimality_tol);
            e = evaluate(problem, &z, &scale);
            continue;
        }

        let mut w = problem.lagrangian_hessian(&z, 1.0, &lambda, &shifted.component_mul(&scale));
        // Gauss-Newton curvature of the penalty.
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); p];
        for &(r, c, v) in &jg.entries {
            if mu[r] - rho * e.g[r] > 0.0 {
                rows[r].push((c, v));
            }
        }
        for row in &rows {
            for &(a, va) in row {
                for &(b, vb) in row {
                    w[(a, b)] += rho * va * vb;
                }
            }
        }
        let neg_c = -&e.c;
        let mut step = None;
        for _ in 0..12 {
            let mut wd = w.clone();
            for i in 0..n {
                wd[(i, i)] += delta;
            }
            let kkt = factor(&wd, &jc, n, m, delta_c);
            if let Some((dz, y)) = kkt.solve(&(-&grad_phi), &neg_c) {
                let curv = dz.dot(&(&wd * &dz));
                if curv > 1e-12 * dz.norm_squared() || dz.norm() < 1e-14 {
                    step = Some((dz, -y, kkt));
                    break;
                }
            }
            delta = if delta == 0.0 { 1e-4 } else { delta * 10.0 };
        }
        let Some((dz, lambda_plus, kkt)) = step else {
            status = "KKT system could not be regularized".into();
            break;
        };
        nu = nu.max(1.1 * inf_norm(&lambda_plus) + 1e-3);
        let phi0 = merit(&e, &mu, rho, nu);
        let slope = grad_phi.dot(&dz) - nu * e.c.lp_norm(1);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let trial = &z + alpha * &dz;
            let et = evaluate(problem, &trial, &scale);
            let phi = merit(&et, &mu, rho, nu);
            if phi <= phi0 + 1e-4 * alpha * slope.min(0.0) {
                accepted = Some((trial, et));
                break;
            }
            if alpha == 1.0 {
                // Second-order correction for the equality curvature.
                if let Some((dsoc, _)) = kkt.solve(&DVector::zeros(n), &(-&et.c)) {
                    let trial = &z + &dz + dsoc;
                    let es = evaluate(problem, &trial, &scale);
                    if merit(&es, &mu, rho, nu) <= phi0 + 1e-4 * slope.min(0.0) {
                        accepted = Some((trial, es));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((zn, en)) => {
                lambda += alpha * (&lambda_plus - &lambda);
                z = zn;
                e = en;
                // Short accepted steps mean the model overshoots: damp harder.
                if alpha == 1.0 {
                    delta /= 3.0;
                } else if alpha < 0.1 {
                    // Capped: damping cannot shorten the constraint-restoring part of the step.
                    delta = (delta * 10.0).clamp(1e-4, 1e-1);
                }
                if delta < 1e-8 {
                    delta = 0.0;
                }
            }
            None => {
                if delta >= 1e6 {
                    status = "line search failed".into();
                    break;
                }
                delta = (delta * 100.0).max(1e-4);
            }
        }
    }

    let ineq_raw = problem.constraints(&z).1;
    SolveReport {
        objective: e.f,
        max_eq_violation: inf_norm(&e.c),
        max_ineq_violation: ineq_raw.iter().fold(0.0_f64, |a, g| a.max(-g)),
        optimality: report_opt,
        z,
        lambda,
        mu,
        iterations,
        converged,
        status,
    }
}

/// Central-difference Jacobian of a vector function.
pub fn fd_jacobian<F>(f: F, x: &[f64], h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let mut xs = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let step = h * x[j].abs().max(1.0);
        xs[j] = x[j] + step;
        let fp = f(&xs);
        xs[j] = x[j] - step;
        let fm = f(&xs);
        xs[j] = x[j];
        cols.push((fp - fm) / (2.0 * step));
    }
    DMatrix::from_columns(&cols)
}

/// Forward-difference Hessian of a scalar function.
pub fn fd_hessian<F>(f: F, x: &[f64], h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x.len();
    let steps: Vec<f64> = x.iter().map(|v| h * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut xs = x.to_vec();
    let single: Vec<f64> = (0..n)
        .map(|i| {
            xs[i] = x[i] + steps[i];
            let v = f(&xs);
            xs[i] = x[i];
            v
        })
        .collect();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            xs[i] += steps[i];
            xs[j] += steps[j];
            let fij = f(&xs);
            xs[i] = x[i];
            xs[j] = x[j];
            let v = (fij - single[i] - single[j] + f0) / (steps[i] * steps[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// min (x0 - 1)^2 + (x1 - 2)^2  s.t.  x0 + x1 = 1,  x0 >= 0.5
    struct Toy;

    impl NlpProblem for Toy {
        fn n_vars(&self) -> usize {
            2
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn n_ineq(&self) -> usize {
            1
        }
        fn objective(&self, z: &DVector<f64>) -> f64 {
            (z[0] - 1.0).powi(2) + (z[1] - 2.0).powi(2)
        }
        fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * (z[0] - 1.0), 2.0 * (z[1] - 2.0)])
        }
        fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_vec(vec![z[0] + z[1] - 1.0]),
                DVector::from_vec(vec![z[0] - 0.5]),
            )
        }
        fn jacobians(&self, _z: &DVector<f64>) -> (Triplets, Triplets) {
            let mut jc = Triplets::default();
            jc.push(0, 0, 1.0);
            jc.push(0, 1, 1.0);
            let mut jg = Triplets::default();
            jg.push(0, 0, 1.0);
            (jc, jg)
        }
        fn lagrangian_hessian(
            &self,
            _z: &DVector<f64>,
            s: f64,
            _l: &DVector<f64>,
            _m: &DVector<f64>,
        ) -> DMatrix<f64> {
            DMatrix::identity(2, 2) * (2.0 * s)
        }
    }

    #[test]
    fn solves_toy_problem_with_active_bound() {
        let r = solve(
            &Toy,
            &DVector::from_vec(vec![3.0, -4.0]),
            &WarmStart::default(),
            &SolverOptions::default(),
        );
        assert!(r.converged, "{}", r.status);
        assert_relative_eq!(r.z[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(r.z[1], 0.5, epsilon = 1e-6);
    }

    /// Rosenbrock on the unit circle.
    struct Circle;

    impl NlpProblem for Circle {
        fn n_vars(&self) -> usize {
            2
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn n_ineq(&self) -> usize {
            0
        }
        fn objective(&self, z: &DVector<f64>) -> f64 {
            (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2)
        }
        fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64> {
            let g = fd_jacobian(
                |x| DVector::from_element(1, self.objective(&DVector::from_column_slice(x))),
                z.as_slice(),
                1e-7,
            );
            DVector::from_fn(2, |i, _| g[(0, i)])
        }
        fn constraints(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_element(1, z.norm_squared() - 1.0),
                DVector::zeros(0),
            )
        }
        fn jacobians(&self, z: &DVector<f64>) -> (Triplets, Triplets) {
            let mut jc = Triplets::default();
            jc.push(0, 0, 2.0 * z[0]);
            jc.push(0, 1, 2.0 * z[1]);
            (jc, Triplets::default())
        }
        fn lagrangian_hessian(
            &self,
            z: &DVector<f64>,
            s: f64,
            l: &DVector<f64>,
            _m: &DVector<f64>,
        ) -> DMatrix<f64> {
            let lam = l[0];
            fd_hessian(
                |x| {
                    let v = DVector::from_column_slice(x);
                    s * self.objective(&v) - lam * (v.norm_squared() - 1.0)
                },
                z.as_slice(),
                1e-4,
            )
        }
    }

    #[test]
    fn solves_nonconvex_equality_problem() {
        let r = solve(
            &Circle,
            &DVector::from_vec(vec![0.3, 0.9]),
            &WarmStart::default(),
            &SolverOptions::default(),
        );
        assert!(r.converged, "{}", r.status);
        assert!(r.z.norm_squared() - 1.0 < 1e-6);
        // Known minimizer near (0.7864, 0.6177).
        assert_relative_eq!(r.z[0], 0.7864, epsilon = 1e-3);
    }

    #[test]
    fn finite_difference_helpers() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let h = fd_hessian(f, &[0.3, 0.7], 1e-4);
        assert_relative_eq!(h[(0, 0)], 2.0 * 0.7, epsilon = 1e-3);
        assert_relative_eq!(h[(0, 1)], 2.0 * 0.3, epsilon = 1e-3);
        assert_relative_eq!(h[(1, 1)], -(0.7_f64).sin(), epsilon = 1e-3);
    }
}
