//! Dense strictly convex QP
//!
//! ```text
//! min 1/2 x' G x + f' x   s.t.  A x <= b
//! ```
//!
//! solved with Hildreth's dual coordinate ascent, plus the unconstrained
//! closed form and a slack-variable relaxation for soft constraints.
//!
//! Hildreth sweeps can crawl on degenerate or infeasible problems. The
//! iterate is periodically polished by an exact solve on its active set,
//! and when the sweeps stall or the multipliers drift along a direction
//! with `b'd < 0` (the signature of an unbounded dual), a Goldfarb-Idnani
//! dual active-set pass on the same precomputed factors settles optimality
//! or infeasibility in finitely many steps.

use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::estimation::matrix_section;
use crate::linalg::{self, LinalgError, Matrix, Vector};

#[derive(Debug, Error)]
pub enum QpError {
    #[error("invalid QP: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, QpError>;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub g: Matrix,
    pub f: Vector,
    pub a: Matrix,
    pub b: Vector,
}

impl QpProblem {
    pub fn new(g: Matrix, f: Vector, a: Matrix, b: Vector) -> Result<Self> {
        let qp = Self { g, f, a, b };
        qp.validate()?;
        Ok(qp)
    }

    pub fn unconstrained(g: Matrix, f: Vector) -> Result<Self> {
        let n = f.len();
        Self::new(g, f, Matrix::zeros(0, n), Vector::zeros(0))
    }

    pub fn n_vars(&self) -> usize {
        self.f.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f.len();
        if self.g.shape() != (n, n) {
            return Err(QpError::Invalid(format!("G is {:?}, f has length {n}", self.g.shape())));
        }
        if self.a.ncols() != n || self.a.nrows() != self.b.len() {
            return Err(QpError::Invalid(format!(
                "A is {:?}, b has length {}, expected {n} columns",
                self.a.shape(),
                self.b.len()
            )));
        }
        linalg::ensure_finite(&self.g, "G")?;
        linalg::ensure_finite(&Matrix::from_column_slice(n, 1, self.f.as_slice()), "f")?;
        linalg::ensure_finite(&self.a, "A")?;
        if self.b.iter().any(|v| v.is_nan()) {
            return Err(LinalgError::NonFinite("b").into());
        }
        Ok(())
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.g * x)) + self.f.dot(x)
    }

    /// Flat text dump: `G`, `f`, `A`, `b` sections as in the predictor format.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ddpc-qp v1 nv={} nc={}", self.n_vars(), self.n_constraints())?;
        let f = Matrix::from_column_slice(self.f.len(), 1, self.f.as_slice());
        let b = Matrix::from_column_slice(self.b.len(), 1, self.b.as_slice());
        for (name, m) in [("G", &self.g), ("f", &f), ("A", &self.a), ("b", &b)] {
            w.write_all(matrix_section(name, m).as_bytes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max-iterations",
            QpStatus::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub primal: Vector,
    pub dual: Vector,
    pub status: QpStatus,
    /// Number of full Hildreth sweeps.
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Dual objective after every sweep, when requested.
    pub dual_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Sweep limit; `None` means `100 n_c + 1000`.
    pub max_iter: Option<usize>,
    pub tol: f64,
    pub record_dual_trace: bool,
    /// Try an exact solve on the current active set every this many sweeps.
    pub polish_every: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: None,
            tol: 1e-9,
            record_dual_trace: false,
            polish_every: 10,
        }
    }
}

/// Multiplier magnitude beyond which the dual is taken to diverge.
pub const DUAL_DIVERGENCE: f64 = 1e12;
const DRIFT_CHECK_EVERY: usize = 50;

/// `-G^-1 f` by Cholesky.
pub fn solve_unconstrained(g: &Matrix, f: &Vector) -> Result<Vector> {
    let rhs = Matrix::from_column_slice(f.len(), 1, f.as_slice());
    let x = linalg::solve_spd(g, &rhs)?;
    Ok(-Vector::from_column_slice(x.as_slice()))
}

/// Hildreth solver with the Hessian-dependent factors precomputed, for
/// repeated solves with the same `G` and `A` but changing `f` and `b`.
#[derive(Debug, Clone)]
pub struct HildrethSolver {
    g: Matrix,
    a: Matrix,
    g_inv: Matrix,
    /// `A G^-1`
    a_ginv: Matrix,
    /// `A G^-1 A'`
    h: Matrix,
}

impl HildrethSolver {
    pub fn new(g: &Matrix, a: &Matrix) -> Result<Self> {
        if g.nrows() != g.ncols() || a.ncols() != g.nrows() {
            return Err(QpError::Invalid(format!(
                "G is {:?}, A is {:?}",
                g.shape(),
                a.shape()
            )));
        }
        let g_inv = linalg::inverse_spd(g)?;
        let a_ginv = a * &g_inv;
        let h = &a_ginv * a.transpose();
        Ok(Self {
            g: g.clone(),
            a: a.clone(),
            g_inv,
            a_ginv,
            h,
        })
    }

    pub fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    /// KKT certificate of `sol` for the problem with this `G`, `A` and the
    /// given `f`, `b`.
    pub fn certificate(&self, f: &Vector, b: &Vector, sol: &QpSolution) -> KktReport {
        let qp = QpProblem {
            g: self.g.clone(),
            f: f.clone(),
            a: self.a.clone(),
            b: b.clone(),
        };
        kkt_report(&qp, &sol.primal, &sol.dual)
    }

    fn dual_objective(&self, lambda: &Vector, k: &Vector, f_term: f64) -> f64 {
        -0.5 * lambda.dot(&(&self.h * lambda)) - lambda.dot(k) - f_term
    }

    fn primal(&self, x_unc: &Vector, lambda: &Vector) -> Vector {
        x_unc - self.a_ginv.tr_mul(lambda)
    }

    /// Active-set refinement seeded with the support of `lambda`: solve
    /// `H_SS lambda_S = -K_S`, drop the most negative multiplier or add the
    /// most violated row, repeat. Returns only a verified KKT point, so the
    /// dual objective never drops below the Hildreth iterate's.
    fn polish(&self, lambda: &Vector, k: &Vector, b: &Vector, x_unc: &Vector, tol: f64) -> Option<(Vector, Vector)> {
        let nc = lambda.len();
        // largest multipliers first; at most n rows can be independent
        let mut support: Vec<usize> = (0..nc).filter(|&i| lambda[i] > 0.0).collect();
        support.sort_by(|&i, &j| lambda[j].total_cmp(&lambda[i]));
        support.truncate(self.g.nrows());
        for _ in 0..3 * nc + 10 {
            let mut candidate = Vector::zeros(nc);
            if !support.is_empty() {
                let hss = Matrix::from_fn(support.len(), support.len(), |r, c| self.h[(support[r], support[c])]);
                let ks = Matrix::from_fn(support.len(), 1, |r, _| -k[support[r]]);
                let Some(sol) = hss.lu().solve(&ks) else {
                    support.pop();
                    continue;
                };
                let (worst, min) = (0..support.len())
                    .map(|r| (r, sol[(r, 0)]))
                    .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
                if !min.is_finite() {
                    return None;
                }
                if min < 0.0 {
                    support.remove(worst);
                    continue;
                }
                for (r, &i) in support.iter().enumerate() {
                    candidate[i] = sol[(r, 0)];
                }
            }
            let x = self.primal(x_unc, &candidate);
            let ax = &self.a * &x;
            let scaled = |i: usize| (ax[i] - b[i]) / (1.0 + b[i].abs());
            if support.iter().any(|&i| scaled(i).abs() > tol) {
                // near-singular active set: the equality solve is not trustworthy
                support.pop();
                continue;
            }
            let violated = (0..nc)
                .filter(|i| !support.contains(i))
                .map(|i| (i, scaled(i)))
                .filter(|(_, v)| *v > tol)
                .fold(None, |acc: Option<(usize, f64)>, v| match acc {
                    Some(a) if a.1 >= v.1 => Some(a),
                    _ => Some(v),
                });
            match violated {
                None => return Some((x, candidate)),
                Some((i, _)) => support.push(i),
            }
        }
        None
    }

    /// Goldfarb-Idnani dual active-set pass from the unconstrained optimum:
    /// repeatedly adds the most violated row, dropping rows whose
    /// multiplier would turn negative. Terminates finitely with a KKT point,
    /// or with a proof of infeasibility when a violated row is a
    /// nonnegative combination of the active ones.
    fn dual_active_set(&self, b: &Vector, x_unc: &Vector, tol: f64) -> (Vector, Vector, QpStatus) {
        let nc = self.a.nrows();
        let mut x = x_unc.clone();
        let mut lambda = Vector::zeros(nc);
        let mut active: Vec<usize> = Vec::new();
        let scaled = |x: &Vector, i: usize| (self.a.row(i) * x)[0] - b[i];
        'outer: for _ in 0..10 * (nc + self.g.nrows()) + 50 {
            let ax = &self.a * &x;
            let Some(p) = (0..nc)
                .filter(|i| !active.contains(i))
                .map(|i| (i, (ax[i] - b[i]) / (1.0 + b[i].abs())))
                .filter(|(_, v)| *v > tol)
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
            else {
                return (x, lambda, QpStatus::Optimal);
            };
            let ginv_ap = self.a_ginv.row(p).transpose();
            loop {
                // r = (A_S G^-1 A_S')^-1 A_S G^-1 a_p,  z = -(G^-1 a_p - G^-1 A_S' r)
                let r = if active.is_empty() {
                    Vector::zeros(0)
                } else {
                    let m = Matrix::from_fn(active.len(), active.len(), |i, j| self.h[(active[i], active[j])]);
                    let rhs = Vector::from_fn(active.len(), |i, _| self.h[(active[i], p)]);
                    match m.lu().solve(&rhs) {
                        Some(r) => r,
                        None => break 'outer,
                    }
                };
                let mut z = -&ginv_ap;
                for (j, &i) in active.iter().enumerate() {
                    z += self.a_ginv.row(i).transpose() * r[j];
                }
                let curvature = -(self.a.row(p) * &z)[0];
                let full_step = active.len() < self.g.nrows() && curvature > 1e-10 * self.h[(p, p)];
                let mut partial: Option<(usize, f64)> = None;
                for (j, &i) in active.iter().enumerate() {
                    if r[j] > 0.0 {
                        let t = lambda[i] / r[j];
                        if partial.is_none_or(|(_, best)| t < best) {
                            partial = Some((j, t));
                        }
                    }
                }
                let t2 = if full_step { scaled(&x, p) / curvature } else { f64::INFINITY };
                let (t, drop) = match partial {
                    Some((j, t1)) if t1 < t2 => (t1, Some(j)),
                    _ if t2.is_finite() => (t2, None),
                    _ => return (x, lambda, QpStatus::Infeasible),
                };
                if full_step {
                    x += &z * t;
                }
                for (j, &i) in active.iter().enumerate() {
                    lambda[i] = (lambda[i] - t * r[j]).max(0.0);
                }
                lambda[p] += t;
                match drop {
                    Some(j) => {
                        let i = active.remove(j);
                        lambda[i] = 0.0;
                    }
                    None => {
                        active.push(p);
                        continue 'outer;
                    }
                }
            }
        }
        (x, lambda, QpStatus::MaxIterations)
    }

    pub fn solve(&self, f: &Vector, b: &Vector, warm: Option<&Vector>, opts: &QpOptions) -> Result<QpSolution> {
        let (n, nc) = (self.g.nrows(), self.a.nrows());
        if f.len() != n || b.len() != nc {
            return Err(QpError::Invalid(format!(
                "f has length {}, b has length {}; expected {n} and {nc}",
                f.len(),
                b.len()
            )));
        }
        let x_unc = -(&self.g_inv * f);
        let finish = |x: Vector, lambda: Vector, status, iterations, trace| {
            let qp = QpProblem {
                g: self.g.clone(),
                f: f.clone(),
                a: self.a.clone(),
                b: b.clone(),
            };
            let kkt = kkt_report(&qp, &x, &lambda).residual();
            QpSolution {
                primal: x,
                dual: lambda,
                status,
                iterations,
                kkt_residual: kkt,
                dual_trace: trace,
            }
        };
        if nc == 0 {
            return Ok(finish(x_unc, Vector::zeros(0), QpStatus::Optimal, 0, Vec::new()));
        }
        for i in 0..nc {
            if self.h[(i, i)] <= 0.0 && b[i] < 0.0 {
                return Ok(finish(x_unc, Vector::zeros(nc), QpStatus::Infeasible, 0, Vec::new()));
            }
        }

        // K = b + A G^-1 f
        let k = b - &self.a * &x_unc;
        // already feasible: the unconstrained optimum is the answer
        if k.iter().all(|v| *v >= 0.0) && warm.is_none_or(|w| w.iter().all(|v| *v == 0.0)) {
            return Ok(finish(x_unc, Vector::zeros(nc), QpStatus::Optimal, 0, Vec::new()));
        }
        let f_term = 0.5 * f.dot(&(&self.g_inv * f));
        let mut lambda = match warm {
            Some(w) if w.len() == nc => w.map(|v| v.max(0.0)),
            _ => Vector::zeros(nc),
        };
        let max_iter = opts.max_iter.unwrap_or(100 * nc + 1000);
        let mut trace = Vec::new();
        let mut checkpoint = lambda.clone();

        for sweep in 1..=max_iter {
            let mut delta: f64 = 0.0;
            for i in 0..nc {
                let hii = self.h[(i, i)];
                if hii <= 0.0 {
                    lambda[i] = 0.0;
                    continue;
                }
                let w = self.h.row(i).dot(&lambda.transpose()) - hii * lambda[i] + k[i];
                let new = (-w / hii).max(0.0);
                delta = delta.max((new - lambda[i]).abs());
                lambda[i] = new;
            }
            if opts.record_dual_trace {
                trace.push(self.dual_objective(&lambda, &k, f_term));
            }
            let lmax = lambda.amax();
            if !lmax.is_finite() || lmax > DUAL_DIVERGENCE {
                let x = self.primal(&x_unc, &lambda);
                return Ok(finish(x, lambda, QpStatus::Infeasible, sweep, trace));
            }
            let polish_now = opts.polish_every > 0 && sweep % opts.polish_every == 0;
            let converged = delta <= opts.tol * lmax.max(1.0);
            if converged || polish_now {
                if let Some((x, lam)) = self.polish(&lambda, &k, b, &x_unc, 1e-9) {
                    if opts.record_dual_trace {
                        trace.push(self.dual_objective(&lam, &k, f_term));
                    }
                    return Ok(finish(x, lam, QpStatus::Optimal, sweep, trace));
                }
            }
            // stalled, or multipliers drifting along a direction with b'd < 0
            // as they do when the dual is unbounded
            let drifting = sweep % DRIFT_CHECK_EVERY == 0 && {
                let d = (&lambda - &checkpoint).map(|v| v.max(0.0));
                checkpoint.copy_from(&lambda);
                b.dot(&d) < 0.0
            };
            if converged || drifting {
                return Ok(self.finish_exact(b, &x_unc, &k, f_term, sweep, trace, opts, &finish));
            }
        }
        Ok(self.finish_exact(b, &x_unc, &k, f_term, max_iter, trace, opts, &finish))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_exact(
        &self,
        b: &Vector,
        x_unc: &Vector,
        k: &Vector,
        f_term: f64,
        sweeps: usize,
        mut trace: Vec<f64>,
        opts: &QpOptions,
        finish: &dyn Fn(Vector, Vector, QpStatus, usize, Vec<f64>) -> QpSolution,
    ) -> QpSolution {
        let (x, lam, status) = self.dual_active_set(b, x_unc, 1e-10);
        if status == QpStatus::Optimal && opts.record_dual_trace {
            trace.push(self.dual_objective(&lam, k, f_term));
        }
        finish(x, lam, status, sweeps, trace)
    }
}

pub fn solve(qp: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    qp.validate()?;
    HildrethSolver::new(&qp.g, &qp.a)?.solve(&qp.f, &qp.b, None, opts)
}

/// Adds a slack `s_j >= 0` for each row in `soft_rows`: the row becomes
/// `A_j x - s_j <= b_j` and the cost gains `rho/2 s_j^2`. The decision
/// vector is `[x; s]`.
pub fn soften(qp: &QpProblem, soft_rows: &[usize], rho: f64) -> Result<QpProblem> {
    if soft_rows.is_empty() {
        return Ok(qp.clone());
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(QpError::Invalid(format!("soft penalty must be positive, got {rho}")));
    }
    let (n, nc, ns) = (qp.n_vars(), qp.n_constraints(), soft_rows.len());
    if let Some(bad) = soft_rows.iter().find(|&&r| r >= nc) {
        return Err(QpError::Invalid(format!("soft row {bad} out of range ({nc} rows)")));
    }
    let g = linalg::block_diag(&[&qp.g, &(Matrix::identity(ns, ns) * rho)]);
    let mut f = Vector::zeros(n + ns);
    f.rows_mut(0, n).copy_from(&qp.f);
    let mut a = Matrix::zeros(nc + ns, n + ns);
    a.view_mut((0, 0), (nc, n)).copy_from(&qp.a);
    for (j, &r) in soft_rows.iter().enumerate() {
        a[(r, n + j)] = -1.0;
        a[(nc + j, n + j)] = -1.0;
    }
    let mut b = Vector::zeros(nc + ns);
    b.rows_mut(0, nc).copy_from(&qp.b);
    QpProblem::new(g, f, a, b)
}

/// Componentwise KKT violations of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `|G x + f + A' lambda|_inf`
    pub stationarity: f64,
    /// `max (A x - b)+ / (1 + |b|)` over rows
    pub primal_violation: f64,
    /// `max (-lambda)+`
    pub dual_violation: f64,
    /// `max |lambda_i (A_i x - b_i)| / (1 + |lambda|_inf)`
    pub complementarity: f64,
    pub f_scale: f64,
}

impl KktReport {
    pub fn residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_violation)
            .max(self.dual_violation)
            .max(self.complementarity)
    }

    pub fn passes(&self) -> bool {
        self.stationarity <= 1e-6 * (1.0 + self.f_scale)
            && self.primal_violation <= 1e-8
            && self.dual_violation <= 1e-12
            && self.complementarity <= 1e-6
    }
}

pub fn kkt_report(qp: &QpProblem, x: &Vector, lambda: &Vector) -> KktReport {
    let grad = &qp.g * x + &qp.f + qp.a.tr_mul(lambda);
    let slack = &qp.a * x - &qp.b;
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..slack.len() {
        primal = primal.max(slack[i].max(0.0) / (1.0 + qp.b[i].abs()));
        comp = comp.max((lambda[i] * slack[i]).abs());
    }
    let lambda_scale = 1.0 + lambda.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    KktReport {
        stationarity: grad.amax(),
        primal_violation: primal,
        dual_violation: lambda.iter().fold(0.0, |m, v| m.max(-v)),
        complementarity: comp / lambda_scale,
        f_scale: qp.f.amax(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn box2() -> QpProblem {
        QpProblem::new(
            Matrix::identity(2, 2),
            dvector![-1.0, -1.0],
            dmatrix![1.0, 0.0; 0.0, 1.0],
            dvector![0.5, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_examples() {
        let x = solve_unconstrained(&Matrix::identity(2, 2), &dvector![1.0, -2.0]).unwrap();
        assert_eq!(x, dvector![-1.0, 2.0]);
        let x = solve_unconstrained(&dmatrix![4.0], &dvector![0.0]).unwrap();
        assert_eq!(x, dvector![0.0]);
        assert!(solve_unconstrained(&dmatrix![-1.0], &dvector![1.0]).is_err());
    }

    #[test]
    fn clipped_coordinate() {
        let sol = solve(&box2(), &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((&sol.primal - dvector![0.5, 1.0]).amax() < 1e-10);
        assert!((&sol.dual - dvector![0.5, 0.0]).amax() < 1e-10);
        assert!(kkt_report(&box2(), &sol.primal, &sol.dual).passes());
    }

    #[test]
    fn inactive_constraints_match_unconstrained() {
        let mut qp = box2();
        qp.b = dvector![5.0, 5.0];
        let sol = solve(&qp, &QpOptions::default()).unwrap();
        let x = solve_unconstrained(&qp.g, &qp.f).unwrap();
        assert!((sol.primal - x).amax() < 1e-8);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let qp = QpProblem::new(dmatrix![1.0], dvector![0.0], dmatrix![1.0; -1.0], dvector![0.0, -1.0]).unwrap();
        let sol = solve(&qp, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let zero_row = QpProblem::new(dmatrix![1.0], dvector![0.0], dmatrix![0.0], dvector![-1.0]).unwrap();
        assert_eq!(solve(&zero_row, &QpOptions::default()).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn invalid_problems() {
        assert!(QpProblem::new(dmatrix![1.0], dvector![0.0, 1.0], Matrix::zeros(0, 2), Vector::zeros(0)).is_err());
        let not_pd = QpProblem::new(dmatrix![0.0], dvector![1.0], Matrix::zeros(0, 1), Vector::zeros(0)).unwrap();
        assert!(solve(&not_pd, &QpOptions::default()).is_err());
        assert!(QpProblem::new(dmatrix![f64::NAN], dvector![0.0], Matrix::zeros(0, 1), Vector::zeros(0)).is_err());
    }

    #[test]
    fn soft_single_violated_row() {
        let hard = QpProblem::new(dmatrix![1.0], dvector![0.0], dmatrix![1.0], dvector![-1.0]).unwrap();
        assert_eq!(soften(&hard, &[], 10.0).unwrap(), hard);
        let soft = soften(&hard, &[0], 10.0).unwrap();
        assert_eq!(soft.n_vars(), 2);
        assert_eq!(soft.n_constraints(), 2);
        let sol = solve(&soft, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.primal[1] - 1.0 / 11.0).abs() < 1e-10);
        assert!((sol.primal[0] + 10.0 / 11.0).abs() < 1e-10);
        assert!(soften(&hard, &[3], 10.0).is_err());
        assert!(soften(&hard, &[0], 0.0).is_err());
    }

    #[test]
    fn soft_infeasible_pair_becomes_feasible() {
        let qp = QpProblem::new(dmatrix![1.0], dvector![0.0], dmatrix![1.0; -1.0], dvector![0.0, -1.0]).unwrap();
        let sol = solve(&soften(&qp, &[1], 100.0).unwrap(), &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.primal[0].abs() < 1e-9 && (sol.primal[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn large_penalty_recovers_hard_solution() {
        let hard = box2();
        let hard_sol = solve(&hard, &QpOptions::default()).unwrap();
        let soft = soften(&hard, &[0, 1], 1e9).unwrap();
        let sol = solve(&soft, &QpOptions::default()).unwrap();
        assert!((sol.primal.rows(0, 2) - hard_sol.primal).amax() < 1e-4);
    }

    #[test]
    fn dual_ascent_is_monotone() {
        let qp = QpProblem::new(
            dmatrix![2.0, 0.5, 0.0; 0.5, 1.0, 0.2; 0.0, 0.2, 3.0],
            dvector![-4.0, -3.0, 1.0],
            dmatrix![1.0, 1.0, 0.0; 0.0, 1.0, 1.0; 1.0, -1.0, 1.0; -1.0, 0.0, 0.0],
            dvector![1.0, 0.5, 0.2, 0.3],
        )
        .unwrap();
        let opts = QpOptions {
            record_dual_trace: true,
            polish_every: 0,
            ..Default::default()
        };
        let sol = solve(&qp, &opts).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.dual_trace.len() > 1);
        for w in sol.dual_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{} -> {}", w[0], w[1]);
        }
        // strong duality at the end
        let primal = qp.objective(&sol.primal);
        assert!((primal - sol.dual_trace.last().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn warm_start_reuses_multipliers() {
        let qp = box2();
        let solver = HildrethSolver::new(&qp.g, &qp.a).unwrap();
        let opts = QpOptions { polish_every: 0, ..Default::default() };
        let cold = solver.solve(&qp.f, &qp.b, None, &opts).unwrap();
        let warm = solver.solve(&qp.f, &qp.b, Some(&cold.dual), &opts).unwrap();
        assert!(warm.iterations <= cold.iterations);
        assert!((warm.primal - cold.primal).amax() < 1e-10);
    }

    #[test]
    fn text_dump() {
        let mut buf = Vec::new();
        box2().write_text(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("ddpc-qp v1 nv=2 nc=2\nG 2 2\n"));
        assert!(s.contains("\nb 2 1\n"));
    }
}
