//! Model-based construction of prediction, cost and constraint matrices,
//! the rate-based (integral) augmentation, DARE/LQR utilities and the
//! terminal-penalty output augmentation for data-driven controllers.
//!
//! Conventions: the predicted outputs `Y = [y_1; ...; y_N]` over the horizon
//! satisfy `Y = Phi x + Gamma U` with `U = [u_0; ...; u_{N-1}]`.

use thiserror::Error;

use crate::linalg::{self, block_diag, cholesky, LinalgError, Matrix, Vector};
use crate::simsys::{ExperimentData, StateSpaceModel};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Riccati iteration did not converge after {0} iterations; (A, B) may not be stabilizable")]
    Unstabilizable(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, MpcError>;

/// Horizon prediction matrices `(Phi, Gamma)` of a discrete model.
///
/// Row block `i` (for `y_{i+1}`) of `Phi` is `C A^{i+1}`; block `(i, j)` of
/// `Gamma` is `C A^{i-j} B` for `j <= i` and zero above the diagonal.
pub fn build_prediction(model: &StateSpaceModel, horizon: usize) -> (Matrix, Matrix) {
    let (n, m, q) = (model.n_states(), model.n_inputs(), model.n_outputs());
    let mut phi = Matrix::zeros(horizon * q, n);
    let mut gamma = Matrix::zeros(horizon * q, horizon * m);

    // markov[i] = C A^i B
    let mut markov = Vec::with_capacity(horizon);
    let mut ca = model.c.clone();
    for i in 0..horizon {
        markov.push(&ca * &model.b);
        ca = &ca * &model.a;
        phi.view_mut((i * q, 0), (q, n)).copy_from(&ca);
    }
    for i in 0..horizon {
        for j in 0..=i {
            gamma
                .view_mut((i * q, j * m), (q, m))
                .copy_from(&markov[i - j]);
        }
    }
    (phi, gamma)
}

/// Rate-based augmentation
///
/// ```text
/// x_I(k+1) = [A 0; CA I] x_I(k) + [B; CB] du(k)
/// y(k)     = [0 I] x_I(k)
/// ```
///
/// with `x_I = [x(k) - x(k-1); y(k)]`. The disturbance channel is carried
/// through as `[Bd; C Bd]` acting on disturbance increments.
pub fn integral_model(model: &StateSpaceModel) -> StateSpaceModel {
    let (n, q) = (model.n_states(), model.n_outputs());
    let ca = &model.c * &model.a;
    let mut a = Matrix::zeros(n + q, n + q);
    a.view_mut((0, 0), (n, n)).copy_from(&model.a);
    a.view_mut((n, 0), (q, n)).copy_from(&ca);
    a.view_mut((n, n), (q, q)).fill_with_identity();
    let b = linalg::vstack(&[&model.b, &(&model.c * &model.b)]);
    let bd = linalg::vstack(&[&model.bd, &(&model.c * &model.bd)]);
    let mut c = Matrix::zeros(q, n + q);
    c.view_mut((0, n), (q, q)).fill_with_identity();
    StateSpaceModel {
        a,
        b,
        c,
        bd,
        ts: model.ts,
    }
}

/// `(Phi_I, Gamma_I)` of the rate-based model, built by applying
/// [`build_prediction`] to [`integral_model`].
pub fn build_integral_prediction(model: &StateSpaceModel, horizon: usize) -> (Matrix, Matrix) {
    build_prediction(&integral_model(model), horizon)
}

/// Closed form of the integral prediction matrices: row block `i` of
/// `Phi_I` is `[sum_{l=1..i} C A^l, I]`, block `(i, j)` of `Gamma_I` is
/// `sum_{l=0..i-j} C A^l B`.
pub fn integral_prediction_closed_form(model: &StateSpaceModel, horizon: usize) -> (Matrix, Matrix) {
    let (n, m, q) = (model.n_states(), model.n_inputs(), model.n_outputs());
    let (phi, gamma) = build_prediction(model, horizon);
    let mut phi_i = Matrix::zeros(horizon * q, n + q);
    let mut acc = Matrix::zeros(q, n);
    for i in 0..horizon {
        acc += phi.view((i * q, 0), (q, n));
        phi_i.view_mut((i * q, 0), (q, n)).copy_from(&acc);
        phi_i.view_mut((i * q, n), (q, q)).fill_with_identity();
    }
    let mut gamma_i = Matrix::zeros(horizon * q, horizon * m);
    for j in 0..horizon {
        let mut acc = Matrix::zeros(q, m);
        for i in j..horizon {
            acc += gamma.view((i * q, j * m), (q, m));
            gamma_i.view_mut((i * q, j * m), (q, m)).copy_from(&acc);
        }
    }
    (phi_i, gamma_i)
}

fn check_psd(mat: &Matrix, name: &str, strict: bool) -> Result<()> {
    if !mat.is_square() {
        return Err(MpcError::InvalidWeights(format!("{name} must be square")));
    }
    linalg::ensure_finite(mat, "weight")?;
    let scale = mat.amax().max(f64::MIN_POSITIVE);
    if (mat - mat.transpose()).amax() > 1e-10 * scale {
        return Err(MpcError::InvalidWeights(format!("{name} must be symmetric")));
    }
    if mat.nrows() == 0 {
        return Ok(());
    }
    let eig = mat.clone().symmetric_eigenvalues();
    let min = eig.min();
    let ok = if strict { min > 0.0 } else { min >= -1e-12 * scale };
    if ok {
        Ok(())
    } else {
        let kind = if strict { "positive definite" } else { "positive semidefinite" };
        Err(MpcError::InvalidWeights(format!("{name} must be {kind} (min eigenvalue {min:.3e})")))
    }
}

/// Stage and terminal weights of the horizon cost
/// `sum_{i=1}^{N-1} y_i' Q y_i + y_N' P y_N + sum_{i=0}^{N-1} u_i' R u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: Matrix,
    pub r: Matrix,
    pub p: Matrix,
    pub horizon: usize,
}

impl CostWeights {
    /// `p = None` uses `P = Q`.
    ///
    /// `Q` and `P` only need to be positive semidefinite so that the
    /// augmented weights of [`TerminalAugmentation`] are admissible.
    pub fn new(q: Matrix, r: Matrix, p: Option<Matrix>, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(MpcError::InvalidWeights("horizon must be >= 1".into()));
        }
        let p = p.unwrap_or_else(|| q.clone());
        check_psd(&q, "Q", false)?;
        check_psd(&r, "R", true)?;
        check_psd(&p, "P", false)?;
        if p.shape() != q.shape() {
            return Err(MpcError::InvalidWeights(format!(
                "P is {:?} but Q is {:?}",
                p.shape(),
                q.shape()
            )));
        }
        Ok(Self { q, r, p, horizon })
    }

    /// `Omega = diag(Q, ..., Q, P)`.
    pub fn omega(&self) -> Matrix {
        let mut blocks: Vec<&Matrix> = vec![&self.q; self.horizon - 1];
        blocks.push(&self.p);
        block_diag(&blocks)
    }

    /// `Psi = diag(R, ..., R)`.
    pub fn psi(&self) -> Matrix {
        block_diag(&vec![&self.r; self.horizon])
    }
}

/// Quadratic and linear cost terms of the condensed problem:
/// `J = 1/2 U' G U + U' F (v - R_k)` where `v` is the free response.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedCost {
    pub g: Matrix,
    pub f: Matrix,
}

/// `G = 2 (Psi + Gamma' Omega Gamma)`, `F = 2 Gamma' Omega`.
pub fn condense_cost(gamma: &Matrix, weights: &CostWeights) -> Result<CondensedCost> {
    let omega = weights.omega();
    let psi = weights.psi();
    if gamma.nrows() != omega.nrows() || gamma.ncols() != psi.nrows() {
        return Err(MpcError::Dimension(format!(
            "Gamma is {:?}, weights expect {}x{}",
            gamma.shape(),
            omega.nrows(),
            psi.nrows()
        )));
    }
    let gt_omega = gamma.transpose() * &omega;
    let mut g = (&psi + &gt_omega * gamma) * 2.0;
    // exact symmetry
    g = (&g + g.transpose()) * 0.5;
    cholesky(&g).map_err(|_| MpcError::InvalidWeights("G is not positive definite".into()))?;
    Ok(CondensedCost { g, f: gt_omega * 2.0 })
}

/// One stage of `M_i y_i + E_i u_i <= b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConstraint {
    pub m: Matrix,
    pub e: Matrix,
    pub b: Vector,
}

impl StageConstraint {
    pub fn empty(q: usize, m: usize) -> Self {
        Self {
            m: Matrix::zeros(0, q),
            e: Matrix::zeros(0, m),
            b: Vector::zeros(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.b.len()
    }

    fn push_rows(&mut self, m: &Matrix, e: &Matrix, b: &Vector) {
        self.m = linalg::vstack(&[&self.m, m]);
        self.e = linalg::vstack(&[&self.e, e]);
        let mut nb = Vector::zeros(self.b.len() + b.len());
        nb.rows_mut(0, self.b.len()).copy_from(&self.b);
        nb.rows_mut(self.b.len(), b.len()).copy_from(b);
        self.b = nb;
    }
}

/// Linear output/input constraints over the horizon: stages `0..N-1` plus
/// a terminal output constraint `M_N y_N <= b_N`. `soft` holds the slack
/// penalty weight when output rows may be relaxed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub stages: Vec<StageConstraint>,
    pub terminal_m: Matrix,
    pub terminal_b: Vector,
    pub soft: Option<f64>,
}

/// Bounds `lo <= v <= hi` per channel; infinite entries are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn symmetric(limit: f64, channels: usize) -> Self {
        Self {
            lo: vec![-limit; channels],
            hi: vec![limit; channels],
        }
    }

    /// Rows `[S; -S] v <= [hi; -lo]` for the finite bounds.
    fn rows(&self) -> (Matrix, Vector) {
        let ch = self.lo.len();
        let mut sel = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..ch {
            if self.hi[i].is_finite() {
                let mut row = vec![0.0; ch];
                row[i] = 1.0;
                sel.push(row);
                rhs.push(self.hi[i]);
            }
            if self.lo[i].is_finite() {
                let mut row = vec![0.0; ch];
                row[i] = -1.0;
                sel.push(row);
                rhs.push(-self.lo[i]);
            }
        }
        let s = Matrix::from_fn(sel.len(), ch, |r, c| sel[r][c]);
        (s, Vector::from_vec(rhs))
    }
}

impl ConstraintSpec {
    pub fn unconstrained(horizon: usize, q: usize, m: usize) -> Self {
        Self {
            stages: vec![StageConstraint::empty(q, m); horizon],
            terminal_m: Matrix::zeros(0, q),
            terminal_b: Vector::zeros(0),
            soft: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.terminal_m.ncols()
    }

    pub fn n_inputs(&self) -> usize {
        self.stages.first().map_or(0, |s| s.e.ncols())
    }

    pub fn total_rows(&self) -> usize {
        self.stages.iter().map(StageConstraint::rows).sum::<usize>() + self.terminal_b.len()
    }

    /// Adds `lo <= u_i <= hi` on every stage `i = 0..N-1`.
    pub fn with_input_box(mut self, bounds: &BoxBounds) -> Self {
        let (s, rhs) = bounds.rows();
        let q = self.n_outputs();
        let zeros = Matrix::zeros(s.nrows(), q);
        for st in &mut self.stages {
            st.push_rows(&zeros, &s, &rhs);
        }
        self
    }

    /// Adds `lo <= y_i <= hi` on the predicted outputs `i = 1..N`. The
    /// measured output `y_0` is left unconstrained.
    pub fn with_output_box(mut self, bounds: &BoxBounds) -> Self {
        let (s, rhs) = bounds.rows();
        let m = self.n_inputs();
        let zeros = Matrix::zeros(s.nrows(), m);
        let n = self.horizon();
        for st in self.stages.iter_mut().skip(1).take(n.saturating_sub(1)) {
            st.push_rows(&s, &zeros, &rhs);
        }
        self.terminal_m = linalg::vstack(&[&self.terminal_m, &s]);
        let mut tb = Vector::zeros(self.terminal_b.len() + rhs.len());
        tb.rows_mut(0, self.terminal_b.len()).copy_from(&self.terminal_b);
        tb.rows_mut(self.terminal_b.len(), rhs.len()).copy_from(&rhs);
        self.terminal_b = tb;
        self
    }

    pub fn with_soft(mut self, rho: Option<f64>) -> Self {
        self.soft = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.n_outputs();
        let m = self.n_inputs();
        if self.stages.is_empty() {
            return Err(MpcError::InvalidConstraints("no stages".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.m.nrows() != st.rows() || st.e.nrows() != st.rows() {
                return Err(MpcError::InvalidConstraints(format!("stage {i}: row counts differ")));
            }
            if st.m.ncols() != q || st.e.ncols() != m {
                return Err(MpcError::InvalidConstraints(format!("stage {i}: column counts differ")));
            }
            if st.b.iter().any(|v| !v.is_finite()) {
                return Err(MpcError::InvalidConstraints(format!("stage {i}: non-finite bound")));
            }
        }
        if self.terminal_m.nrows() != self.terminal_b.len() {
            return Err(MpcError::InvalidConstraints("terminal: row counts differ".into()));
        }
        if self.terminal_b.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::InvalidConstraints("terminal: non-finite bound".into()));
        }
        if let Some(rho) = self.soft {
            if !(rho > 0.0) || !rho.is_finite() {
                return Err(MpcError::InvalidConstraints(format!("slack penalty must be > 0, got {rho}")));
            }
        }
        Ok(())
    }
}

/// Aggregated constraints `D y(k) + M Y + E U <= c`, condensed to
/// `L U <= c - M v - D y(k) - P_u u(k-1)`.
///
/// `prev_input` (`P_u`) is non-empty only for the rate-based form where the
/// decision variables are input increments.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedConstraints {
    pub l: Matrix,
    pub mcal: Matrix,
    pub dcal: Matrix,
    pub ecal: Matrix,
    pub c: Vector,
    pub prev_input: Option<Matrix>,
    /// Rows that involve predicted outputs (candidates for softening).
    pub output_rows: Vec<usize>,
}

impl CondensedConstraints {
    pub fn rows(&self) -> usize {
        self.c.len()
    }

    /// Right-hand side for free response `v`, measured `y0` and, in rate
    /// form, the previously applied input.
    pub fn rhs(&self, v: &Vector, y0: &Vector, u_prev: Option<&Vector>) -> Vector {
        let mut rhs = &self.c - &self.mcal * v - &self.dcal * y0;
        if let (Some(pu), Some(u)) = (&self.prev_input, u_prev) {
            rhs -= pu * u;
        }
        rhs
    }
}

fn aggregate(spec: &ConstraintSpec) -> (Matrix, Matrix, Matrix, Vector, Vec<usize>) {
    let n = spec.horizon();
    let q = spec.n_outputs();
    let m = spec.n_inputs();
    let rows = spec.total_rows();
    let mut dcal = Matrix::zeros(rows, q);
    let mut mcal = Matrix::zeros(rows, n * q);
    let mut ecal = Matrix::zeros(rows, n * m);
    let mut c = Vector::zeros(rows);
    let mut output_rows = Vec::new();
    let mut r = 0;
    for (i, st) in spec.stages.iter().enumerate() {
        let k = st.rows();
        if i == 0 {
            dcal.view_mut((r, 0), (k, q)).copy_from(&st.m);
        } else {
            mcal.view_mut((r, (i - 1) * q), (k, q)).copy_from(&st.m);
        }
        ecal.view_mut((r, i * m), (k, m)).copy_from(&st.e);
        c.rows_mut(r, k).copy_from(&st.b);
        for j in 0..k {
            if i > 0 && st.m.row(j).amax() > 0.0 {
                output_rows.push(r + j);
            }
        }
        r += k;
    }
    let k = spec.terminal_b.len();
    mcal.view_mut((r, (n - 1) * q), (k, q)).copy_from(&spec.terminal_m);
    c.rows_mut(r, k).copy_from(&spec.terminal_b);
    output_rows.extend(r..r + k);
    (dcal, mcal, ecal, c, output_rows)
}

fn check_gamma(spec: &ConstraintSpec, gamma: &Matrix) -> Result<()> {
    spec.validate()?;
    let n = spec.horizon();
    if gamma.nrows() != n * spec.n_outputs() || gamma.ncols() != n * spec.n_inputs() {
        return Err(MpcError::Dimension(format!(
            "Gamma is {:?}, constraints expect {}x{}",
            gamma.shape(),
            n * spec.n_outputs(),
            n * spec.n_inputs()
        )));
    }
    Ok(())
}

/// Condensed constraints with the absolute inputs as decision variables:
/// `L = M Gamma + E`.
pub fn condense_constraints(spec: &ConstraintSpec, gamma: &Matrix) -> Result<CondensedConstraints> {
    check_gamma(spec, gamma)?;
    let (dcal, mcal, ecal, c, output_rows) = aggregate(spec);
    let l = &mcal * gamma + &ecal;
    Ok(CondensedConstraints {
        l,
        mcal,
        dcal,
        ecal,
        c,
        prev_input: None,
        output_rows,
    })
}

/// Condensed constraints for the rate-based controller, whose decision
/// variables are increments `dU`.
///
/// Absolute inputs are `U = S dU + (1 ⊗ I) u(k-1)` with `S` the block
/// lower-triangular summation matrix, so `E` acts through `E S` and the
/// previous input moves to the right-hand side. `gamma` is `Gamma_I`.
pub fn condense_constraints_rate(spec: &ConstraintSpec, gamma: &Matrix) -> Result<CondensedConstraints> {
    check_gamma(spec, gamma)?;
    let n = spec.horizon();
    let m = spec.n_inputs();
    let (dcal, mcal, ecal_abs, c, output_rows) = aggregate(spec);
    let mut sum = Matrix::zeros(n * m, n * m);
    for i in 0..n {
        for j in 0..=i {
            sum.view_mut((i * m, j * m), (m, m)).fill_with_identity();
        }
    }
    let ones = linalg::kron(&Matrix::from_element(n, 1, 1.0), &Matrix::identity(m, m));
    let ecal = &ecal_abs * sum;
    let l = &mcal * gamma + &ecal;
    Ok(CondensedConstraints {
        l,
        mcal,
        dcal,
        ecal,
        c,
        prev_input: Some(ecal_abs * ones),
        output_rows,
    })
}

pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 100_000;

/// Stabilizing solution of the discrete algebraic Riccati equation by
/// fixed-point iteration of
/// `P <- A'PA - A'PB (R + B'PB)^-1 B'PA + Qx`, starting from `P = Qx`.
pub fn solve_dare(a: &Matrix, b: &Matrix, qx: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || qx.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(MpcError::Dimension("solve_dare: inconsistent A, B, Qx, R".into()));
    }
    check_psd(qx, "Qx", false)?;
    check_psd(r, "R", true)?;
    let mut p = qx.clone();
    for _ in 0..DARE_MAX_ITER {
        // A diverging iterate overflows; report it as a non-stabilizable pair.
        let Ok(next) = riccati_step(a, b, qx, r, &p) else {
            break;
        };
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let delta = (&next - &p).norm();
        let scale = next.norm();
        p = next;
        if !scale.is_finite() {
            break;
        }
        if delta <= DARE_TOL * scale {
            return Ok(p);
        }
    }
    Err(MpcError::Unstabilizable(DARE_MAX_ITER))
}

fn riccati_step(a: &Matrix, b: &Matrix, qx: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let k = linalg::solve_spd(&s, &(&bt_p * a))?;
    let at_p = a.transpose() * p;
    let next = &at_p * a - (&at_p * b) * k + qx;
    Ok((&next + next.transpose()) * 0.5)
}

/// Residual `||Riccati(P) - P||_F / ||P||_F`.
pub fn dare_residual(a: &Matrix, b: &Matrix, qx: &Matrix, r: &Matrix, p: &Matrix) -> Result<f64> {
    let next = riccati_step(a, b, qx, r, p)?;
    Ok(linalg::rel_frobenius_error(&next, p))
}

/// Infinite-horizon LQR gain `K = (R + B'PB)^-1 B'PA` for `u = -K x`.
pub fn lqr_gain(a: &Matrix, b: &Matrix, qx: &Matrix, r: &Matrix) -> Result<Matrix> {
    let p = solve_dare(a, b, qx, r)?;
    let bt_p = b.transpose() * &p;
    Ok(linalg::solve_spd(&(r + &bt_p * b), &(bt_p * a))?)
}

/// Terminal state penalty expressed through an extra output `y_o = V x`
/// with `V' V = Qp`, so a controller built on outputs `[y; y_o]` with
/// weights `Q~ = diag(Q, 0)`, `P~ = diag(0, I)` carries the state penalty
/// `x_N' Qp x_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalAugmentation {
    pub v: Matrix,
    pub q_tilde: Matrix,
    pub p_tilde: Matrix,
}

impl TerminalAugmentation {
    pub fn new(qp: &Matrix, q: &Matrix) -> Result<Self> {
        let v = cholesky(qp)?;
        let n = v.nrows();
        let nq = q.nrows();
        let q_tilde = block_diag(&[q, &Matrix::zeros(n, n)]);
        let p_tilde = block_diag(&[&Matrix::zeros(nq, nq), &Matrix::identity(n, n)]);
        Ok(Self { v, q_tilde, p_tilde })
    }

    /// Model with output matrix `[C; V]`.
    pub fn augment_model(&self, model: &StateSpaceModel) -> Result<StateSpaceModel> {
        if self.v.ncols() != model.n_states() {
            return Err(MpcError::Dimension("terminal weight size differs from state count".into()));
        }
        let mut out = model.clone();
        out.c = linalg::vstack(&[&model.c, &self.v]);
        Ok(out)
    }

    /// Appends `y_o(k) = V x(k)` rows to recorded outputs. Needs the state
    /// trajectory.
    pub fn augment_data(&self, data: &ExperimentData) -> Result<ExperimentData> {
        let x = data
            .x
            .as_ref()
            .ok_or_else(|| MpcError::Dimension("terminal augmentation needs measured states".into()))?;
        if x.nrows() != self.v.ncols() {
            return Err(MpcError::Dimension("terminal weight size differs from state count".into()));
        }
        let yo = &self.v * x;
        Ok(ExperimentData {
            u: data.u.clone(),
            y: linalg::vstack(&[&data.y, &yo]),
            x: data.x.clone(),
            ts: data.ts,
        })
    }

    pub fn weights(&self, r: &Matrix, horizon: usize) -> Result<CostWeights> {
        CostWeights::new(self.q_tilde.clone(), r.clone(), Some(self.p_tilde.clone()), horizon)
    }
}
