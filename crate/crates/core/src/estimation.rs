//! Hankel data matrices and least-squares estimation of the predictor
//! matrices `[P1 P2 Gamma]`, the state map `Phi`, the on-line free
//! response and the rate-based (integral) predictor.
//!
//! For past/future windows of length `N` and `L + 1` columns, the data
//! satisfy `Yf = P1 Up + P2 Yp + Gamma Uf` with `P1 = Phi (D + M Gamma)` and
//! `P2 = -Phi M`, where `A^N + M Phi = 0`. `M` is not unique and never
//! formed; only the products are identified.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use log::warn;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::simsys::ExperimentData;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("{what}: need at least {required}, got {got}")]
    Sizing {
        what: &'static str,
        required: usize,
        got: usize,
    },
    #[error(
        "{what} is not persistently exciting: sigma_min/sigma_max = {ratio:.3e} < {threshold:.1e}; \
         use a richer or longer excitation"
    )]
    Excitation {
        what: &'static str,
        ratio: f64,
        threshold: f64,
    },
    #[error("state trajectory required but the experiment has no recorded states")]
    StateRequired,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("predictor file: {0}")]
    Parse(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

/// Past/future block-Hankel matrices of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    pub up: Matrix,
    pub yp: Matrix,
    pub uf: Matrix,
    pub yf: Matrix,
    pub xp: Option<Matrix>,
    pub xf: Option<Matrix>,
    pub horizon: usize,
    pub l: usize,
}

impl HankelSet {
    pub fn n_inputs(&self) -> usize {
        self.up.nrows() / self.horizon
    }
    pub fn n_outputs(&self) -> usize {
        self.yp.nrows() / self.horizon
    }

    /// Regressor `W = [Up; Yp; Uf]`.
    pub fn regressor(&self) -> Matrix {
        linalg::vstack(&[&self.up, &self.yp, &self.uf])
    }

    /// Minimum measurement horizon `N (2m + q)` for the least-squares fit.
    pub fn min_measurement_horizon(&self) -> usize {
        self.horizon * (2 * self.n_inputs() + self.n_outputs())
    }
}

/// Column `j` stacks `signal(:, start + j) ... signal(:, start + j + rows - 1)`.
pub fn block_hankel(signal: &Matrix, start: usize, block_rows: usize, cols: usize) -> Matrix {
    let ch = signal.nrows();
    Matrix::from_fn(block_rows * ch, cols, |r, j| {
        signal[(r % ch, start + j + r / ch)]
    })
}

/// Builds the Hankel set with `L + 1` columns:
///
/// - `Up` column `j`: `u(j) .. u(j+N-1)`
/// - `Yp` column `j`: `y(j+1) .. y(j+N)`
/// - `Uf` column `j`: `u(N+j) .. u(2N+j-1)`
/// - `Yf` column `j`: `y(N+j+1) .. y(2N+j)`
/// - `Xp` column `j`: `x(j)`, `Xf` column `j`: `x(N+j)`
///
/// Needs `T >= 2N + L + 1` samples. The solvability bound on `L` is
/// checked by [`estimate_predictor`].
pub fn build_hankels(data: &ExperimentData, horizon: usize, l: usize, include_states: bool) -> Result<HankelSet> {
    if horizon == 0 {
        return Err(EstimationError::Sizing {
            what: "prediction horizon N",
            required: 1,
            got: 0,
        });
    }
    let required = 2 * horizon + l + 1;
    if data.len() < required {
        return Err(EstimationError::Sizing {
            what: "experiment length T >= 2N + L + 1",
            required,
            got: data.len(),
        });
    }
    let cols = l + 1;
    let (xp, xf) = if include_states {
        let x = data.x.as_ref().ok_or(EstimationError::StateRequired)?;
        (
            Some(x.columns(0, cols).into_owned()),
            Some(x.columns(horizon, cols).into_owned()),
        )
    } else {
        (None, None)
    };
    Ok(HankelSet {
        up: block_hankel(&data.u, 0, horizon, cols),
        yp: block_hankel(&data.y, 1, horizon, cols),
        uf: block_hankel(&data.u, horizon, horizon, cols),
        yf: block_hankel(&data.y, horizon + 1, horizon, cols),
        xp,
        xf,
        horizon,
        l,
    })
}

/// Estimated predictor. With `integral = true` the matrices predict the
/// rate-based system (inputs are increments, `Gamma` estimates `Gamma_I`).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorMatrices {
    pub p1: Matrix,
    pub p2: Matrix,
    pub gamma: Matrix,
    pub phi: Option<Matrix>,
    pub horizon: usize,
    pub m: usize,
    pub q: usize,
    pub integral: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationOptions {
    /// Relative truncation for the pseudo-inverse; `None` uses the default.
    pub pinv_tol: Option<f64>,
    /// Minimum `sigma_min / sigma_max` of the stacked input Hankels.
    pub excitation_threshold: f64,
    /// Warn instead of failing on poor excitation.
    pub permissive: bool,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            pinv_tol: None,
            excitation_threshold: 1e-10,
            permissive: false,
        }
    }
}

/// Conditioning diagnostics of the regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitationReport {
    pub w_sigma_max: f64,
    pub w_sigma_min: f64,
    /// Numerical rank of `W` at the pseudo-inverse truncation.
    pub w_rank: usize,
    pub w_rows: usize,
    /// `sigma_min / sigma_max` of `[Up; Uf]`.
    pub input_ratio: f64,
}

pub fn excitation_report(h: &HankelSet, opts: &EstimationOptions) -> Result<ExcitationReport> {
    let w = h.regressor();
    let s = linalg::singular_values(&w)?;
    let tol = opts
        .pinv_tol
        .unwrap_or_else(|| linalg::default_pinv_tol(w.nrows(), w.ncols()));
    let smax = s.max();
    let rank = s.iter().filter(|v| **v > tol * smax).count();
    let inputs = linalg::vstack(&[&h.up, &h.uf]);
    let si = linalg::singular_values(&inputs)?;
    let input_ratio = if si.max() > 0.0 { si.min() / si.max() } else { 0.0 };
    Ok(ExcitationReport {
        w_sigma_max: smax,
        w_sigma_min: s.min(),
        w_rank: rank,
        w_rows: w.nrows(),
        input_ratio,
    })
}

fn check_ratio(what: &'static str, ratio: f64, opts: &EstimationOptions) -> Result<()> {
    if ratio >= opts.excitation_threshold {
        return Ok(());
    }
    if opts.permissive {
        warn!("{what} poorly excited: sigma ratio {ratio:.3e}");
        Ok(())
    } else {
        Err(EstimationError::Excitation {
            what,
            ratio,
            threshold: opts.excitation_threshold,
        })
    }
}

/// Least-squares `[P1 P2 Gamma] = Yf W^+`.
///
/// The output rows of `W` are rank deficient whenever the system order is
/// below `N q`; `Gamma` stays identifiable as long as the input Hankels
/// `[Up; Uf]` have full row rank, which is what the excitation check tests.
pub fn estimate_predictor(h: &HankelSet, opts: &EstimationOptions) -> Result<PredictorMatrices> {
    let (n, m, q) = (h.horizon, h.n_inputs(), h.n_outputs());
    let required = h.min_measurement_horizon();
    if h.l < required {
        return Err(EstimationError::Sizing {
            what: "measurement horizon L >= N (2m + q)",
            required,
            got: h.l,
        });
    }
    let inputs = linalg::vstack(&[&h.up, &h.uf]);
    let si = linalg::singular_values(&inputs)?;
    let ratio = if si.max() > 0.0 { si.min() / si.max() } else { 0.0 };
    check_ratio("input data [Up; Uf]", ratio, opts)?;

    let w = h.regressor();
    let theta = &h.yf * linalg::pinv(&w, opts.pinv_tol)?;
    let rows = n * q;
    Ok(PredictorMatrices {
        p1: theta.view((0, 0), (rows, n * m)).into_owned(),
        p2: theta.view((0, n * m), (rows, n * q)).into_owned(),
        gamma: theta.view((0, n * (m + q)), (rows, n * m)).into_owned(),
        phi: None,
        horizon: n,
        m,
        q,
        integral: false,
    })
}

impl PredictorMatrices {
    /// Prediction `P1 Up + P2 Yp + Gamma Uf` of `Yf`.
    pub fn predict_future(&self, h: &HankelSet) -> Matrix {
        &self.p1 * &h.up + &self.p2 * &h.yp + &self.gamma * &h.uf
    }

    pub fn with_phi(mut self, phi: Matrix) -> Self {
        self.phi = Some(phi);
        self
    }

    pub fn n_phi_states(&self) -> Option<usize> {
        self.phi.as_ref().map(|p| p.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, q) = (self.horizon, self.m, self.q);
        let check = |mat: &Matrix, r: usize, c: usize, name: &str| {
            if mat.shape() != (r, c) {
                Err(EstimationError::Dimension(format!(
                    "{name} is {:?}, expected {r}x{c}",
                    mat.shape()
                )))
            } else {
                Ok(())
            }
        };
        check(&self.p1, n * q, n * m, "P1")?;
        check(&self.p2, n * q, n * q, "P2")?;
        check(&self.gamma, n * q, n * m, "Gamma")?;
        if let Some(phi) = &self.phi {
            if phi.nrows() != n * q {
                return Err(EstimationError::Dimension(format!(
                    "Phi has {} rows, expected {}",
                    phi.nrows(),
                    n * q
                )));
            }
        }
        Ok(())
    }

    /// Writes the flat text format:
    ///
    /// ```text
    /// ddpc-predictor v1 N=<N> m=<m> q=<q> integral=<0|1>
    /// P1 <rows> <cols>
    /// <row values separated by spaces>
    /// ...
    /// ```
    ///
    /// followed by `P2`, `Gamma` and optionally `Phi`.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "ddpc-predictor v1 N={} m={} q={} integral={}",
            self.horizon,
            self.m,
            self.q,
            u8::from(self.integral)
        )?;
        let mut sections = vec![("P1", &self.p1), ("P2", &self.p2), ("Gamma", &self.gamma)];
        if let Some(phi) = &self.phi {
            sections.push(("Phi", phi));
        }
        for (name, mat) in sections {
            w.write_all(matrix_section(name, mat).as_bytes())?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| EstimationError::Parse("empty file".into()))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("ddpc-predictor") || fields.next() != Some("v1") {
            return Err(EstimationError::Parse(format!("bad header: {header}")));
        }
        let (mut n, mut m, mut q, mut integral) = (None, None, None, None);
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| EstimationError::Parse(format!("bad header field {kv}")))?;
            let val: usize = v
                .parse()
                .map_err(|_| EstimationError::Parse(format!("bad header value {kv}")))?;
            match k {
                "N" => n = Some(val),
                "m" => m = Some(val),
                "q" => q = Some(val),
                "integral" => integral = Some(val != 0),
                _ => return Err(EstimationError::Parse(format!("unknown header field {k}"))),
            }
        }
        let missing = |f: &str| EstimationError::Parse(format!("header lacks {f}"));
        let (n, m, q) = (n.ok_or_else(|| missing("N"))?, m.ok_or_else(|| missing("m"))?, q.ok_or_else(|| missing("q"))?);
        let integral = integral.ok_or_else(|| missing("integral"))?;

        let lines: Vec<String> = lines.collect::<std::result::Result<_, _>>()?;
        let sections = parse_sections(&lines)?;
        let take = |name: &str| {
            sections
                .iter()
                .find(|(s, _)| s == name)
                .map(|(_, mat)| mat.clone())
        };
        let p = Self {
            p1: take("P1").ok_or_else(|| missing("P1"))?,
            p2: take("P2").ok_or_else(|| missing("P2"))?,
            gamma: take("Gamma").ok_or_else(|| missing("Gamma"))?,
            phi: take("Phi"),
            horizon: n,
            m,
            q,
            integral,
        };
        p.validate()?;
        Ok(p)
    }
}

/// `<name> <rows> <cols>` followed by one line per row.
pub fn matrix_section(name: &str, mat: &Matrix) -> String {
    let mut out = format!("{name} {} {}\n", mat.nrows(), mat.ncols());
    for row in mat.row_iter() {
        let line = row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{line}");
    }
    out
}

/// Parses consecutive `matrix_section` blocks.
pub fn parse_sections(lines: &[String]) -> Result<Vec<(String, Matrix)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        i += 1;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || EstimationError::Parse(format!("bad section header: {line}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let rows: usize = parts[1].parse().map_err(|_| bad())?;
        let cols: usize = parts[2].parse().map_err(|_| bad())?;
        let mut mat = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = lines
                .get(i)
                .ok_or_else(|| EstimationError::Parse(format!("{}: missing row {r}", parts[0])))?;
            i += 1;
            let vals = row
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| EstimationError::Parse(format!("{}: row {r}: {e}", parts[0])))?;
            if vals.len() != cols {
                return Err(EstimationError::Parse(format!(
                    "{}: row {r} has {} values, expected {cols}",
                    parts[0],
                    vals.len()
                )));
            }
            for (c, v) in vals.into_iter().enumerate() {
                mat[(r, c)] = v;
            }
        }
        out.push((parts[0].to_string(), mat));
    }
    Ok(out)
}

/// Projects `Gamma` onto block lower-triangular Toeplitz matrices: blocks
/// above the diagonal are zeroed and each block diagonal is replaced by its
/// mean.
pub fn enforce_gamma_structure(p: &PredictorMatrices) -> PredictorMatrices {
    let (n, m, q) = (p.horizon, p.m, p.q);
    let mut gamma = Matrix::zeros(n * q, n * m);
    for offset in 0..n {
        let mut mean = Matrix::zeros(q, m);
        for j in 0..n - offset {
            mean += p.gamma.view(((j + offset) * q, j * m), (q, m));
        }
        mean /= (n - offset) as f64;
        for j in 0..n - offset {
            gamma.view_mut(((j + offset) * q, j * m), (q, m)).copy_from(&mean);
        }
    }
    PredictorMatrices {
        gamma,
        ..p.clone()
    }
}

fn full_row_rank_ratio(m: &Matrix) -> Result<f64> {
    let s = linalg::singular_values(m)?;
    Ok(if s.max() > 0.0 { s.min() / s.max() } else { 0.0 })
}

/// `Phi = (Yp - Gamma Up) Xp^+`.
pub fn estimate_phi_residual(h: &HankelSet, gamma_hat: &Matrix, opts: &EstimationOptions) -> Result<Matrix> {
    let xp = h.xp.as_ref().ok_or(EstimationError::StateRequired)?;
    if gamma_hat.shape() != (h.yp.nrows(), h.up.nrows()) {
        return Err(EstimationError::Dimension(format!(
            "Gamma is {:?}, expected {}x{}",
            gamma_hat.shape(),
            h.yp.nrows(),
            h.up.nrows()
        )));
    }
    check_ratio("state data Xp", full_row_rank_ratio(xp)?, opts)?;
    let resid = &h.yp - gamma_hat * &h.up;
    Ok(resid * linalg::pinv(xp, opts.pinv_tol)?)
}

/// `I - Up' (Up Up')^-1 Up`, the projector onto the orthogonal complement
/// of the row space of `Up`. Only practical for small column counts;
/// [`estimate_phi_orthogonal`] applies it implicitly.
pub fn orthogonal_complement_projector(up: &Matrix) -> Result<Matrix> {
    let k = up.ncols();
    Ok(Matrix::identity(k, k) - project_onto_rows(&Matrix::identity(k, k), up)?)
}

/// `m Up' (Up Up')^-1 Up`.
fn project_onto_rows(m: &Matrix, up: &Matrix) -> Result<Matrix> {
    let gram = up * up.transpose();
    let coeff = linalg::solve_spd(&gram, &(up * m.transpose()))?;
    Ok(coeff.transpose() * up)
}

/// `Phi = (Yp Upo)(Xp Upo)^+` with `Upo` the orthogonal complement
/// projector of `Up`.
pub fn estimate_phi_orthogonal(h: &HankelSet, opts: &EstimationOptions) -> Result<Matrix> {
    let xp = h.xp.as_ref().ok_or(EstimationError::StateRequired)?;
    phi_orthogonal(&h.yp, xp, &h.up, opts)
}

fn phi_orthogonal(yp: &Matrix, xp: &Matrix, up: &Matrix, opts: &EstimationOptions) -> Result<Matrix> {
    check_ratio("input data Up", full_row_rank_ratio(up)?, opts)?;
    let yo = yp - project_onto_rows(yp, up).map_err(|_| EstimationError::Excitation {
        what: "input data Up (Up Up' singular)",
        ratio: 0.0,
        threshold: opts.excitation_threshold,
    })?;
    let xo = xp - project_onto_rows(xp, up)?;
    check_ratio("projected state data Xp Upo", full_row_rank_ratio(&xo)?, opts)?;
    Ok(yo * linalg::pinv(&xo, opts.pinv_tol)?)
}

/// Rate-state `Phi_I` on `x_I = [dx; y]`. The `y` block column of
/// `C_I A_I^i` is the identity for every system, so it is fixed and only
/// the `dx` block is regressed. This keeps measurement noise on `y` out of
/// the regressor, where it would shrink the `y` coefficients below one and
/// break offset-free tracking.
pub fn estimate_phi_integral(h: &HankelSet, opts: &EstimationOptions) -> Result<Matrix> {
    let xp = h.xp.as_ref().ok_or(EstimationError::StateRequired)?;
    let (n_h, q) = (h.horizon, h.n_outputs());
    if xp.nrows() <= q {
        return Err(EstimationError::Dimension(format!(
            "rate states have {} rows, need more than q = {q}",
            xp.nrows()
        )));
    }
    let n = xp.nrows() - q;
    let ones = linalg::kron(&Matrix::from_element(n_h, 1, 1.0), &Matrix::identity(q, q));
    let target = &h.yp - &ones * xp.rows(n, q);
    let phi_dx = phi_orthogonal(&target, &xp.rows(0, n).into_owned(), &h.up, opts)?;
    Ok(linalg::hstack(&[&phi_dx, &ones]))
}

/// On-line free response `Phi x(k) = P1 u_past + P2 y_past` from the last
/// `N` inputs `u(k-N) .. u(k-1)` and outputs `y(k-N+1) .. y(k)` (one column
/// per sample, oldest first). For integral predictors the inputs are
/// increments.
pub fn free_response(p: &PredictorMatrices, past_u: &Matrix, past_y: &Matrix) -> Result<Vector> {
    if past_u.shape() != (p.m, p.horizon) || past_y.shape() != (p.q, p.horizon) {
        return Err(EstimationError::Dimension(format!(
            "buffers are {:?} and {:?}, expected {}x{} and {}x{}",
            past_u.shape(),
            past_y.shape(),
            p.m,
            p.horizon,
            p.q,
            p.horizon
        )));
    }
    let u = Vector::from_column_slice(past_u.as_slice());
    let y = Vector::from_column_slice(past_y.as_slice());
    Ok(&p.p1 * u + &p.p2 * y)
}

/// Which input manipulation produced the rate-based estimation data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegralMode {
    /// The experiment applied the running sum `U_I` of a base signal `U`.
    Summed,
    /// The experiment applied `U` directly; increments are used in the
    /// regression.
    Differenced,
}

/// Running sum (`Summed`) or first difference with a zero prior sample
/// (`Differenced`) along time.
pub fn integral_input_transform(u: &Matrix, mode: IntegralMode) -> Matrix {
    let mut out = u.clone();
    match mode {
        IntegralMode::Summed => {
            for k in 1..u.ncols() {
                let prev = out.column(k - 1).into_owned();
                let mut col = out.column_mut(k);
                col += prev;
            }
        }
        IntegralMode::Differenced => {
            for k in 1..u.ncols() {
                out.set_column(k, &(u.column(k) - u.column(k - 1)));
            }
        }
    }
    out
}

/// Input to apply in the estimation experiment for a given base signal.
pub fn experiment_input(base: &Matrix, mode: IntegralMode) -> Matrix {
    match mode {
        IntegralMode::Summed => integral_input_transform(base, IntegralMode::Summed),
        IntegralMode::Differenced => base.clone(),
    }
}

/// Rate-state trajectory `x_I(k) = [x(k) - x(k-1); y(k)]` with `x(-1) = 0`.
pub fn rate_states(x: &Matrix, y: &Matrix) -> Matrix {
    let dx = integral_input_transform(x, IntegralMode::Differenced);
    linalg::vstack(&[&dx, y])
}

/// Rate-based predictor from experiment data.
///
/// With `Summed`, `data.u` is the applied cumulative input `U_I` and the
/// regression uses the base signal `U`; with `Differenced`, `data.u` is the
/// applied `U` and the regression uses its increments. Either way the
/// regression input is the first difference of the applied input, paired
/// with the recorded outputs. When states are recorded and
/// `include_states` is set, `Phi_I` is estimated on the rate states.
pub fn estimate_integral_predictor(
    data: &ExperimentData,
    horizon: usize,
    l: usize,
    mode: IntegralMode,
    include_states: bool,
    opts: &EstimationOptions,
) -> Result<PredictorMatrices> {
    let _ = mode;
    let u = integral_input_transform(&data.u, IntegralMode::Differenced);
    let x = if include_states {
        let x = data.x.as_ref().ok_or(EstimationError::StateRequired)?;
        Some(rate_states(x, &data.y))
    } else {
        None
    };
    let rate_data = ExperimentData {
        u,
        y: data.y.clone(),
        x,
        ts: data.ts,
    };
    let h = build_hankels(&rate_data, horizon, l, include_states)?;
    let mut p = estimate_predictor(&h, opts)?;
    p.integral = true;
    if include_states {
        p.phi = Some(estimate_phi_integral(&h, opts)?);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::{build_integral_prediction, build_prediction};
    use crate::simsys::{simulate, SignalKind, SignalSpec, StateSpaceModel};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn scalar(a: f64) -> StateSpaceModel {
        StateSpaceModel::new(dmatrix![a], dmatrix![1.0], dmatrix![1.0], None, 1.0).unwrap()
    }

    fn prbs(len: usize, seed: u64) -> Matrix {
        let v = SignalSpec::new(
            SignalKind::Prbs { amplitude: 1.0, hold: 1, seed, degree: None },
            len,
        )
        .generate(1.0)
        .unwrap();
        Matrix::from_row_slice(1, len, &v)
    }

    fn scalar_data(a: f64, len: usize) -> ExperimentData {
        simulate(&scalar(a), &prbs(len, 7), None, &dvector![0.0]).unwrap()
    }

    #[test]
    fn hankel_index_pattern() {
        let u = Matrix::from_fn(1, 9, |_, k| k as f64);
        let y = Matrix::from_fn(1, 9, |_, k| 100.0 + k as f64);
        let data = ExperimentData::new(u, y, None, 1.0).unwrap();
        let h = build_hankels(&data, 2, 4, false).unwrap();
        assert_eq!(h.up.column(0), dvector![0.0, 1.0]);
        assert_eq!(h.uf.column(0), dvector![2.0, 3.0]);
        assert_eq!(h.yp.column(0), dvector![101.0, 102.0]);
        assert_eq!(h.yf.column(0), dvector![103.0, 104.0]);
        assert_eq!(h.yf.column(4), dvector![107.0, 108.0]);
        assert_eq!(h.up.ncols(), 5);
    }

    #[test]
    fn hankel_degenerate_horizon() {
        let u = Matrix::from_fn(1, 8, |_, k| k as f64);
        let data = ExperimentData::new(u, Matrix::zeros(1, 8), None, 1.0).unwrap();
        let h = build_hankels(&data, 1, 5, false).unwrap();
        assert_eq!(h.up, dmatrix![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn hankel_states_and_errors() {
        let data = scalar_data(0.5, 12);
        let h = build_hankels(&data, 2, 5, true).unwrap();
        let x = data.x.as_ref().unwrap();
        assert_eq!(h.xp.as_ref().unwrap()[(0, 3)], x[(0, 3)]);
        assert_eq!(h.xf.as_ref().unwrap()[(0, 3)], x[(0, 5)]);
        assert!(matches!(
            build_hankels(&data, 3, 6, false),
            Err(EstimationError::Sizing { required: 13, got: 12, .. })
        ));
        let no_x = ExperimentData { x: None, ..data };
        assert!(matches!(build_hankels(&no_x, 2, 5, true), Err(EstimationError::StateRequired)));
    }

    #[test]
    fn predictor_scalar_recovers_gamma() {
        let data = scalar_data(0.5, 40);
        let h = build_hankels(&data, 2, 20, false).unwrap();
        let p = estimate_predictor(&h, &EstimationOptions::default()).unwrap();
        assert!((&p.gamma - dmatrix![1.0, 0.0; 0.5, 1.0]).amax() < 1e-8);
        // held-in prediction identity
        assert!(linalg::rel_frobenius_error(&p.predict_future(&h), &h.yf) < 1e-10);
    }

    #[test]
    fn predictor_fir_plant() {
        let data = scalar_data(0.0, 60);
        let h = build_hankels(&data, 3, 30, false).unwrap();
        let p = estimate_predictor(&h, &EstimationOptions::default()).unwrap();
        assert!((&p.gamma - Matrix::identity(3, 3)).amax() < 1e-10);
        // the free response of a one-step FIR is zero
        let fr = &p.p1 * &h.up + &p.p2 * &h.yp;
        assert!(fr.amax() < 1e-10);
    }

    #[test]
    fn predictor_sizing_and_excitation_errors() {
        let data = scalar_data(0.5, 40);
        let h = build_hankels(&data, 2, 5, false).unwrap();
        assert!(matches!(
            estimate_predictor(&h, &EstimationOptions::default()),
            Err(EstimationError::Sizing { required: 6, got: 5, .. })
        ));
        let flat = ExperimentData::new(Matrix::from_element(1, 40, 1.0), data.y.clone(), None, 1.0).unwrap();
        let h = build_hankels(&flat, 2, 20, false).unwrap();
        assert!(matches!(
            estimate_predictor(&h, &EstimationOptions::default()),
            Err(EstimationError::Excitation { .. })
        ));
        let permissive = EstimationOptions { permissive: true, ..Default::default() };
        assert!(estimate_predictor(&h, &permissive).is_ok());
    }

    #[test]
    fn gamma_structure_projection() {
        let p = PredictorMatrices {
            p1: Matrix::zeros(2, 2),
            p2: Matrix::zeros(2, 2),
            gamma: dmatrix![1.0, 0.3; 0.5, 1.2],
            phi: None,
            horizon: 2,
            m: 1,
            q: 1,
            integral: false,
        };
        let s = enforce_gamma_structure(&p);
        assert!((&s.gamma - dmatrix![1.1, 0.0; 0.5, 1.1]).amax() < 1e-15);
        assert_eq!(enforce_gamma_structure(&s), s);
        assert_eq!(s.p1, p.p1);
    }

    #[test]
    fn gamma_structure_keeps_exact_toeplitz() {
        let (_, gamma) = build_prediction(&scalar(0.7), 4);
        let p = PredictorMatrices {
            p1: Matrix::zeros(4, 4),
            p2: Matrix::zeros(4, 4),
            gamma: gamma.clone(),
            phi: None,
            horizon: 4,
            m: 1,
            q: 1,
            integral: false,
        };
        assert!((enforce_gamma_structure(&p).gamma - gamma).amax() < 1e-15);
    }

    #[test]
    fn phi_estimators_scalar() {
        let data = scalar_data(0.5, 60);
        let h = build_hankels(&data, 2, 30, true).unwrap();
        let opts = EstimationOptions::default();
        let p = estimate_predictor(&h, &opts).unwrap();
        let phi_r = estimate_phi_residual(&h, &p.gamma, &opts).unwrap();
        assert!((&phi_r - dmatrix![0.5; 0.25]).amax() < 1e-8);
        let resid = &h.yp - &p.gamma * &h.up - &phi_r * h.xp.as_ref().unwrap();
        assert!(resid.amax() < 1e-8);
        let phi_o = estimate_phi_orthogonal(&h, &opts).unwrap();
        assert!((&phi_o - &phi_r).amax() < 1e-6);
    }

    #[test]
    fn phi_from_free_response_only() {
        // zero input: Phi is recovered from Yp Xp^+ alone
        let model = StateSpaceModel::new(
            dmatrix![0.5, 0.1; 0.0, 0.8],
            dmatrix![1.0; 1.0],
            dmatrix![1.0, 0.0; 0.0, 1.0],
            None,
            1.0,
        )
        .unwrap();
        let d = &simulate(&model, &Matrix::zeros(1, 10), None, &dvector![1.0, -1.0]).unwrap();
        let h = build_hankels(d, 2, 5, true).unwrap();
        let phi = estimate_phi_residual(&h, &Matrix::zeros(4, 2), &EstimationOptions::default()).unwrap();
        let expect = &h.yp * linalg::pinv(h.xp.as_ref().unwrap(), None).unwrap();
        assert!((&phi - expect).amax() < 1e-12);
        let (phi_true, _) = build_prediction(&model, 2);
        assert!((phi - phi_true).amax() < 1e-10);
    }

    #[test]
    fn orthogonal_projector_properties() {
        let up = Matrix::from_fn(2, 9, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let p = orthogonal_complement_projector(&up).unwrap();
        assert!((&p * &p - &p).amax() < 1e-10);
        assert!((&up * &p).amax() < 1e-10);
    }

    #[test]
    fn phi_needs_states() {
        let data = scalar_data(0.5, 60);
        let h = build_hankels(&data, 2, 30, false).unwrap();
        let opts = EstimationOptions::default();
        assert!(matches!(estimate_phi_orthogonal(&h, &opts), Err(EstimationError::StateRequired)));
        assert!(matches!(
            estimate_phi_residual(&h, &Matrix::zeros(2, 2), &opts),
            Err(EstimationError::StateRequired)
        ));
    }

    #[test]
    fn free_response_matches_state_prediction() {
        let model = scalar(0.5);
        let data = scalar_data(0.5, 80);
        let n = 2;
        let h = build_hankels(&data, n, 30, false).unwrap();
        let p = estimate_predictor(&h, &EstimationOptions::default()).unwrap();
        let (phi, _) = build_prediction(&model, n);
        let x = data.x.as_ref().unwrap();
        for k in n..data.len() {
            let pu = data.u.columns(k - n, n).into_owned();
            let py = data.y.columns(k + 1 - n, n).into_owned();
            let fr = free_response(&p, &pu, &py).unwrap();
            let truth = &phi * x.column(k);
            assert!((fr - truth).amax() < 1e-6, "k = {k}");
        }
        let zero = free_response(&p, &Matrix::zeros(1, n), &Matrix::zeros(1, n)).unwrap();
        assert_eq!(zero, Vector::zeros(n));
        assert!(free_response(&p, &Matrix::zeros(1, n + 1), &Matrix::zeros(1, n)).is_err());
    }

    #[test]
    fn integral_transform_examples() {
        let s = integral_input_transform(&dmatrix![1.0, 1.0, 1.0], IntegralMode::Summed);
        assert_eq!(s, dmatrix![1.0, 2.0, 3.0]);
        let d = integral_input_transform(&dmatrix![1.0, 2.0, 4.0], IntegralMode::Differenced);
        assert_eq!(d, dmatrix![1.0, 1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn differenced_inverts_summed(v in proptest::collection::vec(-100i32..100, 1..40)) {
            // integer-valued samples keep the round trip exact
            let u = Matrix::from_row_slice(1, v.len(), &v.iter().map(|x| *x as f64).collect::<Vec<_>>());
            let back = integral_input_transform(
                &integral_input_transform(&u, IntegralMode::Summed),
                IntegralMode::Differenced,
            );
            prop_assert_eq!(back, u);
        }
    }

    #[test]
    fn integral_predictor_scalar_both_modes() {
        let model = scalar(0.5);
        let base = prbs(60, 3);
        let (_, gamma_i) = build_integral_prediction(&model, 2);
        assert!((&gamma_i - dmatrix![1.0, 0.0; 1.5, 1.0]).amax() < 1e-15);
        let opts = EstimationOptions::default();
        let mut estimates = Vec::new();
        for mode in [IntegralMode::Summed, IntegralMode::Differenced] {
            let applied = experiment_input(&base, mode);
            let data = simulate(&model, &applied, None, &dvector![0.0]).unwrap();
            let p = estimate_integral_predictor(&data, 2, 20, mode, true, &opts).unwrap();
            assert!(p.integral);
            assert!((&p.gamma - &gamma_i).amax() < 1e-8, "{mode:?}");
            estimates.push(p.gamma);
        }
        assert!((&estimates[0] - &estimates[1]).amax() < 1e-6);
    }

    #[test]
    fn predictor_text_round_trip() {
        let data = scalar_data(0.5, 60);
        let h = build_hankels(&data, 2, 30, true).unwrap();
        let opts = EstimationOptions::default();
        let p = estimate_predictor(&h, &opts).unwrap();
        let phi = estimate_phi_orthogonal(&h, &opts).unwrap();
        let p = p.with_phi(phi);
        let mut buf = Vec::new();
        p.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("ddpc-predictor v1 N=2 m=1 q=1 integral=0\nP1 2 2\n"));
        let back = PredictorMatrices::read_text(&buf[..]).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn predictor_text_errors() {
        assert!(PredictorMatrices::read_text(&b"nonsense\n"[..]).is_err());
        let short = b"ddpc-predictor v1 N=1 m=1 q=1 integral=0\nP1 1 1\n1\nP2 1 1\n1\n";
        assert!(matches!(PredictorMatrices::read_text(&short[..]), Err(EstimationError::Parse(_))));
        let wrong = b"ddpc-predictor v1 N=1 m=1 q=1 integral=1\nP1 1 1\n1\nP2 1 1\n1\nGamma 1 2\n1 2\n";
        assert!(matches!(PredictorMatrices::read_text(&wrong[..]), Err(EstimationError::Dimension(_))));
    }
}
