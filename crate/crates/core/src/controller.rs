//! Receding-horizon controllers and the closed-loop simulation engine.
//!
//! Three predictor sources share one condensed QP: model-based MPC uses
//! `Phi x(k)` from a state-space model, state-DPC uses an estimated `Phi`
//! on the measured state, and output-DPC forms the free response from the
//! last `N` inputs and outputs. Each has a rate-based (integral) variant
//! that optimizes input increments on `x_I = [x(k) - x(k-1); y(k)]`.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use log::warn;
use thiserror::Error;

use crate::estimation::{EstimationError, PredictorMatrices};
use crate::linalg::{Matrix, Vector};
use crate::mpc::{
    build_integral_prediction, build_prediction, condense_constraints, condense_constraints_rate, condense_cost,
    CondensedConstraints, CondensedCost, ConstraintSpec, CostWeights, MpcError,
};
use crate::qp::{self, HildrethSolver, QpError, QpOptions, QpProblem, QpStatus};
use crate::simsys::{noise_std_for_snr, row_variances, white_noise, SimError, StateSpaceModel};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("controller configuration: {0}")]
    Config(String),
    #[error("step {step}: QP infeasible with hard constraints")]
    Infeasible { step: usize },
    #[error("step {step}: variant needs the measured state")]
    MissingState { step: usize },
    #[error("step {step}: {msg}")]
    Dimension { step: usize, msg: String },
    #[error("invalid metric window: {0}")]
    InvalidWindow(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    ModelMpc,
    StateDpc,
    OutputDpc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ModelMpc, Variant::StateDpc, Variant::OutputDpc];

    pub fn needs_state(self) -> bool {
        !matches!(self, Variant::OutputDpc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ModelMpc => "model-mpc",
            Variant::StateDpc => "state-dpc",
            Variant::OutputDpc => "output-dpc",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}; expected model-mpc, state-dpc or output-dpc"))
    }
}

#[derive(Debug, Clone)]
pub enum PredictorSource {
    Model(StateSpaceModel),
    Data(PredictorMatrices),
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub integral: bool,
    pub weights: CostWeights,
    pub constraints: ConstraintSpec,
    pub predictor: PredictorSource,
    /// `V` of a terminal output augmentation: the controller appends
    /// `V x(k)` to the measured outputs and tracks zero on those channels.
    pub terminal_output: Option<Matrix>,
    pub qp: QpOptions,
    pub warm_start: bool,
}

impl ControllerConfig {
    pub fn new(variant: Variant, integral: bool, weights: CostWeights, constraints: ConstraintSpec, predictor: PredictorSource) -> Self {
        Self {
            variant,
            integral,
            weights,
            constraints,
            predictor,
            terminal_output: None,
            qp: QpOptions::default(),
            warm_start: true,
        }
    }

    pub fn horizon(&self) -> usize {
        self.weights.horizon
    }
}

/// Stacked current and future references `r(k), r(k+1), ..., r(k+N)`, one
/// column each.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePreview {
    pub r: Matrix,
}

impl ReferencePreview {
    /// Window starting at sample `k` of a reference trajectory, repeating
    /// the final sample past its end.
    pub fn from_trajectory(reference: &Matrix, k: usize, horizon: usize) -> Self {
        let last = reference.ncols().saturating_sub(1);
        Self {
            r: Matrix::from_fn(reference.nrows(), horizon + 1, |i, j| reference[(i, (k + j).min(last))]),
        }
    }

    pub fn constant(r: &Vector, horizon: usize) -> Self {
        Self {
            r: Matrix::from_fn(r.len(), horizon + 1, |i, _| r[i]),
        }
    }
}

/// Run-time memory of a controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// `u(k-N) .. u(k-1)`, or increments for integral output-DPC.
    pub past_u: VecDeque<Vector>,
    /// `y(k-N+1) .. y(k)`.
    pub past_y: VecDeque<Vector>,
    pub u_prev: Vector,
    pub x_prev: Option<Vector>,
    pub warm_duals: Option<Vector>,
    pub step: usize,
}

impl ControllerState {
    fn new(horizon: usize, m: usize, q: usize) -> Self {
        Self {
            past_u: (0..horizon).map(|_| Vector::zeros(m)).collect(),
            past_y: (0..horizon).map(|_| Vector::zeros(q)).collect(),
            u_prev: Vector::zeros(m),
            x_prev: None,
            warm_duals: None,
            step: 0,
        }
    }
}

fn push_window(buf: &mut VecDeque<Vector>, v: Vector) {
    buf.pop_front();
    buf.push_back(v);
}

fn stack(buf: &VecDeque<Vector>) -> Vector {
    let len: usize = buf.iter().map(|v| v.len()).sum();
    let mut out = Vector::zeros(len);
    let mut r = 0;
    for v in buf {
        out.rows_mut(r, v.len()).copy_from(v);
        r += v.len();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u: Vector,
    pub status: QpStatus,
    pub iterations: usize,
    pub softened: bool,
    /// KKT certificate of the QP that produced `u`.
    pub kkt_ok: bool,
    /// Largest violation of the hard constraint rows by the applied plan.
    pub constraint_violation: f64,
}

enum FreeResponse {
    Phi(Matrix),
    Output { p1: Matrix, p2: Matrix },
}

struct SoftSolver {
    solver: HildrethSolver,
    n_slack: usize,
}

pub struct Controller {
    variant: Variant,
    integral: bool,
    horizon: usize,
    m: usize,
    q: usize,
    q_plant: usize,
    free: FreeResponse,
    gamma: Matrix,
    cost: CondensedCost,
    cons: CondensedConstraints,
    solver: HildrethSolver,
    soft: Option<SoftSolver>,
    terminal_output: Option<Matrix>,
    qp_opts: QpOptions,
    warm_start: bool,
    state: ControllerState,
}

impl Controller {
    pub fn new(cfg: &ControllerConfig) -> Result<Self> {
        let n = cfg.horizon();
        let cfg_err = |s: String| ControllerError::Config(s);
        let (free, gamma) = match (&cfg.predictor, cfg.variant) {
            (PredictorSource::Model(model), Variant::ModelMpc) => {
                let model = match &cfg.terminal_output {
                    Some(v) => {
                        let mut aug = model.clone();
                        aug.c = crate::linalg::vstack(&[&model.c, v]);
                        aug
                    }
                    None => model.clone(),
                };
                model.validate()?;
                let (phi, gamma) = if cfg.integral {
                    build_integral_prediction(&model, n)
                } else {
                    build_prediction(&model, n)
                };
                (FreeResponse::Phi(phi), gamma)
            }
            (PredictorSource::Data(p), variant @ (Variant::StateDpc | Variant::OutputDpc)) => {
                p.validate()?;
                if p.integral != cfg.integral {
                    return Err(cfg_err(format!(
                        "controller integral={} but predictor integral={}",
                        cfg.integral, p.integral
                    )));
                }
                if p.horizon != n {
                    return Err(cfg_err(format!("predictor horizon {} differs from weights horizon {n}", p.horizon)));
                }
                let free = if variant == Variant::StateDpc {
                    let phi = p
                        .phi
                        .clone()
                        .ok_or_else(|| cfg_err("state-dpc needs a predictor with a Phi estimate".into()))?;
                    FreeResponse::Phi(phi)
                } else {
                    FreeResponse::Output {
                        p1: p.p1.clone(),
                        p2: p.p2.clone(),
                    }
                };
                (free, p.gamma.clone())
            }
            (PredictorSource::Model(_), v) => {
                return Err(cfg_err(format!("{v} needs an estimated predictor, got a model")));
            }
            (PredictorSource::Data(_), v) => {
                return Err(cfg_err(format!("{v} needs a state-space model, got estimated matrices")));
            }
        };
        let q = gamma.nrows() / n;
        let m = gamma.ncols() / n;
        let q_plant = q - cfg.terminal_output.as_ref().map_or(0, |v| v.nrows());
        if cfg.weights.q.nrows() != q || cfg.weights.r.nrows() != m {
            return Err(cfg_err(format!(
                "weights are sized q={} m={}, predictor has q={q} m={m}",
                cfg.weights.q.nrows(),
                cfg.weights.r.nrows()
            )));
        }
        if cfg.constraints.horizon() != n || cfg.constraints.n_outputs() != q || cfg.constraints.n_inputs() != m {
            return Err(cfg_err(format!(
                "constraints are sized N={} q={} m={}, predictor has N={n} q={q} m={m}",
                cfg.constraints.horizon(),
                cfg.constraints.n_outputs(),
                cfg.constraints.n_inputs()
            )));
        }
        let cost = condense_cost(&gamma, &cfg.weights)?;
        let cons = if cfg.integral {
            condense_constraints_rate(&cfg.constraints, &gamma)?
        } else {
            condense_constraints(&cfg.constraints, &gamma)?
        };
        let solver = HildrethSolver::new(&cost.g, &cons.l)?;
        let soft = match cfg.constraints.soft {
            Some(rho) if !cons.output_rows.is_empty() => {
                let template = QpProblem::new(cost.g.clone(), Vector::zeros(n * m), cons.l.clone(), Vector::zeros(cons.rows()))?;
                let softened = qp::soften(&template, &cons.output_rows, rho)?;
                Some(SoftSolver {
                    solver: HildrethSolver::new(&softened.g, &softened.a)?,
                    n_slack: cons.output_rows.len(),
                })
            }
            _ => None,
        };
        Ok(Self {
            variant: cfg.variant,
            integral: cfg.integral,
            horizon: n,
            m,
            q,
            q_plant,
            free,
            gamma,
            cost,
            cons,
            solver,
            soft,
            terminal_output: cfg.terminal_output.clone(),
            qp_opts: cfg.qp,
            warm_start: cfg.warm_start,
            state: ControllerState::new(n, m, q),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }
    pub fn is_integral(&self) -> bool {
        self.integral
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn n_inputs(&self) -> usize {
        self.m
    }
    pub fn n_plant_outputs(&self) -> usize {
        self.q_plant
    }
    pub fn state(&self) -> &ControllerState {
        &self.state
    }
    pub fn cost(&self) -> &CondensedCost {
        &self.cost
    }
    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    pub fn reset(&mut self) {
        self.state = ControllerState::new(self.horizon, self.m, self.q);
    }

    /// Unconstrained first-move gain on the free response: `u_0 = -K_v v`
    /// with `K_v` the first `m` rows of `G^-1 F` (increments for integral).
    pub fn unconstrained_gain(&self) -> Result<Matrix> {
        let ginv_f = crate::linalg::solve_spd(&self.cost.g, &self.cost.f).map_err(MpcError::from)?;
        Ok(ginv_f.rows(0, self.m).into_owned())
    }

    /// Free-response input vector for the variant: `x(k)` or
    /// `[x(k) - x(k-1); y(k)]` for the state-based forms.
    pub fn free_response(&self, y: &Vector, x: Option<&Vector>) -> Result<Vector> {
        let step = self.state.step;
        match &self.free {
            FreeResponse::Phi(phi) => {
                let x = x.ok_or(ControllerError::MissingState { step })?;
                let z = if self.integral {
                    let dx = match &self.state.x_prev {
                        Some(prev) => x - prev,
                        None => x.clone(),
                    };
                    let mut z = Vector::zeros(dx.len() + y.len());
                    z.rows_mut(0, dx.len()).copy_from(&dx);
                    z.rows_mut(dx.len(), y.len()).copy_from(y);
                    z
                } else {
                    x.clone()
                };
                if z.len() != phi.ncols() {
                    return Err(ControllerError::Dimension {
                        step,
                        msg: format!("free-response state has length {}, Phi expects {}", z.len(), phi.ncols()),
                    });
                }
                Ok(phi * z)
            }
            FreeResponse::Output { p1, p2 } => Ok(p1 * stack(&self.state.past_u) + p2 * stack(&self.state.past_y)),
        }
    }

    /// One receding-horizon step with the measured plant output `y(k)`,
    /// the measured state when the variant needs it, and the reference
    /// preview. Returns the input to apply.
    pub fn step(&mut self, y: &Vector, x: Option<&Vector>, preview: &ReferencePreview) -> Result<StepOutcome> {
        let step = self.state.step;
        let (n, m, q) = (self.horizon, self.m, self.q);
        if y.len() != self.q_plant {
            return Err(ControllerError::Dimension {
                step,
                msg: format!("measured output has length {}, expected {}", y.len(), self.q_plant),
            });
        }
        if preview.r.nrows() != self.q_plant || preview.r.ncols() < n + 1 {
            return Err(ControllerError::Dimension {
                step,
                msg: format!(
                    "reference preview is {:?}, expected {}x{}",
                    preview.r.shape(),
                    self.q_plant,
                    n + 1
                ),
            });
        }
        if self.variant.needs_state() && x.is_none() {
            return Err(ControllerError::MissingState { step });
        }
        let y_ctrl = match &self.terminal_output {
            Some(v) => {
                let x = x.ok_or(ControllerError::MissingState { step })?;
                let yo = v * x;
                let mut out = Vector::zeros(q);
                out.rows_mut(0, y.len()).copy_from(y);
                out.rows_mut(y.len(), yo.len()).copy_from(&yo);
                out
            }
            None => y.clone(),
        };
        push_window(&mut self.state.past_y, y_ctrl.clone());
        let v = self.free_response(&y_ctrl, x)?;

        // R_k over stages 1..N; augmented channels track zero
        let mut rk = Vector::zeros(n * q);
        for i in 0..n {
            for c in 0..self.q_plant {
                rk[i * q + c] = preview.r[(c, i + 1)];
            }
        }
        let f = &self.cost.f * (&v - &rk);
        let u_prev = self.integral.then(|| self.state.u_prev.clone());
        let b = self.cons.rhs(&v, &y_ctrl, u_prev.as_ref());
        let warm = if self.warm_start { self.state.warm_duals.as_ref() } else { None };
        let hard = self.solver.solve(&f, &b, warm, &self.qp_opts)?;

        let (plan, status, iterations, softened, kkt_ok) = if hard.status == QpStatus::Optimal {
            self.state.warm_duals = Some(hard.dual.clone());
            let ok = self.solver.certificate(&f, &b, &hard).passes();
            (hard.primal, hard.status, hard.iterations, false, ok)
        } else if let Some(soft) = &self.soft {
            let mut fs = Vector::zeros(n * m + soft.n_slack);
            fs.rows_mut(0, n * m).copy_from(&f);
            let mut bs = Vector::zeros(b.len() + soft.n_slack);
            bs.rows_mut(0, b.len()).copy_from(&b);
            let sol = soft.solver.solve(&fs, &bs, None, &self.qp_opts)?;
            if sol.status == QpStatus::Infeasible {
                return Err(ControllerError::Infeasible { step });
            }
            self.state.warm_duals = None;
            let ok = sol.status == QpStatus::Optimal && soft.solver.certificate(&fs, &bs, &sol).passes();
            (sol.primal.rows(0, n * m).into_owned(), sol.status, hard.iterations + sol.iterations, true, ok)
        } else if hard.status == QpStatus::Infeasible {
            return Err(ControllerError::Infeasible { step });
        } else {
            warn!("step {step}: QP stopped at the iteration limit");
            self.state.warm_duals = None;
            (hard.primal, hard.status, hard.iterations, false, false)
        };

        let violation = (&self.cons.l * &plan - &b).iter().fold(0.0_f64, |a, v| a.max(*v));
        let first = plan.rows(0, m).into_owned();
        let u = if self.integral { &self.state.u_prev + &first } else { first.clone() };
        let pushed = if self.integral { first } else { u.clone() };
        push_window(&mut self.state.past_u, pushed);
        self.state.u_prev = u.clone();
        self.state.x_prev = x.cloned();
        self.state.step += 1;
        Ok(StepOutcome {
            u,
            status,
            iterations,
            softened,
            kkt_ok,
            constraint_violation: violation,
        })
    }
}

/// Closed-loop scenario. `reference` has one column per control sample
/// (extended by its last value for the preview). The plant may be
/// simulated `substeps` times per control sample, in which case
/// `disturbance` has one column per plant sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub steps: usize,
    /// Plant samples per control sample; the input is held across them.
    pub substeps: usize,
    pub reference: Matrix,
    pub disturbance: Option<Matrix>,
    /// Output SNR in dB relative to the reference variance per channel;
    /// `+inf` disables noise.
    pub noise_snr_db: f64,
    pub seed: u64,
    pub x0: Option<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub ts: f64,
    pub t: Vec<f64>,
    pub r: Matrix,
    pub y: Matrix,
    pub y_clean: Matrix,
    pub u: Matrix,
    pub d: Matrix,
    pub x: Matrix,
    pub qp_status: Vec<QpStatus>,
    pub qp_iters: Vec<usize>,
    pub softened: Vec<bool>,
    pub kkt_ok: Vec<bool>,
    pub constraint_violation: Vec<f64>,
}

/// Per-step wall time is kept apart from the result so that results
/// compare bit-identically across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunTiming {
    pub mean_step_seconds: f64,
}

impl SimulationResult {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Rows `t,r,y,y_clean,u,d,qp_status,qp_iters`; channel columns get a
    /// numeric suffix when there is more than one.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let names = |base: &str, rows: usize| -> Vec<String> {
            if rows == 1 {
                vec![base.to_string()]
            } else {
                (1..=rows).map(|i| format!("{base}{i}")).collect()
            }
        };
        let mut header = vec!["t".to_string()];
        for (base, mat) in [("r", &self.r), ("y", &self.y), ("y_clean", &self.y_clean), ("u", &self.u), ("d", &self.d)] {
            header.extend(names(base, mat.nrows()));
        }
        header.push("qp_status".into());
        header.push("qp_iters".into());
        wr.write_record(&header).map_err(csv_err)?;
        for k in 0..self.len() {
            let mut row = vec![format!("{}", self.t[k])];
            for mat in [&self.r, &self.y, &self.y_clean, &self.u, &self.d] {
                row.extend(mat.column(k).iter().map(|v| format!("{v}")));
            }
            row.push(self.qp_status[k].to_string());
            row.push(self.qp_iters[k].to_string());
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// First sample index at or after time `t`.
    pub fn index_at(&self, t: f64) -> usize {
        ((t / self.ts) - 1e-9).ceil().max(0.0) as usize
    }
}

fn csv_err(e: csv::Error) -> ControllerError {
    ControllerError::Sim(SimError::from(e))
}

/// Simulates `plant` under `controller` for `scenario.steps` control
/// samples. `plant` must be discretized at the control period divided by
/// `scenario.substeps`. At each control sample the output is measured
/// (with noise), the controller computes `u(k)`, and the plant advances
/// `substeps` times with `u(k)` held. The disturbance is never shown to
/// the controller. Recorded `d` is the value at control instants.
pub fn run_closed_loop(plant: &StateSpaceModel, controller: &mut Controller, scenario: &Scenario) -> Result<(SimulationResult, RunTiming)> {
    if !plant.is_discrete() {
        return Err(ControllerError::Config("closed-loop plant must be discrete".into()));
    }
    let (n, m, q, nd) = (plant.n_states(), plant.n_inputs(), plant.n_outputs(), plant.n_disturbances());
    let t_len = scenario.steps;
    let sub = scenario.substeps;
    if sub == 0 {
        return Err(ControllerError::Config("substeps must be >= 1".into()));
    }
    let ts = plant.ts * sub as f64;
    if controller.n_inputs() != m || controller.n_plant_outputs() != q {
        return Err(ControllerError::Config(format!(
            "controller has m={} q={}, plant has m={m} q={q}",
            controller.n_inputs(),
            controller.n_plant_outputs()
        )));
    }
    if scenario.reference.nrows() != q || (t_len > 0 && scenario.reference.ncols() == 0) {
        return Err(ControllerError::Config(format!(
            "reference is {:?}, expected {q} rows",
            scenario.reference.shape()
        )));
    }
    let fine_len = t_len * sub;
    let d_fine = match &scenario.disturbance {
        Some(d) if d.nrows() != nd || d.ncols() < fine_len => {
            return Err(ControllerError::Config(format!(
                "disturbance is {:?}, expected {nd}x{fine_len}",
                d.shape()
            )));
        }
        Some(d) => d.columns(0, fine_len).into_owned(),
        None => Matrix::zeros(nd, fine_len),
    };
    let d = Matrix::from_fn(nd, t_len, |i, k| d_fine[(i, k * sub)]);
    let r = Matrix::from_fn(q, t_len, |i, k| {
        scenario.reference[(i, k.min(scenario.reference.ncols().saturating_sub(1)))]
    });
    let noise = if scenario.noise_snr_db.is_finite() && t_len > 0 {
        let std: Vec<f64> = row_variances(&r)
            .into_iter()
            .map(|var| noise_std_for_snr(var, scenario.noise_snr_db))
            .collect();
        let mut e = white_noise(q, t_len, scenario.seed);
        for (i, s) in std.iter().enumerate() {
            e.row_mut(i).scale_mut(*s);
        }
        e
    } else {
        Matrix::zeros(q, t_len)
    };

    let mut x = scenario.x0.clone().unwrap_or_else(|| Vector::zeros(n));
    let mut res = SimulationResult {
        ts,
        t: (0..t_len).map(|k| k as f64 * ts).collect(),
        r,
        y: Matrix::zeros(q, t_len),
        y_clean: Matrix::zeros(q, t_len),
        u: Matrix::zeros(m, t_len),
        d,
        x: Matrix::zeros(n, t_len),
        qp_status: Vec::with_capacity(t_len),
        qp_iters: Vec::with_capacity(t_len),
        softened: Vec::with_capacity(t_len),
        kkt_ok: Vec::with_capacity(t_len),
        constraint_violation: Vec::with_capacity(t_len),
    };
    let horizon = controller.horizon();
    let mut elapsed = 0.0;
    for k in 0..t_len {
        let y_clean = &plant.c * &x;
        let y = &y_clean + noise.column(k);
        let preview = ReferencePreview::from_trajectory(&scenario.reference, k, horizon);
        let start = Instant::now();
        let out = controller.step(&y, Some(&x), &preview)?;
        elapsed += start.elapsed().as_secs_f64();
        res.x.set_column(k, &x);
        res.y.set_column(k, &y);
        res.y_clean.set_column(k, &y_clean);
        res.u.set_column(k, &out.u);
        res.qp_status.push(out.status);
        res.qp_iters.push(out.iterations);
        res.softened.push(out.softened);
        res.kkt_ok.push(out.kkt_ok);
        res.constraint_violation.push(out.constraint_violation);
        let bu = &plant.b * &out.u;
        for j in 0..sub {
            x = &plant.a * &x + &bu + &plant.bd * d_fine.column(k * sub + j);
        }
    }
    let timing = RunTiming {
        mean_step_seconds: if t_len > 0 { elapsed / t_len as f64 } else { 0.0 },
    };
    Ok((res, timing))
}

/// Metric settings. Windows are in seconds, half-open `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    pub offset_window: Option<(f64, f64)>,
    pub fundamental_hz: Option<f64>,
    /// Number of trailing fundamental periods used for THD.
    pub thd_periods: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            offset_window: None,
            fundamental_hz: None,
            thd_periods: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Steady-state offset `|mean(r - y_clean)|` over the offset window
    /// (first output). Zero-mean noise jitter does not count.
    pub offset: f64,
    /// Max `|r - y_clean|` over the offset window.
    pub max_abs_error: f64,
    pub rmse: f64,
    /// RMS of harmonics 2..25 over RMS of the fundamental.
    pub thd: Option<f64>,
    /// RMS of everything but DC and the fundamental over RMS of the
    /// fundamental.
    pub total_distortion: Option<f64>,
    pub mean_qp_iters: f64,
    pub softened_steps: usize,
    pub non_optimal_steps: usize,
    pub max_abs_u: f64,
    pub max_abs_y: f64,
}

impl Metrics {
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v}"));
        vec![
            ("offset".into(), format!("{}", self.offset)),
            ("max_abs_error".into(), format!("{}", self.max_abs_error)),
            ("rmse".into(), format!("{}", self.rmse)),
            ("thd".into(), opt(self.thd)),
            ("total_distortion".into(), opt(self.total_distortion)),
            ("mean_qp_iters".into(), format!("{}", self.mean_qp_iters)),
            ("softened_steps".into(), self.softened_steps.to_string()),
            ("non_optimal_steps".into(), self.non_optimal_steps.to_string()),
            ("max_abs_u".into(), format!("{}", self.max_abs_u)),
            ("max_abs_y".into(), format!("{}", self.max_abs_y)),
        ]
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, v) in self.to_key_values() {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }
}

fn window_indices(res: &SimulationResult, window: Option<(f64, f64)>) -> Result<(usize, usize)> {
    let len = res.len();
    let (a, b) = match window {
        None => (0, len),
        Some((t0, t1)) => (res.index_at(t0), res.index_at(t1).min(len)),
    };
    if a >= b {
        return Err(ControllerError::InvalidWindow(format!(
            "window {window:?} selects no samples of a {len}-sample run"
        )));
    }
    Ok((a, b))
}

/// Amplitude of the `h`-th harmonic of `f0` by direct DFT over `y`.
fn harmonic_amplitude(y: &[f64], ts: f64, f0: f64, h: usize) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f0 * h as f64 * ts;
    let (mut re, mut im) = (0.0, 0.0);
    for (k, v) in y.iter().enumerate() {
        let (s, c) = (w * k as f64).sin_cos();
        re += v * c;
        im -= v * s;
    }
    2.0 * (re * re + im * im).sqrt() / y.len() as f64
}

/// THD (harmonics 2..25) and total distortion of the last `periods`
/// fundamental periods of `y`.
pub fn distortion(y: &[f64], ts: f64, f0: f64, periods: usize) -> Result<(f64, f64)> {
    let per_period = 1.0 / (f0 * ts);
    let len = (periods as f64 * per_period).round() as usize;
    if periods == 0 || len < per_period.floor() as usize || len > y.len() || len < 2 {
        return Err(ControllerError::InvalidWindow(format!(
            "{periods} periods of {f0} Hz need {len} samples, have {}",
            y.len()
        )));
    }
    let seg = &y[y.len() - len..];
    let fund = harmonic_amplitude(seg, ts, f0, 1);
    if fund == 0.0 {
        return Err(ControllerError::InvalidWindow("no fundamental component".into()));
    }
    let nyquist_h = ((0.5 / ts) / f0).floor() as usize;
    let harm: f64 = (2..=25.min(nyquist_h)).map(|h| harmonic_amplitude(seg, ts, f0, h).powi(2)).sum();
    let thd = harm.sqrt() / fund;
    let mean = seg.iter().sum::<f64>() / len as f64;
    let power = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
    let residual = (power - fund * fund / 2.0).max(0.0);
    Ok((thd, (residual / (fund * fund / 2.0)).sqrt()))
}

pub fn metrics(res: &SimulationResult, spec: &MetricSpec) -> Result<Metrics> {
    let (a, b) = window_indices(res, spec.offset_window)?;
    let err: Vec<f64> = (a..b).map(|k| res.r[(0, k)] - res.y_clean[(0, k)]).collect();
    let cnt = err.len() as f64;
    let (thd, total) = match spec.fundamental_hz {
        Some(f0) => {
            let y: Vec<f64> = res.y_clean.row(0).iter().copied().collect();
            let (t, d) = distortion(&y, res.ts, f0, spec.thd_periods)?;
            (Some(t), Some(d))
        }
        None => (None, None),
    };
    let len = res.len().max(1) as f64;
    Ok(Metrics {
        offset: (err.iter().sum::<f64>() / cnt).abs(),
        max_abs_error: err.iter().fold(0.0, |m, e| m.max(e.abs())),
        rmse: (err.iter().map(|e| e * e).sum::<f64>() / cnt).sqrt(),
        thd,
        total_distortion: total,
        mean_qp_iters: res.qp_iters.iter().sum::<usize>() as f64 / len,
        softened_steps: res.softened.iter().filter(|s| **s).count(),
        non_optimal_steps: res.qp_status.iter().filter(|s| **s != QpStatus::Optimal).count(),
        max_abs_u: res.u.amax(),
        max_abs_y: res.y_clean.amax(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::BoxBounds;
    use nalgebra::{dmatrix, dvector};

    fn scalar(a: f64) -> StateSpaceModel {
        StateSpaceModel::new(dmatrix![a], dmatrix![1.0], dmatrix![1.0], Some(dmatrix![1.0]), 1.0).unwrap()
    }

    fn model_cfg(model: &StateSpaceModel, n: usize, integral: bool) -> ControllerConfig {
        let w = CostWeights::new(dmatrix![1.0], dmatrix![0.1], None, n).unwrap();
        ControllerConfig::new(
            Variant::ModelMpc,
            integral,
            w,
            ConstraintSpec::unconstrained(n, 1, 1),
            PredictorSource::Model(model.clone()),
        )
    }

    #[test]
    fn zero_everything_gives_zero_input() {
        for integral in [false, true] {
            let mut c = Controller::new(&model_cfg(&scalar(0.5), 3, integral)).unwrap();
            let out = c
                .step(&dvector![0.0], Some(&dvector![0.0]), &ReferencePreview::constant(&dvector![0.0], 3))
                .unwrap();
            assert_eq!(out.u, dvector![0.0]);
        }
    }

    #[test]
    fn unconstrained_step_matches_closed_form() {
        let model = scalar(0.5);
        let cfg = model_cfg(&model, 3, false);
        let mut c = Controller::new(&cfg).unwrap();
        let x = dvector![2.0];
        let out = c.step(&dvector![2.0], Some(&x), &ReferencePreview::constant(&dvector![0.0], 3)).unwrap();
        let (phi, gamma) = build_prediction(&model, 3);
        let cost = condense_cost(&gamma, &cfg.weights).unwrap();
        let u = qp::solve_unconstrained(&cost.g, &(&cost.f * (&phi * &x))).unwrap();
        assert!((out.u[0] - u[0]).abs() < 1e-12);
        // gradient vanishes at the unconstrained minimizer
        let grad = &cost.g * &u + &cost.f * (&phi * &x);
        assert!(grad.amax() < 1e-9 * (&cost.f * (&phi * &x)).amax());
    }

    #[test]
    fn integral_steady_state_holds_input() {
        let model = scalar(0.5);
        let mut c = Controller::new(&model_cfg(&model, 3, true)).unwrap();
        // steady state y = r = 2 needs u = 1; dx = 0
        c.state.u_prev = dvector![1.0];
        c.state.x_prev = Some(dvector![2.0]);
        let out = c
            .step(&dvector![2.0], Some(&dvector![2.0]), &ReferencePreview::constant(&dvector![2.0], 3))
            .unwrap();
        assert!((out.u[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variant_predictor_mismatch_is_rejected() {
        let mut cfg = model_cfg(&scalar(0.5), 3, false);
        cfg.variant = Variant::OutputDpc;
        assert!(matches!(Controller::new(&cfg), Err(ControllerError::Config(_))));
        let cfg = model_cfg(&scalar(0.5), 3, false);
        let mut c = Controller::new(&cfg).unwrap();
        let err = c.step(&dvector![0.0], None, &ReferencePreview::constant(&dvector![0.0], 3));
        assert!(matches!(err, Err(ControllerError::MissingState { step: 0 })));
    }

    #[test]
    fn hard_infeasible_reports_step_and_soft_recovers() {
        let model = scalar(0.9);
        let n = 3;
        let w = CostWeights::new(dmatrix![1.0], dmatrix![0.1], None, n).unwrap();
        let spec = ConstraintSpec::unconstrained(n, 1, 1)
            .with_input_box(&BoxBounds::symmetric(0.1, 1))
            .with_output_box(&BoxBounds::symmetric(1.0, 1));
        let cfg = ControllerConfig::new(Variant::ModelMpc, false, w, spec.clone(), PredictorSource::Model(model.clone()));
        let mut c = Controller::new(&cfg).unwrap();
        // x = 5 cannot be brought inside |y| <= 1 with |u| <= 0.1
        let preview = ReferencePreview::constant(&dvector![0.0], n);
        let err = c.step(&dvector![5.0], Some(&dvector![5.0]), &preview);
        assert!(matches!(err, Err(ControllerError::Infeasible { step: 0 })));

        let mut soft_cfg = cfg.clone();
        soft_cfg.constraints = spec.with_soft(Some(1e3));
        let mut c = Controller::new(&soft_cfg).unwrap();
        let out = c.step(&dvector![5.0], Some(&dvector![5.0]), &preview).unwrap();
        assert!(out.softened);
        assert!((out.u[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn output_buffers_roll() {
        let p = PredictorMatrices {
            p1: Matrix::zeros(2, 2),
            p2: Matrix::zeros(2, 2),
            gamma: dmatrix![1.0, 0.0; 0.5, 1.0],
            phi: None,
            horizon: 2,
            m: 1,
            q: 1,
            integral: false,
        };
        let w = CostWeights::new(dmatrix![1.0], dmatrix![1.0], None, 2).unwrap();
        let cfg = ControllerConfig::new(
            Variant::OutputDpc,
            false,
            w,
            ConstraintSpec::unconstrained(2, 1, 1),
            PredictorSource::Data(p),
        );
        let mut c = Controller::new(&cfg).unwrap();
        let preview = ReferencePreview::constant(&dvector![1.0], 2);
        for k in 0..3 {
            c.step(&dvector![k as f64], None, &preview).unwrap();
        }
        let ys: Vec<f64> = c.state().past_y.iter().map(|v| v[0]).collect();
        assert_eq!(ys, vec![1.0, 2.0]);
        assert_eq!(c.state().past_u.len(), 2);
    }

    #[test]
    fn preview_extrapolates_last_value() {
        let r = dmatrix![1.0, 2.0, 3.0];
        let p = ReferencePreview::from_trajectory(&r, 1, 3);
        assert_eq!(p.r, dmatrix![2.0, 3.0, 3.0, 3.0]);
    }

    fn sine_result(y: Vec<f64>, ts: f64) -> SimulationResult {
        let t = y.len();
        SimulationResult {
            ts,
            t: (0..t).map(|k| k as f64 * ts).collect(),
            r: Matrix::from_row_slice(1, t, &y),
            y: Matrix::from_row_slice(1, t, &y),
            y_clean: Matrix::from_row_slice(1, t, &y),
            u: Matrix::zeros(1, t),
            d: Matrix::zeros(0, t),
            x: Matrix::zeros(1, t),
            qp_status: vec![QpStatus::Optimal; t],
            qp_iters: vec![0; t],
            softened: vec![false; t],
            kkt_ok: vec![true; t],
            constraint_violation: vec![0.0; t],
        }
    }

    #[test]
    fn metric_examples() {
        let ts = 1.0 / 15000.0;
        let w = 2.0 * std::f64::consts::PI * 60.0;
        let pure: Vec<f64> = (0..3000).map(|k| (w * k as f64 * ts).cos()).collect();
        let spec = MetricSpec {
            offset_window: Some((0.0, 0.2)),
            fundamental_hz: Some(60.0),
            thd_periods: 10,
        };
        let m = metrics(&sine_result(pure, ts), &spec).unwrap();
        assert!(m.offset == 0.0 && m.rmse == 0.0);
        assert!(m.thd.unwrap() < 1e-12);
        let dist: Vec<f64> = (0..3000)
            .map(|k| {
                let t = k as f64 * ts;
                (w * t).cos() + 0.04 * (2.0 * w * t).cos()
            })
            .collect();
        let m = metrics(&sine_result(dist, ts), &spec).unwrap();
        assert!((m.thd.unwrap() - 0.04).abs() < 1e-10);
        assert!((m.total_distortion.unwrap() - 0.04).abs() < 1e-10);
    }

    #[test]
    fn metric_window_errors() {
        let res = sine_result(vec![0.0; 100], 1.0 / 15000.0);
        let spec = MetricSpec {
            offset_window: None,
            fundamental_hz: Some(60.0),
            thd_periods: 1,
        };
        assert!(matches!(metrics(&res, &spec), Err(ControllerError::InvalidWindow(_))));
        let spec = MetricSpec {
            offset_window: Some((1.0, 2.0)),
            ..Default::default()
        };
        assert!(matches!(metrics(&res, &spec), Err(ControllerError::InvalidWindow(_))));
    }

    #[test]
    fn result_csv_header() {
        let res = sine_result(vec![1.0, 2.0], 0.5);
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,r,y,y_clean,u,qp_status,qp_iters\n0,1,1,1,0,optimal,0\n"));
    }
}
