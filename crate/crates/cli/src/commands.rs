//! The `collect`, `estimate`, `run` and `compare` pipelines. Each has a
//! pure function returning in-memory results and a `cmd_*` wrapper that
//! writes files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use ddpc::controller::{
    self, Controller, ControllerConfig, ControllerError, MetricSpec, Metrics, PredictorSource, RunTiming, Scenario,
    SimulationResult, Variant,
};
use ddpc::estimation::{
    self, build_hankels, enforce_gamma_structure, estimate_integral_predictor, estimate_phi_orthogonal,
    estimate_predictor, excitation_report, integral_input_transform, rate_states, EstimationError,
    EstimationOptions, ExcitationReport, IntegralMode, PredictorMatrices,
};
use ddpc::mpc::{solve_dare, BoxBounds, ConstraintSpec, CostWeights, MpcError, TerminalAugmentation};
use ddpc::qp::QpOptions;
use ddpc::simsys::{add_output_noise, prbs_channels, simulate, ExperimentData, SimError, SignalSpec, StateSpaceModel};
use ddpc::{Matrix, Vector};
use log::info;
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig, SignalConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("estimation: {0}{h}", h = hint(.0))]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

fn hint(e: &EstimationError) -> &'static str {
    match e {
        EstimationError::Sizing { .. } => " (collect a longer experiment or reduce [estimation] l / horizon)",
        EstimationError::Excitation { .. } => " (use a richer excitation, e.g. a PRBS with hold = 1)",
        EstimationError::StateRequired => " (set [estimation] include_states = false or record states)",
        _ => "",
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seed offsets keep the excitation, noise and disturbance streams
/// independent when the user gives a single seed.
const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const DISTURBANCE_STREAM: u64 = 0xd1b5_4a32_d192_ed03;

/// Overrides the experiment and run seeds.
pub fn apply_seed(cfg: &mut ScenarioConfig, seed: u64) {
    if let Some(e) = cfg.experiment.as_mut() {
        e.seed = seed;
    }
    if let Some(r) = cfg.run.as_mut() {
        r.seed = seed;
    }
}

/// One row per channel; channel `i` uses `spec(i)`.
fn signal_rows(rows: usize, ts: f64, spec: impl Fn(usize) -> SignalSpec) -> Result<Matrix> {
    let mut out: Option<Matrix> = None;
    for i in 0..rows {
        let v = spec(i).generate(ts)?;
        let m = out.get_or_insert_with(|| Matrix::zeros(rows, v.len()));
        m.row_mut(i).copy_from_slice(&v);
    }
    Ok(out.unwrap_or_else(|| Matrix::zeros(0, 0)))
}

/// Open-loop estimation experiment. Returns the noisy data and the
/// noise-free outputs.
pub fn collect(cfg: &ScenarioConfig) -> Result<(ExperimentData, Matrix)> {
    let model = cfg.plant()?.discrete_model(1)?;
    let exp = cfg.experiment()?;
    let (m, len, ts) = (model.n_inputs(), exp.length, model.ts);
    let base = match &exp.signal {
        SignalConfig::Prbs {
            amplitude,
            hold,
            degree,
        } => prbs_channels(m, len, *amplitude, *hold, exp.seed, *degree)?,
        other => signal_rows(m, ts, |i| other.to_spec(len, exp.seed.wrapping_add(i as u64)))?,
    };
    let u = match cfg.estimation.as_ref().and_then(|e| e.mode.integral()) {
        Some(mode) => estimation::experiment_input(&base, mode),
        None => base,
    };
    let clean = simulate(&model, &u, None, &Vector::zeros(model.n_states()))?;
    let y = add_output_noise(&clean.y, exp.snr_db, exp.seed ^ NOISE_STREAM)?;
    let data = ExperimentData::new(u, y, clean.x.clone(), ts)?;
    Ok((data, clean.y))
}

pub fn cmd_collect(cfg: &ScenarioConfig, out: &Path) -> Result<PathBuf> {
    let (data, _) = collect(cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("experiment.csv");
    let f = File::create(&path).map_err(io_err(&path))?;
    data.write_csv(BufWriter::new(f))?;
    Ok(path)
}

pub fn read_experiment(path: &Path) -> Result<ExperimentData> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(ExperimentData::read_csv(BufReader::new(f))?)
}

/// Terminal augmentation from the DARE on the plant model, if requested.
pub fn terminal_augmentation(cfg: &ScenarioConfig) -> Result<Option<TerminalAugmentation>> {
    let ctrl = cfg.controller()?;
    if !ctrl.dare_terminal {
        return Ok(None);
    }
    if ctrl.integral {
        return Err(ConfigError::Invalid {
            section: "controller".into(),
            key: "dare_terminal".into(),
            msg: "not available with integral = true".into(),
        }
        .into());
    }
    let model = cfg.plant()?.discrete_model(1)?;
    let q = ctrl.q.to_matrix(model.n_outputs(), "controller", "q")?;
    let r = ctrl.r.to_matrix(model.n_inputs(), "controller", "r")?;
    let qx = model.c.transpose() * &q * &model.c;
    let p = solve_dare(&model.a, &model.b, &qx, &r)?;
    Ok(Some(TerminalAugmentation::new(&p, &q)?))
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub predictor: PredictorMatrices,
    pub report: ExcitationReport,
}

pub fn estimate(cfg: &ScenarioConfig, data: &ExperimentData) -> Result<EstimateOutput> {
    let est = cfg.estimation()?;
    let opts = EstimationOptions {
        pinv_tol: est.pinv_tol,
        ..Default::default()
    };
    let data = match terminal_augmentation(cfg)? {
        Some(aug) => aug.augment_data(data)?,
        None => data.clone(),
    };
    let states = est.include_states && data.x.is_some();
    if est.include_states && !states {
        info!("experiment has no states; skipping the Phi estimate");
    }
    let (predictor, hankels) = match est.mode.integral() {
        None => {
            let h = build_hankels(&data, est.horizon, est.l, states)?;
            let mut p = estimate_predictor(&h, &opts)?;
            if states {
                p.phi = Some(estimate_phi_orthogonal(&h, &opts)?);
            }
            (p, h)
        }
        Some(mode) => {
            let p = estimate_integral_predictor(&data, est.horizon, est.l, mode, states, &opts)?;
            let rate = ExperimentData {
                u: integral_input_transform(&data.u, IntegralMode::Differenced),
                y: data.y.clone(),
                x: data.x.as_ref().map(|x| rate_states(x, &data.y)),
                ts: data.ts,
            };
            (p, build_hankels(&rate, est.horizon, est.l, false)?)
        }
    };
    let predictor = if est.enforce_structure {
        enforce_gamma_structure(&predictor)
    } else {
        predictor
    };
    let report = excitation_report(&hankels, &opts)?;
    Ok(EstimateOutput { predictor, report })
}

pub fn cmd_estimate(cfg: &ScenarioConfig, data_path: &Path, out: &Path) -> Result<(PathBuf, ExcitationReport)> {
    let data = read_experiment(data_path)?;
    let res = estimate(cfg, &data)?;
    let path = write_predictor(&res.predictor, out)?;
    Ok((path, res.report))
}

pub fn write_predictor(p: &PredictorMatrices, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("predictor.txt");
    let f = File::create(&path).map_err(io_err(&path))?;
    p.write_text(BufWriter::new(f))?;
    Ok(path)
}

pub fn read_predictor(path: &Path) -> Result<PredictorMatrices> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(PredictorMatrices::read_text(BufReader::new(f))?)
}

/// Slack penalty when `[controller] rho` is omitted: three orders of
/// magnitude above the largest output weight.
pub fn default_rho(q: &Matrix) -> f64 {
    1e3 * q.diagonal().iter().fold(1.0_f64, |a, v| a.max(*v))
}

/// Controller configuration for `variant` from the `[controller]` section.
pub fn controller_config(
    cfg: &ScenarioConfig,
    variant: Variant,
    predictor: Option<&PredictorMatrices>,
) -> Result<ControllerConfig> {
    let ctrl = cfg.controller()?;
    let model = cfg.plant()?.discrete_model(1)?;
    let (m, q_plant) = (model.n_inputs(), model.n_outputs());
    let n = match (variant, predictor) {
        (Variant::ModelMpc, _) => cfg.estimation.as_ref().map(|e| e.horizon).or(predictor.map(|p| p.horizon)),
        (_, Some(p)) => Some(p.horizon),
        (_, None) => None,
    }
    .ok_or(ConfigError::Missing("estimation"))?;
    let aug = terminal_augmentation(cfg)?;
    if aug.is_some() && variant == Variant::OutputDpc {
        return Err(ConfigError::Invalid {
            section: "controller".into(),
            key: "dare_terminal".into(),
            msg: "output-dpc has no state to penalize".into(),
        }
        .into());
    }
    let q = ctrl.q.to_matrix(q_plant, "controller", "q")?;
    let r = ctrl.r.to_matrix(m, "controller", "r")?;
    let weights = match &aug {
        Some(a) => a.weights(&r, n)?,
        None => {
            let p = ctrl
                .p
                .as_ref()
                .map(|p| p.to_matrix(q_plant, "controller", "p"))
                .transpose()?;
            CostWeights::new(q, r, p, n)?
        }
    };
    let q_total = weights.q.nrows();
    let mut cons = ConstraintSpec::unconstrained(n, q_total, m);
    if let Some(u) = ctrl.u_max {
        cons = cons.with_input_box(&BoxBounds::symmetric(u, m));
    }
    if let Some(y) = ctrl.y_max {
        let mut b = BoxBounds::symmetric(y, q_plant);
        b.lo.resize(q_total, f64::NEG_INFINITY);
        b.hi.resize(q_total, f64::INFINITY);
        cons = cons.with_output_box(&b);
    }
    if ctrl.soft {
        let rho = ctrl.rho.unwrap_or_else(|| default_rho(&weights.q));
        cons = cons.with_soft(Some(rho));
    }
    let source = match variant {
        Variant::ModelMpc => PredictorSource::Model(model),
        _ => PredictorSource::Data(
            predictor
                .cloned()
                .ok_or_else(|| ControllerError::Config(format!("{variant} needs an estimated predictor")))?,
        ),
    };
    let mut cc = ControllerConfig::new(variant, ctrl.integral, weights, cons, source);
    cc.terminal_output = aug.map(|a| a.v);
    cc.warm_start = ctrl.warm_start;
    cc.qp = QpOptions {
        max_iter: ctrl.max_iter,
        ..Default::default()
    };
    Ok(cc)
}

/// Fine-rate plant and closed-loop scenario from the `[run]` section.
pub fn scenario(cfg: &ScenarioConfig) -> Result<(StateSpaceModel, Scenario)> {
    let run = cfg.run()?;
    let plant_cfg = cfg.plant()?;
    let plant = plant_cfg.discrete_model(run.substeps)?;
    let ts = plant_cfg.sampling_time();
    let steps = (run.duration / ts).round() as usize;
    let (q, nd) = (plant.n_outputs(), plant.n_disturbances());
    let reference = run.reference.to_spec(steps.max(1), run.seed).generate(ts)?;
    let reference = Matrix::from_fn(q, steps.max(1), |_, k| reference[k]);
    let fine = steps * run.substeps;
    let disturbance = match &run.disturbance {
        Some(sig) if nd > 0 => {
            let fine_ts = ts / run.substeps as f64;
            let seed = run.seed ^ DISTURBANCE_STREAM;
            Some(signal_rows(nd, fine_ts, |i| sig.to_spec(fine.max(1), seed.wrapping_add(i as u64)))?)
        }
        Some(_) => {
            return Err(ConfigError::Invalid {
                section: "run".into(),
                key: "disturbance".into(),
                msg: "plant has no disturbance input (bd)".into(),
            }
            .into())
        }
        None => None,
    };
    let x0 = match &run.x0 {
        Some(v) if v.len() != plant.n_states() => {
            return Err(ConfigError::Invalid {
                section: "run".into(),
                key: "x0".into(),
                msg: format!("expected {} entries", plant.n_states()),
            }
            .into())
        }
        Some(v) => Some(Vector::from_column_slice(v)),
        None => None,
    };
    Ok((
        plant,
        Scenario {
            steps,
            substeps: run.substeps,
            reference,
            disturbance,
            noise_snr_db: run.noise_snr_db,
            seed: run.seed,
            x0,
        },
    ))
}

pub fn metric_spec(cfg: &ScenarioConfig) -> Result<MetricSpec> {
    let run = cfg.run()?;
    Ok(MetricSpec {
        offset_window: run.offset_window.map(|[a, b]| (a, b)),
        fundamental_hz: run.fundamental_hz,
        thd_periods: run.thd_periods,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub variant: Variant,
    pub integral: bool,
    pub result: SimulationResult,
    pub timing: RunTiming,
    /// `None` for runs too short for the configured metric windows.
    pub metrics: Option<Metrics>,
}

impl RunOutput {
    pub fn label(&self) -> String {
        if self.integral {
            format!("{}-integral", self.variant)
        } else {
            self.variant.to_string()
        }
    }
}

pub fn run_variant(cfg: &ScenarioConfig, variant: Variant, predictor: Option<&PredictorMatrices>) -> Result<RunOutput> {
    let cc = controller_config(cfg, variant, predictor)?;
    let mut ctrl = Controller::new(&cc)?;
    let (plant, sc) = scenario(cfg)?;
    let (result, timing) = controller::run_closed_loop(&plant, &mut ctrl, &sc)?;
    let metrics = if result.is_empty() {
        None
    } else {
        Some(controller::metrics(&result, &metric_spec(cfg)?)?)
    };
    Ok(RunOutput {
        variant,
        integral: cc.integral,
        result,
        timing,
        metrics,
    })
}

/// Collects and estimates when any of `variants` needs a predictor.
pub fn predictor_for(cfg: &ScenarioConfig, variants: &[Variant]) -> Result<Option<PredictorMatrices>> {
    if variants.iter().all(|v| *v == Variant::ModelMpc) {
        return Ok(None);
    }
    let (data, _) = collect(cfg)?;
    Ok(Some(estimate(cfg, &data)?.predictor))
}

fn write_run(out: &Path, name: &str, run: &RunOutput) -> Result<()> {
    let path = out.join(format!("{name}.csv"));
    let f = File::create(&path).map_err(io_err(&path))?;
    run.result.write_csv(BufWriter::new(f))?;
    Ok(())
}

fn metrics_block(run: &RunOutput) -> String {
    let mut s = String::new();
    if let Some(m) = &run.metrics {
        for (k, v) in m.to_key_values() {
            s.push_str(&format!("{k}={v}\n"));
        }
    }
    s.push_str(&format!("mean_step_seconds={}\n", run.timing.mean_step_seconds));
    s
}

/// Closed-loop run of `[controller] variant`. Without a predictor file the
/// experiment and estimation are performed first.
pub fn cmd_run(cfg: &ScenarioConfig, predictor: Option<&Path>, out: &Path) -> Result<RunOutput> {
    let variant = cfg.controller()?.variant.0;
    let p = match predictor {
        Some(path) => Some(read_predictor(path)?),
        None => predictor_for(cfg, &[variant])?,
    };
    let run = run_variant(cfg, variant, p.as_ref())?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_run(out, "run", &run)?;
    let path = out.join("metrics.txt");
    fs::write(&path, metrics_block(&run)).map_err(io_err(&path))?;
    Ok(run)
}

/// Runs every variant of `[controller] compare` against the same plant
/// realization, one thread per controller.
pub fn compare(cfg: &ScenarioConfig, predictor: Option<&PredictorMatrices>) -> Result<Vec<RunOutput>> {
    let variants: Vec<Variant> = cfg.controller()?.compare.iter().map(|v| v.0).collect();
    if variants.len() < 2 {
        return Err(ConfigError::Invalid {
            section: "controller".into(),
            key: "compare".into(),
            msg: "list at least two variants".into(),
        }
        .into());
    }
    let owned;
    let predictor = match predictor {
        Some(p) => Some(p),
        None => {
            owned = predictor_for(cfg, &variants)?;
            owned.as_ref()
        }
    };
    thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|v| s.spawn(move || run_variant(cfg, *v, predictor)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("controller thread panicked"))
            .collect()
    })
}

/// Fixed-width comparison table.
pub fn format_table(runs: &[RunOutput]) -> String {
    let mut s = format!(
        "{:<22} {:>12} {:>12} {:>10} {:>10} {:>14}\n",
        "controller", "offset", "rmse", "thd_%", "qp_iters", "us_per_step"
    );
    for r in runs {
        let (offset, rmse, thd, iters) = match &r.metrics {
            Some(m) => (
                format!("{:.4e}", m.offset),
                format!("{:.4e}", m.rmse),
                m.total_distortion.map_or("-".into(), |d| format!("{:.3}", 100.0 * d)),
                format!("{:.2}", m.mean_qp_iters),
            ),
            None => ("-".into(), "-".into(), "-".into(), "-".into()),
        };
        s.push_str(&format!(
            "{:<22} {:>12} {:>12} {:>10} {:>10} {:>14.1}\n",
            r.label(),
            offset,
            rmse,
            thd,
            iters,
            1e6 * r.timing.mean_step_seconds
        ));
    }
    s
}

pub fn cmd_compare(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<RunOutput>> {
    let runs = compare(cfg, None)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut names: Vec<String> = Vec::new();
    let mut metrics = String::new();
    for r in &runs {
        let base = r.label();
        let dup = names.iter().filter(|n| n.starts_with(&base)).count();
        let name = if dup == 0 { base } else { format!("{base}-{}", dup + 1) };
        write_run(out, &name, r)?;
        metrics.push_str(&format!("[{name}]\n{}\n", metrics_block(r)));
        names.push(name);
    }
    let path = out.join("metrics.txt");
    fs::write(&path, metrics).map_err(io_err(&path))?;
    let path = out.join("compare.txt");
    let mut f = File::create(&path).map_err(io_err(&path))?;
    f.write_all(format_table(&runs).as_bytes()).map_err(io_err(&path))?;
    Ok(runs)
}
