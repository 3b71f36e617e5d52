//! Scenario files.
//!
//! A scenario is a TOML document with up to five sections: `[plant]`,
//! `[experiment]`, `[estimation]`, `[controller]` and `[run]`. Matrices are
//! arrays of rows, weights may be a scalar (times identity) or a matrix,
//! and signals are tables tagged by `kind`. Naming a preset in `[plant]`
//! fills every omitted section from that preset. See `README.md` for the
//! full grammar.

use std::fmt;
use std::str::FromStr;

use ddpc::controller::Variant;
use ddpc::estimation::IntegralMode;
use ddpc::simsys::{MultisineScaling, SignalKind, SignalSpec, StateSpaceModel};
use ddpc::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::presets::Preset;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(String),
    #[error("[{section}] {key}: {msg}")]
    Invalid { section: String, key: String, msg: String },
    #[error("[{0}] section is required for this command")]
    Missing(&'static str),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid<T>(section: &str, key: &str, msg: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid {
        section: section.into(),
        key: key.into(),
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bd: Option<Vec<Vec<f64>>>,
    /// Sampling time in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    /// The matrices are already discrete at `ts`.
    #[serde(default, skip_serializing_if = "is_false")]
    pub discrete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub signal: SignalConfig,
    pub length: usize,
    /// Output SNR in dB; `inf` disables noise.
    pub snr_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMode {
    Plain,
    IntegralSummed,
    IntegralDifferenced,
}

impl EstimationMode {
    pub fn integral(self) -> Option<IntegralMode> {
        match self {
            Self::Plain => None,
            Self::IntegralSummed => Some(IntegralMode::Summed),
            Self::IntegralDifferenced => Some(IntegralMode::Differenced),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    pub horizon: usize,
    pub l: usize,
    pub mode: EstimationMode,
    #[serde(default, skip_serializing_if = "is_false")]
    pub enforce_structure: bool,
    /// Also estimate `Phi` from recorded states (needed by state-DPC).
    #[serde(default = "yes")]
    pub include_states: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinv_tol: Option<f64>,
}

/// Scalar weight (times identity) or explicit matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = Weight;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a matrix given as an array of rows")
            }
            fn visit_f64<E>(self, v: f64) -> std::result::Result<Weight, E> {
                Ok(Weight::Scalar(v))
            }
            fn visit_i64<E>(self, v: i64) -> std::result::Result<Weight, E> {
                Ok(Weight::Scalar(v as f64))
            }
            fn visit_u64<E>(self, v: u64) -> std::result::Result<Weight, E> {
                Ok(Weight::Scalar(v as f64))
            }
            fn visit_seq<A: serde::de::SeqAccess<'de>>(self, seq: A) -> std::result::Result<Weight, A::Error> {
                Vec::<Vec<f64>>::deserialize(serde::de::value::SeqAccessDeserializer::new(seq)).map(Weight::Matrix)
            }
        }
        d.deserialize_any(V)
    }
}

impl Weight {
    pub fn to_matrix(&self, dim: usize, section: &str, key: &str) -> Result<Matrix> {
        match self {
            Weight::Scalar(s) => Ok(Matrix::identity(dim, dim) * *s),
            Weight::Matrix(rows) => {
                let m = rows_to_matrix(rows, section, key)?;
                if m.shape() != (dim, dim) {
                    return invalid(section, key, format!("expected {dim}x{dim}, got {:?}", m.shape()));
                }
                Ok(m)
            }
        }
    }
}

/// Controller variant name as it appears in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VariantName(pub Variant);

impl TryFrom<String> for VariantName {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        Variant::from_str(&s).map(VariantName).map_err(|e| e.to_string())
    }
}

impl From<VariantName> for String {
    fn from(v: VariantName) -> String {
        v.0.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    /// Variant used by `run`.
    pub variant: VariantName,
    /// Variants run side by side by `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<VariantName>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub integral: bool,
    pub q: Weight,
    pub r: Weight,
    /// Terminal weight; defaults to `q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Weight>,
    /// Use the DARE solution as terminal weight on an augmented output
    /// (model and state variants only).
    #[serde(default, skip_serializing_if = "is_false")]
    pub dare_terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_max: Option<f64>,
    /// Retry infeasible steps with softened output constraints.
    #[serde(default, skip_serializing_if = "is_false")]
    pub soft: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default = "yes")]
    pub warm_start: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seconds.
    pub duration: f64,
    pub reference: SignalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<SignalConfig>,
    /// Measurement SNR in dB relative to the reference; `inf` disables noise.
    pub noise_snr_db: f64,
    pub seed: u64,
    /// Plant samples per control sample.
    #[serde(default = "one")]
    pub substeps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Window `[start, end)` in seconds for the offset metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_window: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fundamental_hz: Option<f64>,
    #[serde(default = "ten")]
    pub thd_periods: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    #[default]
    PerComponent,
    Peak,
}

/// Signal description; time-defined kinds are evaluated at sample instants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SignalConfig {
    Prbs {
        amplitude: f64,
        #[serde(default = "one")]
        hold: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        degree: Option<u32>,
    },
    /// `[time, level]` pairs; zero before the first.
    Steps { steps: Vec<[f64; 2]> },
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `count` components with frequencies uniform in `[f_lo, f_hi]` and
    /// random phases.
    Multisine {
        amplitude: f64,
        count: usize,
        f_lo: f64,
        f_hi: f64,
        #[serde(default)]
        scaling: Scaling,
    },
    Constant { value: f64 },
    Zero,
}

fn is_false(b: &bool) -> bool {
    !*b
}
fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn ten() -> usize {
    10
}

pub fn rows_to_matrix(rows: &[Vec<f64>], section: &str, key: &str) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return invalid(section, key, "matrix must be non-empty");
    }
    if let Some(i) = rows.iter().position(|row| row.len() != c) {
        return invalid(section, key, format!("row {} has {} entries, expected {c}", i + 1, rows[i].len()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return invalid(section, key, "entries must be finite");
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl SignalConfig {
    /// Signal spec for `length` samples; `seed` drives PRBS and multisine.
    pub fn to_spec(&self, length: usize, seed: u64) -> SignalSpec {
        let kind = match self {
            SignalConfig::Prbs { amplitude, hold, degree } => SignalKind::Prbs {
                amplitude: *amplitude,
                hold: *hold,
                seed,
                degree: *degree,
            },
            SignalConfig::Steps { steps } => SignalKind::StepSequence {
                steps: steps.iter().map(|[t, v]| (*t, *v)).collect(),
            },
            SignalConfig::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => SignalKind::Sinusoid {
                amplitude: *amplitude,
                frequency: *frequency,
                phase: *phase,
            },
            SignalConfig::Multisine {
                amplitude,
                count,
                f_lo,
                f_hi,
                scaling,
            } => {
                let scaling = match scaling {
                    Scaling::PerComponent => MultisineScaling::PerComponent,
                    Scaling::Peak => MultisineScaling::Peak,
                };
                return SignalSpec::random_multisine(*count, *f_lo, *f_hi, *amplitude, scaling, length, seed);
            }
            SignalConfig::Constant { value } => SignalKind::Constant { value: *value },
            SignalConfig::Zero => SignalKind::Zero,
        };
        SignalSpec::new(kind, length)
    }

    fn check(&self, section: &str, key: &str) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                invalid(section, &format!("{key}.{name}"), "must be finite")
            }
        };
        match self {
            SignalConfig::Prbs { amplitude, hold, .. } => {
                finite("amplitude", *amplitude)?;
                if *hold == 0 {
                    return invalid(section, &format!("{key}.hold"), "must be >= 1");
                }
            }
            SignalConfig::Steps { steps } => {
                for s in steps {
                    finite("steps", s[0])?;
                    finite("steps", s[1])?;
                }
            }
            SignalConfig::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => {
                finite("amplitude", *amplitude)?;
                finite("frequency", *frequency)?;
                finite("phase", *phase)?;
            }
            SignalConfig::Multisine {
                amplitude, f_lo, f_hi, ..
            } => {
                finite("amplitude", *amplitude)?;
                finite("f_lo", *f_lo)?;
                finite("f_hi", *f_hi)?;
                if !(0.0 <= *f_lo && f_lo <= f_hi) {
                    return invalid(section, &format!("{key}.f_lo"), "need 0 <= f_lo <= f_hi");
                }
            }
            SignalConfig::Constant { value } => finite("value", *value)?,
            SignalConfig::Zero => {}
        }
        Ok(())
    }
}

/// Field name out of serde's "missing field `name`" message.
fn missing_field(msg: &str) -> Option<&str> {
    msg.strip_prefix("missing field `")?.split('`').next()
}

/// Parses a scenario and fills omitted sections from the plant preset.
pub fn parse(text: &str) -> Result<ScenarioConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        let loc = inner
            .span()
            .map(|s| {
                let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                format!("line {line}: ")
            })
            .unwrap_or_default();
        match path.split_once('.').filter(|_| path != ".") {
            Some((section, key)) => ConfigError::Invalid {
                section: section.into(),
                key: key.into(),
                msg: format!("{loc}{msg}"),
            },
            None if path != "." && !path.is_empty() => ConfigError::Invalid {
                section: path,
                key: missing_field(&msg).unwrap_or("-").into(),
                msg: format!("{loc}{msg}"),
            },
            None => ConfigError::Syntax(format!("{loc}{msg}")),
        }
    })?;
    let cfg = cfg.with_preset_defaults();
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_text(cfg: &ScenarioConfig) -> String {
    toml::to_string(cfg).expect("scenario config always serializes")
}

impl ScenarioConfig {
    fn with_preset_defaults(mut self) -> Self {
        let Some(preset) = self.plant.as_ref().and_then(|p| p.preset) else {
            return self;
        };
        let full = preset.config();
        self.experiment = self.experiment.or(full.experiment);
        self.estimation = self.estimation.or(full.estimation);
        self.controller = self.controller.or(full.controller);
        self.run = self.run.or(full.run);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.plant {
            p.model()?;
        }
        if let Some(e) = &self.experiment {
            e.signal.check("experiment", "signal")?;
            if e.length == 0 {
                return invalid("experiment", "length", "must be >= 1");
            }
            if e.snr_db.is_nan() || e.snr_db == f64::NEG_INFINITY {
                return invalid("experiment", "snr_db", "must be a number or inf");
            }
        }
        if let Some(e) = &self.estimation {
            if e.horizon == 0 {
                return invalid("estimation", "horizon", "must be >= 1");
            }
            if e.l == 0 {
                return invalid("estimation", "l", "must be >= 1");
            }
            if let Some(t) = e.pinv_tol {
                if !(t > 0.0 && t < 1.0) {
                    return invalid("estimation", "pinv_tol", "must be in (0, 1)");
                }
            }
        }
        if let Some(c) = &self.controller {
            for (key, w) in [("q", Some(&c.q)), ("r", Some(&c.r)), ("p", c.p.as_ref())] {
                match w {
                    Some(Weight::Scalar(s)) if !(s.is_finite() && *s >= 0.0) => {
                        return invalid("controller", key, "must be finite and >= 0")
                    }
                    Some(Weight::Matrix(rows)) => {
                        rows_to_matrix(rows, "controller", key)?;
                    }
                    _ => {}
                }
            }
            for (key, v) in [("u_max", c.u_max), ("y_max", c.y_max), ("rho", c.rho)] {
                if let Some(v) = v {
                    if !(v > 0.0) || v.is_nan() {
                        return invalid("controller", key, "must be > 0");
                    }
                }
            }
            if c.dare_terminal && c.p.is_some() {
                return invalid("controller", "dare_terminal", "conflicts with an explicit p");
            }
        }
        if let Some(r) = &self.run {
            if !(r.duration >= 0.0 && r.duration.is_finite()) {
                return invalid("run", "duration", "must be finite and >= 0");
            }
            r.reference.check("run", "reference")?;
            if let Some(d) = &r.disturbance {
                d.check("run", "disturbance")?;
            }
            if r.noise_snr_db.is_nan() || r.noise_snr_db == f64::NEG_INFINITY {
                return invalid("run", "noise_snr_db", "must be a number or inf");
            }
            if r.substeps == 0 {
                return invalid("run", "substeps", "must be >= 1");
            }
            if let Some([a, b]) = r.offset_window {
                if !(a < b) {
                    return invalid("run", "offset_window", "start must precede end");
                }
            }
            if let Some(f) = r.fundamental_hz {
                if !(f > 0.0 && f.is_finite()) {
                    return invalid("run", "fundamental_hz", "must be > 0");
                }
            }
        }
        Ok(())
    }

    pub fn plant(&self) -> Result<&PlantConfig> {
        self.plant.as_ref().ok_or(ConfigError::Missing("plant"))
    }
    pub fn experiment(&self) -> Result<&ExperimentConfig> {
        self.experiment.as_ref().ok_or(ConfigError::Missing("experiment"))
    }
    pub fn estimation(&self) -> Result<&EstimationConfig> {
        self.estimation.as_ref().ok_or(ConfigError::Missing("estimation"))
    }
    pub fn controller(&self) -> Result<&ControllerSection> {
        self.controller.as_ref().ok_or(ConfigError::Missing("controller"))
    }
    pub fn run(&self) -> Result<&RunConfig> {
        self.run.as_ref().ok_or(ConfigError::Missing("run"))
    }
}

impl PlantConfig {
    /// Continuous (or already discrete, with `discrete = true`) model.
    pub fn model(&self) -> Result<StateSpaceModel> {
        let has_matrices = self.a.is_some() || self.b.is_some() || self.c.is_some() || self.bd.is_some();
        if let Some(p) = self.preset {
            if has_matrices || self.ts.is_some() || self.discrete {
                return invalid("plant", "preset", "a preset cannot be combined with explicit matrices");
            }
            return Ok(p.continuous_model());
        }
        let get = |key: &str, v: &Option<Vec<Vec<f64>>>| match v {
            Some(rows) => rows_to_matrix(rows, "plant", key),
            None => invalid("plant", key, "missing (give matrices or a preset)"),
        };
        let a = get("a", &self.a)?;
        let b = get("b", &self.b)?;
        let c = get("c", &self.c)?;
        let bd = self.bd.as_ref().map(|rows| rows_to_matrix(rows, "plant", "bd")).transpose()?;
        let ts = match self.ts {
            Some(t) if t > 0.0 && t.is_finite() => t,
            Some(_) => return invalid("plant", "ts", "must be > 0"),
            None => return invalid("plant", "ts", "missing"),
        };
        StateSpaceModel::new(a, b, c, bd, if self.discrete { ts } else { 0.0 })
            .map_err(|e| ConfigError::Invalid {
                section: "plant".into(),
                key: "a".into(),
                msg: e.to_string(),
            })
    }

    pub fn sampling_time(&self) -> f64 {
        match self.preset {
            Some(p) => p.sampling_time(),
            None => self.ts.unwrap_or(0.0),
        }
    }

    /// Model discretized at `ts / substeps`.
    pub fn discrete_model(&self, substeps: usize) -> Result<StateSpaceModel> {
        let model = self.model()?;
        let ts = self.sampling_time();
        if model.is_discrete() {
            if substeps != 1 {
                return invalid("run", "substeps", "a discrete plant cannot be sub-sampled");
            }
            return Ok(model);
        }
        model
            .discretize_zoh(ts / substeps as f64)
            .map_err(|e| ConfigError::Invalid {
                section: "plant".into(),
                key: "ts".into(),
                msg: e.to_string(),
            })
    }
}

impl fmt::Display for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&to_text(self))
    }
}
