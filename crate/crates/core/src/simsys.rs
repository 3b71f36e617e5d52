//! Plant models, excitation signals, measurement noise and open-loop
//! simulation used to produce experiment data.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{ensure_finite, LinalgError, Matrix, Vector};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SimError::InvalidInput(msg.into()))
}

/// Linear time-invariant plant
///
/// ```text
/// x(k+1) = A x(k) + B u(k) + Bd d(k)
/// y(k)   = C x(k)
/// ```
///
/// `ts == 0` marks a continuous-time model (`dx/dt = A x + B u + Bd d`).
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub bd: Matrix,
    pub ts: f64,
}

impl StateSpaceModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, bd: Option<Matrix>, ts: f64) -> Result<Self> {
        let n = a.nrows();
        let bd = bd.unwrap_or_else(|| Matrix::zeros(n, 0));
        let model = Self { a, b, c, bd, ts };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if !self.a.is_square() {
            return invalid(format!("A must be square, got {:?}", self.a.shape()));
        }
        if self.b.nrows() != n {
            return invalid(format!("B has {} rows, A has {n}", self.b.nrows()));
        }
        if self.c.ncols() != n {
            return invalid(format!("C has {} columns, A has {n}", self.c.ncols()));
        }
        if self.bd.nrows() != n {
            return invalid(format!("Bd has {} rows, A has {n}", self.bd.nrows()));
        }
        if !(self.ts >= 0.0) || !self.ts.is_finite() {
            return invalid(format!("sample time must be >= 0, got {}", self.ts));
        }
        for (m, name) in [
            (&self.a, "A"),
            (&self.b, "B"),
            (&self.c, "C"),
            (&self.bd, "Bd"),
        ] {
            ensure_finite(m, "state-space model").map_err(|_| {
                SimError::InvalidInput(format!("{name} contains non-finite entries"))
            })?;
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }
    pub fn n_disturbances(&self) -> usize {
        self.bd.ncols()
    }
    pub fn is_discrete(&self) -> bool {
        self.ts > 0.0
    }

    /// Exact zero-order-hold discretization of `(A, [B Bd])`.
    ///
    /// Computed from the exponential of the augmented block matrix
    /// `[[A, B, Bd], [0, 0, 0]] * ts`.
    pub fn discretize_zoh(&self, ts: f64) -> Result<Self> {
        if self.is_discrete() {
            return invalid("model is already discrete-time");
        }
        if !(ts > 0.0) || !ts.is_finite() {
            return invalid(format!("sample time must be > 0, got {ts}"));
        }
        let n = self.n_states();
        let m = self.n_inputs();
        let d = self.n_disturbances();
        let mut aug = Matrix::zeros(n + m + d, n + m + d);
        aug.view_mut((0, 0), (n, n)).copy_from(&self.a);
        aug.view_mut((0, n), (n, m)).copy_from(&self.b);
        aug.view_mut((0, n + m), (n, d)).copy_from(&self.bd);
        let e = (aug * ts).exp();
        Ok(Self {
            a: e.view((0, 0), (n, n)).into_owned(),
            b: e.view((0, n), (n, m)).into_owned(),
            c: self.c.clone(),
            bd: e.view((0, n + m), (n, d)).into_owned(),
            ts,
        })
    }

    /// Steady-state gain `-C A^-1 B` of a continuous-time model.
    pub fn dc_gain(&self) -> Result<Matrix> {
        let a_inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or_else(|| SimError::InvalidInput("A is singular".into()))?;
        Ok(-(&self.c * a_inv * &self.b))
    }
}

/// Recorded trajectories of an excitation experiment. Column `k` holds
/// sample `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub u: Matrix,
    pub y: Matrix,
    pub x: Option<Matrix>,
    pub ts: f64,
}

impl ExperimentData {
    pub fn new(u: Matrix, y: Matrix, x: Option<Matrix>, ts: f64) -> Result<Self> {
        let data = Self { u, y, x, ts };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.u.ncols();
        if self.y.ncols() != t {
            return invalid(format!("U has {t} samples, Y has {}", self.y.ncols()));
        }
        if let Some(x) = &self.x {
            if x.ncols() != t {
                return invalid(format!("U has {t} samples, X has {}", x.ncols()));
            }
        }
        ensure_finite(&self.u, "experiment U")?;
        ensure_finite(&self.y, "experiment Y")?;
        if let Some(x) = &self.x {
            ensure_finite(x, "experiment X")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `t,u1..um,y1..yq[,x1..xn]` with shortest round-trip float
    /// formatting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.u.nrows()).map(|i| format!("u{i}")));
        header.extend((1..=self.y.nrows()).map(|i| format!("y{i}")));
        if let Some(x) = &self.x {
            header.extend((1..=x.nrows()).map(|i| format!("x{i}")));
        }
        wtr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![format!("{}", k as f64 * self.ts)];
            row.extend(self.u.column(k).iter().map(|v| format!("{v}")));
            row.extend(self.y.column(k).iter().map(|v| format!("{v}")));
            if let Some(x) = &self.x {
                row.extend(x.column(k).iter().map(|v| format!("{v}")));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let count = |prefix: char| {
            header
                .iter()
                .filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
                .count()
        };
        let (m, q, n) = (count('u'), count('y'), count('x'));
        if header.get(0) != Some("t") || header.len() != 1 + m + q + n {
            return invalid(format!(
                "unexpected experiment header {:?}",
                header.iter().collect::<Vec<_>>()
            ));
        }
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| SimError::InvalidInput(format!("bad number in experiment csv: {e}")))?;
            cols.push(vals);
        }
        let t = cols.len();
        let ts = if t >= 2 { cols[1][0] - cols[0][0] } else { 0.0 };
        let take = |off: usize, rows: usize| {
            Matrix::from_fn(rows, t, |i, k| cols[k][off + i])
        };
        let u = take(1, m);
        let y = take(1 + m, q);
        let x = (n > 0).then(|| take(1 + m + q, n));
        Self::new(u, y, x, ts)
    }
}

/// Feedback taps (1-based, Fibonacci form) of maximal-length LFSRs.
const LFSR_TAPS: [&[u32]; 19] = [
    &[2, 1],
    &[3, 2],
    &[4, 3],
    &[5, 3],
    &[6, 5],
    &[7, 6],
    &[8, 6, 5, 4],
    &[9, 5],
    &[10, 7],
    &[11, 9],
    &[12, 11, 10, 4],
    &[13, 12, 11, 8],
    &[14, 13, 12, 2],
    &[15, 14],
    &[16, 15, 13, 4],
    &[17, 14],
    &[18, 11],
    &[19, 18, 17, 14],
    &[20, 17],
];

pub const MIN_LFSR_DEGREE: u32 = 2;
pub const MAX_LFSR_DEGREE: u32 = 20;

/// Maximal-length linear feedback shift register.
#[derive(Debug, Clone)]
pub struct Lfsr {
    state: u32,
    mask: u32,
    degree: u32,
}

impl Lfsr {
    pub fn new(degree: u32, seed: u64) -> Result<Self> {
        if !(MIN_LFSR_DEGREE..=MAX_LFSR_DEGREE).contains(&degree) {
            return invalid(format!(
                "LFSR degree must be in {MIN_LFSR_DEGREE}..={MAX_LFSR_DEGREE}, got {degree}"
            ));
        }
        let taps = LFSR_TAPS[(degree - MIN_LFSR_DEGREE) as usize];
        let mask = taps.iter().fold(0u32, |acc, &t| acc | 1 << (degree - t));
        let period = (1u64 << degree) - 1;
        let state = (seed % period + 1) as u32;
        Ok(Self { state, mask, degree })
    }

    pub fn period(&self) -> u64 {
        (1u64 << self.degree) - 1
    }

    /// Smallest supported degree whose period covers `chips` samples.
    pub fn degree_for(chips: usize) -> u32 {
        (MIN_LFSR_DEGREE..=MAX_LFSR_DEGREE)
            .find(|&d| (1u64 << d) > chips as u64)
            .unwrap_or(MAX_LFSR_DEGREE)
    }

    pub fn next_bit(&mut self) -> bool {
        let out = self.state & 1 == 1;
        let fb = (self.state & self.mask).count_ones() & 1;
        self.state = (self.state >> 1) | (fb << (self.degree - 1));
        out
    }
}

/// How a multisine's amplitude is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultisineScaling {
    /// Every component has the given amplitude.
    PerComponent,
    /// Components share one amplitude chosen so the sampled peak equals it.
    Peak,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalKind {
    /// Maximal-length pseudo-random binary sequence in `{-amplitude, +amplitude}`.
    Prbs {
        amplitude: f64,
        hold: usize,
        seed: u64,
        /// LFSR degree; `None` picks the smallest degree covering the length.
        degree: Option<u32>,
    },
    /// Piecewise-constant levels: `(switch time in seconds, level)`, zero
    /// before the first switch.
    StepSequence { steps: Vec<(f64, f64)> },
    /// `amplitude * cos(2 pi f t + phase)`.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    /// Sum of `cos(2 pi f_i t + phase_i)` components.
    Multisine {
        amplitude: f64,
        scaling: MultisineScaling,
        frequencies: Vec<f64>,
        phases: Vec<f64>,
    },
    Constant { value: f64 },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub kind: SignalKind,
    pub length: usize,
}

impl SignalSpec {
    pub fn new(kind: SignalKind, length: usize) -> Self {
        Self { kind, length }
    }

    /// Multisine with `count` frequencies drawn uniformly from `[f_lo, f_hi]`
    /// and uniformly random phases.
    pub fn random_multisine(
        count: usize,
        f_lo: f64,
        f_hi: f64,
        amplitude: f64,
        scaling: MultisineScaling,
        length: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..count).map(|_| rng.random_range(f_lo..=f_hi)).collect();
        let phases = (0..count).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self::new(
            SignalKind::Multisine {
                amplitude,
                scaling,
                frequencies,
                phases,
            },
            length,
        )
    }

    pub fn validate(&self, ts: f64) -> Result<()> {
        if self.length == 0 {
            return invalid("signal length must be >= 1");
        }
        let amp_ok = |a: f64| a.is_finite();
        match &self.kind {
            SignalKind::Prbs {
                amplitude, hold, degree, ..
            } => {
                if !amp_ok(*amplitude) {
                    return invalid("PRBS amplitude must be finite");
                }
                if *hold == 0 {
                    return invalid("PRBS hold must be >= 1");
                }
                if let Some(d) = degree {
                    if !(MIN_LFSR_DEGREE..=MAX_LFSR_DEGREE).contains(d) {
                        return invalid(format!("PRBS degree {d} unsupported"));
                    }
                }
            }
            SignalKind::StepSequence { steps } => {
                if steps.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
                    return invalid("step sequence entries must be finite");
                }
            }
            SignalKind::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => {
                if !amp_ok(*amplitude) || !frequency.is_finite() || !phase.is_finite() {
                    return invalid("sinusoid parameters must be finite");
                }
            }
            SignalKind::Multisine {
                amplitude,
                frequencies,
                phases,
                ..
            } => {
                if !amp_ok(*amplitude) {
                    return invalid("multisine amplitude must be finite");
                }
                if frequencies.len() != phases.len() {
                    return invalid("multisine needs one phase per frequency");
                }
                if ts > 0.0 {
                    let nyquist = 0.5 / ts;
                    if let Some(f) = frequencies.iter().find(|f| f.abs() >= nyquist) {
                        return invalid(format!("multisine frequency {f} Hz >= Nyquist {nyquist} Hz"));
                    }
                }
            }
            SignalKind::Constant { value } => {
                if !amp_ok(*value) {
                    return invalid("constant value must be finite");
                }
            }
            SignalKind::Zero => {}
        }
        Ok(())
    }

    /// Value at continuous time `t` for the time-defined kinds (everything
    /// except PRBS).
    pub fn value_at(&self, t: f64) -> f64 {
        match &self.kind {
            SignalKind::StepSequence { steps } => steps
                .iter()
                .rev()
                .find(|(ts, _)| *ts <= t)
                .map_or(0.0, |(_, v)| *v),
            SignalKind::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => amplitude * (2.0 * PI * frequency * t + phase).cos(),
            SignalKind::Multisine {
                amplitude,
                frequencies,
                phases,
                ..
            } => {
                amplitude
                    * frequencies
                        .iter()
                        .zip(phases)
                        .map(|(f, p)| (2.0 * PI * f * t + p).cos())
                        .sum::<f64>()
            }
            SignalKind::Constant { value } => *value,
            SignalKind::Zero | SignalKind::Prbs { .. } => 0.0,
        }
    }

    pub fn generate(&self, ts: f64) -> Result<Vec<f64>> {
        self.validate(ts)?;
        let len = self.length;
        match &self.kind {
            SignalKind::Prbs {
                amplitude,
                hold,
                seed,
                degree,
            } => {
                let chips = len.div_ceil(*hold);
                let mut lfsr = Lfsr::new(degree.unwrap_or_else(|| Lfsr::degree_for(chips)), *seed)?;
                let mut out = Vec::with_capacity(len);
                while out.len() < len {
                    let v = if lfsr.next_bit() { *amplitude } else { -*amplitude };
                    let n = (*hold).min(len - out.len());
                    out.extend(std::iter::repeat_n(v, n));
                }
                Ok(out)
            }
            SignalKind::Multisine {
                amplitude,
                scaling: MultisineScaling::Peak,
                frequencies,
                phases,
            } => {
                let raw: Vec<f64> = (0..len)
                    .map(|k| {
                        let t = k as f64 * ts;
                        frequencies
                            .iter()
                            .zip(phases)
                            .map(|(f, p)| (2.0 * PI * f * t + p).cos())
                            .sum()
                    })
                    .collect();
                let peak = raw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
                Ok(raw.into_iter().map(|v| v * scale).collect())
            }
            _ => Ok((0..len).map(|k| self.value_at(k as f64 * ts)).collect()),
        }
    }
}

/// PRBS for several input channels. Channel `i` takes the `i`-th run of
/// `ceil(len / hold)` chips from one maximal-length sequence, so no channel
/// is a short shift of another (two LFSRs with the same taps only differ by
/// a shift, which can make the stacked input Hankel matrices singular). A
/// single channel equals [`SignalKind::Prbs`] with the same seed.
pub fn prbs_channels(
    channels: usize,
    len: usize,
    amplitude: f64,
    hold: usize,
    seed: u64,
    degree: Option<u32>,
) -> Result<Matrix> {
    if hold == 0 || !amplitude.is_finite() {
        return invalid("PRBS needs hold >= 1 and a finite amplitude");
    }
    let chips = len.div_ceil(hold);
    let mut lfsr = Lfsr::new(degree.unwrap_or_else(|| Lfsr::degree_for(chips * channels)), seed)?;
    if channels > 1 && ((chips * channels) as u64) > lfsr.period() {
        return invalid(format!(
            "LFSR period {} is shorter than {channels} channels of {chips} chips",
            lfsr.period()
        ));
    }
    let mut out = Matrix::zeros(channels, len);
    for i in 0..channels {
        for c in 0..chips {
            let v = if lfsr.next_bit() { amplitude } else { -amplitude };
            for k in c * hold..((c + 1) * hold).min(len) {
                out[(i, k)] = v;
            }
        }
    }
    Ok(out)
}

/// Simulates a discrete model from `x0`. The output `y(k)` is recorded
/// before `u(k)` is applied.
pub fn simulate(
    model: &StateSpaceModel,
    u: &Matrix,
    d: Option<&Matrix>,
    x0: &Vector,
) -> Result<ExperimentData> {
    if !model.is_discrete() {
        return invalid("simulate needs a discrete-time model");
    }
    let (n, m) = (model.n_states(), model.n_inputs());
    if u.nrows() != m {
        return invalid(format!("U has {} rows, model has {m} inputs", u.nrows()));
    }
    if x0.len() != n {
        return invalid(format!("x0 has length {}, model has {n} states", x0.len()));
    }
    let t = u.ncols();
    if let Some(d) = d {
        if d.nrows() != model.n_disturbances() || d.ncols() != t {
            return invalid(format!(
                "D is {}x{}, expected {}x{t}",
                d.nrows(),
                d.ncols(),
                model.n_disturbances()
            ));
        }
    }
    let mut x = x0.clone();
    let mut xs = Matrix::zeros(n, t);
    let mut ys = Matrix::zeros(model.n_outputs(), t);
    for k in 0..t {
        xs.set_column(k, &x);
        ys.set_column(k, &(&model.c * &x));
        let mut next = &model.a * &x + &model.b * u.column(k);
        if let Some(d) = d {
            next += &model.bd * d.column(k);
        }
        x = next;
    }
    ExperimentData::new(u.clone(), ys, Some(xs), model.ts)
}

/// Per-channel sample variance of the rows of `y`.
pub fn row_variances(y: &Matrix) -> Vec<f64> {
    let t = y.ncols() as f64;
    y.row_iter()
        .map(|row| {
            let mean = row.sum() / t;
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t
        })
        .collect()
}

/// Standard deviation of white noise that yields `snr_db` against a signal
/// of variance `signal_var`.
pub fn noise_std_for_snr(signal_var: f64, snr_db: f64) -> f64 {
    (signal_var / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Standard-normal white noise, `rows x len`, deterministic in `seed`.
pub fn white_noise(rows: usize, len: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fill column by column so the sample order is time-major.
    let mut out = Matrix::zeros(rows, len);
    for k in 0..len {
        for i in 0..rows {
            out[(i, k)] = StandardNormal.sample(&mut rng);
        }
    }
    out
}

/// Adds zero-mean Gaussian noise to every output channel so that
/// `10 log10(var(y) / var(noise)) = snr_db`. `snr_db = +inf` disables noise.
pub fn add_output_noise(y: &Matrix, snr_db: f64, seed: u64) -> Result<Matrix> {
    ensure_finite(y, "add_output_noise")?;
    if snr_db == f64::INFINITY {
        return Ok(y.clone());
    }
    if !snr_db.is_finite() {
        return invalid(format!("SNR must be finite or +inf, got {snr_db}"));
    }
    let vars = row_variances(y);
    if let Some(i) = vars.iter().position(|v| !(*v > 0.0)) {
        return invalid(format!("output channel {} has zero variance; SNR undefined", i + 1));
    }
    let mut noise = white_noise(y.nrows(), y.ncols(), seed);
    for (i, var) in vars.iter().enumerate() {
        let std = noise_std_for_snr(*var, snr_db);
        noise.row_mut(i).scale_mut(std);
    }
    Ok(y + noise)
}
