//! The two case studies: a linear motor positioning stage and the output
//! LC filter of a single-phase UPS inverter.

use std::f64::consts::SQRT_2;

use ddpc::controller::Variant;
use ddpc::simsys::StateSpaceModel;
use ddpc::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::{
    ControllerSection, EstimationConfig, EstimationMode, ExperimentConfig, PlantConfig, RunConfig, Scaling,
    ScenarioConfig, SignalConfig, VariantName, Weight,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    LinearMotor,
    Ups,
}

/// Filter capacitance of the UPS output stage (F).
pub const UPS_CAPACITANCE: f64 = 3e-4;
/// Load admittance term as it enters the UPS state matrix.
pub const UPS_A22: f64 = -506.46;

fn dm<const C: usize>(rows: &[[f64; C]]) -> Matrix {
    Matrix::from_fn(rows.len(), C, |i, j| rows[i][j])
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::LinearMotor => "linear-motor",
            Preset::Ups => "ups",
        }
    }

    pub fn sampling_time(self) -> f64 {
        match self {
            Preset::LinearMotor => 0.02,
            Preset::Ups => 1.0 / 15000.0,
        }
    }

    pub fn continuous_model(self) -> StateSpaceModel {
        let (a, b, c, bd) = match self {
            // position and velocity of a mass with viscous friction
            Preset::LinearMotor => (
                dm(&[[0.0, 1.0], [0.0, -50.0]]),
                dm(&[[0.0], [0.5]]),
                dm(&[[1.0, 0.0]]),
                dm(&[[0.0], [0.5]]),
            ),
            // inductor current and capacitor voltage; the load current
            // enters the capacitor node
            Preset::Ups => (
                dm(&[[-15.0, -1000.0], [1.0 / UPS_CAPACITANCE, UPS_A22]]),
                dm(&[[1000.0], [0.0]]),
                dm(&[[0.0, 1.0]]),
                dm(&[[0.0], [-1.0 / UPS_CAPACITANCE]]),
            ),
        };
        StateSpaceModel::new(a, b, c, Some(bd), 0.0).expect("preset model is well formed")
    }

    /// Full scenario for this preset.
    pub fn config(self) -> ScenarioConfig {
        let plant = Some(PlantConfig {
            preset: Some(self),
            ..Default::default()
        });
        match self {
            Preset::LinearMotor => ScenarioConfig {
                plant,
                experiment: Some(ExperimentConfig {
                    signal: SignalConfig::Prbs {
                        amplitude: 20.0,
                        hold: 1,
                        degree: None,
                    },
                    length: 6022,
                    snr_db: 26.0,
                    seed: 1,
                }),
                estimation: Some(EstimationConfig {
                    horizon: 10,
                    l: 3000,
                    mode: EstimationMode::Plain,
                    enforce_structure: false,
                    include_states: true,
                    pinv_tol: None,
                }),
                controller: Some(ControllerSection {
                    variant: VariantName(Variant::OutputDpc),
                    compare: Variant::ALL.iter().map(|v| VariantName(*v)).collect(),
                    integral: false,
                    q: Weight::Scalar(6e5),
                    r: Weight::Scalar(0.005),
                    p: None,
                    dare_terminal: false,
                    u_max: Some(500.0),
                    y_max: Some(0.165),
                    soft: true,
                    rho: None,
                    warm_start: true,
                    max_iter: None,
                }),
                run: Some(RunConfig {
                    duration: 8.0,
                    reference: SignalConfig::Steps {
                        steps: vec![[0.2, 0.1], [6.0, -0.1]],
                    },
                    disturbance: Some(SignalConfig::Steps {
                        steps: vec![[3.0, -100.0], [5.0, 0.0]],
                    }),
                    noise_snr_db: 25.0,
                    seed: 2,
                    substeps: 1,
                    x0: None,
                    offset_window: Some([4.0, 5.0]),
                    fundamental_hz: None,
                    thd_periods: 10,
                }),
            },
            Preset::Ups => ScenarioConfig {
                plant,
                experiment: Some(ExperimentConfig {
                    signal: SignalConfig::Prbs {
                        amplitude: 104.0,
                        hold: 1,
                        degree: None,
                    },
                    length: 7500,
                    snr_db: 28.0,
                    seed: 1,
                }),
                estimation: Some(EstimationConfig {
                    horizon: 15,
                    l: 3000,
                    mode: EstimationMode::IntegralDifferenced,
                    enforce_structure: false,
                    include_states: true,
                    pinv_tol: None,
                }),
                controller: Some(ControllerSection {
                    variant: VariantName(Variant::OutputDpc),
                    compare: Variant::ALL.iter().map(|v| VariantName(*v)).collect(),
                    integral: true,
                    q: Weight::Scalar(200.0),
                    r: Weight::Scalar(50.0),
                    p: None,
                    dare_terminal: false,
                    u_max: Some(260.0),
                    y_max: None,
                    soft: false,
                    rho: None,
                    warm_start: true,
                    max_iter: None,
                }),
                run: Some(RunConfig {
                    duration: 0.25,
                    reference: SignalConfig::Sinusoid {
                        amplitude: 127.0 * SQRT_2,
                        frequency: 60.0,
                        phase: 0.0,
                    },
                    disturbance: Some(SignalConfig::Multisine {
                        amplitude: 20.0,
                        count: 12,
                        f_lo: 2000.0,
                        f_hi: 12000.0,
                        scaling: Scaling::PerComponent,
                    }),
                    noise_snr_db: 36.0,
                    seed: 2,
                    substeps: 16,
                    x0: None,
                    offset_window: None,
                    fundamental_hz: Some(60.0),
                    thd_periods: 10,
                }),
            },
        }
    }
}
