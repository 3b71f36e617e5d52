use ddpc::controller::{
    run_closed_loop, Controller, ControllerConfig, PredictorSource, Scenario, SimulationResult, Variant,
};
use ddpc::estimation::{
    build_hankels, estimate_integral_predictor, estimate_phi_orthogonal, estimate_predictor, EstimationOptions,
    IntegralMode, PredictorMatrices,
};
use ddpc::mpc::{BoxBounds, ConstraintSpec, CostWeights};
use ddpc::qp::QpStatus;
use ddpc::simsys::{prbs_channels, simulate, StateSpaceModel};
use ddpc::{Matrix, Vector};
use nalgebra::dmatrix;
use proptest::prelude::*;

const N: usize = 10;

fn motor() -> StateSpaceModel {
    StateSpaceModel::new(
        dmatrix![0.0, 1.0; 0.0, -50.0],
        dmatrix![0.0; 0.5],
        dmatrix![1.0, 0.0],
        Some(dmatrix![0.0; 0.5]),
        0.0,
    )
    .unwrap()
    .discretize_zoh(0.02)
    .unwrap()
}

/// Noiseless estimate from a PRBS experiment.
fn predictor(model: &StateSpaceModel, integral: bool) -> PredictorMatrices {
    let l = 600;
    let u = prbs_channels(1, 2 * N + l + 1, 20.0, 1, 1, None).unwrap();
    let data = simulate(model, &u, None, &Vector::zeros(2)).unwrap();
    let opts = EstimationOptions::default();
    if integral {
        estimate_integral_predictor(&data, N, l, IntegralMode::Differenced, true, &opts).unwrap()
    } else {
        let h = build_hankels(&data, N, l, true).unwrap();
        let phi = estimate_phi_orthogonal(&h, &opts).unwrap();
        estimate_predictor(&h, &opts).unwrap().with_phi(phi)
    }
}

fn controller(model: &StateSpaceModel, variant: Variant, integral: bool, u_max: Option<f64>) -> Controller {
    let weights = CostWeights::new(dmatrix![6e5], dmatrix![0.005], None, N).unwrap();
    let mut cons = ConstraintSpec::unconstrained(N, 1, 1);
    if let Some(u) = u_max {
        cons = cons.with_input_box(&BoxBounds::symmetric(u, 1));
    }
    let source = match variant {
        Variant::ModelMpc => PredictorSource::Model(model.clone()),
        _ => PredictorSource::Data(predictor(model, integral)),
    };
    Controller::new(&ControllerConfig::new(variant, integral, weights, cons, source)).unwrap()
}

fn run(variant: Variant, integral: bool, r: f64, d: f64, u_max: Option<f64>) -> SimulationResult {
    let model = motor();
    let mut c = controller(&model, variant, integral, u_max);
    let steps = 400;
    let sc = Scenario {
        steps,
        substeps: 1,
        reference: Matrix::from_element(1, steps, r),
        disturbance: (d != 0.0).then(|| Matrix::from_element(1, steps, d)),
        noise_snr_db: f64::INFINITY,
        seed: 1,
        x0: None,
    };
    run_closed_loop(&model, &mut c, &sc).unwrap().0
}

fn tail_error(res: &SimulationResult, from: f64) -> f64 {
    let k0 = res.index_at(from);
    (k0..res.len())
        .map(|k| (res.r[(0, k)] - res.y_clean[(0, k)]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn every_variant_tracks_a_constant_reference() {
    for variant in Variant::ALL {
        for integral in [false, true] {
            let res = run(variant, integral, 0.05, 0.0, None);
            let e = tail_error(&res, 5.0);
            assert!(e < 1e-4, "{variant} integral={integral}: |y - r| = {e:.2e}");
        }
    }
}

#[test]
fn integral_action_removes_constant_disturbance_offset() {
    for variant in Variant::ALL {
        let plain = tail_error(&run(variant, false, 0.05, -100.0, None), 6.0);
        let integ = tail_error(&run(variant, true, 0.05, -100.0, None), 6.0);
        assert!(integ < 1e-3, "{variant}: integral offset {integ:.2e}");
        assert!(plain > 10.0 * integ, "{variant}: plain {plain:.2e} vs integral {integ:.2e}");
    }
}

#[test]
fn identical_inputs_give_identical_results() {
    for variant in Variant::ALL {
        let a = run(variant, true, 0.1, -50.0, Some(300.0));
        let b = run(variant, true, 0.1, -50.0, Some(300.0));
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn applied_inputs_respect_the_box(r in -0.2f64..0.2, u_max in 5.0f64..200.0, d in -100.0f64..100.0, integral in any::<bool>(), v in 0usize..3) {
        let res = run(Variant::ALL[v], integral, r, d, Some(u_max));
        for k in 0..res.len() {
            if res.qp_status[k] == QpStatus::Optimal {
                prop_assert!(res.u[(0, k)].abs() <= u_max * (1.0 + 1e-9), "step {k}: u = {}", res.u[(0, k)]);
                prop_assert!(res.kkt_ok[k]);
            }
        }
    }
}
