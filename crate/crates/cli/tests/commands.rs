use std::fs;
use std::process::Command;

use ddpc::controller::Variant;
use ddpc::linalg::rel_frobenius_error;
use ddpc::mpc::build_prediction;
use ddpc_cli::commands::{self, CliError};
use ddpc_cli::config::{self, EstimationMode, ScenarioConfig, VariantName};
use ddpc_cli::presets::Preset;

fn short_motor() -> ScenarioConfig {
    let mut cfg = Preset::LinearMotor.config();
    cfg.experiment.as_mut().unwrap().length = 800;
    cfg.estimation.as_mut().unwrap().l = 300;
    cfg.run.as_mut().unwrap().duration = 1.0;
    cfg.run.as_mut().unwrap().offset_window = Some([0.5, 1.0]);
    cfg
}

#[test]
fn noiseless_collect_returns_clean_outputs() {
    let mut cfg = short_motor();
    cfg.experiment.as_mut().unwrap().snr_db = f64::INFINITY;
    let (data, clean) = commands::collect(&cfg).unwrap();
    assert_eq!(data.y, clean);
    assert_eq!(data.len(), 800);
    assert!(data.x.is_some());
}

#[test]
fn collect_is_deterministic_and_seeded() {
    let cfg = short_motor();
    let (a, _) = commands::collect(&cfg).unwrap();
    let (b, _) = commands::collect(&cfg).unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    commands::apply_seed(&mut other, 9);
    let (c, _) = commands::collect(&other).unwrap();
    assert_ne!(a.u, c.u);
}

#[test]
fn estimate_shapes_and_integral_flag() {
    let cfg = short_motor();
    let (data, _) = commands::collect(&cfg).unwrap();
    let p = commands::estimate(&cfg, &data).unwrap().predictor;
    assert_eq!(p.gamma.shape(), (10, 10));
    assert_eq!((p.p1.shape(), p.p2.shape()), ((10, 10), (10, 10)));
    assert!(!p.integral);

    let mut icfg = cfg.clone();
    icfg.estimation.as_mut().unwrap().mode = EstimationMode::IntegralDifferenced;
    let (data, _) = commands::collect(&icfg).unwrap();
    let p = commands::estimate(&icfg, &data).unwrap().predictor;
    assert!(p.integral);
    // rate state is [dx; y]
    assert_eq!(p.phi.unwrap().shape(), (10, 3));
}

#[test]
fn noiseless_estimate_recovers_model_gamma() {
    let mut cfg = short_motor();
    cfg.experiment.as_mut().unwrap().snr_db = f64::INFINITY;
    let (data, _) = commands::collect(&cfg).unwrap();
    let p = commands::estimate(&cfg, &data).unwrap().predictor;
    let model = cfg.plant().unwrap().discrete_model(1).unwrap();
    let (_, gamma) = build_prediction(&model, 10);
    assert!(rel_frobenius_error(&p.gamma, &gamma) < 1e-6);
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_motor();
    let csv = commands::cmd_collect(&cfg, dir.path()).unwrap();
    let (pred_path, rep) = commands::cmd_estimate(&cfg, &csv, dir.path()).unwrap();
    assert_eq!(rep.w_rows, 30);
    let from_disk = commands::read_predictor(&pred_path).unwrap();
    let (data, _) = commands::collect(&cfg).unwrap();
    let fresh = commands::estimate(&cfg, &data).unwrap().predictor;
    assert!((&from_disk.gamma - &fresh.gamma).amax() < 1e-9 * fresh.gamma.amax());

    let run = commands::cmd_run(&cfg, Some(&pred_path), dir.path()).unwrap();
    assert_eq!(run.result.len(), 50);
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.contains("offset=") && metrics.contains("mean_step_seconds="));
    let rows = fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert_eq!(rows.lines().count(), 51);
}

#[test]
fn zero_duration_run_is_empty() {
    let mut cfg = short_motor();
    cfg.run.as_mut().unwrap().duration = 0.0;
    cfg.run.as_mut().unwrap().offset_window = None;
    let run = commands::run_variant(&cfg, Variant::ModelMpc, None).unwrap();
    assert!(run.result.is_empty());
    assert!(run.metrics.is_none());
}

#[test]
fn comparing_a_variant_with_itself_gives_identical_rows() {
    let mut cfg = short_motor();
    cfg.controller.as_mut().unwrap().compare = vec![VariantName(Variant::OutputDpc), VariantName(Variant::OutputDpc)];
    let runs = commands::compare(&cfg, None).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0].result, runs[1].result);
    assert_eq!(runs[0].metrics, runs[1].metrics);
}

#[test]
fn compare_needs_two_variants() {
    let mut cfg = short_motor();
    cfg.controller.as_mut().unwrap().compare = vec![VariantName(Variant::ModelMpc)];
    assert!(matches!(commands::compare(&cfg, None), Err(CliError::Config(_))));
}

#[test]
fn compare_writes_one_file_per_controller() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_motor();
    cfg.controller.as_mut().unwrap().compare =
        vec![VariantName(Variant::ModelMpc), VariantName(Variant::OutputDpc), VariantName(Variant::OutputDpc)];
    let runs = commands::cmd_compare(&cfg, dir.path()).unwrap();
    assert_eq!(runs.len(), 3);
    for f in ["model-mpc.csv", "output-dpc.csv", "output-dpc-2.csv", "metrics.txt", "compare.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let table = commands::format_table(&runs);
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn runs_are_reproducible() {
    let cfg = short_motor();
    let p = commands::predictor_for(&cfg, &[Variant::StateDpc]).unwrap();
    let a = commands::run_variant(&cfg, Variant::StateDpc, p.as_ref()).unwrap();
    let b = commands::run_variant(&cfg, Variant::StateDpc, p.as_ref()).unwrap();
    assert_eq!(a.result, b.result);
}

#[test]
fn data_variant_without_predictor_is_an_error() {
    let cfg = short_motor();
    assert!(commands::run_variant(&cfg, Variant::OutputDpc, None).is_err());
}

#[test]
fn dare_terminal_rejects_output_dpc() {
    let mut cfg = short_motor();
    cfg.controller.as_mut().unwrap().dare_terminal = true;
    let (data, _) = commands::collect(&cfg).unwrap();
    let p = commands::estimate(&cfg, &data).unwrap().predictor;
    let e = commands::controller_config(&cfg, Variant::OutputDpc, Some(&p)).unwrap_err();
    assert!(e.to_string().contains("dare_terminal"), "{e}");
}

#[test]
fn short_experiment_gives_actionable_error() {
    let mut cfg = short_motor();
    cfg.experiment.as_mut().unwrap().length = 100;
    let (data, _) = commands::collect(&cfg).unwrap();
    let e = commands::estimate(&cfg, &data).unwrap_err();
    assert!(matches!(e, CliError::Estimation(_)), "{e}");
}

fn ddpc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ddpc")).args(args).output().unwrap()
}

#[test]
fn binary_collect_estimate_run() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    fs::write(&scenario, config::to_text(&short_motor())).unwrap();
    let out = dir.path().join("out");
    let (s, o) = (scenario.to_str().unwrap(), out.to_str().unwrap());

    let r = ddpc(&["collect", "--config", s, "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let r = ddpc(&["estimate", "--config", s, "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("sigma_min"));
    let pred = out.join("predictor.txt");
    let r = ddpc(&["run", "--config", s, "--out", o, "--predictor", pred.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("output-dpc"));
    assert!(out.join("run.csv").exists());
}

#[test]
fn binary_config_errors_exit_2_with_section_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("bad.toml");
    fs::write(&scenario, "[plant]\npreset = \"ups\"\n[run]\nduration = -1.0\nnoise_snr_db = 30\nseed = 1\nreference = { kind = \"zero\" }\n").unwrap();
    let r = ddpc(&["run", "--config", scenario.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("[run]") && msg.contains("duration"), "{msg}");

    let r = ddpc(&["run"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn binary_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let r = ddpc(&[
        "estimate",
        "--preset",
        "linear-motor",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.csv"));
}
