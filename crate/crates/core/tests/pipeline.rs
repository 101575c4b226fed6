use std::path::PathBuf;

use nalgebra::DMatrix;

use quasimodo::config::{ExperimentConfig, Requirement};
use quasimodo::datagen::{load_dataset, partition_by_control, save_dataset, LabeledTrajectory};
use quasimodo::experiments::{generate, run_closed_loop, run_pipeline, train};
use quasimodo::mpc::MpcLog;
use quasimodo::surrogates::pod_fit;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).unwrap()
}

/// Lorenz affine with a short training run and closed loop.
fn short_lorenz() -> ExperimentConfig {
    let mut cfg = config("lorenz_affine.toml");
    cfg.data.as_mut().unwrap().t_train = 20.0;
    cfg.mpc.as_mut().unwrap().t_end = 1.0;
    cfg
}

#[test]
fn shipped_configs_validate_and_round_trip() {
    let cases = [
        ("lorenz_affine.toml", Requirement::Mpc),
        ("lorenz_cos.toml", Requirement::Mpc),
        ("mackey_glass.toml", Requirement::Mpc),
        ("burgers.toml", Requirement::Mpc),
        ("duffing_bounds.toml", Requirement::Bounds),
        ("data_efficiency_affine.toml", Requirement::DataEfficiency),
        ("data_efficiency_cos.toml", Requirement::DataEfficiency),
    ];
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".toml") {
            assert!(cases.iter().any(|(c, _)| *c == name), "{name} has no validation case");
            seen += 1;
        }
    }
    assert_eq!(seen, cases.len());
    for (name, req) in cases {
        let cfg = config(name);
        cfg.validate(req).unwrap_or_else(|e| panic!("{name}: {e}"));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg, "{name}");
    }
}

#[test]
fn saved_dataset_partitions_like_the_generated_one() {
    let cfg = short_lorenz();
    let data = generate(&cfg).unwrap();
    let again = generate(&cfg).unwrap();
    assert_eq!(data, again);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.csv");
    save_dataset(&path, &data[0]).unwrap();
    let loaded = load_dataset(&path).unwrap();
    let m = cfg.build_controls().unwrap().len();
    let refs = |d: &LabeledTrajectory| partition_by_control(&[d], m);
    assert_eq!(refs(&data[0]), refs(&loaded));
}

fn assert_admissible(log: &MpcLog, cfg: &ExperimentConfig) {
    let v = cfg.build_controls().unwrap();
    for step in &log.steps {
        assert!(v.parent().contains(&step.control, 1e-9), "control {:?} at t={}", step.control, step.time);
        assert!(step.sur_indices.iter().all(|&j| j < v.len()));
    }
}

#[test]
fn closed_loop_is_admissible_deterministic_and_shares_the_first_solve() {
    let cfg = short_lorenz();
    let (trained, first) = run_pipeline(&cfg).unwrap();
    let second = run_closed_loop(&cfg, &trained.model, cfg.experiment.seed).unwrap();
    let (interp, sur) = (first.run.interpolate.as_ref().unwrap(), first.run.sur.as_ref().unwrap());
    assert_admissible(interp, &cfg);
    assert_admissible(sur, &cfg);
    assert!(sur.steps.iter().all(|s| !s.sur_indices.is_empty()));
    assert_eq!(interp.steps[0].plan, sur.steps[0].plan);

    let strip = |log: &MpcLog| {
        let mut log = log.clone();
        log.steps.iter_mut().for_each(|s| s.wall_time = 0.0);
        log
    };
    for (a, b) in first.run.logs().zip(second.run.logs()) {
        assert_eq!(strip(a), strip(b));
    }
}

#[test]
fn trained_model_survives_persistence() {
    let cfg = short_lorenz();
    let data = generate(&cfg).unwrap();
    let trained = train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    trained.model.save(&path).unwrap();
    let loaded = quasimodo::surrogates::SurrogateModel::load(&path).unwrap();
    let a = run_closed_loop(&cfg, &trained.model, 3).unwrap();
    let b = run_closed_loop(&cfg, &loaded, 3).unwrap();
    let finals = |o: &quasimodo::experiments::ClosedLoopOutcome| {
        o.run.logs().map(|l| l.final_state.clone()).collect::<Vec<_>>()
    };
    assert_eq!(finals(&a), finals(&b));
}

#[test]
fn pod_residual_shrinks_with_rank() {
    let snapshots = DMatrix::from_fn(30, 40, |i, c| {
        let x = i as f64 / 29.0;
        (1..=6).map(|k| (k as f64 * std::f64::consts::PI * x).sin() * (0.3 * c as f64 / k as f64).cos() / k as f64).sum()
    });
    let mut last = f64::INFINITY;
    for ell in 1..=10 {
        let basis = pod_fit(&snapshots, ell).unwrap();
        let gram = basis.basis.tr_mul(&basis.basis);
        assert!((gram - DMatrix::identity(ell, ell)).amax() < 1e-10);
        let r = basis.projection_residual(&snapshots);
        assert!(r <= last + 1e-12, "ell={ell}: {r} > {last}");
        last = r;
    }
    assert!(last < 1e-8);
}
