use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quasimodo::manifest::{sha256_hex, RunManifest};
use quasimodo::surrogates::{Surrogate, SurrogateModel};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasimodo")).args(args).output().unwrap()
}

fn text(out: &Output) -> (String, String) {
    (String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Copies a shipped config into `dir`, applying `edit` to its text.
fn config_copy(dir: &Path, name: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let body = std::fs::read_to_string(configs_dir().join(name)).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, edit(body)).unwrap();
    path
}

fn manifest(dir: &Path, command: &str) -> RunManifest {
    let path = dir.join(format!("manifest_{command}.json"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn lorenz_generate_writes_2000_labelled_rows_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("lorenz_affine.toml");
    let out = run(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{:?}", text(&out));
    let mut reader = csv::Reader::from_path(dir.path().join("dataset.csv")).unwrap();
    let j = reader.headers().unwrap().iter().position(|h| h == "j").unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.iter().filter(|r| !r[j].is_empty()).count(), 2000);
    assert_eq!(rows.len(), 2001);
    assert!(dir.path().join("dataset.json").exists());

    let m = manifest(dir.path(), "generate");
    assert_eq!(m.config_sha256, sha256_hex(std::fs::read_to_string(&cfg).unwrap().as_bytes()));
    assert_eq!(m.seed, 1);
    assert!(m.outputs.iter().all(|o| dir.path().join(o).exists()));
}

#[test]
fn same_seed_gives_identical_dataset() {
    let cfg = configs_dir().join("lorenz_cos.toml");
    let hash = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&["generate", "--config", s(&cfg), "--out", s(dir.path()), "--seed", seed]);
        assert!(out.status.success(), "{:?}", text(&out));
        sha256_hex(&std::fs::read(dir.path().join("dataset.csv")).unwrap())
    };
    assert_eq!(hash("5"), hash("5"));
    assert_ne!(hash("5"), hash("6"));
}

#[test]
fn zero_training_time_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_copy(dir.path(), "lorenz_affine.toml", |b| b.replace("t_train = 100.0", "t_train = 0.0"));
    let out = run(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let (_, err) = text(&out);
    assert!(err.contains("data.t_train"), "{err}");
}

#[test]
fn malformed_config_and_bad_workers_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment]\nname = \"x\"\nseed = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(run(&["generate", "--config", s(&bad)]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(run(&["generate", "--config", s(&missing)]).status.code(), Some(2));
    let cfg = configs_dir().join("data_efficiency_affine.toml");
    let out = run(&["data-efficiency", "--config", s(&cfg), "--out", s(dir.path()), "--workers", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("lorenz_affine.toml");
    let out = run(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let other = dir.path().join("absent.csv");
    let out = run(&["train", "--config", s(&cfg), "--out", s(dir.path()), "--dataset", s(&other)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).1.contains("absent.csv"));
}

/// Rotations about the first and third axis, one per control value.
fn rotation(j: usize, z: [f64; 3]) -> [f64; 3] {
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    match j {
        0 => [z[0], c * z[1] - s * z[2], s * z[1] + c * z[2]],
        _ => [c * z[0] - s * z[1], s * z[0] + c * z[1], z[2]],
    }
}

#[test]
fn edmd_on_linear_fixture_reports_tiny_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("t,z_1,z_2,z_3,j,u_1\n");
    let mut z = [1.0, -0.5, 0.25];
    let mut state = 7u64;
    for i in 0..400 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let j = (state >> 63) as usize;
        let u = if j == 0 { -50.0 } else { 50.0 };
        csv.push_str(&format!("{},{:e},{:e},{:e},{},{u}\n", i as f64 * 0.05, z[0], z[1], z[2], j + 1));
        z = rotation(j, z);
    }
    csv.push_str(&format!("{},{:e},{:e},{:e},,\n", 400.0 * 0.05, z[0], z[1], z[2]));
    let data = dir.path().join("linear.csv");
    std::fs::write(&data, csv).unwrap();
    let cfg = config_copy(dir.path(), "lorenz_affine.toml", |b| b.replace("max_degree = 3", "max_degree = 1"));
    let out = run(&["train", "--config", s(&cfg), "--out", s(dir.path()), "--dataset", s(&data)]);
    let (stdout, stderr) = text(&out);
    assert!(out.status.success(), "{stderr}");
    let line = stdout.lines().find(|l| l.starts_with("held-out one-step relative error:")).unwrap();
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-8, "{line}");
    assert!(dir.path().join("model.json").exists());
    assert_eq!(manifest(dir.path(), "train").summary["model_kind"], "edmd");
}

#[test]
fn mackey_glass_model_has_three_readouts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("mackey_glass.toml");
    for cmd in ["generate", "train"] {
        let out = run(&[cmd, "--config", s(&cfg), "--out", s(dir.path())]);
        assert!(out.status.success(), "{cmd}: {:?}", text(&out));
    }
    let model = SurrogateModel::load(&dir.path().join("model.json")).unwrap();
    assert_eq!(model.kind(), "esn");
    assert_eq!(model.n_controls(), 3);
}

fn without_wall_time(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let skip = r.headers().unwrap().iter().position(|h| h == "wall_time").unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, v)| v.to_string()).collect())
        .collect()
}

#[test]
fn lorenz_mpc_writes_logs_plot_script_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_copy(dir.path(), "lorenz_affine.toml", |b| {
        b.replace("t_train = 100.0", "t_train = 20.0").replace("t_end = 20.0", "t_end = 2.0")
    });
    for cmd in ["generate", "train", "mpc"] {
        let out = run(&[cmd, "--config", s(&cfg), "--out", s(dir.path())]);
        assert!(out.status.success(), "{cmd}: {:?}", text(&out));
    }
    for f in ["mpc_interpolate.csv", "mpc_sur.csv", "mpc_interpolate.json", "mpc_sur.json", "plot_mpc.py"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rows = csv::Reader::from_path(dir.path().join("mpc_sur.csv")).unwrap().records().count();
    assert_eq!(rows, 40);
    let m = manifest(dir.path(), "mpc");
    assert!(m.summary.contains_key("sur_mean_abs_error"));
    assert!(m.summary.contains_key("uncontrolled_final_norm"));

    let model = dir.path().join("model.json");
    let other = tempfile::tempdir().unwrap();
    let out = run(&["mpc", "--config", s(&cfg), "--out", s(other.path()), "--model", s(&model)]);
    assert!(out.status.success());
    assert_eq!(without_wall_time(&dir.path().join("mpc_sur.csv")), without_wall_time(&other.path().join("mpc_sur.csv")));
}

#[test]
fn verify_bounds_reports_no_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("duffing_bounds.toml");
    let out = run(&["verify-bounds", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{:?}", text(&out));
    assert!(dir.path().join("bounds.csv").exists());
    assert!(dir.path().join("bounds_report.json").exists());
    assert_eq!(manifest(dir.path(), "verify_bounds").summary["violations"], 0);
}

#[test]
fn data_efficiency_small_run_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_copy(dir.path(), "data_efficiency_affine.toml", |b| {
        b.replace("trials = 20", "trials = 2")
            .replace("sizes = [100, 250, 500, 1000, 2500, 5000, 10000, 15000]", "sizes = [500, 15000]")
            .replace("eval_runs = 20", "eval_runs = 3")
    });
    let out = run(&["data-efficiency", "--config", s(&cfg), "--out", s(dir.path()), "--workers", "2"]);
    assert!(out.status.success(), "{:?}", text(&out));
    let rows = csv::Reader::from_path(dir.path().join("data_efficiency.csv")).unwrap().records().count();
    assert_eq!(rows, 2 * 2 * 2);
    assert!(dir.path().join("plot_data_efficiency.py").exists());
    assert_eq!(manifest(dir.path(), "data_efficiency").workers, Some(2));
}
