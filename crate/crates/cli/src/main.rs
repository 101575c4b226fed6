use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use quasimodo::bounds::verify_bounds_experiment;
use quasimodo::config::{ConfigError, ExperimentConfig, Requirement};
use quasimodo::datagen::{load_dataset, metadata_path, save_dataset, save_metadata, DatasetMetadata, ObservableSpec};
use quasimodo::experiments::{
    dataset_paths, generate, generation_settings, l2, run_closed_loop, run_data_efficiency, train, DataEfficiencyReport,
    ExperimentError,
};
use quasimodo::manifest::RunManifest;
use quasimodo::mpc::{plot_script, tracking_metrics, Metric};
use quasimodo::surrogates::{Surrogate, SurrogateModel};

#[derive(Parser)]
#[command(name = "quasimodo", version, about = "Quantized surrogate modeling and model predictive control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the autonomous systems and write the training data.
    Generate(Common),
    /// Fit the configured surrogate and report its held-out one-step error.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training CSV; defaults to the dataset files in the output directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the closed loop on a trained surrogate.
    Mpc {
        #[command(flatten)]
        common: Common,
        /// Model JSON; defaults to model.json in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate the error bounds on the Duffing example.
    VerifyBounds(Common),
    /// Compare per-control and control-augmented reservoir models.
    DataEfficiency(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.dir` of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel trials.
    #[arg(long)]
    workers: Option<usize>,
}

enum Failure {
    Input(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Input(format!("configuration error at {e}"))
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Input(format!("{}: {e}", path.display()))
}

struct Context {
    cfg: ExperimentConfig,
    text: String,
    config_path: PathBuf,
    out: PathBuf,
    workers: Option<usize>,
}

impl Context {
    fn load(common: &Common) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(&common.config).map_err(io_failure(&common.config))?;
        let mut cfg = ExperimentConfig::from_toml_str(&text)?;
        if let Some(seed) = common.seed {
            cfg.experiment.seed = seed;
            if let Some(b) = cfg.bounds.as_mut() {
                b.seed = seed;
            }
            if let Some(d) = cfg.data_efficiency.as_mut() {
                d.seed = seed;
            }
        }
        if common.workers == Some(0) {
            return Err(ConfigError::new("--workers", "must be at least 1").into());
        }
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
        std::fs::create_dir_all(&out).map_err(io_failure(&out))?;
        Ok(Self {
            cfg,
            text,
            config_path: common.config.clone(),
            out,
            workers: common.workers,
        })
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let mut m = RunManifest::new(command, &self.cfg.experiment.name, &self.text, &self.config_path, self.cfg.experiment.seed);
        m.workers = self.workers;
        m
    }

    fn finish(&self, mut m: RunManifest, clock: Instant) -> Result<(), Failure> {
        m.wall_time = clock.elapsed().as_secs_f64();
        let path = m.write(&self.out).map_err(io_failure(&self.out))?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn cmd_generate(ctx: &Context) -> Result<(), Failure> {
    let clock = Instant::now();
    ctx.cfg.validate(Requirement::Generate)?;
    let trajs = generate(&ctx.cfg)?;
    let system = ctx.cfg.build_system()?;
    let v = ctx.cfg.build_controls()?;
    let settings = generation_settings(&ctx.cfg)?;
    let mut m = ctx.manifest("generate");
    for (k, (traj, path)) in trajs.iter().zip(dataset_paths(&ctx.out, trajs.len())).enumerate() {
        save_dataset(&path, traj).map_err(|e| Failure::Input(e.to_string()))?;
        let meta = DatasetMetadata {
            system: system.spec().cloned(),
            control_set: v.clone(),
            observable: ObservableSpec::FullState,
            settings: quasimodo::datagen::GenerationSettings {
                seed: settings.seed.wrapping_add(k as u64),
                ..settings.clone()
            },
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let meta_path = metadata_path(&path);
        save_metadata(&meta_path, &meta).map_err(|e| Failure::Input(e.to_string()))?;
        println!("{}: {} snapshot pairs", path.display(), traj.transitions());
        m.outputs.push(rel(&ctx.out, &path));
        m.outputs.push(rel(&ctx.out, &meta_path));
    }
    m.record("trajectories", trajs.len());
    m.record("snapshot_pairs", trajs.iter().map(|t| t.transitions()).sum::<usize>());
    ctx.finish(m, clock)
}

fn cmd_train(ctx: &Context, dataset: Option<&Path>) -> Result<(), Failure> {
    let clock = Instant::now();
    ctx.cfg.validate(Requirement::Train)?;
    let paths = match dataset {
        Some(p) => vec![p.to_path_buf()],
        None => dataset_paths(&ctx.out, ctx.cfg.data_section()?.trajectories),
    };
    let data = paths
        .iter()
        .map(|p| load_dataset(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let t = train(&ctx.cfg, &data)?;
    let path = ctx.out.join("model.json");
    t.model.save(&path).map_err(|e| Failure::Input(e.to_string()))?;
    println!("model: {} ({} control values, {} training pairs)", t.model.kind(), t.model.n_controls(), t.training_pairs);
    match t.holdout_error {
        Some(e) => println!("held-out one-step relative error: {e:.6e}"),
        None => println!("held-out one-step relative error: n/a (no held-out data)"),
    }
    if let Some(e) = t.pod_energy {
        println!("POD retained energy: {e:.8}");
    }
    let mut m = ctx.manifest("train");
    m.outputs.push(rel(&ctx.out, &path));
    m.record("model_kind", t.model.kind());
    m.record("n_controls", t.model.n_controls());
    if let Some(e) = t.holdout_error {
        m.record("holdout_error", e);
    }
    if let Some(e) = t.pod_energy {
        m.record("pod_energy", e);
    }
    ctx.finish(m, clock)
}

/// The tracked component if the objective weighs a single one, else the norm.
fn headline_metric(cfg: &ExperimentConfig) -> Result<Metric, Failure> {
    let q = cfg.objective_section()?.build()?;
    let active: Vec<usize> = (0..q.dim()).filter(|&i| q.q()[(i, i)] != 0.0).collect();
    Ok(match active.as_slice() {
        [c] => Metric::Component(*c),
        _ => Metric::Norm,
    })
}

fn cmd_mpc(ctx: &Context, model: Option<&Path>) -> Result<(), Failure> {
    let clock = Instant::now();
    ctx.cfg.validate(Requirement::Mpc)?;
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join("model.json"));
    let model = SurrogateModel::load(&path).map_err(|e| Failure::Input(e.to_string()))?;
    let outcome = run_closed_loop(&ctx.cfg, &model, ctx.cfg.experiment.seed)?;
    let metric = headline_metric(&ctx.cfg)?;
    let mut m = ctx.manifest("mpc");
    let mut csvs = Vec::new();
    for log in outcome.run.logs() {
        let mode = log.mode.as_str();
        let csv = ctx.out.join(format!("mpc_{mode}.csv"));
        let json = ctx.out.join(format!("mpc_{mode}.json"));
        log.write_csv(&csv).map_err(io_failure(&csv))?;
        log.write_json(&json).map_err(io_failure(&json))?;
        let tm = tracking_metrics(log, metric);
        println!(
            "{mode}: mean |e| = {:.4e}, rmse = {:.4e}, max |e| = {:.4e}, final ||y||_2 = {:.4e} ({metric:?})",
            tm.mean_abs,
            tm.mse.sqrt(),
            tm.max_abs,
            l2(&log.final_state)
        );
        m.record(&format!("{mode}_mean_abs_error"), tm.mean_abs);
        m.record(&format!("{mode}_final_norm"), l2(&log.final_state));
        m.outputs.push(rel(&ctx.out, &csv));
        m.outputs.push(rel(&ctx.out, &json));
        csvs.push((format!("mpc_{mode}.csv"), mode.to_string()));
    }
    println!("uncontrolled: final ||y||_2 = {:.4e}", l2(&outcome.uncontrolled_final));
    m.record("uncontrolled_final_norm", l2(&outcome.uncontrolled_final));
    let system = ctx.cfg.build_system()?;
    let refs: Vec<(&str, &str)> = csvs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let script = plot_script(&refs, system.state_dim().min(6), model.obs_dim().min(6), system.control_dim(), "mpc.png");
    let script_path = ctx.out.join("plot_mpc.py");
    std::fs::write(&script_path, script).map_err(io_failure(&script_path))?;
    m.outputs.push(rel(&ctx.out, &script_path));
    ctx.finish(m, clock)
}

fn cmd_verify_bounds(ctx: &Context) -> Result<(), Failure> {
    let clock = Instant::now();
    ctx.cfg.validate(Requirement::Bounds)?;
    let bcfg = ctx.cfg.bounds.as_ref().expect("validated");
    let report = verify_bounds_experiment(bcfg).map_err(|e| Failure::Runtime(e.to_string()))?;
    report.write(&ctx.out).map_err(io_failure(&ctx.out))?;
    let last = report.rows.last();
    println!(
        "steps: {}, violations: {}, final E3 = {:.4e}, final E2b = {:.4e}",
        report.rows.len(),
        report.violations.len(),
        last.map_or(0.0, |r| r.e3),
        last.map_or(0.0, |r| r.e2b)
    );
    let inf = |y: &[f64]| y.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    println!(
        "final ||y||_inf: interpolate {:.4e}, sur {:.4e}",
        inf(&report.final_state_interp),
        inf(&report.final_state_sur)
    );
    let mut m = ctx.manifest("verify-bounds");
    m.outputs.extend(["bounds_report.json", "bounds.csv", "plot_bounds.py"].map(String::from));
    m.record("violations", report.violations.len());
    m.record("final_inf_norm_interp", inf(&report.final_state_interp));
    m.record("final_inf_norm_sur", inf(&report.final_state_sur));
    ctx.finish(m, clock)?;
    report.check().map_err(|e| Failure::Runtime(e.to_string()))
}

fn cmd_data_efficiency(ctx: &Context) -> Result<(), Failure> {
    let clock = Instant::now();
    ctx.cfg.validate(Requirement::DataEfficiency)?;
    let dcfg = ctx.cfg.data_efficiency.as_ref().expect("validated");
    let report = run_data_efficiency(dcfg, ctx.workers)?;
    let csv = ctx.out.join("data_efficiency.csv");
    report.write_csv(&csv).map_err(io_failure(&csv))?;
    let json = ctx.out.join("data_efficiency.json");
    let text = report.to_json().map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(&json, text).map_err(io_failure(&json))?;
    let script = ctx.out.join("plot_data_efficiency.py");
    std::fs::write(&script, DataEfficiencyReport::plot_script("data_efficiency.csv", "data_efficiency.png"))
        .map_err(io_failure(&script))?;
    for c in &report.cells {
        println!(
            "{:<24} controls from {}  n = {:>6}  error = {:.4e} +- {:.2e}",
            c.variant.as_str(),
            c.eval.as_str().to_uppercase(),
            c.size,
            c.mean,
            c.std
        );
    }
    let mut m = ctx.manifest("data-efficiency");
    m.workers = Some(report.workers);
    m.outputs.extend(["data_efficiency.csv", "data_efficiency.json", "plot_data_efficiency.py"].map(String::from));
    m.record("trials", dcfg.trials);
    ctx.finish(m, clock)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => Context::load(c).and_then(|ctx| cmd_generate(&ctx)),
        Command::Train { common, dataset } => Context::load(common).and_then(|ctx| cmd_train(&ctx, dataset.as_deref())),
        Command::Mpc { common, model } => Context::load(common).and_then(|ctx| cmd_mpc(&ctx, model.as_deref())),
        Command::VerifyBounds(c) => Context::load(c).and_then(|ctx| cmd_verify_bounds(&ctx)),
        Command::DataEfficiency(c) => Context::load(c).and_then(|ctx| cmd_data_efficiency(&ctx)),
    };
    match result {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
