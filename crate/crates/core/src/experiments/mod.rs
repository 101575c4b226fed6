//! End-to-end drivers behind the command-line front end: data generation,
//! surrogate training and the closed loop, each driven by an
//! [`ExperimentConfig`](crate::config::ExperimentConfig).

mod data_efficiency;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, ModelKind, Requirement};
use crate::datagen::{
    generate_training_data, partition_by_control, DatagenError, GenerationSettings, LabeledTrajectory, ObservableSpec,
};
use crate::dynamics::{Burgers1d, DynamicsError, Plant};
use crate::mpc::{run_mpc, MpcError, MpcRun, MpcSetup};
use crate::quantization::QuantizedControlSet;
use crate::surrogates::{
    edmd_fit, esn_fit_many, esn_init, one_step_error, pod_fit, PerturbedModel, PodModel, Surrogate, SurrogateError,
    SurrogateModel,
};

pub use data_efficiency::{
    run_data_efficiency, DataEfficiencyConfig, DataEfficiencyReport, EfficiencyCell, EvalControls, ModelVariant,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error at {0}")]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Bounds(#[from] crate::bounds::BoundsError),
}

impl ExperimentError {
    /// Whether the failure lies in the inputs (configuration, files) rather
    /// than in the computation.
    pub fn is_input_error(&self) -> bool {
        match self {
            Self::Config(_) | Self::Io { .. } => true,
            Self::Data(e) => matches!(e, DatagenError::Io { .. } | DatagenError::SchemaMismatch { .. }),
            Self::Surrogate(e) => matches!(e, SurrogateError::Persistence { .. }),
            _ => false,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Burgers model from a `[system.params]` table, for its grid and step
/// initial condition.
pub fn burgers_model(params: &BTreeMap<String, f64>) -> Result<Burgers1d, ConfigError> {
    let get = |k: &str, d: f64| params.get(k).copied().unwrap_or(d);
    let nx = get("nx", 100.0);
    if !(nx >= 1.0 && nx.fract() == 0.0) {
        return Err(ConfigError::new("system.params.nx", "must be a positive integer"));
    }
    Ok(Burgers1d::new(get("re", 100.0), get("length", 1.0), nx as usize))
}

/// File names used for `n` training trajectories inside an output directory.
pub fn dataset_paths(dir: &Path, n: usize) -> Vec<PathBuf> {
    if n == 1 {
        vec![dir.join("dataset.csv")]
    } else {
        (1..=n).map(|k| dir.join(format!("dataset_{k:03}.csv"))).collect()
    }
}

/// Simulates the configured training trajectories; trajectory `k` uses seed
/// `experiment.seed + k`.
pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<LabeledTrajectory>> {
    cfg.validate(Requirement::Generate)?;
    let system = cfg.build_system()?;
    let v = cfg.build_controls()?;
    let d = cfg.data_section()?;
    let settings = generation_settings(cfg)?;
    (0..d.trajectories as u64)
        .map(|k| {
            let s = GenerationSettings {
                seed: settings.seed.wrapping_add(k),
                ..settings.clone()
            };
            Ok(generate_training_data(&system, &v, &s)?)
        })
        .collect()
}

/// Settings of the first training trajectory.
pub fn generation_settings(cfg: &ExperimentConfig) -> Result<GenerationSettings> {
    Ok(GenerationSettings {
        dt_model: cfg.model_section()?.dt,
        t_train: cfg.data_section()?.t_train,
        substeps: cfg.training_substeps()?,
        y0: cfg.training_state()?,
        seed: cfg.experiment.seed,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SurrogateModel,
    /// Observable the model works in (the POD projection for POD models).
    pub observable: ObservableSpec,
    /// Relative one-step error on the held-out tail of the data.
    pub holdout_error: Option<f64>,
    /// Retained snapshot energy of a POD basis.
    pub pod_energy: Option<f64>,
    pub training_pairs: usize,
    pub wall_time: f64,
}

/// Fits the configured surrogate on the leading part of each trajectory and
/// scores it on the held-out tail.
pub fn train(cfg: &ExperimentConfig, data: &[LabeledTrajectory]) -> Result<TrainOutcome> {
    cfg.validate(Requirement::Train)?;
    let clock = Instant::now();
    let system = cfg.build_system()?;
    let v = cfg.build_controls()?;
    let d = cfg.data_section()?;
    let ms = cfg.model_section()?;
    let m = v.len();
    if data.is_empty() {
        return Err(ConfigError::new("data", "no training trajectories").into());
    }
    for (k, t) in data.iter().enumerate() {
        t.validate()?;
        if t.obs_dim != system.state_dim() {
            return Err(ConfigError::new(
                "data",
                format!("trajectory {} has state dimension {}, system has {}", k + 1, t.obs_dim, system.state_dim()),
            )
            .into());
        }
    }
    let (fit, held): (Vec<_>, Vec<_>) = data.iter().map(|t| t.split_holdout(d.holdout)).unzip();

    let (model, observable, washout, pod_energy) = match ms.kind {
        ModelKind::Pod => {
            let p = ms.pod.as_ref().expect("validated");
            let cols: Vec<_> = fit.iter().flat_map(|t| t.observables.iter()).collect();
            let snapshots = DMatrix::from_columns(&cols.iter().map(|c| (*c).clone()).collect::<Vec<_>>());
            let basis = pod_fit(&snapshots, p.ell)?;
            let energy = basis.energy();
            let model = PodModel::new(basis.basis.clone(), system.clone(), &v, ms.dt, p.substeps)?;
            let obs = ObservableSpec::Projection { basis: basis.basis };
            (SurrogateModel::Pod(model), obs, 0, Some(energy))
        }
        ModelKind::Perturbed => {
            let p = ms.perturbed.as_ref().expect("validated");
            let model = PerturbedModel::new(system.clone(), p.offset.clone(), &v, ms.dt, p.substeps)?;
            (SurrogateModel::Perturbed(model), ObservableSpec::FullState, 0, None)
        }
        kind => {
            let obs = ms.observable.clone().unwrap_or(ObservableSpec::FullState);
            let mapped = fit.iter().map(|t| t.map_observable(&obs)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&LabeledTrajectory> = mapped.iter().collect();
            match kind {
                ModelKind::Edmd => {
                    let pairs = partition_by_control(&refs, m);
                    let model = edmd_fit(&pairs, ms.edmd.as_ref().expect("validated"), ms.dt)?;
                    (SurrogateModel::Edmd(model), obs, 0, None)
                }
                _ => {
                    let e = ms.esn.as_ref().expect("validated");
                    let q = obs.output_dim(system.state_dim());
                    let reservoir = esn_init(&e.reservoir, q)?;
                    let model = esn_fit_many(&refs, &reservoir, m, e.washout, e.ridge, ms.dt)?;
                    (SurrogateModel::Esn(model), obs, e.washout, None)
                }
            }
        }
    };

    let training_pairs = fit.iter().map(LabeledTrajectory::transitions).sum();
    let mut num = 0.0;
    let mut count = 0usize;
    for t in held.iter().filter(|t| t.transitions() > washout) {
        let z = t.map_observable(&observable)?;
        if z.transitions() <= washout {
            continue;
        }
        let e = one_step_error(&model, &z, washout)?;
        num += e * e * (z.transitions() - washout) as f64;
        count += z.transitions() - washout;
    }
    let holdout_error = (count > 0).then(|| (num / count as f64).sqrt());
    Ok(TrainOutcome {
        model,
        observable,
        holdout_error,
        pod_energy,
        training_pairs,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}

/// Observable the closed loop measures for `model`.
pub fn model_observable(cfg: &ExperimentConfig, model: &SurrogateModel) -> Result<ObservableSpec> {
    Ok(match model {
        SurrogateModel::Pod(p) => ObservableSpec::Projection {
            basis: p.basis().clone(),
        },
        _ => cfg.model_section()?.observable.clone().unwrap_or(ObservableSpec::FullState),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopOutcome {
    pub run: MpcRun,
    /// Plant state at `T_MPC` under the admissible control closest to zero.
    pub uncontrolled_final: Vec<f64>,
    pub wall_time: f64,
}

/// The admissible control closest to zero.
pub fn rest_control(v: &QuantizedControlSet) -> Vec<f64> {
    let u = v.parent();
    u.lower.iter().zip(&u.upper).map(|(&lo, &hi)| 0.0f64.clamp(lo, hi)).collect()
}

/// Runs the configured closed loop(s) on `model`, plus an uncontrolled
/// reference simulation over the same interval.
pub fn run_closed_loop(cfg: &ExperimentConfig, model: &SurrogateModel, seed: u64) -> Result<ClosedLoopOutcome> {
    cfg.validate(Requirement::Mpc)?;
    let clock = Instant::now();
    let system = cfg.build_system()?;
    let v = cfg.build_controls()?;
    let y0 = cfg.initial_state()?;
    let objective = cfg.objective_section()?.build()?;
    let mpc = cfg.mpc_section()?;
    let observable = model_observable(cfg, model)?;
    if model.n_controls() != v.len() {
        return Err(ConfigError::new(
            "model",
            format!("model has {} control values, quantization gives {}", model.n_controls(), v.len()),
        )
        .into());
    }
    let setup = MpcSetup {
        plant: &system,
        model,
        observable: &observable,
        controls: &v,
        objective: &objective,
        y0: &y0,
        history: None,
    };
    let run = run_mpc(&setup, mpc, seed)?;

    let mut plant = Plant::new(system.clone(), 0.0, &y0)?;
    let u0 = rest_control(&v);
    let n_fine = mpc.fine_per_coarse()?;
    for _ in 0..mpc.coarse_steps() * n_fine {
        plant.advance(&u0, mpc.fine_step(), mpc.plant_substeps)?;
    }
    Ok(ClosedLoopOutcome {
        run,
        uncontrolled_final: plant.state().to_vec(),
        wall_time: clock.elapsed().as_secs_f64(),
    })
}

/// Generation, training and closed loop in one go, without touching disk.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(TrainOutcome, ClosedLoopOutcome)> {
    cfg.validate(Requirement::Mpc)?;
    let data = generate(cfg)?;
    let trained = train(cfg, &data)?;
    let cl = run_closed_loop(cfg, &trained.model, cfg.experiment.seed)?;
    Ok((trained, cl))
}

/// Euclidean norm.
pub fn l2(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    const SCALAR: &str = r#"
[experiment]
name = "scalar-duffing"
seed = 1

[system]
name = "duffing"
y0 = [0.5, 0.0]

[quantization]
lower = [-2.0]
upper = [2.0]
rule = "vertices"

[data]
dt = 0.01
t_train = 20.0

[model]
kind = "edmd"
dt = 0.05
edmd = { max_degree = 3 }

[mpc]
horizon = 3
dt = 0.05
t_end = 2.0
mode = "both"
plant_substeps = 5

[objective]
weights = [1.0, 0.1]
reference = { kind = "constant", value = [0.0, 0.0] }
"#;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(SCALAR).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let a = generate(&cfg()).unwrap();
        let b = generate(&cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].transitions(), 400);
    }

    #[test]
    fn duffing_edmd_pipeline_stabilizes() {
        let (trained, cl) = run_pipeline(&cfg()).unwrap();
        assert!(trained.holdout_error.unwrap() < 0.05, "{:?}", trained.holdout_error);
        for log in cl.run.logs() {
            assert!(l2(&log.final_state) < 0.5 * l2(&[0.5, 0.0]), "{:?}", log.final_state);
        }
    }

    #[test]
    fn perturbed_model_needs_no_fit() {
        let mut c = cfg();
        let m = c.model.as_mut().unwrap();
        m.kind = ModelKind::Perturbed;
        m.perturbed = Some(crate::config::PerturbedSection {
            offset: vec![0.0, 0.0],
            substeps: 5,
        });
        let data = generate(&c).unwrap();
        let t = train(&c, &data).unwrap();
        // exact model up to the RK4 discretization
        assert!(t.holdout_error.unwrap() < 1e-6);
    }

    #[test]
    fn dataset_names() {
        let d = Path::new("o");
        assert_eq!(dataset_paths(d, 1), vec![d.join("dataset.csv")]);
        assert_eq!(dataset_paths(d, 2)[1], d.join("dataset_002.csv"));
    }
}
