//! How much data the per-control reservoir ensemble needs compared with a
//! single reservoir that takes the control as an extra input.
//!
//! Each trial draws a fresh reservoir, one training trajectory driven by
//! random values from `V` (for the ensemble) and one driven by random values
//! from `U` (for the augmented model), both of the same length. Models are
//! trained on growing prefixes and scored by their relative L2 prediction
//! error over a fixed horizon, from random initial states on the attractor,
//! under random control sequences drawn from `U` and from `V`.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::config::ConfigError;
use crate::datagen::{step_count, LabeledTrajectory};
use crate::dynamics::{builtin_system, Plant, SystemModel};
use crate::surrogates::{
    esn_fit, esn_fit_augmented, esn_init, multi_step_predict, AugmentedEsnModel, EsnModel, ReservoirSpec, Schedule,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataEfficiencyConfig {
    /// `lorenz_affine` or `lorenz_cos`.
    pub system: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub u_lower: f64,
    pub u_upper: f64,
    /// Control values of the ensemble.
    pub v: Vec<f64>,
    /// A second value set whose hull misses part of `U`; adds the
    /// `per_control_off_bounds` variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off_bounds_v: Option<Vec<f64>>,
    /// Sampling interval; the control is held over each interval.
    pub dt: f64,
    /// RK4 steps per sampling interval.
    pub substeps: usize,
    /// Length of each training trajectory.
    pub t_data: f64,
    /// Numbers of training transitions to compare.
    pub sizes: Vec<usize>,
    pub trials: usize,
    /// Prediction horizon of the evaluation.
    pub horizon: f64,
    /// Evaluation runs per trial and control set.
    pub eval_runs: usize,
    /// Observed steps replayed into the reservoir before each prediction.
    pub sync_steps: usize,
    /// Time simulated from a random state before any data is recorded.
    pub spin_up: f64,
    /// Reservoir of trial `k` uses `seed + k`.
    pub reservoir: ReservoirSpec,
    pub ridge: f64,
    pub washout: usize,
    /// Scale of the augmented model's input weights.
    pub input_scale: f64,
    pub seed: u64,
}

impl DataEfficiencyConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |path: &str, reason: &str| Err(ConfigError::new(format!("data_efficiency.{path}"), reason));
        if !matches!(self.system.as_str(), "lorenz_affine" | "lorenz_cos") {
            return bad("system", "must be lorenz_affine or lorenz_cos");
        }
        builtin_system(&self.system, &self.params).map_err(|e| ConfigError::new("data_efficiency.params", e))?;
        if !(self.u_lower < self.u_upper) {
            return bad("u_lower", "must be below u_upper");
        }
        let check_v = |path: &str, v: &[f64]| {
            if v.len() < 2 {
                return bad(path, "needs at least two values");
            }
            if v.iter().any(|&x| x < self.u_lower || x > self.u_upper) {
                return bad(path, "values must lie in [u_lower, u_upper]");
            }
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            if s.windows(2).any(|w| w[0] == w[1]) {
                return bad(path, "values must be distinct");
            }
            Ok(())
        };
        check_v("v", &self.v)?;
        if let Some(v) = &self.off_bounds_v {
            check_v("off_bounds_v", v)?;
        }
        let n = step_count(self.t_data, self.dt).map_err(|e| ConfigError::new("data_efficiency.t_data", e))?;
        step_count(self.horizon, self.dt).map_err(|e| ConfigError::new("data_efficiency.horizon", e))?;
        if self.substeps == 0 {
            return bad("substeps", "must be positive");
        }
        if self.sizes.is_empty() {
            return bad("sizes", "must not be empty");
        }
        if let Some(&s) = self.sizes.iter().find(|&&s| s == 0 || s > n) {
            return Err(ConfigError::new(
                "data_efficiency.sizes",
                format!("size {s} not in 1..={n} (t_data / dt)"),
            ));
        }
        if self.trials == 0 || self.eval_runs == 0 {
            return bad("trials", "trials and eval_runs must be positive");
        }
        if self.sync_steps == 0 {
            return bad("sync_steps", "must be positive");
        }
        if !(self.ridge > 0.0) {
            return bad("ridge", "must be positive");
        }
        if self.reservoir.size == 0 {
            return bad("reservoir.size", "must be positive");
        }
        Ok(())
    }

    fn horizon_steps(&self) -> usize {
        step_count(self.horizon, self.dt).expect("validated")
    }

    fn data_steps(&self) -> usize {
        step_count(self.t_data, self.dt).expect("validated")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    PerControl,
    Augmented,
    PerControlOffBounds,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerControl => "per_control",
            Self::Augmented => "augmented",
            Self::PerControlOffBounds => "per_control_off_bounds",
        }
    }
}

/// Where the evaluation controls come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalControls {
    /// Uniform on the interval `U`.
    U,
    /// Uniform over the ensemble's own value set.
    V,
}

impl EvalControls {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::U => "u",
            Self::V => "v",
        }
    }
}

/// Mean and standard deviation over trials of the per-trial mean error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCell {
    pub variant: ModelVariant,
    pub eval: EvalControls,
    pub size: usize,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataEfficiencyReport {
    pub config: DataEfficiencyConfig,
    pub cells: Vec<EfficiencyCell>,
    pub workers: usize,
    pub wall_time: f64,
}

impl DataEfficiencyReport {
    pub fn cell(&self, variant: ModelVariant, eval: EvalControls, size: usize) -> Option<&EfficiencyCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.eval == eval && c.size == size)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "eval_controls", "size", "mean", "std", "trials"])?;
        for c in &self.cells {
            w.write_record([
                c.variant.as_str().to_string(),
                c.eval.as_str().to_string(),
                c.size.to_string(),
                format!("{:.16e}", c.mean),
                format!("{:.16e}", c.std),
                c.trials.to_string(),
            ])?;
        }
        w.flush()
    }

    /// Matplotlib script plotting mean error against data size, reading the
    /// CSV written by [`write_csv`](Self::write_csv).
    pub fn plot_script(csv_name: &str, out_png: &str) -> String {
        format!(
            r#"import csv
from collections import defaultdict
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

series = defaultdict(list)
with open({csv_name:?}) as f:
    for r in csv.DictReader(f):
        series[(r["variant"], r["eval_controls"])].append((int(r["size"]), float(r["mean"]), float(r["std"])))

fig, ax = plt.subplots(figsize=(7, 5))
for (variant, ev), pts in sorted(series.items()):
    pts.sort()
    n, m, s = zip(*pts)
    ax.errorbar(n, m, yerr=s, capsize=3, label=f"{{variant}}, controls from {{ev.upper()}}")
ax.set_xscale("log")
ax.set_yscale("log")
ax.set_xlabel("training data points")
ax.set_ylabel("relative L2 prediction error")
ax.legend()
fig.tight_layout()
fig.savefig({out_png:?}, dpi=150)
"#
        )
    }
}

/// Recorded reference run: reservoir sync window, then the horizon.
struct EvalCase {
    /// Observed states `z_{-s}, ..., z_0`.
    history: Vec<DVector<f64>>,
    /// Controls applied between the history states.
    history_u: Vec<DVector<f64>>,
    controls: Vec<f64>,
    truth: Vec<DVector<f64>>,
}

/// Holds the control over each sampling interval and records states.
fn simulate(system: &SystemModel, plant: &mut Plant, controls: &[f64], dt: f64, substeps: usize) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(controls.len());
    for &u in controls {
        plant.advance(&[u], dt, substeps)?;
        out.push(DVector::from_column_slice(plant.state()));
    }
    debug_assert_eq!(system.state_dim(), plant.state().len());
    Ok(out)
}

fn random_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.random_range(-15.0..15.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(5.0..40.0),
    ]
}

/// Starts at a random state and integrates `spin_up` under random controls
/// from `U` so the recorded data starts near the attractor.
fn spun_up_plant(system: &SystemModel, cfg: &DataEfficiencyConfig, rng: &mut ChaCha8Rng) -> Result<Plant> {
    let mut plant = Plant::new(system.clone(), 0.0, &random_state(rng))?;
    let n = (cfg.spin_up / cfg.dt).round() as usize;
    let us: Vec<f64> = (0..n).map(|_| rng.random_range(cfg.u_lower..=cfg.u_upper)).collect();
    simulate(system, &mut plant, &us, cfg.dt, cfg.substeps)?;
    Ok(plant)
}

fn record(
    system: &SystemModel,
    cfg: &DataEfficiencyConfig,
    controls: &[f64],
    labels: Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledTrajectory> {
    let mut plant = spun_up_plant(system, cfg, rng)?;
    let start = DVector::from_column_slice(plant.state());
    let states = simulate(system, &mut plant, controls, cfg.dt, cfg.substeps)?;
    let n = controls.len();
    Ok(LabeledTrajectory {
        obs_dim: 3,
        control_dim: 1,
        times: (0..=n).map(|i| i as f64 * cfg.dt).collect(),
        observables: std::iter::once(start).chain(states).collect(),
        control_indices: labels,
        controls: controls.iter().map(|&u| DVector::from_element(1, u)).collect(),
    })
}

/// Training trajectory with values drawn uniformly from `v`, labeled by index.
fn v_data(system: &SystemModel, cfg: &DataEfficiencyConfig, v: &[f64], rng: &mut ChaCha8Rng) -> Result<LabeledTrajectory> {
    let labels: Vec<usize> = (0..cfg.data_steps()).map(|_| rng.random_range(0..v.len())).collect();
    let controls: Vec<f64> = labels.iter().map(|&j| v[j]).collect();
    record(system, cfg, &controls, labels, rng)
}

/// Training trajectory with values drawn uniformly from `[u_lower, u_upper]`.
fn u_data(system: &SystemModel, cfg: &DataEfficiencyConfig, rng: &mut ChaCha8Rng) -> Result<LabeledTrajectory> {
    let n = cfg.data_steps();
    let controls: Vec<f64> = (0..n).map(|_| rng.random_range(cfg.u_lower..=cfg.u_upper)).collect();
    record(system, cfg, &controls, vec![0; n], rng)
}

fn eval_case(
    system: &SystemModel,
    cfg: &DataEfficiencyConfig,
    controls: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<EvalCase> {
    let mut plant = spun_up_plant(system, cfg, rng)?;
    let mut history = vec![DVector::from_column_slice(plant.state())];
    let hu: Vec<f64> = (0..cfg.sync_steps).map(|_| rng.random_range(cfg.u_lower..=cfg.u_upper)).collect();
    history.extend(simulate(system, &mut plant, &hu, cfg.dt, cfg.substeps)?);
    let truth = simulate(system, &mut plant, &controls, cfg.dt, cfg.substeps)?;
    Ok(EvalCase {
        history,
        history_u: hu.iter().map(|&u| DVector::from_element(1, u)).collect(),
        controls,
        truth,
    })
}

/// Weights of the two values of `v` bracketing `u` (linear interpolation),
/// clamped to the nearest value outside the hull of `v`.
pub fn interpolation_weights(v: &[f64], u: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut w = vec![0.0; v.len()];
    let (lo, hi) = (order[0], order[order.len() - 1]);
    if u <= v[lo] {
        w[lo] = 1.0;
    } else if u >= v[hi] {
        w[hi] = 1.0;
    } else {
        let k = order.windows(2).position(|p| u <= v[p[1]]).expect("u inside the hull");
        let (a, b) = (order[k], order[k + 1]);
        let s = (u - v[a]) / (v[b] - v[a]);
        w[a] = 1.0 - s;
        w[b] = s;
    }
    w
}

fn relative_error(pred: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).norm_squared()).sum();
    let den: f64 = truth.iter().map(|t| t.norm_squared()).sum();
    (num / den).sqrt()
}

fn per_control_error(model: &EsnModel, v: &[f64], case: &EvalCase) -> Result<f64> {
    let mut hidden = model.sync_state(&case.history);
    let weights: Vec<f64> = case.controls.iter().flat_map(|&u| interpolation_weights(v, u)).collect();
    let z0 = case.history.last().expect("non-empty history");
    let pred = multi_step_predict(model, Schedule::Weights(&weights), z0.as_slice(), &mut hidden)?;
    Ok(relative_error(&pred, &case.truth))
}

fn augmented_error(model: &AugmentedEsnModel, case: &EvalCase) -> f64 {
    let mut r = model.sync_state(&case.history, &case.history_u);
    let mut z = case.history.last().expect("non-empty history").clone();
    let mut pred = Vec::with_capacity(case.controls.len());
    for &u in &case.controls {
        z = model.predict(z.as_slice(), &[u], &mut r);
        pred.push(z.clone());
    }
    relative_error(&pred, &case.truth)
}

type TrialResult = Vec<(ModelVariant, EvalControls, usize, f64)>;

fn run_trial(cfg: &DataEfficiencyConfig, trial: usize) -> Result<TrialResult> {
    let system = builtin_system(&cfg.system, &cfg.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    let spec = ReservoirSpec {
        seed: cfg.reservoir.seed.wrapping_add(trial as u64),
        ..cfg.reservoir.clone()
    };
    let reservoir = esn_init(&spec, 3)?;

    let mut ensembles: Vec<(ModelVariant, Vec<f64>, LabeledTrajectory)> =
        vec![(ModelVariant::PerControl, cfg.v.clone(), v_data(&system, cfg, &cfg.v, &mut rng)?)];
    if let Some(v) = &cfg.off_bounds_v {
        ensembles.push((ModelVariant::PerControlOffBounds, v.clone(), v_data(&system, cfg, v, &mut rng)?));
    }
    let aug_data = u_data(&system, cfg, &mut rng)?;

    let h = cfg.horizon_steps();
    let draw_cases = |values: Option<&[f64]>, rng: &mut ChaCha8Rng| -> Result<Vec<EvalCase>> {
        (0..cfg.eval_runs)
            .map(|_| {
                let controls: Vec<f64> = (0..h)
                    .map(|_| match values {
                        Some(v) => v[rng.random_range(0..v.len())],
                        None => rng.random_range(cfg.u_lower..=cfg.u_upper),
                    })
                    .collect();
                eval_case(&system, cfg, controls, rng)
            })
            .collect()
    };
    let u_cases = draw_cases(None, &mut rng)?;
    let v_cases: Vec<Vec<EvalCase>> = ensembles
        .iter()
        .map(|(_, v, _)| draw_cases(Some(v), &mut rng))
        .collect::<Result<_>>()?;

    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut out = Vec::new();
    for &size in &cfg.sizes {
        let washout = cfg.washout.min(size / 2);
        for ((variant, v, data), own_cases) in ensembles.iter().zip(&v_cases) {
            let n = size.min(data.transitions());
            let model = esn_fit(&data.slice(0, n), &reservoir, v.len(), washout, cfg.ridge, cfg.dt)?;
            let eu = u_cases.iter().map(|c| per_control_error(&model, v, c)).collect::<Result<Vec<_>>>()?;
            let ev = own_cases.iter().map(|c| per_control_error(&model, v, c)).collect::<Result<Vec<_>>>()?;
            out.push((*variant, EvalControls::U, size, mean(eu)));
            out.push((*variant, EvalControls::V, size, mean(ev)));
        }
        let n = size.min(aug_data.transitions());
        let aug = esn_fit_augmented(&aug_data.slice(0, n), &reservoir, cfg.input_scale, washout, cfg.ridge, cfg.dt)?;
        out.push((ModelVariant::Augmented, EvalControls::U, size, mean(u_cases.iter().map(|c| augmented_error(&aug, c)).collect())));
        out.push((ModelVariant::Augmented, EvalControls::V, size, mean(v_cases[0].iter().map(|c| augmented_error(&aug, c)).collect())));
    }
    Ok(out)
}

/// Runs all trials on at most `workers` threads (all cores if `None`).
pub fn run_data_efficiency(cfg: &DataEfficiencyConfig, workers: Option<usize>) -> Result<DataEfficiencyReport> {
    cfg.validate()?;
    let clock = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| ExperimentError::Config(ConfigError::new("workers", e)))?;
    let workers = pool.current_num_threads();
    let trials: Vec<TrialResult> =
        pool.install(|| (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect::<Result<_>>())?;

    let mut groups: BTreeMap<(ModelVariant, EvalControls, usize), Vec<f64>> = BTreeMap::new();
    for (variant, eval, size, err) in trials.into_iter().flatten() {
        groups.entry((variant, eval, size)).or_default().push(err);
    }
    let cells = groups
        .into_iter()
        .map(|((variant, eval, size), errs)| {
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = if errs.len() > 1 {
                errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            EfficiencyCell {
                variant,
                eval,
                size,
                mean,
                std: var.sqrt(),
                trials: errs.len(),
            }
        })
        .collect();
    Ok(DataEfficiencyReport {
        config: cfg.clone(),
        cells,
        workers,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}
