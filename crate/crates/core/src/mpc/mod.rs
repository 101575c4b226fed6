//! Receding-horizon loop: observe the plant, solve the relaxed problem on
//! the surrogate ensemble, apply the first step of the plan either as the
//! interpolated control or through sum-up rounding on a finer grid.

mod log;

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::datagen::ObservableSpec;
use crate::dynamics::{DelayHistory, Plant, SystemModel};
use crate::optimize::{solve_relaxed, ObjectiveSpec, RelaxedPlan, RelaxedProblem, SolverConfig};
use crate::quantization::{interpolate_into, QuantizedControlSet, SurAccumulator};
use crate::surrogates::Surrogate;

pub use log::{plot_script, tracking_errors, tracking_metrics, Metric, MpcLog, MpcStep, TrackingMetrics};

/// How the relaxed solution reaches the plant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// `u = sum_j alpha_0j u^j`, constant over the step.
    Interpolate,
    /// Sum-up rounding of `alpha_0` on the fine grid; `u` is always in `V`.
    Sur,
    /// Both of the above as two independent loops from the same start.
    Both,
}

impl ControlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Interpolate => "interpolate",
            Self::Sur => "sur",
            Self::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Previous plan without its first row, uniform row appended.
    #[default]
    Shift,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Horizon `p` in steps of `dt`.
    pub horizon: usize,
    /// Control and surrogate step.
    pub dt: f64,
    /// Fine step for rounding and plant integration; must divide `dt`.
    /// Defaults to `dt`.
    #[serde(default)]
    pub dt_sur: Option<f64>,
    /// Closed-loop duration `T_MPC`.
    pub t_end: f64,
    pub mode: ControlMode,
    /// RK4 steps per fine step.
    #[serde(default = "one")]
    pub plant_substeps: usize,
    #[serde(default)]
    pub warm_start: WarmStart,
    /// Restart the rounding accumulator at every coarse step.
    #[serde(default)]
    pub sur_reset: bool,
    /// Observables replayed into recurrent surrogates before each solve.
    #[serde(default = "default_window")]
    pub sync_window: usize,
    /// Coarse steps simulated before `t = 0` with the uniform-weight
    /// interpolated control, to fill delay embeddings and reservoirs.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn one() -> usize {
    1
}

fn default_window() -> usize {
    20
}

impl MpcConfig {
    pub fn new(horizon: usize, dt: f64, t_end: f64, mode: ControlMode) -> Self {
        Self {
            horizon,
            dt,
            dt_sur: None,
            t_end,
            mode,
            plant_substeps: 1,
            warm_start: WarmStart::Shift,
            sur_reset: false,
            sync_window: default_window(),
            warmup_steps: 0,
            solver: SolverConfig::default(),
        }
    }

    pub fn fine_step(&self) -> f64 {
        self.dt_sur.unwrap_or(self.dt)
    }

    /// Fine steps per coarse step.
    pub fn fine_per_coarse(&self) -> Result<usize, MpcError> {
        let ratio = self.dt / self.fine_step();
        let n = ratio.round();
        if !(n >= 1.0) || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(MpcError::Config(format!(
                "dt_sur = {} does not divide dt = {}",
                self.fine_step(),
                self.dt
            )));
        }
        Ok(n as usize)
    }

    /// Coarse steps in the closed loop; stops when `t_i + dt > T_MPC`.
    pub fn coarse_steps(&self) -> usize {
        (self.t_end / self.dt * (1.0 + 1e-12)).floor() as usize
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::Config("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.fine_step() > 0.0) {
            return Err(MpcError::Config(format!("invalid time steps dt = {}, dt_sur = {}", self.dt, self.fine_step())));
        }
        self.fine_per_coarse()?;
        if self.horizon as f64 * self.dt > self.t_end * (1.0 + 1e-12) {
            return Err(MpcError::Config(format!(
                "horizon p dt = {} exceeds T_MPC = {}",
                self.horizon as f64 * self.dt,
                self.t_end
            )));
        }
        if self.plant_substeps == 0 {
            return Err(MpcError::Config("plant_substeps must be positive".into()));
        }
        self.solver.validate().map_err(|e| MpcError::Config(e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MpcError {
    #[error("invalid closed-loop setup: {0}")]
    Config(String),
    #[error("closed loop failed at step {step} (t = {time}): {reason}")]
    Failed {
        step: usize,
        time: f64,
        reason: String,
        partial: Box<MpcLog>,
    },
}

/// Everything a closed loop needs besides its configuration.
#[derive(Clone, Copy)]
pub struct MpcSetup<'a> {
    pub plant: &'a SystemModel,
    pub model: &'a dyn Surrogate,
    pub observable: &'a ObservableSpec,
    pub controls: &'a QuantizedControlSet,
    pub objective: &'a ObjectiveSpec,
    pub y0: &'a [f64],
    /// Initial history for delay systems; constant `y0` if absent.
    pub history: Option<&'a DelayHistory>,
}

/// Logs of a run; `Both` fills both fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpcRun {
    pub interpolate: Option<MpcLog>,
    pub sur: Option<MpcLog>,
}

impl MpcRun {
    pub fn logs(&self) -> impl Iterator<Item = &MpcLog> {
        self.interpolate.iter().chain(self.sur.iter())
    }
}

/// Runs the configured closed loop(s). `seed` drives the solver restarts.
pub fn run_mpc(setup: &MpcSetup<'_>, config: &MpcConfig, seed: u64) -> Result<MpcRun, MpcError> {
    config.validate()?;
    check_setup(setup, config)?;
    let mut config = config.clone();
    config.solver.seed = seed;
    let run = |mode| run_single(setup, &config, mode);
    Ok(match config.mode {
        ControlMode::Interpolate => MpcRun {
            interpolate: Some(run(ControlMode::Interpolate)?),
            sur: None,
        },
        ControlMode::Sur => MpcRun {
            interpolate: None,
            sur: Some(run(ControlMode::Sur)?),
        },
        ControlMode::Both => MpcRun {
            interpolate: Some(run(ControlMode::Interpolate)?),
            sur: Some(run(ControlMode::Sur)?),
        },
    })
}

fn check_setup(s: &MpcSetup<'_>, c: &MpcConfig) -> Result<(), MpcError> {
    let ny = s.plant.state_dim();
    s.observable.validate(ny).map_err(|e| MpcError::Config(e.to_string()))?;
    let q = s.observable.output_dim(ny);
    if q != s.model.obs_dim() || q != s.objective.dim() {
        return Err(MpcError::Config(format!(
            "observable dimension {q}, surrogate {}, objective {}",
            s.model.obs_dim(),
            s.objective.dim()
        )));
    }
    if s.model.n_controls() != s.controls.len() {
        return Err(MpcError::Config(format!(
            "surrogate has {} control values, V has {}",
            s.model.n_controls(),
            s.controls.len()
        )));
    }
    if s.controls.control_dim() != s.plant.control_dim() {
        return Err(MpcError::Config(format!(
            "V has control dimension {}, plant {}",
            s.controls.control_dim(),
            s.plant.control_dim()
        )));
    }
    if s.y0.len() != ny {
        return Err(MpcError::Config(format!("y0 has length {}, plant state {ny}", s.y0.len())));
    }
    let rel = (s.model.dt() - c.dt).abs() / c.dt;
    if rel > 1e-9 {
        return Err(MpcError::Config(format!(
            "surrogate step {} differs from control step {}",
            s.model.dt(),
            c.dt
        )));
    }
    Ok(())
}

fn run_single(s: &MpcSetup<'_>, c: &MpcConfig, mode: ControlMode) -> Result<MpcLog, MpcError> {
    let n_fine = c.fine_per_coarse()?;
    let h_fine = c.fine_step();
    let (m, nu) = (s.controls.len(), s.plant.control_dim());
    let q = s.model.obs_dim();
    let t_start = -(c.warmup_steps as f64) * c.dt;
    let mut log = MpcLog::new(mode, m);
    let fail = |step: usize, time: f64, reason: String, log: &MpcLog| MpcError::Failed {
        step,
        time,
        reason,
        partial: Box::new(log.clone()),
    };

    let mut plant = match s.history {
        Some(h) => {
            let mut h = h.clone();
            // shift the supplied history so it ends at the loop's start time
            let shift = t_start - h.last_time();
            h = shift_history(&h, shift);
            Plant::with_history(s.plant.clone(), h)
        }
        None => Plant::new(s.plant.clone(), t_start, s.y0),
    }
    .map_err(|e| MpcError::Config(e.to_string()))?;

    let keep_states = s.observable.warmup() + 1;
    let mut states: VecDeque<DVector<f64>> = VecDeque::with_capacity(keep_states + 1);
    let mut observed: VecDeque<DVector<f64>> = VecDeque::with_capacity(c.sync_window + 1);
    let mut u = vec![0.0; nu];
    let uniform = vec![1.0 / m as f64; m];

    let observe = |states: &VecDeque<DVector<f64>>| -> Result<DVector<f64>, String> {
        let window: Vec<DVector<f64>> = states.iter().cloned().collect();
        s.observable.apply_last(&window).map_err(|e| e.to_string())
    };
    let push = |dq: &mut VecDeque<DVector<f64>>, cap: usize, v: DVector<f64>| {
        dq.push_back(v);
        while dq.len() > cap {
            dq.pop_front();
        }
    };

    // pre-roll before t = 0
    for k in 0..c.warmup_steps {
        push(&mut states, keep_states, DVector::from_column_slice(plant.state()));
        if let Ok(z) = observe(&states) {
            push(&mut observed, c.sync_window.max(1), z);
        }
        interpolate_into(&uniform, s.controls, &mut u);
        plant
            .advance(&u, c.dt, n_fine * c.plant_substeps)
            .map_err(|e| fail(k, plant.time(), format!("warm-up: {e}"), &log))?;
    }

    let mut acc = SurAccumulator::new(m);
    let mut plan: Option<RelaxedPlan> = None;
    let mut hidden = vec![0.0; s.model.hidden_dim()];
    let mut fine_u = vec![0.0; nu];
    let mut reference = vec![0.0; q];

    for i in 0..c.coarse_steps() {
        let t = i as f64 * c.dt;
        let clock = Instant::now();
        push(&mut states, keep_states, DVector::from_column_slice(plant.state()));
        let z = observe(&states).map_err(|e| fail(i, t, e, &log))?;
        push(&mut observed, c.sync_window.max(1), z.clone());
        if !hidden.is_empty() {
            let window: Vec<DVector<f64>> = observed.iter().cloned().collect();
            s.model.synchronize(&window, &mut hidden);
        }

        let warm = match (c.warm_start, &plan) {
            (WarmStart::Shift, Some(prev)) => prev.shifted(),
            _ => RelaxedPlan::uniform(c.horizon, m),
        };
        let problem = RelaxedProblem {
            model: s.model,
            z0: z.as_slice(),
            hidden: &hidden,
            horizon: c.horizon,
            objective: s.objective,
            t0: t,
        };
        let sol = solve_relaxed(&problem, &c.solver, Some(&warm)).map_err(|e| fail(i, t, e.to_string(), &log))?;
        let alpha0 = sol.plan.row(0).to_vec();

        let mut indices = Vec::new();
        match mode {
            ControlMode::Sur => {
                if c.sur_reset {
                    acc.reset();
                }
                u.fill(0.0);
                for _ in 0..n_fine {
                    let j = acc.round_step(&alpha0);
                    indices.push(j);
                    fine_u.copy_from_slice(s.controls.point(j).as_slice());
                    for (a, b) in u.iter_mut().zip(&fine_u) {
                        *a += b / n_fine as f64;
                    }
                    plant
                        .advance(&fine_u, h_fine, c.plant_substeps)
                        .map_err(|e| fail(i, t, e.to_string(), &log))?;
                }
            }
            _ => {
                interpolate_into(&alpha0, s.controls, &mut u);
                for _ in 0..n_fine {
                    plant
                        .advance(&u, h_fine, c.plant_substeps)
                        .map_err(|e| fail(i, t, e.to_string(), &log))?;
                }
            }
        }

        s.objective.reference().eval_into(t, &mut reference);
        log.steps.push(MpcStep {
            time: t,
            state: states.back().expect("state pushed above").as_slice().to_vec(),
            observable: z.as_slice().to_vec(),
            reference: reference.clone(),
            plan: sol.plan.as_slice().to_vec(),
            control: u.clone(),
            sur_indices: indices,
            objective: sol.objective,
            iterations: sol.iterations,
            status: sol.status,
            wall_time: clock.elapsed().as_secs_f64(),
        });
        plan = Some(sol.plan);
    }

    log.final_time = c.coarse_steps() as f64 * c.dt;
    log.final_state = plant.state().to_vec();
    push(&mut states, keep_states, DVector::from_column_slice(plant.state()));
    log.final_observable = observe(&states).map(|z| z.as_slice().to_vec()).unwrap_or_default();
    Ok(log)
}

fn shift_history(h: &DelayHistory, shift: f64) -> DelayHistory {
    if shift == 0.0 {
        return h.clone();
    }
    let nodes = (0..h.len())
        .map(|k| {
            let (t, y) = h.node(k);
            (t + shift, y.to_vec())
        })
        .collect();
    DelayHistory::from_nodes(h.tau(), nodes).expect("shifting preserves a valid history")
}
