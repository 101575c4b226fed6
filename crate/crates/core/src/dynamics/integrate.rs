use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{DelayHistory, Dynamics, DynamicsError, SystemModel};

/// Uniform time grid `t0, t0 + dt, ..., t0 + steps * dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Result<Self, DynamicsError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(DynamicsError::InvalidStep(dt));
        }
        Ok(Self { t0, dt, steps })
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }
}

/// Work buffers for one RK4 step.
#[derive(Clone, Debug, Default)]
pub(crate) struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    lag: [Vec<f64>; 3],
}

impl Rk4Scratch {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
            lag: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }
}

/// One classical RK4 step in place. `history` must cover `[t - tau, t]`
/// for delay systems. Returns `false` if the result is not finite.
pub(crate) fn rk4_inplace(
    sys: &dyn Dynamics,
    t: f64,
    y: &mut [f64],
    u: &[f64],
    h: f64,
    history: Option<&DelayHistory>,
    s: &mut Rk4Scratch,
) -> bool {
    let n = y.len();
    if s.k1.len() != n {
        *s = Rk4Scratch::new(n);
    }
    let Rk4Scratch { k1, k2, k3, k4, tmp, lag } = s;
    let lagged = match (sys.delay(), history) {
        (Some(tau), Some(hist)) => {
            hist.interpolate(t - tau, &mut lag[0]);
            hist.interpolate(t + 0.5 * h - tau, &mut lag[1]);
            hist.interpolate(t + h - tau, &mut lag[2]);
            true
        }
        _ => false,
    };
    let lag_at = |i: usize| lagged.then(|| lag[i].as_slice());

    sys.rhs(y, u, lag_at(0), k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    sys.rhs(tmp, u, lag_at(1), k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    sys.rhs(tmp, u, lag_at(1), k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    sys.rhs(tmp, u, lag_at(2), k4);
    let h6 = h / 6.0;
    let mut finite = true;
    for i in 0..n {
        y[i] += h6 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        finite &= y[i].is_finite();
    }
    finite
}

/// Single RK4 step with the control held constant. For delay systems the
/// current time is the last time stored in `history`.
pub fn rk4_step(
    system: &SystemModel,
    y: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    history: Option<&DelayHistory>,
) -> Result<DVector<f64>, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    check_dims(system, y.len(), u.len())?;
    let t = history.map_or(0.0, DelayHistory::last_time);
    let mut out = y.clone();
    let mut scratch = Rk4Scratch::new(y.len());
    if rk4_inplace(system.dynamics(), t, out.as_mut_slice(), u.as_slice(), dt, history, &mut scratch) {
        Ok(out)
    } else {
        Err(DynamicsError::IntegrationDiverged { step: 0, time: t })
    }
}

/// Time-T map over a grid: one control per coarse interval, `substeps` RK4
/// steps inside each. Delay systems start from a constant history.
pub fn flow_map(
    system: &SystemModel,
    y0: &DVector<f64>,
    controls: &[DVector<f64>],
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Vec<DVector<f64>>, DynamicsError> {
    if controls.len() != grid.steps {
        return Err(DynamicsError::Dimension {
            what: "controls vs grid steps",
            expected: grid.steps,
            actual: controls.len(),
        });
    }
    let mut plant = Plant::new(system.clone(), grid.t0, y0.as_slice())?;
    let mut out = Vec::with_capacity(grid.steps);
    for u in controls {
        plant.advance(u.as_slice(), grid.dt, substeps)?;
        out.push(DVector::from_column_slice(plant.state()));
    }
    Ok(out)
}

fn check_dims(system: &SystemModel, ny: usize, nu: usize) -> Result<(), DynamicsError> {
    if ny != system.state_dim() {
        return Err(DynamicsError::Dimension {
            what: "state",
            expected: system.state_dim(),
            actual: ny,
        });
    }
    if nu != system.control_dim() {
        return Err(DynamicsError::Dimension {
            what: "control",
            expected: system.control_dim(),
            actual: nu,
        });
    }
    Ok(())
}

/// Stateful integrator for closed loops: current time, state and, for delay
/// systems, the history needed to continue.
#[derive(Clone, Debug)]
pub struct Plant {
    system: SystemModel,
    t: f64,
    y: Vec<f64>,
    history: Option<DelayHistory>,
    scratch: Rk4Scratch,
    steps: usize,
}

impl Plant {
    pub fn new(system: SystemModel, t0: f64, y0: &[f64]) -> Result<Self, DynamicsError> {
        let history = system.delay().map(|tau| DelayHistory::constant(t0, y0, tau));
        Self::build(system, t0, y0, history)
    }

    pub fn with_history(system: SystemModel, history: DelayHistory) -> Result<Self, DynamicsError> {
        let t0 = history.last_time();
        let y0 = history.last_state().to_vec();
        Self::build(system, t0, &y0, Some(history))
    }

    fn build(
        system: SystemModel,
        t0: f64,
        y0: &[f64],
        history: Option<DelayHistory>,
    ) -> Result<Self, DynamicsError> {
        check_dims(&system, y0.len(), system.control_dim())?;
        let n = y0.len();
        Ok(Self {
            system,
            t: t0,
            y: y0.to_vec(),
            history,
            scratch: Rk4Scratch::new(n),
            steps: 0,
        })
    }

    pub fn system(&self) -> &SystemModel {
        &self.system
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[f64] {
        &self.y
    }

    pub fn history(&self) -> Option<&DelayHistory> {
        self.history.as_ref()
    }

    /// Number of completed `advance` calls.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Integrates over `dt` with `u` held constant using `substeps` RK4 steps.
    pub fn advance(&mut self, u: &[f64], dt: f64, substeps: usize) -> Result<(), DynamicsError> {
        if u.len() != self.system.control_dim() {
            return Err(DynamicsError::Dimension {
                what: "control",
                expected: self.system.control_dim(),
                actual: u.len(),
            });
        }
        let substeps = substeps.max(1);
        let h = dt / substeps as f64;
        if !(h > 0.0 && h.is_finite()) {
            return Err(DynamicsError::InvalidStep(dt));
        }
        if let Some(tau) = self.system.delay() {
            if h > tau {
                return Err(DynamicsError::InvalidStep(h));
            }
        }
        let t_start = self.t;
        for k in 0..substeps {
            let t = t_start + k as f64 * h;
            let ok = rk4_inplace(
                self.system.dynamics(),
                t,
                &mut self.y,
                u,
                h,
                self.history.as_ref(),
                &mut self.scratch,
            );
            if !ok {
                return Err(DynamicsError::IntegrationDiverged {
                    step: self.steps,
                    time: t,
                });
            }
            if let Some(hist) = self.history.as_mut() {
                hist.push(t_start + (k + 1) as f64 * h, &self.y);
            }
        }
        self.t = t_start + dt;
        self.steps += 1;
        Ok(())
    }
}
