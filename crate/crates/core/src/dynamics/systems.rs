use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{Dynamics, DynamicsError, SystemModel, SystemSpec};

pub const BUILTIN_SYSTEMS: &[&str] = &["duffing", "lorenz_affine", "lorenz_cos", "mackey_glass", "burgers1d"];

/// Duffing oscillator `y1' = y2`, `y2' = -delta y2 - alpha y1 - beta y1^3 + eps + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Duffing {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub eps: f64,
}

impl Default for Duffing {
    fn default() -> Self {
        Self {
            alpha: -1.0,
            beta: 1.0,
            delta: 0.0,
            eps: 0.0,
        }
    }
}

impl Dynamics for Duffing {
    fn name(&self) -> &str {
        "duffing"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn rhs(&self, y: &[f64], u: &[f64], _lagged: Option<&[f64]>, dy: &mut [f64]) {
        dy[0] = y[1];
        dy[1] = -self.delta * y[1] - self.alpha * y[0] - self.beta * y[0] * y[0] * y[0] + self.eps + u[0];
    }
}

/// Lorenz system with the control added to the second equation.
#[derive(Clone, Debug, PartialEq)]
pub struct LorenzAffine {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzAffine {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

fn lorenz_drift(sigma: f64, rho: f64, beta: f64, y: &[f64], dy: &mut [f64]) {
    dy[0] = sigma * (y[1] - y[0]);
    dy[1] = y[0] * (rho - y[2]) - y[1];
    dy[2] = y[0] * y[1] - beta * y[2];
}

impl Dynamics for LorenzAffine {
    fn name(&self) -> &str {
        "lorenz_affine"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn rhs(&self, y: &[f64], u: &[f64], _lagged: Option<&[f64]>, dy: &mut [f64]) {
        lorenz_drift(self.sigma, self.rho, self.beta, y, dy);
        dy[1] += u[0];
    }
}

/// Lorenz system with `gain * cos(u)` added to the second equation.
#[derive(Clone, Debug, PartialEq)]
pub struct LorenzCos {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub gain: f64,
}

impl Default for LorenzCos {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            gain: 50.0,
        }
    }
}

impl Dynamics for LorenzCos {
    fn name(&self) -> &str {
        "lorenz_cos"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn rhs(&self, y: &[f64], u: &[f64], _lagged: Option<&[f64]>, dy: &mut [f64]) {
        lorenz_drift(self.sigma, self.rho, self.beta, y, dy);
        dy[1] += self.gain * u[0].cos();
    }
}

/// Mackey-Glass delay equation `y' = beta y_tau / (1 + |y_tau|^eta) - gamma y + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct MackeyGlass {
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub tau: f64,
}

impl Default for MackeyGlass {
    fn default() -> Self {
        Self {
            beta: 2.0,
            gamma: 1.0,
            eta: 9.65,
            tau: 2.0,
        }
    }
}

impl Dynamics for MackeyGlass {
    fn name(&self) -> &str {
        "mackey_glass"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn delay(&self) -> Option<f64> {
        Some(self.tau)
    }
    fn rhs(&self, y: &[f64], u: &[f64], lagged: Option<&[f64]>, dy: &mut [f64]) {
        let yt = lagged.map_or(y[0], |l| l[0]);
        // |y_tau| keeps the non-integer power defined if a control pushes y below zero.
        dy[0] = self.beta * yt / (1.0 + yt.abs().powf(self.eta)) - self.gamma * y[0] + u[0];
    }
}

/// Finite-difference semi-discretization of the viscous Burgers equation on
/// `(0, L)` with homogeneous Dirichlet ends and five piecewise-constant
/// actuators.
#[derive(Clone, Debug, PartialEq)]
pub struct Burgers1d {
    re: f64,
    length: f64,
    nx: usize,
    region: Vec<usize>,
}

impl Burgers1d {
    pub const N_ACTUATORS: usize = 5;

    pub fn new(re: f64, length: f64, nx: usize) -> Self {
        let h = length / (nx + 1) as f64;
        let region = (1..=nx)
            .map(|i| {
                let x = i as f64 * h;
                // x in ((j-1)L/5, jL/5]  ->  j - 1
                let j = (x * Self::N_ACTUATORS as f64 / length).ceil() as usize;
                j.clamp(1, Self::N_ACTUATORS) - 1
            })
            .collect();
        Self { re, length, nx, region }
    }

    pub fn grid_spacing(&self) -> f64 {
        self.length / (self.nx + 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        let h = self.grid_spacing();
        (1..=self.nx).map(|i| i as f64 * h).collect()
    }

    /// Indicator functions sampled on the interior grid, one column per actuator.
    pub fn indicators(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nx, Self::N_ACTUATORS, |i, j| f64::from(self.region[i] == j))
    }

    /// Step initial condition: 1 on `(0, L/2]`, 0 elsewhere.
    pub fn initial_condition(&self) -> DVector<f64> {
        let half = 0.5 * self.length;
        DVector::from_iterator(self.nx, self.grid().into_iter().map(|x| f64::from(x <= half)))
    }
}

impl Default for Burgers1d {
    fn default() -> Self {
        Self::new(100.0, 1.0, 100)
    }
}

impl Dynamics for Burgers1d {
    fn name(&self) -> &str {
        "burgers1d"
    }
    fn state_dim(&self) -> usize {
        self.nx
    }
    fn control_dim(&self) -> usize {
        Self::N_ACTUATORS
    }
    fn rhs(&self, y: &[f64], u: &[f64], _lagged: Option<&[f64]>, dy: &mut [f64]) {
        let h = self.grid_spacing();
        let nu = 1.0 / (self.re * h * h);
        let adv = 1.0 / (2.0 * h);
        let n = self.nx;
        for i in 0..n {
            let left = if i == 0 { 0.0 } else { y[i - 1] };
            let right = if i + 1 == n { 0.0 } else { y[i + 1] };
            dy[i] = nu * (left - 2.0 * y[i] + right) - y[i] * adv * (right - left) + u[self.region[i]];
        }
    }
}

/// Linear system `y' = A y + B u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Dynamics for LinearSystem {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn rhs(&self, y: &[f64], u: &[f64], _lagged: Option<&[f64]>, dy: &mut [f64]) {
        for (i, d) in dy.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, yk) in y.iter().enumerate() {
                acc += self.a[(i, k)] * yk;
            }
            for (k, uk) in u.iter().enumerate() {
                acc += self.b[(i, k)] * uk;
            }
            *d = acc;
        }
    }
}

struct Params<'a> {
    system: &'a str,
    map: &'a BTreeMap<String, f64>,
    allowed: &'static [&'static str],
}

impl<'a> Params<'a> {
    fn new(
        system: &'a str,
        map: &'a BTreeMap<String, f64>,
        allowed: &'static [&'static str],
    ) -> Result<Self, DynamicsError> {
        for (key, value) in map {
            if !allowed.contains(&key.as_str()) {
                return Err(DynamicsError::InvalidParam {
                    name: key.clone(),
                    reason: format!("not a parameter of `{system}` (expected one of {allowed:?})"),
                });
            }
            if !value.is_finite() {
                return Err(DynamicsError::InvalidParam {
                    name: key.clone(),
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(Self { system, map, allowed })
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        debug_assert!(self.allowed.contains(&key), "{} has no {key}", self.system);
        self.map.get(key).copied().unwrap_or(default)
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64, DynamicsError> {
        let v = self.get(key, default);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(DynamicsError::InvalidParam {
                name: key.into(),
                reason: format!("must be positive, got {v}"),
            })
        }
    }
}

/// Builds one of [`BUILTIN_SYSTEMS`]; missing parameters take their defaults.
pub fn builtin_system(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemModel, DynamicsError> {
    let model = match name {
        "duffing" => {
            let p = Params::new(name, params, &["alpha", "beta", "delta", "epsilon"])?;
            SystemModel::new(Duffing {
                alpha: p.get("alpha", -1.0),
                beta: p.get("beta", 1.0),
                delta: p.get("delta", 0.0),
                eps: p.get("epsilon", 0.0),
            })
        }
        "lorenz_affine" => {
            let p = Params::new(name, params, &["sigma", "rho", "beta"])?;
            SystemModel::new(LorenzAffine {
                sigma: p.get("sigma", 10.0),
                rho: p.get("rho", 28.0),
                beta: p.get("beta", 8.0 / 3.0),
            })
        }
        "lorenz_cos" => {
            let p = Params::new(name, params, &["sigma", "rho", "beta", "gain"])?;
            SystemModel::new(LorenzCos {
                sigma: p.get("sigma", 10.0),
                rho: p.get("rho", 28.0),
                beta: p.get("beta", 8.0 / 3.0),
                gain: p.get("gain", 50.0),
            })
        }
        "mackey_glass" => {
            let p = Params::new(name, params, &["beta", "gamma", "eta", "tau"])?;
            SystemModel::new(MackeyGlass {
                beta: p.get("beta", 2.0),
                gamma: p.get("gamma", 1.0),
                eta: p.get("eta", 9.65),
                tau: p.positive("tau", 2.0)?,
            })
        }
        "burgers1d" => {
            let p = Params::new(name, params, &["re", "length", "nx"])?;
            let nx = p.positive("nx", 100.0)?;
            if nx.fract() != 0.0 {
                return Err(DynamicsError::InvalidParam {
                    name: "nx".into(),
                    reason: format!("must be an integer, got {nx}"),
                });
            }
            SystemModel::new(Burgers1d::new(
                p.positive("re", 100.0)?,
                p.positive("length", 1.0)?,
                nx as usize,
            ))
        }
        other => return Err(DynamicsError::UnknownSystem(other.to_string())),
    };
    Ok(model.with_spec(SystemSpec {
        name: name.to_string(),
        params: params.clone(),
    }))
}
