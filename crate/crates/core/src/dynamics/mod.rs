//! Plant models, fixed-step RK4 integration and the time-T map.
//!
//! Every plant implements [`Dynamics`], a right-hand side `g(y, u)` written
//! into a caller-owned buffer. Delay systems additionally read the lagged
//! state `y(t - tau)`, which the integrator interpolates from a
//! [`DelayHistory`].

mod history;
mod integrate;
mod systems;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use history::DelayHistory;
pub use integrate::{flow_map, rk4_step, Plant, TimeGrid};
pub(crate) use integrate::{rk4_inplace, Rk4Scratch};
pub use systems::{
    builtin_system, Burgers1d, Duffing, LinearSystem, LorenzAffine, LorenzCos, MackeyGlass,
    BUILTIN_SYSTEMS,
};

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("integration diverged at step {step} (t = {time})")]
    IntegrationDiverged { step: usize, time: f64 },
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid time step {0}")]
    InvalidStep(f64),
}

/// Right-hand side of a controlled ODE or delay ODE.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Delay `tau` for delay equations; `None` for ordinary ODEs.
    fn delay(&self) -> Option<f64> {
        None
    }

    /// Writes `g(y, u)` into `dy`. `lagged` is `y(t - tau)` for delay systems
    /// and is ignored otherwise.
    fn rhs(&self, y: &[f64], u: &[f64], lagged: Option<&[f64]>, dy: &mut [f64]);
}

/// Name and parameters of a built-in plant; enough to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl SystemSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

/// Shared, immutable handle to a plant model.
#[derive(Clone)]
pub struct SystemModel {
    inner: Arc<dyn Dynamics>,
    spec: Option<SystemSpec>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.inner.name())
            .field("n_y", &self.inner.state_dim())
            .field("n_u", &self.inner.control_dim())
            .field("delay", &self.inner.delay())
            .finish()
    }
}

impl SystemModel {
    pub fn new(dynamics: impl Dynamics + 'static) -> Self {
        Self {
            inner: Arc::new(dynamics),
            spec: None,
        }
    }

    pub fn from_spec(spec: &SystemSpec) -> Result<Self, DynamicsError> {
        builtin_system(&spec.name, &spec.params)
    }

    /// Closure-backed system without delay.
    pub fn from_fn<F>(name: &str, state_dim: usize, control_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(FnSystem {
            name: name.to_string(),
            state_dim,
            control_dim,
            f: Box::new(f),
        })
    }

    pub(crate) fn with_spec(mut self, spec: SystemSpec) -> Self {
        self.spec = Some(spec);
        self
    }

    /// The built-in spec this model was created from, if any.
    pub fn spec(&self) -> Option<&SystemSpec> {
        self.spec.as_ref()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.inner.as_ref()
    }

    pub fn name(&self) -> &str {
        self.inner.name()
    }

    pub fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }

    pub fn delay(&self) -> Option<f64> {
        self.inner.delay()
    }

    pub fn rhs_into(&self, y: &[f64], u: &[f64], lagged: Option<&[f64]>, dy: &mut [f64]) {
        self.inner.rhs(y, u, lagged, dy)
    }

    /// Allocating convenience wrapper around [`Dynamics::rhs`].
    pub fn rhs(&self, y: &DVector<f64>, u: &DVector<f64>, lagged: Option<&DVector<f64>>) -> DVector<f64> {
        let mut dy = DVector::zeros(self.state_dim());
        self.inner
            .rhs(y.as_slice(), u.as_slice(), lagged.map(|l| l.as_slice()), dy.as_mut_slice());
        dy
    }
}

type RhsFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

struct FnSystem {
    name: String,
    state_dim: usize,
    control_dim: usize,
    f: RhsFn,
}

impl fmt::Debug for FnSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnSystem({})", self.name)
    }
}

impl Dynamics for FnSystem {
    fn name(&self) -> &str {
        &self.name
    }
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn control_dim(&self) -> usize {
        self.control_dim
    }
    fn rhs(&self, y: &[f64], u: &[f64], _lagged: Option<&[f64]>, dy: &mut [f64]) {
        (self.f)(y, u, dy)
    }
}
