//! Experiment configuration files (TOML). Sections mirror the rows of the
//! parameter tables: system, quantization, training data, surrogate model,
//! closed loop and objective, plus the bounds and data-efficiency studies.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundsExperimentConfig;
use crate::datagen::{step_count, ObservableSpec};
use crate::dynamics::{builtin_system, SystemModel};
use crate::experiments::DataEfficiencyConfig;
use crate::mpc::MpcConfig;
use crate::optimize::{ObjectiveSpec, ReferenceSpec};
use crate::quantization::{make_star_set, make_vertex_set, BoxControlSet, QuantizedControlSet};
use crate::surrogates::{DictionarySpec, ReservoirSpec};

/// A rejected configuration: the dotted field path and the reason.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("{path}: {reason}")]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, reason: impl ToString) -> Self {
        Self {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

fn err<T>(path: &str, reason: impl ToString) -> Result<T, ConfigError> {
    Err(ConfigError::new(path, reason))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization: Option<QuantizationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsExperimentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_efficiency: Option<DataEfficiencyConfig>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Initial state of the closed loop. Optional for `burgers1d`, which
    /// defaults to its step profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VRule {
    /// All corners of the box.
    Vertices,
    /// Origin plus the two extremes along each axis.
    Star,
    /// The listed `points`.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rule: VRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Integration step of the training simulation.
    pub dt: f64,
    pub t_train: f64,
    #[serde(default = "one")]
    pub trajectories: usize,
    /// Initial state of the training run; defaults to `system.y0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
    /// Trailing fraction of each trajectory held out for the reported
    /// one-step error.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn one() -> usize {
    1
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Edmd,
    Esn,
    Pod,
    Perturbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Surrogate step; the control is held over each such interval in the
    /// training data.
    pub dt: f64,
    /// Defaults to the full state. POD models always use the projection
    /// onto their basis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<ObservableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edmd: Option<DictionarySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub esn: Option<EsnSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pod: Option<PodSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<PerturbedSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsnSection {
    pub reservoir: ReservoirSpec,
    pub ridge: f64,
    pub washout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodSection {
    pub ell: usize,
    /// RK4 steps per surrogate step of the reduced model.
    #[serde(default = "one")]
    pub substeps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedSection {
    pub offset: Vec<f64>,
    #[serde(default = "one")]
    pub substeps: usize,
}

/// `Q` given by exactly one of `weights` (diagonal), `q` (rows) or
/// `identity` (scaled identity of the reference dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<f64>,
    pub reference: ReferenceSpec,
}

impl ObjectiveSection {
    pub fn build(&self) -> Result<ObjectiveSpec, ConfigError> {
        let n = self.reference.dim();
        let q = match (&self.weights, &self.q, self.identity) {
            (Some(w), None, None) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(w)),
            (None, Some(rows), None) => {
                if rows.iter().any(|r| r.len() != rows.len()) {
                    return err("objective.q", "Q must be square");
                }
                DMatrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j])
            }
            (None, None, Some(s)) => DMatrix::identity(n, n) * s,
            _ => return err("objective", "give exactly one of weights, q, identity"),
        };
        ObjectiveSpec::new(q, self.reference.clone()).map_err(|e| ConfigError::new("objective", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// What a command needs from a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Requirement {
    Generate,
    Train,
    Mpc,
    Bounds,
    DataEfficiency,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let reason = e.message().to_string();
            let path = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].lines().count().max(1);
                    format!("<line {line}>")
                })
                .unwrap_or_else(|| "<document>".into());
            ConfigError { path, reason }
        })
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::new("<document>", e))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| ConfigError::new(path.display().to_string(), e))
    }

    pub fn system_section(&self) -> Result<&SystemSection, ConfigError> {
        self.system.as_ref().ok_or_else(|| ConfigError::new("system", "section missing"))
    }

    pub fn build_system(&self) -> Result<SystemModel, ConfigError> {
        let s = self.system_section()?;
        builtin_system(&s.name, &s.params).map_err(|e| ConfigError::new("system", e))
    }

    pub fn build_controls(&self) -> Result<QuantizedControlSet, ConfigError> {
        let q = self
            .quantization
            .as_ref()
            .ok_or_else(|| ConfigError::new("quantization", "section missing"))?;
        let u = BoxControlSet::new(q.lower.clone(), q.upper.clone()).map_err(|e| ConfigError::new("quantization", e))?;
        let v = match q.rule {
            VRule::Vertices => make_vertex_set(&u),
            VRule::Star => make_star_set(&u),
            VRule::Explicit => {
                let Some(points) = &q.points else {
                    return err("quantization.points", "required for rule = \"explicit\"");
                };
                QuantizedControlSet::new(points.clone(), u)
            }
        };
        v.map_err(|e| ConfigError::new("quantization", e))
    }

    /// Closed-loop initial state: `system.y0`, or the step profile for
    /// `burgers1d`.
    pub fn initial_state(&self) -> Result<Vec<f64>, ConfigError> {
        let s = self.system_section()?;
        let sys = self.build_system()?;
        let y0 = match &s.y0 {
            Some(y0) => y0.clone(),
            None if s.name == "burgers1d" => crate::experiments::burgers_model(&s.params)?
                .initial_condition()
                .as_slice()
                .to_vec(),
            None => return err("system.y0", "required for this system"),
        };
        if y0.len() != sys.state_dim() {
            return err(
                "system.y0",
                format!("has {} entries, state dimension is {}", y0.len(), sys.state_dim()),
            );
        }
        Ok(y0)
    }

    pub fn data_section(&self) -> Result<&DataSection, ConfigError> {
        self.data.as_ref().ok_or_else(|| ConfigError::new("data", "section missing"))
    }

    pub fn model_section(&self) -> Result<&ModelSection, ConfigError> {
        self.model.as_ref().ok_or_else(|| ConfigError::new("model", "section missing"))
    }

    pub fn mpc_section(&self) -> Result<&MpcConfig, ConfigError> {
        self.mpc.as_ref().ok_or_else(|| ConfigError::new("mpc", "section missing"))
    }

    pub fn objective_section(&self) -> Result<&ObjectiveSection, ConfigError> {
        self.objective.as_ref().ok_or_else(|| ConfigError::new("objective", "section missing"))
    }

    /// Training initial state: `data.y0`, falling back to the closed-loop one.
    pub fn training_state(&self) -> Result<Vec<f64>, ConfigError> {
        match &self.data_section()?.y0 {
            Some(y0) => {
                let n = self.build_system()?.state_dim();
                if y0.len() != n {
                    return err("data.y0", format!("has {} entries, state dimension is {n}", y0.len()));
                }
                Ok(y0.clone())
            }
            None => self.initial_state(),
        }
    }

    /// RK4 substeps per surrogate step in the training simulation.
    pub fn training_substeps(&self) -> Result<usize, ConfigError> {
        let (d, m) = (self.data_section()?, self.model_section()?);
        step_count(m.dt, d.dt).map_err(|_| ConfigError::new("data.dt", format!("{} does not divide model.dt {}", d.dt, m.dt)))
    }

    /// Cross-field checks for everything `req` touches.
    pub fn validate(&self, req: Requirement) -> Result<(), ConfigError> {
        if self.experiment.name.trim().is_empty() {
            return err("experiment.name", "must not be empty");
        }
        match req {
            Requirement::Bounds => {
                let b = self.bounds.as_ref().ok_or_else(|| ConfigError::new("bounds", "section missing"))?;
                return b.validate().map_err(|e| ConfigError::new("bounds", e));
            }
            Requirement::DataEfficiency => {
                let d = self
                    .data_efficiency
                    .as_ref()
                    .ok_or_else(|| ConfigError::new("data_efficiency", "section missing"))?;
                return d.validate();
            }
            _ => {}
        }
        let sys = self.build_system()?;
        let v = self.build_controls()?;
        if v.control_dim() != sys.control_dim() {
            return err(
                "quantization",
                format!("control dimension {} but the system takes {}", v.control_dim(), sys.control_dim()),
            );
        }
        if self.system_section()?.y0.is_some() || req != Requirement::Generate {
            self.initial_state()?;
        }
        self.validate_data()?;
        if req == Requirement::Generate {
            return Ok(());
        }
        let q = self.validate_model(&sys)?;
        if req == Requirement::Train {
            return Ok(());
        }
        let mpc = self.mpc_section()?;
        mpc.validate().map_err(|e| ConfigError::new("mpc", e))?;
        let model_dt = self.model_section()?.dt;
        if (mpc.dt - model_dt).abs() > 1e-12 * model_dt {
            return err("mpc.dt", format!("{} differs from model.dt {model_dt}", mpc.dt));
        }
        let obj = self.objective_section()?.build()?;
        if obj.dim() != q {
            return err("objective", format!("dimension {} but the observable has {q}", obj.dim()));
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<(), ConfigError> {
        let d = self.data_section()?;
        if !(d.dt > 0.0) {
            return err("data.dt", "must be positive");
        }
        if !(d.t_train > 0.0) {
            return err("data.t_train", "must be positive");
        }
        if d.trajectories == 0 {
            return err("data.trajectories", "must be at least 1");
        }
        if !(0.0..0.5).contains(&d.holdout) {
            return err("data.holdout", "must be in [0, 0.5)");
        }
        self.training_substeps()?;
        let m = self.model_section()?;
        step_count(d.t_train, m.dt)
            .map_err(|_| ConfigError::new("data.t_train", format!("not a multiple of model.dt {}", m.dt)))?;
        self.training_state()?;
        Ok(())
    }

    /// Returns the observable dimension the surrogate works in.
    fn validate_model(&self, sys: &SystemModel) -> Result<usize, ConfigError> {
        let m = self.model_section()?;
        let n = sys.state_dim();
        let obs = m.observable.clone().unwrap_or(ObservableSpec::FullState);
        obs.validate(n).map_err(|e| ConfigError::new("model.observable", e))?;
        let q = obs.output_dim(n);
        match m.kind {
            ModelKind::Edmd => {
                let d = m.edmd.as_ref().ok_or_else(|| ConfigError::new("model.edmd", "section missing"))?;
                if d.max_degree == 0 {
                    return err("model.edmd.max_degree", "must be at least 1");
                }
                Ok(q)
            }
            ModelKind::Esn => {
                let e = m.esn.as_ref().ok_or_else(|| ConfigError::new("model.esn", "section missing"))?;
                let r = &e.reservoir;
                if r.size == 0 {
                    return err("model.esn.reservoir.size", "must be positive");
                }
                if !(0.0..1.0).contains(&r.sparsity) {
                    return err("model.esn.reservoir.sparsity", "must be in [0, 1)");
                }
                if !(r.spectral_radius > 0.0) {
                    return err("model.esn.reservoir.spectral_radius", "must be positive");
                }
                if !(e.ridge > 0.0) {
                    return err("model.esn.ridge", "must be positive");
                }
                Ok(q)
            }
            ModelKind::Pod => {
                let p = m.pod.as_ref().ok_or_else(|| ConfigError::new("model.pod", "section missing"))?;
                if p.ell == 0 || p.ell > n {
                    return err("model.pod.ell", format!("must be in 1..={n}"));
                }
                if m.observable.is_some() {
                    return err("model.observable", "POD models use the projection onto their basis");
                }
                if p.substeps == 0 {
                    return err("model.pod.substeps", "must be positive");
                }
                Ok(p.ell)
            }
            ModelKind::Perturbed => {
                let p = m
                    .perturbed
                    .as_ref()
                    .ok_or_else(|| ConfigError::new("model.perturbed", "section missing"))?;
                if p.offset.len() != n {
                    return err("model.perturbed.offset", format!("needs {n} entries"));
                }
                if !matches!(obs, ObservableSpec::FullState) {
                    return err("model.observable", "perturbed models predict the full state");
                }
                Ok(n)
            }
        }
    }
}
