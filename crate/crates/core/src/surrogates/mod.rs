//! Per-control one-step predictors `z_{i+1} = Phi_j(z_i)`.
//!
//! Every backend exposes the images of the current observable under all `m`
//! control values at once, which is what the relaxed dynamics
//! `z_{i+1} = sum_j alpha_ij Phi_j(z_i)` needs. Recurrent backends carry a
//! hidden state that advances once per step, independent of the weights.

mod dictionary;
mod edmd;
mod esn;
pub(crate) mod matrix_serde;
mod perturbed;
mod pod;

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsError;

pub use dictionary::{monomial_features, DictionarySpec, Monomials};
pub use edmd::{edmd_fit, EdmdModel};
pub use esn::{
    draw_input_matrix, esn_fit, esn_fit_augmented, esn_fit_many, esn_init, AugmentedEsnModel, EsnModel,
    EsnPredictor, Reservoir, ReservoirSpec, RidgeAccumulator, SparseMatrix,
};
pub use perturbed::PerturbedModel;
pub use pod::{pod_fit, PodBasis, PodModel};

#[derive(Debug, thiserror::Error)]
pub enum SurrogateError {
    #[error("insufficient data for control value {j}: bucket sizes {sizes:?}")]
    InsufficientData { j: usize, sizes: Vec<usize> },
    #[error("reservoir draw with seed {seed} has spectral radius zero; try another seed or lower sparsity")]
    SpectralRadiusZero { seed: u64 },
    #[error("reservoir state not initialized; synchronize on observed data first")]
    ReservoirNotInitialized,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("model file {path}: {reason}")]
    Persistence { path: String, reason: String },
}

/// One-step predictors for all control values of a quantized set.
pub trait Surrogate: Send + Sync {
    /// Observable dimension `q`.
    fn obs_dim(&self) -> usize;
    /// Number of control values `m`.
    fn n_controls(&self) -> usize;
    /// Sampling interval the predictors were built for.
    fn dt(&self) -> f64;
    /// Length of the hidden state carried between steps.
    fn hidden_dim(&self) -> usize {
        0
    }
    /// Writes `Phi_j(z)` into `out[j*q..(j+1)*q]` for every `j` and advances
    /// `hidden` by one step.
    fn images(&self, z: &[f64], hidden: &mut [f64], out: &mut [f64]) -> Result<(), SurrogateError>;
    /// Sets the hidden state from observed history, oldest first, ending with
    /// the current observable (which is not consumed).
    fn synchronize(&self, _window: &[DVector<f64>], _hidden: &mut [f64]) {}
}

/// Serializable container over all backends.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateModel {
    Edmd(EdmdModel),
    Esn(EsnModel),
    Pod(PodModel),
    Perturbed(PerturbedModel),
}

impl SurrogateModel {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Edmd(_) => "edmd",
            Self::Esn(_) => "esn",
            Self::Pod(_) => "pod",
            Self::Perturbed(_) => "perturbed",
        }
    }

    fn inner(&self) -> &dyn Surrogate {
        match self {
            Self::Edmd(m) => m,
            Self::Esn(m) => m,
            Self::Pod(m) => m,
            Self::Perturbed(m) => m,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        let err = |reason: String| SurrogateError::Persistence {
            path: path.display().to_string(),
            reason,
        };
        let text = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let err = |reason: String| SurrogateError::Persistence {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

impl Surrogate for SurrogateModel {
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn n_controls(&self) -> usize {
        self.inner().n_controls()
    }
    fn dt(&self) -> f64 {
        self.inner().dt()
    }
    fn hidden_dim(&self) -> usize {
        self.inner().hidden_dim()
    }
    fn images(&self, z: &[f64], hidden: &mut [f64], out: &mut [f64]) -> Result<(), SurrogateError> {
        self.inner().images(z, hidden, out)
    }
    fn synchronize(&self, window: &[DVector<f64>], hidden: &mut [f64]) {
        self.inner().synchronize(window, hidden)
    }
}

/// How each step of a rollout selects among the control values.
#[derive(Clone, Copy, Debug)]
pub enum Schedule<'a> {
    /// One control index per step.
    Indices(&'a [usize]),
    /// Row-major `p x m` weights, one simplex row per step.
    Weights(&'a [f64]),
}

impl Schedule<'_> {
    fn len(&self, m: usize) -> usize {
        match self {
            Schedule::Indices(ix) => ix.len(),
            Schedule::Weights(w) => w.len() / m,
        }
    }
}

/// Rolls the ensemble forward from `z0`, returning `z_1, ..., z_p`.
/// `hidden` is advanced in place.
pub fn multi_step_predict(
    model: &dyn Surrogate,
    schedule: Schedule<'_>,
    z0: &[f64],
    hidden: &mut [f64],
) -> Result<Vec<DVector<f64>>, SurrogateError> {
    let (q, m) = (model.obs_dim(), model.n_controls());
    if z0.len() != q {
        return Err(SurrogateError::Dimension(format!("z0 has length {}, expected {q}", z0.len())));
    }
    if let Schedule::Weights(w) = schedule {
        if w.len() % m != 0 {
            return Err(SurrogateError::Dimension(format!("{} weights for m = {m}", w.len())));
        }
    }
    let p = schedule.len(m);
    let mut images = vec![0.0; q * m];
    let mut z = z0.to_vec();
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        model.images(&z, hidden, &mut images)?;
        match schedule {
            Schedule::Indices(ix) => {
                let j = ix[i];
                if j >= m {
                    return Err(SurrogateError::Dimension(format!("control index {j} >= m = {m}")));
                }
                z.copy_from_slice(&images[j * q..(j + 1) * q]);
            }
            Schedule::Weights(w) => combine(&images, &w[i * m..(i + 1) * m], &mut z),
        }
        out.push(DVector::from_column_slice(&z));
    }
    Ok(out)
}

/// `out = sum_j w_j images[j]`.
pub(crate) fn combine(images: &[f64], w: &[f64], out: &mut [f64]) {
    let q = out.len();
    out.fill(0.0);
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            for (o, x) in out.iter_mut().zip(&images[j * q..(j + 1) * q]) {
                *o += wj * x;
            }
        }
    }
}

/// Relative one-step error `||Phi(Z) - Z'||_F / ||Z'||_F` over the labeled
/// transitions of a trajectory. Recurrent models are driven by the observed
/// data (teacher forcing); the first `washout` transitions only drive them.
pub fn one_step_error(
    model: &dyn Surrogate,
    traj: &crate::datagen::LabeledTrajectory,
    washout: usize,
) -> Result<f64, SurrogateError> {
    let (q, m) = (model.obs_dim(), model.n_controls());
    let mut hidden = vec![0.0; model.hidden_dim()];
    let mut images = vec![0.0; q * m];
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &j) in traj.control_indices.iter().enumerate() {
        model.images(traj.observables[i].as_slice(), &mut hidden, &mut images)?;
        if i < washout {
            continue;
        }
        let next = &traj.observables[i + 1];
        let pred = &images[j * q..(j + 1) * q];
        num += pred.iter().zip(next.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        den += next.norm_squared();
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}
