//! Training data: random piecewise-constant actuation with values from `V`,
//! observables, per-control snapshot pairs, and CSV persistence.

mod io;
mod observable;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsError, Plant, SystemModel};
use crate::quantization::QuantizedControlSet;

pub use io::{load_dataset, load_metadata, metadata_path, save_dataset, save_metadata, DatasetMetadata};
pub use observable::ObservableSpec;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("sequence too short: need {needed} states, got {got}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("invalid observable: {0}")]
    InvalidObservable(String),
    #[error("invalid duration: {0}")]
    InvalidDuration(String),
    #[error("inconsistent trajectory: {0}")]
    Inconsistent(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch at line {line}: {reason}")]
    SchemaMismatch { line: u64, reason: String },
    #[error("metadata error: {0}")]
    Metadata(String),
}

/// Observables along a trajectory, each transition tagged with the index
/// (0-based) of the control value active on it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTrajectory {
    pub obs_dim: usize,
    pub control_dim: usize,
    pub times: Vec<f64>,
    pub observables: Vec<DVector<f64>>,
    pub control_indices: Vec<usize>,
    pub controls: Vec<DVector<f64>>,
}

impl LabeledTrajectory {
    pub fn empty(obs_dim: usize, control_dim: usize) -> Self {
        Self {
            obs_dim,
            control_dim,
            times: Vec::new(),
            observables: Vec::new(),
            control_indices: Vec::new(),
            controls: Vec::new(),
        }
    }

    /// Number of stored states.
    pub fn len(&self) -> usize {
        self.observables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observables.is_empty()
    }

    /// Number of labeled transitions.
    pub fn transitions(&self) -> usize {
        self.control_indices.len()
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let n = self.observables.len();
        let bad = |msg: String| Err(DatagenError::Inconsistent(msg));
        if self.times.len() != n {
            return bad(format!("{} times for {n} states", self.times.len()));
        }
        let expect_labels = n.saturating_sub(1);
        if self.control_indices.len() != expect_labels || self.controls.len() != expect_labels {
            return bad(format!(
                "{} labels and {} controls for {n} states",
                self.control_indices.len(),
                self.controls.len()
            ));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("times not increasing".into());
        }
        if let Some(z) = self.observables.iter().find(|z| z.len() != self.obs_dim) {
            return bad(format!("observable of length {} (expected {})", z.len(), self.obs_dim));
        }
        if let Some(u) = self.controls.iter().find(|u| u.len() != self.control_dim) {
            return bad(format!("control of length {} (expected {})", u.len(), self.control_dim));
        }
        Ok(())
    }

    /// Re-expresses the trajectory through `spec`. Delay embeddings drop the
    /// leading states (and their labels) they consume.
    pub fn map_observable(&self, spec: &ObservableSpec) -> Result<Self, DatagenError> {
        let z = spec.apply(&self.observables)?;
        let skip = self.len() - z.len();
        Ok(Self {
            obs_dim: spec.output_dim(self.obs_dim),
            control_dim: self.control_dim,
            times: self.times[skip..].to_vec(),
            observables: z,
            control_indices: self.control_indices[skip..].to_vec(),
            controls: self.controls[skip..].to_vec(),
        })
    }

    /// States `start..=end` with the transitions between them.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end < self.len(), "slice {start}..={end} of {}", self.len());
        Self {
            obs_dim: self.obs_dim,
            control_dim: self.control_dim,
            times: self.times[start..=end].to_vec(),
            observables: self.observables[start..=end].to_vec(),
            control_indices: self.control_indices[start..end].to_vec(),
            controls: self.controls[start..end].to_vec(),
        }
    }

    /// Splits off the final `fraction` of transitions as validation data; the
    /// boundary state belongs to both parts.
    pub fn split_holdout(&self, fraction: f64) -> (Self, Self) {
        let n = self.transitions();
        let hold = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let cut = n - hold;
        (self.slice(0, cut), self.slice(cut, n))
    }
}

/// One-step pairs `(z_i, z_{i+1})` for one control value, stored as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub inputs: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
}

impl Bucket {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }
}

/// Snapshot pairs grouped by control index.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotPairs {
    pub buckets: Vec<Bucket>,
}

impl SnapshotPairs {
    pub fn m(&self) -> usize {
        self.buckets.len()
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().map(Bucket::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.buckets.iter().map(Bucket::len).collect()
    }
}

/// Groups the transitions of one or more trajectories by control index,
/// preserving order. Empty buckets are reported with a warning.
pub fn partition_by_control(trajectories: &[&LabeledTrajectory], m: usize) -> SnapshotPairs {
    let q = trajectories.first().map_or(0, |t| t.obs_dim);
    let mut cols: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); m];
    for traj in trajectories {
        for (i, &j) in traj.control_indices.iter().enumerate() {
            assert!(j < m, "control index {j} out of range for m = {m}");
            cols[j].0.extend_from_slice(traj.observables[i].as_slice());
            cols[j].1.extend_from_slice(traj.observables[i + 1].as_slice());
        }
    }
    let buckets: Vec<Bucket> = cols
        .into_iter()
        .enumerate()
        .map(|(j, (a, b))| {
            let n = if q == 0 { 0 } else { a.len() / q };
            if n == 0 {
                log::warn!("control value {} received no training pairs", j + 1);
            }
            Bucket {
                inputs: DMatrix::from_vec(q, n, a),
                outputs: DMatrix::from_vec(q, n, b),
            }
        })
        .collect();
    SnapshotPairs { buckets }
}

/// Settings for [`generate_training_data`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    /// Sampling interval; the control is held over each interval.
    pub dt_model: f64,
    pub t_train: f64,
    /// RK4 steps per sampling interval.
    pub substeps: usize,
    pub y0: Vec<f64>,
    pub seed: u64,
}

/// Number of whole steps of length `dt` in `t`, if `dt` divides `t`.
pub fn step_count(t: f64, dt: f64) -> Result<usize, DatagenError> {
    if !(dt > 0.0 && t > 0.0 && dt.is_finite() && t.is_finite()) {
        return Err(DatagenError::InvalidDuration(format!("duration {t} with step {dt}")));
    }
    let ratio = t / dt;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) || n < 1.0 {
        return Err(DatagenError::InvalidDuration(format!("{dt} does not divide {t}")));
    }
    Ok(n as usize)
}

/// Simulates the plant under controls drawn i.i.d. uniformly from `V`, one
/// per sampling interval, and records full states on the sampling grid.
pub fn generate_training_data(
    system: &SystemModel,
    v: &QuantizedControlSet,
    settings: &GenerationSettings,
) -> Result<LabeledTrajectory, DatagenError> {
    let steps = step_count(settings.t_train, settings.dt_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let labels: Vec<usize> = (0..steps).map(|_| rng.random_range(0..v.len())).collect();
    simulate_labeled(system, v, settings, &labels)
}

/// Simulates the plant under a given label sequence.
pub fn simulate_labeled(
    system: &SystemModel,
    v: &QuantizedControlSet,
    settings: &GenerationSettings,
    labels: &[usize],
) -> Result<LabeledTrajectory, DatagenError> {
    let mut plant = Plant::new(system.clone(), 0.0, &settings.y0)?;
    let mut traj = LabeledTrajectory::empty(system.state_dim(), system.control_dim());
    traj.times.push(0.0);
    traj.observables.push(DVector::from_column_slice(&settings.y0));
    for (i, &j) in labels.iter().enumerate() {
        let u = v.point(j);
        plant.advance(u.as_slice(), settings.dt_model, settings.substeps)?;
        traj.times.push((i + 1) as f64 * settings.dt_model);
        traj.observables.push(DVector::from_column_slice(plant.state()));
        traj.control_indices.push(j);
        traj.controls.push(u.clone());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin_system;
    use crate::quantization::{make_vertex_set, BoxControlSet};
    use std::collections::BTreeMap;

    fn lorenz_setup(t_train: f64) -> (SystemModel, QuantizedControlSet, GenerationSettings) {
        let sys = builtin_system("lorenz_affine", &BTreeMap::new()).unwrap();
        let v = make_vertex_set(&BoxControlSet::uniform(1, -50.0, 50.0).unwrap()).unwrap();
        let settings = GenerationSettings {
            dt_model: 0.05,
            t_train,
            substeps: 10,
            y0: vec![1.0, 1.0, 1.0],
            seed: 7,
        };
        (sys, v, settings)
    }

    fn labeled(labels: Vec<usize>) -> LabeledTrajectory {
        let n = labels.len() + 1;
        LabeledTrajectory {
            obs_dim: 1,
            control_dim: 1,
            times: (0..n).map(|i| i as f64).collect(),
            observables: (0..n).map(|i| DVector::from_element(1, i as f64)).collect(),
            controls: labels.iter().map(|&j| DVector::from_element(1, j as f64)).collect(),
            control_indices: labels,
        }
    }

    #[test]
    fn lorenz_sample_count() {
        let (sys, v, settings) = lorenz_setup(100.0);
        let traj = generate_training_data(&sys, &v, &settings).unwrap();
        assert_eq!(traj.transitions(), 2000);
        assert_eq!(traj.len(), 2001);
        traj.validate().unwrap();
    }

    #[test]
    fn single_interval() {
        let (sys, v, settings) = lorenz_setup(0.05);
        let traj = generate_training_data(&sys, &v, &settings).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.transitions(), 1);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (sys, v, settings) = lorenz_setup(5.0);
        let a = generate_training_data(&sys, &v, &settings).unwrap();
        let b = generate_training_data(&sys, &v, &settings).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_dividing_step_is_rejected() {
        assert!(step_count(1.0, 0.3).is_err());
        assert!(step_count(0.0, 0.1).is_err());
        assert_eq!(step_count(100.0, 0.05).unwrap(), 2000);
    }

    #[test]
    fn partition_counts() {
        let t = labeled(vec![0, 0, 0, 0]);
        let pairs = partition_by_control(&[&t], 2);
        assert_eq!(pairs.sizes(), vec![4, 0]);

        let t = labeled(vec![0, 1, 0, 1]);
        let pairs = partition_by_control(&[&t], 2);
        assert_eq!(pairs.sizes(), vec![2, 2]);
        assert_eq!(pairs.buckets[1].inputs[(0, 0)], 1.0);
        assert_eq!(pairs.buckets[1].outputs[(0, 1)], 4.0);
    }

    #[test]
    fn partition_is_a_partition() {
        let (sys, v, settings) = lorenz_setup(10.0);
        let traj = generate_training_data(&sys, &v, &settings).unwrap();
        let pairs = partition_by_control(&[&traj], 2);
        assert_eq!(pairs.total(), traj.len() - 1);
    }

    #[test]
    fn holdout_split_shares_boundary() {
        let t = labeled(vec![0; 10]);
        let (train, val) = t.split_holdout(0.1);
        assert_eq!(train.transitions(), 9);
        assert_eq!(val.transitions(), 1);
        assert_eq!(train.observables.last(), val.observables.first());
    }
}
