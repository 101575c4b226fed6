use nalgebra::DVector;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Surrogate, SurrogateError};
use crate::dynamics::{rk4_inplace, Dynamics, DynamicsError, Rk4Scratch, SystemModel, SystemSpec};
use crate::quantization::QuantizedControlSet;

/// Plant right-hand side plus a constant offset.
#[derive(Debug)]
struct Offset {
    base: SystemModel,
    offset: Vec<f64>,
}

impl Dynamics for Offset {
    fn name(&self) -> &str {
        self.base.name()
    }
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.base.control_dim()
    }
    fn rhs(&self, y: &[f64], u: &[f64], lagged: Option<&[f64]>, dy: &mut [f64]) {
        self.base.rhs_into(y, u, lagged, dy);
        for (d, o) in dy.iter_mut().zip(&self.offset) {
            *d += o;
        }
    }
}

/// Analytic surrogate: the plant with an additive constant perturbation,
/// observed through the full state.
#[derive(Clone, Debug)]
pub struct PerturbedModel {
    base: SystemModel,
    offset: Vec<f64>,
    perturbed: SystemModel,
    controls: Vec<DVector<f64>>,
    dt: f64,
    substeps: usize,
}

#[derive(Serialize, Deserialize)]
struct PerturbedRepr {
    system: SystemSpec,
    offset: Vec<f64>,
    controls: Vec<Vec<f64>>,
    dt: f64,
    substeps: usize,
}

impl Serialize for PerturbedModel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let system = self
            .base
            .spec()
            .cloned()
            .ok_or_else(|| serde::ser::Error::custom("perturbed model over a non-builtin plant cannot be saved"))?;
        PerturbedRepr {
            system,
            offset: self.offset.clone(),
            controls: self.controls.iter().map(|u| u.as_slice().to_vec()).collect(),
            dt: self.dt,
            substeps: self.substeps,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PerturbedModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PerturbedRepr::deserialize(d)?;
        let base = SystemModel::from_spec(&r.system).map_err(serde::de::Error::custom)?;
        let controls: Vec<DVector<f64>> = r.controls.into_iter().map(DVector::from_vec).collect();
        Self::build(base, r.offset, controls, r.dt, r.substeps).map_err(serde::de::Error::custom)
    }
}

impl PerturbedModel {
    pub fn new(
        base: SystemModel,
        offset: Vec<f64>,
        v: &QuantizedControlSet,
        dt: f64,
        substeps: usize,
    ) -> Result<Self, SurrogateError> {
        Self::build(base, offset, v.points().to_vec(), dt, substeps)
    }

    fn build(
        base: SystemModel,
        offset: Vec<f64>,
        controls: Vec<DVector<f64>>,
        dt: f64,
        substeps: usize,
    ) -> Result<Self, SurrogateError> {
        if offset.len() != base.state_dim() {
            return Err(SurrogateError::Dimension(format!(
                "offset has length {}, state has {}",
                offset.len(),
                base.state_dim()
            )));
        }
        if base.delay().is_some() {
            return Err(SurrogateError::InvalidParam("perturbed delay systems are not supported".into()));
        }
        let perturbed = SystemModel::new(Offset {
            base: base.clone(),
            offset: offset.clone(),
        });
        Ok(Self {
            base,
            offset,
            perturbed,
            controls,
            dt,
            substeps: substeps.max(1),
        })
    }

    /// The perturbed right-hand side as a plant model.
    pub fn perturbed_system(&self) -> &SystemModel {
        &self.perturbed
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    fn advance(&self, u: &[f64], y: &mut [f64], scratch: &mut Rk4Scratch) -> Result<(), SurrogateError> {
        let h = self.dt / self.substeps as f64;
        for k in 0..self.substeps {
            if !rk4_inplace(self.perturbed.dynamics(), k as f64 * h, y, u, h, None, scratch) {
                return Err(DynamicsError::IntegrationDiverged {
                    step: k,
                    time: k as f64 * h,
                }
                .into());
            }
        }
        Ok(())
    }

    /// Flow of the perturbed system under an arbitrary control.
    pub fn flow(&self, y: &[f64], u: &[f64]) -> Result<DVector<f64>, SurrogateError> {
        let mut out = y.to_vec();
        self.advance(u, &mut out, &mut Rk4Scratch::new(y.len()))?;
        Ok(DVector::from_vec(out))
    }
}

impl Surrogate for PerturbedModel {
    fn obs_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn n_controls(&self) -> usize {
        self.controls.len()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn images(&self, z: &[f64], _hidden: &mut [f64], out: &mut [f64]) -> Result<(), SurrogateError> {
        let q = z.len();
        let mut scratch = Rk4Scratch::new(q);
        for (j, u) in self.controls.iter().enumerate() {
            let slot = &mut out[j * q..(j + 1) * q];
            slot.copy_from_slice(z);
            self.advance(u.as_slice(), slot, &mut scratch)?;
        }
        Ok(())
    }
}
