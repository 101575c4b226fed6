use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{matrix_serde, Surrogate, SurrogateError};
use crate::dynamics::{rk4_inplace, Dynamics, Rk4Scratch, SystemModel, SystemSpec};
use crate::quantization::QuantizedControlSet;

/// Orthonormal POD basis with its singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    pub basis: DMatrix<f64>,
    /// All singular values of the snapshot matrix, descending.
    pub singular_values: Vec<f64>,
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Retained energy `sum_{i<=l} s_i^2 / sum_i s_i^2`.
    pub fn energy(&self) -> f64 {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return 1.0;
        }
        self.singular_values[..self.rank()].iter().map(|s| s * s).sum::<f64>() / total
    }

    /// `||Y - Psi Psi^T Y||_F`.
    pub fn projection_residual(&self, snapshots: &DMatrix<f64>) -> f64 {
        let coeffs = self.basis.tr_mul(snapshots);
        (snapshots - &self.basis * coeffs).norm()
    }
}

/// First `ell` left singular vectors of the snapshot matrix (one snapshot
/// per column, no mean subtraction).
pub fn pod_fit(snapshots: &DMatrix<f64>, ell: usize) -> Result<PodBasis, SurrogateError> {
    let (nx, n) = snapshots.shape();
    if ell == 0 || ell > nx.min(n) {
        return Err(SurrogateError::InvalidParam(format!(
            "basis size {ell} not in 1..={} for {nx}x{n} snapshots",
            nx.min(n)
        )));
    }
    let svd = snapshots.clone().svd(true, false);
    let u = svd.u.expect("requested left singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if singular_values[ell - 1] < 1e-12 * singular_values[0] {
        log::warn!(
            "POD basis of size {ell} is rank deficient (s_l / s_1 = {:e})",
            singular_values[ell - 1] / singular_values[0]
        );
    }
    let basis = DMatrix::from_fn(nx, ell, |i, c| u[(i, order[c])]);
    Ok(PodBasis { basis, singular_values })
}

/// Galerkin projection of a semi-discrete plant, `z' = Psi^T g_h(Psi z, u)`.
#[derive(Debug)]
struct Reduced<'a> {
    basis: &'a DMatrix<f64>,
    full: &'a SystemModel,
}

impl Dynamics for Reduced<'_> {
    fn name(&self) -> &str {
        "pod_reduced"
    }
    fn state_dim(&self) -> usize {
        self.basis.ncols()
    }
    fn control_dim(&self) -> usize {
        self.full.control_dim()
    }
    fn rhs(&self, z: &[f64], u: &[f64], _lagged: Option<&[f64]>, dz: &mut [f64]) {
        let nx = self.basis.nrows();
        let mut y = vec![0.0; nx];
        for (c, &zc) in z.iter().enumerate() {
            for (yi, b) in y.iter_mut().zip(self.basis.column(c).iter()) {
                *yi += b * zc;
            }
        }
        let mut g = vec![0.0; nx];
        self.full.rhs_into(&y, u, None, &mut g);
        for (c, d) in dz.iter_mut().enumerate() {
            *d = self.basis.column(c).iter().zip(&g).map(|(b, x)| b * x).sum();
        }
    }
}

/// Reduced-order model: one Galerkin system per control value, integrated
/// with RK4 over the sampling interval.
#[derive(Clone, Debug)]
pub struct PodModel {
    basis: DMatrix<f64>,
    system: SystemModel,
    controls: Vec<DVector<f64>>,
    dt: f64,
    substeps: usize,
}

#[derive(Serialize, Deserialize)]
struct PodRepr {
    #[serde(with = "matrix_serde")]
    basis: DMatrix<f64>,
    system: SystemSpec,
    controls: Vec<Vec<f64>>,
    dt: f64,
    substeps: usize,
}

impl Serialize for PodModel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let system = self
            .system
            .spec()
            .cloned()
            .ok_or_else(|| serde::ser::Error::custom("POD model over a non-builtin plant cannot be saved"))?;
        PodRepr {
            basis: self.basis.clone(),
            system,
            controls: self.controls.iter().map(|u| u.as_slice().to_vec()).collect(),
            dt: self.dt,
            substeps: self.substeps,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PodModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PodRepr::deserialize(d)?;
        let system = SystemModel::from_spec(&r.system).map_err(serde::de::Error::custom)?;
        Ok(Self {
            basis: r.basis,
            system,
            controls: r.controls.into_iter().map(DVector::from_vec).collect(),
            dt: r.dt,
            substeps: r.substeps,
        })
    }
}

impl PodModel {
    pub fn new(
        basis: DMatrix<f64>,
        system: SystemModel,
        v: &QuantizedControlSet,
        dt: f64,
        substeps: usize,
    ) -> Result<Self, SurrogateError> {
        if basis.nrows() != system.state_dim() {
            return Err(SurrogateError::Dimension(format!(
                "basis has {} rows, plant state has {}",
                basis.nrows(),
                system.state_dim()
            )));
        }
        if system.delay().is_some() {
            return Err(SurrogateError::InvalidParam("POD of delay systems is not supported".into()));
        }
        Ok(Self {
            basis,
            system,
            controls: v.points().to_vec(),
            dt,
            substeps: substeps.max(1),
        })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `Phi_j(z)` for a single control value.
    pub fn predict(&self, j: usize, z: &[f64]) -> Result<DVector<f64>, SurrogateError> {
        let mut out = z.to_vec();
        self.advance(j, &mut out, &mut Rk4Scratch::new(z.len()))?;
        Ok(DVector::from_vec(out))
    }

    fn advance(&self, j: usize, z: &mut [f64], scratch: &mut Rk4Scratch) -> Result<(), SurrogateError> {
        let reduced = Reduced {
            basis: &self.basis,
            full: &self.system,
        };
        let h = self.dt / self.substeps as f64;
        for k in 0..self.substeps {
            if !rk4_inplace(&reduced, 0.0, z, self.controls[j].as_slice(), h, None, scratch) {
                return Err(crate::dynamics::DynamicsError::IntegrationDiverged {
                    step: k,
                    time: k as f64 * h,
                }
                .into());
            }
        }
        Ok(())
    }
}

impl Surrogate for PodModel {
    fn obs_dim(&self) -> usize {
        self.basis.ncols()
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
        for j in 0..self.controls.len() {
            let slot = &mut out[j * q..(j + 1) * q];
            slot.copy_from_slice(z);
            self.advance(j, slot, &mut scratch)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{builtin_system, Plant};
    use crate::quantization::{make_star_set, BoxControlSet};
    use std::collections::BTreeMap;

    fn burgers(nx: usize) -> SystemModel {
        let mut p = BTreeMap::new();
        p.insert("nx".to_string(), nx as f64);
        builtin_system("burgers1d", &p).unwrap()
    }

    #[test]
    fn single_direction_snapshots() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let snaps = DMatrix::from_fn(3, 5, |i, c| v[i] * (c + 1) as f64);
        let b = pod_fit(&snaps, 1).unwrap();
        let dir = b.basis.column(0).abs();
        assert!((dir - v.abs() / 3.0).amax() < 1e-12);
        assert!((b.energy() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_reconstructs_and_is_orthonormal() {
        let snaps = DMatrix::from_fn(6, 10, |i, c| ((i * 3 + c * 5) as f64).sin());
        let rank = snaps.rank(1e-10);
        let b = pod_fit(&snaps, rank).unwrap();
        assert!(b.projection_residual(&snaps) < 1e-10);
        let gram = b.basis.tr_mul(&b.basis);
        assert!((gram - DMatrix::identity(rank, rank)).amax() < 1e-10);
        let mut last = f64::INFINITY;
        for l in 1..=rank {
            let r = pod_fit(&snaps, l).unwrap().projection_residual(&snaps);
            assert!(r <= last + 1e-12);
            last = r;
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let sys = burgers(20);
        let v = make_star_set(&BoxControlSet::uniform(5, -1.0, 1.0).unwrap()).unwrap();
        let snaps = DMatrix::from_fn(20, 30, |i, c| ((i + 1) as f64 * (c + 1) as f64 * 0.1).sin());
        let b = pod_fit(&snaps, 4).unwrap();
        let m = PodModel::new(b.basis, sys, &v, 0.025, 2).unwrap();
        let z = m.predict(0, &[0.0; 4]).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 4]);
    }

    #[test]
    fn square_basis_matches_full_plant() {
        let nx = 12;
        let sys = burgers(nx);
        let v = make_star_set(&BoxControlSet::uniform(5, -1.0, 1.0).unwrap()).unwrap();
        let snaps = DMatrix::from_fn(nx, 40, |i, c| ((i + 1) as f64 * 0.7 + c as f64 * 0.31).sin());
        let b = pod_fit(&snaps, nx).unwrap();
        let m = PodModel::new(b.basis.clone(), sys.clone(), &v, 0.025, 5).unwrap();
        let y0: Vec<f64> = (0..nx).map(|i| (i as f64 * 0.5).cos() * 0.5).collect();
        let z0 = b.basis.tr_mul(&DVector::from_column_slice(&y0));
        for j in [0, 3, 8] {
            let z1 = m.predict(j, z0.as_slice()).unwrap();
            let mut plant = Plant::new(sys.clone(), 0.0, &y0).unwrap();
            plant.advance(v.point(j).as_slice(), 0.025, 5).unwrap();
            let y1 = &b.basis * z1;
            let diff = (y1 - DVector::from_column_slice(plant.state())).amax();
            assert!(diff < 1e-8, "j={j} diff={diff}");
        }
    }
}
