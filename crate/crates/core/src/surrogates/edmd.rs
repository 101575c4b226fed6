use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{matrix_serde, DictionarySpec, Monomials, Surrogate, SurrogateError};
use crate::datagen::SnapshotPairs;

const PINV_CUTOFF: f64 = 1e-10;

/// Koopman matrices `K_j` on a monomial dictionary, one per control value.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "EdmdRepr", into = "EdmdRepr")]
pub struct EdmdModel {
    dictionary: DictionarySpec,
    obs_dim: usize,
    dt: f64,
    koopman: Vec<DMatrix<f64>>,
    propagate_lifted: bool,
    monomials: Monomials,
    // rows of K_j^T that reproduce the linear features, row-major q x k per j
    readout: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EdmdRepr {
    dictionary: DictionarySpec,
    obs_dim: usize,
    dt: f64,
    #[serde(with = "matrix_serde::vec")]
    koopman: Vec<DMatrix<f64>>,
    #[serde(default)]
    propagate_lifted: bool,
}

impl TryFrom<EdmdRepr> for EdmdModel {
    type Error = SurrogateError;
    fn try_from(r: EdmdRepr) -> Result<Self, Self::Error> {
        let mut m = Self::new(r.dictionary, r.obs_dim, r.dt, r.koopman)?;
        m.propagate_lifted = r.propagate_lifted;
        Ok(m)
    }
}

impl From<EdmdModel> for EdmdRepr {
    fn from(m: EdmdModel) -> Self {
        Self {
            dictionary: m.dictionary,
            obs_dim: m.obs_dim,
            dt: m.dt,
            koopman: m.koopman,
            propagate_lifted: m.propagate_lifted,
        }
    }
}

impl EdmdModel {
    pub fn new(
        dictionary: DictionarySpec,
        obs_dim: usize,
        dt: f64,
        koopman: Vec<DMatrix<f64>>,
    ) -> Result<Self, SurrogateError> {
        if dictionary.max_degree == 0 {
            return Err(SurrogateError::InvalidParam(
                "dictionary needs degree >= 1 to read out the observables".into(),
            ));
        }
        let monomials = Monomials::new(obs_dim, &dictionary);
        let k = monomials.len();
        if let Some(bad) = koopman.iter().find(|m| m.nrows() != k || m.ncols() != k) {
            return Err(SurrogateError::Dimension(format!(
                "Koopman matrix {}x{}, dictionary has {k} features",
                bad.nrows(),
                bad.ncols()
            )));
        }
        let lin = monomials.linear_indices();
        let readout = koopman
            .iter()
            .map(|kmat| {
                // (K^T)[r, c] = K[c, r]
                lin.iter().flat_map(|&r| (0..k).map(move |c| kmat[(c, r)])).collect()
            })
            .collect();
        Ok(Self {
            dictionary,
            obs_dim,
            dt,
            koopman,
            propagate_lifted: false,
            monomials,
            readout,
        })
    }

    pub fn dictionary(&self) -> &DictionarySpec {
        &self.dictionary
    }

    pub fn koopman(&self, j: usize) -> &DMatrix<f64> {
        &self.koopman[j]
    }

    pub fn propagate_lifted(&self) -> bool {
        self.propagate_lifted
    }

    pub fn set_propagate_lifted(&mut self, on: bool) {
        self.propagate_lifted = on;
    }

    /// `Phi_j(z)`: lift, apply `K_j^T`, read out the linear features.
    pub fn predict(&self, j: usize, z: &[f64]) -> DVector<f64> {
        let psi = self.monomials.eval(z);
        let mut out = vec![0.0; self.obs_dim];
        self.readout_into(j, &psi, &mut out);
        DVector::from_vec(out)
    }

    fn readout_into(&self, j: usize, psi: &[f64], out: &mut [f64]) {
        let k = psi.len();
        let c = &self.readout[j];
        for (r, o) in out.iter_mut().enumerate() {
            *o = c[r * k..(r + 1) * k].iter().zip(psi).map(|(a, b)| a * b).sum();
        }
    }

    /// Rollout that propagates the lifted state `psi_{i+1} = K_j^T psi_i`
    /// instead of re-lifting, reading out the observables at every step.
    pub fn rollout_lifted(&self, indices: &[usize], z0: &[f64]) -> Vec<DVector<f64>> {
        let lin = self.monomials.linear_indices();
        let mut psi = DVector::from_vec(self.monomials.eval(z0));
        indices
            .iter()
            .map(|&j| {
                psi = self.koopman[j].tr_mul(&psi);
                DVector::from_iterator(self.obs_dim, lin.iter().map(|&i| psi[i]))
            })
            .collect()
    }
}

impl Surrogate for EdmdModel {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn n_controls(&self) -> usize {
        self.koopman.len()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn images(&self, z: &[f64], _hidden: &mut [f64], out: &mut [f64]) -> Result<(), SurrogateError> {
        let k = self.monomials.len();
        let mut buf = [0.0; 64];
        let mut psi_store = [0.0; 64];
        let mut heap;
        let (buf, psi): (&mut [f64], &mut [f64]) = if self.monomials.buffer_len() <= 64 {
            (&mut buf[..self.monomials.buffer_len()], &mut psi_store[..k])
        } else {
            heap = (vec![0.0; self.monomials.buffer_len()], vec![0.0; k]);
            (&mut heap.0[..], &mut heap.1[..])
        };
        self.monomials.eval_into(z, buf, psi);
        let q = self.obs_dim;
        for j in 0..self.koopman.len() {
            self.readout_into(j, psi, &mut out[j * q..(j + 1) * q]);
        }
        Ok(())
    }
}

/// Least-squares fit `K_j^T = Psi_Z' Psi_Z^+` per control value, with an SVD
/// pseudoinverse cut off at `1e-10 sigma_max`.
pub fn edmd_fit(pairs: &SnapshotPairs, spec: &DictionarySpec, dt: f64) -> Result<EdmdModel, SurrogateError> {
    let sizes = pairs.sizes();
    let q = pairs.buckets.first().map_or(0, |b| b.inputs.nrows());
    if q == 0 {
        return Err(SurrogateError::Dimension("empty observable".into()));
    }
    let monomials = Monomials::new(q, spec);
    let k = monomials.len();
    let mut koopman = Vec::with_capacity(pairs.m());
    for (j, bucket) in pairs.buckets.iter().enumerate() {
        let n = bucket.len();
        if n == 0 {
            return Err(SurrogateError::InsufficientData { j: j + 1, sizes });
        }
        if n < k {
            log::warn!("control value {}: {n} pairs for {k} features, fit is underdetermined", j + 1);
        }
        let lift = |cols: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(k, n);
            let mut buf = vec![0.0; monomials.buffer_len()];
            let mut psi = vec![0.0; k];
            for c in 0..n {
                let z: Vec<f64> = cols.column(c).iter().copied().collect();
                monomials.eval_into(&z, &mut buf, &mut psi);
                out.column_mut(c).copy_from_slice(&psi);
            }
            out
        };
        let psi_z = lift(&bucket.inputs);
        let psi_next = lift(&bucket.outputs);
        let svd = psi_z.svd(true, true);
        let smax = svd.singular_values.max();
        let pinv = svd
            .pseudo_inverse(PINV_CUTOFF * smax)
            .map_err(|e| SurrogateError::InvalidParam(e.to_string()))?;
        let kt = psi_next * pinv;
        koopman.push(kt.transpose());
    }
    EdmdModel::new(spec.clone(), q, dt, koopman)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Bucket;

    fn linear_pairs(a: &DMatrix<f64>, n: usize) -> SnapshotPairs {
        let inputs = DMatrix::from_fn(a.nrows(), n, |i, c| ((i * i * 7 + c * 3 + i * c) as f64 * 0.37).sin());
        let outputs = a * &inputs;
        SnapshotPairs {
            buckets: vec![Bucket { inputs, outputs }],
        }
    }

    #[test]
    fn identity_koopman_is_identity_map() {
        let spec = DictionarySpec::new(2);
        let k = Monomials::new(2, &spec).len();
        let m = EdmdModel::new(spec, 2, 0.1, vec![DMatrix::identity(k, k)]).unwrap();
        assert_eq!(m.predict(0, &[0.3, -2.0]).as_slice(), &[0.3, -2.0]);
    }

    #[test]
    fn constant_data_is_fixed_point() {
        let c = DMatrix::from_fn(2, 30, |i, _| if i == 0 { 1.5 } else { -0.5 });
        let pairs = SnapshotPairs {
            buckets: vec![Bucket {
                inputs: c.clone(),
                outputs: c,
            }],
        };
        let m = edmd_fit(&pairs, &DictionarySpec::new(2), 0.1).unwrap();
        let z = m.predict(0, &[1.5, -0.5]);
        assert!((z[0] - 1.5).abs() < 1e-10 && (z[1] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn recovers_linear_map() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, -0.2, 0.7, 0.1, 0.0, 0.3, 0.4]);
        let m = edmd_fit(&linear_pairs(&a, 40), &DictionarySpec::new(1), 0.1).unwrap();
        let z = [0.3, -1.0, 2.0];
        let pred = m.predict(0, &z);
        let exact = &a * DVector::from_column_slice(&z);
        assert!((pred - exact).amax() < 1e-8);
    }

    #[test]
    fn zero_input_gives_constant_column_image() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let m = edmd_fit(&linear_pairs(&a, 20), &DictionarySpec::new(1), 0.1).unwrap();
        let z = m.predict(0, &[0.0, 0.0]);
        let kmat = m.koopman(0);
        assert_eq!(z[0], kmat[(0, 1)]);
        assert_eq!(z[1], kmat[(0, 2)]);
    }

    #[test]
    fn empty_bucket_is_an_error() {
        let a = DMatrix::identity(2, 2);
        let mut pairs = linear_pairs(&a, 10);
        pairs.buckets.push(Bucket {
            inputs: DMatrix::zeros(2, 0),
            outputs: DMatrix::zeros(2, 0),
        });
        match edmd_fit(&pairs, &DictionarySpec::new(1), 0.1) {
            Err(SurrogateError::InsufficientData { j, sizes }) => {
                assert_eq!(j, 2);
                assert_eq!(sizes, vec![10, 0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lifted_rollout_agrees_for_linear_dictionary() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let m = edmd_fit(&linear_pairs(&a, 20), &DictionarySpec::new(1), 0.1).unwrap();
        let lifted = m.rollout_lifted(&[0, 0, 0], &[1.0, 2.0]);
        let mut hidden = [];
        let relifted =
            super::super::multi_step_predict(&m, super::super::Schedule::Indices(&[0, 0, 0]), &[1.0, 2.0], &mut hidden)
                .unwrap();
        for (a, b) in lifted.iter().zip(&relifted) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn serde_round_trip() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let m = edmd_fit(&linear_pairs(&a, 20), &DictionarySpec::new(2), 0.1).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: EdmdModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back.koopman, m.koopman);
        assert_eq!(back.predict(0, &[0.2, 0.4]), m.predict(0, &[0.2, 0.4]));
    }
}
