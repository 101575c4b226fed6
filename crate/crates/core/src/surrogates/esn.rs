use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{matrix_serde, Surrogate, SurrogateError};
use crate::datagen::LabeledTrajectory;

/// Square matrix in compressed sparse row form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square());
        let n = m.nrows();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[k])] = self.vals[k];
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    fn scale(&mut self, s: f64) {
        self.vals.iter_mut().for_each(|v| *v *= s);
    }

    /// `out = self * x`.
    pub fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            *o = self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(&c, v)| v * x[c]).sum();
        }
    }
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Hyperparameters of the fixed random reservoir.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSpec {
    pub size: usize,
    pub spectral_radius: f64,
    /// Probability that an entry of `W_res` is zero.
    pub sparsity: f64,
    /// Output scaling of the activation, `r' = sigma tanh(...)`.
    pub sigma: f64,
    /// Entries of `W_fb` are uniform in `(-s, s)`.
    #[serde(default = "one")]
    pub feedback_scale: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for ReservoirSpec {
    fn default() -> Self {
        Self {
            size: 200,
            spectral_radius: 0.75,
            sparsity: 0.9,
            sigma: 0.99,
            feedback_scale: 1.0,
            seed: 0,
        }
    }
}

/// Fixed random weights `W_res` (sparse) and `W_fb`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    pub spec: ReservoirSpec,
    pub w_res: SparseMatrix,
    #[serde(with = "matrix_serde")]
    pub w_fb: DMatrix<f64>,
}

/// Draws a reservoir for observables of dimension `q`: `W_res` uniform in
/// `(-1, 1)`, thinned with probability `sparsity`, rescaled to the requested
/// spectral radius.
pub fn esn_init(spec: &ReservoirSpec, q: usize) -> Result<Reservoir, SurrogateError> {
    if spec.size == 0 {
        return Err(SurrogateError::InvalidParam("reservoir size must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.sparsity) {
        return Err(SurrogateError::InvalidParam(format!("sparsity {} not in [0, 1)", spec.sparsity)));
    }
    if !(spec.spectral_radius > 0.0) {
        return Err(SurrogateError::InvalidParam("spectral radius must be positive".into()));
    }
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dense = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v: f64 = rng.random_range(-1.0..1.0);
            if rng.random::<f64>() >= spec.sparsity {
                dense[(i, j)] = v;
            }
        }
    }
    let rho = spectral_radius(&dense);
    if rho < 1e-12 {
        return Err(SurrogateError::SpectralRadiusZero { seed: spec.seed });
    }
    let mut w_res = SparseMatrix::from_dense(&dense);
    w_res.scale(spec.spectral_radius / rho);
    let w_fb = DMatrix::from_fn(n, q, |_, _| spec.feedback_scale * rng.random_range(-1.0..1.0));
    Ok(Reservoir {
        spec: spec.clone(),
        w_res,
        w_fb,
    })
}

impl Reservoir {
    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn obs_dim(&self) -> usize {
        self.w_fb.ncols()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.w_res.to_dense())
    }

    /// `r <- sigma tanh(W_res r + W_fb z + extra)`; `tmp` has the reservoir size.
    pub fn step(&self, r: &mut [f64], z: &[f64], extra: Option<&[f64]>, tmp: &mut [f64]) {
        self.w_res.mul_into(r, tmp);
        for (c, &zc) in z.iter().enumerate() {
            if zc != 0.0 {
                for (t, w) in tmp.iter_mut().zip(self.w_fb.column(c).iter()) {
                    *t += w * zc;
                }
            }
        }
        if let Some(e) = extra {
            for (t, x) in tmp.iter_mut().zip(e) {
                *t += x;
            }
        }
        let s = self.spec.sigma;
        for (ri, t) in r.iter_mut().zip(tmp.iter()) {
            *ri = s * t.tanh();
        }
    }

    /// Teacher-forced states: column `k` is `r(k+1)`, driven by
    /// `z_0..z_k` (and `inputs`, one column per step, if given).
    pub fn drive(&self, zs: &[DVector<f64>], inputs: Option<&[DVector<f64>]>) -> DMatrix<f64> {
        let n = self.size();
        let mut r = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut out = DMatrix::zeros(n, zs.len());
        for (k, z) in zs.iter().enumerate() {
            let extra = inputs.map(|u| u[k].as_slice());
            self.step(&mut r, z.as_slice(), extra, &mut tmp);
            out.column_mut(k).copy_from_slice(&r);
        }
        out
    }
}

/// Normal equations `R R^T`, `Y R^T` accumulated column block by block.
#[derive(Clone, Debug)]
pub struct RidgeAccumulator {
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    count: usize,
}

impl RidgeAccumulator {
    pub fn new(features: usize, outputs: usize) -> Self {
        Self {
            gram: DMatrix::zeros(features, features),
            cross: DMatrix::zeros(outputs, features),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds samples: columns of `r` with targets in the same columns of `y`.
    pub fn add(&mut self, r: &DMatrix<f64>, y: &DMatrix<f64>) {
        assert_eq!(r.ncols(), y.ncols());
        if r.ncols() == 0 {
            return;
        }
        self.gram.gemm(1.0, r, &r.transpose(), 1.0);
        self.cross.gemm(1.0, y, &r.transpose(), 1.0);
        self.count += r.ncols();
    }

    /// `W = Y R^T (R R^T + beta I)^{-1}`.
    pub fn solve(&self, beta: f64) -> Result<DMatrix<f64>, SurrogateError> {
        let n = self.gram.nrows();
        let g = &self.gram + DMatrix::identity(n, n) * beta;
        let chol = g
            .cholesky()
            .ok_or_else(|| SurrogateError::InvalidParam(format!("ridge system not positive definite (beta = {beta})")))?;
        Ok(chol.solve(&self.cross.transpose()).transpose())
    }
}

/// Shared reservoir with one linear readout per control value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsnModel {
    pub reservoir: Reservoir,
    #[serde(with = "matrix_serde::vec")]
    pub readouts: Vec<DMatrix<f64>>,
    pub ridge: f64,
    pub washout: usize,
    pub dt: f64,
}

/// Trains one readout per control value on the transitions labeled with it,
/// after teacher-forcing the reservoir through the whole trajectory.
pub fn esn_fit(
    traj: &LabeledTrajectory,
    reservoir: &Reservoir,
    m: usize,
    washout: usize,
    ridge: f64,
    dt: f64,
) -> Result<EsnModel, SurrogateError> {
    esn_fit_many(&[traj], reservoir, m, washout, ridge, dt)
}

/// As [`esn_fit`] over several independent trajectories.
pub fn esn_fit_many(
    trajs: &[&LabeledTrajectory],
    reservoir: &Reservoir,
    m: usize,
    washout: usize,
    ridge: f64,
    dt: f64,
) -> Result<EsnModel, SurrogateError> {
    let q = reservoir.obs_dim();
    let mut acc: Vec<RidgeAccumulator> = (0..m).map(|_| RidgeAccumulator::new(reservoir.size(), q)).collect();
    for traj in trajs {
        if traj.transitions() <= washout {
            return Err(SurrogateError::InvalidParam(format!(
                "trajectory has {} transitions, washout is {washout}",
                traj.transitions()
            )));
        }
        let states = reservoir.drive(&traj.observables[..traj.transitions()], None);
        for j in 0..m {
            let cols: Vec<usize> = (washout..traj.transitions())
                .filter(|&k| traj.control_indices[k] == j)
                .collect();
            let r = states.select_columns(cols.iter());
            let y = DMatrix::from_fn(q, cols.len(), |i, c| traj.observables[cols[c] + 1][i]);
            acc[j].add(&r, &y);
        }
    }
    let sizes: Vec<usize> = acc.iter().map(RidgeAccumulator::count).collect();
    let readouts = acc
        .iter()
        .enumerate()
        .map(|(j, a)| {
            if a.count() == 0 {
                Err(SurrogateError::InsufficientData {
                    j: j + 1,
                    sizes: sizes.clone(),
                })
            } else {
                a.solve(ridge)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EsnModel {
        reservoir: reservoir.clone(),
        readouts,
        ridge,
        washout,
        dt,
    })
}

impl EsnModel {
    /// Reservoir state after teacher forcing on `window` minus its last entry.
    pub fn sync_state(&self, window: &[DVector<f64>]) -> Vec<f64> {
        let n = self.reservoir.size();
        let mut r = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        if let Some((_, past)) = window.split_last() {
            for z in past {
                self.reservoir.step(&mut r, z.as_slice(), None, &mut tmp);
            }
        }
        r
    }

    fn readout(&self, j: usize, r: &[f64], out: &mut [f64]) {
        let w = &self.readouts[j];
        for (i, o) in out.iter_mut().enumerate() {
            *o = w.row(i).iter().zip(r).map(|(a, b)| a * b).sum();
        }
    }
}

impl Surrogate for EsnModel {
    fn obs_dim(&self) -> usize {
        self.reservoir.obs_dim()
    }
    fn n_controls(&self) -> usize {
        self.readouts.len()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn hidden_dim(&self) -> usize {
        self.reservoir.size()
    }
    fn images(&self, z: &[f64], hidden: &mut [f64], out: &mut [f64]) -> Result<(), SurrogateError> {
        let mut tmp = vec![0.0; hidden.len()];
        self.reservoir.step(hidden, z, None, &mut tmp);
        let q = self.obs_dim();
        for j in 0..self.readouts.len() {
            self.readout(j, hidden, &mut out[j * q..(j + 1) * q]);
        }
        Ok(())
    }
    fn synchronize(&self, window: &[DVector<f64>], hidden: &mut [f64]) {
        hidden.copy_from_slice(&self.sync_state(window));
    }
}

/// Stateful one-step predictor over an [`EsnModel`].
#[derive(Clone, Debug)]
pub struct EsnPredictor<'a> {
    model: &'a EsnModel,
    state: Option<Vec<f64>>,
}

impl<'a> EsnPredictor<'a> {
    pub fn new(model: &'a EsnModel) -> Self {
        Self { model, state: None }
    }

    /// Re-synchronizes the reservoir on a recent window of observables.
    pub fn synchronize(&mut self, window: &[DVector<f64>]) {
        self.state = Some(self.model.sync_state(window));
    }

    pub fn state(&self) -> Option<&[f64]> {
        self.state.as_deref()
    }

    /// Feeds `z` and returns the prediction of readout `j`.
    pub fn predict(&mut self, j: usize, z: &[f64]) -> Result<DVector<f64>, SurrogateError> {
        let r = self.state.as_mut().ok_or(SurrogateError::ReservoirNotInitialized)?;
        let mut tmp = vec![0.0; r.len()];
        self.model.reservoir.step(r, z, None, &mut tmp);
        let mut out = vec![0.0; self.model.obs_dim()];
        self.model.readout(j, r, &mut out);
        Ok(DVector::from_vec(out))
    }
}

/// Single reservoir driven by the control as an input, `r' = sigma tanh(W_res r
/// + W_fb z + W_in u)`, with one readout for all data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEsnModel {
    pub reservoir: Reservoir,
    #[serde(with = "matrix_serde")]
    pub w_in: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub readout: DMatrix<f64>,
    pub ridge: f64,
    pub washout: usize,
    pub dt: f64,
}

/// Input matrix `W_in` uniform in `(-scale, scale)`, drawn from a stream
/// derived from the reservoir seed.
pub fn draw_input_matrix(reservoir: &Reservoir, n_u: usize, scale: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(reservoir.spec.seed);
    rng.set_stream(1);
    DMatrix::from_fn(reservoir.size(), n_u, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn esn_fit_augmented(
    traj: &LabeledTrajectory,
    reservoir: &Reservoir,
    input_scale: f64,
    washout: usize,
    ridge: f64,
    dt: f64,
) -> Result<AugmentedEsnModel, SurrogateError> {
    let n = traj.transitions();
    if n <= washout {
        return Err(SurrogateError::InvalidParam(format!(
            "trajectory has {n} transitions, washout is {washout}"
        )));
    }
    let w_in = draw_input_matrix(reservoir, traj.control_dim, input_scale);
    let model = AugmentedEsnModel {
        reservoir: reservoir.clone(),
        w_in,
        readout: DMatrix::zeros(0, 0),
        ridge,
        washout,
        dt,
    };
    let inputs: Vec<DVector<f64>> = traj.controls.iter().map(|u| &model.w_in * u).collect();
    let states = reservoir.drive(&traj.observables[..n], Some(&inputs));
    let q = traj.obs_dim;
    let r = states.columns(washout, n - washout).into_owned();
    let y = DMatrix::from_fn(q, n - washout, |i, c| traj.observables[washout + c + 1][i]);
    let mut acc = RidgeAccumulator::new(reservoir.size(), q);
    acc.add(&r, &y);
    Ok(AugmentedEsnModel {
        readout: acc.solve(ridge)?,
        ..model
    })
}

impl AugmentedEsnModel {
    pub fn obs_dim(&self) -> usize {
        self.reservoir.obs_dim()
    }

    /// Reservoir state after teacher forcing on `zs[..len-1]` with `us`.
    pub fn sync_state(&self, zs: &[DVector<f64>], us: &[DVector<f64>]) -> Vec<f64> {
        let n = self.reservoir.size();
        let mut r = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for (z, u) in zs.iter().zip(us).take(zs.len().saturating_sub(1)) {
            let drive = &self.w_in * u;
            self.reservoir.step(&mut r, z.as_slice(), Some(drive.as_slice()), &mut tmp);
        }
        r
    }

    /// Feeds `(z, u)` and returns the predicted next observable.
    pub fn predict(&self, z: &[f64], u: &[f64], r: &mut [f64]) -> DVector<f64> {
        let drive = &self.w_in * DVector::from_column_slice(u);
        let mut tmp = vec![0.0; r.len()];
        self.reservoir.step(r, z, Some(drive.as_slice()), &mut tmp);
        &self.readout * DVector::from_column_slice(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_traj(c: f64, n: usize) -> LabeledTrajectory {
        LabeledTrajectory {
            obs_dim: 1,
            control_dim: 1,
            times: (0..=n).map(|i| i as f64).collect(),
            observables: vec![DVector::from_element(1, c); n + 1],
            control_indices: vec![0; n],
            controls: vec![DVector::zeros(1); n],
        }
    }

    #[test]
    fn spectral_radius_matches_request() {
        let r = esn_init(&ReservoirSpec::default(), 1).unwrap();
        assert!((r.spectral_radius() - 0.75).abs() < 1e-6);
    }

    #[test]
    fn sparsity_fraction() {
        let r = esn_init(&ReservoirSpec::default(), 1).unwrap();
        let frac = r.w_res.nnz() as f64 / (200.0 * 200.0);
        assert!((frac - 0.10).abs() < 0.02, "{frac}");
    }

    #[test]
    fn seeded_draw_is_reproducible() {
        let a = esn_init(&ReservoirSpec::default(), 2).unwrap();
        let b = esn_init(&ReservoirSpec::default(), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nilpotent_draw_is_rejected() {
        let spec = ReservoirSpec {
            size: 1,
            sparsity: 0.999,
            seed: 5,
            ..ReservoirSpec::default()
        };
        // a 1x1 reservoir is zero unless the single entry survives thinning
        match esn_init(&spec, 1) {
            Err(SurrogateError::SpectralRadiusZero { seed }) => assert_eq!(seed, 5),
            Ok(r) => assert!(r.w_res.nnz() == 1),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn huge_ridge_gives_zero_readout() {
        let res = esn_init(&ReservoirSpec { size: 30, ..Default::default() }, 1).unwrap();
        let m = esn_fit(&constant_traj(0.8, 100), &res, 1, 10, 1e12, 0.25).unwrap();
        assert!(m.readouts[0].amax() < 1e-9);
    }

    #[test]
    fn constant_signal_is_reproduced() {
        let res = esn_init(&ReservoirSpec { size: 50, ..Default::default() }, 1).unwrap();
        let m = esn_fit(&constant_traj(0.8, 300), &res, 1, 50, 1e-8, 0.25).unwrap();
        let mut p = EsnPredictor::new(&m);
        let window = vec![DVector::from_element(1, 0.8); 60];
        p.synchronize(&window);
        let mut z = DVector::from_element(1, 0.8);
        for _ in 0..20 {
            z = p.predict(0, z.as_slice()).unwrap();
        }
        assert!((z[0] - 0.8).abs() < 1e-6, "{}", z[0]);
    }

    #[test]
    fn predictor_requires_sync() {
        let res = esn_init(&ReservoirSpec { size: 10, ..Default::default() }, 1).unwrap();
        let m = esn_fit(&constant_traj(0.5, 40), &res, 1, 5, 1e-4, 0.25).unwrap();
        let mut p = EsnPredictor::new(&m);
        assert!(matches!(p.predict(0, &[0.5]), Err(SurrogateError::ReservoirNotInitialized)));
    }

    #[test]
    fn states_decay_without_input() {
        let res = esn_init(&ReservoirSpec::default(), 1).unwrap();
        let mut r = vec![0.5; 200];
        let mut tmp = vec![0.0; 200];
        let mut norms = Vec::new();
        for _ in 0..60 {
            res.step(&mut r, &[0.0], None, &mut tmp);
            norms.push(r.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        assert!(norms[59] < 1e-3 * norms[0], "{norms:?}");
    }

    #[test]
    fn replay_matches_training_outputs() {
        let res = esn_init(&ReservoirSpec { size: 40, ..Default::default() }, 1).unwrap();
        let n = 200;
        let traj = LabeledTrajectory {
            obs_dim: 1,
            control_dim: 1,
            times: (0..=n).map(|i| i as f64).collect(),
            observables: (0..=n).map(|i| DVector::from_element(1, (0.3 * i as f64).sin())).collect(),
            control_indices: (0..n).map(|i| i % 2).collect(),
            controls: (0..n).map(|i| DVector::from_element(1, (i % 2) as f64)).collect(),
        };
        let m = esn_fit(&traj, &res, 2, 20, 1e-6, 0.1).unwrap();
        // Teacher-forced replay through the trait gives the fitted outputs.
        let mut hidden = vec![0.0; 40];
        let mut images = vec![0.0; 2];
        let mut sq = 0.0;
        for k in 0..n {
            m.images(traj.observables[k].as_slice(), &mut hidden, &mut images).unwrap();
            if k >= 20 {
                sq += (images[traj.control_indices[k]] - traj.observables[k + 1][0]).powi(2);
            }
        }
        let rms = (sq / (n - 20) as f64).sqrt();
        assert!(rms < 1e-2, "{rms}");
    }

    #[test]
    fn augmented_fit_runs() {
        let res = esn_init(&ReservoirSpec { size: 30, ..Default::default() }, 1).unwrap();
        let m = esn_fit_augmented(&constant_traj(0.3, 100), &res, 1.0, 10, 1e-8, 0.1).unwrap();
        let window = vec![DVector::from_element(1, 0.3); 40];
        let us = vec![DVector::zeros(1); 40];
        let mut r = m.sync_state(&window, &us);
        let z = m.predict(&[0.3], &[0.0], &mut r);
        assert!((z[0] - 0.3).abs() < 1e-5);
    }
}
