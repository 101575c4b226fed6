//! The relaxed control problem: choose simplex weights `alpha` (one row per
//! horizon step) minimizing a quadratic tracking cost along the relaxed
//! surrogate rollout.

mod simplex;
mod solver;

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::quantization::is_simplex_row;
use crate::surrogates::{matrix_serde, SurrogateError};

pub use simplex::{project_rows, project_simplex};
pub use solver::{
    evaluate_objective, fd_gradient, solve_relaxed, GradientMethod, RelaxedProblem, SolveResult, SolveStatus, SolverConfig,
};

const PLAN_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("invalid objective: {0}")]
    InvalidObjective(String),
    #[error("invalid relaxed plan: {0}")]
    InvalidPlan(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Time-dependent reference `z_ref(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    Constant {
        value: Vec<f64>,
    },
    /// `offset + amplitude sin(2 pi t / period + phase)` in one component,
    /// zero elsewhere.
    Sinusoid {
        dim: usize,
        component: usize,
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl ReferenceSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Constant { value } => value.len(),
            Self::Sinusoid { dim, .. } => *dim,
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Self::Constant { value } => out.copy_from_slice(value),
            Self::Sinusoid {
                component,
                amplitude,
                period,
                phase,
                offset,
                ..
            } => {
                out.fill(0.0);
                out[*component] = offset + amplitude * (2.0 * PI * t / period + phase).sin();
            }
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }

    fn validate(&self) -> Result<(), OptimizeError> {
        match self {
            Self::Constant { value } if value.iter().any(|v| !v.is_finite()) => {
                Err(OptimizeError::InvalidObjective("non-finite reference".into()))
            }
            Self::Sinusoid { dim, component, .. } if component >= dim => Err(OptimizeError::InvalidObjective(
                format!("reference component {component} out of range for dimension {dim}"),
            )),
            Self::Sinusoid { period, .. } if !(*period > 0.0) => {
                Err(OptimizeError::InvalidObjective(format!("reference period {period}")))
            }
            _ => Ok(()),
        }
    }
}

/// Stage cost `(z - z_ref)^T Q (z - z_ref)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectiveRepr", into = "ObjectiveRepr")]
pub struct ObjectiveSpec {
    q: DMatrix<f64>,
    reference: ReferenceSpec,
}

#[derive(Serialize, Deserialize)]
struct ObjectiveRepr {
    #[serde(with = "matrix_serde")]
    q: DMatrix<f64>,
    reference: ReferenceSpec,
}

impl TryFrom<ObjectiveRepr> for ObjectiveSpec {
    type Error = OptimizeError;
    fn try_from(r: ObjectiveRepr) -> Result<Self, Self::Error> {
        Self::new(r.q, r.reference)
    }
}

impl From<ObjectiveSpec> for ObjectiveRepr {
    fn from(s: ObjectiveSpec) -> Self {
        Self {
            q: s.q,
            reference: s.reference,
        }
    }
}

impl ObjectiveSpec {
    pub fn new(q: DMatrix<f64>, reference: ReferenceSpec) -> Result<Self, OptimizeError> {
        if !q.is_square() || q.nrows() != reference.dim() {
            return Err(OptimizeError::InvalidObjective(format!(
                "Q is {}x{}, reference has dimension {}",
                q.nrows(),
                q.ncols(),
                reference.dim()
            )));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-12 * scale {
            return Err(OptimizeError::InvalidObjective("Q is not symmetric".into()));
        }
        let min_eig = q.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 {
            return Err(OptimizeError::InvalidObjective(format!(
                "Q is not positive semidefinite (eigenvalue {min_eig:e})"
            )));
        }
        reference.validate()?;
        Ok(Self { q, reference })
    }

    /// `Q = diag(weights)`.
    pub fn diagonal(weights: &[f64], reference: ReferenceSpec) -> Result<Self, OptimizeError> {
        Self::new(DMatrix::from_diagonal(&weights.to_vec().into()), reference)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn reference(&self) -> &ReferenceSpec {
        &self.reference
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// Stage cost of `z` against `z_ref`, with `d` as scratch.
    pub fn stage_cost(&self, z: &[f64], z_ref: &[f64], d: &mut [f64]) -> f64 {
        for ((di, a), b) in d.iter_mut().zip(z).zip(z_ref) {
            *di = a - b;
        }
        let n = d.len();
        let mut acc = 0.0;
        for c in 0..n {
            if d[c] == 0.0 {
                continue;
            }
            let col = self.q.column(c);
            acc += d[c] * col.iter().zip(d.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
        acc
    }

    /// `out += 2 Q (z - z_ref)`, the gradient of the stage cost.
    pub(crate) fn add_stage_gradient(&self, z: &[f64], z_ref: &[f64], out: &mut [f64]) {
        for c in 0..z.len() {
            let dc = z[c] - z_ref[c];
            if dc != 0.0 {
                for (o, qv) in out.iter_mut().zip(self.q.column(c).iter()) {
                    *o += 2.0 * qv * dc;
                }
            }
        }
    }
}

/// Relaxed weights `alpha`, `p` rows of `m` entries each, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct RelaxedPlan {
    p: usize,
    m: usize,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    rows: Vec<Vec<f64>>,
}

impl TryFrom<PlanRepr> for RelaxedPlan {
    type Error = OptimizeError;
    fn try_from(r: PlanRepr) -> Result<Self, Self::Error> {
        Self::from_rows(&r.rows)
    }
}

impl From<RelaxedPlan> for PlanRepr {
    fn from(p: RelaxedPlan) -> Self {
        Self {
            rows: p.rows().map(<[f64]>::to_vec).collect(),
        }
    }
}

impl RelaxedPlan {
    /// Every row `1/m`.
    pub fn uniform(p: usize, m: usize) -> Self {
        Self {
            p,
            m,
            weights: vec![1.0 / m as f64; p * m],
        }
    }

    pub fn from_weights(p: usize, m: usize, weights: Vec<f64>) -> Result<Self, OptimizeError> {
        if p == 0 || m == 0 || weights.len() != p * m {
            return Err(OptimizeError::InvalidPlan(format!("{} weights for {p}x{m}", weights.len())));
        }
        if let Some(i) = (0..p).find(|&i| !is_simplex_row(&weights[i * m..(i + 1) * m], PLAN_TOL)) {
            return Err(OptimizeError::InvalidPlan(format!("row {i} is not on the simplex")));
        }
        Ok(Self { p, m, weights })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, OptimizeError> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(OptimizeError::InvalidPlan("rows of different lengths".into()));
        }
        Self::from_weights(rows.len(), m, rows.concat())
    }

    /// One-hot rows selecting `indices[i]` at step `i`.
    pub fn from_indices(indices: &[usize], m: usize) -> Result<Self, OptimizeError> {
        let mut w = vec![0.0; indices.len() * m];
        for (i, &j) in indices.iter().enumerate() {
            if j >= m {
                return Err(OptimizeError::InvalidPlan(format!("index {j} >= m = {m}")));
            }
            w[i * m + j] = 1.0;
        }
        Self::from_weights(indices.len(), m, w)
    }

    /// Projects arbitrary weights row by row onto the simplex.
    pub fn projected(p: usize, m: usize, mut weights: Vec<f64>) -> Result<Self, OptimizeError> {
        if p == 0 || m == 0 || weights.len() != p * m {
            return Err(OptimizeError::InvalidPlan(format!("{} weights for {p}x{m}", weights.len())));
        }
        project_rows(&mut weights, m);
        Ok(Self { p, m, weights })
    }

    pub fn horizon(&self) -> usize {
        self.p
    }

    pub fn n_controls(&self) -> usize {
        self.m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.m)
    }

    /// Drops the first row and appends a uniform one, the usual receding
    /// horizon warm start.
    pub fn shifted(&self) -> Self {
        let mut weights = self.weights[self.m..].to_vec();
        weights.extend(std::iter::repeat_n(1.0 / self.m as f64, self.m));
        Self {
            p: self.p,
            m: self.m,
            weights,
        }
    }

    pub(crate) fn from_raw(p: usize, m: usize, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), p * m);
        Self { p, m, weights }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_reference() {
        let r = ReferenceSpec::Sinusoid {
            dim: 3,
            component: 1,
            amplitude: 1.5,
            period: 10.0,
            phase: 0.0,
            offset: 0.0,
        };
        let v = r.eval(2.5);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.5).abs() < 1e-12);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn objective_rejects_indefinite_q() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = ReferenceSpec::Constant { value: vec![0.0; 2] };
        assert!(matches!(ObjectiveSpec::new(q, r), Err(OptimizeError::InvalidObjective(_))));
    }

    #[test]
    fn objective_rejects_asymmetric_q() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let r = ReferenceSpec::Constant { value: vec![0.0; 2] };
        assert!(ObjectiveSpec::new(q, r).is_err());
    }

    #[test]
    fn stage_cost_and_gradient() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let s = ObjectiveSpec::new(q, ReferenceSpec::Constant { value: vec![1.0, 0.0] }).unwrap();
        let mut d = [0.0; 2];
        // d = (1, 2): 2 + 2*1*2 + 3*4 = 18
        assert!((s.stage_cost(&[2.0, 2.0], &[1.0, 0.0], &mut d) - 18.0).abs() < 1e-12);
        let mut g = [0.0; 2];
        s.add_stage_gradient(&[2.0, 2.0], &[1.0, 0.0], &mut g);
        assert_eq!(g, [8.0, 14.0]);
    }

    #[test]
    fn plan_shift_keeps_rows_on_simplex() {
        let p = RelaxedPlan::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        let s = p.shifted();
        assert_eq!(s.row(0), &[0.3, 0.7]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn plan_validation_and_serde() {
        assert!(RelaxedPlan::from_rows(&[vec![0.6, 0.6]]).is_err());
        assert!(RelaxedPlan::from_indices(&[0, 2], 2).is_err());
        let p = RelaxedPlan::from_indices(&[1, 0], 2).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"rows":[[0.0,1.0],[1.0,0.0]]}"#);
        assert_eq!(serde_json::from_str::<RelaxedPlan>(&s).unwrap(), p);
    }
}
