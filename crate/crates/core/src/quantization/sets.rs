use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::QuantizationError;

const MAX_VERTEX_DIM: usize = 16;

/// Box constraints `lower <= u <= upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxControlSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxControlSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, QuantizationError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(QuantizationError::InvalidBox(format!(
                "bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(QuantizationError::InvalidBox(format!(
                    "component {i}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same interval `[lo, hi]` in every one of `dim` components.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self, QuantizationError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= lo - tol && *x <= hi + tol)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(&lo, &hi)| if lo == hi { lo } else { rng.random_range(lo..=hi) }),
        )
    }
}

/// A finite subset `V = {u^1, ..., u^m}` of a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuantizedSet", into = "RawQuantizedSet")]
pub struct QuantizedControlSet {
    points: Vec<DVector<f64>>,
    parent: BoxControlSet,
}

#[derive(Serialize, Deserialize)]
struct RawQuantizedSet {
    points: Vec<Vec<f64>>,
    parent: BoxControlSet,
}

impl TryFrom<RawQuantizedSet> for QuantizedControlSet {
    type Error = QuantizationError;
    fn try_from(raw: RawQuantizedSet) -> Result<Self, Self::Error> {
        Self::new(raw.points, raw.parent)
    }
}

impl From<QuantizedControlSet> for RawQuantizedSet {
    fn from(v: QuantizedControlSet) -> Self {
        Self {
            points: v.points.iter().map(|p| p.as_slice().to_vec()).collect(),
            parent: v.parent,
        }
    }
}

impl QuantizedControlSet {
    pub fn new(points: Vec<Vec<f64>>, parent: BoxControlSet) -> Result<Self, QuantizationError> {
        if points.len() < 2 {
            return Err(QuantizationError::TooFewPoints(points.len()));
        }
        for (j, p) in points.iter().enumerate() {
            if !parent.contains(p, 1e-12) {
                return Err(QuantizationError::PointOutsideBox { index: j + 1 });
            }
            if points[..j].contains(p) {
                return Err(QuantizationError::DuplicatePoint { index: j + 1 });
            }
        }
        Ok(Self {
            points: points.into_iter().map(DVector::from_vec).collect(),
            parent,
        })
    }

    /// Number of values `m`.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn control_dim(&self) -> usize {
        self.parent.dim()
    }

    /// Value `u^{j+1}` (indices are 0-based here).
    pub fn point(&self, j: usize) -> &DVector<f64> {
        &self.points[j]
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn parent(&self) -> &BoxControlSet {
        &self.parent
    }

    /// Index of the value equal to `u`, if any.
    pub fn index_of(&self, u: &[f64]) -> Option<usize> {
        self.points.iter().position(|p| p.as_slice() == u)
    }
}

/// All `2^{n_u}` corners of the box, the first component varying slowest and
/// lower bounds before upper bounds.
pub fn make_vertex_set(u: &BoxControlSet) -> Result<QuantizedControlSet, QuantizationError> {
    let n = u.dim();
    if n > MAX_VERTEX_DIM {
        return Err(QuantizationError::DimensionTooLarge(n));
    }
    let points = (0..1usize << n)
        .map(|c| {
            (0..n)
                .map(|i| if c >> (n - 1 - i) & 1 == 0 { u.lower[i] } else { u.upper[i] })
                .collect()
        })
        .collect();
    QuantizedControlSet::new(points, u.clone())
}

/// Zero plus, per component, the lower and upper bound with all other
/// components zero.
pub fn make_star_set(u: &BoxControlSet) -> Result<QuantizedControlSet, QuantizationError> {
    if !u.contains(&vec![0.0; u.dim()], 0.0) {
        return Err(QuantizationError::ZeroOutsideBox);
    }
    let n = u.dim();
    let mut points = vec![vec![0.0; n]];
    for i in 0..n {
        for bound in [u.lower[i], u.upper[i]] {
            let mut p = vec![0.0; n];
            p[i] = bound;
            points.push(p);
        }
    }
    QuantizedControlSet::new(points, u.clone())
}

/// Convex combination `sum_j w_j u^j`.
pub fn interpolate_control(weights: &[f64], v: &QuantizedControlSet) -> DVector<f64> {
    let mut u = DVector::zeros(v.control_dim());
    interpolate_into(weights, v, u.as_mut_slice());
    u
}

pub(crate) fn interpolate_into(weights: &[f64], v: &QuantizedControlSet, out: &mut [f64]) {
    debug_assert_eq!(weights.len(), v.len());
    out.fill(0.0);
    for (w, p) in weights.iter().zip(v.points()) {
        for (o, x) in out.iter_mut().zip(p.iter()) {
            *o += w * x;
        }
    }
}

/// Whether `w` lies on the probability simplex within `tol`.
pub fn is_simplex_row(w: &[f64], tol: f64) -> bool {
    !w.is_empty()
        && w.iter().all(|&x| (-tol..=1.0 + tol).contains(&x))
        && (w.iter().sum::<f64>() - 1.0).abs() <= tol
}
