use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::DatagenError;

/// Measurement `z = f(y)` taken from the full state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableSpec {
    FullState,
    /// Picks the listed state components (0-based).
    CoordinateSelection { indices: Vec<usize> },
    /// Stacks `[z_i, z_{i-lag}, ..., z_{i-d*lag}]` of a base observable.
    DelayEmbedding {
        base: Box<ObservableSpec>,
        lags: usize,
        lag_step: usize,
    },
    /// Coefficients `Psi^T y` in an orthonormal basis (columns of `basis`).
    Projection { basis: DMatrix<f64> },
}

impl ObservableSpec {
    pub fn validate(&self, state_dim: usize) -> Result<(), DatagenError> {
        match self {
            Self::FullState => Ok(()),
            Self::CoordinateSelection { indices } => {
                if indices.is_empty() {
                    return Err(DatagenError::InvalidObservable("no coordinates selected".into()));
                }
                match indices.iter().find(|&&i| i >= state_dim) {
                    Some(i) => Err(DatagenError::InvalidObservable(format!(
                        "coordinate {i} out of range for state dimension {state_dim}"
                    ))),
                    None => Ok(()),
                }
            }
            Self::DelayEmbedding { base, lag_step, .. } => {
                if *lag_step == 0 {
                    return Err(DatagenError::InvalidObservable("lag_step must be positive".into()));
                }
                base.validate(state_dim)
            }
            Self::Projection { basis } => {
                if basis.nrows() != state_dim {
                    return Err(DatagenError::InvalidObservable(format!(
                        "projection basis has {} rows, state dimension is {state_dim}",
                        basis.nrows()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Dimension `q` of the observable for states of dimension `state_dim`.
    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            Self::FullState => state_dim,
            Self::CoordinateSelection { indices } => indices.len(),
            Self::DelayEmbedding { base, lags, .. } => base.output_dim(state_dim) * (lags + 1),
            Self::Projection { basis } => basis.ncols(),
        }
    }

    /// Number of leading states consumed before the first output.
    pub fn warmup(&self) -> usize {
        match self {
            Self::DelayEmbedding { base, lags, lag_step } => lags * lag_step + base.warmup(),
            _ => 0,
        }
    }

    /// Observable of a single state; `None` for delay embeddings, which need
    /// a window.
    pub fn apply_one(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            Self::FullState => Some(y.clone()),
            Self::CoordinateSelection { indices } => {
                Some(DVector::from_iterator(indices.len(), indices.iter().map(|&i| y[i])))
            }
            Self::Projection { basis } => Some(basis.tr_mul(y)),
            Self::DelayEmbedding { .. } => None,
        }
    }

    /// Applies the observable along a state sequence. Delay embeddings shorten
    /// the sequence by [`warmup`](Self::warmup) entries.
    pub fn apply(&self, states: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, DatagenError> {
        match self {
            Self::DelayEmbedding { base, lags, lag_step } => {
                let inner = base.apply(states)?;
                let span = lags * lag_step;
                if inner.len() <= span {
                    return Err(DatagenError::SequenceTooShort {
                        needed: span + 1 + base.warmup(),
                        got: states.len(),
                    });
                }
                let q = inner[0].len();
                Ok((span..inner.len())
                    .map(|i| {
                        let mut z = DVector::zeros(q * (lags + 1));
                        for k in 0..=*lags {
                            z.rows_mut(k * q, q).copy_from(&inner[i - k * lag_step]);
                        }
                        z
                    })
                    .collect())
            }
            _ => Ok(states.iter().map(|y| self.apply_one(y).expect("pointwise observable")).collect()),
        }
    }

    /// Observable at the last state of `window`.
    pub fn apply_last(&self, window: &[DVector<f64>]) -> Result<DVector<f64>, DatagenError> {
        match self {
            Self::DelayEmbedding { .. } => {
                let need = self.warmup() + 1;
                if window.len() < need {
                    return Err(DatagenError::SequenceTooShort {
                        needed: need,
                        got: window.len(),
                    });
                }
                let z = self.apply(&window[window.len() - need..])?;
                Ok(z.into_iter().next_back().expect("nonempty"))
            }
            _ => {
                let y = window.last().ok_or(DatagenError::SequenceTooShort { needed: 1, got: 0 })?;
                Ok(self.apply_one(y).expect("pointwise observable"))
            }
        }
    }
}
