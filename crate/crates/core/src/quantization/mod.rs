//! Finite control sets, coverage of the reachable velocity set, and recovery
//! of admissible controls from relaxed weights.

mod hull;
mod sets;
mod sur;

pub use hull::{estimate_d, hull_distance};
pub(crate) use sets::interpolate_into;
pub use sets::{
    interpolate_control, is_simplex_row, make_star_set, make_vertex_set, BoxControlSet, QuantizedControlSet,
};
pub use sur::{integrated_deviation, sur_round, SurAccumulator, SurRounding};

#[derive(Debug, thiserror::Error)]
pub enum QuantizationError {
    #[error("vertex enumeration of a {0}-dimensional box is refused (limit 16)")]
    DimensionTooLarge(usize),
    #[error("star set needs 0 inside the control box")]
    ZeroOutsideBox,
    #[error("invalid control box: {0}")]
    InvalidBox(String),
    #[error("a quantized set needs at least 2 values, got {0}")]
    TooFewPoints(usize),
    #[error("control value {index} lies outside the box")]
    PointOutsideBox { index: usize },
    #[error("control value {index} repeats an earlier value")]
    DuplicatePoint { index: usize },
}
