use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::QuantizedControlSet;

/// Running sums of sum-up rounding: relaxed weights seen so far and the
/// number of fine steps each value has been selected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurAccumulator {
    alpha_sum: Vec<f64>,
    selected: Vec<u64>,
}

impl SurAccumulator {
    pub fn new(m: usize) -> Self {
        Self {
            alpha_sum: vec![0.0; m],
            selected: vec![0; m],
        }
    }

    pub fn m(&self) -> usize {
        self.alpha_sum.len()
    }

    /// Fine steps rounded so far.
    pub fn steps(&self) -> u64 {
        self.selected.iter().sum()
    }

    pub fn alpha_sums(&self) -> &[f64] {
        &self.alpha_sum
    }

    pub fn selection_counts(&self) -> &[u64] {
        &self.selected
    }

    pub fn reset(&mut self) {
        self.alpha_sum.fill(0.0);
        self.selected.fill(0);
    }

    /// Rounds one fine-grid row: picks the smallest index maximizing
    /// `sum_{k<=i} alpha_kj - sum_{k<i} omega_kj`.
    pub fn round_step(&mut self, alpha: &[f64]) -> usize {
        assert_eq!(alpha.len(), self.m(), "row length differs from accumulator");
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (j, (&a, (&sum, &count))) in alpha.iter().zip(self.alpha_sum.iter().zip(&self.selected)).enumerate() {
            let hat = (sum + a) - count as f64;
            if hat > best_val {
                best_val = hat;
                best = j;
            }
        }
        for (s, a) in self.alpha_sum.iter_mut().zip(alpha) {
            *s += a;
        }
        self.selected[best] += 1;
        best
    }
}

/// Result of rounding a sequence of fine-grid rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SurRounding {
    /// Selected value per fine step (0-based).
    pub indices: Vec<usize>,
    pub controls: Vec<DVector<f64>>,
}

impl SurRounding {
    /// One-hot rows `omega_i`.
    pub fn omegas(&self, m: usize) -> Vec<Vec<f64>> {
        self.indices
            .iter()
            .map(|&j| {
                let mut row = vec![0.0; m];
                row[j] = 1.0;
                row
            })
            .collect()
    }
}

/// Sum-up rounding of `alphas` (one row per fine step), continuing from `acc`.
pub fn sur_round<R: AsRef<[f64]>>(alphas: &[R], acc: &mut SurAccumulator, v: &QuantizedControlSet) -> SurRounding {
    let indices: Vec<usize> = alphas.iter().map(|row| acc.round_step(row.as_ref())).collect();
    let controls = indices.iter().map(|&j| v.point(j).clone()).collect();
    SurRounding { indices, controls }
}

/// `max_i max_j |sum_{k<=i} (alpha_kj - omega_kj)|` in grid units.
pub fn integrated_deviation<R: AsRef<[f64]>>(alphas: &[R], indices: &[usize]) -> f64 {
    let m = alphas.first().map_or(0, |r| r.as_ref().len());
    let mut acc = vec![0.0; m];
    let mut worst: f64 = 0.0;
    for (row, &j) in alphas.iter().zip(indices) {
        for (a, x) in acc.iter_mut().zip(row.as_ref()) {
            *a += x;
        }
        acc[j] -= 1.0;
        worst = acc.iter().fold(worst, |w, a| w.max(a.abs()));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::{make_vertex_set, BoxControlSet};

    fn v2() -> QuantizedControlSet {
        make_vertex_set(&BoxControlSet::uniform(1, -1.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn binary_rows_are_reproduced() {
        let alphas = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let mut acc = SurAccumulator::new(2);
        let r = sur_round(&alphas, &mut acc, &v2());
        assert_eq!(r.indices, vec![0, 1, 1, 0]);
        assert_eq!(r.omegas(2), alphas);
        assert_eq!(r.controls[1][0], 1.0);
    }

    #[test]
    fn tie_goes_to_smallest_index() {
        let alphas = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let mut acc = SurAccumulator::new(2);
        let r = sur_round(&alphas, &mut acc, &v2());
        assert_eq!(r.omegas(2), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn accumulator_persists_across_calls() {
        let mut split = SurAccumulator::new(2);
        let a = sur_round(&[vec![0.3, 0.7], vec![0.6, 0.4]], &mut split, &v2());
        let b = sur_round(&[vec![0.2, 0.8], vec![0.9, 0.1]], &mut split, &v2());
        let mut whole = SurAccumulator::new(2);
        let all = sur_round(
            &[vec![0.3, 0.7], vec![0.6, 0.4], vec![0.2, 0.8], vec![0.9, 0.1]],
            &mut whole,
            &v2(),
        );
        assert_eq!([a.indices, b.indices].concat(), all.indices);
        assert_eq!(split, whole);
        assert_eq!(whole.steps(), 4);
    }

    #[test]
    fn deviation_of_hand_example() {
        let alphas = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(integrated_deviation(&alphas, &[0, 1]), 0.5);
    }
}
