use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BoxControlSet, QuantizedControlSet};
use crate::dynamics::SystemModel;

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max-norm distance from `point` to the convex hull of `vertices`.
///
/// Solved as the linear program `min s` subject to
/// `-s <= point - sum_j l_j v_j <= s` componentwise, `l` on the simplex.
pub fn hull_distance(point: &[f64], vertices: &[DVector<f64>]) -> f64 {
    assert!(!vertices.is_empty(), "hull of an empty set");
    let nearest_vertex = vertices
        .iter()
        .map(|v| max_dist(point, v.as_slice()))
        .fold(f64::INFINITY, f64::min);
    if vertices.len() == 1 || nearest_vertex == 0.0 {
        return nearest_vertex;
    }

    // Shift and scale so the LP tolerances are relative to the data.
    let scale = vertices
        .iter()
        .flat_map(|v| v.iter().zip(point).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);

    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let s = lp.add_var(1.0, (0.0, f64::INFINITY));
    let lambdas: Vec<_> = vertices.iter().map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
    lp.add_constraint(lambdas.iter().map(|&l| (l, 1.0)), ComparisonOp::Eq, 1.0);
    for k in 0..point.len() {
        // sum_j l_j (v_jk - p_k) / scale in [-s, s]
        let row: Vec<_> = lambdas
            .iter()
            .zip(vertices)
            .map(|(&l, v)| (l, (v[k] - point[k]) / scale))
            .collect();
        let mut upper = row.clone();
        upper.push((s, -1.0));
        lp.add_constraint(upper, ComparisonOp::Le, 0.0);
        let mut lower = row;
        lower.push((s, 1.0));
        lp.add_constraint(lower, ComparisonOp::Ge, 0.0);
    }
    match lp.solve() {
        Ok(sol) => (sol.objective() * scale).clamp(0.0, nearest_vertex),
        Err(err) => {
            log::warn!("hull distance LP failed ({err}); using nearest vertex");
            nearest_vertex
        }
    }
}

/// Monte-Carlo estimate of the coverage constant `D`: the largest max-norm
/// distance between `g(y, u)` for `u` drawn uniformly from `U` and the hull
/// of `{g(y, u^j)}`, over all given states.
pub fn estimate_d(
    system: &SystemModel,
    trajectory: &[DVector<f64>],
    u: &BoxControlSet,
    v: &QuantizedControlSet,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = system.state_dim();
    let mut images = vec![DVector::zeros(n); v.len()];
    let mut gy = vec![0.0; n];
    let mut d: f64 = 0.0;
    for y in trajectory {
        for (img, uj) in images.iter_mut().zip(v.points()) {
            system.rhs_into(y.as_slice(), uj.as_slice(), None, img.as_mut_slice());
        }
        for _ in 0..samples {
            let us = u.sample(&mut rng);
            system.rhs_into(y.as_slice(), us.as_slice(), None, &mut gy);
            d = d.max(hull_distance(&gy, &images));
        }
    }
    d
}
