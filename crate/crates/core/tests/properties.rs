use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quasimodo::optimize::{
    evaluate_objective, project_simplex, solve_relaxed, ObjectiveSpec, ReferenceSpec, RelaxedPlan, RelaxedProblem,
    SolverConfig,
};
use quasimodo::quantization::{
    hull_distance, integrated_deviation, interpolate_control, is_simplex_row, make_star_set, make_vertex_set,
    sur_round, BoxControlSet, QuantizedControlSet, SurAccumulator,
};
use quasimodo::surrogates::{multi_step_predict, Schedule, Surrogate, SurrogateError};

fn simplex_row(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn line_set(m: usize) -> QuantizedControlSet {
    let u = BoxControlSet::uniform(1, -1.0, 1.0).unwrap();
    let pts = (0..m).map(|j| vec![-1.0 + 2.0 * j as f64 / (m - 1) as f64]).collect();
    QuantizedControlSet::new(pts, u).unwrap()
}

fn plans() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=6, 1usize..=50).prop_flat_map(|(m, p)| {
        prop::collection::vec(prop::collection::vec(0.001f64..1.0, m).prop_map(|r| simplex_row(&r)), p)
    })
}

/// Affine maps `Phi_j(z) = A_j z + b_j` with a sine coupling.
struct Ensemble {
    a: Vec<DMatrix<f64>>,
    b: Vec<Vec<f64>>,
}

impl Ensemble {
    fn random(q: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            a: (0..m).map(|_| DMatrix::from_fn(q, q, |_, _| rng.random_range(-0.8..0.8))).collect(),
            b: (0..m).map(|_| (0..q).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        }
    }
}

impl Surrogate for Ensemble {
    fn obs_dim(&self) -> usize {
        self.b[0].len()
    }
    fn n_controls(&self) -> usize {
        self.a.len()
    }
    fn dt(&self) -> f64 {
        0.1
    }
    fn images(&self, z: &[f64], _h: &mut [f64], out: &mut [f64]) -> Result<(), SurrogateError> {
        let q = z.len();
        for (j, (a, b)) in self.a.iter().zip(&self.b).enumerate() {
            for r in 0..q {
                out[j * q + r] = b[r] + 0.3 * z[(r + 1) % q].sin() + (0..q).map(|c| a[(r, c)] * z[c]).sum::<f64>();
            }
        }
        Ok(())
    }
}

proptest! {
    #[test]
    fn sur_deviation_never_exceeds_m_minus_one(alphas in plans()) {
        let m = alphas[0].len();
        let r = sur_round(&alphas, &mut SurAccumulator::new(m), &line_set(m));
        prop_assert!(integrated_deviation(&alphas, &r.indices) <= (m - 1) as f64);
    }

    #[test]
    fn sur_is_deterministic(alphas in plans()) {
        let m = alphas[0].len();
        let v = line_set(m);
        let mut acc1 = SurAccumulator::new(m);
        let mut acc2 = SurAccumulator::new(m);
        prop_assert_eq!(sur_round(&alphas, &mut acc1, &v), sur_round(&alphas, &mut acc2, &v));
        prop_assert_eq!(acc1, acc2);
    }

    #[test]
    fn split_rounding_matches_one_pass(alphas in plans(), cut in 0usize..50) {
        let m = alphas[0].len();
        let v = line_set(m);
        let cut = cut.min(alphas.len());
        let whole = sur_round(&alphas, &mut SurAccumulator::new(m), &v);
        let mut acc = SurAccumulator::new(m);
        let mut parts = sur_round(&alphas[..cut], &mut acc, &v).indices;
        parts.extend(sur_round(&alphas[cut..], &mut acc, &v).indices);
        prop_assert_eq!(whole.indices, parts);
    }

    #[test]
    fn interpolated_controls_stay_in_box(
        dim in 1usize..=3,
        raw in prop::collection::vec(0.001f64..1.0, 8),
        star in any::<bool>(),
    ) {
        let u = BoxControlSet::new(vec![-2.0; dim], (1..=dim).map(|k| k as f64).collect()).unwrap();
        let v = if star { make_star_set(&u).unwrap() } else { make_vertex_set(&u).unwrap() };
        let w = simplex_row(&raw[..v.len().min(8)]);
        if w.len() == v.len() {
            prop_assert!(u.contains(interpolate_control(&w, &v).as_slice(), 1e-12));
        }
    }

    #[test]
    fn hull_distance_vanishes_on_convex_combinations(raw in prop::collection::vec(0.001f64..1.0, 4)) {
        let u = BoxControlSet::uniform(2, -1.0, 1.0).unwrap();
        let v = make_vertex_set(&u).unwrap();
        let w = simplex_row(&raw);
        let point = interpolate_control(&w, &v);
        prop_assert!(hull_distance(point.as_slice(), v.points()) <= 1e-9);
    }

    #[test]
    fn hull_distance_outside_box_is_excess(x in 1.0f64..3.0, y in -1.0f64..1.0) {
        let u = BoxControlSet::uniform(2, -1.0, 1.0).unwrap();
        let v = make_vertex_set(&u).unwrap();
        prop_assert!((hull_distance(&[x, y], v.points()) - (x - 1.0)).abs() <= 1e-7);
    }

    #[test]
    fn projection_lands_on_simplex_and_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = project_simplex(&v);
        prop_assert!(is_simplex_row(&p, 1e-12));
        let again = project_simplex(&p);
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn relaxed_step_is_affine_in_the_weights(
        ra in prop::collection::vec(0.001f64..1.0, 3),
        rb in prop::collection::vec(0.001f64..1.0, 3),
        lambda in 0.0f64..1.0,
        z0 in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let model = Ensemble::random(2, 3, 7);
        let (a, b) = (simplex_row(&ra), simplex_row(&rb));
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        let step = |w: &[f64]| multi_step_predict(&model, Schedule::Weights(w), &z0, &mut []).unwrap()[0].clone();
        let expected = step(&a) * lambda + step(&b) * (1.0 - lambda);
        prop_assert!((step(&mix) - expected).amax() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solver_descends_from_warm_start_and_stays_feasible(seed in 0u64..1000, p in 1usize..6, m in 2usize..5) {
        let model = Ensemble::random(2, m, seed);
        let obj = ObjectiveSpec::diagonal(&[1.0, 0.5], ReferenceSpec::Constant { value: vec![0.3, -0.2] }).unwrap();
        let pb = RelaxedProblem { model: &model, z0: &[0.5, 0.5], hidden: &[], horizon: p, objective: &obj, t0: 0.0 };
        let cfg = SolverConfig::default();
        let warm = RelaxedPlan::uniform(p, m);
        let res = solve_relaxed(&pb, &cfg, Some(&warm)).unwrap();
        prop_assert!(res.plan.rows().all(|r| is_simplex_row(r, 1e-9)));
        prop_assert!(res.objective <= evaluate_objective(&pb, &warm).unwrap());
        prop_assert!((evaluate_objective(&pb, &res.plan).unwrap() - res.objective).abs() <= 1e-12 * (1.0 + res.objective));
        let again = solve_relaxed(&pb, &cfg, Some(&warm)).unwrap();
        prop_assert_eq!(&again.plan, &res.plan);

        // Shifted optimum as the next warm start: the next solve never ends worse.
        let shifted = res.plan.shifted();
        let next = solve_relaxed(&pb, &cfg, Some(&shifted)).unwrap();
        prop_assert!(next.objective <= evaluate_objective(&pb, &shifted).unwrap());
    }
}

/// Refining the rounding grid by two halves the integrated deviation in time
/// units.
#[test]
fn halving_the_rounding_step_halves_the_deviation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dt = 0.1;
    for m in [2, 3] {
        for _ in 0..5 {
            let coarse: Vec<Vec<f64>> = (0..10)
                .map(|_| simplex_row(&(0..m).map(|_| rng.random_range(0.05..1.0)).collect::<Vec<_>>()))
                .collect();
            let deviation = |k: usize| {
                let fine: Vec<Vec<f64>> = coarse.iter().flat_map(|r| std::iter::repeat_n(r.clone(), k)).collect();
                let r = sur_round(&fine, &mut SurAccumulator::new(m), &line_set(m));
                integrated_deviation(&fine, &r.indices) * dt / k as f64
            };
            for k in [10, 20, 40] {
                let ratio = deviation(2 * k) / deviation(k);
                assert!((0.35..=0.65).contains(&ratio), "m={m} k={k} ratio={ratio}");
            }
        }
    }
}
