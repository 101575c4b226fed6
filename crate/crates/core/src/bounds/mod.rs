//! A-priori error estimates for the quantize-relax-round pipeline: the
//! Groenwall envelope, the coverage and rounding constants `M1`, `M2`, the
//! amplification over a horizon, the model-error recursion and the composite
//! bounds of the different transformation routes.

mod constants;
mod experiment;

use serde::{Deserialize, Serialize};

pub use constants::{estimate_constants, inflate_box, stage_lipschitz, ConstantsEstimate, SamplingSpec};
pub use experiment::{
    gronwall_check, verify_bounds_experiment, BoundRow, BoundViolation, BoundsExperimentConfig, BoundsReport,
    GronwallCheck, GronwallConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum BoundsError {
    #[error("missing bound component: {0}")]
    MissingComponent(&'static str),
    #[error("{0}")]
    BoundViolated(BoundViolation),
    #[error("invalid bounds setup: {0}")]
    Config(String),
    #[error("{0}")]
    Run(String),
}

/// `(M + gap) e^{L t}`.
pub fn gronwall_envelope(m: f64, y0_gap: f64, l: f64, t: f64) -> f64 {
    (m + y0_gap) * (l * t).exp()
}

/// `M1 = T D`.
pub fn m1_bound(d: f64, t: f64) -> f64 {
    t * d
}

/// `M2 = (C2 + C1 T)(m - 1) dt`.
pub fn m2_bound(c1: f64, c2: f64, t: f64, m: usize, dt: f64) -> f64 {
    (c2 + c1 * t) * (m.saturating_sub(1)) as f64 * dt
}

/// `e^{L dt} (e^{p L dt} - 1) / (e^{L dt} - 1)`, i.e. `sum_{i=1}^p e^{i L dt}`,
/// evaluated through `expm1` so that it tends to `p` as `L dt -> 0`.
pub fn amplification(l: f64, dt: f64, p: usize) -> f64 {
    let x = l * dt;
    if x == 0.0 {
        return p as f64;
    }
    x.exp() * (p as f64 * x).exp_m1() / x.exp_m1()
}

/// Iterates `E_model(t_i) = E(E_model(t_{i-1}), dt)` from `e0`; returns
/// `p + 1` values. Warns if spot checks find `E` decreasing in its first
/// argument, which the recursion assumes it is not.
pub fn model_error_sequence<F: Fn(f64, f64) -> f64>(e0: f64, one_step: F, dt: f64, p: usize) -> Vec<f64> {
    for e in [0.0, 1e-6, 1e-3, 1.0] {
        if one_step(e * 2.0 + 1e-9, dt) < one_step(e, dt) {
            log::warn!("one-step model error bound is not monotone near {e}");
        }
    }
    let mut out = Vec::with_capacity(p + 1);
    let mut e = e0;
    out.push(e);
    for _ in 0..p {
        e = one_step(e, dt);
        out.push(e);
    }
    out
}

/// One-step bound for a constant additive perturbation of size `eps`:
/// `E(e, dt) = (eps dt + e) e^{L dt}`.
pub fn duffing_one_step(eps: f64, l: f64) -> impl Fn(f64, f64) -> f64 {
    move |e, dt| (eps * dt + e) * (l * dt).exp()
}

/// Inputs of [`composite_bounds`]; every field is required.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetInputs {
    pub l_p: Option<f64>,
    pub l_g: Option<f64>,
    pub l_gr: Option<f64>,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub m2r: Option<f64>,
    pub dt: Option<f64>,
    pub horizon: Option<usize>,
    /// `E_model(t_0), ..., E_model(t_p)`.
    pub e_model: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub m1: f64,
    pub m2: f64,
    pub m2r: f64,
    pub amplification: f64,
    pub amplification_r: f64,
    pub e_v: f64,
    pub e_mi: f64,
    pub e_mir: f64,
    pub e_model: Vec<f64>,
    pub e_r: f64,
    pub e1: f64,
    pub e2a: f64,
    pub e2b: f64,
    pub e3: f64,
}

/// `E_V = L_P M1 A`, `E_MI = L_P M2 A`, `E_MIr = L_P M2r A_r`,
/// `E_r = 2 L_P sum_{i=0}^p E_model(t_i)` and the composites
/// `E1 = E_V + E_MI + E_r`, `E2a = E_V + E_MI + 2 E_r + E_MIr`,
/// `E2b = E_V + E_MI + E_r`, `E3 = E_V + E_r`.
pub fn composite_bounds(inputs: &BudgetInputs) -> Result<ErrorBudget, BoundsError> {
    use BoundsError::MissingComponent as Missing;
    let l_p = inputs.l_p.ok_or(Missing("l_p"))?;
    let l_g = inputs.l_g.ok_or(Missing("l_g"))?;
    let l_gr = inputs.l_gr.ok_or(Missing("l_gr"))?;
    let m1 = inputs.m1.ok_or(Missing("m1"))?;
    let m2 = inputs.m2.ok_or(Missing("m2"))?;
    let m2r = inputs.m2r.ok_or(Missing("m2r"))?;
    let dt = inputs.dt.ok_or(Missing("dt"))?;
    let p = inputs.horizon.ok_or(Missing("horizon"))?;
    let e_model = inputs.e_model.clone().ok_or(Missing("e_model"))?;
    let amp = amplification(l_g, dt, p);
    let amp_r = amplification(l_gr, dt, p);
    let e_v = l_p * m1 * amp;
    let e_mi = l_p * m2 * amp;
    let e_mir = l_p * m2r * amp_r;
    let e_r = 2.0 * l_p * e_model.iter().take(p + 1).sum::<f64>();
    Ok(ErrorBudget {
        m1,
        m2,
        m2r,
        amplification: amp,
        amplification_r: amp_r,
        e_v,
        e_mi,
        e_mir,
        e_model,
        e_r,
        e1: e_v + e_mi + e_r,
        e2a: e_v + e_mi + 2.0 * e_r + e_mir,
        e2b: e_v + e_mi + e_r,
        e3: e_v + e_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gronwall_cases() {
        assert_eq!(gronwall_envelope(0.0, 0.0, 3.0, 2.0), 0.0);
        assert_eq!(gronwall_envelope(0.4, 0.1, 0.0, 5.0), 0.5);
        assert!((gronwall_envelope(1.0, 0.0, 1.0, 1.0) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn m_bounds() {
        assert_eq!(m1_bound(0.0, 3.0), 0.0);
        assert_eq!(m2_bound(1.0, 2.0, 1.0, 3, 0.0), 0.0);
        assert!((m2_bound(1.0, 2.0, 1.0, 3, 0.01) - 0.06).abs() < 1e-15);
        assert_eq!(m2_bound(1.0, 2.0, 1.0, 1, 0.01), 0.0);
    }

    #[test]
    fn amplification_special_cases() {
        assert_eq!(amplification(0.0, 0.1, 7), 7.0);
        for (l, dt) in [(0.5, 0.1), (3.0, 0.002), (10.0, 0.05)] {
            assert!(((amplification(l, dt, 1) - (l * dt).exp()) / (l * dt).exp()).abs() < 1e-13);
            let direct: f64 = (1..=5).map(|i| (i as f64 * l * dt).exp()).sum();
            assert!(((amplification(l, dt, 5) - direct) / direct).abs() < 1e-12);
        }
    }

    #[test]
    fn amplification_limit_is_p() {
        for p in 1..=10 {
            for l in [0.1, 1.0, 10.0] {
                assert!((amplification(l, 1e-10, p) - p as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn model_error_recursion() {
        let zero = model_error_sequence(0.0, duffing_one_step(0.0, 2.0), 0.01, 5);
        assert_eq!(zero, vec![0.0; 6]);
        let (eps, l, dt) = (0.1, 2.0, 0.002);
        let seq = model_error_sequence(0.0, duffing_one_step(eps, l), dt, 50);
        assert!((seq[1] - eps * dt * (l * dt).exp()).abs() < 1e-18);
        assert!(seq.windows(2).all(|w| w[1] >= w[0]));
    }

    fn full_inputs() -> BudgetInputs {
        BudgetInputs {
            l_p: Some(2.0),
            l_g: Some(1.5),
            l_gr: Some(1.6),
            m1: Some(0.01),
            m2: Some(0.02),
            m2r: Some(0.03),
            dt: Some(0.01),
            horizon: Some(3),
            e_model: Some(vec![0.0, 0.001, 0.002, 0.004]),
        }
    }

    #[test]
    fn composites_follow_their_formulas() {
        let b = composite_bounds(&full_inputs()).unwrap();
        let a = amplification(1.5, 0.01, 3);
        let ar = amplification(1.6, 0.01, 3);
        let (ev, emi, emir, er) = (2.0 * 0.01 * a, 2.0 * 0.02 * a, 2.0 * 0.03 * ar, 2.0 * 2.0 * 0.007);
        assert!((b.e_v - ev).abs() < 1e-15 && (b.e_mi - emi).abs() < 1e-15 && (b.e_mir - emir).abs() < 1e-15);
        assert!((b.e_r - er).abs() < 1e-15);
        assert!((b.e1 - (ev + emi + er)).abs() < 1e-15);
        assert!((b.e2a - (ev + emi + 2.0 * er + emir)).abs() < 1e-15);
        assert!((b.e2b - (ev + emi + er)).abs() < 1e-15);
        assert!((b.e3 - (ev + er)).abs() < 1e-15);
    }

    #[test]
    fn exact_model_and_coverage_collapse() {
        let mut i = full_inputs();
        i.m1 = Some(0.0);
        i.e_model = Some(vec![0.0; 4]);
        let b = composite_bounds(&i).unwrap();
        assert_eq!(b.e3, 0.0);
        assert_eq!(b.e1, b.e_mi);
        assert_eq!(b.e2b, b.e_mi);
    }

    #[test]
    fn missing_component_is_named() {
        let mut i = full_inputs();
        i.m2r = None;
        assert!(matches!(composite_bounds(&i), Err(BoundsError::MissingComponent("m2r"))));
    }

    #[test]
    fn duffing_e3_is_tighter_than_e2b() {
        let (eps, l, dt) = (0.1, 3.0, 2e-3);
        for p in 1..=5 {
            let inputs = BudgetInputs {
                l_p: Some(4.0),
                l_g: Some(l),
                l_gr: Some(l),
                m1: Some(0.0),
                m2: Some(m2_bound(30.0, 6.0, p as f64 * dt, 2, dt)),
                m2r: Some(m2_bound(30.0, 6.0, p as f64 * dt, 2, dt)),
                dt: Some(dt),
                horizon: Some(p),
                e_model: Some(model_error_sequence(0.0, duffing_one_step(eps, l), dt, p)),
            };
            let b = composite_bounds(&inputs).unwrap();
            assert!(b.e3 < b.e2b, "p={p}");
        }
    }

    proptest! {
        #[test]
        fn amplification_at_least_p(l in 0.0f64..20.0, dt in 1e-6f64..0.1, p in 1usize..60) {
            prop_assert!(amplification(l, dt, p) >= p as f64 * (1.0 - 1e-12));
        }

        #[test]
        fn composites_monotone_in_components(
            base in prop::collection::vec(0.0f64..1.0, 6),
            k in 0usize..6,
            bump in 0.0f64..1.0,
        ) {
            let mk = |v: &[f64]| BudgetInputs {
                l_p: Some(v[0]),
                l_g: Some(v[1] * 5.0),
                l_gr: Some(v[1] * 5.0),
                m1: Some(v[2]),
                m2: Some(v[3]),
                m2r: Some(v[4]),
                dt: Some(0.01),
                horizon: Some(4),
                e_model: Some(vec![v[5]; 5]),
            };
            let lo = composite_bounds(&mk(&base)).unwrap();
            let mut up = base.clone();
            up[k] += bump;
            let hi = composite_bounds(&mk(&up)).unwrap();
            for (a, b) in [(lo.e1, hi.e1), (lo.e2a, hi.e2a), (lo.e2b, hi.e2b), (lo.e3, hi.e3)] {
                prop_assert!(a >= 0.0);
                prop_assert!(b >= a * (1.0 - 1e-12));
            }
            prop_assert!(lo.e2b <= lo.e2a);
        }
    }
}
