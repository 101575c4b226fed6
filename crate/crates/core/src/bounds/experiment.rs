use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::constants::jacobian_inf_norm;
use super::{
    composite_bounds, duffing_one_step, estimate_constants, gronwall_envelope, inflate_box, m1_bound, m2_bound,
    model_error_sequence, stage_lipschitz, BoundsError, BudgetInputs, ConstantsEstimate, ErrorBudget, SamplingSpec,
};
use crate::dynamics::{builtin_system, Plant, SystemModel};
use crate::optimize::{solve_relaxed, ObjectiveSpec, ReferenceSpec, RelaxedPlan, RelaxedProblem, SolverConfig};
use crate::quantization::{
    estimate_d, interpolate_control, make_vertex_set, BoxControlSet, QuantizedControlSet, SurAccumulator,
};
use crate::surrogates::PerturbedModel;

/// Open-loop Duffing setup: the relaxed problem is solved over the whole
/// horizon on the exact model and on a model with the constant offset
/// `(0, epsilon)`, and the offset model's plan is applied to the plant both
/// interpolated and rounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsExperimentConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub u_lower: f64,
    pub u_upper: f64,
    pub dt: f64,
    /// Rounding grid; must divide `dt`. Defaults to `dt`.
    pub dt_sur: Option<f64>,
    pub t_end: f64,
    pub substeps: usize,
    pub y0: Vec<f64>,
    pub q: Vec<f64>,
    pub safety_factor: f64,
    /// Relative widening of the observed state box.
    pub box_margin: f64,
    pub n_traj: usize,
    pub t_sample: f64,
    pub hull_samples: usize,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for BoundsExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: -1.0,
            beta: 1.0,
            delta: 0.0,
            epsilon: 0.1,
            u_lower: -4.0,
            u_upper: 4.0,
            dt: 2e-3,
            dt_sur: None,
            t_end: 1.0,
            substeps: 1,
            y0: vec![0.5, 0.0],
            q: vec![1.0, 0.1],
            safety_factor: 1.1,
            box_margin: 0.2,
            n_traj: 20,
            t_sample: 0.2,
            hull_samples: 20,
            solver: SolverConfig {
                max_iters: 400,
                tolerance: 1e-9,
                ..SolverConfig::default()
            },
            seed: 0,
        }
    }
}

impl BoundsExperimentConfig {
    pub fn horizon(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn fine_per_step(&self) -> Result<usize, BoundsError> {
        let dts = self.dt_sur.unwrap_or(self.dt);
        let n = (self.dt / dts).round();
        if n < 1.0 || (n * dts - self.dt).abs() > 1e-9 * self.dt {
            return Err(BoundsError::Config(format!("dt_sur {dts} does not divide dt {}", self.dt)));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<(), BoundsError> {
        let bad = |m: String| Err(BoundsError::Config(m));
        if !(self.dt > 0.0 && self.t_end >= self.dt) {
            return bad(format!("need 0 < dt <= t_end, got dt {} t_end {}", self.dt, self.t_end));
        }
        if !(self.u_lower < self.u_upper) {
            return bad("u_lower must be below u_upper".into());
        }
        if self.y0.len() != 2 || self.q.len() != 2 {
            return bad("y0 and q need two entries".into());
        }
        if self.safety_factor < 1.0 || self.box_margin < 0.0 || self.epsilon < 0.0 {
            return bad("safety_factor >= 1, box_margin >= 0 and epsilon >= 0 required".into());
        }
        if self.n_traj == 0 || self.substeps == 0 {
            return bad("n_traj and substeps must be positive".into());
        }
        self.fine_per_step()?;
        self.solver.validate().map_err(|e| BoundsError::Config(e.to_string()))
    }

    fn system(&self, epsilon: f64) -> Result<SystemModel, BoundsError> {
        let params: BTreeMap<String, f64> = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta", self.delta),
            ("epsilon", epsilon),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        builtin_system("duffing", &params).map_err(|e| BoundsError::Config(e.to_string()))
    }
}

/// Realized objective gaps and bounds over the first `k` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub k: usize,
    pub time: f64,
    pub gap_interp: f64,
    pub gap_sur: f64,
    pub e3: f64,
    pub e2b: f64,
    pub y_star: Vec<f64>,
    pub y_interp: Vec<f64>,
    pub y_sur: Vec<f64>,
    /// Controls applied on `[t_{k-1}, t_k)`; the rounded one is averaged
    /// over the fine grid.
    pub u_star: f64,
    pub u_interp: f64,
    pub u_sur: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub k: usize,
    pub which: String,
    pub realized: f64,
    pub bound: f64,
}

impl fmt::Display for BoundViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bound {} violated at step {}: realized {:.6e} > bound {:.6e}",
            self.which, self.k, self.realized, self.bound
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub config: BoundsExperimentConfig,
    pub constants: ConstantsEstimate,
    /// Constants after the safety factor.
    pub constants_used: ConstantsEstimate,
    pub l_p: f64,
    pub d: f64,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    /// Budget over the full horizon.
    pub budget: ErrorBudget,
    pub objective_star: f64,
    pub objective_interp: f64,
    pub objective_sur: f64,
    pub rows: Vec<BoundRow>,
    pub violations: Vec<BoundViolation>,
    pub final_state_interp: Vec<f64>,
    pub final_state_sur: Vec<f64>,
    pub wall_time: f64,
}

impl BoundsReport {
    pub fn check(&self) -> Result<(), BoundsError> {
        match self.violations.first() {
            Some(v) => Err(BoundsError::BoundViolated(v.clone())),
            None => Ok(()),
        }
    }

    /// Writes `bounds_report.json`, `bounds.csv` and `plot_bounds.py`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("bounds_report.json"), json)?;
        let mut w = csv::Writer::from_path(dir.join("bounds.csv"))?;
        w.write_record([
            "k", "time", "gap_interp", "gap_sur", "e3", "e2b", "ystar_1", "ystar_2", "yinterp_1", "yinterp_2",
            "ysur_1", "ysur_2", "u_star", "u_interp", "u_sur",
        ])?;
        for r in &self.rows {
            let mut rec = vec![r.k.to_string()];
            let nums = [r.time, r.gap_interp, r.gap_sur, r.e3, r.e2b]
                .into_iter()
                .chain(r.y_star.iter().copied())
                .chain(r.y_interp.iter().copied())
                .chain(r.y_sur.iter().copied())
                .chain([r.u_star, r.u_interp, r.u_sur]);
            rec.extend(nums.map(|x| format!("{x:.16e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        std::fs::write(dir.join("plot_bounds.py"), PLOT_SCRIPT)
    }
}

const PLOT_SCRIPT: &str = r#"import csv
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

with open("bounds.csv") as f:
    rows = list(csv.DictReader(f))
d = {k: [float(r[k]) for r in rows] for k in rows[0]}
fig, ax = plt.subplots(3, 1, sharex=True, figsize=(8, 9))
ax[0].semilogy(d["time"], d["e3"], "b--", label="E3")
ax[0].semilogy(d["time"], d["e2b"], "r--", label="E2b")
ax[0].semilogy(d["time"], [max(x, 1e-16) for x in d["gap_interp"]], "b", label="gap interpolated")
ax[0].semilogy(d["time"], [max(x, 1e-16) for x in d["gap_sur"]], "r", label="gap rounded")
ax[0].set_ylabel("objective gap")
for k, c in (("1", "-"), ("2", ":")):
    ax[1].plot(d["time"], d["ystar_" + k], "k" + c, label="y* " + k)
    ax[1].plot(d["time"], d["yinterp_" + k], "b" + c, label="interpolated " + k)
    ax[1].plot(d["time"], d["ysur_" + k], "r" + c, label="rounded " + k)
ax[1].set_ylabel("state")
ax[2].step(d["time"], d["u_star"], "k", where="pre", label="u*")
ax[2].step(d["time"], d["u_interp"], "b", where="pre", label="interpolated")
ax[2].step(d["time"], d["u_sur"], "r", where="pre", alpha=0.5, label="rounded")
ax[2].set_ylabel("control")
ax[2].set_xlabel("t")
for a in ax:
    a.legend(fontsize=6)
fig.tight_layout()
fig.savefig("bounds.png", dpi=150)
"#;

struct Simulated {
    states: Vec<Vec<f64>>,
    controls: Vec<f64>,
}

fn simulate_interpolated(
    plant: &SystemModel,
    cfg: &BoundsExperimentConfig,
    plan: &RelaxedPlan,
    v: &QuantizedControlSet,
) -> Result<Simulated, BoundsError> {
    let mut p = Plant::new(plant.clone(), 0.0, &cfg.y0).map_err(|e| BoundsError::Run(e.to_string()))?;
    let mut out = Simulated {
        states: vec![cfg.y0.clone()],
        controls: Vec::new(),
    };
    for row in plan.rows() {
        let u = interpolate_control(row, v);
        p.advance(u.as_slice(), cfg.dt, cfg.substeps).map_err(|e| BoundsError::Run(e.to_string()))?;
        out.states.push(p.state().to_vec());
        out.controls.push(u[0]);
    }
    Ok(out)
}

fn simulate_rounded(
    plant: &SystemModel,
    cfg: &BoundsExperimentConfig,
    plan: &RelaxedPlan,
    v: &QuantizedControlSet,
) -> Result<Simulated, BoundsError> {
    let n_fine = cfg.fine_per_step()?;
    let h = cfg.dt / n_fine as f64;
    let sub = cfg.substeps.div_ceil(n_fine).max(1);
    let mut p = Plant::new(plant.clone(), 0.0, &cfg.y0).map_err(|e| BoundsError::Run(e.to_string()))?;
    let mut acc = SurAccumulator::new(v.len());
    let mut out = Simulated {
        states: vec![cfg.y0.clone()],
        controls: Vec::new(),
    };
    for row in plan.rows() {
        let mut mean = 0.0;
        for _ in 0..n_fine {
            let u = v.point(acc.round_step(row));
            mean += u[0] / n_fine as f64;
            p.advance(u.as_slice(), h, sub).map_err(|e| BoundsError::Run(e.to_string()))?;
        }
        out.states.push(p.state().to_vec());
        out.controls.push(mean);
    }
    Ok(out)
}

/// `J_k = sum_{i=1}^k P(y_i)` for every `k = 0..=p`.
fn partial_costs(objective: &ObjectiveSpec, states: &[Vec<f64>], dt: f64) -> Vec<f64> {
    let mut d = vec![0.0; objective.dim()];
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for (i, y) in states.iter().enumerate().skip(1) {
        let r = objective.reference().eval(i as f64 * dt);
        acc += objective.stage_cost(y, &r, &mut d);
        out.push(acc);
    }
    out
}

/// Runs the Duffing experiment and compares the realized objective gaps
/// `|J_k(y*) - J_k(y)|` of the interpolated and the rounded application of
/// the offset model's plan with the bounds `E3` and `E2b` at every step `k`.
/// Violations are collected in the report; see [`BoundsReport::check`].
pub fn verify_bounds_experiment(cfg: &BoundsExperimentConfig) -> Result<BoundsReport, BoundsError> {
    cfg.validate()?;
    let start = Instant::now();
    let p = cfg.horizon();
    let plant = cfg.system(0.0)?;
    let u_set = BoxControlSet::uniform(1, cfg.u_lower, cfg.u_upper).map_err(|e| BoundsError::Config(e.to_string()))?;
    let v = make_vertex_set(&u_set).map_err(|e| BoundsError::Config(e.to_string()))?;
    let run_err = |e: &dyn fmt::Display| BoundsError::Run(e.to_string());
    let exact = PerturbedModel::new(plant.clone(), vec![0.0, 0.0], &v, cfg.dt, cfg.substeps).map_err(|e| run_err(&e))?;
    let offset =
        PerturbedModel::new(plant.clone(), vec![0.0, cfg.epsilon], &v, cfg.dt, cfg.substeps).map_err(|e| run_err(&e))?;
    let objective = ObjectiveSpec::diagonal(&cfg.q, ReferenceSpec::Constant { value: vec![0.0; 2] })
        .map_err(|e| BoundsError::Config(e.to_string()))?;

    let solve = |model: &PerturbedModel| {
        let problem = RelaxedProblem {
            model,
            z0: &cfg.y0,
            hidden: &[],
            horizon: p,
            objective: &objective,
            t0: 0.0,
        };
        solve_relaxed(&problem, &cfg.solver, None).map_err(|e| run_err(&e))
    };
    let star_plan = solve(&exact)?;
    let offset_plan = solve(&offset)?;
    log::info!(
        "relaxed solves: exact {:.6} ({} iters), offset {:.6} ({} iters)",
        star_plan.objective,
        star_plan.iterations,
        offset_plan.objective,
        offset_plan.iterations
    );

    let star = simulate_interpolated(&plant, cfg, &star_plan.plan, &v)?;
    let interp = simulate_interpolated(&plant, cfg, &offset_plan.plan, &v)?;
    let sur = simulate_rounded(&plant, cfg, &offset_plan.plan, &v)?;
    let j_star = partial_costs(&objective, &star.states, cfg.dt);
    let j_interp = partial_costs(&objective, &interp.states, cfg.dt);
    let j_sur = partial_costs(&objective, &sur.states, cfg.dt);

    let all: Vec<&Vec<f64>> = star.states.iter().chain(&interp.states).chain(&sur.states).collect();
    let (lo, hi) = inflate_box(&all, cfg.box_margin);
    let l_p = stage_lipschitz(&objective, 0.0, &lo, &hi, cfg.seed);
    let sampling = SamplingSpec {
        n_traj: cfg.n_traj,
        t_sample: cfg.t_sample,
        dt: cfg.dt,
        state_lower: lo.clone(),
        state_upper: hi.clone(),
        seed: cfg.seed,
    };
    let constants = estimate_constants(&plant, Some(offset.perturbed_system()), &v, &sampling);
    let used = constants.inflated(cfg.safety_factor);
    let star_states: Vec<DVector<f64>> = star.states.iter().map(|y| DVector::from_column_slice(y)).collect();
    let d = estimate_d(&plant, &star_states, &u_set, &v, cfg.hull_samples, cfg.seed) * cfg.safety_factor;

    let dt_sur = cfg.dt_sur.unwrap_or(cfg.dt);
    let e_model = model_error_sequence(0.0, duffing_one_step(cfg.epsilon, used.l_g), cfg.dt, p);
    let budget_at = |k: usize| {
        let t = k as f64 * cfg.dt;
        composite_bounds(&BudgetInputs {
            l_p: Some(l_p),
            l_g: Some(used.l_g),
            l_gr: used.l_gr,
            m1: Some(m1_bound(d, t)),
            m2: Some(m2_bound(used.c1, used.c2, t, v.len(), dt_sur)),
            m2r: match (used.c1r, used.c2r) {
                (Some(c1), Some(c2)) => Some(m2_bound(c1, c2, t, v.len(), dt_sur)),
                _ => None,
            },
            dt: Some(cfg.dt),
            horizon: Some(k),
            e_model: Some(e_model[..=k].to_vec()),
        })
    };

    let mut rows = Vec::with_capacity(p);
    let mut violations = Vec::new();
    for k in 1..=p {
        let b = budget_at(k)?;
        let row = BoundRow {
            k,
            time: k as f64 * cfg.dt,
            gap_interp: (j_interp[k] - j_star[k]).abs(),
            gap_sur: (j_sur[k] - j_star[k]).abs(),
            e3: b.e3,
            e2b: b.e2b,
            y_star: star.states[k].clone(),
            y_interp: interp.states[k].clone(),
            y_sur: sur.states[k].clone(),
            u_star: star.controls[k - 1],
            u_interp: interp.controls[k - 1],
            u_sur: sur.controls[k - 1],
        };
        for (which, realized, bound) in [
            ("E3", row.gap_interp, row.e3),
            ("E2b", row.gap_sur, row.e2b),
            ("E3<=E2b", row.e3, row.e2b),
        ] {
            if !(realized <= bound) {
                violations.push(BoundViolation {
                    k,
                    which: which.into(),
                    realized,
                    bound,
                });
            }
        }
        rows.push(row);
    }
    Ok(BoundsReport {
        config: cfg.clone(),
        constants,
        constants_used: used.clone(),
        l_p,
        d,
        state_lower: lo,
        state_upper: hi,
        budget: budget_at(p)?,
        objective_star: j_star[p],
        objective_interp: j_interp[p],
        objective_sur: j_sur[p],
        rows,
        violations,
        final_state_interp: interp.states[p].clone(),
        final_state_sur: sur.states[p].clone(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Random Duffing pairs `g` and `g + (0, eps)` driven by the same random
/// piecewise-constant control from a shared initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GronwallConfig {
    pub n_pairs: usize,
    pub eps_max: f64,
    pub t_end: f64,
    pub dt: f64,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub u_lower: f64,
    pub u_upper: f64,
    pub safety_factor: f64,
    pub seed: u64,
}

impl Default for GronwallConfig {
    fn default() -> Self {
        Self {
            n_pairs: 100,
            eps_max: 0.2,
            t_end: 1.0,
            dt: 2e-3,
            state_lower: vec![-1.5, -1.5],
            state_upper: vec![1.5, 1.5],
            u_lower: -4.0,
            u_upper: 4.0,
            safety_factor: 1.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallCheck {
    pub n_pairs: usize,
    /// Pairs with at least one step above the envelope.
    pub violations: usize,
    /// Largest realized deviation divided by the envelope, over all steps
    /// after the first.
    pub worst_ratio: f64,
}

/// Checks `|y(t) - y_eps(t)|_inf <= (eps t) e^{L t}` along every pair, with
/// `L` the largest Jacobian max-norm seen along the pair times the safety
/// factor.
pub fn gronwall_check(cfg: &GronwallConfig) -> Result<GronwallCheck, BoundsError> {
    let base = builtin_system("duffing", &BTreeMap::new()).map_err(|e| BoundsError::Config(e.to_string()))?;
    let steps = (cfg.t_end / cfg.dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = GronwallCheck {
        n_pairs: cfg.n_pairs,
        violations: 0,
        worst_ratio: 0.0,
    };
    let mut buf = (vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]);
    for _ in 0..cfg.n_pairs {
        let eps = rng.random_range(0.0..=cfg.eps_max);
        let pert = builtin_system("duffing", &BTreeMap::from([("epsilon".to_string(), eps)]))
            .map_err(|e| BoundsError::Config(e.to_string()))?;
        let y0: Vec<f64> = (0..2).map(|i| rng.random_range(cfg.state_lower[i]..=cfg.state_upper[i])).collect();
        let mut a = Plant::new(base.clone(), 0.0, &y0).map_err(|e| BoundsError::Run(e.to_string()))?;
        let mut b = Plant::new(pert, 0.0, &y0).map_err(|e| BoundsError::Run(e.to_string()))?;
        let mut l: f64 = 0.0;
        let mut devs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let u = [rng.random_range(cfg.u_lower..=cfg.u_upper)];
            l = l.max(jacobian_inf_norm(&base, a.state(), &u, &mut buf));
            l = l.max(jacobian_inf_norm(&base, b.state(), &u, &mut buf));
            a.advance(&u, cfg.dt, 1).map_err(|e| BoundsError::Run(e.to_string()))?;
            b.advance(&u, cfg.dt, 1).map_err(|e| BoundsError::Run(e.to_string()))?;
            let dev = a.state().iter().zip(b.state()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            devs.push(dev);
        }
        l = l.max(jacobian_inf_norm(&base, a.state(), &[0.0], &mut buf));
        l *= cfg.safety_factor;
        let mut violated = false;
        for (i, dev) in devs.into_iter().enumerate() {
            let t = (i + 1) as f64 * cfg.dt;
            let env = gronwall_envelope(eps * t, 0.0, l, t);
            if dev > env {
                violated = true;
            }
            if env > 0.0 {
                out.worst_ratio = out.worst_ratio.max(dev / env);
            }
        }
        out.violations += violated as usize;
    }
    Ok(out)
}
