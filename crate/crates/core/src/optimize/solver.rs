use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::simplex::project_in_place;
use super::{ObjectiveSpec, OptimizeError, RelaxedPlan};
use crate::surrogates::{combine, Surrogate};

/// How the solver differentiates the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Central differences in every weight, replaying only the rollout tail
    /// after the perturbed step.
    Entrywise,
    /// Central differences of the one-step maps in the observable, chained
    /// backwards through the horizon. Only for models without hidden state.
    Adjoint,
    /// `Adjoint` when the model is stateless and it needs fewer model
    /// evaluations, `Entrywise` otherwise.
    #[default]
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    pub gradient: GradientMethod,
    /// Barzilai-Borwein trial steps after the first iteration.
    pub barzilai_borwein: bool,
    /// Extra random starting plans; the best result wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            armijo_c: 1e-4,
            backtrack: 0.5,
            initial_step: 1.0,
            max_backtracks: 40,
            fd_step: 1e-6,
            tolerance: 1e-6,
            gradient: GradientMethod::Auto,
            barzilai_borwein: true,
            restarts: 0,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |what: &str| Err(OptimizeError::InvalidConfig(what.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c must lie in (0, 1)");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack must lie in (0, 1)");
        }
        if !(self.initial_step > 0.0 && self.fd_step > 0.0 && self.tolerance > 0.0) {
            return bad("step sizes and tolerance must be positive");
        }
        if self.max_backtracks == 0 {
            return bad("max_backtracks must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Best plan so far after `max_iters` iterations.
    MaxItersReached,
    /// The line search found no decrease along the projected direction.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub plan: RelaxedPlan,
    pub objective: f64,
    pub iterations: usize,
    /// Number of `images` calls, the unit of surrogate work.
    pub evaluations: usize,
    pub status: SolveStatus,
}

/// One instance of the relaxed problem.
#[derive(Clone, Copy)]
pub struct RelaxedProblem<'a> {
    pub model: &'a dyn Surrogate,
    pub z0: &'a [f64],
    /// Hidden state of recurrent models at `t0`; empty otherwise.
    pub hidden: &'a [f64],
    pub horizon: usize,
    pub objective: &'a ObjectiveSpec,
    /// Absolute time of `z0`; the reference is evaluated at `t0 + (i+1) dt`.
    pub t0: f64,
}

/// Rollout with cached intermediate states, so that a perturbation of row
/// `i` only replays steps `i+1..p`.
struct Rollout<'a> {
    model: &'a dyn Surrogate,
    objective: &'a ObjectiveSpec,
    q: usize,
    m: usize,
    p: usize,
    nh: usize,
    refs: Vec<f64>,
    z: Vec<f64>,
    hidden: Vec<f64>,
    images: Vec<f64>,
    stage: Vec<f64>,
    zt: Vec<f64>,
    ht: Vec<f64>,
    imt: Vec<f64>,
    imt2: Vec<f64>,
    d: Vec<f64>,
    evaluations: usize,
}

impl<'a> Rollout<'a> {
    fn new(pb: &RelaxedProblem<'a>) -> Result<Self, OptimizeError> {
        let model = pb.model;
        let (q, m, p, nh) = (model.obs_dim(), model.n_controls(), pb.horizon, model.hidden_dim());
        if p == 0 {
            return Err(OptimizeError::InvalidPlan("horizon must be at least 1".into()));
        }
        if pb.z0.len() != q || pb.objective.dim() != q {
            return Err(OptimizeError::Dimension(format!(
                "z0 has length {}, objective {}, model observable {q}",
                pb.z0.len(),
                pb.objective.dim()
            )));
        }
        if pb.hidden.len() != nh {
            return Err(OptimizeError::Dimension(format!(
                "hidden state has length {}, model expects {nh}",
                pb.hidden.len()
            )));
        }
        let dt = model.dt();
        let mut refs = vec![0.0; p * q];
        for (i, r) in refs.chunks_mut(q).enumerate() {
            pb.objective.reference().eval_into(pb.t0 + (i + 1) as f64 * dt, r);
        }
        let mut z = vec![0.0; (p + 1) * q];
        z[..q].copy_from_slice(pb.z0);
        let mut hidden = vec![0.0; (p + 1) * nh];
        hidden[..nh].copy_from_slice(pb.hidden);
        Ok(Self {
            model,
            objective: pb.objective,
            q,
            m,
            p,
            nh,
            refs,
            z,
            hidden,
            images: vec![0.0; p * m * q],
            stage: vec![0.0; p],
            zt: vec![0.0; q],
            ht: vec![0.0; nh],
            imt: vec![0.0; m * q],
            imt2: vec![0.0; m * q],
            d: vec![0.0; q],
            evaluations: 0,
        })
    }

    /// Full rollout; refreshes every cache.
    fn evaluate(&mut self, w: &[f64]) -> Result<f64, OptimizeError> {
        let (q, m, nh) = (self.q, self.m, self.nh);
        let mut total = 0.0;
        for i in 0..self.p {
            let (hprev, hnext) = self.hidden.split_at_mut((i + 1) * nh);
            let hnext = &mut hnext[..nh];
            hnext.copy_from_slice(&hprev[i * nh..]);
            let (zprev, znext) = self.z.split_at_mut((i + 1) * q);
            let images = &mut self.images[i * m * q..(i + 1) * m * q];
            self.model.images(&zprev[i * q..], hnext, images)?;
            self.evaluations += 1;
            let znext = &mut znext[..q];
            combine(images, &w[i * m..(i + 1) * m], znext);
            self.stage[i] = self.objective.stage_cost(znext, &self.refs[i * q..(i + 1) * q], &mut self.d);
            total += self.stage[i];
        }
        Ok(total)
    }

    /// Objective when `z_{i+1}` is replaced by `z_next` and the weights of
    /// rows after `i` are taken from `w`.
    fn tail(&mut self, i: usize, z_next: &[f64], w: &[f64]) -> Result<f64, OptimizeError> {
        let (q, m, nh) = (self.q, self.m, self.nh);
        let mut total: f64 = self.stage[..i].iter().sum();
        self.zt.copy_from_slice(z_next);
        total += self.objective.stage_cost(&self.zt, &self.refs[i * q..(i + 1) * q], &mut self.d);
        self.ht.copy_from_slice(&self.hidden[(i + 1) * nh..(i + 2) * nh]);
        for k in i + 1..self.p {
            self.model.images(&self.zt, &mut self.ht, &mut self.imt)?;
            self.evaluations += 1;
            combine(&self.imt, &w[k * m..(k + 1) * m], &mut self.zt);
            total += self.objective.stage_cost(&self.zt, &self.refs[k * q..(k + 1) * q], &mut self.d);
        }
        Ok(total)
    }

    /// Central-difference gradient in every weight. The caches must hold the
    /// rollout of `w`.
    fn gradient_entrywise(&mut self, w: &[f64], h: f64, grad: &mut [f64]) -> Result<(), OptimizeError> {
        let (q, m) = (self.q, self.m);
        let mut zp = vec![0.0; q];
        for i in 0..self.p {
            for j in 0..m {
                let base = (i * m + j) * q;
                for c in 0..q {
                    zp[c] = self.z[(i + 1) * q + c] + h * self.images[base + c];
                }
                let jp = self.tail(i, &zp, w)?;
                for c in 0..q {
                    zp[c] = self.z[(i + 1) * q + c] - h * self.images[base + c];
                }
                let jm = self.tail(i, &zp, w)?;
                grad[i * m + j] = (jp - jm) / (2.0 * h);
            }
        }
        Ok(())
    }

    /// Backward recursion `lambda_i = J_i^T (lambda_{i+1} + grad P_i)` with
    /// the Jacobians of the relaxed one-step map taken by central
    /// differences. The caches must hold the rollout of `w`.
    fn gradient_adjoint(&mut self, w: &[f64], h: f64, grad: &mut [f64]) -> Result<(), OptimizeError> {
        debug_assert_eq!(self.nh, 0);
        let (q, m) = (self.q, self.m);
        let mut lam = vec![0.0; q];
        let mut gz = vec![0.0; q];
        for i in (0..self.p).rev() {
            gz.copy_from_slice(&lam);
            self.objective
                .add_stage_gradient(&self.z[(i + 1) * q..(i + 2) * q], &self.refs[i * q..(i + 1) * q], &mut gz);
            for j in 0..m {
                let img = &self.images[(i * m + j) * q..(i * m + j + 1) * q];
                grad[i * m + j] = img.iter().zip(&gz).map(|(a, b)| a * b).sum();
            }
            if i == 0 {
                break;
            }
            let row = &w[i * m..(i + 1) * m];
            for c in 0..q {
                self.zt.copy_from_slice(&self.z[i * q..(i + 1) * q]);
                self.zt[c] += h;
                self.model.images(&self.zt, &mut [], &mut self.imt)?;
                self.zt[c] -= 2.0 * h;
                self.model.images(&self.zt, &mut [], &mut self.imt2)?;
                self.evaluations += 2;
                let mut acc = 0.0;
                for (j, &a) in row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let lo = j * q;
                    for r in 0..q {
                        acc += a * (self.imt[lo + r] - self.imt2[lo + r]) * gz[r];
                    }
                }
                lam[c] = acc / (2.0 * h);
            }
        }
        Ok(())
    }
}

/// Objective `sum_i (z_{i+1} - z_ref)^T Q (z_{i+1} - z_ref)` of the relaxed
/// rollout.
pub fn evaluate_objective(problem: &RelaxedProblem<'_>, plan: &RelaxedPlan) -> Result<f64, OptimizeError> {
    let mut r = Rollout::new(problem)?;
    check_plan(&r, plan)?;
    r.evaluate(plan.as_slice())
}

fn check_plan(r: &Rollout<'_>, plan: &RelaxedPlan) -> Result<(), OptimizeError> {
    if plan.horizon() != r.p || plan.n_controls() != r.m {
        return Err(OptimizeError::Dimension(format!(
            "plan is {}x{}, problem is {}x{}",
            plan.horizon(),
            plan.n_controls(),
            r.p,
            r.m
        )));
    }
    Ok(())
}

/// Central differences of `f` in every coordinate of `x`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xt = x.to_vec();
    (0..x.len())
        .map(|k| {
            xt[k] = x[k] + h;
            let fp = f(&xt);
            xt[k] = x[k] - h;
            let fm = f(&xt);
            xt[k] = x[k];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Spectral projected gradient on the product of simplices: Barzilai-Borwein
/// trial steps, projection, Armijo backtracking along the projected
/// direction. Every accepted step decreases the objective, so the result is
/// never worse than the warm start (uniform rows by default).
pub fn solve_relaxed(
    problem: &RelaxedProblem<'_>,
    config: &SolverConfig,
    warm: Option<&RelaxedPlan>,
) -> Result<SolveResult, OptimizeError> {
    config.validate()?;
    let mut r = Rollout::new(problem)?;
    let (p, m) = (r.p, r.m);
    let start = match warm {
        Some(plan) => {
            check_plan(&r, plan)?;
            plan.clone()
        }
        None => RelaxedPlan::uniform(p, m),
    };
    let adjoint = match config.gradient {
        GradientMethod::Entrywise => false,
        GradientMethod::Adjoint => {
            if r.nh > 0 {
                return Err(OptimizeError::InvalidConfig(
                    "adjoint gradients need a model without hidden state".into(),
                ));
            }
            true
        }
        // entrywise replays (p-1)p/2 steps per weight, adjoint 2q steps per row
        GradientMethod::Auto => r.nh == 0 && 2 * r.q < m * (p - 1).max(1),
    };
    log::debug!("relaxed solve p={p} m={m} adjoint={adjoint} warm start {:?}", start.as_slice());

    let mut best = descend(&mut r, start.as_slice().to_vec(), config, adjoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.restarts {
        let w: Vec<f64> = (0..p)
            .flat_map(|_| {
                let e: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |x| x / s)
            })
            .collect();
        let cand = descend(&mut r, w, config, adjoint)?;
        best.iterations += cand.iterations;
        if cand.objective < best.objective {
            best = SolveResult {
                iterations: best.iterations,
                ..cand
            };
        }
    }
    best.evaluations = r.evaluations;
    Ok(best)
}

fn descend(r: &mut Rollout<'_>, mut w: Vec<f64>, cfg: &SolverConfig, adjoint: bool) -> Result<SolveResult, OptimizeError> {
    let (p, m) = (r.p, r.m);
    let n = p * m;
    let mut sorted = Vec::with_capacity(m);
    let project = |v: &mut [f64], sorted: &mut Vec<f64>| {
        for row in v.chunks_mut(m) {
            project_in_place(row, sorted);
        }
    };
    let grad_into = |r: &mut Rollout<'_>, w: &[f64], g: &mut [f64]| {
        if adjoint {
            r.gradient_adjoint(w, cfg.fd_step, g)
        } else {
            r.gradient_entrywise(w, cfg.fd_step, g)
        }
    };
    let finish = |w: Vec<f64>, objective: f64, iterations: usize, status: SolveStatus| SolveResult {
        plan: RelaxedPlan::from_raw(p, m, w),
        objective,
        iterations,
        evaluations: 0,
        status,
    };

    let mut j = r.evaluate(&w)?;
    if j == 0.0 {
        return Ok(finish(w, j, 0, SolveStatus::Converged));
    }
    if !j.is_finite() {
        return Ok(finish(w, j, 0, SolveStatus::Stalled));
    }
    let mut g = vec![0.0; n];
    grad_into(r, &w, &mut g)?;
    let mut step = cfg.initial_step;
    let mut trial = vec![0.0; n];
    let mut cand = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    for iter in 0..cfg.max_iters {
        for k in 0..n {
            trial[k] = w[k] - g[k];
        }
        project(&mut trial, &mut sorted);
        let residual = trial.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if residual < cfg.tolerance {
            return Ok(finish(w, j, iter, SolveStatus::Converged));
        }

        for k in 0..n {
            trial[k] = w[k] - step * g[k];
        }
        project(&mut trial, &mut sorted);
        let slope: f64 = (0..n).map(|k| g[k] * (trial[k] - w[k])).sum();
        if slope >= 0.0 {
            return Ok(finish(w, j, iter, SolveStatus::Converged));
        }
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            for k in 0..n {
                cand[k] = w[k] + lambda * (trial[k] - w[k]);
            }
            let jc = r.evaluate(&cand)?;
            if jc <= j + cfg.armijo_c * lambda * slope {
                accepted = Some(jc);
                break;
            }
            lambda *= cfg.backtrack;
        }
        let Some(jc) = accepted else {
            // caches hold a rejected candidate; the next caller re-evaluates
            return Ok(finish(w, j, iter, SolveStatus::Stalled));
        };
        grad_into(r, &cand, &mut g_new)?;
        let (mut ss, mut sy) = (0.0, 0.0);
        for k in 0..n {
            let s = cand[k] - w[k];
            ss += s * s;
            sy += s * (g_new[k] - g[k]);
        }
        step = if cfg.barzilai_borwein && sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            cfg.initial_step
        };
        std::mem::swap(&mut w, &mut cand);
        std::mem::swap(&mut g, &mut g_new);
        j = jc;
        if j == 0.0 {
            return Ok(finish(w, j, iter + 1, SolveStatus::Converged));
        }
    }
    Ok(finish(w, j, cfg.max_iters, SolveStatus::MaxItersReached))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::ReferenceSpec;
    use crate::surrogates::SurrogateError;
    use nalgebra::DMatrix;

    /// `Phi_j(z) = A_j z + b_j`.
    struct Affine {
        a: Vec<DMatrix<f64>>,
        b: Vec<Vec<f64>>,
    }

    impl Surrogate for Affine {
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
                    out[j * q + r] = b[r] + (0..q).map(|c| a[(r, c)] * z[c]).sum::<f64>();
                }
            }
            Ok(())
        }
    }

    /// Nonlinear map with a hidden accumulator so the entrywise path and
    /// hidden-state caching are exercised.
    struct Recurrent;

    impl Surrogate for Recurrent {
        fn obs_dim(&self) -> usize {
            1
        }
        fn n_controls(&self) -> usize {
            2
        }
        fn dt(&self) -> f64 {
            0.5
        }
        fn hidden_dim(&self) -> usize {
            1
        }
        fn images(&self, z: &[f64], h: &mut [f64], out: &mut [f64]) -> Result<(), SurrogateError> {
            h[0] = 0.5 * h[0] + z[0];
            out[0] = (z[0] + 0.3 * h[0]).sin() + 1.0;
            out[1] = 0.8 * z[0] - 0.2 * h[0] * h[0];
            Ok(())
        }
    }

    fn constant_ref(q: usize) -> ReferenceSpec {
        ReferenceSpec::Constant { value: vec![0.0; q] }
    }

    fn scalar(a: [f64; 2], b: [f64; 2]) -> Affine {
        Affine {
            a: a.iter().map(|&x| DMatrix::from_element(1, 1, x)).collect(),
            b: b.iter().map(|&x| vec![x]).collect(),
        }
    }

    #[test]
    fn one_relaxed_step_closed_form() {
        let model = scalar([0.0, 0.0], [2.0, -1.0]);
        let obj = ObjectiveSpec::diagonal(&[1.0], constant_ref(1)).unwrap();
        let pb = RelaxedProblem {
            model: &model,
            z0: &[0.5],
            hidden: &[],
            horizon: 1,
            objective: &obj,
            t0: 0.0,
        };
        for lam in [0.0, 0.25, 0.7, 1.0] {
            let plan = RelaxedPlan::from_rows(&[vec![lam, 1.0 - lam]]).unwrap();
            let expect = (lam * 2.0 + (1.0 - lam) * -1.0f64).powi(2);
            assert!((evaluate_objective(&pb, &plan).unwrap() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weight_objective_vanishes() {
        let model = scalar([0.9, 1.1], [0.3, -0.2]);
        let obj = ObjectiveSpec::diagonal(&[0.0], constant_ref(1)).unwrap();
        let pb = RelaxedProblem {
            model: &model,
            z0: &[1.0],
            hidden: &[],
            horizon: 4,
            objective: &obj,
            t0: 0.0,
        };
        assert_eq!(evaluate_objective(&pb, &RelaxedPlan::uniform(4, 2)).unwrap(), 0.0);
        let res = solve_relaxed(&pb, &SolverConfig::default(), None).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.plan, RelaxedPlan::uniform(4, 2));
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1] * x[1] + x[1];
        let g = fd_gradient(f, &[0.4, -1.2], 1e-6);
        assert!((g[0] - (6.0 * 0.4 - 1.2)).abs() < 1e-6);
        assert!((g[1] - (0.4 + 4.0 * 1.2 + 1.0)).abs() < 1e-6);
        assert_eq!(fd_gradient(|_| 7.0, &[1.0, 2.0, 3.0], 1e-6), vec![0.0; 3]);
    }

    #[test]
    fn linear_ensemble_gradient_matches_chain_rule() {
        // scalar maps Phi_j(z) = a_j z, p = 2: z1 = (sum_j w0j a_j) z0 =: s0 z0,
        // z2 = s1 z1, J = z1^2 + z2^2 = z0^2 s0^2 (1 + s1^2)
        let (a0, a1, z0) = (0.9, -0.4, 1.3);
        let model = scalar([a0, a1], [0.0, 0.0]);
        let obj = ObjectiveSpec::diagonal(&[1.0], constant_ref(1)).unwrap();
        let pb = RelaxedProblem {
            model: &model,
            z0: &[z0],
            hidden: &[],
            horizon: 2,
            objective: &obj,
            t0: 0.0,
        };
        let w = [0.3, 0.7, 0.6, 0.4];
        let s0 = w[0] * a0 + w[1] * a1;
        let s1 = w[2] * a0 + w[3] * a1;
        let d_s0 = 2.0 * z0 * z0 * s0 * (1.0 + s1 * s1);
        let d_s1 = z0 * z0 * s0 * s0 * 2.0 * s1;
        let analytic = [d_s0 * a0, d_s0 * a1, d_s1 * a0, d_s1 * a1];
        let mut r = Rollout::new(&pb).unwrap();
        r.evaluate(&w).unwrap();
        let mut ge = [0.0; 4];
        r.gradient_entrywise(&w, 1e-6, &mut ge).unwrap();
        let mut ga = [0.0; 4];
        r.gradient_adjoint(&w, 1e-6, &mut ga).unwrap();
        for k in 0..4 {
            assert!((ge[k] - analytic[k]).abs() < 1e-5, "entrywise {k}: {} vs {}", ge[k], analytic[k]);
            assert!((ga[k] - analytic[k]).abs() < 1e-5, "adjoint {k}: {} vs {}", ga[k], analytic[k]);
        }
    }

    #[test]
    fn cached_gradient_matches_plain_differences() {
        let model = Recurrent;
        let obj = ObjectiveSpec::diagonal(&[1.0], ReferenceSpec::Constant { value: vec![0.4] }).unwrap();
        let pb = RelaxedProblem {
            model: &model,
            z0: &[0.2],
            hidden: &[0.1],
            horizon: 4,
            objective: &obj,
            t0: 0.0,
        };
        let w = [0.3, 0.7, 0.9, 0.1, 0.5, 0.5, 0.2, 0.8];
        let plain = fd_gradient(
            |x| {
                let mut r = Rollout::new(&pb).unwrap();
                r.evaluate(x).unwrap()
            },
            &w,
            1e-6,
        );
        let mut r = Rollout::new(&pb).unwrap();
        r.evaluate(&w).unwrap();
        let mut g = [0.0; 8];
        r.gradient_entrywise(&w, 1e-6, &mut g).unwrap();
        for k in 0..8 {
            assert!((g[k] - plain[k]).abs() < 1e-7, "{k}: {} vs {}", g[k], plain[k]);
        }
    }

    #[test]
    fn symmetric_pair_is_balanced() {
        let model = scalar([0.0, 0.0], [1.0, -1.0]);
        let obj = ObjectiveSpec::diagonal(&[1.0], constant_ref(1)).unwrap();
        let pb = RelaxedProblem {
            model: &model,
            z0: &[0.0],
            hidden: &[],
            horizon: 1,
            objective: &obj,
            t0: 0.0,
        };
        let warm = RelaxedPlan::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let res = solve_relaxed(&pb, &SolverConfig::default(), Some(&warm)).unwrap();
        assert!((res.plan.row(0)[0] - 0.5).abs() < 1e-6);
        assert!(res.objective < 1e-10);
    }

    #[test]
    fn never_worse_than_warm_start() {
        let model = Recurrent;
        let obj = ObjectiveSpec::diagonal(&[1.0], ReferenceSpec::Constant { value: vec![2.5] }).unwrap();
        let pb = RelaxedProblem {
            model: &model,
            z0: &[0.2],
            hidden: &[0.0],
            horizon: 3,
            objective: &obj,
            t0: 0.0,
        };
        for warm in [vec![1, 0, 1], vec![0, 0, 0], vec![1, 1, 1]] {
            let plan = RelaxedPlan::from_indices(&warm, 2).unwrap();
            let j0 = evaluate_objective(&pb, &plan).unwrap();
            let cfg = SolverConfig {
                max_iters: 5,
                ..Default::default()
            };
            let res = solve_relaxed(&pb, &cfg, Some(&plan)).unwrap();
            assert!(res.objective <= j0);
            assert!((evaluate_objective(&pb, &res.plan).unwrap() - res.objective).abs() < 1e-12);
            for row in res.plan.rows() {
                assert!(crate::quantization::is_simplex_row(row, 1e-12));
            }
        }
    }

    #[test]
    fn deterministic() {
        let model = Recurrent;
        let obj = ObjectiveSpec::diagonal(&[1.0], ReferenceSpec::Constant { value: vec![1.5] }).unwrap();
        let pb = RelaxedProblem {
            model: &model,
            z0: &[0.2],
            hidden: &[0.0],
            horizon: 3,
            objective: &obj,
            t0: 0.0,
        };
        let cfg = SolverConfig {
            restarts: 2,
            ..Default::default()
        };
        let a = solve_relaxed(&pb, &cfg, None).unwrap();
        let b = solve_relaxed(&pb, &cfg, None).unwrap();
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn adjoint_rejected_for_hidden_state() {
        let obj = ObjectiveSpec::diagonal(&[1.0], constant_ref(1)).unwrap();
        let pb = RelaxedProblem {
            model: &Recurrent,
            z0: &[0.2],
            hidden: &[0.0],
            horizon: 2,
            objective: &obj,
            t0: 0.0,
        };
        let cfg = SolverConfig {
            gradient: GradientMethod::Adjoint,
            ..Default::default()
        };
        assert!(matches!(solve_relaxed(&pb, &cfg, None), Err(OptimizeError::InvalidConfig(_))));
    }
}
