use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Plant, SystemModel};
use crate::optimize::ObjectiveSpec;
use crate::quantization::QuantizedControlSet;

const FD_STEP: f64 = 1e-6;

/// Where and how long to sample the autonomous systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub n_traj: usize,
    pub t_sample: f64,
    pub dt: f64,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub seed: u64,
}

/// Sampled constants, all in the max-norm. Not inflated; see
/// [`ConstantsEstimate::inflated`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsEstimate {
    pub l_g: f64,
    pub c1: f64,
    pub c2: f64,
    pub l_gr: Option<f64>,
    pub c1r: Option<f64>,
    pub c2r: Option<f64>,
    pub n_traj: usize,
    pub samples: usize,
    pub seed: u64,
}

impl ConstantsEstimate {
    /// Every constant multiplied by `factor`.
    pub fn inflated(&self, factor: f64) -> Self {
        Self {
            l_g: self.l_g * factor,
            c1: self.c1 * factor,
            c2: self.c2 * factor,
            l_gr: self.l_gr.map(|x| x * factor),
            c1r: self.c1r.map(|x| x * factor),
            c2r: self.c2r.map(|x| x * factor),
            ..self.clone()
        }
    }
}

struct Sampled {
    l: f64,
    c1: f64,
    c2: f64,
    samples: usize,
}

fn sample_system(system: &SystemModel, v: &QuantizedControlSet, s: &SamplingSpec) -> Sampled {
    let ny = system.state_dim();
    let steps = (s.t_sample / s.dt).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut out = Sampled {
        l: 0.0,
        c1: 0.0,
        c2: 0.0,
        samples: 0,
    };
    let mut g = vec![0.0; ny];
    let mut g_prev = vec![0.0; ny];
    let mut jac_buf = (vec![0.0; ny], vec![0.0; ny], vec![0.0; ny]);
    for _ in 0..s.n_traj {
        let y0: Vec<f64> = (0..ny)
            .map(|i| {
                let (lo, hi) = (s.state_lower[i], s.state_upper[i]);
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                }
            })
            .collect();
        for u in v.points() {
            let u = u.as_slice();
            let Ok(mut plant) = Plant::new(system.clone(), 0.0, &y0) else {
                continue;
            };
            for k in 0..=steps {
                let y = plant.state();
                system.rhs_into(y, u, None, &mut g);
                out.c2 = out.c2.max(inf_norm(&g));
                if k > 0 {
                    let d = g.iter().zip(&g_prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    out.c1 = out.c1.max(d / s.dt);
                }
                out.l = out.l.max(jacobian_inf_norm(system, y, u, &mut jac_buf));
                out.samples += 1;
                g_prev.copy_from_slice(&g);
                if k < steps && plant.advance(u, s.dt, 1).is_err() {
                    break;
                }
            }
        }
    }
    out
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Max row sum of the central-difference Jacobian of `g(., u)` at `y`.
pub(crate) fn jacobian_inf_norm(system: &SystemModel, y: &[f64], u: &[f64], buf: &mut (Vec<f64>, Vec<f64>, Vec<f64>)) -> f64 {
    let n = y.len();
    let (yt, gp, gm) = buf;
    yt.copy_from_slice(y);
    let mut row_sums = vec![0.0; n];
    for c in 0..n {
        let h = FD_STEP * y[c].abs().max(1.0);
        yt[c] = y[c] + h;
        system.rhs_into(yt, u, None, gp);
        yt[c] = y[c] - h;
        system.rhs_into(yt, u, None, gm);
        yt[c] = y[c];
        for r in 0..n {
            row_sums[r] += ((gp[r] - gm[r]) / (2.0 * h)).abs();
        }
    }
    row_sums.into_iter().fold(0.0, f64::max)
}

/// Simulates every autonomous system `u^j` from `n_traj` random initial
/// states and records `C2 = max |g|`, `C1 = max |dg/dt|` (finite
/// differences along the trajectories) and `L_g = max |dg/dy|` (central
/// difference Jacobian), all in the max-norm. The same is done for the
/// surrogate's right-hand side if given. Delay terms are ignored.
pub fn estimate_constants(
    system: &SystemModel,
    surrogate: Option<&SystemModel>,
    v: &QuantizedControlSet,
    sampling: &SamplingSpec,
) -> ConstantsEstimate {
    let main = sample_system(system, v, sampling);
    let sur = surrogate.map(|s| sample_system(s, v, sampling));
    ConstantsEstimate {
        l_g: main.l,
        c1: main.c1,
        c2: main.c2,
        l_gr: sur.as_ref().map(|s| s.l),
        c1r: sur.as_ref().map(|s| s.c1),
        c2r: sur.as_ref().map(|s| s.c2),
        n_traj: sampling.n_traj,
        samples: main.samples + sur.map_or(0, |s| s.samples),
        seed: sampling.seed,
    }
}

/// Component-wise bounding box of `states`, widened about its centre by the
/// factor `1 + margin`.
pub fn inflate_box<S: AsRef<[f64]>>(states: &[S], margin: f64) -> (Vec<f64>, Vec<f64>) {
    let n = states.first().map_or(0, |s| s.as_ref().len());
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for s in states {
        for (i, &x) in s.as_ref().iter().enumerate() {
            lo[i] = lo[i].min(x);
            hi[i] = hi[i].max(x);
        }
    }
    for i in 0..n {
        let (c, r) = ((lo[i] + hi[i]) / 2.0, (hi[i] - lo[i]) / 2.0 * (1.0 + margin));
        lo[i] = c - r;
        hi[i] = c + r;
    }
    (lo, hi)
}

/// Lipschitz constant of the stage cost with respect to the max-norm on the
/// box `[lower, upper]`: the largest 1-norm of its central-difference
/// gradient over the box corners (exact for convex stage costs, where the
/// gradient norm peaks at a corner). Boxes above 12 dimensions use
/// `4096` random points instead.
pub fn stage_lipschitz(objective: &ObjectiveSpec, t: f64, lower: &[f64], upper: &[f64], seed: u64) -> f64 {
    let n = lower.len();
    let r = objective.reference().eval(t);
    let mut d = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut eval = |y: &mut [f64]| {
        let mut norm1 = 0.0;
        for c in 0..n {
            let x = y[c];
            let h = FD_STEP * x.abs().max(1.0);
            y[c] = x + h;
            let fp = objective.stage_cost(y, &r, &mut d);
            y[c] = x - h;
            let fm = objective.stage_cost(y, &r, &mut d);
            y[c] = x;
            norm1 += ((fp - fm) / (2.0 * h)).abs();
        }
        norm1
    };
    let mut best: f64 = 0.0;
    if n <= 12 {
        for mask in 0..(1usize << n) {
            for c in 0..n {
                y[c] = if mask >> c & 1 == 1 { upper[c] } else { lower[c] };
            }
            best = best.max(eval(&mut y));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4096 {
            for c in 0..n {
                y[c] = if upper[c] > lower[c] { rng.random_range(lower[c]..=upper[c]) } else { lower[c] };
            }
            best = best.max(eval(&mut y));
        }
    }
    best
}
