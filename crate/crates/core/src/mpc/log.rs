use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ControlMode;
use crate::optimize::SolveStatus;

/// One coarse closed-loop step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcStep {
    pub time: f64,
    pub state: Vec<f64>,
    pub observable: Vec<f64>,
    /// Reference at `time`.
    pub reference: Vec<f64>,
    /// Full relaxed plan, row-major `p x m`.
    pub plan: Vec<f64>,
    /// Applied control; in rounding mode the mean over the fine steps.
    pub control: Vec<f64>,
    /// Selected control indices on the fine grid (rounding mode only).
    #[serde(default)]
    pub sur_indices: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcLog {
    pub mode: ControlMode,
    pub n_controls: usize,
    pub steps: Vec<MpcStep>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub final_observable: Vec<f64>,
}

impl MpcLog {
    pub fn new(mode: ControlMode, n_controls: usize) -> Self {
        Self {
            mode,
            n_controls,
            steps: Vec::new(),
            final_time: 0.0,
            final_state: Vec::new(),
            final_observable: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_wall_time(&self) -> f64 {
        self.steps.iter().map(|s| s.wall_time).sum()
    }

    /// Plant states at every logged step followed by the final state.
    pub fn state_trajectory(&self) -> Vec<(f64, &[f64])> {
        let mut out: Vec<(f64, &[f64])> = self.steps.iter().map(|s| (s.time, s.state.as_slice())).collect();
        if !self.final_state.is_empty() {
            out.push((self.final_time, &self.final_state));
        }
        out
    }

    /// Column names of [`MpcLog::write_csv`].
    pub fn csv_header(&self) -> Vec<String> {
        let Some(first) = self.steps.first() else {
            return vec!["time".into()];
        };
        let mut h = vec!["time".to_string()];
        fn named(prefix: &'static str, n: usize) -> impl Iterator<Item = String> {
            (1..=n).map(move |k| format!("{prefix}_{k}"))
        }
        h.extend(named("y", first.state.len()));
        h.extend(named("z", first.observable.len()));
        h.extend(named("ref", first.reference.len()));
        h.extend(named("u", first.control.len()));
        h.extend(named("alpha", self.n_controls));
        h.extend(["objective", "iterations", "status", "wall_time", "sur_indices"].map(String::from));
        h
    }

    /// One row per coarse step: states, observable, reference, applied
    /// control, first plan row and solver statistics.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.csv_header())?;
        for s in &self.steps {
            let mut row: Vec<String> = vec![fmt(s.time)];
            row.extend(s.state.iter().map(|&x| fmt(x)));
            row.extend(s.observable.iter().map(|&x| fmt(x)));
            row.extend(s.reference.iter().map(|&x| fmt(x)));
            row.extend(s.control.iter().map(|&x| fmt(x)));
            row.extend(s.plan[..self.n_controls].iter().map(|&x| fmt(x)));
            row.push(fmt(s.objective));
            row.push(s.iterations.to_string());
            row.push(
                serde_json::to_value(s.status)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
            );
            row.push(fmt(s.wall_time));
            row.push(s.sur_indices.iter().map(|j| (j + 1).to_string()).collect::<Vec<_>>().join(";"));
            w.write_record(&row)?;
        }
        w.flush()
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Which error a tracking metric measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// `z_c - ref_c` for a single observable component.
    Component(usize),
    /// Euclidean norm of `z - ref`.
    Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub mse: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Tracking error at every logged step.
pub fn tracking_errors(log: &MpcLog, metric: Metric) -> Vec<(f64, f64)> {
    log.steps
        .iter()
        .map(|s| {
            let e = match metric {
                Metric::Component(c) => s.observable[c] - s.reference[c],
                Metric::Norm => s
                    .observable
                    .iter()
                    .zip(&s.reference)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            };
            (s.time, e)
        })
        .collect()
}

/// Mean squared, mean absolute and maximum absolute tracking error over the
/// logged steps. All zero for an empty log.
pub fn tracking_metrics(log: &MpcLog, metric: Metric) -> TrackingMetrics {
    let errs = tracking_errors(log, metric);
    if errs.is_empty() {
        return TrackingMetrics {
            mse: 0.0,
            mean_abs: 0.0,
            max_abs: 0.0,
        };
    }
    let n = errs.len() as f64;
    TrackingMetrics {
        mse: errs.iter().map(|(_, e)| e * e).sum::<f64>() / n,
        mean_abs: errs.iter().map(|(_, e)| e.abs()).sum::<f64>() / n,
        max_abs: errs.iter().map(|(_, e)| e.abs()).fold(0.0, f64::max),
    }
}

/// Matplotlib script with three rows (states and reference, tracking error,
/// control) reading the CSV files written by [`MpcLog::write_csv`].
pub fn plot_script(csv_files: &[(&str, &str)], n_state: usize, n_obs: usize, n_u: usize, out_png: &str) -> String {
    let mut s = String::new();
    s.push_str("import csv\nimport matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n");
    s.push_str("def load(path):\n    with open(path) as f:\n        rows = list(csv.DictReader(f))\n");
    s.push_str("    return {k: [float(r[k]) for r in rows] for k in rows[0] if k not in (\"status\", \"sur_indices\")}\n\n");
    s.push_str("fig, ax = plt.subplots(3, 1, sharex=True, figsize=(8, 9))\n");
    for (path, label) in csv_files {
        let _ = writeln!(s, "d = load({path:?})");
        for k in 1..=n_state {
            let _ = writeln!(s, "ax[0].plot(d[\"time\"], d[\"y_{k}\"], label=\"{label} y_{k}\")");
        }
        for k in 1..=n_obs {
            let _ = writeln!(
                s,
                "ax[1].plot(d[\"time\"], [a - b for a, b in zip(d[\"z_{k}\"], d[\"ref_{k}\"])], label=\"{label} z_{k} - ref\")"
            );
        }
        for k in 1..=n_u {
            let _ = writeln!(s, "ax[2].step(d[\"time\"], d[\"u_{k}\"], where=\"post\", label=\"{label} u_{k}\")");
        }
    }
    if let Some((path, _)) = csv_files.first() {
        let _ = writeln!(s, "d = load({path:?})");
        for k in 1..=n_obs {
            let _ = writeln!(s, "ax[0].plot(d[\"time\"], d[\"ref_{k}\"], \"k--\", linewidth=0.8)");
        }
    }
    s.push_str("ax[0].set_ylabel(\"state\")\nax[1].set_ylabel(\"tracking error\")\nax[2].set_ylabel(\"control\")\n");
    s.push_str("ax[2].set_xlabel(\"t\")\nfor a in ax:\n    a.legend(fontsize=6)\n");
    let _ = writeln!(s, "fig.tight_layout()\nfig.savefig({out_png:?}, dpi=150)");
    s
}
