use std::collections::VecDeque;

/// Past states of a delay system, linearly interpolated between nodes.
#[derive(Clone, Debug)]
pub struct DelayHistory {
    tau: f64,
    times: VecDeque<f64>,
    states: VecDeque<Vec<f64>>,
}

impl DelayHistory {
    /// Constant history `y0` on `[t0 - tau, t0]`.
    pub fn constant(t0: f64, y0: &[f64], tau: f64) -> Self {
        assert!(tau > 0.0, "delay must be positive");
        let mut times = VecDeque::new();
        let mut states = VecDeque::new();
        times.push_back(t0 - tau);
        states.push_back(y0.to_vec());
        times.push_back(t0);
        states.push_back(y0.to_vec());
        Self { tau, times, states }
    }

    /// Builds a history from explicit nodes; times must be strictly increasing
    /// and span at least `tau`.
    pub fn from_nodes(tau: f64, nodes: Vec<(f64, Vec<f64>)>) -> Option<Self> {
        if nodes.len() < 2 || tau <= 0.0 {
            return None;
        }
        if nodes.windows(2).any(|w| w[1].0 <= w[0].0) {
            return None;
        }
        if nodes[nodes.len() - 1].0 - nodes[0].0 < tau * (1.0 - 1e-12) {
            return None;
        }
        let (times, states): (VecDeque<_>, VecDeque<_>) = nodes.into_iter().unzip();
        Some(Self { tau, times, states })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first_time(&self) -> f64 {
        self.times[0]
    }

    pub fn last_time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn last_state(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }

    pub fn node(&self, i: usize) -> (f64, &[f64]) {
        (self.times[i], &self.states[i])
    }

    /// Appends a node and drops nodes no longer needed to cover `[t - tau, t]`.
    ///
    /// # Panics
    /// If `t` does not exceed the last stored time.
    pub fn push(&mut self, t: f64, y: &[f64]) {
        assert!(t > self.last_time(), "history times must increase");
        // Reuse the oldest buffer when one is about to be dropped.
        let horizon = t - self.tau;
        let mut buf = None;
        while self.times.len() >= 2 && self.times[1] <= horizon {
            self.times.pop_front();
            buf = self.states.pop_front();
        }
        let mut v = buf.unwrap_or_default();
        v.clear();
        v.extend_from_slice(y);
        self.times.push_back(t);
        self.states.push_back(v);
    }

    /// Linear interpolation at `t`, clamped to the stored span.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        if t <= self.times[0] {
            out.copy_from_slice(&self.states[0]);
            return;
        }
        if t >= self.times[n - 1] {
            out.copy_from_slice(&self.states[n - 1]);
            return;
        }
        let i = match self.times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => {
                out.copy_from_slice(&self.states[i]);
                return;
            }
            Err(i) => i - 1,
        };
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        let (a, b) = (&self.states[i], &self.states[i + 1]);
        for ((o, &x0), &x1) in out.iter_mut().zip(a).zip(b) {
            *o = x0 + w * (x1 - x0);
        }
    }
}
