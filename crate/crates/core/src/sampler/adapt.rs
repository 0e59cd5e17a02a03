//! Warmup adaptation: dual-averaging step size and windowed diagonal metric.

/// Nesterov dual averaging of the log step size toward a target acceptance.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

const GAMMA: f64 = 0.05;
const T0: f64 = 10.0;
const KAPPA: f64 = 0.75;

impl DualAveraging {
    pub fn new(step_size: f64, target: f64) -> Self {
        let mut da = Self { target, mu: 0.0, counter: 0.0, s_bar: 0.0, x_bar: 0.0 };
        da.restart(step_size);
        da
    }

    /// Reset the averages and re-centre on `ln(10 ε)`.
    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feed one acceptance statistic and return the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let a = if accept_stat.is_finite() { accept_stat.min(1.0) } else { 0.0 };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / GAMMA;
        let w = self.counter.powf(-KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// The averaged step size used after warmup.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Stan-style warmup windows: a fast initial buffer, doubling slow windows in
/// which the metric is estimated, and a fast terminal buffer.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    init_buffer: usize,
    term_buffer: usize,
    /// Iteration (exclusive) at which each slow window ends.
    ends: Vec<usize>,
}

impl WindowSchedule {
    pub fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
        if warmup < 20 {
            return Self { init_buffer: warmup, term_buffer: 0, ends: Vec::new() };
        }
        if init + term + base > warmup {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - init - term;
        }
        let slow_end = warmup - term;
        let mut ends = Vec::new();
        let mut start = init;
        let mut size = base;
        while start < slow_end {
            let mut end = start + size;
            // A window that would leave less than twice its size is merged.
            if end + 2 * size > slow_end {
                end = slow_end;
            }
            ends.push(end);
            start = end;
            size *= 2;
        }
        Self { init_buffer: init, term_buffer: term, ends }
    }

    /// Whether iteration `it` (0-based) contributes to the metric estimate.
    pub fn in_slow_window(&self, it: usize) -> bool {
        it >= self.init_buffer && self.ends.last().is_some_and(|&e| it < e)
    }

    /// Whether a slow window closes after iteration `it`.
    pub fn closes_window(&self, it: usize) -> bool {
        self.ends.contains(&(it + 1))
    }

    pub fn window_ends(&self) -> &[usize] {
        &self.ends
    }

    pub fn term_buffer(&self) -> usize {
        self.term_buffer
    }
}

/// Streaming per-coordinate variance.
#[derive(Debug, Clone)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn reset(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }

    /// Sample variance shrunk toward `1e-3`: `(n/(n+5)) var + 1e-3 · 5/(n+5)`.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}
