//! Shape-preserving piecewise cubic Hermite interpolation on a uniform grid.

/// Fritsch-Carlson monotone cubic interpolant over `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    lo: f64,
    step: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    /// `values[k]` is the function at `lo + k * (hi - lo) / (n - 1)`.
    ///
    /// Panics if fewer than two values are supplied or `hi <= lo`.
    pub fn new(lo: f64, hi: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        assert!(n >= 2 && hi > lo, "interpolant needs two nodes and a non-empty range");
        let step = (hi - lo) / (n - 1) as f64;
        let secants: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]) / step).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for k in 1..n - 1 {
            let (a, b) = (secants[k - 1], secants[k]);
            // Harmonic mean on equal spacing; flat where the data turns.
            slopes[k] = if a * b <= 0.0 { 0.0 } else { 2.0 * a * b / (a + b) };
        }
        Self { lo, step, values, slopes }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.step * (self.values.len() - 1) as f64
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi()
    }

    /// Evaluate at `x`; points outside the grid are clamped to the ends.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let pos = ((x - self.lo) / self.step).clamp(0.0, (n - 1) as f64);
        let k = (pos.floor() as usize).min(n - 2);
        let t = pos - k as f64;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.values[k]
            + h10 * self.step * self.slopes[k]
            + h01 * self.values[k + 1]
            + h11 * self.step * self.slopes[k + 1]
    }
}
