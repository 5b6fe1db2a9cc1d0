//! Streaming moments for ratio-of-means curves with delta-method errors.

/// One point of a curve indexed by generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub generation: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Accumulates a scalar `u_g` per generation across independent units
/// (replications or trajectories), keeping the cross moment with `u_1` so
/// the ratio `mean(u_g)/mean(u_1)` gets a paired standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRatio {
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    sum_cross: Vec<f64>,
}

impl PairedRatio {
    pub fn new(generations: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; generations],
            sum_sq: vec![0.0; generations],
            sum_cross: vec![0.0; generations],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn generations(&self) -> usize {
        self.sum.len()
    }

    /// Add one unit; `u[g-1]` is its value at generation `g`.
    pub fn push(&mut self, u: &[f64]) {
        assert_eq!(u.len(), self.sum.len());
        let base = u[0];
        for (g, &v) in u.iter().enumerate() {
            self.sum[g] += v;
            self.sum_sq[g] += v * v;
            self.sum_cross[g] += v * base;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.sum.len(), other.sum.len());
        self.count += other.count;
        for g in 0..self.sum.len() {
            self.sum[g] += other.sum[g];
            self.sum_sq[g] += other.sum_sq[g];
            self.sum_cross[g] += other.sum_cross[g];
        }
    }

    pub fn mean(&self, g: usize) -> f64 {
        self.sum[g - 1] / self.count as f64
    }

    /// Standard error of `mean(u_g)`.
    pub fn mean_stderr(&self, g: usize) -> f64 {
        let n = self.count as f64;
        let m = self.mean(g);
        ((self.sum_sq[g - 1] / n - m * m).max(0.0) / (n - 1.0)).sqrt()
    }

    /// `mean(u_g)/mean(u_1)`; NaN when the denominator vanishes.
    pub fn ratio(&self, g: usize) -> CurvePoint {
        let n = self.count as f64;
        let (a, b) = (self.mean(g), self.mean(1));
        if self.count < 2 || b == 0.0 || !b.is_finite() {
            return CurvePoint {
                generation: g,
                value: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let var_a = self.sum_sq[g - 1] / n - a * a;
        let var_b = self.sum_sq[0] / n - b * b;
        let cov = self.sum_cross[g - 1] / n - a * b;
        let r = a / b;
        let var_r = (var_a - 2.0 * r * cov + r * r * var_b) / (b * b);
        CurvePoint {
            generation: g,
            value: r,
            stderr: (var_r.max(0.0) / (n - 1.0)).sqrt(),
        }
    }

    pub fn curve(&self) -> Vec<CurvePoint> {
        (1..=self.generations()).map(|g| self.ratio(g)).collect()
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    slope(&lx, &ly)
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Pairwise summation; the result depends only on the order of `v`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Median of the values; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
