//! Exponential-family response models `p(y|η) = exp(ηᵀT(y) − A(η)) h(y)`,
//! the linear feature maps `η = X θ` and feature distributions.
//!
//! Four families are built in. All have a scalar response; the linear model
//! with unknown variance has a two-dimensional natural parameter
//! `η = (μ/σ², −1/(2σ²))` with `T(y) = (y, y²)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Largest natural-parameter dimension among the built-in families.
pub const MAX_ETA: usize = 2;

/// Smallest admissible precision `1/σ²` for the unknown-variance linear model.
pub const MIN_PRECISION: f64 = 1e-8;

/// Largest Poisson rate the sampler accepts.
const MAX_POISSON_RATE: f64 = 1e6;

pub(crate) type Small = [f64; MAX_ETA];

/// `A`, `∇A` and `∇²A` at one natural parameter, in fixed-size storage.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Curvature {
    pub value: f64,
    pub grad: Small,
    pub hess: [Small; MAX_ETA],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExpFamilyModel {
    /// Normal with known variance; `η = μ`, `T(y) = y/σ²`, `A(η) = η²/(2σ²)`.
    GaussianKnownVar { sigma2: f64 },
    /// Normal with unknown variance; `η = (μ/σ², −1/(2σ²))`, `T(y) = (y, y²)`.
    LinearUnknownVar,
    /// `A(η) = log(1 + e^η)`, `T(y) = y ∈ {0, 1}`.
    BernoulliLogit,
    /// `A(η) = e^η`, `T(y) = y ∈ ℕ`.
    PoissonLog,
}

impl ExpFamilyModel {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianKnownVar { .. } => "gaussian_known_var",
            Self::LinearUnknownVar => "linear_unknown_var",
            Self::BernoulliLogit => "bernoulli_logit",
            Self::PoissonLog => "poisson_log",
        }
    }

    pub fn dim_y(&self) -> usize {
        1
    }

    pub fn dim_eta(&self) -> usize {
        match self {
            Self::LinearUnknownVar => 2,
            _ => 1,
        }
    }

    /// Parameters that are fixed rather than estimated.
    pub fn fixed_params(&self) -> Vec<f64> {
        match self {
            Self::GaussianKnownVar { sigma2 } => vec![*sigma2],
            _ => Vec::new(),
        }
    }

    fn check_len(&self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.dim_eta() {
            return Err(Error::Dimension {
                expected: self.dim_eta(),
                got: eta.len(),
            });
        }
        Ok(())
    }

    pub fn check_domain(&self, eta: &[f64]) -> Result<()> {
        self.check_len(eta)?;
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("{} at {:?}: non-finite", self.name(), eta)));
        }
        if let Self::LinearUnknownVar = self {
            if -2.0 * eta[1] < MIN_PRECISION {
                return Err(Error::Domain(format!(
                    "linear_unknown_var needs precision -2η₂ ≥ {MIN_PRECISION:e}, got {}",
                    -2.0 * eta[1]
                )));
            }
        }
        if let Self::GaussianKnownVar { sigma2 } = self {
            if !(*sigma2 > 0.0) {
                return Err(Error::Domain(format!("known variance must be positive, got {sigma2}")));
            }
        }
        Ok(())
    }

    pub(crate) fn curvature(&self, eta: &[f64]) -> Result<Curvature> {
        self.check_domain(eta)?;
        let mut c = Curvature {
            value: 0.0,
            grad: [0.0; MAX_ETA],
            hess: [[0.0; MAX_ETA]; MAX_ETA],
        };
        match *self {
            Self::GaussianKnownVar { sigma2 } => {
                c.value = eta[0] * eta[0] / (2.0 * sigma2);
                c.grad[0] = eta[0] / sigma2;
                c.hess[0][0] = 1.0 / sigma2;
            }
            Self::LinearUnknownVar => {
                let (e1, e2) = (eta[0], eta[1]);
                c.value = -e1 * e1 / (4.0 * e2) - 0.5 * (-2.0 * e2).ln();
                c.grad[0] = -e1 / (2.0 * e2);
                c.grad[1] = e1 * e1 / (4.0 * e2 * e2) - 1.0 / (2.0 * e2);
                c.hess[0][0] = -1.0 / (2.0 * e2);
                c.hess[0][1] = e1 / (2.0 * e2 * e2);
                c.hess[1][0] = c.hess[0][1];
                c.hess[1][1] = -e1 * e1 / (2.0 * e2 * e2 * e2) + 1.0 / (2.0 * e2 * e2);
            }
            Self::BernoulliLogit => {
                let p = sigmoid(eta[0]);
                c.value = softplus(eta[0]);
                c.grad[0] = p;
                c.hess[0][0] = p * sigmoid(-eta[0]);
            }
            Self::PoissonLog => {
                let rate = eta[0].exp();
                c.value = rate;
                c.grad[0] = rate;
                c.hess[0][0] = rate;
            }
        }
        Ok(c)
    }

    /// Log-partition `A(η)`.
    pub fn log_partition(&self, eta: &[f64]) -> Result<f64> {
        Ok(self.curvature(eta)?.value)
    }

    /// `∇A(η) = E[T(Y)]`.
    pub fn grad_log_partition(&self, eta: &[f64]) -> Result<DVector<f64>> {
        let c = self.curvature(eta)?;
        Ok(DVector::from_fn(self.dim_eta(), |i, _| c.grad[i]))
    }

    /// `∇²A(η) = Var(T(Y))`.
    pub fn hess_log_partition(&self, eta: &[f64]) -> Result<DMatrix<f64>> {
        let c = self.curvature(eta)?;
        let k = self.dim_eta();
        Ok(DMatrix::from_fn(k, k, |i, j| c.hess[i][j]))
    }

    pub fn check_support(&self, y: f64) -> Result<()> {
        let ok = match self {
            Self::GaussianKnownVar { .. } | Self::LinearUnknownVar => y.is_finite(),
            Self::BernoulliLogit => y == 0.0 || y == 1.0,
            Self::PoissonLog => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Support(y))
        }
    }

    /// Sufficient statistic `T(y)`.
    pub(crate) fn sufficient_small(&self, y: f64) -> Small {
        match *self {
            Self::GaussianKnownVar { sigma2 } => [y / sigma2, 0.0],
            Self::LinearUnknownVar => [y, y * y],
            Self::BernoulliLogit | Self::PoissonLog => [y, 0.0],
        }
    }

    pub fn sufficient_stat(&self, y: f64) -> DVector<f64> {
        let t = self.sufficient_small(y);
        DVector::from_fn(self.dim_eta(), |i, _| t[i])
    }

    /// `log h(y)`.
    pub fn log_carrier(&self, y: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok(match *self {
            Self::GaussianKnownVar { sigma2 } => -y * y / (2.0 * sigma2) - 0.5 * (2.0 * PI * sigma2).ln(),
            Self::LinearUnknownVar => -0.5 * (2.0 * PI).ln(),
            Self::BernoulliLogit => 0.0,
            Self::PoissonLog => -ln_factorial(y as u64),
        })
    }

    /// `ηᵀT(y) − A(η) + log h(y)`.
    pub fn log_density(&self, y: f64, eta: &[f64]) -> Result<f64> {
        let log_h = self.log_carrier(y)?;
        Ok(self.log_density_kernel(y, eta)? + log_h)
    }

    /// `ηᵀT(y) − A(η)`, the carrier-free part that enters likelihood ratios.
    pub fn log_density_kernel(&self, y: f64, eta: &[f64]) -> Result<f64> {
        let a = self.log_partition(eta)?;
        let t = self.sufficient_small(y);
        let dot: f64 = eta.iter().zip(t.iter()).map(|(e, t)| e * t).sum();
        Ok(dot - a)
    }

    /// Draw one response at natural parameter `eta`.
    pub fn sample_response(&self, eta: &[f64], rng: &mut StreamRng) -> Result<f64> {
        self.check_domain(eta)?;
        Ok(match *self {
            Self::GaussianKnownVar { sigma2 } => {
                let z: f64 = rng.sample(StandardNormal);
                eta[0] + sigma2.sqrt() * z
            }
            Self::LinearUnknownVar => {
                let sigma2 = -1.0 / (2.0 * eta[1]);
                let z: f64 = rng.sample(StandardNormal);
                eta[0] * sigma2 + sigma2.sqrt() * z
            }
            Self::BernoulliLogit => {
                // v ∈ (0, 1], so a saturated η < −37 can never produce a 1.
                let v = 1.0 - rng.random::<f64>();
                if v <= sigmoid(eta[0]) {
                    1.0
                } else {
                    0.0
                }
            }
            Self::PoissonLog => {
                let rate = eta[0].exp();
                if rate > MAX_POISSON_RATE {
                    return Err(Error::Domain(format!("poisson rate {rate:e} too large to sample")));
                }
                sample_poisson(rate, rng)
            }
        })
    }
}

/// Inversion sampler. Rates above 500 are split into equal pieces and the
/// pieces summed, which keeps `e^{-λ}` representable.
fn sample_poisson(rate: f64, rng: &mut StreamRng) -> f64 {
    let pieces = (rate / 500.0).ceil().max(1.0) as usize;
    let lambda = rate / pieces as f64;
    let mut total = 0u64;
    for _ in 0..pieces {
        let u = 1.0 - rng.random::<f64>();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf && p > 0.0 {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
        }
        total += k;
    }
    total as f64
}

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// How raw features become the design matrix `X` with `η = X θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMap {
    /// `X = xᵀ`, a single row; `d_Θ = dim`.
    Row { dim: usize },
    /// `X = [xᵀ 0; 0 −1/2]` for the unknown-variance linear model, with
    /// `θ = (β/σ², 1/σ²)`; `d_Θ = dim + 1`.
    LinearBlock { dim: usize },
}

impl FeatureMap {
    /// The map matching `model` for raw features of dimension `dim`.
    pub fn for_model(model: &ExpFamilyModel, dim: usize) -> Self {
        match model {
            ExpFamilyModel::LinearUnknownVar => Self::LinearBlock { dim },
            _ => Self::Row { dim },
        }
    }

    pub fn dim_x_raw(&self) -> usize {
        match *self {
            Self::Row { dim } | Self::LinearBlock { dim } => dim,
        }
    }

    pub fn dim_theta(&self) -> usize {
        match *self {
            Self::Row { dim } => dim,
            Self::LinearBlock { dim } => dim + 1,
        }
    }

    pub fn dim_eta(&self) -> usize {
        match self {
            Self::Row { .. } => 1,
            Self::LinearBlock { .. } => 2,
        }
    }

    fn check(&self, x: &[f64], theta: Option<&[f64]>) -> Result<()> {
        if x.len() != self.dim_x_raw() {
            return Err(Error::Dimension {
                expected: self.dim_x_raw(),
                got: x.len(),
            });
        }
        if let Some(t) = theta {
            if t.len() != self.dim_theta() {
                return Err(Error::Dimension {
                    expected: self.dim_theta(),
                    got: t.len(),
                });
            }
        }
        Ok(())
    }

    /// The `d_η × d_Θ` design matrix for one raw feature vector.
    pub fn embed(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, None)?;
        Ok(match *self {
            Self::Row { dim } => DMatrix::from_row_slice(1, dim, x),
            Self::LinearBlock { dim } => {
                let mut m = DMatrix::zeros(2, dim + 1);
                for (j, v) in x.iter().enumerate() {
                    m[(0, j)] = *v;
                }
                m[(1, dim)] = -0.5;
                m
            }
        })
    }

    /// `η = embed(x) θ`.
    pub fn natural_param(&self, x: &[f64], theta: &[f64]) -> Result<DVector<f64>> {
        self.check(x, Some(theta))?;
        let e = self.eta_small(x, theta);
        Ok(DVector::from_fn(self.dim_eta(), |i, _| e[i]))
    }

    /// Unchecked fast path of [`natural_param`](Self::natural_param).
    pub(crate) fn eta_small(&self, x: &[f64], theta: &[f64]) -> Small {
        let dot = |n: usize| x.iter().zip(&theta[..n]).map(|(a, b)| a * b).sum::<f64>();
        match *self {
            Self::Row { dim } => [dot(dim), 0.0],
            Self::LinearBlock { dim } => [dot(dim), -0.5 * theta[dim]],
        }
    }

    /// `out += w · Xᵀ v`.
    pub(crate) fn add_transpose_times(&self, x: &[f64], v: &Small, w: f64, out: &mut [f64]) {
        match *self {
            Self::Row { dim } => {
                for j in 0..dim {
                    out[j] += w * x[j] * v[0];
                }
            }
            Self::LinearBlock { dim } => {
                for j in 0..dim {
                    out[j] += w * x[j] * v[0];
                }
                out[dim] += -0.5 * w * v[1];
            }
        }
    }

    /// `out += w · Xᵀ H X`.
    pub(crate) fn add_sandwich(&self, x: &[f64], h: &[Small; MAX_ETA], w: f64, out: &mut DMatrix<f64>) {
        match *self {
            Self::Row { dim } => {
                let s = w * h[0][0];
                for i in 0..dim {
                    let xi = s * x[i];
                    for j in 0..dim {
                        out[(i, j)] += xi * x[j];
                    }
                }
            }
            Self::LinearBlock { dim } => {
                let s = w * h[0][0];
                for i in 0..dim {
                    let xi = s * x[i];
                    for j in 0..dim {
                        out[(i, j)] += xi * x[j];
                    }
                    let cross = -0.5 * w * h[0][1] * x[i];
                    out[(i, dim)] += cross;
                    out[(dim, i)] += cross;
                }
                out[(dim, dim)] += 0.25 * w * h[1][1];
            }
        }
    }
}

/// A user-supplied feature generator. It receives the point index within a
/// generation and a stream, never any response values.
pub trait FeatureSampler: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn sample(&self, index: usize, rng: &mut StreamRng, out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub enum FeatureKind {
    /// Independent standard normal coordinates.
    StandardNormalIid { dim: usize },
    /// Point `i` of every generation is `rows[i % rows.len()]`.
    FixedDesignCycle { rows: Vec<Vec<f64>> },
    Custom(Arc<dyn FeatureSampler>),
}

/// The feature law `H`, identical for every generation.
#[derive(Debug, Clone)]
pub struct FeatureDistribution {
    pub kind: FeatureKind,
    /// Prepend a constant 1 to every draw.
    pub intercept: bool,
}

impl FeatureDistribution {
    pub fn standard_normal(dim: usize, intercept: bool) -> Self {
        Self {
            kind: FeatureKind::StandardNormalIid { dim },
            intercept,
        }
    }

    pub fn fixed_design(rows: Vec<Vec<f64>>) -> Self {
        Self {
            kind: FeatureKind::FixedDesignCycle { rows },
            intercept: false,
        }
    }

    /// The design `X = 1` of a location model.
    pub fn intercept_only() -> Self {
        Self::fixed_design(vec![vec![1.0]])
    }

    pub fn custom(sampler: Arc<dyn FeatureSampler>, intercept: bool) -> Self {
        Self {
            kind: FeatureKind::Custom(sampler),
            intercept,
        }
    }

    pub fn label(&self) -> String {
        let base = match &self.kind {
            FeatureKind::StandardNormalIid { dim } => format!("standard_normal_iid(dim={dim})"),
            FeatureKind::FixedDesignCycle { rows } => format!("fixed_design_cycle(rows={})", rows.len()),
            FeatureKind::Custom(s) => format!("custom({s:?})"),
        };
        if self.intercept {
            format!("intercept+{base}")
        } else {
            base
        }
    }

    fn inner_dim(&self) -> usize {
        match &self.kind {
            FeatureKind::StandardNormalIid { dim } => *dim,
            FeatureKind::FixedDesignCycle { rows } => rows.first().map_or(0, Vec::len),
            FeatureKind::Custom(s) => s.dim(),
        }
    }

    /// Dimension of a draw, including the intercept column.
    pub fn dim(&self) -> usize {
        self.inner_dim() + usize::from(self.intercept)
    }

    pub fn sample_into(&self, index: usize, rng: &mut StreamRng, out: &mut [f64]) {
        let body = if self.intercept {
            out[0] = 1.0;
            &mut out[1..]
        } else {
            &mut out[..]
        };
        match &self.kind {
            FeatureKind::StandardNormalIid { .. } => {
                for v in body.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            FeatureKind::FixedDesignCycle { rows } => body.copy_from_slice(&rows[index % rows.len()]),
            FeatureKind::Custom(s) => s.sample(index, rng, body),
        }
    }

    /// `n` draws, row-major.
    pub fn sample_rows(&self, n: usize, rng: &mut StreamRng) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            self.sample_into(i, rng, row);
        }
        out
    }

    /// Rows of a fixed design (with intercept applied), for exact averages.
    pub fn design_rows(&self) -> Option<Vec<Vec<f64>>> {
        match &self.kind {
            FeatureKind::FixedDesignCycle { rows } => Some(
                rows.iter()
                    .map(|r| {
                        let mut v = Vec::with_capacity(r.len() + 1);
                        if self.intercept {
                            v.push(1.0);
                        }
                        v.extend_from_slice(r);
                        v
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// `E[x xᵀ]` when it is known in closed form.
    pub fn exact_second_moment(&self) -> Option<DMatrix<f64>> {
        match &self.kind {
            FeatureKind::StandardNormalIid { .. } => Some(DMatrix::identity(self.dim(), self.dim())),
            FeatureKind::FixedDesignCycle { .. } => {
                let rows = self.design_rows()?;
                let d = self.dim();
                let mut m = DMatrix::zeros(d, d);
                for r in &rows {
                    let v = DVector::from_column_slice(r);
                    m += &v * v.transpose();
                }
                Some(m / rows.len() as f64)
            }
            FeatureKind::Custom(_) => None,
        }
    }
}
