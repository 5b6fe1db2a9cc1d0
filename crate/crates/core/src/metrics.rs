//! Comparison quantities: relative efficiency, MSE and KL ratio curves,
//! and held-out cross-entropy.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::{ExpFamilyModel, FeatureDistribution, FeatureMap};
use crate::limitproc::LimitEnsemble;
use crate::linalg;
use crate::rng::StreamRng;
use crate::stats::{median, CurvePoint, PairedRatio};
use crate::workflow::EnsembleResult;

/// `tr V1 / tr V2`: the efficiency of the estimator with covariance `V2`
/// relative to the one with `V1`.
pub fn are(v1: &DMatrix<f64>, v2: &DMatrix<f64>) -> Result<f64> {
    if v1.shape() != v2.shape() || v1.nrows() != v1.ncols() {
        return Err(Error::Dimension {
            expected: v1.nrows(),
            got: v2.nrows(),
        });
    }
    let t2 = linalg::trace(v2);
    if !(t2 > 0.0) {
        return Err(Error::Degenerate("trace of the second covariance is zero"));
    }
    Ok(linalg::trace(v1) / t2)
}

/// Bregman form of `KL(p_η̂ ‖ p_η₀)`: `A(η₀) − A(η̂) − (η₀ − η̂)ᵀ∇A(η̂)`.
pub fn kl_natural(model: &ExpFamilyModel, eta_hat: &[f64], eta0: &[f64]) -> Result<f64> {
    let a0 = model.log_partition(eta0)?;
    let a1 = model.log_partition(eta_hat)?;
    let g = model.grad_log_partition(eta_hat)?;
    let lin: f64 = eta0.iter().zip(eta_hat).zip(g.iter()).map(|((e0, e1), gi)| (e0 - e1) * gi).sum();
    Ok((a0 - a1 - lin).max(0.0))
}

/// `E_X KL(p(·|Xθ̂) ‖ p(·|Xθ₀))`, exact over a fixed design and a Monte
/// Carlo average over `mc_samples` feature draws otherwise.
pub fn kl_exact(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    theta_hat: &[f64],
    theta0: &[f64],
    features: &FeatureDistribution,
    mc_samples: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    let one = |x: &[f64]| -> Result<f64> {
        let e1 = fmap.natural_param(x, theta_hat)?;
        let e0 = fmap.natural_param(x, theta0)?;
        kl_natural(model, e1.as_slice(), e0.as_slice())
    };
    if let Some(rows) = features.design_rows() {
        let mut s = 0.0;
        for r in &rows {
            s += one(r)?;
        }
        return Ok(s / rows.len() as f64);
    }
    if mc_samples == 0 {
        return Err(Error::Config("Monte Carlo KL needs samples".into()));
    }
    let mut x = vec![0.0; features.dim()];
    let mut s = 0.0;
    for i in 0..mc_samples {
        features.sample_into(i, rng, &mut x);
        s += one(&x)?;
    }
    Ok(s / mc_samples as f64)
}

/// `½ ΔᵀV_TΔ` with `Δ = θ̂ − θ₀`.
pub fn kl_quadratic(v_t: &DMatrix<f64>, theta_hat: &[f64], theta0: &[f64]) -> f64 {
    let delta = DVector::from_iterator(theta0.len(), theta_hat.iter().zip(theta0).map(|(a, b)| a - b));
    0.5 * (delta.transpose() * v_t * &delta)[(0, 0)]
}

/// `−(1/m) Σ log p(y_j | X_j θ̂)` over a held-out set, carrier included.
pub fn test_ce_loss(model: &ExpFamilyModel, fmap: &FeatureMap, theta_hat: &[f64], x: &[f64], y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let d = fmap.dim_x_raw();
    if x.len() != y.len() * d {
        return Err(Error::Dimension {
            expected: y.len() * d,
            got: x.len(),
        });
    }
    let mut s = 0.0;
    for (row, &yj) in x.chunks_exact(d).zip(y) {
        let eta = fmap.natural_param(row, theta_hat)?;
        s += model.log_density(yj, eta.as_slice())?;
    }
    Ok(-s / y.len() as f64)
}

/// Replications that are non-degenerate at every generation.
fn complete(ens: &EnsembleResult) -> impl Iterator<Item = Vec<&DVector<f64>>> {
    ens.trajectories.iter().filter_map(|t| t.generations.iter().map(|r| r.theta_hat.as_ref()).collect())
}

/// Paired ratio of mean `‖θ̂_g − θ₀‖²` to its generation-1 value.
pub fn mse_ratio_curve(ens: &EnsembleResult) -> Vec<CurvePoint> {
    let mut acc = PairedRatio::new(ens.generations());
    for fits in complete(ens) {
        let u: Vec<f64> = fits.iter().map(|t| (*t - &ens.theta0).norm_squared()).collect();
        acc.push(&u);
    }
    acc.curve()
}

/// Paired ratio of mean quadratic KL `½ΔᵀV_TΔ` to its generation-1 value.
pub fn kl_ratio_curve(ens: &EnsembleResult, v_t: &DMatrix<f64>) -> Vec<CurvePoint> {
    let th0 = ens.theta0.as_slice();
    let mut acc = PairedRatio::new(ens.generations());
    for fits in complete(ens) {
        let u: Vec<f64> = fits.iter().map(|t| kl_quadratic(v_t, t.as_slice(), th0)).collect();
        acc.push(&u);
    }
    acc.curve()
}

/// The same ratio with the exact KL, as a cross-check of the quadratic
/// approximation. Every replication reuses one feature sample.
pub fn kl_exact_ratio_curve(
    ens: &EnsembleResult,
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    features: &FeatureDistribution,
    mc_samples: usize,
    rng: &mut StreamRng,
) -> Result<Vec<CurvePoint>> {
    let th0 = ens.theta0.as_slice();
    let design = match features.design_rows() {
        Some(rows) => rows,
        None => {
            let mut x = vec![0.0; features.dim()];
            (0..mc_samples)
                .map(|i| {
                    features.sample_into(i, rng, &mut x);
                    x.clone()
                })
                .collect()
        }
    };
    let fixed = FeatureDistribution::fixed_design(design);
    let mut acc = PairedRatio::new(ens.generations());
    for fits in complete(ens) {
        let u = fits
            .iter()
            .map(|t| kl_exact(model, fmap, t.as_slice(), th0, &fixed, 0, rng))
            .collect::<Result<Vec<f64>>>()?;
        acc.push(&u);
    }
    Ok(acc.curve())
}

/// Median over non-degenerate replications of `σ̂²_g = 1/θ̂_last`.
pub fn median_sigma2_curve(ens: &EnsembleResult) -> Vec<f64> {
    (1..=ens.generations())
        .map(|g| {
            let v: Vec<f64> = ens
                .trajectories
                .iter()
                .filter_map(|t| t.generations[g - 1].theta_hat.as_ref().map(|th| 1.0 / th[th.len() - 1]))
                .collect();
            median(&v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub generation: usize,
    pub are_vs_gen1: f64,
    pub are_stderr: f64,
    pub mse_ratio: f64,
    pub mse_stderr: f64,
    pub kl_ratio: f64,
    pub kl_stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub scheme: &'static str,
    /// Points per generation (`None` for the limit process).
    pub n: Option<usize>,
    /// Replications or trajectories entering the curves.
    pub units: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    /// Report for a finite-sample ensemble; ARE is `tr MSE₁ / tr MSE_g` on
    /// the same replications as the MSE ratio.
    pub fn from_workflow(ens: &EnsembleResult, v_t: &DMatrix<f64>) -> Self {
        let units = complete(ens).count();
        let rows = build_rows(&mse_ratio_curve(ens), &kl_ratio_curve(ens, v_t));
        Self {
            scheme: ens.scheme,
            n: Some(ens.n),
            units,
            rows,
        }
    }

    /// Report for a limit ensemble, where the MSE ratio is the variance ratio.
    pub fn from_limit(ens: &LimitEnsemble) -> Self {
        Self {
            scheme: ens.scheme,
            n: None,
            units: ens.trajectories,
            rows: build_rows(&ens.variance_ratio_curve(), &ens.kl_ratio_curve()),
        }
    }
}

fn build_rows(mse: &[CurvePoint], kl: &[CurvePoint]) -> Vec<ComparisonRow> {
    mse.iter()
        .zip(kl)
        .map(|(m, k)| ComparisonRow {
            generation: m.generation,
            are_vs_gen1: 1.0 / m.value,
            are_stderr: m.stderr / (m.value * m.value),
            mse_ratio: m.value,
            mse_stderr: m.stderr,
            kl_ratio: k.value,
            kl_stderr: k.stderr,
        })
        .collect()
}
