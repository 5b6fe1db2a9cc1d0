//! Weighted M-estimation: damped-Newton weighted maximum likelihood for the
//! exponential families, closed-form weighted least squares for the linear
//! model, the weighted median, and sandwich variances.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::expfam::{ExpFamilyModel, FeatureDistribution, FeatureMap, Small};
use crate::linalg::{self, spd_inverse};
use crate::rng::StreamRng;

/// Residual variance below which the linear model is declared collapsed.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Largest acceptable condition number of the weighted Gram matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// `|η|` beyond which a logistic fit is treated as separated.
const SATURATED_ETA: f64 = 20.0;

/// Columnar view of weighted data points `(x_i, y_i, ω_i)`.
///
/// Weights come from a [`WeightScheme`](crate::workflow::WeightScheme) and are
/// never computed from `x` or `y`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    dim_x: usize,
    x: &'a [f64],
    y: &'a [f64],
    weights: &'a [f64],
}

impl<'a> WeightedSample<'a> {
    /// `x` is row-major with `dim_x` columns.
    pub fn new(dim_x: usize, x: &'a [f64], y: &'a [f64], weights: &'a [f64]) -> Result<Self> {
        if x.len() != y.len() * dim_x {
            return Err(Error::Dimension {
                expected: y.len() * dim_x,
                got: x.len(),
            });
        }
        if weights.len() != y.len() {
            return Err(Error::Dimension {
                expected: y.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("weights must be finite and nonnegative".into()));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Empty("sample has no positive weight"));
        }
        Ok(Self { dim_x, x, y, weights })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn x(&self, i: usize) -> &'a [f64] {
        &self.x[i * self.dim_x..(i + 1) * self.dim_x]
    }

    pub fn y(&self) -> &'a [f64] {
        self.y
    }

    pub fn weights(&self) -> &'a [f64] {
        self.weights
    }

    /// Points with positive weight, as `(x, y, ω)`.
    pub fn active(&self) -> impl Iterator<Item = (&'a [f64], f64, f64)> + '_ {
        (0..self.len())
            .filter(|&i| self.weights[i] > 0.0)
            .map(move |i| (self.x(i), self.y[i], self.weights[i]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    /// Weighted loss `Σ ω (A(Xθ̂) − θ̂ᵀXᵀT(y))` at the returned point.
    pub loss: f64,
    /// `(1/N) Σ ω ∇²L(θ̂)` with `N` the number of points in the sample.
    pub observed_information: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    pub grad_tol: f64,
    /// Optional `½ λ ‖θ‖²` penalty; zero for honest maximum likelihood.
    pub ridge: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            max_halvings: 60,
            grad_tol: 1e-10,
            ridge: 0.0,
        }
    }
}

impl NewtonOptions {
    /// Tolerance on the gradient norm at loss value `loss`.
    pub fn tolerance(&self, loss: f64) -> f64 {
        self.grad_tol * loss.abs().max(1.0)
    }
}

struct Evaluation {
    loss: f64,
    grad: Vec<f64>,
    hess: DMatrix<f64>,
}

fn check_fit_dims(fmap: &FeatureMap, model: &ExpFamilyModel, sample: &WeightedSample, init: &[f64]) -> Result<()> {
    if fmap.dim_eta() != model.dim_eta() {
        return Err(Error::Dimension {
            expected: model.dim_eta(),
            got: fmap.dim_eta(),
        });
    }
    if sample.dim_x() != fmap.dim_x_raw() {
        return Err(Error::Dimension {
            expected: fmap.dim_x_raw(),
            got: sample.dim_x(),
        });
    }
    if init.len() != fmap.dim_theta() {
        return Err(Error::Dimension {
            expected: fmap.dim_theta(),
            got: init.len(),
        });
    }
    Ok(())
}

/// Weighted negative log-likelihood (carrier dropped) at `theta`.
pub fn weighted_loss(model: &ExpFamilyModel, fmap: &FeatureMap, sample: &WeightedSample, theta: &[f64]) -> Result<f64> {
    Ok(loss_only(model, fmap, sample, theta, 0.0)?.0)
}

/// Loss and the sum of absolute summands, which bounds its rounding error.
fn loss_only(model: &ExpFamilyModel, fmap: &FeatureMap, sample: &WeightedSample, theta: &[f64], ridge: f64) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut magnitude = 0.0;
    for (x, y, w) in sample.active() {
        let eta = fmap.eta_small(x, theta);
        let k = fmap.dim_eta();
        let c = model.curvature(&eta[..k])?;
        let t = model.sufficient_small(y);
        let dot: f64 = (0..k).map(|j| eta[j] * t[j]).sum();
        loss += w * (c.value - dot);
        magnitude += w * (c.value.abs() + dot.abs());
    }
    let penalty = 0.5 * ridge * theta.iter().map(|v| v * v).sum::<f64>();
    Ok((loss + penalty, magnitude + penalty))
}

fn evaluate(model: &ExpFamilyModel, fmap: &FeatureMap, sample: &WeightedSample, theta: &[f64], ridge: f64) -> Result<Evaluation> {
    let p = fmap.dim_theta();
    let k = fmap.dim_eta();
    let mut loss = 0.0;
    let mut grad = vec![0.0; p];
    let mut hess = DMatrix::zeros(p, p);
    for (x, y, w) in sample.active() {
        let eta = fmap.eta_small(x, theta);
        let c = model.curvature(&eta[..k])?;
        let t = model.sufficient_small(y);
        let dot: f64 = (0..k).map(|j| eta[j] * t[j]).sum();
        loss += w * (c.value - dot);
        let resid: Small = [c.grad[0] - t[0], c.grad[1] - t[1]];
        fmap.add_transpose_times(x, &resid, w, &mut grad);
        fmap.add_sandwich(x, &c.hess, w, &mut hess);
    }
    if ridge > 0.0 {
        for j in 0..p {
            loss += 0.5 * ridge * theta[j] * theta[j];
            grad[j] += ridge * theta[j];
            hess[(j, j)] += ridge;
        }
    }
    Ok(Evaluation { loss, grad, hess })
}

/// Newton direction `H⁻¹ g`, with a small Levenberg shift if `H` is not
/// numerically positive definite.
fn newton_direction(hess: &DMatrix<f64>, grad: &[f64]) -> Option<DVector<f64>> {
    let g = DVector::from_column_slice(grad);
    let scale = linalg::diag_scale(hess);
    let mut shift = 0.0;
    for _ in 0..8 {
        let mut h = linalg::symmetrize(hess);
        for i in 0..h.nrows() {
            h[(i, i)] += shift;
        }
        if let Some(chol) = h.cholesky() {
            let step = chol.solve(&g);
            if step.iter().all(|v| v.is_finite()) {
                return Some(step);
            }
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 100.0 };
    }
    None
}

/// Weighted MLE with the default Newton options.
pub fn fit_weighted_mle(model: &ExpFamilyModel, fmap: &FeatureMap, sample: &WeightedSample, init: &[f64]) -> Result<FitResult> {
    fit_weighted_mle_with(model, fmap, sample, init, &NewtonOptions::default())
}

/// Minimise `Σ ω (A(Xθ) − θᵀXᵀT(y))` by Newton's method with step halving.
pub fn fit_weighted_mle_with(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    sample: &WeightedSample,
    init: &[f64],
    opts: &NewtonOptions,
) -> Result<FitResult> {
    check_fit_dims(fmap, model, sample, init)?;
    let mut theta = init.to_vec();
    let mut eval = evaluate(model, fmap, sample, &theta, opts.ridge)?;
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let gnorm = norm(&eval.grad);
        if gnorm <= opts.tolerance(eval.loss) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let Some(step) = newton_direction(&eval.hess, &eval.grad) else {
            break;
        };
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            if let Ok((l, magnitude)) = loss_only(model, fmap, sample, &cand, opts.ridge) {
                if l < eval.loss {
                    accepted = Some((cand, None));
                    break;
                }
                // Near the optimum the loss change drops below rounding; a full
                // step that does not visibly raise the loss is kept when it
                // shrinks the gradient.
                if t == 1.0 && l <= eval.loss + 16.0 * f64::EPSILON * magnitude.max(1.0) {
                    let e = evaluate(model, fmap, sample, &cand, opts.ridge)?;
                    if norm(&e.grad) < gnorm {
                        accepted = Some((cand, Some(e)));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, e)) => {
                eval = match e {
                    Some(e) => e,
                    None => evaluate(model, fmap, sample, &cand, opts.ridge)?,
                };
                theta = cand;
            }
            // no decrease representable in floating point
            None => break,
        }
    }

    if matches!(model, ExpFamilyModel::BernoulliLogit) && opts.ridge == 0.0 {
        let saturated = sample
            .active()
            .any(|(x, _, _)| fmap.eta_small(x, &theta)[0].abs() > SATURATED_ETA);
        if saturated || (!converged && iterations >= opts.max_iter) {
            return Err(Error::Separation { iterations });
        }
    }

    let final_grad_norm = norm(&eval.grad);
    let mut info = eval.hess.clone();
    if opts.ridge > 0.0 {
        for i in 0..info.nrows() {
            info[(i, i)] -= opts.ridge;
        }
    }
    let loss = eval.loss - 0.5 * opts.ridge * theta.iter().map(|v| v * v).sum::<f64>();
    Ok(FitResult {
        theta_hat: DVector::from_vec(theta),
        converged,
        iterations,
        final_grad_norm,
        loss,
        observed_information: linalg::symmetrize(&info) / sample.len() as f64,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Weighted least squares for `y = xᵀβ + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub beta_hat: DVector<f64>,
    /// `Σ ω r² / Σ ω`.
    pub sigma2_hat: f64,
    /// Natural parameter `(β̂/σ̂², 1/σ̂²)`.
    pub theta_hat: DVector<f64>,
}

pub fn fit_linear_gaussian(sample: &WeightedSample) -> Result<LinearFit> {
    let d = sample.dim_x();
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (x, y, w) in sample.active() {
        for i in 0..d {
            let wx = w * x[i];
            rhs[i] += wx * y;
            for j in 0..d {
                gram[(i, j)] += wx * x[j];
            }
        }
    }
    let eig = SymmetricEigen::new(gram.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularDesign { condition });
    }
    let beta_hat = gram
        .cholesky()
        .ok_or(Error::SingularDesign { condition })?
        .solve(&rhs);
    let mut ss = 0.0;
    for (x, y, w) in sample.active() {
        let fit: f64 = x.iter().zip(beta_hat.iter()).map(|(a, b)| a * b).sum();
        ss += w * (y - fit) * (y - fit);
    }
    let sigma2_hat = ss / sample.total_weight();
    if !(sigma2_hat >= SIGMA2_FLOOR) {
        return Err(Error::DegenerateVariance(sigma2_hat));
    }
    let mut theta_hat = DVector::zeros(d + 1);
    for i in 0..d {
        theta_hat[i] = beta_hat[i] / sigma2_hat;
    }
    theta_hat[d] = 1.0 / sigma2_hat;
    Ok(LinearFit {
        beta_hat,
        sigma2_hat,
        theta_hat,
    })
}

/// Lower weighted median: the smallest value whose cumulative weight reaches
/// half the total.
pub fn fit_weighted_median(values: &[(f64, f64)]) -> Result<f64> {
    let mut v: Vec<(f64, f64)> = values.iter().copied().filter(|(_, w)| *w > 0.0).collect();
    if v.is_empty() {
        return Err(Error::Empty("weighted median of no positive weights"));
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = 0.5 * v.iter().map(|(_, w)| w).sum::<f64>();
    let mut cum = 0.0;
    for (x, w) in &v {
        cum += w;
        if cum >= half {
            return Ok(*x);
        }
    }
    Ok(v[v.len() - 1].0)
}

/// Loss whose minimiser defines the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    NegLogLik,
    /// `|y − θ|`; its minimiser is the median.
    AbsoluteDeviation,
}

/// Asymptotic covariance `(E∇²L)⁻¹ E[∇L∇Lᵀ] (E∇²L)⁻¹` at `theta0`.
///
/// Closed forms are returned for the known-variance normal mean (`σ²`, or
/// `σ² E[xxᵀ]⁻¹` in general) and for the median of normal data (`πσ²/2`);
/// otherwise the outer-product term is estimated from `mc_samples` draws.
pub fn sandwich_variance(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    loss: LossKind,
    theta0: &[f64],
    features: &FeatureDistribution,
    mc_samples: usize,
    rng: &mut StreamRng,
) -> Result<DMatrix<f64>> {
    if theta0.len() != fmap.dim_theta() {
        return Err(Error::Dimension {
            expected: fmap.dim_theta(),
            got: theta0.len(),
        });
    }
    match loss {
        LossKind::AbsoluteDeviation => {
            let location = matches!(fmap, FeatureMap::Row { dim: 1 })
                && features.design_rows().is_some_and(|r| r.iter().all(|row| row == &[1.0]));
            match model {
                ExpFamilyModel::GaussianKnownVar { sigma2 } if location => {
                    Ok(DMatrix::from_element(1, 1, PI * sigma2 / 2.0))
                }
                _ => Err(Error::UnsupportedScheme("median loss outside the normal location model")),
            }
        }
        LossKind::NegLogLik => {
            if let ExpFamilyModel::GaussianKnownVar { sigma2 } = model {
                if let Some(m) = features.exact_second_moment() {
                    let inv = spd_inverse(&m).map_err(|_| Error::SingularInformation)?;
                    return Ok(inv * *sigma2);
                }
            }
            if mc_samples < 10_000 {
                return Err(Error::Config(format!("sandwich variance needs ≥ 10000 draws, got {mc_samples}")));
            }
            let p = fmap.dim_theta();
            let k = fmap.dim_eta();
            let d = features.dim();
            let mut bread = DMatrix::zeros(p, p);
            let mut meat = DMatrix::zeros(p, p);
            let mut x = vec![0.0; d];
            let mut score = vec![0.0; p];
            for i in 0..mc_samples {
                features.sample_into(i, rng, &mut x);
                let eta = fmap.eta_small(&x, theta0);
                let c = model.curvature(&eta[..k])?;
                let y = model.sample_response(&eta[..k], rng)?;
                let t = model.sufficient_small(y);
                score.iter_mut().for_each(|s| *s = 0.0);
                fmap.add_transpose_times(&x, &[c.grad[0] - t[0], c.grad[1] - t[1]], 1.0, &mut score);
                fmap.add_sandwich(&x, &c.hess, 1.0, &mut bread);
                for a in 0..p {
                    for b in 0..p {
                        meat[(a, b)] += score[a] * score[b];
                    }
                }
            }
            let m = mc_samples as f64;
            let bread_inv = spd_inverse(&(bread / m)).map_err(|_| Error::SingularInformation)?;
            Ok(linalg::symmetrize(&(&bread_inv * (meat / m) * &bread_inv)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn sample<'a>(x: &'a [f64], y: &'a [f64], w: &'a [f64]) -> WeightedSample<'a> {
        WeightedSample::new(x.len() / y.len(), x, y, w).unwrap()
    }

    #[test]
    fn gaussian_mean_mle() {
        let m = ExpFamilyModel::GaussianKnownVar { sigma2: 1.0 };
        let (x, y, w) = ([1.0; 3], [1.0, 2.0, 3.0], [1.0; 3]);
        let fit = fit_weighted_mle(&m, &FeatureMap::Row { dim: 1 }, &sample(&x, &y, &w), &[0.0]).unwrap();
        assert!(fit.converged);
        assert!((fit.theta_hat[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_symmetric_data() {
        let m = ExpFamilyModel::BernoulliLogit;
        let (x, y, w) = ([1.0, 1.0, -1.0, -1.0], [1.0, 0.0, 1.0, 0.0], [1.0; 4]);
        let fit = fit_weighted_mle(&m, &FeatureMap::Row { dim: 1 }, &sample(&x, &y, &w), &[0.3]).unwrap();
        assert!(fit.theta_hat[0].abs() < 1e-9, "{:?}", fit);
    }

    #[test]
    fn logistic_intercept_log3() {
        let m = ExpFamilyModel::BernoulliLogit;
        let fmap = FeatureMap::Row { dim: 1 };
        let (x, y, w) = ([1.0; 4], [1.0, 1.0, 1.0, 0.0], [1.0; 4]);
        let s = sample(&x, &y, &w);
        let fit = fit_weighted_mle(&m, &fmap, &s, &[0.0]).unwrap();
        // grid search oracle on the loss itself
        let best = (0..=40_000)
            .map(|i| -2.0 + i as f64 * 1e-4)
            .min_by(|a, b| {
                weighted_loss(&m, &fmap, &s, &[*a])
                    .unwrap()
                    .total_cmp(&weighted_loss(&m, &fmap, &s, &[*b]).unwrap())
            })
            .unwrap();
        assert!((best - 3f64.ln()).abs() < 1e-4);
        assert!((fit.theta_hat[0] - 3f64.ln()).abs() < 1e-10);
        assert!((fit.theta_hat[0] - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn separation_is_reported() {
        let m = ExpFamilyModel::BernoulliLogit;
        let fmap = FeatureMap::Row { dim: 1 };
        let (x, y, w) = ([1.0, 2.0, -1.0, -3.0], [1.0, 1.0, 0.0, 0.0], [1.0; 4]);
        let s = sample(&x, &y, &w);
        assert!(matches!(fit_weighted_mle(&m, &fmap, &s, &[0.0]), Err(Error::Separation { .. })));
        let opts = NewtonOptions {
            ridge: 1e-8,
            ..NewtonOptions::default()
        };
        let fit = fit_weighted_mle_with(&m, &fmap, &s, &[0.0], &opts).unwrap();
        assert!(fit.theta_hat[0] > 5.0);
    }

    #[test]
    fn infeasible_start_is_a_domain_error() {
        let m = ExpFamilyModel::LinearUnknownVar;
        let fmap = FeatureMap::LinearBlock { dim: 1 };
        let (x, y, w) = ([1.0, 2.0], [1.0, 3.0], [1.0; 2]);
        let s = sample(&x, &y, &w);
        assert!(matches!(fit_weighted_mle(&m, &fmap, &s, &[0.0, -1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_examples() {
        let (x, y, w) = ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0; 3]);
        assert!(matches!(fit_linear_gaussian(&sample(&x, &y, &w)), Err(Error::DegenerateVariance(_))));

        let x = [1.0, -1.0, 1.0, -1.0];
        let y = [0.0, 0.0, 2.0, -2.0];
        let fit = fit_linear_gaussian(&sample(&x, &y, &[1.0; 4])).unwrap();
        assert!((fit.beta_hat[0] - 1.0).abs() < 1e-15);
        assert!((fit.sigma2_hat - 1.0).abs() < 1e-15);
        assert!((fit.theta_hat[1] - 1.0).abs() < 1e-15);

        let w = [1.0, 1.0, 0.0, 0.0];
        assert!(matches!(fit_linear_gaussian(&sample(&x, &y, &w)), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn singular_design() {
        let x = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        let y = [1.0, 0.0, 2.0];
        assert!(matches!(fit_linear_gaussian(&sample(&x, &y, &[1.0; 3])), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn median_examples() {
        assert_eq!(fit_weighted_median(&[(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).unwrap(), 2.0);
        assert_eq!(fit_weighted_median(&[(4.0, 1.0), (2.0, 1.0), (3.0, 1.0), (1.0, 1.0)]).unwrap(), 2.0);
        assert_eq!(fit_weighted_median(&[(1.0, 5.0), (2.0, 1.0), (3.0, 1.0)]).unwrap(), 1.0);
        assert!(matches!(fit_weighted_median(&[]), Err(Error::Empty(_))));
        assert!(matches!(fit_weighted_median(&[(1.0, 0.0)]), Err(Error::Empty(_))));
    }

    #[test]
    fn sandwich_closed_forms() {
        let mut rng = stream(1, 0, 0, Purpose::MonteCarlo);
        let g = ExpFamilyModel::GaussianKnownVar { sigma2: 1.0 };
        let row = FeatureMap::Row { dim: 1 };
        let h = FeatureDistribution::intercept_only();
        let v = sandwich_variance(&g, &row, LossKind::NegLogLik, &[0.0], &h, 0, &mut rng).unwrap();
        assert_eq!(v[(0, 0)], 1.0);
        let v = sandwich_variance(&g, &row, LossKind::AbsoluteDeviation, &[0.0], &h, 0, &mut rng).unwrap();
        assert!((v[(0, 0)] - PI / 2.0).abs() < 1e-15);
        let b = ExpFamilyModel::BernoulliLogit;
        let v = sandwich_variance(&b, &row, LossKind::NegLogLik, &[0.0], &h, 10_000, &mut rng).unwrap();
        assert!((v[(0, 0)] - 4.0).abs() < 1e-9);
        assert!(matches!(
            sandwich_variance(&b, &row, LossKind::NegLogLik, &[0.0], &h, 10, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sandwich_matches_inverse_fisher_for_mle() {
        // logistic slope, θ₀ = 0.5, x ~ N(0,1): meat ≈ bread, so V ≈ bread⁻¹
        let mut rng = stream(2, 0, 0, Purpose::MonteCarlo);
        let b = ExpFamilyModel::BernoulliLogit;
        let row = FeatureMap::Row { dim: 1 };
        let h = FeatureDistribution::standard_normal(1, false);
        let v = sandwich_variance(&b, &row, LossKind::NegLogLik, &[0.5], &h, 400_000, &mut rng).unwrap();
        // oracle: E[x² σ'(x/2)] by midpoint quadrature
        let step = 1e-3;
        let fisher: f64 = (0..20_000)
            .map(|i| -10.0 + (i as f64 + 0.5) * step)
            .map(|x| {
                let p = crate::expfam::sigmoid(0.5 * x);
                x * x * p * (1.0 - p) * (-x * x / 2.0).exp() / (2.0 * PI).sqrt() * step
            })
            .sum();
        assert!((v[(0, 0)] * fisher - 1.0).abs() < 0.02, "{} vs {}", v[(0, 0)], 1.0 / fisher);
    }

    #[test]
    fn median_variance_monte_carlo_oracle() {
        // n · Var(median of n standard normals) → π/2
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = stream(3, 0, 0, Purpose::MonteCarlo);
        let (n, reps) = (10_000usize, 10_000usize);
        let mut buf = vec![0.0; n];
        let mut meds = Vec::with_capacity(reps);
        for _ in 0..reps {
            buf.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let mid = (n - 1) / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
            meds.push(*m);
        }
        let mean = meds.iter().sum::<f64>() / reps as f64;
        let var = meds.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((n as f64 * var / (PI / 2.0) - 1.0).abs() < 0.03);
    }
}
