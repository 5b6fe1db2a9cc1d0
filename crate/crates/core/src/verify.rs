//! Likelihood-ratio diagnostics between the sequential synthetic-data law
//! and the iid reference law in which every generation is drawn from `θ₀`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expfam::{ExpFamilyModel, FeatureMap};
use crate::stats::pairwise_sum;
use crate::workflow::{run_replication, DataLaw, GenerationDataset, WorkflowConfig};

/// Largest number of generations the unit-mean check accepts; beyond it
/// `exp(llr)` is too heavy-tailed for Monte Carlo.
pub const MAX_CHECK_GENERATIONS: usize = 3;

/// Share of the total weight above which one replication makes the check
/// inconclusive.
pub const TAIL_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodRatioRecord {
    pub llr: f64,
    /// Contribution of each generation; the first is always zero.
    pub contributions: Vec<f64>,
    pub n: usize,
    pub generations: usize,
}

/// `Σ_{g≥2} Σ_i [log p(y_gi | X_gi θ̂_{g−1}) − log p(y_gi | X_gi θ₀)]`.
///
/// `theta_hats[g-1]` is the fit after generation `g`; only the first `G−1`
/// are used. Carrier terms cancel, so only `ηᵀT − A(η)` is evaluated.
pub fn log_likelihood_ratio(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    corpus: &GenerationDataset,
    theta_hats: &[DVector<f64>],
    theta0: &[f64],
) -> Result<LikelihoodRatioRecord> {
    llr_impl(model, fmap, corpus, theta_hats, theta0, false)
}

/// As [`log_likelihood_ratio`] but with full log densities, carriers included.
pub fn log_likelihood_ratio_full(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    corpus: &GenerationDataset,
    theta_hats: &[DVector<f64>],
    theta0: &[f64],
) -> Result<LikelihoodRatioRecord> {
    llr_impl(model, fmap, corpus, theta_hats, theta0, true)
}

fn llr_impl(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    corpus: &GenerationDataset,
    theta_hats: &[DVector<f64>],
    theta0: &[f64],
    carrier: bool,
) -> Result<LikelihoodRatioRecord> {
    let gens = corpus.generations();
    if gens > 1 && theta_hats.len() < gens - 1 {
        return Err(Error::Dimension {
            expected: gens - 1,
            got: theta_hats.len(),
        });
    }
    let logp = |y: f64, eta: &[f64]| {
        if carrier {
            model.log_density(y, eta)
        } else {
            model.log_density_kernel(y, eta)
        }
    };
    let mut contributions = vec![0.0; gens];
    for g in 2..=gens {
        let (x, y) = corpus.block(g);
        let th = theta_hats[g - 2].as_slice();
        let mut terms = Vec::with_capacity(y.len());
        for (row, &yi) in x.chunks_exact(corpus.dim_x).zip(y) {
            let e1 = fmap.natural_param(row, th)?;
            let e0 = fmap.natural_param(row, theta0)?;
            terms.push(logp(yi, e1.as_slice())? - logp(yi, e0.as_slice())?);
        }
        contributions[g - 1] = pairwise_sum(&terms);
    }
    Ok(LikelihoodRatioRecord {
        llr: contributions.iter().sum(),
        contributions,
        n: corpus.n_per_generation,
        generations: gens,
    })
}

/// Second-order expansion of the llr around `θ₀`:
/// `Σ_{g≥2} [Δ_{g−1}ᵀ Σ_i X_iᵀ(T_i − ∇A(X_iθ₀)) − (n/2) Δ_{g−1}ᵀ V_T Δ_{g−1}]`.
pub fn quadratic_log_likelihood_ratio(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    corpus: &GenerationDataset,
    theta_hats: &[DVector<f64>],
    theta0: &[f64],
    v_t: &DMatrix<f64>,
) -> Result<f64> {
    let gens = corpus.generations();
    let p = theta0.len();
    let n = corpus.n_per_generation as f64;
    let th0 = DVector::from_column_slice(theta0);
    let mut total = 0.0;
    for g in 2..=gens {
        let (x, y) = corpus.block(g);
        let mut score = DVector::zeros(p);
        for (row, &yi) in x.chunks_exact(corpus.dim_x).zip(y) {
            let xm = fmap.embed(row)?;
            let e0 = fmap.natural_param(row, theta0)?;
            let resid = model.sufficient_stat(yi) - model.grad_log_partition(e0.as_slice())?;
            score += xm.transpose() * resid;
        }
        let delta = &theta_hats[g - 2] - &th0;
        total += delta.dot(&score) - 0.5 * n * (delta.transpose() * v_t * &delta)[(0, 0)];
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContiguityReport {
    pub scheme: &'static str,
    pub n: usize,
    pub generations: usize,
    /// Replications that entered the mean.
    pub replications: usize,
    /// Replications dropped because a fit failed.
    pub degenerate: usize,
    pub mean_ratio: f64,
    pub stderr: f64,
    /// Largest single `exp(llr)` as a share of their sum.
    pub max_share: f64,
    pub inconclusive: bool,
}

impl ContiguityReport {
    /// `|mean − 1| ≤ k·stderr`.
    pub fn within_stderr(&self, k: f64) -> bool {
        (self.mean_ratio - 1.0).abs() <= k * self.stderr
    }
}

/// Monte Carlo check of `E^ref[exp(llr)] = 1`: corpora are drawn entirely
/// from `θ₀` and the scheme's estimators are fit on them.
pub fn contiguity_check(cfg: &WorkflowConfig, replications: usize, parallel_width: usize) -> Result<ContiguityReport> {
    cfg.validate()?;
    if cfg.generations > MAX_CHECK_GENERATIONS {
        return Err(Error::Config(format!(
            "the contiguity check supports at most {MAX_CHECK_GENERATIONS} generations"
        )));
    }
    if replications < 2 {
        return Err(Error::Config("the contiguity check needs at least two replications".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel_width.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let llrs: Vec<Option<f64>> = pool.install(|| {
        (0..replications as u64)
            .into_par_iter()
            .map(|r| {
                let (traj, corpus) = run_replication(cfg, r, DataLaw::Reference);
                let fits: Option<Vec<DVector<f64>>> = traj
                    .generations
                    .iter()
                    .take(cfg.generations.saturating_sub(1))
                    .map(|g| g.theta_hat.clone())
                    .collect();
                let fits = fits?;
                log_likelihood_ratio(&cfg.model, &cfg.fmap, &corpus, &fits, &cfg.theta0).ok().map(|rec| rec.llr)
            })
            .collect()
    });
    let ratios: Vec<f64> = llrs.iter().flatten().map(|l| l.exp()).collect();
    let m = ratios.len();
    if m < 2 {
        return Err(Error::Degenerate("fewer than two usable replications"));
    }
    let total = pairwise_sum(&ratios);
    let mean = total / m as f64;
    let sq: Vec<f64> = ratios.iter().map(|r| (r - mean).powi(2)).collect();
    let var = pairwise_sum(&sq) / (m - 1) as f64;
    let max_share = ratios.iter().copied().fold(0.0, f64::max) / total;
    Ok(ContiguityReport {
        scheme: cfg.scheme.name(),
        n: cfg.n,
        generations: cfg.generations,
        replications: m,
        degenerate: replications - m,
        mean_ratio: mean,
        stderr: (var / m as f64).sqrt(),
        max_share,
        inconclusive: max_share > TAIL_SHARE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::FeatureDistribution;
    use crate::workflow::{Estimator, WeightScheme};

    fn single_point() -> GenerationDataset {
        let mut d = GenerationDataset::new(1, 1);
        d.push_generation(&[1.0], &[0.2]);
        d.push_generation(&[1.0], &[1.0]);
        d
    }

    #[test]
    fn llr_examples() {
        let m = ExpFamilyModel::GaussianKnownVar { sigma2: 1.0 };
        let f = FeatureMap::Row { dim: 1 };
        let d = single_point();
        let rec = log_likelihood_ratio(&m, &f, &d, &[DVector::from_element(1, 0.5)], &[0.0]).unwrap();
        assert!((rec.llr - 0.375).abs() < 1e-15);
        assert_eq!(rec.contributions[0], 0.0);
        let same = log_likelihood_ratio(&m, &f, &d, &[DVector::from_element(1, 0.0)], &[0.0]).unwrap();
        assert_eq!(same.llr, 0.0);
        let mut one = GenerationDataset::new(1, 1);
        one.push_generation(&[1.0], &[3.0]);
        assert_eq!(log_likelihood_ratio(&m, &f, &one, &[], &[0.0]).unwrap().llr, 0.0);
    }

    #[test]
    fn quadratic_is_exact_for_gaussian() {
        let m = ExpFamilyModel::GaussianKnownVar { sigma2: 1.0 };
        let f = FeatureMap::Row { dim: 1 };
        let d = single_point();
        let th = [DVector::from_element(1, 0.5)];
        let q = quadratic_log_likelihood_ratio(&m, &f, &d, &th, &[0.0], &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((q - 0.375).abs() < 1e-15);
    }

    #[test]
    fn single_generation_check_is_exact() {
        let cfg = WorkflowConfig {
            model: ExpFamilyModel::GaussianKnownVar { sigma2: 1.0 },
            fmap: FeatureMap::Row { dim: 1 },
            features: FeatureDistribution::intercept_only(),
            theta0: vec![0.0],
            n: 10,
            generations: 1,
            estimator: Estimator::Mle,
            scheme: WeightScheme::Augment,
            seed: 4,
            separation_fallback: false,
            init: None,
        };
        let rep = contiguity_check(&cfg, 50, 1).unwrap();
        assert_eq!(rep.mean_ratio, 1.0);
        assert_eq!(rep.stderr, 0.0);
        assert!(!rep.inconclusive);
    }
}
