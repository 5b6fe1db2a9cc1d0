//! The generation loop: fit on the weighted corpus, sample fresh features,
//! draw synthetic responses from the fitted model, append, repeat.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{
    fit_linear_gaussian, fit_weighted_median, fit_weighted_mle_with, NewtonOptions, WeightedSample,
};
use crate::expfam::{ExpFamilyModel, FeatureDistribution, FeatureMap};
use crate::rng::{stream, Purpose, StreamRng};

/// Ridge used when a separated logistic fit is retried.
pub const SEPARATION_RIDGE: f64 = 1e-8;

/// A weight rule that sees only indices and a random stream.
pub trait WeightRule: Send + Sync + fmt::Debug {
    /// Weight of point `index` of source generation `source` when fitting
    /// generation `generation`.
    fn weight(&self, generation: usize, source: usize, index: usize, rng: &mut StreamRng) -> f64;
}

#[derive(Debug, Clone)]
pub enum WeightScheme {
    /// Only the newest generation.
    Discard,
    /// Everything accumulated so far, equally.
    Augment,
    /// A uniformly random size-`n` subset of the `nG` accumulated points.
    Subsample,
    Custom(Arc<dyn WeightRule>),
}

impl WeightScheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Discard => "discard",
            Self::Augment => "augment",
            Self::Subsample => "subsample",
            Self::Custom(_) => "custom",
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discard" => Ok(Self::Discard),
            "augment" => Ok(Self::Augment),
            "subsample" | "augment-subsample" => Ok(Self::Subsample),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// `ω_{G,g,i}` for all `nG` points of the corpus at generation `generation`,
/// ordered by source generation then index.
pub fn weights_for_generation(scheme: &WeightScheme, generation: usize, n: usize, rng: &mut StreamRng) -> Vec<f64> {
    let total = n * generation;
    match scheme {
        WeightScheme::Discard => {
            let mut w = vec![0.0; total];
            w[total - n..].iter_mut().for_each(|v| *v = 1.0);
            w
        }
        WeightScheme::Augment => vec![1.0; total],
        WeightScheme::Subsample => {
            // partial Fisher–Yates over the index set
            let mut idx: Vec<usize> = (0..total).collect();
            let mut w = vec![0.0; total];
            for k in 0..n.min(total) {
                let j = rng.random_range(k..total);
                idx.swap(k, j);
                w[idx[k]] = 1.0;
            }
            w
        }
        WeightScheme::Custom(rule) => {
            let mut w = Vec::with_capacity(total);
            for source in 1..=generation {
                for i in 0..n {
                    w.push(rule.weight(generation, source, i, rng).max(0.0));
                }
            }
            w
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Weighted MLE by damped Newton.
    Mle,
    /// Weighted least squares plus residual variance (linear model only).
    LinearClosedForm,
    /// Weighted median of the responses (location model only).
    Median,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mle => "mle",
            Self::LinearClosedForm => "linear_closed_form",
            Self::Median => "median",
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowConfig {
    pub model: ExpFamilyModel,
    pub fmap: FeatureMap,
    pub features: FeatureDistribution,
    pub theta0: Vec<f64>,
    /// Points per generation.
    pub n: usize,
    pub generations: usize,
    pub estimator: Estimator,
    pub scheme: WeightScheme,
    pub seed: u64,
    /// Retry a separated logistic fit with a tiny ridge instead of stopping.
    pub separation_fallback: bool,
    /// Newton starting point; `None` starts at `theta0`.
    pub init: Option<Vec<f64>>,
}

impl WorkflowConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.fmap.dim_theta();
        if self.theta0.len() != p {
            return Err(Error::Config(format!("theta0 has length {}, model needs {p}", self.theta0.len())));
        }
        if self.fmap.dim_eta() != self.model.dim_eta() {
            return Err(Error::Config(format!("feature map does not match {}", self.model.name())));
        }
        if self.features.dim() != self.fmap.dim_x_raw() {
            return Err(Error::Config(format!(
                "features have dimension {}, feature map expects {}",
                self.features.dim(),
                self.fmap.dim_x_raw()
            )));
        }
        if self.n < p + 1 {
            return Err(Error::Config(format!("n = {} must be at least d_Θ + 1 = {}", self.n, p + 1)));
        }
        if self.generations == 0 {
            return Err(Error::Config("at least one generation is required".into()));
        }
        if let Some(init) = &self.init {
            if init.len() != p {
                return Err(Error::Config("init has the wrong length".into()));
            }
        }
        match self.estimator {
            Estimator::LinearClosedForm if !matches!(self.model, ExpFamilyModel::LinearUnknownVar) => {
                return Err(Error::Config("linear_closed_form needs the linear_unknown_var model".into()))
            }
            Estimator::Median
                if !(matches!(self.model, ExpFamilyModel::GaussianKnownVar { .. })
                    && matches!(self.fmap, FeatureMap::Row { dim: 1 })) =>
            {
                return Err(Error::Config("the median estimator needs gaussian_known_var with a scalar design".into()))
            }
            _ => {}
        }
        if let ExpFamilyModel::LinearUnknownVar = self.model {
            if !(self.theta0[p - 1] > 0.0) {
                return Err(Error::Config("theta0 must have positive precision".into()));
            }
        }
        Ok(())
    }
}

/// Built-in experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Normal mean with `σ² = 1`, intercept-only design, `θ₀ = 0`.
    Gaussian,
    /// Logistic regression, `X ∼ N(0, I₂)` without intercept, `θ₀ = (1, −1)`.
    Logistic,
    /// Normal linear model with unknown variance: intercept plus one
    /// standard normal feature, `β₀ = (0.5, 1)`, `σ₀² = 1`.
    Linear,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gaussian_known_var" => Ok(Self::Gaussian),
            "logistic" | "bernoulli_logit" => Ok(Self::Logistic),
            "linear" | "linear_unknown_var" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Logistic => "logistic",
            Self::Linear => "linear",
        }
    }

    pub fn config(&self, n: usize, generations: usize, scheme: WeightScheme, seed: u64) -> WorkflowConfig {
        let (model, fmap, features, theta0, estimator) = match self {
            Self::Gaussian => (
                ExpFamilyModel::GaussianKnownVar { sigma2: 1.0 },
                FeatureMap::Row { dim: 1 },
                FeatureDistribution::intercept_only(),
                vec![0.0],
                Estimator::Mle,
            ),
            Self::Logistic => (
                ExpFamilyModel::BernoulliLogit,
                FeatureMap::Row { dim: 2 },
                FeatureDistribution::standard_normal(2, false),
                vec![1.0, -1.0],
                Estimator::Mle,
            ),
            Self::Linear => (
                ExpFamilyModel::LinearUnknownVar,
                FeatureMap::LinearBlock { dim: 2 },
                FeatureDistribution::standard_normal(1, true),
                vec![0.5, 1.0, 1.0],
                Estimator::LinearClosedForm,
            ),
        };
        WorkflowConfig {
            model,
            fmap,
            features,
            theta0,
            n,
            generations,
            estimator,
            scheme,
            seed,
            separation_fallback: false,
            init: None,
        }
    }
}

/// The accumulated corpus, stored column-wise; point `i` belongs to
/// generation `i / n + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationDataset {
    pub dim_x: usize,
    pub n_per_generation: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl GenerationDataset {
    pub fn new(dim_x: usize, n_per_generation: usize) -> Self {
        Self {
            dim_x,
            n_per_generation,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn generations(&self) -> usize {
        self.len() / self.n_per_generation
    }

    /// `(g, i)` tags of point `k`, with `g` starting at 1.
    pub fn tags(&self, k: usize) -> (usize, usize) {
        (k / self.n_per_generation + 1, k % self.n_per_generation)
    }

    pub fn push_generation(&mut self, x: &[f64], y: &[f64]) {
        assert_eq!(y.len(), self.n_per_generation, "generation block has the wrong size");
        assert_eq!(x.len(), y.len() * self.dim_x);
        self.x.extend_from_slice(x);
        self.y.extend_from_slice(y);
    }

    /// Features and responses of generation `g` (1-based).
    pub fn block(&self, g: usize) -> (&[f64], &[f64]) {
        let n = self.n_per_generation;
        let (a, b) = ((g - 1) * n, g * n);
        (&self.x[a * self.dim_x..b * self.dim_x], &self.y[a..b])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    /// `None` once the trajectory is degenerate.
    pub theta_hat: Option<DVector<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub degenerate: bool,
    /// Why the fit failed, for the first degenerate generation.
    pub failure: Option<String>,
    pub corpus_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub scheme: &'static str,
    pub generations: Vec<GenerationRecord>,
}

impl TrajectoryRecord {
    pub fn theta_hats(&self) -> Vec<Option<&DVector<f64>>> {
        self.generations.iter().map(|r| r.theta_hat.as_ref()).collect()
    }

    /// `σ̂²_g = 1/θ̂_last` for the unknown-variance linear model.
    pub fn sigma2_hats(&self) -> Vec<Option<f64>> {
        self.generations
            .iter()
            .map(|r| r.theta_hat.as_ref().map(|t| 1.0 / t[t.len() - 1]))
            .collect()
    }
}

/// Which law generates responses after generation 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataLaw {
    /// Responses of generation `g+1` come from the fit `θ̂_g`.
    Sequential,
    /// Every generation is drawn from `θ₀`; estimators are still fit per
    /// scheme. This is the iid reference law.
    Reference,
}

/// One trajectory with replication index 0.
pub fn run_workflow(cfg: &WorkflowConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    Ok(run_replication(cfg, 0, DataLaw::Sequential).0)
}

/// One trajectory and its full corpus. Streams are keyed by
/// `(cfg.seed, replication, generation, purpose)`.
pub fn run_replication(cfg: &WorkflowConfig, replication: u64, law: DataLaw) -> (TrajectoryRecord, GenerationDataset) {
    run_replication_from(cfg, replication, law, None)
}

/// As [`run_replication`], but generation 1 is the given real sample
/// `(x, y)` (row-major, exactly `cfg.n` points) instead of a draw at `θ₀`.
pub fn run_replication_from(
    cfg: &WorkflowConfig,
    replication: u64,
    law: DataLaw,
    real: Option<(&[f64], &[f64])>,
) -> (TrajectoryRecord, GenerationDataset) {
    let n = cfg.n;
    let dim = cfg.features.dim();
    let k = cfg.model.dim_eta();
    let mut corpus = GenerationDataset::new(dim, n);
    let mut records = Vec::with_capacity(cfg.generations);
    let mut previous: Option<DVector<f64>> = None;
    let mut degenerate = false;
    let theta0 = DVector::from_column_slice(&cfg.theta0);

    for g in 1..=cfg.generations {
        if degenerate {
            records.push(GenerationRecord {
                generation: g,
                theta_hat: None,
                converged: false,
                iterations: 0,
                final_grad_norm: f64::NAN,
                degenerate: true,
                failure: None,
                corpus_size: n * g,
            });
            continue;
        }
        let source = match (law, &previous) {
            (DataLaw::Sequential, Some(prev)) => prev,
            _ => &theta0,
        };
        let extended = match real {
            Some((x, y)) if g == 1 => {
                corpus.push_generation(x, y);
                Ok(())
            }
            _ => extend_corpus(cfg, &mut corpus, source.as_slice(), replication, g, k),
        };
        let outcome = extended.and_then(|_| fit_generation(cfg, &corpus, replication, g));
        match outcome {
            Ok(fit) => {
                records.push(GenerationRecord {
                    generation: g,
                    theta_hat: Some(fit.theta.clone()),
                    converged: fit.converged,
                    iterations: fit.iterations,
                    final_grad_norm: fit.grad_norm,
                    degenerate: false,
                    failure: None,
                    corpus_size: n * g,
                });
                previous = Some(fit.theta);
            }
            Err(e) => {
                degenerate = true;
                records.push(GenerationRecord {
                    generation: g,
                    theta_hat: None,
                    converged: false,
                    iterations: 0,
                    final_grad_norm: f64::NAN,
                    degenerate: true,
                    failure: Some(e.to_string()),
                    corpus_size: n * g,
                });
            }
        }
    }
    (
        TrajectoryRecord {
            scheme: cfg.scheme.name(),
            generations: records,
        },
        corpus,
    )
}

fn extend_corpus(
    cfg: &WorkflowConfig,
    corpus: &mut GenerationDataset,
    theta: &[f64],
    replication: u64,
    g: usize,
    k: usize,
) -> Result<()> {
    let mut frng = stream(cfg.seed, replication, g as u64, Purpose::Features);
    let x = cfg.features.sample_rows(cfg.n, &mut frng);
    let mut yrng = stream(cfg.seed, replication, g as u64, Purpose::Responses);
    let dim = corpus.dim_x;
    let mut y = Vec::with_capacity(cfg.n);
    for row in x.chunks_exact(dim) {
        let eta = cfg.fmap.eta_small(row, theta);
        y.push(cfg.model.sample_response(&eta[..k], &mut yrng)?);
    }
    corpus.push_generation(&x, &y);
    Ok(())
}

struct GenerationFit {
    theta: DVector<f64>,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
}

fn fit_generation(cfg: &WorkflowConfig, corpus: &GenerationDataset, replication: u64, g: usize) -> Result<GenerationFit> {
    let mut wrng = stream(cfg.seed, replication, g as u64, Purpose::Weights);
    let weights = weights_for_generation(&cfg.scheme, g, cfg.n, &mut wrng);
    let sample = WeightedSample::new(corpus.dim_x, &corpus.x, &corpus.y, &weights)?;
    match cfg.estimator {
        Estimator::Mle => {
            let init = cfg.init.as_deref().unwrap_or(&cfg.theta0);
            let opts = NewtonOptions::default();
            let fit = match fit_weighted_mle_with(&cfg.model, &cfg.fmap, &sample, init, &opts) {
                Err(Error::Separation { .. }) if cfg.separation_fallback => {
                    let ridge = NewtonOptions {
                        ridge: SEPARATION_RIDGE,
                        ..opts
                    };
                    fit_weighted_mle_with(&cfg.model, &cfg.fmap, &sample, init, &ridge)?
                }
                other => other?,
            };
            Ok(GenerationFit {
                theta: fit.theta_hat,
                converged: fit.converged,
                iterations: fit.iterations,
                grad_norm: fit.final_grad_norm,
            })
        }
        Estimator::LinearClosedForm => Ok(GenerationFit {
            theta: fit_linear_gaussian(&sample)?.theta_hat,
            converged: true,
            iterations: 0,
            grad_norm: 0.0,
        }),
        Estimator::Median => {
            let pairs: Vec<(f64, f64)> = sample.active().map(|(_, y, w)| (y, w)).collect();
            Ok(GenerationFit {
                theta: DVector::from_element(1, fit_weighted_median(&pairs)?),
                converged: true,
                iterations: 0,
                grad_norm: 0.0,
            })
        }
    }
}

/// Per-generation aggregate over the non-degenerate replications.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    pub generation: usize,
    pub valid: usize,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Mean of `‖θ̂_g − θ₀‖²`.
    pub trace_mse: f64,
    pub trace_mse_stderr: f64,
    pub fraction_degenerate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub scheme: &'static str,
    pub theta0: DVector<f64>,
    pub n: usize,
    pub trajectories: Vec<TrajectoryRecord>,
    pub summaries: Vec<GenerationSummary>,
}

impl EnsembleResult {
    pub fn replications(&self) -> usize {
        self.trajectories.len()
    }

    pub fn generations(&self) -> usize {
        self.summaries.len()
    }

    /// Squared errors `‖θ̂_g − θ₀‖²` per replication (`None` if degenerate).
    pub fn squared_errors(&self, g: usize) -> Vec<Option<f64>> {
        self.trajectories
            .iter()
            .map(|t| {
                t.generations[g - 1]
                    .theta_hat
                    .as_ref()
                    .map(|th| (th - &self.theta0).norm_squared())
            })
            .collect()
    }
}

/// Independent replications `0..replications`, run on a pool of
/// `parallel_width` threads. Output does not depend on the width.
pub fn run_ensemble(cfg: &WorkflowConfig, replications: usize, parallel_width: usize) -> Result<EnsembleResult> {
    run_ensemble_from(cfg, replications, parallel_width, None)
}

/// As [`run_ensemble`], with every replication sharing the real
/// generation-1 sample `(x, y)` when one is given.
pub fn run_ensemble_from(
    cfg: &WorkflowConfig,
    replications: usize,
    parallel_width: usize,
    real: Option<(&[f64], &[f64])>,
) -> Result<EnsembleResult> {
    cfg.validate()?;
    if let Some((x, y)) = real {
        let d = cfg.features.dim();
        if y.len() != cfg.n || x.len() != cfg.n * d {
            return Err(Error::Dimension {
                expected: cfg.n * (d + 1),
                got: x.len() + y.len(),
            });
        }
    }
    if replications < 2 {
        return Err(Error::Config("an ensemble needs at least two replications".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel_width.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let trajectories: Vec<TrajectoryRecord> = pool.install(|| {
        (0..replications as u64)
            .into_par_iter()
            .map(|r| run_replication_from(cfg, r, DataLaw::Sequential, real).0)
            .collect()
    });
    let theta0 = DVector::from_column_slice(&cfg.theta0);
    let summaries = (1..=cfg.generations)
        .map(|g| summarize(&trajectories, &theta0, g))
        .collect();
    Ok(EnsembleResult {
        scheme: cfg.scheme.name(),
        theta0,
        n: cfg.n,
        trajectories,
        summaries,
    })
}

fn summarize(trajectories: &[TrajectoryRecord], theta0: &DVector<f64>, g: usize) -> GenerationSummary {
    let p = theta0.len();
    let fits: Vec<&DVector<f64>> = trajectories
        .iter()
        .filter_map(|t| t.generations[g - 1].theta_hat.as_ref())
        .collect();
    let valid = fits.len();
    let mut mean = DVector::zeros(p);
    for f in &fits {
        mean += *f;
    }
    let mut covariance = DMatrix::zeros(p, p);
    let (mut mse, mut mse_sq) = (0.0, 0.0);
    if valid > 0 {
        mean /= valid as f64;
        for f in &fits {
            let c = *f - &mean;
            covariance += &c * c.transpose();
            let e = (*f - theta0).norm_squared();
            mse += e;
            mse_sq += e * e;
        }
        covariance /= (valid.max(2) - 1) as f64;
        mse /= valid as f64;
        mse_sq /= valid as f64;
    }
    let stderr = if valid > 1 {
        ((mse_sq - mse * mse).max(0.0) / (valid - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    GenerationSummary {
        generation: g,
        valid,
        mean,
        covariance,
        trace_mse: if valid > 0 { mse } else { f64::NAN },
        trace_mse_stderr: stderr,
        fraction_degenerate: 1.0 - valid as f64 / trajectories.len() as f64,
    }
}
