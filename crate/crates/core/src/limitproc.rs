//! The large-sample limit of a weighted workflow: a sequential Gaussian
//! process in which each generation's sufficient-statistic fluctuation is
//! shifted by the previous estimator error, and the estimator error is
//! drawn from the iid reference law conditioned on the realised history.
//!
//! Coordinates are ordered `W_T(1), W_Θ(1), W_T(2), W_Θ(2), …`, each a
//! `d`-vector. "Block" `k` is `W_T(k/2 + 1)` for even `k` and `W_Θ(k/2 + 1)`
//! for odd `k`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expfam::{ExpFamilyModel, FeatureDistribution, FeatureMap};
use crate::linalg::{self, PivotedCholesky, JITTER, PIVOT_FLOOR};
use crate::rng::{stream, Purpose, StreamRng};
use crate::stats::{CurvePoint, PairedRatio};

/// Largest `G` for which the full reference covariance is assembled.
pub const MAX_FULL_GENERATIONS: usize = 200;

/// Trajectories per parallel work unit. Fixed so reductions do not depend
/// on the pool width.
const CHUNK: usize = 1024;

/// Reference covariance blocks supplied by a user-defined scheme.
/// `Cov(W_T(a), W_T(b)) = V_T·δ_ab` is fixed for every scheme.
pub trait ReferenceBlocks: Send + Sync + fmt::Debug {
    /// `Cov(W_Θ(a), W_Θ(b))` for `a ≥ b`.
    fn theta_theta(&self, a: usize, b: usize, v_theta: &DMatrix<f64>) -> DMatrix<f64>;
    /// `Cov(W_Θ(a), W_T(b))` for any `a`, `b`.
    fn theta_t(&self, a: usize, b: usize, d: usize) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub enum LimitScheme {
    Discard,
    Augment,
    Subsample,
    Custom(Arc<dyn ReferenceBlocks>),
}

impl LimitScheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Discard => "discard",
            Self::Augment => "augment",
            Self::Subsample => "subsample",
            Self::Custom(_) => "custom",
        }
    }

    /// Whether `W_Θ(g)` given the history depends only on `W_T(g)` and
    /// `W_Θ(g−1)`.
    pub fn is_markov(&self) -> bool {
        matches!(self, Self::Discard | Self::Augment)
    }
}

impl std::str::FromStr for LimitScheme {
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

#[derive(Debug, Clone)]
pub struct LimitProcessSpec {
    pub d: usize,
    pub v_t: DMatrix<f64>,
    pub v_theta: DMatrix<f64>,
    pub scheme: LimitScheme,
}

impl LimitProcessSpec {
    pub fn new(v_t: DMatrix<f64>, v_theta: DMatrix<f64>, scheme: LimitScheme) -> Result<Self> {
        let d = v_t.nrows();
        for m in [&v_t, &v_theta] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: m.ncols().max(m.nrows()),
                });
            }
            let asym = (m - m.transpose()).amax();
            if asym > 1e-12 * linalg::diag_scale(m) {
                return Err(Error::Config(format!("matrix is not symmetric (asymmetry {asym:e})")));
            }
            let lmin = linalg::min_eigenvalue(m);
            if !(lmin > 0.0) {
                return Err(Error::NotPsd(lmin));
            }
        }
        if d == 0 {
            return Err(Error::Empty("parameter dimension"));
        }
        let gap = &v_theta - linalg::spd_inverse(&v_t)?;
        let lmin = linalg::min_eigenvalue(&gap);
        if lmin < -1e-10 * linalg::diag_scale(&v_theta) {
            return Err(Error::NotPsd(lmin));
        }
        Ok(Self {
            d,
            v_t: linalg::symmetrize(&v_t),
            v_theta: linalg::symmetrize(&v_theta),
            scheme,
        })
    }

    /// Scalar case `V_T = v_t`, `V_Θ = v_theta`.
    pub fn scalar(v_t: f64, v_theta: f64, scheme: LimitScheme) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, v_t), DMatrix::from_element(1, 1, v_theta), scheme)
    }

    /// Reference covariance between blocks `i` and `j`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.d;
        let (gi, gj) = (i / 2 + 1, j / 2 + 1);
        match (i % 2, j % 2) {
            (0, 0) => {
                if gi == gj {
                    self.v_t.clone()
                } else {
                    DMatrix::zeros(d, d)
                }
            }
            (1, 1) => {
                if gi >= gj {
                    self.theta_theta(gi, gj)
                } else {
                    self.theta_theta(gj, gi).transpose()
                }
            }
            (1, 0) => self.theta_t(gi, gj),
            _ => self.theta_t(gj, gi).transpose(),
        }
    }

    fn theta_theta(&self, a: usize, b: usize) -> DMatrix<f64> {
        let s = match &self.scheme {
            LimitScheme::Discard => f64::from(u8::from(a == b)),
            LimitScheme::Augment => 1.0 / a as f64,
            LimitScheme::Subsample => {
                if a == b {
                    1.0
                } else {
                    1.0 / a as f64
                }
            }
            LimitScheme::Custom(blocks) => return blocks.theta_theta(a, b, &self.v_theta),
        };
        &self.v_theta * s
    }

    fn theta_t(&self, a: usize, b: usize) -> DMatrix<f64> {
        let c = match &self.scheme {
            LimitScheme::Discard => f64::from(u8::from(a == b)),
            LimitScheme::Augment | LimitScheme::Subsample => {
                if b <= a {
                    1.0 / a as f64
                } else {
                    0.0
                }
            }
            LimitScheme::Custom(blocks) => return blocks.theta_t(a, b, self.d),
        };
        DMatrix::identity(self.d, self.d) * c
    }

    /// Joint reference covariance of the listed blocks.
    fn sub_covariance(&self, blocks: &[usize]) -> DMatrix<f64> {
        let d = self.d;
        let n = blocks.len() * d;
        let mut m = DMatrix::zeros(n, n);
        for (a, &i) in blocks.iter().enumerate() {
            for (b, &j) in blocks.iter().enumerate().skip(a) {
                let blk = self.block(i, j);
                m.view_mut((a * d, b * d), (d, d)).copy_from(&blk);
                if a != b {
                    m.view_mut((b * d, a * d), (d, d)).copy_from(&blk.transpose());
                }
            }
        }
        m
    }
}

/// Reference covariance of `(W_T(1), W_Θ(1), …, W_T(G), W_Θ(G))`.
pub fn reference_covariance(spec: &LimitProcessSpec, generations: usize) -> Result<DMatrix<f64>> {
    if generations == 0 {
        return Err(Error::Config("at least one generation is required".into()));
    }
    if generations > MAX_FULL_GENERATIONS {
        return Err(Error::Config(format!(
            "full covariance assembly is capped at G = {MAX_FULL_GENERATIONS}"
        )));
    }
    let blocks: Vec<usize> = (0..2 * generations).collect();
    let m = spec.sub_covariance(&blocks);
    let lmin = linalg::min_eigenvalue(&m);
    if lmin < -JITTER * linalg::diag_scale(&m) {
        return Err(Error::NotPsd(lmin));
    }
    Ok(m)
}

/// Gain `K = Σ_uo Σ_oo⁻¹` and covariance `Σ_uu − K Σ_ou` of the unobserved
/// coordinates given the observed ones.
pub fn conditional_gain(joint: &DMatrix<f64>, observed: &[usize], unobserved: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (no, nu) = (observed.len(), unobserved.len());
    let s_oo = DMatrix::from_fn(no, no, |i, j| joint[(observed[i], observed[j])]);
    let s_ou = DMatrix::from_fn(no, nu, |i, j| joint[(observed[i], unobserved[j])]);
    let s_uu = DMatrix::from_fn(nu, nu, |i, j| joint[(unobserved[i], unobserved[j])]);
    if no == 0 {
        return Ok((DMatrix::zeros(nu, 0), linalg::symmetrize(&s_uu)));
    }
    let chol = PivotedCholesky::robust(&s_oo)?;
    let kt = chol.solve(&s_ou);
    let cov = linalg::symmetrize(&(s_uu - s_ou.transpose() * &kt));
    Ok((kt.transpose(), cov))
}

/// Gaussian conditioning of `N(mean, joint)` on `x[observed_idx] = observed_vals`.
pub fn conditional_gaussian(
    joint: &DMatrix<f64>,
    mean: &DVector<f64>,
    observed_idx: &[usize],
    observed_vals: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = joint.nrows();
    if joint.ncols() != n || mean.len() != n {
        return Err(Error::Dimension { expected: n, got: mean.len() });
    }
    if observed_vals.len() != observed_idx.len() {
        return Err(Error::Dimension {
            expected: observed_idx.len(),
            got: observed_vals.len(),
        });
    }
    let mut is_obs = vec![false; n];
    for &i in observed_idx {
        if i >= n || is_obs[i] {
            return Err(Error::Config(format!("bad observed index {i}")));
        }
        is_obs[i] = true;
    }
    let unobserved: Vec<usize> = (0..n).filter(|&i| !is_obs[i]).collect();
    let (k, cov) = conditional_gain(joint, observed_idx, &unobserved)?;
    let resid = DVector::from_fn(observed_idx.len(), |i, _| observed_vals[i] - mean[observed_idx[i]]);
    let mu_u = DVector::from_fn(unobserved.len(), |i, _| mean[unobserved[i]]);
    Ok((mu_u + k * resid, cov))
}

/// How the conditional law of `W_Θ(g)` given the history is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    /// Condition on the whole history using the assembled covariance.
    Full,
    /// Incremental Cholesky of the reference covariance in history order;
    /// no full assembly, so any `G`.
    Sequential,
    /// Condition on `(W_T(g), W_Θ(g−1))` only; exact for discard/augment.
    Markov,
}

#[derive(Debug, Clone)]
struct StepGain {
    /// Scalar history coordinates the gain acts on.
    cols: Vec<usize>,
    /// `d × cols.len()`, row-major.
    gain: Vec<f64>,
    cov: DMatrix<f64>,
    sqrt: Vec<f64>,
}

/// Per-generation gains `W_Θ(g) = K_g h + S_g z` for a fixed spec and `G`.
#[derive(Debug, Clone)]
pub struct ConditioningPlan {
    kind: PlanKind,
    d: usize,
    steps: Vec<StepGain>,
}

impl ConditioningPlan {
    /// Markov windows for discard/augment, the full history up to
    /// `G = 200`, and the incremental factorisation beyond.
    pub fn auto(spec: &LimitProcessSpec, generations: usize) -> Result<Self> {
        let kind = if spec.scheme.is_markov() {
            PlanKind::Markov
        } else if generations <= MAX_FULL_GENERATIONS {
            PlanKind::Full
        } else {
            PlanKind::Sequential
        };
        Self::build(spec, generations, kind)
    }

    pub fn build(spec: &LimitProcessSpec, generations: usize, kind: PlanKind) -> Result<Self> {
        if generations == 0 {
            return Err(Error::Config("at least one generation is required".into()));
        }
        let d = spec.d;
        let steps = match kind {
            PlanKind::Markov => {
                if !spec.scheme.is_markov() {
                    return Err(Error::UnsupportedScheme(spec.scheme.name()));
                }
                (1..=generations)
                    .map(|g| {
                        let t = 2 * (g - 1);
                        let mut blocks = vec![t];
                        if g > 1 {
                            blocks.push(t - 1);
                        }
                        blocks.push(t + 1);
                        let joint = spec.sub_covariance(&blocks);
                        let no = (blocks.len() - 1) * d;
                        let observed: Vec<usize> = (0..no).collect();
                        let target: Vec<usize> = (no..no + d).collect();
                        let (k, cov) = conditional_gain(&joint, &observed, &target)?;
                        let cols = blocks[..blocks.len() - 1]
                            .iter()
                            .flat_map(|&b| b * d..(b + 1) * d)
                            .collect();
                        Ok(step(cols, &k, cov))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            PlanKind::Full => {
                let joint = reference_covariance(spec, generations)?;
                (1..=generations)
                    .map(|g| {
                        let no = (2 * g - 1) * d;
                        let observed: Vec<usize> = (0..no).collect();
                        let target: Vec<usize> = (no..no + d).collect();
                        let (k, cov) = conditional_gain(&joint, &observed, &target)?;
                        Ok(step(observed, &k, cov))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            PlanKind::Sequential => sequential_steps(spec, generations)?,
        };
        Ok(Self { kind, d, steps })
    }

    pub fn kind(&self) -> PlanKind {
        self.kind
    }

    pub fn generations(&self) -> usize {
        self.steps.len()
    }

    /// Dense gain of generation `g` over the `(2g−1)d` history coordinates.
    pub fn gain(&self, g: usize) -> DMatrix<f64> {
        let s = &self.steps[g - 1];
        let mut k = DMatrix::zeros(self.d, (2 * g - 1) * self.d);
        for r in 0..self.d {
            for (c, &col) in s.cols.iter().enumerate() {
                k[(r, col)] = s.gain[r * s.cols.len() + c];
            }
        }
        k
    }

    pub fn conditional_cov(&self, g: usize) -> &DMatrix<f64> {
        &self.steps[g - 1].cov
    }

    /// `E[W_Θ(g) | history]` under the reference law.
    pub fn conditional_mean(&self, g: usize, history: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.d);
        self.steps[g - 1].apply(history, self.d, out.as_mut_slice());
        out
    }
}

fn step(cols: Vec<usize>, k: &DMatrix<f64>, cov: DMatrix<f64>) -> StepGain {
    let (d, n) = (k.nrows(), k.ncols());
    let gain = (0..d).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| k[(r, c)]).collect();
    let root = linalg::psd_sqrt(&cov);
    let sqrt = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| root[(r, c)]).collect();
    StepGain { cols, gain, cov, sqrt }
}

impl StepGain {
    fn apply(&self, history: &[f64], d: usize, out: &mut [f64]) {
        let m = self.cols.len();
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.gain[r * m..(r + 1) * m];
            *o = row.iter().zip(&self.cols).map(|(k, &c)| k * history[c]).sum();
        }
    }
}

/// Row-oriented Cholesky of the jittered reference covariance, computed
/// block by block in history order. The gain for `W_Θ(g)` is
/// `L_{k,<k} L_{<k,<k}⁻¹`.
fn sequential_steps(spec: &LimitProcessSpec, generations: usize) -> Result<Vec<StepGain>> {
    let d = spec.d;
    let n = 2 * generations * d;
    let scale = linalg::diag_scale(&spec.v_t).max(linalg::diag_scale(&spec.v_theta));
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut steps = Vec::with_capacity(generations);
    for bi in 0..2 * generations {
        let blocks: Vec<DMatrix<f64>> = (0..=bi).map(|bj| spec.block(bi, bj)).collect();
        for r in bi * d..(bi + 1) * d {
            for c in 0..=r {
                let sigma = blocks[c / d][(r - bi * d, c % d)];
                let dot: f64 = (0..c).map(|m| l[(r, m)] * l[(c, m)]).sum();
                let v = sigma - dot;
                if c < r {
                    l[(r, c)] = v / l[(c, c)];
                } else {
                    let pivot = if v > PIVOT_FLOOR * scale { v } else { v.max(0.0) + JITTER * scale };
                    l[(r, r)] = pivot.sqrt();
                }
            }
        }
        if bi % 2 == 1 {
            let k0 = bi * d;
            let lk = l.view((k0, 0), (d, k0)).clone_owned();
            let kt = l
                .view((0, 0), (k0, k0))
                .tr_solve_lower_triangular(&lk.transpose())
                .ok_or(Error::SingularCondition)?;
            let diag = l.view((k0, k0), (d, d)).clone_owned();
            let cov = linalg::symmetrize(&(&diag * diag.transpose()));
            steps.push(step((0..k0).collect(), &kt.transpose(), cov));
        }
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitTrajectory {
    pub w_t: Vec<DVector<f64>>,
    pub w_theta: Vec<DVector<f64>>,
}

/// Simulates trajectories of the limit process from a prepared plan.
#[derive(Debug, Clone)]
pub struct LimitSimulator {
    spec: LimitProcessSpec,
    plan: ConditioningPlan,
    chol_vt: Vec<f64>,
    mean_shift: bool,
}

impl LimitSimulator {
    pub fn new(spec: &LimitProcessSpec, generations: usize) -> Result<Self> {
        Self::with_plan(spec, ConditioningPlan::auto(spec, generations)?)
    }

    pub fn with_plan(spec: &LimitProcessSpec, plan: ConditioningPlan) -> Result<Self> {
        let d = spec.d;
        let c = linalg::symmetrize(&spec.v_t).cholesky().ok_or(Error::Singular(linalg::min_eigenvalue(&spec.v_t)))?;
        let lower = c.l();
        Ok(Self {
            spec: spec.clone(),
            plan,
            chol_vt: (0..d * d).map(|i| lower[(i / d, i % d)]).collect(),
            mean_shift: true,
        })
    }

    /// With the shift off, `W_T(g) = W_T^ref(g)` and the process is the
    /// reference law itself.
    pub fn mean_shift(mut self, on: bool) -> Self {
        self.mean_shift = on;
        self
    }

    pub fn generations(&self) -> usize {
        self.plan.generations()
    }

    pub fn plan(&self) -> &ConditioningPlan {
        &self.plan
    }

    /// Fill `history` (length `2Gd`) with one trajectory.
    pub fn simulate_into(&self, rng: &mut StreamRng, history: &mut [f64]) {
        let d = self.spec.d;
        let mut z = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for g in 1..=self.generations() {
            let t0 = 2 * (g - 1) * d;
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for r in 0..d {
                let mut v: f64 = (0..=r).map(|c| self.chol_vt[r * d + c] * z[c]).sum();
                if self.mean_shift && g > 1 {
                    let prev = &history[t0 - d..t0];
                    v += (0..d).map(|c| self.spec.v_t[(r, c)] * prev[c]).sum::<f64>();
                }
                history[t0 + r] = v;
            }
            let s = &self.plan.steps[g - 1];
            s.apply(history, d, &mut buf);
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for r in 0..d {
                buf[r] += (0..d).map(|c| s.sqrt[r * d + c] * z[c]).sum::<f64>();
            }
            history[t0 + d..t0 + 2 * d].copy_from_slice(&buf);
        }
    }

    pub fn simulate(&self, rng: &mut StreamRng) -> LimitTrajectory {
        let d = self.spec.d;
        let mut h = vec![0.0; 2 * d * self.generations()];
        self.simulate_into(rng, &mut h);
        let (mut w_t, mut w_theta) = (Vec::new(), Vec::new());
        for pair in h.chunks_exact(2 * d) {
            w_t.push(DVector::from_column_slice(&pair[..d]));
            w_theta.push(DVector::from_column_slice(&pair[d..]));
        }
        LimitTrajectory { w_t, w_theta }
    }
}

/// One trajectory of the limit process up to `generations`.
pub fn simulate_limit_process(spec: &LimitProcessSpec, generations: usize, rng: &mut StreamRng) -> Result<LimitTrajectory> {
    Ok(LimitSimulator::new(spec, generations)?.simulate(rng))
}

/// Streaming summary of many trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitEnsemble {
    pub scheme: &'static str,
    pub d: usize,
    pub trajectories: usize,
    sum: Vec<DVector<f64>>,
    sum_outer: Vec<DMatrix<f64>>,
    norm: PairedRatio,
    kl: PairedRatio,
}

impl LimitEnsemble {
    fn empty(scheme: &'static str, d: usize, generations: usize) -> Self {
        Self {
            scheme,
            d,
            trajectories: 0,
            sum: vec![DVector::zeros(d); generations],
            sum_outer: vec![DMatrix::zeros(d, d); generations],
            norm: PairedRatio::new(generations),
            kl: PairedRatio::new(generations),
        }
    }

    fn push(&mut self, w_theta: &[&[f64]], v_t: &DMatrix<f64>) {
        let d = self.d;
        let mut norms = Vec::with_capacity(w_theta.len());
        let mut kls = Vec::with_capacity(w_theta.len());
        for (g, w) in w_theta.iter().enumerate() {
            let mut q = 0.0;
            for r in 0..d {
                self.sum[g][r] += w[r];
                for c in 0..d {
                    self.sum_outer[g][(r, c)] += w[r] * w[c];
                    q += w[r] * v_t[(r, c)] * w[c];
                }
            }
            norms.push(w.iter().map(|v| v * v).sum());
            kls.push(0.5 * q);
        }
        self.norm.push(&norms);
        self.kl.push(&kls);
        self.trajectories += 1;
    }

    fn merge(&mut self, other: &Self) {
        self.trajectories += other.trajectories;
        for g in 0..self.sum.len() {
            self.sum[g] += &other.sum[g];
            self.sum_outer[g] += &other.sum_outer[g];
        }
        self.norm.merge(&other.norm);
        self.kl.merge(&other.kl);
    }

    pub fn generations(&self) -> usize {
        self.sum.len()
    }

    pub fn mean(&self, g: usize) -> DVector<f64> {
        &self.sum[g - 1] / self.trajectories as f64
    }

    /// Unbiased sample covariance of `W_Θ(g)`.
    pub fn covariance(&self, g: usize) -> DMatrix<f64> {
        let n = self.trajectories as f64;
        let m = self.mean(g);
        (&self.sum_outer[g - 1] - &m * m.transpose() * n) / (n - 1.0)
    }

    /// Standard error of each entry of [`covariance`](Self::covariance), from
    /// the normal-theory formula `√((Σ_ij² + Σ_ii Σ_jj)/(n−1))`.
    pub fn covariance_stderr(&self, g: usize) -> DMatrix<f64> {
        let c = self.covariance(g);
        let n = self.trajectories as f64;
        DMatrix::from_fn(self.d, self.d, |i, j| ((c[(i, j)].powi(2) + c[(i, i)] * c[(j, j)]) / (n - 1.0)).sqrt())
    }

    /// `tr Var̂(W_Θ(g)) / tr Var̂(W_Θ(1))` with delta-method errors.
    pub fn variance_ratio_curve(&self) -> Vec<CurvePoint> {
        let base = linalg::trace(&self.covariance(1));
        (1..=self.generations())
            .map(|g| {
                let se = self.norm.ratio(g).stderr;
                if self.trajectories < 2 || !(base > 0.0) {
                    CurvePoint {
                        generation: g,
                        value: f64::NAN,
                        stderr: f64::NAN,
                    }
                } else {
                    CurvePoint {
                        generation: g,
                        value: linalg::trace(&self.covariance(g)) / base,
                        stderr: se,
                    }
                }
            })
            .collect()
    }

    /// Ratio of mean `½ W_Θ(g)ᵀ V_T W_Θ(g)` to its generation-1 value.
    pub fn kl_ratio_curve(&self) -> Vec<CurvePoint> {
        self.kl.curve()
    }

    /// Mean quadratic KL `½ W_Θ(g)ᵀ V_T W_Θ(g)` at generation `g`.
    pub fn mean_quadratic_kl(&self, g: usize) -> f64 {
        self.kl.mean(g)
    }
}

/// `trajectories` independent trajectories; trajectory `t` draws from the
/// stream `(seed, t, 0, Limit)`, and chunks are reduced in index order, so
/// the result does not depend on `parallel_width`.
pub fn simulate_ensemble(
    spec: &LimitProcessSpec,
    generations: usize,
    trajectories: usize,
    seed: u64,
    parallel_width: usize,
) -> Result<LimitEnsemble> {
    let sim = LimitSimulator::new(spec, generations)?;
    ensemble_from(&sim, trajectories, seed, parallel_width)
}

pub fn ensemble_from(sim: &LimitSimulator, trajectories: usize, seed: u64, parallel_width: usize) -> Result<LimitEnsemble> {
    if trajectories < 2 {
        return Err(Error::Config("an ensemble needs at least two trajectories".into()));
    }
    let (d, gens) = (sim.spec.d, sim.generations());
    let scheme = sim.spec.scheme.name();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel_width.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let chunks = trajectories.div_ceil(CHUNK);
    let parts: Vec<LimitEnsemble> = pool.install(|| {
        (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = LimitEnsemble::empty(scheme, d, gens);
                let mut h = vec![0.0; 2 * d * gens];
                for t in c * CHUNK..((c + 1) * CHUNK).min(trajectories) {
                    let mut rng = stream(seed, t as u64, 0, Purpose::Limit);
                    sim.simulate_into(&mut rng, &mut h);
                    let thetas: Vec<&[f64]> = h.chunks_exact(2 * d).map(|p| &p[d..]).collect();
                    acc.push(&thetas, &sim.spec.v_t);
                }
                acc
            })
            .collect()
    });
    let mut total = LimitEnsemble::empty(scheme, d, gens);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Trace variance-ratio curve of stored trajectories.
pub fn variance_ratio_curve(trajectories: &[LimitTrajectory]) -> Vec<CurvePoint> {
    let Some(first) = trajectories.first() else {
        return Vec::new();
    };
    let d = first.w_theta[0].len();
    let gens = first.w_theta.len();
    let mut acc = LimitEnsemble::empty("custom", d, gens);
    let v_t = DMatrix::identity(d, d);
    for t in trajectories {
        let thetas: Vec<&[f64]> = t.w_theta.iter().map(|w| w.as_slice()).collect();
        acc.push(&thetas, &v_t);
    }
    acc.variance_ratio_curve()
}

/// `G·V_Θ` (discard) or `(Σ_{g≤G} 1/g²)·V_Θ` (augment).
pub fn closed_form_variance(scheme: &LimitScheme, v_theta: &DMatrix<f64>, generations: usize) -> Result<DMatrix<f64>> {
    let factor = match scheme {
        LimitScheme::Discard => generations as f64,
        LimitScheme::Augment => partial_basel(generations),
        other => return Err(Error::UnsupportedScheme(other.name())),
    };
    Ok(v_theta * factor)
}

/// `Σ_{g=1}^{G} 1/g²`, summed from the small terms up.
pub fn partial_basel(generations: usize) -> f64 {
    (1..=generations).rev().map(|g| 1.0 / (g as f64 * g as f64)).sum()
}

/// Exact `Var(W_Θ(g))` for `g = 1..=G` of the mean-shifted process,
/// propagated through the conditioning gains (no Monte Carlo).
pub fn variance_recursion(spec: &LimitProcessSpec, generations: usize) -> Result<Vec<DMatrix<f64>>> {
    if spec.scheme.is_markov() {
        let plan = ConditioningPlan::build(spec, generations, PlanKind::Markov)?;
        let d = spec.d;
        let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(generations);
        for g in 1..=generations {
            // W_Θ(g) = A W_T(g) + B W_Θ(g−1) + S z and W_T(g) = W_T^ref + V_T W_Θ(g−1)
            let s = &plan.steps[g - 1];
            let m = s.cols.len();
            let k = DMatrix::from_row_slice(d, m, &s.gain);
            let a = k.columns(0, d).clone_owned();
            let mut v = &a * &spec.v_t * a.transpose() + &s.cov;
            if let Some(p) = out.last() {
                let b = k.columns(d, d).clone_owned();
                let mm = &a * &spec.v_t + b;
                v += &mm * p * mm.transpose();
            }
            out.push(linalg::symmetrize(&v));
        }
        Ok(out)
    } else {
        let joint = process_covariance(spec, generations, true)?;
        let d = spec.d;
        Ok((1..=generations)
            .map(|g| {
                let o = (2 * g - 1) * d;
                joint.view((o, o), (d, d)).clone_owned()
            })
            .collect())
    }
}

/// Exact joint covariance of `(W_T(1), W_Θ(1), …)` of the simulated process,
/// with or without the mean shift. Without it this reproduces
/// [`reference_covariance`].
pub fn process_covariance(spec: &LimitProcessSpec, generations: usize, mean_shift: bool) -> Result<DMatrix<f64>> {
    let plan = if generations <= MAX_FULL_GENERATIONS {
        ConditioningPlan::build(spec, generations, PlanKind::Full)?
    } else {
        ConditioningPlan::auto(spec, generations)?
    };
    let d = spec.d;
    let n = 2 * generations * d;
    // each coordinate as a linear map of independent standard normals
    let mut coef = DMatrix::<f64>::zeros(n, n);
    let chol_vt = linalg::symmetrize(&spec.v_t).cholesky().ok_or(Error::Singular(0.0))?.l();
    for g in 1..=generations {
        let t0 = 2 * (g - 1) * d;
        for r in 0..d {
            for c in 0..d {
                coef[(t0 + r, t0 + c)] = chol_vt[(r, c)];
            }
        }
        if mean_shift && g > 1 {
            let prev = coef.rows(t0 - d, d).clone_owned();
            let shift = &spec.v_t * prev;
            let mut rows = coef.rows_mut(t0, d);
            rows += shift;
        }
        let s = &plan.steps[g - 1];
        let m = s.cols.len();
        let mut theta = DMatrix::<f64>::zeros(d, n);
        for r in 0..d {
            for (j, &col) in s.cols.iter().enumerate() {
                let k = s.gain[r * m + j];
                if k != 0.0 {
                    for c in 0..n {
                        theta[(r, c)] += k * coef[(col, c)];
                    }
                }
            }
            for c in 0..d {
                theta[(r, t0 + d + c)] = s.sqrt[r * d + c];
            }
        }
        coef.rows_mut(t0 + d, d).copy_from(&theta);
    }
    Ok(linalg::symmetrize(&(&coef * coef.transpose())))
}

/// `E₀[Xᵀ ∇²A(Xθ₀) X]`: exact for fixed designs and for the known-variance
/// normal model with a known feature second moment, otherwise a Monte Carlo
/// average over `mc_samples` feature draws.
pub fn compute_vt(
    model: &ExpFamilyModel,
    fmap: &FeatureMap,
    theta0: &[f64],
    features: &FeatureDistribution,
    mc_samples: usize,
    rng: &mut StreamRng,
) -> Result<DMatrix<f64>> {
    let p = fmap.dim_theta();
    if theta0.len() != p {
        return Err(Error::Dimension { expected: p, got: theta0.len() });
    }
    let k = fmap.dim_eta();
    let mut acc = DMatrix::zeros(p, p);
    let v = if let Some(rows) = features.design_rows() {
        for x in &rows {
            let c = model.curvature(&fmap.eta_small(x, theta0)[..k])?;
            fmap.add_sandwich(x, &c.hess, 1.0, &mut acc);
        }
        acc / rows.len() as f64
    } else if let (ExpFamilyModel::GaussianKnownVar { sigma2 }, Some(m)) = (model, features.exact_second_moment()) {
        model.check_domain(&[0.0])?;
        m / *sigma2
    } else {
        if mc_samples == 0 {
            return Err(Error::Config("Monte Carlo estimate of V_T needs samples".into()));
        }
        let mut x = vec![0.0; features.dim()];
        for i in 0..mc_samples {
            features.sample_into(i, rng, &mut x);
            let c = model.curvature(&fmap.eta_small(&x, theta0)[..k])?;
            fmap.add_sandwich(&x, &c.hess, 1.0, &mut acc);
        }
        acc / mc_samples as f64
    };
    let v = linalg::symmetrize(&v);
    let lmin = linalg::min_eigenvalue(&v);
    if lmin < 1e-10 {
        return Err(Error::Singular(lmin));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn discard() -> LimitProcessSpec {
        LimitProcessSpec::scalar(1.0, PI / 2.0, LimitScheme::Discard).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn spec_validation() {
        assert!(LimitProcessSpec::scalar(1.0, 0.5, LimitScheme::Augment).is_err());
        assert!(LimitProcessSpec::scalar(-1.0, 1.0, LimitScheme::Augment).is_err());
        assert!(LimitProcessSpec::scalar(2.0, 0.5, LimitScheme::Augment).is_ok());
    }

    #[test]
    fn reference_covariance_examples() {
        let m = reference_covariance(&discard(), 1).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, PI / 2.0]));
        let aug = LimitProcessSpec::scalar(1.0, 1.0, LimitScheme::Augment).unwrap();
        let m = reference_covariance(&aug, 2).unwrap();
        // order T1, Θ1, T2, Θ2
        close(m[(3, 1)], 0.5, 0.0);
        close(m[(3, 0)], 0.5, 0.0);
        close(m[(3, 2)], 0.5, 0.0);
        close(m[(0, 2)], 0.0, 0.0);
    }

    #[test]
    fn conditional_examples() {
        let m = reference_covariance(&discard(), 1).unwrap();
        let (mu, cov) = conditional_gaussian(&m, &DVector::zeros(2), &[0], &DVector::from_element(1, 0.7)).unwrap();
        close(mu[0], 0.7, 1e-15);
        close(cov[(0, 0)], PI / 2.0 - 1.0, 1e-15);

        let aug = LimitProcessSpec::scalar(1.0, 1.0, LimitScheme::Augment).unwrap();
        let m = reference_covariance(&aug, 2).unwrap();
        // at the efficient boundary W_Θ(1) = W_T(1), so a consistent history has b = c
        let (a, b, c) = (0.3, -1.1, -1.1);
        let (mu, cov) =
            conditional_gaussian(&m, &DVector::zeros(4), &[2, 1, 0], &DVector::from_column_slice(&[a, b, c])).unwrap();
        close(mu[0], a / 2.0 + b / 2.0, 1e-9);
        close(cov[(0, 0)], 0.0, 1e-9);

        let ind = DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0]));
        let (mu, cov) = conditional_gaussian(
            &ind,
            &DVector::from_column_slice(&[1.0, 5.0]),
            &[0],
            &DVector::from_element(1, 9.0),
        )
        .unwrap();
        close(mu[0], 5.0, 0.0);
        close(cov[(0, 0)], 3.0, 0.0);
    }

    #[test]
    fn printed_perfect_correlation_is_rejected() {
        #[derive(Debug)]
        struct Printed;
        impl ReferenceBlocks for Printed {
            fn theta_theta(&self, _a: usize, _b: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
                v.clone()
            }
            fn theta_t(&self, a: usize, b: usize, d: usize) -> DMatrix<f64> {
                DMatrix::identity(d, d) * if b <= a { 1.0 / a as f64 } else { 0.0 }
            }
        }
        let spec = LimitProcessSpec::scalar(1.0, PI / 2.0, LimitScheme::Custom(Arc::new(Printed))).unwrap();
        assert!(matches!(reference_covariance(&spec, 2), Err(Error::NotPsd(_))));
    }

    #[test]
    fn closed_forms() {
        let one = DMatrix::from_element(1, 1, 1.0);
        close(closed_form_variance(&LimitScheme::Discard, &one, 5).unwrap()[(0, 0)], 5.0, 0.0);
        close(closed_form_variance(&LimitScheme::Augment, &one, 2).unwrap()[(0, 0)], 1.25, 1e-15);
        assert!(closed_form_variance(&LimitScheme::Augment, &one, 100_000).unwrap()[(0, 0)] <= PI * PI / 6.0);
        assert!(matches!(
            closed_form_variance(&LimitScheme::Subsample, &one, 3),
            Err(Error::UnsupportedScheme(_))
        ));
    }

    #[test]
    fn generation_one_has_no_shift() {
        let sim = LimitSimulator::new(&discard(), 1).unwrap();
        let (mut tt, mut th, mut tth) = (0.0, 0.0, 0.0);
        let n = 50_000;
        for i in 0..n {
            let tr = sim.simulate(&mut stream(3, i, 0, Purpose::Limit));
            tt += tr.w_t[0][0].powi(2);
            th += tr.w_theta[0][0].powi(2);
            tth += tr.w_t[0][0] * tr.w_theta[0][0];
        }
        let n = n as f64;
        close(tt / n, 1.0, 0.03);
        close(th / n, PI / 2.0, 0.05);
        close(tth / n, 1.0, 0.03);
    }

    #[test]
    fn efficient_augment_draws_deterministically() {
        let spec = LimitProcessSpec::scalar(2.0, 0.5, LimitScheme::Augment).unwrap();
        let plan = ConditioningPlan::build(&spec, 30, PlanKind::Full).unwrap();
        for g in 2..=30 {
            assert!(plan.conditional_cov(g)[(0, 0)].abs() < 1e-9);
        }
        let sim = LimitSimulator::with_plan(&spec, plan).unwrap();
        let t = sim.simulate(&mut stream(1, 0, 0, Purpose::Limit));
        assert!(t.w_theta.iter().all(|w| w[0].is_finite()));
    }

    #[test]
    fn constant_trajectories_give_nan() {
        let t = LimitTrajectory {
            w_t: vec![DVector::from_element(1, 1.0); 3],
            w_theta: vec![DVector::from_element(1, 1.0); 3],
        };
        let curve = variance_ratio_curve(&[t.clone(), t]);
        assert!(curve.iter().all(|p| p.value.is_nan()));
    }

    #[test]
    fn vt_examples() {
        let mut rng = stream(0, 0, 0, Purpose::MonteCarlo);
        let fmap = FeatureMap::Row { dim: 1 };
        let g = compute_vt(
            &ExpFamilyModel::GaussianKnownVar { sigma2: 1.0 },
            &fmap,
            &[0.3],
            &FeatureDistribution::intercept_only(),
            0,
            &mut rng,
        )
        .unwrap();
        close(g[(0, 0)], 1.0, 1e-15);
        let b = compute_vt(&ExpFamilyModel::BernoulliLogit, &fmap, &[0.0], &FeatureDistribution::intercept_only(), 0, &mut rng)
            .unwrap();
        close(b[(0, 0)], 0.25, 1e-15);
        let mc = compute_vt(
            &ExpFamilyModel::BernoulliLogit,
            &fmap,
            &[0.0],
            &FeatureDistribution::standard_normal(1, false),
            1_000_000,
            &mut rng,
        )
        .unwrap();
        assert!((mc[(0, 0)] / 0.25 - 1.0).abs() < 0.01);
    }
}
