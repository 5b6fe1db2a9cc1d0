//! One function per subcommand, each returning a [`RunOutput`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde_json::{json, Value};
use synthloop_core::estimation::{sandwich_variance, LossKind};
use synthloop_core::expfam::{ExpFamilyModel, FeatureDistribution, FeatureMap, FeatureSampler};
use synthloop_core::limitproc::{
    closed_form_variance, compute_vt, ensemble_from, partial_basel, LimitProcessSpec, LimitScheme, LimitSimulator,
};
use synthloop_core::metrics::{kl_ratio_curve, median_sigma2_curve, mse_ratio_curve, test_ce_loss, ComparisonReport};
use synthloop_core::rng::{stream, Purpose, StreamRng};
use synthloop_core::verify::contiguity_check;
use synthloop_core::workflow::{run_ensemble, run_ensemble_from, EnsembleResult, Estimator, Preset, WeightScheme, WorkflowConfig};

use crate::config::{CommandKind, RunConfig};
use crate::csvdata::{load_csv, SplitData};
use crate::error::CliResult;
use crate::output::RunOutput;

const PI2_6: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;

pub const FEATURE_POLICY: &str = "synthetic rows draw their features uniformly with replacement from the \
standardized training rows (the empirical training distribution is used as the feature law); labels are \
sampled from the previous generation's fitted logistic model";

pub const FITTING_NOTE: &str = "every generation is fit by full-batch damped-Newton logistic regression run \
to convergence, not by early-stopped gradient descent";

pub fn execute(cfg: &RunConfig) -> CliResult<RunOutput> {
    match cfg.command {
        CommandKind::SimulateLimit => simulate_limit(cfg),
        CommandKind::SimulateWorkflow => simulate_workflow(cfg),
        CommandKind::CompareWorkflows => compare_workflows(cfg),
        CommandKind::ClassifyCsv => classify_csv(cfg),
        CommandKind::VerifyContiguity => verify_contiguity(cfg),
    }
}

fn manifest(cfg: &RunConfig, details: Value) -> Value {
    json!({
        "artifact": { "name": "synthloop", "version": env!("CARGO_PKG_VERSION") },
        "command": cfg.command.name(),
        "config": cfg,
        "details": details,
    })
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

fn estimator(cfg: &RunConfig) -> Estimator {
    match cfg.estimator.as_str() {
        "median" => Estimator::Median,
        "closed-form" => Estimator::LinearClosedForm,
        _ => Estimator::Mle,
    }
}

/// The workflow preset of `cfg.model` for one scheme.
pub fn preset_config(cfg: &RunConfig, scheme: &str) -> CliResult<WorkflowConfig> {
    let preset = Preset::from_str(&cfg.model)?;
    let mut w = preset.config(cfg.n, cfg.generations, WeightScheme::from_str(scheme)?, cfg.seed);
    w.estimator = estimator(cfg);
    w.separation_fallback = cfg.separation_fallback;
    w.validate()?;
    Ok(w)
}

fn mc_rng(cfg: &RunConfig) -> StreamRng {
    stream(cfg.seed, 0, 0, Purpose::MonteCarlo)
}

fn preset_vt(cfg: &RunConfig, w: &WorkflowConfig) -> CliResult<DMatrix<f64>> {
    Ok(compute_vt(&w.model, &w.fmap, &w.theta0, &w.features, cfg.mc_samples, &mut mc_rng(cfg))?)
}

fn simulate_limit(cfg: &RunConfig) -> CliResult<RunOutput> {
    let (v_t, v_theta, source) = match (&cfg.vt, &cfg.vtheta) {
        (Some(a), Some(b)) => (from_rows(a), from_rows(b), "flags".to_string()),
        _ => {
            let w = preset_config(cfg, "discard")?;
            let v_t = preset_vt(cfg, &w)?;
            let loss = match w.estimator {
                Estimator::Median => LossKind::AbsoluteDeviation,
                _ => LossKind::NegLogLik,
            };
            let mut rng = stream(cfg.seed, 1, 0, Purpose::MonteCarlo);
            let v_theta = sandwich_variance(&w.model, &w.fmap, loss, &w.theta0, &w.features, cfg.mc_samples, &mut rng)?;
            (v_t, v_theta, format!("{} model with the {} estimator", cfg.model, cfg.estimator))
        }
    };
    let g_max = cfg.generations;
    let mut plans = serde_json::Map::new();
    let mut out = RunOutput::new(Value::Null);
    out.line(format!(
        "simulate-limit: d={}, G={g_max}, trajectories={}, seed={}",
        v_t.nrows(),
        cfg.replications,
        cfg.seed
    ));
    for name in &cfg.schemes {
        let scheme = LimitScheme::from_str(name)?;
        let spec = LimitProcessSpec::new(v_t.clone(), v_theta.clone(), scheme.clone())?;
        let sim = LimitSimulator::new(&spec, g_max)?;
        plans.insert(name.clone(), json!(format!("{:?}", sim.plan().kind()).to_lowercase()));
        let ens = ensemble_from(&sim, cfg.replications, cfg.seed, cfg.parallel)?;
        let ratio = ens.variance_ratio_curve();
        out.push_curve(name, "variance_ratio", &ratio);
        out.push_curve(name, "kl_ratio", &ens.kl_ratio_curve());
        for row in &ComparisonReport::from_limit(&ens).rows {
            out.push(name, row.generation, "are_vs_gen1", row.are_vs_gen1, row.are_stderr);
        }
        let base = closed_form_variance(&scheme, &v_theta, 1).ok().map(|m| m.trace());
        if let Some(base) = base {
            for g in 1..=g_max {
                let v = closed_form_variance(&scheme, &v_theta, g)?.trace() / base;
                out.push(name, g, "closed_form_ratio", v, 0.0);
            }
        }
        let last = ratio.last().expect("at least one generation");
        let head = format!("{name}: variance ratio at G={g_max} = {:.6} ± {:.6}", last.value, last.stderr);
        match scheme {
            LimitScheme::Discard => out.line(format!("{head} | closed form G = {g_max}")),
            LimitScheme::Augment => out.line(format!(
                "{head} | partial sum {:.6} | pi^2/6 = {PI2_6:.6}",
                partial_basel(g_max)
            )),
            _ => out.line(format!("{head} | augment bound pi^2/6 = {PI2_6:.6}")),
        }
    }
    out.manifest = manifest(
        cfg,
        json!({
            "v_t": to_rows(&v_t),
            "v_theta": to_rows(&v_theta),
            "variance_source": source,
            "conditioning_plans": plans,
            "ratio_definition": "paired ratio of mean ||W_theta(g)||^2 over the generation-1 value, centered by the sample mean",
        }),
    );
    Ok(out)
}

fn push_workflow_curves(out: &mut RunOutput, name: &str, ens: &EnsembleResult, v_t: &DMatrix<f64>, linear: bool) {
    out.push_curve(name, "mse_ratio", &mse_ratio_curve(ens));
    out.push_curve(name, "kl_ratio", &kl_ratio_curve(ens, v_t));
    let reps = ens.replications() as f64;
    for s in &ens.summaries {
        out.push(name, s.generation, "trace_mse", s.trace_mse, s.trace_mse_stderr);
        let f = s.fraction_degenerate;
        out.push(name, s.generation, "fraction_degenerate", f, (f * (1.0 - f) / reps).sqrt());
    }
    if linear {
        for (g, v) in median_sigma2_curve(ens).into_iter().enumerate() {
            out.push(name, g + 1, "median_sigma2", v, f64::NAN);
        }
    }
}

fn reference_ratio(scheme: &str, g: usize) -> Option<f64> {
    match scheme {
        "discard" => Some(g as f64),
        "augment" => Some(partial_basel(g)),
        _ => None,
    }
}

type SchemeRuns = Vec<(String, EnsembleResult)>;

fn run_schemes(cfg: &RunConfig) -> CliResult<(SchemeRuns, DMatrix<f64>)> {
    let mut v_t = None;
    let mut runs = Vec::new();
    for name in &cfg.schemes {
        let w = preset_config(cfg, name)?;
        if v_t.is_none() {
            v_t = Some(preset_vt(cfg, &w)?);
        }
        runs.push((name.clone(), run_ensemble(&w, cfg.replications, cfg.parallel)?));
    }
    Ok((runs, v_t.expect("at least one scheme")))
}

fn workflow_details(cfg: &RunConfig, v_t: &DMatrix<f64>) -> CliResult<Value> {
    let w = preset_config(cfg, &cfg.schemes[0])?;
    Ok(json!({
        "theta0": w.theta0,
        "features": w.features.label(),
        "estimator": w.estimator.name(),
        "v_t": to_rows(v_t),
        "ratio_definition": "paired ratio of mean ||theta_hat_g - theta0||^2 over the generation-1 value, on replications complete at every generation",
    }))
}

fn simulate_workflow(cfg: &RunConfig) -> CliResult<RunOutput> {
    let (runs, v_t) = run_schemes(cfg)?;
    let g_max = cfg.generations;
    let mut out = RunOutput::new(workflow_details(cfg, &v_t)?);
    out.line(format!(
        "simulate-workflow: model={}, n={}, G={g_max}, replications={}, seed={}",
        cfg.model, cfg.n, cfg.replications, cfg.seed
    ));
    for (name, ens) in &runs {
        push_workflow_curves(&mut out, name, ens, &v_t, cfg.model == "linear");
        let mse = out.series(name, "mse_ratio").last().map(|r| (r.value, r.stderr)).unwrap_or((f64::NAN, f64::NAN));
        let kl = out.series(name, "kl_ratio").last().map(|r| (r.value, r.stderr)).unwrap_or((f64::NAN, f64::NAN));
        let target = reference_ratio(name, g_max).map_or(String::from("n/a"), |v| format!("{v:.6}"));
        out.line(format!(
            "{name}: mse ratio at G={g_max} = {:.6} ± {:.6} | kl ratio = {:.6} ± {:.6} | limit {target} | pi^2/6 = {PI2_6:.6}",
            mse.0, mse.1, kl.0, kl.1
        ));
        let degenerate = ens.summaries.last().map_or(0.0, |s| s.fraction_degenerate);
        if degenerate > 0.0 {
            out.line(format!("{name}: fraction degenerate at G={g_max} = {degenerate:.4}"));
        }
        if cfg.model == "linear" {
            let med = out.series(name, "median_sigma2");
            if let Some(last) = med.last() {
                out.line(format!("{name}: median sigma2_hat at G={g_max} = {:.6}", last.value));
            }
        }
    }
    out.manifest = manifest(cfg, out.manifest.clone());
    Ok(out)
}

fn compare_workflows(cfg: &RunConfig) -> CliResult<RunOutput> {
    let (runs, v_t) = run_schemes(cfg)?;
    let g_max = cfg.generations;
    let mut out = RunOutput::new(workflow_details(cfg, &v_t)?);
    out.line(format!(
        "compare-workflows: model={}, n={}, G={g_max}, replications={}, seed={}",
        cfg.model, cfg.n, cfg.replications, cfg.seed
    ));
    let discard = runs.iter().find(|(n, _)| n == "discard").map(|(_, e)| e);
    for (name, ens) in &runs {
        let report = ComparisonReport::from_workflow(ens, &v_t);
        for r in &report.rows {
            out.push(name, r.generation, "are_vs_gen1", r.are_vs_gen1, r.are_stderr);
            out.push(name, r.generation, "mse_ratio", r.mse_ratio, r.mse_stderr);
            out.push(name, r.generation, "kl_ratio", r.kl_ratio, r.kl_stderr);
        }
        if let Some(d) = discard {
            // Schemes share generation-1 data, so this error bar treats them as independent and is conservative.
            for (sd, ss) in d.summaries.iter().zip(&ens.summaries) {
                let r = sd.trace_mse / ss.trace_mse;
                let rel = (sd.trace_mse_stderr / sd.trace_mse).hypot(ss.trace_mse_stderr / ss.trace_mse);
                let se = if std::ptr::eq(d, ens) { 0.0 } else { r * rel };
                out.push(name, sd.generation, "are_vs_discard", r, se);
            }
        }
        if let Some(last) = report.rows.last() {
            out.line(format!(
                "{name}: ARE vs generation 1 at G={g_max} = {:.6} ± {:.6} | 6/pi^2 = {:.6} | replications {}",
                last.are_vs_gen1,
                last.are_stderr,
                1.0 / PI2_6,
                report.units
            ));
        }
    }
    out.manifest = manifest(cfg, out.manifest.clone());
    Ok(out)
}

fn verify_contiguity(cfg: &RunConfig) -> CliResult<RunOutput> {
    let mut out = RunOutput::new(Value::Null);
    out.line(format!(
        "verify-contiguity: model={}, n={}, G={}, replications={}, seed={}",
        cfg.model, cfg.n, cfg.generations, cfg.replications, cfg.seed
    ));
    let mut reports = Vec::new();
    for name in &cfg.schemes {
        let w = preset_config(cfg, name)?;
        let r = contiguity_check(&w, cfg.replications, cfg.parallel)?;
        let g = r.generations;
        out.push(name, g, "mean_exp_llr", r.mean_ratio, r.stderr);
        out.push(name, g, "max_share", r.max_share, f64::NAN);
        out.push(name, g, "degenerate_replications", r.degenerate as f64, f64::NAN);
        out.push(name, g, "inconclusive", f64::from(u8::from(r.inconclusive)), f64::NAN);
        out.line(format!(
            "{name}: mean exp(llr) = {:.6} ± {:.6} | within 4 stderr of 1: {} | largest share {:.4} | inconclusive: {}",
            r.mean_ratio,
            r.stderr,
            if r.within_stderr(4.0) { "yes" } else { "no" },
            r.max_share,
            if r.inconclusive { "yes" } else { "no" }
        ));
        reports.push(json!({
            "scheme": name,
            "replications_used": r.replications,
            "degenerate": r.degenerate,
        }));
    }
    out.manifest = manifest(
        cfg,
        json!({
            "law": "every generation drawn from theta0 (reference law); estimators fit as in the scheme",
            "runs": reports,
        }),
    );
    Ok(out)
}

/// Uniform draws with replacement from fixed rows.
pub struct EmpiricalRows {
    rows: Vec<f64>,
    dim: usize,
}

impl EmpiricalRows {
    pub fn new(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        Self {
            rows: rows.concat(),
            dim,
        }
    }
}

impl fmt::Debug for EmpiricalRows {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "empirical_rows(m={}, dim={})", self.rows.len() / self.dim.max(1), self.dim)
    }
}

impl FeatureSampler for EmpiricalRows {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, _index: usize, rng: &mut StreamRng, out: &mut [f64]) {
        let m = self.rows.len() / self.dim;
        let i = rng.random_range(0..m);
        out.copy_from_slice(&self.rows[i * self.dim..(i + 1) * self.dim]);
    }
}

/// Logistic workflow on the training rows: intercept plus standardized
/// features, zero start, features resampled from the training rows.
pub fn csv_workflow_config(cfg: &RunConfig, split: &SplitData, scheme: &str) -> CliResult<WorkflowConfig> {
    let p = split.train.n_cols + 1;
    let w = WorkflowConfig {
        model: ExpFamilyModel::BernoulliLogit,
        fmap: FeatureMap::Row { dim: p },
        features: FeatureDistribution::custom(Arc::new(EmpiricalRows::new(&split.train.features)), true),
        theta0: vec![0.0; p],
        n: split.train.n_rows,
        generations: cfg.generations,
        estimator: Estimator::Mle,
        scheme: WeightScheme::from_str(scheme)?,
        seed: cfg.seed,
        separation_fallback: cfg.separation_fallback,
        init: Some(vec![0.0; p]),
    };
    w.validate()?;
    Ok(w)
}

fn accuracy(theta: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let p = theta.len();
    let hits = x
        .chunks_exact(p)
        .zip(y)
        .filter(|(row, &yi)| {
            let eta: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
            (eta > 0.0) == (yi > 0.5)
        })
        .count();
    hits as f64 / y.len() as f64
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / k;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (k - 1.0);
    (m, (var / k).sqrt())
}

fn classify_csv(cfg: &RunConfig) -> CliResult<RunOutput> {
    let path = cfg.csv.as_ref().expect("validated");
    let split = load_csv(path, &cfg.label_column, cfg.split_seed, cfg.test_fraction)?;
    let x_train = split.train.design_with_intercept();
    let y_train = split.train.labels_f64();
    let x_test = split.test.design_with_intercept();
    let y_test = split.test.labels_f64();
    let g_max = cfg.generations;
    let mut out = RunOutput::new(Value::Null);
    out.line(format!(
        "classify-csv: {} train / {} test rows, {} features, G={g_max}, replications={}, seed={}",
        split.train.n_rows,
        split.test.n_rows,
        split.train.n_cols,
        cfg.replications,
        cfg.seed
    ));
    for name in &cfg.schemes {
        let w = csv_workflow_config(cfg, &split, name)?;
        let ens = run_ensemble_from(&w, cfg.replications, cfg.parallel, Some((&x_train, &y_train)))?;
        let mut ce_first = f64::NAN;
        for g in 1..=g_max {
            let mut ce = Vec::new();
            let mut acc = Vec::new();
            for t in &ens.trajectories {
                if let Some(th) = &t.generations[g - 1].theta_hat {
                    ce.push(test_ce_loss(&w.model, &w.fmap, th.as_slice(), &x_test, &y_test)?);
                    acc.push(accuracy(th.as_slice(), &x_test, &y_test));
                }
            }
            let (c, cs) = mean_stderr(&ce);
            let (a, as_) = mean_stderr(&acc);
            out.push(name, g, "test_ce_loss", c, cs);
            out.push(name, g, "test_accuracy", a, as_);
            out.push(name, g, "fraction_degenerate", ens.summaries[g - 1].fraction_degenerate, f64::NAN);
            if g == 1 {
                ce_first = c;
            }
            if g == g_max {
                out.line(format!(
                    "{name}: test CE loss G=1 {ce_first:.6} -> G={g_max} {c:.6} ± {cs:.6} (increase {:.6}) | accuracy {a:.4} ± {as_:.4}",
                    c - ce_first
                ));
            }
        }
    }
    out.manifest = manifest(
        cfg,
        json!({
            "feature_resampling": FEATURE_POLICY,
            "fitting": FITTING_NOTE,
            "protocol": "the test fraction and train-only standardization are conventions of this tool",
            "generation_1": "all schemes fit generation 1 on the same real training rows",
            "ingestion": split.report,
            "n_train": split.train.n_rows,
            "n_test": split.test.n_rows,
            "features": split.train.header,
        }),
    );
    Ok(out)
}
