//! Flags, config files and the resolved run configuration.
//!
//! A config file is a flat list of `key = value` lines whose values are
//! JSON scalars or arrays (`seed = 7`, `scheme = "augment"`, `vt = [[1, 0], [0, 1]]`).
//! Bare words are read as strings. Command-line flags override the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "synthloop", version, about = "Retraining on accumulating real and synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-sample retraining ensembles for one model and one or more schemes.
    SimulateWorkflow(Flags),
    /// Trajectories of the limiting sequential Gaussian process.
    SimulateLimit(Flags),
    /// Discard, augment and subsample side by side, with relative efficiencies.
    CompareWorkflows(Flags),
    /// Iterative logistic regression on a tabular CSV dataset.
    ClassifyCsv(Flags),
    /// Monte Carlo check that the likelihood ratio has unit mean.
    VerifyContiguity(Flags),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::SimulateWorkflow(_) => CommandKind::SimulateWorkflow,
            Command::SimulateLimit(_) => CommandKind::SimulateLimit,
            Command::CompareWorkflows(_) => CommandKind::CompareWorkflows,
            Command::ClassifyCsv(_) => CommandKind::ClassifyCsv,
            Command::VerifyContiguity(_) => CommandKind::VerifyContiguity,
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::SimulateWorkflow(f)
            | Command::SimulateLimit(f)
            | Command::CompareWorkflows(f)
            | Command::ClassifyCsv(f)
            | Command::VerifyContiguity(f) => f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    SimulateWorkflow,
    SimulateLimit,
    CompareWorkflows,
    ClassifyCsv,
    VerifyContiguity,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::SimulateWorkflow => "simulate-workflow",
            CommandKind::SimulateLimit => "simulate-limit",
            CommandKind::CompareWorkflows => "compare-workflows",
            CommandKind::ClassifyCsv => "classify-csv",
            CommandKind::VerifyContiguity => "verify-contiguity",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Flat `key = value` file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory for curves.csv, manifest.json and summary.txt.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replications (trajectories for simulate-limit).
    #[arg(long, value_name = "N")]
    pub replications: Option<usize>,
    #[arg(long, value_name = "G")]
    pub generations: Option<usize>,
    /// discard, augment, subsample, a comma-separated list, or `all`.
    #[arg(long)]
    pub scheme: Option<String>,
    /// gaussian, linear or logistic.
    #[arg(long)]
    pub model: Option<String>,
    /// Points per generation.
    #[arg(long, value_name = "N")]
    pub n: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, value_name = "W")]
    pub parallel: Option<usize>,
    /// mle, closed-form or median.
    #[arg(long)]
    pub estimator: Option<String>,
    /// V_T as a JSON number or matrix (simulate-limit).
    #[arg(long, value_name = "JSON", allow_hyphen_values = true)]
    pub vt: Option<String>,
    /// V_Θ as a JSON number or matrix (simulate-limit).
    #[arg(long, value_name = "JSON", allow_hyphen_values = true)]
    pub vtheta: Option<String>,
    /// Monte Carlo draws for V_T and sandwich-variance estimates.
    #[arg(long, value_name = "N")]
    pub mc_samples: Option<usize>,
    /// Retry separated logistic fits with a tiny ridge instead of failing.
    #[arg(long, value_name = "BOOL")]
    pub separation_fallback: Option<bool>,
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    pub label_column: Option<String>,
    #[arg(long, value_name = "F")]
    pub test_fraction: Option<f64>,
    /// Seed of the train/test split; defaults to `--seed`.
    #[arg(long, value_name = "U64")]
    pub split_seed: Option<u64>,
}

const KEYS: &[&str] = &[
    "command",
    "seed",
    "out",
    "replications",
    "generations",
    "scheme",
    "model",
    "n",
    "parallel",
    "estimator",
    "vt",
    "vtheta",
    "mc_samples",
    "separation_fallback",
    "csv",
    "label_column",
    "test_fraction",
    "split_seed",
];

fn canonical_key(raw: &str) -> String {
    let k = raw.trim().replace('-', "_");
    match k.as_str() {
        "output_dir" => "out".into(),
        "trajectories" => "replications".into(),
        _ => k,
    }
}

/// Parses the flat config format into a key-value map.
pub fn parse_config_text(text: &str) -> CliResult<BTreeMap<String, Value>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config line {lineno}: expected `key = value`")))?;
        let key = canonical_key(k);
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Config(format!("config line {lineno}: unknown key `{}`", k.trim())));
        }
        let v = v.trim();
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        if map.insert(key, value).is_some() {
            return Err(CliError::Config(format!("config line {lineno}: duplicate key `{}`", k.trim())));
        }
    }
    Ok(map)
}

fn read_config(path: &Path) -> CliResult<BTreeMap<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

fn json_flag(name: &str, raw: &str) -> CliResult<Value> {
    serde_json::from_str(raw).map_err(|e| CliError::Config(format!("--{name}: not valid JSON ({e})")))
}

fn overlay(map: &mut BTreeMap<String, Value>, f: &Flags) -> CliResult<()> {
    let mut set = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    };
    set("seed", f.seed.map(Value::from));
    set("out", f.out.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
    set("replications", f.replications.map(Value::from));
    set("generations", f.generations.map(Value::from));
    set("scheme", f.scheme.clone().map(Value::from));
    set("model", f.model.clone().map(Value::from));
    set("n", f.n.map(Value::from));
    set("parallel", f.parallel.map(Value::from));
    set("estimator", f.estimator.clone().map(Value::from));
    set("mc_samples", f.mc_samples.map(Value::from));
    set("separation_fallback", f.separation_fallback.map(Value::from));
    set("csv", f.csv.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
    set("label_column", f.label_column.clone().map(Value::from));
    set("test_fraction", f.test_fraction.map(Value::from));
    set("split_seed", f.split_seed.map(Value::from));
    if let Some(raw) = &f.vt {
        map.insert("vt".into(), json_flag("vt", raw)?);
    }
    if let Some(raw) = &f.vtheta {
        map.insert("vtheta".into(), json_flag("vtheta", raw)?);
    }
    Ok(())
}

/// Everything a run depends on. Serialized verbatim into the manifest;
/// the thread count is left out because it cannot change any output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub replications: usize,
    pub generations: usize,
    pub schemes: Vec<String>,
    pub model: String,
    pub n: usize,
    #[serde(skip)]
    pub parallel: usize,
    pub estimator: String,
    pub vt: Option<Vec<Vec<f64>>>,
    pub vtheta: Option<Vec<Vec<f64>>>,
    pub mc_samples: usize,
    pub separation_fallback: bool,
    pub csv: Option<PathBuf>,
    pub label_column: String,
    pub test_fraction: f64,
    pub split_seed: u64,
}

struct Resolver {
    map: BTreeMap<String, Value>,
}

impl Resolver {
    fn bad(key: &str, want: &str, v: &Value) -> CliError {
        CliError::Config(format!("`{key}` must be {want}, got {v}"))
    }

    fn uint(&self, key: &str, default: u64) -> CliResult<u64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| Self::bad(key, "a non-negative integer", v)),
        }
    }

    fn usize(&self, key: &str, default: usize) -> CliResult<usize> {
        self.uint(key, default as u64).map(|v| v as usize)
    }

    fn real(&self, key: &str, default: f64) -> CliResult<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| Self::bad(key, "a number", v)),
        }
    }

    fn boolean(&self, key: &str, default: bool) -> CliResult<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or_else(|| Self::bad(key, "true or false", v)),
        }
    }

    fn string(&self, key: &str) -> CliResult<Option<String>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(Self::bad(key, "a string", v)),
        }
    }

    fn matrix(&self, key: &str) -> CliResult<Option<Vec<Vec<f64>>>> {
        let Some(v) = self.map.get(key) else { return Ok(None) };
        if let Some(x) = v.as_f64() {
            return Ok(Some(vec![vec![x]]));
        }
        let rows = v.as_array().ok_or_else(|| Self::bad(key, "a number or a matrix", v))?;
        let m = rows
            .iter()
            .map(|r| {
                r.as_array()
                    .and_then(|r| r.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| Self::bad(key, "a number or a matrix", v))
            })
            .collect::<CliResult<Vec<_>>>()?;
        if m.is_empty() || m.iter().any(|r| r.len() != m.len()) {
            return Err(Self::bad(key, "a square matrix", v));
        }
        Ok(Some(m))
    }
}

fn parse_schemes(raw: &str) -> CliResult<Vec<String>> {
    if raw.trim() == "all" {
        return Ok(vec!["discard".into(), "augment".into(), "subsample".into()]);
    }
    let mut out = Vec::new();
    for part in raw.split(',') {
        let name = match part.trim() {
            "augment-subsample" => "subsample",
            s => s,
        };
        if !["discard", "augment", "subsample"].contains(&name) {
            return Err(CliError::Config(format!("unknown scheme `{name}`")));
        }
        if !out.iter().any(|s| s == name) {
            out.push(name.to_string());
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Merges the config file (if any) with the flags and fills defaults.
    pub fn resolve(kind: CommandKind, flags: &Flags) -> CliResult<Self> {
        let mut map = match &flags.config {
            Some(p) => read_config(p)?,
            None => BTreeMap::new(),
        };
        if let Some(c) = map.remove("command") {
            if c.as_str() != Some(kind.name()) {
                return Err(CliError::Config(format!("config is for command {c}, not `{}`", kind.name())));
            }
        }
        overlay(&mut map, flags)?;
        Self::from_map(kind, map)
    }

    fn from_map(kind: CommandKind, map: BTreeMap<String, Value>) -> CliResult<Self> {
        use CommandKind::*;
        let r = Resolver { map };
        let seed = r.uint("seed", 2025)?;
        let (reps, gens, scheme, n) = match kind {
            SimulateLimit => (200_000, 100, "discard", 2000),
            SimulateWorkflow => (500, 10, "discard", 2000),
            CompareWorkflows => (500, 10, "all", 2000),
            ClassifyCsv => (10, 50, "discard,augment", 0),
            VerifyContiguity => (10_000, 3, "augment", 500),
        };
        let model = r.string("model")?.unwrap_or_else(|| {
            if kind == ClassifyCsv { "logistic" } else { "gaussian" }.to_string()
        });
        let model = match model.as_str() {
            "gaussian" | "gaussian_known_var" => "gaussian",
            "logistic" | "bernoulli_logit" => "logistic",
            "linear" | "linear_unknown_var" => "linear",
            other => return Err(CliError::Config(format!("unknown model `{other}`"))),
        }
        .to_string();
        if kind == ClassifyCsv && model != "logistic" {
            return Err(CliError::Config("classify-csv fits logistic regression only".into()));
        }
        let estimator = r
            .string("estimator")?
            .unwrap_or_else(|| if model == "linear" { "closed-form" } else { "mle" }.to_string());
        if !["mle", "closed-form", "median"].contains(&estimator.as_str()) {
            return Err(CliError::Config(format!("unknown estimator `{estimator}`")));
        }
        let schemes = parse_schemes(&r.string("scheme")?.unwrap_or_else(|| scheme.to_string()))?;
        let parallel_default = std::thread::available_parallelism().map_or(1, |p| p.get());
        let cfg = RunConfig {
            command: kind,
            seed,
            output_dir: PathBuf::from(r.string("out")?.unwrap_or_else(|| "out".into())),
            replications: r.usize("replications", reps)?,
            generations: r.usize("generations", gens)?,
            schemes,
            model,
            n: r.usize("n", n)?,
            parallel: r.usize("parallel", parallel_default)?.max(1),
            estimator,
            vt: r.matrix("vt")?,
            vtheta: r.matrix("vtheta")?,
            mc_samples: r.usize("mc_samples", 200_000)?,
            separation_fallback: r.boolean("separation_fallback", kind == ClassifyCsv)?,
            csv: r.string("csv")?.map(PathBuf::from),
            label_column: r.string("label_column")?.unwrap_or_else(|| "label".into()),
            test_fraction: r.real("test_fraction", 0.25)?,
            split_seed: r.uint("split_seed", seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        let err = |m: &str| Err(CliError::Config(m.to_string()));
        if self.generations == 0 {
            return err("generations must be at least 1");
        }
        if self.replications < 2 {
            return err("at least two replications are needed");
        }
        if self.command == CommandKind::ClassifyCsv {
            if self.csv.is_none() {
                return err("classify-csv needs --csv");
            }
            if self.generations > 200 {
                return err("classify-csv supports at most 200 generations");
            }
            if !(self.test_fraction > 0.0 && self.test_fraction <= 0.5) {
                return err("test_fraction must lie in (0, 0.5]");
            }
        } else if self.n == 0 {
            return err("n must be positive");
        }
        if self.vt.is_some() != self.vtheta.is_some() {
            return err("vt and vtheta must be given together");
        }
        if self.vt.is_some() && self.command != CommandKind::SimulateLimit {
            return err("vt and vtheta apply to simulate-limit only");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_flag_precedence() {
        let map = parse_config_text("# run\nseed = 7\nscheme = augment\nvt = [[1, 0], [0, 2]]\nmc-samples = 10\n").unwrap();
        assert_eq!(map["seed"], Value::from(7));
        assert_eq!(map["scheme"], Value::from("augment"));
        let dir = std::env::temp_dir().join(format!("synthloop-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "seed = 7\nscheme = \"augment\"\ngenerations = 12\n").unwrap();
        let flags = Flags {
            config: Some(path),
            seed: Some(9),
            ..Flags::default()
        };
        let cfg = RunConfig::resolve(CommandKind::SimulateWorkflow, &flags).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.generations, 12);
        assert_eq!(cfg.schemes, vec!["augment".to_string()]);
        assert_eq!(cfg.split_seed, 9);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_bad_entries() {
        assert!(parse_config_text("seed 7").is_err());
        assert!(parse_config_text("color = 1").is_err());
        assert!(parse_config_text("seed = 1\nseed = 2").is_err());
        let mut map = BTreeMap::new();
        map.insert("seed".to_string(), Value::from(-1));
        assert!(RunConfig::from_map(CommandKind::SimulateLimit, map).is_err());
        let mut map = BTreeMap::new();
        map.insert("vt".to_string(), Value::from(1.0));
        assert!(RunConfig::from_map(CommandKind::SimulateLimit, map).is_err());
    }

    #[test]
    fn scheme_lists() {
        assert_eq!(parse_schemes("all").unwrap().len(), 3);
        assert_eq!(parse_schemes("augment, discard,augment").unwrap(), vec!["augment", "discard"]);
        assert_eq!(parse_schemes("augment-subsample").unwrap(), vec!["subsample"]);
        assert!(parse_schemes("keep").is_err());
    }

    #[test]
    fn scalar_and_matrix_variances() {
        let mut map = BTreeMap::new();
        map.insert("vt".to_string(), Value::from(1.0));
        map.insert("vtheta".to_string(), serde_json::json!([[1.5]]));
        let cfg = RunConfig::from_map(CommandKind::SimulateLimit, map).unwrap();
        assert_eq!(cfg.vt, Some(vec![vec![1.0]]));
        assert_eq!(cfg.vtheta, Some(vec![vec![1.5]]));
        let mut map = BTreeMap::new();
        map.insert("vt".to_string(), serde_json::json!([[1.0, 0.0]]));
        map.insert("vtheta".to_string(), Value::from(1.0));
        assert!(RunConfig::from_map(CommandKind::SimulateLimit, map).is_err());
    }
}
