//! Result files: `curves.csv`, `manifest.json` and `summary.txt`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use synthloop_core::stats::CurvePoint;

use crate::error::{CliError, CliResult};

pub const CURVES_FILE: &str = "curves.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub scheme: String,
    pub generation: usize,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

/// Everything one command produces, before it touches the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub curves: Vec<CurveRow>,
    pub manifest: Value,
    pub summary: String,
}

impl RunOutput {
    pub fn new(manifest: Value) -> Self {
        Self {
            curves: Vec::new(),
            manifest,
            summary: String::new(),
        }
    }

    pub fn push(&mut self, scheme: &str, generation: usize, metric: &str, value: f64, stderr: f64) {
        self.curves.push(CurveRow {
            scheme: scheme.to_string(),
            generation,
            metric: metric.to_string(),
            value,
            stderr,
        });
    }

    pub fn push_curve(&mut self, scheme: &str, metric: &str, curve: &[CurvePoint]) {
        for p in curve {
            self.push(scheme, p.generation, metric, p.value, p.stderr);
        }
    }

    /// Values of one metric for one scheme, in generation order.
    pub fn series(&self, scheme: &str, metric: &str) -> Vec<&CurveRow> {
        self.curves.iter().filter(|r| r.scheme == scheme && r.metric == metric).collect()
    }

    pub fn line(&mut self, text: impl AsRef<str>) {
        self.summary.push_str(text.as_ref());
        self.summary.push('\n');
    }

    pub fn curves_csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.curves {
            w.serialize(row).map_err(|e| CliError::Data(format!("cannot encode curves: {e}")))?;
        }
        w.into_inner().map_err(|e| CliError::Data(format!("cannot encode curves: {e}")))
    }

    /// Writes the three files to `dir`. Each is written under a temporary
    /// name first and renamed only once all three are complete.
    pub fn emit(&self, dir: &Path) -> CliResult<()> {
        if self.curves.is_empty() {
            return Err(CliError::Config("empty result: nothing to write".into()));
        }
        let manifest = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| CliError::Data(format!("cannot encode manifest: {e}")))?;
        let files: [(&str, Vec<u8>); 3] = [
            (CURVES_FILE, self.curves_csv()?),
            (MANIFEST_FILE, manifest),
            (SUMMARY_FILE, self.summary.clone().into_bytes()),
        ];
        fs::create_dir_all(dir).map_err(|e| CliError::io(&format!("cannot create {}", dir.display()), e))?;
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        for (name, bytes) in &files {
            let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
            let written = fs::File::create(&tmp).and_then(|mut f| {
                f.write_all(bytes)?;
                f.sync_all()
            });
            if let Err(e) = written {
                let _ = fs::remove_file(&tmp);
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                return Err(CliError::io(&format!("cannot write {}", tmp.display()), e));
            }
            staged.push((tmp, dir.join(name)));
        }
        for (tmp, dst) in &staged {
            fs::rename(tmp, dst).map_err(|e| CliError::io(&format!("cannot rename to {}", dst.display()), e))?;
        }
        Ok(())
    }
}
