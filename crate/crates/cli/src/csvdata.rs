//! Tabular CSV ingestion for the classification experiments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;
use synthloop_core::expfam::{ExpFamilyModel, FeatureDistribution};
use synthloop_core::rng::{stream, Purpose};

use crate::error::{CliError, CliResult};

/// Cells read as missing; their row is dropped.
const MISSING: &[&str] = &["", "NA", "NaN", "nan", "?"];

/// One side of a split. Features are standardized with training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    /// Feature column names, label excluded.
    pub header: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl CsvDataset {
    /// Row-major design with a leading intercept column.
    pub fn design_with_intercept(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_rows * (self.n_cols + 1));
        for row in &self.features {
            out.push(1.0);
            out.extend_from_slice(row);
        }
        out
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l)).collect()
    }
}

/// What ingestion did to the file, for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_rows: usize,
    /// Columns with zero training variance; they standardize to all zeros.
    pub constant_columns: Vec<String>,
    /// Original label value and the class it maps to.
    pub label_mapping: Vec<(String, u8)>,
    pub train_means: Vec<f64>,
    pub train_scales: Vec<f64>,
    pub test_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: CsvDataset,
    pub test: CsvDataset,
    pub report: LoadReport,
}

pub fn load_csv(path: &Path, label_column: &str, split_seed: u64, test_fraction: f64) -> CliResult<SplitData> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(&format!("cannot open {}", path.display()), e))?;
    load_csv_from(file, label_column, split_seed, test_fraction)
}

pub fn load_csv_from<R: Read>(input: R, label_column: &str, split_seed: u64, test_fraction: f64) -> CliResult<SplitData> {
    if !(test_fraction > 0.0 && test_fraction <= 0.5) {
        return Err(CliError::Config("test_fraction must lie in (0, 0.5]".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers().map_err(|e| CliError::parse(1, e))?.clone();
    let names: Vec<String> = headers.iter().map(str::to_string).collect();
    let label_idx = names
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| CliError::Data(format!("no column named `{label_column}`")))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let (mut read, mut dropped) = (0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::parse(line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        read += 1;
        if rec.len() != names.len() {
            return Err(CliError::parse(line, format!("expected {} fields, found {}", names.len(), rec.len())));
        }
        if rec.iter().any(|c| MISSING.contains(&c)) {
            dropped += 1;
            continue;
        }
        let mut row = Vec::with_capacity(names.len() - 1);
        for (j, cell) in rec.iter().enumerate() {
            if j == label_idx {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| CliError::parse(line, format!("column `{}`: `{cell}` is not a number", names[j])))?;
            row.push(v);
        }
        rows.push(row);
        raw_labels.push(rec[label_idx].to_string());
    }
    if rows.len() < 2 {
        return Err(CliError::Data(format!("only {} usable rows", rows.len())));
    }

    let mapping = label_mapping(&raw_labels)?;
    let labels: Vec<u8> = raw_labels
        .iter()
        .map(|l| mapping.iter().find(|(k, _)| k == l).map_or(0, |&(_, c)| c))
        .collect();

    let m = rows.len();
    let n_test = ((m as f64 * test_fraction).round() as usize).clamp(1, m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut stream(split_seed, 0, 0, Purpose::Split));
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let header: Vec<String> = names
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let d = header.len();
    let (means, scales, constant) = standardization(&rows, &train_idx, d);
    let build = |idx: &[usize]| CsvDataset {
        header: header.clone(),
        features: idx
            .iter()
            .map(|&i| (0..d).map(|j| (rows[i][j] - means[j]) / scales[j]).collect())
            .collect(),
        labels: idx.iter().map(|&i| labels[i]).collect(),
        n_rows: idx.len(),
        n_cols: d,
    };
    Ok(SplitData {
        train: build(&train_idx),
        test: build(&test_idx),
        report: LoadReport {
            rows_read: read,
            dropped_rows: dropped,
            constant_columns: constant.iter().map(|&j| header[j].clone()).collect(),
            label_mapping: mapping,
            train_means: means,
            train_scales: scales,
            test_fraction,
            split_seed,
        },
    })
}

/// Two distinct labels, ordered numerically when they all parse, otherwise
/// lexicographically; the smaller becomes class 0.
fn label_mapping(raw: &[String]) -> CliResult<Vec<(String, u8)>> {
    let distinct: BTreeSet<&str> = raw.iter().map(String::as_str).collect();
    if distinct.len() != 2 {
        return Err(CliError::label(format!(
            "expected two distinct labels, found {}: {:?}",
            distinct.len(),
            distinct.iter().take(5).collect::<Vec<_>>()
        )));
    }
    let mut v: Vec<&str> = distinct.into_iter().collect();
    if let (Ok(a), Ok(b)) = (v[0].parse::<f64>(), v[1].parse::<f64>()) {
        if b < a {
            v.swap(0, 1);
        }
    }
    Ok(vec![(v[0].to_string(), 0), (v[1].to_string(), 1)])
}

/// Training mean and population standard deviation per column. A column
/// with no spread keeps scale 1, so it becomes identically zero.
fn standardization(rows: &[Vec<f64>], train: &[usize], d: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let m = train.len() as f64;
    let mut means = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            means[j] += rows[i][j];
        }
    }
    means.iter_mut().for_each(|v| *v /= m);
    let mut scales = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            let c = rows[i][j] - means[j];
            scales[j] += c * c;
        }
    }
    let mut constant = Vec::new();
    for j in 0..d {
        let sd = (scales[j] / m).sqrt();
        if sd <= 1e-12 * means[j].abs().max(1.0) {
            scales[j] = 1.0;
            constant.push(j);
        } else {
            scales[j] = sd;
        }
    }
    (means, scales, constant)
}

/// Coefficient vector of the bundled dataset: a standard normal draw scaled
/// to unit length.
pub fn synthetic_theta0(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = stream(seed, 0, 0, Purpose::MonteCarlo);
    let mut th = FeatureDistribution::standard_normal(d, false).sample_rows(1, &mut rng);
    let norm = th.iter().map(|v| v * v).sum::<f64>().sqrt();
    th.iter_mut().for_each(|v| *v /= norm);
    th
}

/// CSV text of `n` rows `x ~ N(0, I_d)`, `y ~ Bernoulli(σ(xᵀθ₀))` with
/// columns `x1..xd,label`. Values are rounded to six decimals.
pub fn synthetic_logistic_csv(seed: u64, n: usize, d: usize) -> String {
    let theta0 = synthetic_theta0(seed, d);
    let x = FeatureDistribution::standard_normal(d, false).sample_rows(n, &mut stream(seed, 0, 1, Purpose::Features));
    let mut yrng = stream(seed, 0, 1, Purpose::Responses);
    let mut out = String::new();
    let cols: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    let _ = writeln!(out, "{},label", cols.join(","));
    for row in x.chunks_exact(d) {
        let row: Vec<f64> = row.iter().map(|v| (v * 1e6).round() / 1e6).collect();
        let eta: f64 = row.iter().zip(&theta0).map(|(a, b)| a * b).sum();
        let y = ExpFamilyModel::BernoulliLogit
            .sample_response(&[eta], &mut yrng)
            .expect("finite logit");
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{},{}", cells.join(","), y as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, frac: f64) -> CliResult<SplitData> {
        load_csv_from(text.as_bytes(), "y", 11, frac)
    }

    #[test]
    fn toy_split_is_even_and_repeatable() {
        let text = "a,b,y\n1,2,0\n2,1,1\n3,5,0\n4,4,1\n";
        let s1 = load(text, 0.5).unwrap();
        let s2 = load(text, 0.5).unwrap();
        assert_eq!((s1.train.n_rows, s1.test.n_rows), (2, 2));
        assert_eq!(s1, s2);
    }

    #[test]
    fn missing_cells_drop_rows() {
        let mut text = String::from("a,b,y\n");
        for i in 0..100 {
            if i == 37 {
                text.push_str("1.5,,1\n");
            } else {
                let _ = writeln!(text, "{},{},{}", i, (i * 7) % 13, i % 2);
            }
        }
        let s = load(&text, 0.25).unwrap();
        assert_eq!(s.train.n_rows + s.test.n_rows, 99);
        assert_eq!(s.report.dropped_rows, 1);
        assert_eq!(s.report.rows_read, 100);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let text = "a,c,y\n1,5,0\n2,5,1\n3,5,0\n4,5,1\n5,5,1\n6,5,0\n";
        let s = load(text, 0.5).unwrap();
        assert_eq!(s.report.constant_columns, vec!["c".to_string()]);
        assert!(s.train.features.iter().chain(&s.test.features).all(|r| r[1] == 0.0));
        let m: f64 = s.train.features.iter().map(|r| r[0]).sum::<f64>() / s.train.n_rows as f64;
        let v: f64 = s.train.features.iter().map(|r| r[0] * r[0]).sum::<f64>() / s.train.n_rows as f64;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn labels_are_mapped_or_rejected() {
        let s = load("a,y\n1,yes\n2,no\n3,yes\n4,no\n", 0.5).unwrap();
        assert_eq!(s.report.label_mapping, vec![("no".into(), 0), ("yes".into(), 1)]);
        let s = load("a,y\n1,10\n2,9\n3,10\n4,9\n", 0.5).unwrap();
        assert_eq!(s.report.label_mapping, vec![("9".into(), 0), ("10".into(), 1)]);
        let e = load("a,y\n1,0\n2,1\n3,2\n", 0.5).unwrap_err();
        assert!(e.to_string().contains("label error"), "{e}");
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let e = load("a,b,y\n1,2,0\n1,x,1\n", 0.5).unwrap_err();
        assert!(matches!(&e, CliError::Data(m) if m.contains("line 3")), "{e}");
        let e = load("a,b,y\n1,2,0\n3,1\n", 0.5).unwrap_err();
        assert!(matches!(&e, CliError::Data(m) if m.contains("line 3")), "{e}");
        assert!(matches!(load("a,b,y\n1,2,0\n", 0.7), Err(CliError::Config(_))));
    }

    #[test]
    fn synthetic_generator_is_deterministic() {
        let a = synthetic_logistic_csv(3, 50, 2);
        assert_eq!(a, synthetic_logistic_csv(3, 50, 2));
        assert_eq!(a.lines().count(), 51);
        let th = synthetic_theta0(3, 4);
        assert!((th.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
