//! Error metrics per benchmark and pooled, cross-validation averaging,
//! and report files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction shape {pred:?} differs from truth shape {truth:?}")]
    Shape { pred: Vec<usize>, truth: Vec<usize> },
    #[error("MAPE is undefined for '{0}': every true value is zero")]
    MapeUndefined(String),
    #[error("no rows to evaluate")]
    Empty,
    #[error("cannot aggregate: {0}")]
    Aggregate(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Percentile {
    /// Smallest order statistic whose rank is at least `ceil(p * n)`.
    #[default]
    NearestRank,
    /// Linear interpolation between closest ranks (`(n - 1) * p`).
    Linear,
}

impl Percentile {
    pub fn of(self, values: &[f64], p: f64) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        match self {
            Percentile::NearestRank => {
                let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
                v[rank.min(n) - 1]
            }
            Percentile::Linear => {
                let pos = p * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
            }
        }
    }
}

/// MAPE values are fractions (0.01 = 1%).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub mape: f64,
    pub p95_ae: f64,
    pub p95_se: f64,
    pub p95_ape: f64,
    /// Evaluated entries.
    pub count: usize,
    /// Entries left out of MAPE because their true value is zero.
    pub mape_excluded: usize,
}

impl Metrics {
    fn from_pairs(pairs: &[(f64, f64)], method: Percentile) -> Metrics {
        let n = pairs.len().max(1) as f64;
        let ae: Vec<f64> = pairs.iter().map(|(p, t)| (t - p).abs()).collect();
        let se: Vec<f64> = pairs.iter().map(|(p, t)| (t - p) * (t - p)).collect();
        let ape: Vec<f64> = pairs.iter().filter(|(_, t)| *t != 0.0).map(|(p, t)| ((t - p) / t).abs()).collect();
        Metrics {
            mae: ae.iter().sum::<f64>() / n,
            mse: se.iter().sum::<f64>() / n,
            mape: if ape.is_empty() { 0.0 } else { ape.iter().sum::<f64>() / ape.len() as f64 },
            p95_ae: method.of(&ae, 0.95),
            p95_se: method.of(&se, 0.95),
            p95_ape: method.of(&ape, 0.95),
            count: pairs.len(),
            mape_excluded: pairs.len() - ape.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMetrics {
    pub benchmark: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub per_benchmark: Vec<BenchmarkMetrics>,
    pub overall: Metrics,
    /// Set when the report averages cross-validation folds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
}

/// Metrics per output column and pooled over all entries. `weights`
/// (same layout as `truth`) marks missing labels with 0.
pub fn compute_metrics(
    pred: &Tensor,
    truth: &Tensor,
    weights: Option<&[f64]>,
    suite: &str,
    benchmarks: &[String],
    method: Percentile,
) -> Result<EvalReport, EvalError> {
    if pred.shape() != truth.shape() || truth.shape().len() != 2 || truth.shape()[1] != benchmarks.len() {
        return Err(EvalError::Shape { pred: pred.shape().to_vec(), truth: truth.shape().to_vec() });
    }
    let (rows, cols) = (truth.shape()[0], truth.shape()[1]);
    let keep = |i: usize| weights.is_none_or(|w| w[i] > 0.0);
    let mut per_benchmark = Vec::with_capacity(cols);
    let mut pooled = Vec::with_capacity(rows * cols);
    for (j, name) in benchmarks.iter().enumerate() {
        let pairs: Vec<(f64, f64)> =
            (0..rows).map(|r| r * cols + j).filter(|&i| keep(i)).map(|i| (pred.data()[i], truth.data()[i])).collect();
        if pairs.is_empty() {
            return Err(EvalError::Empty);
        }
        if pairs.iter().all(|(_, t)| *t == 0.0) {
            return Err(EvalError::MapeUndefined(name.clone()));
        }
        per_benchmark.push(BenchmarkMetrics { benchmark: name.clone(), metrics: Metrics::from_pairs(&pairs, method) });
    }
    for r in 0..rows {
        for j in 0..cols {
            let i = r * cols + j;
            if keep(i) {
                pooled.push((pred.data()[i], truth.data()[i]));
            }
        }
    }
    Ok(EvalReport { suite: suite.to_string(), per_benchmark, overall: Metrics::from_pairs(&pooled, method), folds: None })
}

fn mean_metrics(all: &[&Metrics]) -> Metrics {
    let k = all.len() as f64;
    let avg = |f: fn(&Metrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / k;
    Metrics {
        mae: avg(|m| m.mae),
        mse: avg(|m| m.mse),
        mape: avg(|m| m.mape),
        p95_ae: avg(|m| m.p95_ae),
        p95_se: avg(|m| m.p95_se),
        p95_ape: avg(|m| m.p95_ape),
        count: (all.iter().map(|m| m.count).sum::<usize>() as f64 / k).round() as usize,
        mape_excluded: (all.iter().map(|m| m.mape_excluded).sum::<usize>() as f64 / k).round() as usize,
    }
}

/// Unweighted mean of every metric across folds; counts are the mean
/// fold count, rounded.
pub fn aggregate_cv(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
    let first = reports.first().ok_or_else(|| EvalError::Aggregate("no reports".into()))?;
    if reports.len() < 2 {
        return Err(EvalError::Aggregate(format!("need at least 2 folds, got {}", reports.len())));
    }
    let names: Vec<&str> = first.per_benchmark.iter().map(|b| b.benchmark.as_str()).collect();
    for r in reports {
        if r.suite != first.suite || r.per_benchmark.iter().map(|b| b.benchmark.as_str()).ne(names.iter().copied()) {
            return Err(EvalError::Aggregate(format!("suite mismatch: '{}' vs '{}'", r.suite, first.suite)));
        }
    }
    let per_benchmark = (0..names.len())
        .map(|j| BenchmarkMetrics {
            benchmark: names[j].to_string(),
            metrics: mean_metrics(&reports.iter().map(|r| &r.per_benchmark[j].metrics).collect::<Vec<_>>()),
        })
        .collect();
    let overall = mean_metrics(&reports.iter().map(|r| &r.overall).collect::<Vec<_>>());
    Ok(EvalReport { suite: first.suite.clone(), per_benchmark, overall, folds: Some(reports.len()) })
}

pub const CSV_HEADER: [&str; 8] = ["benchmark", "mae", "mse", "mape", "p95_ae", "p95_se", "p95_ape", "count"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    /// Per-benchmark MAPE in percent, one row per radar axis.
    Radar,
}

impl EvalReport {
    pub fn to_csv_string(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        let row = |name: &str, m: &Metrics| {
            vec![
                name.to_string(),
                m.mae.to_string(),
                m.mse.to_string(),
                m.mape.to_string(),
                m.p95_ae.to_string(),
                m.p95_se.to_string(),
                m.p95_ape.to_string(),
                m.count.to_string(),
            ]
        };
        for b in &self.per_benchmark {
            w.write_record(row(&b.benchmark, &b.metrics))?;
        }
        w.write_record(row("overall", &self.overall))?;
        Ok(String::from_utf8(w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?).expect("utf8"))
    }

    pub fn radar_csv_string(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["benchmark", "mape_percent"])?;
        for b in &self.per_benchmark {
            w.write_record([b.benchmark.clone(), (b.metrics.mape * 100.0).to_string()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?).expect("utf8"))
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
        let text = match format {
            ReportFormat::Json => serde_json::to_string_pretty(self)?,
            ReportFormat::Csv => self.to_csv_string()?,
            ReportFormat::Radar => self.radar_csv_string()?,
        };
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<EvalReport, EvalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>_radar.csv` into `dir`.
pub fn export_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (dir.join(format!("{stem}.json")), ReportFormat::Json),
        (dir.join(format!("{stem}.csv")), ReportFormat::Csv),
        (dir.join(format!("{stem}_radar.csv")), ReportFormat::Radar),
    ];
    for (path, format) in &files {
        report.write(path, *format)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Parses the CSV rendition back into (benchmark, [mae, mse, mape,
/// p95_ae, p95_se, p95_ape], count) rows.
pub fn read_report_csv(text: &str) -> Result<Vec<(String, [f64; 6], usize)>, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let num = |i: usize| row[i].parse::<f64>().map_err(|e| EvalError::Aggregate(e.to_string()));
        let vals = [num(1)?, num(2)?, num(3)?, num(4)?, num(5)?, num(6)?];
        let count = row[7].parse::<usize>().map_err(|e| EvalError::Aggregate(e.to_string()))?;
        out.push((row[0].to_string(), vals, count));
    }
    Ok(out)
}
