//! Attention matrices and aggregated feature importance.
//!
//! Importance of a feature is the attention it receives: the column mean of
//! a row-stochastic attention matrix, renormalized to sum 1. The row mean
//! (attention given) is available through [`Reduction::Given`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::EncodedBatch;
use crate::model::{InterMode, ModelError, Ncpp};
use crate::schema::ModelGroup;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{what} index {index} out of range (have {len})")]
    Index { what: &'static str, index: usize, len: usize },
    #[error("attention matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("empty batch")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Column mean: attention received.
    #[default]
    Received,
    /// Row mean: attention given.
    Given,
}

/// Which sample the matrices come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSelection {
    Index(usize),
    Mean,
}

impl SampleSelection {
    fn label(&self) -> String {
        match self {
            SampleSelection::Index(i) => i.to_string(),
            SampleSelection::Mean => "mean over batch".to_string(),
        }
    }

    fn file_tag(&self) -> String {
        match self {
            SampleSelection::Index(i) => format!("s{i}"),
            SampleSelection::Mean => "mean".to_string(),
        }
    }
}

/// Attention matrices for one sample (or the batch mean), head and layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrices {
    /// Per group in model order; `None` when the group's stack is disabled.
    pub intra: [Option<Vec<Vec<f64>>>; 4],
    /// 4x4 over pooled group tokens, or over every position in sequence mode.
    pub inter: Vec<Vec<f64>>,
}

fn check_index(what: &'static str, index: usize, len: usize) -> Result<(), ExplainError> {
    if index >= len {
        return Err(ExplainError::Index { what, index, len });
    }
    Ok(())
}

/// Slice [n, n] for (sample, head) out of a [B, heads, n, n] trace tensor,
/// or the mean over samples.
fn slice_matrix(t: &Tensor, sel: SampleSelection, head: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    let at = |sample: usize, i: usize, j: usize| t.data()[((sample * h + head) * n + i) * n + j];
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match sel {
                    SampleSelection::Index(k) => at(k, i, j),
                    SampleSelection::Mean => (0..b).map(|k| at(k, i, j)).sum::<f64>() / b as f64,
                })
                .collect()
        })
        .collect()
}

fn traced(model: &Ncpp, batch: &EncodedBatch, sel: SampleSelection, head: usize, layer: usize) -> Result<AttentionMatrices, ExplainError> {
    if batch.batch == 0 {
        return Err(ExplainError::Empty);
    }
    if let SampleSelection::Index(i) = sel {
        check_index("sample", i, batch.batch)?;
    }
    check_index("head", head, model.config.heads)?;
    check_index("layer", layer, model.config.layers)?;
    let (_, trace) = model.predict_traced(batch)?;
    let intra = std::array::from_fn(|g| trace.intra[g].get(layer).map(|t| slice_matrix(t, sel, head)));
    let inter = slice_matrix(&trace.inter[layer], sel, head);
    Ok(AttentionMatrices { intra, inter })
}

/// Intra-group matrices (n_g x n_g per group) and the inter-group matrix
/// for one sample, head and layer.
pub fn extract_attention(
    model: &Ncpp,
    batch: &EncodedBatch,
    sample: usize,
    head: usize,
    layer: usize,
) -> Result<AttentionMatrices, ExplainError> {
    traced(model, batch, SampleSelection::Index(sample), head, layer)
}

/// Same as [`extract_attention`], averaged over the batch.
pub fn extract_mean_attention(model: &Ncpp, batch: &EncodedBatch, head: usize, layer: usize) -> Result<AttentionMatrices, ExplainError> {
    traced(model, batch, SampleSelection::Mean, head, layer)
}

/// Importance scores of a square attention matrix, summing to 1.
pub fn aggregate_importance(matrix: &[Vec<f64>], reduction: Reduction) -> Result<Vec<f64>, ExplainError> {
    let n = matrix.len();
    if let Some(row) = matrix.iter().find(|r| r.len() != n) {
        return Err(ExplainError::NotSquare { rows: n, cols: row.len() });
    }
    let mut scores: Vec<f64> = match reduction {
        Reduction::Received => (0..n).map(|j| matrix.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect(),
        Reduction::Given => matrix.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect(),
    };
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub group: String,
    pub features: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub suite: String,
    /// Sample index, or "mean over batch".
    pub sample: String,
    pub head: usize,
    pub layer: usize,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub provenance: Provenance,
    /// Groups whose intra stack ran, in model order.
    pub groups: Vec<GroupImportance>,
    /// One score per group.
    pub inter: GroupImportance,
    pub matrices: AttentionMatrices,
    #[serde(skip)]
    file_stem: String,
}

impl ImportanceReport {
    /// Filename prefix encoding suite, sample, head and layer.
    pub fn file_stem(&self) -> &str {
        &self.file_stem
    }
}

fn stem(suite: &str, sel: SampleSelection, head: usize, layer: usize) -> String {
    format!("{suite}_{}_h{head}_l{layer}", sel.file_tag())
}

/// Builds the importance report for a sample (or the batch mean).
pub fn importance_report(
    model: &Ncpp,
    batch: &EncodedBatch,
    suite: &str,
    sel: SampleSelection,
    head: usize,
    layer: usize,
    reduction: Reduction,
) -> Result<ImportanceReport, ExplainError> {
    let matrices = traced(model, batch, sel, head, layer)?;
    let names_of = |g: ModelGroup| -> Vec<String> { model.partition.indices(g).iter().map(|&k| model.feature_names[k].clone()).collect() };
    let mut groups = Vec::new();
    for g in ModelGroup::ALL {
        if let Some(m) = &matrices.intra[g.index()] {
            groups.push(GroupImportance { group: g.to_string(), features: names_of(g), scores: aggregate_importance(m, reduction)? });
        }
    }
    let positions = aggregate_importance(&matrices.inter, reduction)?;
    let inter_scores = match model.config.inter_mode {
        InterMode::Pooled => positions,
        // Positions are concatenated group by group; a group's score is
        // the sum over its positions.
        InterMode::Sequence => {
            let mut start = 0;
            ModelGroup::ALL
                .iter()
                .map(|&g| {
                    let n = model.partition.len(g);
                    let s = positions[start..start + n].iter().sum();
                    start += n;
                    s
                })
                .collect()
        }
    };
    let inter = GroupImportance {
        group: "inter".to_string(),
        features: ModelGroup::ALL.iter().map(|g| g.to_string()).collect(),
        scores: inter_scores,
    };
    Ok(ImportanceReport {
        provenance: Provenance { suite: suite.to_string(), sample: sel.label(), head, layer, reduction },
        groups,
        inter,
        matrices,
        file_stem: stem(suite, sel, head, layer),
    })
}

fn write_scores(path: &Path, g: &GroupImportance) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "score"])?;
    for (name, s) in g.features.iter().zip(&g.scores) {
        w.write_record([name.as_str(), &s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_matrix(path: &Path, names: &[String], m: &[Vec<f64>]) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in m.iter().enumerate() {
        let mut rec = vec![names.get(i).cloned().unwrap_or_else(|| i.to_string())];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by [`export_importance`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFiles {
    /// feature,score CSVs: one per group, then the inter-group one.
    pub scores: Vec<PathBuf>,
    pub matrices: Vec<PathBuf>,
    pub json: PathBuf,
}

/// Writes score CSVs, matrix CSVs (heatmap input) and a JSON bundle into
/// `dir`.
pub fn export_importance(report: &ImportanceReport, dir: &Path) -> Result<ExportedFiles, ExplainError> {
    fs::create_dir_all(dir)?;
    let stem = if report.file_stem.is_empty() {
        let p = &report.provenance;
        let tag = p.sample.parse::<usize>().map_or("mean".to_string(), |i| format!("s{i}"));
        format!("{}_{tag}_h{}_l{}", p.suite, p.head, p.layer)
    } else {
        report.file_stem.clone()
    };
    let mut scores = Vec::new();
    let mut matrices = Vec::new();
    for g in &report.groups {
        let path = dir.join(format!("{stem}_{}.csv", g.group));
        write_scores(&path, g)?;
        scores.push(path);
        let idx = ModelGroup::ALL.iter().position(|m| m.to_string() == g.group).expect("known group");
        if let Some(m) = &report.matrices.intra[idx] {
            let path = dir.join(format!("{stem}_{}_matrix.csv", g.group));
            write_matrix(&path, &g.features, m)?;
            matrices.push(path);
        }
    }
    let path = dir.join(format!("{stem}_inter.csv"));
    write_scores(&path, &report.inter)?;
    scores.push(path);
    let inter_names: Vec<String> = if report.matrices.inter.len() == report.inter.features.len() {
        report.inter.features.clone()
    } else {
        (0..report.matrices.inter.len()).map(|i| i.to_string()).collect()
    };
    let path = dir.join(format!("{stem}_inter_matrix.csv"));
    write_matrix(&path, &inter_names, &report.matrices.inter)?;
    matrices.push(path);

    let json = dir.join(format!("{stem}_importance.json"));
    fs::write(&json, serde_json::to_string_pretty(report)?)?;
    Ok(ExportedFiles { scores, matrices, json })
}

/// Reads a JSON bundle written by [`export_importance`].
pub fn read_importance(path: &Path) -> Result<ImportanceReport, ExplainError> {
    let mut report: ImportanceReport = serde_json::from_str(&fs::read_to_string(path)?)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    report.file_stem = name.strip_suffix("_importance.json").unwrap_or(name).to_string();
    Ok(report)
}

/// Reads a feature,score CSV.
pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>, ExplainError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let score = rec[1].parse::<f64>().map_err(|e| ExplainError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        out.push((rec[0].to_string(), score));
    }
    Ok(out)
}
