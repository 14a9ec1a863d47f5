//! Raw benchmark CSV ingestion: parsing, outlier removal, DIMM feature
//! expansion, column trimming and multi-output consolidation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{FeatureKind, FeatureSchema, SuiteSpec};

pub const SUITE_COLUMN: &str = "suite";
pub const BENCHMARK_COLUMN: &str = "benchmark";
pub const SCORE_COLUMN: &str = "score";
pub const DIMM_PART_COLUMN: &str = "DIMM.PartNo";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("file is empty (no header row)")]
    EmptyFile,
    #[error("missing required column '{0}'")]
    MissingColumn(String),
    #[error("row {row}: column '{column}' value '{value}' is not a number")]
    Numeric { row: usize, column: String, value: String },
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("benchmark '{benchmark}' (row {row}) is not part of suite '{suite}'")]
    UnknownBenchmark { suite: String, benchmark: String, row: usize },
    #[error("ambiguous scores for benchmark '{benchmark}' in one configuration: rows {first} ({a}) and {second} ({b})")]
    Ambiguous { benchmark: String, first: usize, second: usize, a: f64, b: f64 },
    #[error("consolidated file: {0}")]
    Consolidated(String),
}

/// One parsed CSV row: one benchmark run of one hardware configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    /// Column name -> cell text, in file column order.
    pub features: Vec<(String, String)>,
    pub suite: String,
    pub benchmark: String,
    pub score: f64,
    /// 1-based data row number in the source file.
    pub row: usize,
}

impl RawRecord {
    pub fn get(&self, column: &str) -> Option<&str> {
        self.features.iter().find(|(k, _)| k == column).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, column: &str, value: String) {
        match self.features.iter_mut().find(|(k, _)| k == column) {
            Some(slot) => slot.1 = value,
            None => self.features.push((column.to_string(), value)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureValue {
    Number(f64),
    Text(String),
    Missing,
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> &str {
        match self {
            FeatureValue::Text(s) => s,
            _ => "",
        }
    }

    fn render(&self) -> String {
        match self {
            FeatureValue::Number(v) => format!("{v}"),
            FeatureValue::Text(s) => s.clone(),
            FeatureValue::Missing => String::new(),
        }
    }

    fn parse(kind: FeatureKind, cell: &str) -> Option<FeatureValue> {
        let cell = cell.trim();
        match kind {
            FeatureKind::Categorical => Some(FeatureValue::Text(cell.to_string())),
            FeatureKind::Numeric if cell.is_empty() => Some(FeatureValue::Missing),
            FeatureKind::Numeric => cell.parse::<f64>().ok().filter(|v| v.is_finite()).map(FeatureValue::Number),
        }
    }
}

/// One hardware configuration with its fixed-order label vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedRecord {
    /// Values in schema order.
    pub features: Vec<FeatureValue>,
    pub labels: Vec<f64>,
    /// Present only under the mask policy; `false` marks a missing label.
    pub label_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub suite: SuiteSpec,
    pub schema: FeatureSchema,
    pub records: Vec<ConsolidatedRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            suite: self.suite.clone(),
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Labels as rows.
    pub fn labels(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }

    /// Writes the consolidated form: schema columns then one
    /// `<suite>::<benchmark>` column per label. Missing labels are empty.
    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.schema.names().map(str::to_string).collect();
        header.extend(self.suite.benchmarks.iter().map(|b| self.suite.label_column(b)));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.features.iter().map(FeatureValue::render).collect();
            for (j, y) in r.labels.iter().enumerate() {
                let present = r.label_mask.as_ref().is_none_or(|m| m[j]);
                row.push(if present { format!("{y}") } else { String::new() });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, schema: &FeatureSchema, suite: &SuiteSpec) -> Result<Dataset, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.is_empty() {
            return Err(IngestError::EmptyFile);
        }
        let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));
        let feature_cols: Vec<usize> = schema.names().map(col).collect::<Result<_, _>>()?;
        let label_cols: Vec<usize> = suite.benchmarks.iter().map(|b| col(&suite.label_column(b))).collect::<Result<_, _>>()?;
        let mut records = Vec::new();
        let mut any_masked = false;
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let rowno = i + 1;
            let mut features = Vec::with_capacity(schema.len());
            for (spec, &c) in schema.features().iter().zip(&feature_cols) {
                let cell = row.get(c).unwrap_or("");
                features.push(FeatureValue::parse(spec.kind, cell).ok_or_else(|| IngestError::Numeric {
                    row: rowno,
                    column: spec.name.clone(),
                    value: cell.to_string(),
                })?);
            }
            let mut labels = Vec::with_capacity(label_cols.len());
            let mut mask = Vec::with_capacity(label_cols.len());
            for (&c, b) in label_cols.iter().zip(&suite.benchmarks) {
                let cell = row.get(c).unwrap_or("").trim();
                if cell.is_empty() {
                    labels.push(0.0);
                    mask.push(false);
                    any_masked = true;
                } else {
                    let v = cell.parse::<f64>().map_err(|_| IngestError::Numeric {
                        row: rowno,
                        column: suite.label_column(b),
                        value: cell.to_string(),
                    })?;
                    labels.push(v);
                    mask.push(true);
                }
            }
            records.push(ConsolidatedRecord { features, labels, label_mask: Some(mask) });
        }
        if !any_masked {
            records.iter_mut().for_each(|r| r.label_mask = None);
        }
        Ok(Dataset { suite: suite.clone(), schema: schema.clone(), records })
    }
}

/// Parses per-run rows. Every schema column plus `suite`, `benchmark` and
/// `score` must be present; extra columns are carried along untouched.
pub fn parse_csv(path: &Path, schema: &FeatureSchema) -> Result<Vec<RawRecord>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    parse_csv_str(&text, schema)
}

pub fn parse_csv_str(text: &str, schema: &FeatureSchema) -> Result<Vec<RawRecord>, IngestError> {
    if text.trim().is_empty() {
        return Err(IngestError::EmptyFile);
    }
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| IngestError::MissingColumn(name.to_string()));
    let (suite_col, bench_col, score_col) = (find(SUITE_COLUMN)?, find(BENCHMARK_COLUMN)?, find(SCORE_COLUMN)?);
    let numeric_cols: Vec<(usize, &str)> = schema
        .features()
        .iter()
        .map(|f| Ok((find(&f.name)?, f)))
        .collect::<Result<Vec<_>, IngestError>>()?
        .into_iter()
        .filter(|(_, f)| f.kind == FeatureKind::Numeric)
        .map(|(c, f)| (c, f.name.as_str()))
        .collect();

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let rowno = i + 1;
        let cell = |c: usize| row.get(c).unwrap_or("").trim();
        let score_text = cell(score_col);
        let score = score_text
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| IngestError::Row { row: rowno, msg: format!("score '{score_text}' is not a finite number") })?;
        let (suite, benchmark) = (cell(suite_col), cell(bench_col));
        if suite.is_empty() || benchmark.is_empty() {
            return Err(IngestError::Row { row: rowno, msg: "suite and benchmark must be non-empty".into() });
        }
        for &(c, name) in &numeric_cols {
            let v = cell(c);
            if !v.is_empty() && v.parse::<f64>().map_or(true, |x| !x.is_finite()) {
                return Err(IngestError::Numeric { row: rowno, column: name.to_string(), value: v.to_string() });
            }
        }
        let features = headers
            .iter()
            .enumerate()
            .filter(|(c, _)| ![suite_col, bench_col, score_col].contains(c))
            .map(|(c, h)| (h.clone(), cell(c).to_string()))
            .collect();
        out.push(RawRecord { features, suite: suite.to_string(), benchmark: benchmark.to_string(), score, row: rowno });
    }
    if out.is_empty() {
        log::warn!("input has a header but no data rows");
    }
    Ok(out)
}

/// Writes raw per-run rows with the schema columns followed by any extra
/// columns present on the first record, then `suite,benchmark,score`.
pub fn write_raw_csv(path: &Path, schema: &FeatureSchema, records: &[RawRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut columns: Vec<String> = schema.names().map(str::to_string).collect();
    if let Some(first) = records.first() {
        for (k, _) in &first.features {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let mut header = columns.clone();
    header.extend([SUITE_COLUMN, BENCHMARK_COLUMN, SCORE_COLUMN].map(str::to_string));
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = columns.iter().map(|c| r.get(c).unwrap_or("").to_string()).collect();
        row.push(r.suite.clone());
        row.push(r.benchmark.clone());
        row.push(format!("{}", r.score));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Indices whose population z-score satisfies |z| <= threshold.
///
/// The comparison is carried out as `(n*s_i - S)^2 <= t^2 (n*Q - S^2)`
/// on values shifted by the median, which is exact for integer-valued
/// data and avoids cancellation when the mean is large.
pub fn zscore_filter(scores: &[f64], threshold: f64) -> Vec<usize> {
    let n = scores.len();
    if n < 2 {
        log::warn!("z-score filter needs at least 2 scores, got {n}; keeping all");
        return (0..n).collect();
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let shift = sorted[n / 2];
    let shifted: Vec<f64> = scores.iter().map(|x| x - shift).collect();
    let nf = n as f64;
    let s: f64 = shifted.iter().sum();
    let q: f64 = shifted.iter().map(|x| x * x).sum();
    let spread = nf * q - s * s;
    if spread <= 0.0 {
        return (0..n).collect();
    }
    let bound = threshold * threshold * spread;
    shifted
        .iter()
        .enumerate()
        .filter(|(_, &x)| {
            let dev = nf * x - s;
            dev * dev <= bound
        })
        .map(|(i, _)| i)
        .collect()
}

/// Applies [`zscore_filter`] to scores grouped by (suite, benchmark).
/// Returns the kept records (input order preserved) and the removed count.
pub fn filter_outliers(records: Vec<RawRecord>, threshold: f64) -> (Vec<RawRecord>, usize) {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry((r.suite.as_str(), r.benchmark.as_str())).or_default().push(i);
    }
    let mut keep = vec![false; records.len()];
    for idx in groups.values() {
        let scores: Vec<f64> = idx.iter().map(|&i| records[i].score).collect();
        for k in zscore_filter(&scores, threshold) {
            keep[idx[k]] = true;
        }
    }
    let removed = keep.iter().filter(|k| !**k).count();
    let kept = records.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect();
    (kept, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncompletePolicy {
    /// Configurations missing any benchmark are excluded.
    #[default]
    Drop,
    /// Missing labels are kept as masked entries.
    Mask,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConsolidationReport {
    pub configurations: usize,
    pub dropped_incomplete: usize,
    pub masked_incomplete: usize,
    pub skipped_other_suite: usize,
}

/// Merges per-benchmark rows sharing the same trimmed feature tuple into
/// one record whose label vector follows the suite's benchmark order.
/// Output records are ordered by configuration key.
pub fn consolidate_multi_output(
    records: &[RawRecord],
    schema: &FeatureSchema,
    suite: &SuiteSpec,
    policy: IncompletePolicy,
) -> Result<(Dataset, ConsolidationReport), IngestError> {
    let mut report = ConsolidationReport::default();
    let mut groups: BTreeMap<Vec<String>, Vec<Option<(f64, usize)>>> = BTreeMap::new();
    for r in records {
        if r.suite != suite.name {
            report.skipped_other_suite += 1;
            continue;
        }
        let j = suite.benchmark_index(&r.benchmark).ok_or_else(|| IngestError::UnknownBenchmark {
            suite: suite.name.clone(),
            benchmark: r.benchmark.clone(),
            row: r.row,
        })?;
        let key: Vec<String> = schema.names().map(|n| r.get(n).unwrap_or("").trim().to_string()).collect();
        let slots = groups.entry(key).or_insert_with(|| vec![None; suite.output_dim()]);
        match slots[j] {
            None => slots[j] = Some((r.score, r.row)),
            Some((prev, _)) if prev == r.score => {}
            Some((prev, first)) => {
                return Err(IngestError::Ambiguous { benchmark: r.benchmark.clone(), first, second: r.row, a: prev, b: r.score })
            }
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for (key, slots) in groups {
        let complete = slots.iter().all(Option::is_some);
        if !complete && policy == IncompletePolicy::Drop {
            report.dropped_incomplete += 1;
            continue;
        }
        let mut features = Vec::with_capacity(key.len());
        for (spec, cell) in schema.features().iter().zip(&key) {
            features.push(
                FeatureValue::parse(spec.kind, cell)
                    .ok_or_else(|| IngestError::Consolidated(format!("feature '{}' value '{cell}' is not numeric", spec.name)))?,
            );
        }
        let labels = slots.iter().map(|s| s.map_or(0.0, |(v, _)| v)).collect();
        let label_mask = if complete {
            None
        } else {
            report.masked_incomplete += 1;
            Some(slots.iter().map(Option::is_some).collect())
        };
        out.push(ConsolidatedRecord { features, labels, label_mask });
    }
    report.configurations = out.len();
    if report.dropped_incomplete > 0 {
        log::info!("dropped {} incomplete configurations", report.dropped_incomplete);
    }
    // A mix of complete and masked records keeps an all-true mask on the
    // complete ones so downstream code sees a uniform layout.
    if out.iter().any(|r| r.label_mask.is_some()) {
        for r in &mut out {
            if r.label_mask.is_none() {
                r.label_mask = Some(vec![true; r.labels.len()]);
            }
        }
    }
    Ok((Dataset { suite: suite.clone(), schema: schema.clone(), records: out }, report))
}

/// Memory fields decoded from a DIMM part number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimmSpec {
    pub generation: String,
    pub density: f64,
    pub organization: f64,
    pub rank: f64,
    pub cl: f64,
}

/// Local part-number table standing in for vendor spec sheets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DimmLookup {
    entries: BTreeMap<String, DimmSpec>,
}

#[derive(Deserialize, Serialize)]
struct DimmRow {
    part_no: String,
    generation: String,
    density: f64,
    organization: f64,
    rank: f64,
    #[serde(rename = "CL")]
    cl: f64,
}

impl DimmLookup {
    pub fn from_csv_str(text: &str) -> Result<Self, IngestError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut entries = BTreeMap::new();
        for (i, row) in rdr.deserialize::<DimmRow>().enumerate() {
            let row = row?;
            let spec =
                DimmSpec { generation: row.generation, density: row.density, organization: row.organization, rank: row.rank, cl: row.cl };
            if entries.insert(row.part_no.clone(), spec).is_some() {
                return Err(IngestError::Row { row: i + 1, msg: format!("duplicate part number '{}'", row.part_no) });
            }
        }
        Ok(DimmLookup { entries })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (part_no, s) in &self.entries {
            w.serialize(DimmRow {
                part_no: part_no.clone(),
                generation: s.generation.clone(),
                density: s.density,
                organization: s.organization,
                rank: s.rank,
                cl: s.cl,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn insert(&mut self, part_no: impl Into<String>, spec: DimmSpec) {
        self.entries.insert(part_no.into(), spec);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DimmSpec)> {
        self.entries.iter()
    }
}

/// Looks up a part number; unknown parts bump `missing` and return `None`.
pub fn expand_dimm<'a>(part_no: &str, lookup: &'a DimmLookup, missing: &mut usize) -> Option<&'a DimmSpec> {
    let found = lookup.entries.get(part_no.trim());
    if found.is_none() {
        *missing += 1;
        log::warn!("unknown DIMM part number '{part_no}'");
    }
    found
}

/// Fills empty memory columns of each record from its `DIMM.PartNo`.
/// Returns how many part numbers were not found.
pub fn apply_dimm_expansion(records: &mut [RawRecord], lookup: &DimmLookup) -> usize {
    let mut missing = 0;
    for r in records.iter_mut() {
        let Some(part) = r.get(DIMM_PART_COLUMN).map(str::to_string) else { continue };
        if part.trim().is_empty() {
            continue;
        }
        let Some(spec) = expand_dimm(&part, lookup, &mut missing) else { continue };
        let fields = [
            ("DIMM_Generation", spec.generation.clone()),
            ("Density", format!("{}", spec.density)),
            ("Organization", format!("{}", spec.organization)),
            ("DIMM_rank", format!("{}", spec.rank)),
            ("CL", format!("{}", spec.cl)),
        ];
        for (col, val) in fields {
            if r.get(col).is_none_or(|v| v.trim().is_empty()) {
                r.set(col, val);
            }
        }
    }
    missing
}

/// Keeps exactly the schema's columns, in schema order. Columns the
/// record lacks are added empty.
pub fn trim_features(records: &[RawRecord], schema: &FeatureSchema) -> Vec<RawRecord> {
    records
        .iter()
        .map(|r| RawRecord { features: schema.names().map(|n| (n.to_string(), r.get(n).unwrap_or("").to_string())).collect(), ..r.clone() })
        .collect()
}
