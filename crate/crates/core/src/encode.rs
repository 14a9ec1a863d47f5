//! Fit-on-train transforms: numeric normalization, categorical
//! tokenization, and assembly of model-ready batches.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(test)]
use crate::ingest::FeatureValue;
use crate::ingest::{ConsolidatedRecord, Dataset};
use crate::schema::{group_partition, FeatureKind, FeatureSchema, ModelGroup};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<oov>";
pub const DEFAULT_VOCAB_CAP: usize = 100;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot fit transforms on an empty dataset")]
    Empty,
    #[error("feature '{0}' was not seen when the transforms were fitted")]
    UnseenFeature(String),
    #[error("vocabulary cap must be at least 3, got {0}")]
    Cap(usize),
    #[error("{0}")]
    Mismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizerKind {
    #[default]
    Zscore,
    Minmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation; 1 for constant features.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub constant: bool,
    /// Non-missing training values the statistics were computed from.
    pub count: usize,
}

impl FeatureStats {
    fn center_scale(&self, kind: NormalizerKind) -> (f64, f64) {
        match kind {
            NormalizerKind::Zscore => (self.mean, self.std),
            NormalizerKind::Minmax if self.constant => (self.min, 1.0),
            NormalizerKind::Minmax => (self.min, self.max - self.min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub kind: NormalizerKind,
    pub rows: usize,
    /// Numeric features in schema order.
    pub features: Vec<FeatureStats>,
}

pub fn fit_normalizer(train: &Dataset, kind: NormalizerKind) -> Result<NormalizerStats, EncodeError> {
    if train.is_empty() {
        return Err(EncodeError::Empty);
    }
    let mut features = Vec::new();
    for (j, spec) in train.schema.features().iter().enumerate() {
        if spec.kind != FeatureKind::Numeric {
            continue;
        }
        let values: Vec<f64> = train.records.iter().filter_map(|r| r.features[j].as_number()).collect();
        let count = values.len();
        let (mean, var, min, max) = if count == 0 {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            let n = count as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, var, min, max)
        };
        let constant = !(var > 0.0) || max == min;
        features.push(FeatureStats {
            name: spec.name.clone(),
            mean,
            std: if constant { 1.0 } else { var.sqrt() },
            min,
            max,
            constant,
            count,
        });
    }
    Ok(NormalizerStats { kind, rows: train.len(), features })
}

impl NormalizerStats {
    fn lookup(&self, schema: &FeatureSchema) -> Result<Vec<(usize, &FeatureStats)>, EncodeError> {
        let by_name: HashMap<&str, &FeatureStats> = self.features.iter().map(|f| (f.name.as_str(), f)).collect();
        schema
            .features()
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FeatureKind::Numeric)
            .map(|(j, f)| by_name.get(f.name.as_str()).map(|s| (j, *s)).ok_or_else(|| EncodeError::UnseenFeature(f.name.clone())))
            .collect()
    }

    /// Normalized numeric values per record, in schema numeric order.
    /// Missing values map to 0, the normalized training center.
    pub fn apply(&self, schema: &FeatureSchema, records: &[ConsolidatedRecord]) -> Result<Vec<Vec<f64>>, EncodeError> {
        let cols = self.lookup(schema)?;
        Ok(records
            .iter()
            .map(|r| {
                cols.iter()
                    .map(|&(j, s)| {
                        let (c, k) = s.center_scale(self.kind);
                        r.features[j].as_number().map_or(0.0, |x| (x - c) / k)
                    })
                    .collect()
            })
            .collect())
    }

    /// Maps normalized rows (schema numeric order) back to raw units.
    pub fn inverse(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| {
                row.iter()
                    .zip(&self.features)
                    .map(|(z, s)| {
                        let (c, k) = s.center_scale(self.kind);
                        z * k + c
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn apply_normalizer(
    stats: &NormalizerStats,
    schema: &FeatureSchema,
    records: &[ConsolidatedRecord],
) -> Result<Vec<Vec<f64>>, EncodeError> {
    stats.apply(schema, records)
}

/// Splits on anything that is not alphanumeric; empty pieces are dropped.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

/// Dense token ids; 0 is padding and 1 is out-of-vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    pad_id: usize,
    oov_id: usize,
    tokens: Vec<String>,
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { pad_id: PAD_ID, oov_id: OOV_ID, tokens: v.tokens }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = String;

    fn try_from(f: VocabFile) -> Result<Self, String> {
        if f.pad_id != PAD_ID || f.oov_id != OOV_ID {
            return Err(format!("expected pad id {PAD_ID} and oov id {OOV_ID}"));
        }
        if f.tokens.len() < 2 || f.tokens[PAD_ID] != PAD_TOKEN || f.tokens[OOV_ID] != OOV_TOKEN {
            return Err("vocabulary must start with the pad and oov tokens".into());
        }
        let ids: HashMap<String, usize> = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != f.tokens.len() {
            return Err("duplicate tokens in vocabulary".into());
        }
        Ok(Vocab { tokens: f.tokens, ids })
    }
}

impl Vocab {
    fn from_tokens(kept: Vec<String>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        tokens.extend(kept);
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One vocabulary shared by all categorical features (a single embedding
/// table), plus the padded length fixed per feature at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab: Vocab,
    pub cap: usize,
    pub lowercase: bool,
    /// Categorical feature names in schema order.
    pub features: Vec<String>,
    pub t_max: Vec<usize>,
}

pub fn fit_tokenizer(train: &Dataset, cap: usize, lowercase: bool) -> Result<Tokenizer, EncodeError> {
    if cap < 3 {
        return Err(EncodeError::Cap(cap));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut features = Vec::new();
    let mut t_max = Vec::new();
    for (j, spec) in train.schema.features().iter().enumerate() {
        if spec.kind != FeatureKind::Categorical {
            continue;
        }
        let mut longest = 0;
        for r in &train.records {
            let toks = tokenize(r.features[j].as_text(), lowercase);
            longest = longest.max(toks.len());
            for t in toks {
                *counts.entry(t).or_default() += 1;
            }
        }
        features.push(spec.name.clone());
        // A width of at least one keeps id tensors non-degenerate.
        t_max.push(longest.max(1));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let kept = ranked.into_iter().take(cap - 2).map(|(t, _)| t).collect();
    Ok(Tokenizer { vocab: Vocab::from_tokens(kept), cap, lowercase, features, t_max })
}

impl Tokenizer {
    pub fn width(&self) -> usize {
        self.t_max.iter().copied().max().unwrap_or(1)
    }

    /// Ids for one value padded to `width`; returns (ids, mask, truncated).
    pub fn encode_value(&self, feature: usize, text: &str, width: usize) -> (Vec<usize>, Vec<bool>, bool) {
        let toks = tokenize(text, self.lowercase);
        let limit = self.t_max[feature];
        let truncated = toks.len() > limit;
        let mut ids = vec![PAD_ID; width];
        let mut mask = vec![false; width];
        for (p, t) in toks.iter().take(limit).enumerate() {
            ids[p] = self.vocab.id(t);
            mask[p] = true;
        }
        (ids, mask, truncated)
    }

    /// Bag-of-token counts over the vocabulary, pad column excluded.
    pub fn token_counts(&self, schema: &FeatureSchema, record: &ConsolidatedRecord) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab.len() - 1];
        for (j, spec) in schema.features().iter().enumerate() {
            if spec.kind == FeatureKind::Categorical {
                for t in tokenize(record.features[j].as_text(), self.lowercase) {
                    out[self.vocab.id(&t) - 1] += 1.0;
                }
            }
        }
        out
    }
}

/// Normalization and tokenization fitted together on one training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    pub normalizer: NormalizerStats,
    pub tokenizer: Tokenizer,
}

pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const VOCAB_FILE: &str = "vocab.json";

impl Transforms {
    pub fn fit(train: &Dataset, kind: NormalizerKind, cap: usize) -> Result<Self, EncodeError> {
        Ok(Transforms { normalizer: fit_normalizer(train, kind)?, tokenizer: fit_tokenizer(train, cap, true)? })
    }

    /// Writes `normalizer.json` and `vocab.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EncodeError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(NORMALIZER_FILE), serde_json::to_string_pretty(&self.normalizer)?)?;
        std::fs::write(dir.join(VOCAB_FILE), serde_json::to_string_pretty(&self.tokenizer)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EncodeError> {
        let normalizer = serde_json::from_str(&std::fs::read_to_string(dir.join(NORMALIZER_FILE))?)?;
        let tokenizer = serde_json::from_str(&std::fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        Ok(Transforms { normalizer, tokenizer })
    }
}

/// Model-ready tensors for a slice of records.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub batch: usize,
    /// Normalized numeric values [batch, n_numeric], columns laid out group
    /// by group in model order (Cpu, Other, Memory).
    pub numeric: Vec<f64>,
    /// (group, first column, column count) for each numeric group.
    pub numeric_layout: Vec<(ModelGroup, usize, usize)>,
    /// Token ids [batch, n_char, width], padded with 0.
    pub char_ids: Vec<usize>,
    pub char_mask: Vec<bool>,
    pub n_char: usize,
    pub width: usize,
    pub labels: Tensor,
    /// Per-entry label weights (1 present, 0 missing) when any are missing.
    pub label_weights: Option<Vec<f64>>,
    /// Count of values longer than their fitted token width.
    pub truncated: usize,
}

impl EncodedBatch {
    pub fn n_numeric(&self) -> usize {
        self.numeric_layout.iter().map(|l| l.2).sum()
    }

    /// The [batch, group_len] block of one numeric group, if non-empty.
    pub fn numeric_group(&self, group: ModelGroup) -> Option<Tensor> {
        let &(_, start, len) = self.numeric_layout.iter().find(|l| l.0 == group && l.2 > 0)?;
        let n = self.n_numeric();
        let data = (0..self.batch).flat_map(|b| self.numeric[b * n + start..b * n + start + len].to_vec()).collect();
        Tensor::new(vec![self.batch, len], data).ok()
    }
}

pub fn encode_batch(data: &Dataset, indices: &[usize], transforms: &Transforms) -> Result<EncodedBatch, EncodeError> {
    let schema = &data.schema;
    if indices.is_empty() {
        return Err(EncodeError::Mismatch("cannot encode an empty batch".into()));
    }
    let records: Vec<ConsolidatedRecord> = indices.iter().map(|&i| data.records[i].clone()).collect();
    let tok = &transforms.tokenizer;
    let partition = group_partition(schema);
    let categorical: Vec<usize> = partition.indices(ModelGroup::Char).to_vec();
    if categorical.len() != tok.features.len() || categorical.iter().zip(&tok.features).any(|(&j, name)| schema.features()[j].name != *name)
    {
        return Err(EncodeError::Mismatch("categorical features differ from the fitted tokenizer".into()));
    }

    // Normalized values come back in schema numeric order; regroup them.
    let normalized = transforms.normalizer.apply(schema, &records)?;
    let numeric_order: Vec<usize> =
        schema.features().iter().enumerate().filter(|(_, f)| f.kind == FeatureKind::Numeric).map(|(j, _)| j).collect();
    let position: HashMap<usize, usize> = numeric_order.iter().enumerate().map(|(p, &j)| (j, p)).collect();
    let mut layout = Vec::new();
    let mut columns = Vec::new();
    for (g, idx) in partition.numeric_groups() {
        layout.push((g, columns.len(), idx.len()));
        columns.extend(idx.iter().map(|j| position[j]));
    }
    let numeric = normalized.iter().flat_map(|row| columns.iter().map(|&c| row[c])).collect();

    let width = tok.width();
    let mut char_ids = Vec::with_capacity(records.len() * categorical.len() * width);
    let mut char_mask = Vec::with_capacity(char_ids.capacity());
    let mut truncated = 0;
    for r in &records {
        for (f, &j) in categorical.iter().enumerate() {
            let (ids, mask, cut) = tok.encode_value(f, r.features[j].as_text(), width);
            char_ids.extend(ids);
            char_mask.extend(mask);
            truncated += cut as usize;
        }
    }
    if truncated > 0 {
        log::warn!("{truncated} categorical values exceeded their fitted token width and were truncated");
    }

    let out_dim = data.suite.output_dim();
    let mut labels = Vec::with_capacity(records.len() * out_dim);
    let mut weights = Vec::with_capacity(labels.capacity());
    for r in &records {
        if r.labels.len() != out_dim {
            return Err(EncodeError::Mismatch(format!("label length {} != suite output {out_dim}", r.labels.len())));
        }
        labels.extend(&r.labels);
        match &r.label_mask {
            Some(m) => weights.extend(m.iter().map(|&b| if b { 1.0 } else { 0.0 })),
            None => weights.extend(std::iter::repeat_n(1.0, out_dim)),
        }
    }
    let label_weights = weights.contains(&0.0).then_some(weights);
    Ok(EncodedBatch {
        batch: records.len(),
        numeric,
        numeric_layout: layout,
        char_ids,
        char_mask,
        n_char: categorical.len(),
        width,
        labels: Tensor::new(vec![records.len(), out_dim], labels).map_err(|e| EncodeError::Mismatch(e.to_string()))?,
        label_weights,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FeatureSpec, SemanticGroup, SuiteSpec};

    fn text(value: &str) -> FeatureValue {
        FeatureValue::Text(value.to_string())
    }

    fn schema() -> FeatureSchema {
        let f = |name: &str, kind, group| FeatureSpec { name: name.into(), kind, group, unit: None };
        FeatureSchema::new(vec![
            f("Cores", FeatureKind::Numeric, SemanticGroup::Cpu),
            f("Freq", FeatureKind::Numeric, SemanticGroup::Cpu),
            f("TDP", FeatureKind::Numeric, SemanticGroup::Other),
            f("CL", FeatureKind::Numeric, SemanticGroup::Memory),
            f("Name", FeatureKind::Categorical, SemanticGroup::Other),
        ])
        .unwrap()
    }

    fn dataset(rows: &[(f64, f64, &str)]) -> Dataset {
        let records = rows
            .iter()
            .map(|&(a, b, name)| ConsolidatedRecord {
                features: vec![
                    FeatureValue::Number(a),
                    FeatureValue::Number(b),
                    FeatureValue::Number(5.0),
                    FeatureValue::Missing,
                    text(name),
                ],
                labels: vec![a + b],
                label_mask: None,
            })
            .collect();
        Dataset { suite: SuiteSpec::by_name("HPCG").unwrap(), schema: schema(), records }
    }

    #[test]
    fn normalizer_moments() {
        let ds = dataset(&[(2.0, 1.0, "x"), (4.0, 7.0, "y")]);
        let stats = fit_normalizer(&ds, NormalizerKind::Zscore).unwrap();
        assert_eq!((stats.features[0].mean, stats.features[0].std), (3.0, 1.0));
        assert!(stats.features[2].constant);
        assert_eq!(stats.features[2].std, 1.0);
        let rows = stats.apply(&ds.schema, &ds.records).unwrap();
        assert_eq!(rows[0], vec![-1.0, -1.0, 0.0, 0.0]);
        let back = stats.inverse(&rows);
        assert!((back[1][1] - 7.0).abs() < 1e-12);
        assert!(matches!(fit_normalizer(&ds.subset(&[]), NormalizerKind::Zscore), Err(EncodeError::Empty)));
    }

    #[test]
    fn minmax_range() {
        let ds = dataset(&[(2.0, 1.0, "x"), (4.0, 7.0, "y"), (3.0, 4.0, "z")]);
        let stats = fit_normalizer(&ds, NormalizerKind::Minmax).unwrap();
        let rows = stats.apply(&ds.schema, &ds.records).unwrap();
        assert_eq!(rows[2][0], 0.5);
        assert_eq!(rows[1][1], 1.0);
    }

    #[test]
    fn tokenizer_split_and_cap() {
        assert_eq!(tokenize("SPR-XCC", true), vec!["spr", "xcc"]);
        let ds = dataset(&[(1.0, 1.0, "SPR-XCC"), (2.0, 2.0, "SPR-MCC")]);
        let tok = fit_tokenizer(&ds, 100, true).unwrap();
        assert_eq!(tok.t_max, vec![2]);
        assert_eq!(tok.vocab.tokens(), &["<pad>", "<oov>", "spr", "mcc", "xcc"]);

        let many: Vec<String> = (0..120).map(|i| format!("t{i:03}")).collect();
        let joined = many.join(" ");
        let ds = dataset(&[(1.0, 1.0, &joined)]);
        let tok = fit_tokenizer(&ds, 100, true).unwrap();
        assert_eq!(tok.vocab.len(), 100);
        // All counts tie, so the lexicographically last tokens fall out.
        assert_eq!(tok.vocab.id("t119"), OOV_ID);
        assert_eq!(tok.vocab.id("t000"), 2);
    }

    #[test]
    fn encode_pads_and_truncates() {
        let ds = dataset(&[(1.0, 2.0, "a b"), (3.0, 4.0, "")]);
        let tr = Transforms::fit(&ds, NormalizerKind::Zscore, 100).unwrap();
        let b = encode_batch(&ds, &[0, 1], &tr).unwrap();
        assert_eq!(b.width, 2);
        assert_eq!(b.char_mask, vec![true, true, false, false]);
        assert_eq!(b.char_ids[2..], [PAD_ID, PAD_ID]);
        assert_eq!(b.numeric_group(ModelGroup::Cpu).unwrap().shape(), &[2, 2]);
        assert_eq!(b.numeric_group(ModelGroup::Memory).unwrap().data(), &[0.0, 0.0]);

        let longer = dataset(&[(1.0, 2.0, "a b c")]);
        let b = encode_batch(&longer, &[0], &tr).unwrap();
        assert_eq!(b.truncated, 1);
        assert_eq!(b.char_mask, vec![true, true]);
    }

    #[test]
    fn transforms_round_trip() {
        let ds = dataset(&[(1.0, 2.0, "SPR-XCC v2"), (3.0, 5.0, "SPR")]);
        let tr = Transforms::fit(&ds, NormalizerKind::Zscore, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tr.save(dir.path()).unwrap();
        assert_eq!(Transforms::load(dir.path()).unwrap(), tr);
    }
}
