//! Splits, k-fold cross-validation and the optimization loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{encode_batch, EncodeError, NormalizerKind, Transforms, DEFAULT_VOCAB_CAP};
use crate::evaluation::{aggregate_cv, compute_metrics, EvalError, EvalReport, Percentile};
use crate::ingest::Dataset;
use crate::model::{init_model, AblationArm, Mode, ModelError, Ncpp, NcppConfig};
use crate::tensor::{AdamConfig, AdamState, ExponentialDecay, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (global step {step})")]
    NonFinite { epoch: usize, batch: usize, step: u64, loss: f64 },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self, TrainError> {
        let spec = SplitSpec { train, val, test, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// 60/20/20.
    pub fn standard(seed: u64) -> Self {
        SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed }
    }

    /// 64/16/20, the proportions behind the reference split counts
    /// (816/204/254 of 1274).
    pub fn reference_counts(seed: u64) -> Self {
        SplitSpec { train: 0.64, val: 0.16, test: 0.2, seed }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(TrainError::Split(format!("fractions must be positive, got {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TrainError::Split(format!("fractions must sum to 1, got {f:?}")));
        }
        Ok(())
    }

    /// (train, val, test) sizes: test is `floor(n * test)`, validation is
    /// the floor of its share of the rest, and training takes the
    /// remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let n_test = (n as f64 * self.test + 1e-9).floor() as usize;
        let rest = n - n_test;
        let n_val = (rest as f64 * self.val / (self.train + self.val) + 1e-9).floor() as usize;
        (rest - n_val, n_val, n_test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices, TrainError> {
    spec.validate()?;
    if n == 0 {
        return Err(TrainError::Split("dataset is empty".into()));
    }
    let (a, b, c) = spec.sizes(n);
    if a == 0 || b == 0 || c == 0 {
        return Err(TrainError::Split(format!("{n} records give an empty partition ({a}/{b}/{c})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok(SplitIndices { train: order[..a].to_vec(), val: order[a..a + b].to_vec(), test: order[a + b..].to_vec() })
}

pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), TrainError> {
    let s = split_indices(dataset.len(), spec)?;
    Ok((dataset.subset(&s.train), dataset.subset(&s.val), dataset.subset(&s.test)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded k-fold partition of `0..n`. Fold sizes differ by at most one
/// and every index validates exactly once.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, TrainError> {
    if k < 2 {
        return Err(TrainError::Split(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(TrainError::Split(format!("{n} records cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = n / k + usize::from(f < n % k);
        let val = order[start..start + len].to_vec();
        let train = order[..start].iter().chain(&order[start + len..]).copied().collect();
        folds.push(Fold { train, val });
        start += len;
    }
    Ok(folds)
}

/// How labels are rescaled for the loss. Models returned by [`train`]
/// always predict in raw units: the scaling is folded into the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScaling {
    /// Raw scores.
    None,
    /// Per-benchmark z-score with training mean and population std.
    #[default]
    Standardize,
}

/// Per-column affine label map `y_scaled = (y - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

fn column_present(data: &Dataset, i: usize, j: usize) -> bool {
    data.records[i].label_mask.as_ref().is_none_or(|m| m[j])
}

impl LabelScale {
    pub fn fit(train: &Dataset, kind: LabelScaling) -> LabelScale {
        let out = train.suite.output_dim();
        let mut shift = vec![0.0; out];
        let mut scale = vec![1.0; out];
        if kind == LabelScaling::Standardize {
            for j in 0..out {
                let v: Vec<f64> = (0..train.len()).filter(|&i| column_present(train, i, j)).map(|i| train.records[i].labels[j]).collect();
                if v.is_empty() {
                    continue;
                }
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / v.len() as f64;
                shift[j] = mean;
                scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
            }
        }
        LabelScale { shift, scale }
    }

    fn is_identity(&self) -> bool {
        self.shift.iter().all(|&s| s == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }

    fn apply(&self, labels: &Tensor) -> Tensor {
        let out = self.shift.len();
        let mut t = labels.clone();
        for (i, y) in t.data_mut().iter_mut().enumerate() {
            let j = i % out;
            *y = (*y - self.shift[j]) / self.scale[j];
        }
        t
    }

    /// Rewrites the linear head so that it emits raw-unit predictions.
    fn fold_into(&self, model: &mut Ncpp) -> Result<(), TrainError> {
        if self.is_identity() {
            return Ok(());
        }
        let out = self.shift.len();
        let w = model.params.get_mut("head.weight")?;
        for (i, v) in w.value.data_mut().iter_mut().enumerate() {
            *v *= self.scale[i % out];
        }
        let b = model.params.get_mut("head.bias")?;
        for (j, v) in b.value.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale[j] + self.shift[j];
        }
        Ok(())
    }
}

/// Everything a training run needs besides data. Model hyperparameters
/// are flattened in, so `H`, `L` and `delta` sit at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub suite: String,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub ablation: AblationArm,
    pub normalizer: NormalizerKind,
    pub vocab_cap: usize,
    pub label_scaling: LabelScaling,
    #[serde(flatten)]
    pub model: NcppConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            suite: "SPECrate2017_fp_base".into(),
            fractions: [0.6, 0.2, 0.2],
            k: 5,
            epochs: 1000,
            batch_size: 64,
            lr_initial: 0.01,
            decay_rate: 0.96,
            decay_steps: 1000,
            ablation: AblationArm::Full,
            normalizer: NormalizerKind::Zscore,
            vocab_cap: DEFAULT_VOCAB_CAP,
            label_scaling: LabelScaling::Standardize,
            model: NcppConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_initial > 0.0) || !(self.decay_rate > 0.0) || self.decay_steps == 0 {
            return Err(TrainError::Config("learning-rate schedule must be positive".into()));
        }
        self.split_spec().validate()?;
        let mut probe = self.model.clone();
        probe.output_dim = probe.output_dim.max(1);
        probe.validate()?;
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { train: self.fractions[0], val: self.fractions[1], test: self.fractions[2], seed: self.seed() }
    }

    pub fn schedule(&self) -> ExponentialDecay {
        ExponentialDecay { initial: self.lr_initial, decay_rate: self.decay_rate, decay_steps: self.decay_steps }
    }

    /// The network config for a given label width and vocabulary.
    pub fn model_config(&self, output_dim: usize, vocab_size: usize) -> NcppConfig {
        let mut cfg = self.ablation.apply(&self.model);
        cfg.output_dim = output_dim;
        cfg.vocab_size = vocab_size;
        cfg
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        let mut c = self.clone();
        c.model.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when there is no validation split.
    pub val_loss: Option<f64>,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn train_loss(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// Equal in everything except wall time.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.len() == other.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.map(f64::to_bits) == b.val_loss.map(f64::to_bits)
                    && a.lr.to_bits() == b.lr.to_bits()
                    && a.steps == b.steps
            })
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,steps,wall_time\n");
        for e in &self.epochs {
            let val = e.val_loss.map_or(String::new(), |v| format!("{v}"));
            s.push_str(&format!("{},{},{},{},{},{:.6}\n", e.epoch, e.train_loss, val, e.lr, e.steps, e.wall_time));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `best.ckpt` is written.
    pub checkpoint_dir: Option<PathBuf>,
    /// Log progress every this many epochs (0 = never).
    pub log_every: usize,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Ncpp,
    /// Parameters of the epoch with the lowest validation loss (the final
    /// ones when there is no validation split).
    pub best: Ncpp,
    pub best_epoch: usize,
    pub history: TrainHistory,
    pub label_scale: LabelScale,
}

fn batch_entries(weights: Option<&[f64]>, len: usize) -> f64 {
    weights.map_or(len as f64, |w| w.iter().sum())
}

/// Mean Huber loss over `data` in inference mode, in scaled label units.
fn dataset_loss(model: &Ncpp, data: &Dataset, transforms: &Transforms, scale: &LabelScale, batch_size: usize) -> Result<f64, TrainError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut total, mut count) = (0.0, 0.0);
    for chunk in idx.chunks(batch_size) {
        let batch = encode_batch(data, chunk, transforms)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Mode::Infer, false)?;
        let labels = scale.apply(&batch.labels);
        let loss = tape.huber_loss(out.pred, &labels, model.config.huber_delta, batch.label_weights.as_deref())?;
        let n = batch_entries(batch.label_weights.as_deref(), labels.len());
        total += tape.value(loss).item() * n;
        count += n;
    }
    Ok(if count > 0.0 { total / count } else { 0.0 })
}

/// Mini-batch training with Adam and the exponential schedule. Batches
/// are reshuffled every epoch from one seeded stream; the last partial
/// batch is kept. Identical inputs give bitwise-identical parameters and
/// loss history.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    transforms: &Transforms,
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let val_set = val_set.filter(|v| !v.is_empty());
    if let Some(v) = val_set {
        if v.suite != train_set.suite {
            return Err(TrainError::Config(format!("validation suite '{}' differs from '{}'", v.suite.name, train_set.suite.name)));
        }
    }
    let out_dim = train_set.suite.output_dim();
    let scale = LabelScale::fit(train_set, config.label_scaling);
    let mcfg = config.model_config(out_dim, transforms.tokenizer.vocab.len());
    let mut model = init_model(&mcfg, &train_set.schema)?;

    // The head starts as a constant map to the mean (scaled) training
    // label per benchmark: zero weights, bias at the mean.
    model.params.get_mut("head.weight")?.value.data_mut().fill(0.0);
    let mut bias = vec![0.0; out_dim];
    for (j, b) in bias.iter_mut().enumerate() {
        let v: Vec<f64> = (0..train_set.len())
            .filter(|&i| column_present(train_set, i, j))
            .map(|i| (train_set.records[i].labels[j] - scale.shift[j]) / scale.scale[j])
            .collect();
        if !v.is_empty() {
            *b = v.iter().sum::<f64>() / v.len() as f64;
        }
    }
    model.set_head_bias(&bias)?;

    let mut adam = AdamState::new(&model.params, AdamConfig::default());
    let schedule = config.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(mcfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step: u64 = 0;
    let started = Instant::now();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Ncpp)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0.0);
        let mut lr = schedule.lr(step);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = encode_batch(train_set, chunk, transforms)?;
            let labels = scale.apply(&batch.labels);
            model.params.zero_grad();
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch, Mode::Train, false)?;
            let loss = tape.huber_loss(out.pred, &labels, mcfg.huber_delta, batch.label_weights.as_deref())?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi, step, loss: value });
            }
            tape.backward(loss)?;
            for (path, var) in &out.bound {
                model.params.accumulate_grad(path, &tape, *var)?;
            }
            lr = schedule.lr(step);
            adam.step(&mut model.params, lr)?;
            model.apply_bn_updates(&out.bn_updates)?;
            step += 1;
            let n = batch_entries(batch.label_weights.as_deref(), labels.len());
            total += value * n;
            count += n;
        }
        let train_loss = total / count.max(f64::MIN_POSITIVE);
        let val_loss = match val_set {
            Some(v) => Some(dataset_loss(&model, v, transforms, &scale, config.batch_size)?),
            None => None,
        };
        let record = EpochRecord { epoch, train_loss, val_loss, lr, steps: step, wall_time: started.elapsed().as_secs_f64() };
        if options.log_every > 0 && (epoch % options.log_every == 0 || epoch + 1 == config.epochs) {
            log::info!("epoch {epoch}: train {train_loss:.6}{} lr {lr:.6}", val_loss.map_or(String::new(), |v| format!(" val {v:.6}")));
        }
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, model.clone()));
            }
        }
        history.epochs.push(record);
    }

    let (best_epoch, mut best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs - 1, model.clone()),
    };
    for m in [&mut model, &mut best_model] {
        m.params.zero_grad();
        scale.fold_into(m)?;
    }
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        let extra = serde_json::json!({ "epoch": best_epoch, "val_loss": history.epochs[best_epoch].val_loss });
        best_model.save(&dir.join(BEST_CHECKPOINT), extra)?;
    }
    Ok(TrainOutcome { model, best: best_model, best_epoch, history, label_scale: scale })
}

/// Inference-mode predictions for every record, [N, output_dim].
pub fn predict_dataset(model: &Ncpp, data: &Dataset, transforms: &Transforms, batch_size: usize) -> Result<Tensor, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("nothing to predict".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut values = Vec::with_capacity(data.len() * model.config.output_dim);
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = encode_batch(data, chunk, transforms)?;
        values.extend_from_slice(model.predict(&batch)?.data());
    }
    Ok(Tensor::new(vec![data.len(), model.config.output_dim], values)?)
}

fn truth_and_weights(data: &Dataset) -> (Tensor, Option<Vec<f64>>) {
    let out = data.suite.output_dim();
    let truth =
        Tensor::new(vec![data.len(), out], data.records.iter().flat_map(|r| r.labels.clone()).collect()).expect("non-empty dataset");
    let weights = data.records.iter().any(|r| r.label_mask.is_some()).then(|| {
        data.records
            .iter()
            .flat_map(|r| match &r.label_mask {
                Some(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
                None => vec![1.0; out],
            })
            .collect()
    });
    (truth, weights)
}

/// Metrics of raw-unit predictions against `data`'s labels.
pub fn report_for(pred: &Tensor, data: &Dataset) -> Result<EvalReport, TrainError> {
    let (truth, weights) = truth_and_weights(data);
    Ok(compute_metrics(pred, &truth, weights.as_deref(), &data.suite.name, &data.suite.benchmarks, Percentile::NearestRank)?)
}

pub fn evaluate_model(model: &Ncpp, data: &Dataset, transforms: &Transforms, batch_size: usize) -> Result<EvalReport, TrainError> {
    report_for(&predict_dataset(model, data, transforms, batch_size)?, data)
}

/// Result of split, fit transforms, train, and test evaluation.
pub struct RunOutcome {
    pub split: SplitIndices,
    pub transforms: Transforms,
    pub outcome: TrainOutcome,
    /// Best-validation model on the test split.
    pub test_report: EvalReport,
}

/// The fixed-split pipeline: transforms are fitted on the training part
/// only.
pub fn run_fixed_split(config: &TrainConfig, dataset: &Dataset, options: &TrainOptions) -> Result<RunOutcome, TrainError> {
    config.validate()?;
    let split = split_indices(dataset.len(), &config.split_spec())?;
    let (tr, va, te) = (dataset.subset(&split.train), dataset.subset(&split.val), dataset.subset(&split.test));
    let transforms = Transforms::fit(&tr, config.normalizer, config.vocab_cap)?;
    let outcome = train(config, &tr, Some(&va), &transforms, options)?;
    let test_report = evaluate_model(&outcome.best, &te, &transforms, config.batch_size)?;
    Ok(RunOutcome { split, transforms, outcome, test_report })
}

pub struct CvOutcome {
    pub folds: Vec<EvalReport>,
    pub aggregate: EvalReport,
    /// Test split held out before folding.
    pub test: Vec<usize>,
}

/// k-fold cross-validation over the pooled train and validation parts of
/// the fixed split; the test part is never touched. Fold `f` trains with
/// seed `seed + f` and fits its own transforms.
pub fn cross_validate(config: &TrainConfig, dataset: &Dataset, options: &TrainOptions) -> Result<CvOutcome, TrainError> {
    config.validate()?;
    let split = split_indices(dataset.len(), &config.split_spec())?;
    let pool: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
    let folds = kfold(pool.len(), config.k, config.seed())?;
    let mut reports = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        let tr = dataset.subset(&fold.train.iter().map(|&i| pool[i]).collect::<Vec<_>>());
        let va = dataset.subset(&fold.val.iter().map(|&i| pool[i]).collect::<Vec<_>>());
        let transforms = Transforms::fit(&tr, config.normalizer, config.vocab_cap)?;
        let cfg = config.with_seed(config.seed().wrapping_add(f as u64));
        let fold_options =
            TrainOptions { checkpoint_dir: options.checkpoint_dir.as_ref().map(|d| d.join(format!("fold{f}"))), ..options.clone() };
        let outcome = train(&cfg, &tr, Some(&va), &transforms, &fold_options)?;
        reports.push(evaluate_model(&outcome.best, &va, &transforms, config.batch_size)?);
        log::info!("fold {f}: MAE {:.4} MAPE {:.4}", reports[f].overall.mae, reports[f].overall.mape);
    }
    let aggregate = aggregate_cv(&reports)?;
    Ok(CvOutcome { folds: reports, aggregate, test: split.test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub description: String,
    pub report: EvalReport,
}

/// Runs every ablation arm on the same split and seed.
pub fn run_ablation_suite(config: &TrainConfig, dataset: &Dataset, options: &TrainOptions) -> Result<Vec<AblationRow>, TrainError> {
    AblationArm::ALL
        .iter()
        .map(|&arm| {
            let cfg = TrainConfig { ablation: arm, ..config.clone() };
            let arm_options =
                TrainOptions { checkpoint_dir: options.checkpoint_dir.as_ref().map(|d| d.join(arm.name())), ..options.clone() };
            let run = run_fixed_split(&cfg, dataset, &arm_options)?;
            Ok(AblationRow { arm, description: arm.description().to_string(), report: run.test_report })
        })
        .collect()
}

/// Comparison table in arm order: `arm,description,mae,mse,mape`.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("arm,description,mae,mse,mape\n");
    for r in rows {
        let m = &r.report.overall;
        s.push_str(&format!("{},\"{}\",{},{},{}\n", r.arm.name(), r.description, m.mae, m.mse, m.mape));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::FeatureSchema;
    use crate::synth::{generate, Family, SynthConfig};
    use std::collections::HashSet;

    #[test]
    fn split_sizes() {
        assert_eq!(SplitSpec::standard(1).sizes(10), (6, 2, 2));
        assert_eq!(SplitSpec::reference_counts(1).sizes(1274), (816, 204, 254));
        let s = split_indices(10, &SplitSpec::standard(3)).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, split_indices(10, &SplitSpec::standard(3)).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(SplitSpec::new(0.5, 0.2, 0.2, 0).is_err());
        assert!(SplitSpec::new(0.8, 0.0, 0.2, 0).is_err());
        assert!(split_indices(0, &SplitSpec::standard(0)).is_err());
        assert!(split_indices(3, &SplitSpec::standard(0)).is_err());
    }

    #[test]
    fn folds_partition_indices() {
        let folds = kfold(10, 5, 9).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = HashSet::new();
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len()), (8, 2));
            for &i in &f.val {
                assert!(seen.insert(i));
                assert!(!f.train.contains(&i));
            }
        }
        assert_eq!(seen.len(), 10);
        let uneven = kfold(13, 5, 1).unwrap();
        let sizes: Vec<usize> = uneven.iter().map(|f| f.val.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2]);
        assert_eq!(kfold(13, 5, 1).unwrap(), uneven);
        assert!(kfold(10, 1, 0).is_err());
        assert!(kfold(3, 5, 0).is_err());
    }

    #[test]
    fn config_json_uses_short_names() {
        let cfg = TrainConfig::from_json(r#"{"H": 4, "L": 2, "delta": 10.0, "seed": 3, "epochs": 7}"#).unwrap();
        assert_eq!((cfg.model.heads, cfg.model.layers, cfg.model.huber_delta, cfg.seed(), cfg.epochs), (4, 2, 10.0, 3, 7));
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_json(r#"{"fractions": [0.5, 0.2, 0.2]}"#).is_err());
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig { epochs, ..TrainConfig::default() };
        cfg.model.d_model = 8;
        cfg.model.embed_dim = 2;
        cfg
    }

    fn tiny_data(n: usize) -> Dataset {
        let s = SynthConfig { n_records: n, suite: "Stream".into(), family: Family::Linear, ..SynthConfig::default() };
        generate(&s, &FeatureSchema::default_schema()).unwrap().dataset
    }

    #[test]
    fn one_epoch_step_count_and_schedule() {
        let data = tiny_data(130);
        let transforms = Transforms::fit(&data, NormalizerKind::Zscore, 100).unwrap();
        let cfg = TrainConfig { decay_steps: 2, ..tiny_config(2) };
        let out = train(&cfg, &data, None, &transforms, &TrainOptions::default()).unwrap();
        assert_eq!(out.history.epochs[0].steps, 3);
        assert_eq!(out.history.epochs[1].steps, 6);
        for e in &out.history.epochs {
            assert_eq!(e.lr.to_bits(), cfg.schedule().lr(e.steps - 1).to_bits());
        }
    }

    #[test]
    fn constant_labels_start_at_zero_loss() {
        let mut data = tiny_data(40);
        for r in &mut data.records {
            r.labels = vec![100.0, 200.0, 300.0, 400.0];
        }
        let transforms = Transforms::fit(&data, NormalizerKind::Zscore, 100).unwrap();
        for scaling in [LabelScaling::None, LabelScaling::Standardize] {
            let cfg = TrainConfig { label_scaling: scaling, ..tiny_config(1) };
            let out = train(&cfg, &data, None, &transforms, &TrainOptions::default()).unwrap();
            assert!(out.history.epochs[0].train_loss < 1e-3, "{scaling:?}: {:?}", out.history.epochs[0]);
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let data = tiny_data(60);
        let (tr, va, _) = split_dataset(&data, &SplitSpec::standard(2)).unwrap();
        let transforms = Transforms::fit(&tr, NormalizerKind::Zscore, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), log_every: 0 };
        let a = train(&tiny_config(4), &tr, Some(&va), &transforms, &opts).unwrap();
        let b = train(&tiny_config(4), &tr, Some(&va), &transforms, &TrainOptions::default()).unwrap();
        assert!(a.history.same_trajectory(&b.history), "{:?}\n{:?}", a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
        let best_val = a.history.epochs.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history.epochs[a.best_epoch].val_loss, Some(best_val));
        let (loaded, _) = Ncpp::load(&dir.path().join(BEST_CHECKPOINT), &data.schema).unwrap();
        assert_eq!(loaded.params, a.best.params);
        let csv = a.history.to_csv_string();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn label_scale_folds_into_raw_predictions() {
        let data = tiny_data(30);
        let transforms = Transforms::fit(&data, NormalizerKind::Zscore, 100).unwrap();
        let out = train(&tiny_config(1), &data, None, &transforms, &TrainOptions::default()).unwrap();
        let pred = predict_dataset(&out.model, &data, &transforms, 64).unwrap();
        // Predictions sit near the label scale, not the unit scale.
        let mean_pred = pred.data().iter().sum::<f64>() / pred.len() as f64;
        let mean_label = data.labels().iter().flatten().sum::<f64>() / pred.len() as f64;
        assert!((mean_pred - mean_label).abs() < 0.5 * mean_label, "{mean_pred} vs {mean_label}");
    }

    #[test]
    fn nan_labels_abort_naming_the_batch() {
        let mut data = tiny_data(70);
        let transforms = Transforms::fit(&data, NormalizerKind::Zscore, 100).unwrap();
        for r in &mut data.records {
            r.labels[0] = f64::NAN;
        }
        let cfg = TrainConfig { label_scaling: LabelScaling::None, ..tiny_config(1) };
        match train(&cfg, &data, None, &transforms, &TrainOptions::default()) {
            Err(TrainError::NonFinite { epoch: 0, batch: 0, .. }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected abort"),
        }
    }

    #[test]
    fn ablation_table_rows() {
        let rows: Vec<AblationRow> = AblationArm::ALL
            .iter()
            .map(|&arm| AblationRow {
                arm,
                description: arm.description().into(),
                report: EvalReport {
                    suite: "s".into(),
                    per_benchmark: vec![],
                    overall: crate::evaluation::Metrics {
                        mae: 1.0,
                        mse: 1.0,
                        mape: 0.1,
                        p95_ae: 1.0,
                        p95_se: 1.0,
                        p95_ape: 0.1,
                        count: 1,
                        mape_excluded: 0,
                    },
                    folds: None,
                },
            })
            .collect();
        let t = ablation_table(&rows);
        assert_eq!(t.lines().count(), 7);
        assert!(t.lines().nth(1).unwrap().starts_with("full,"));
    }
}
