//! Planted synthetic datasets shaped like the real benchmark tables.
//!
//! Feature ranges below are synthetic. They are loosely plausible for
//! recent two-socket servers but are not measured statistics of any
//! product line.
//!
//! Every numeric feature is mapped to `z = 2 (x - lo) / (hi - lo) - 1`.
//! The linear family is `y_j = B_j (1 + 0.3 l_j)` with
//! `l_j = sum_k w_jk z_k + sum_t c_jt n_t` (`n_t` the count of token `t`
//! across categorical features), so it is affine in the baseline design
//! matrix. The nonlinear family is `y_j = B_j exp(0.3 l_j + alpha v_j)`
//! where `v_j` mixes pairwise products, a hinge and a token-gated term;
//! `alpha` is calibrated so that the best linear fit misses by a set MAPE.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::tokenize;
use crate::ingest::{ConsolidatedRecord, Dataset, DimmLookup, DimmSpec, FeatureValue, RawRecord, DIMM_PART_COLUMN};
use crate::schema::{FeatureKind, FeatureSchema, ModelGroup, SchemaError, SuiteSpec};

/// Spread of the linear part around the per-output base level.
pub const LINEAR_SPREAD: f64 = 0.3;
pub const CALIBRATION_SAMPLES: usize = 2000;
pub const DEFAULT_TARGET_MAPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("feature vector has {got} values, truth expects {expected}")]
    Width { expected: usize, got: usize },
    #[error("feature '{0}' has the wrong kind for this truth function")]
    Kind(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_records: usize,
    pub suite: String,
    /// Standard deviation of the log-scale label noise.
    pub noise: f64,
    pub family: Family,
    pub seed: u64,
    /// Linear-fit MAPE the nonlinear family is calibrated to.
    pub target_linear_mape: f64,
    /// Probability that a categorical cell is left empty.
    pub empty_char_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 256,
            suite: "SPECrate2017_fp_base".into(),
            noise: 0.0,
            family: Family::Linear,
            seed: 42,
            target_linear_mape: DEFAULT_TARGET_MAPE,
            empty_char_rate: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<SuiteSpec, SynthError> {
        if self.n_records == 0 {
            return Err(SynthError::Config("n_records must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(SynthError::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.target_linear_mape) {
            return Err(SynthError::Config("target_linear_mape must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_char_rate) {
            return Err(SynthError::Config("empty_char_rate must lie in [0, 1]".into()));
        }
        Ok(SuiteSpec::by_name(&self.suite)?)
    }
}

/// How one numeric feature is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Draw {
    Uniform { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Choice(Vec<f64>),
}

impl Draw {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Draw::Uniform { lo, hi } => (*lo, *hi),
            Draw::Integer { lo, hi } => (*lo as f64, *hi as f64),
            Draw::Choice(v) => (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Draw::Uniform { lo, hi } => {
                // Rounded to 4 decimals so CSV text stays short.
                (rng.random_range(*lo..=*hi) * 1e4).round() / 1e4
            }
            Draw::Integer { lo, hi } => rng.random_range(*lo..=*hi) as f64,
            Draw::Choice(v) => v[rng.random_range(0..v.len())],
        }
    }
}

fn uni(lo: f64, hi: f64) -> Draw {
    Draw::Uniform { lo, hi }
}

fn int(lo: i64, hi: i64) -> Draw {
    Draw::Integer { lo, hi }
}

fn choice(v: &[f64]) -> Draw {
    Draw::Choice(v.to_vec())
}

/// Synthetic draw for a default-schema numeric feature; unknown names
/// fall back to U(0, 1).
pub fn numeric_range(name: &str) -> Draw {
    match name {
        "DIMM_rank" => choice(&[1.0, 2.0, 4.0]),
        "Density" => choice(&[16.0, 24.0, 32.0]),
        "DIMM_Num" => choice(&[8.0, 12.0, 16.0, 24.0, 32.0]),
        "DIMM_Total" => choice(&[256.0, 512.0, 1024.0, 2048.0]),
        "DIMM_Freq" => choice(&[4400.0, 4800.0, 5600.0]),
        "Organization" => choice(&[4.0, 8.0]),
        "CL" => choice(&[40.0, 42.0, 46.0]),
        "Core_per_Socket" => int(8, 60),
        "Sockets" => choice(&[1.0, 2.0]),
        "Threads_per_Core" => choice(&[1.0, 2.0]),
        "CPUs" => int(16, 240),
        "Base_Freq" => uni(1.8, 3.6),
        "Max_Turbo_Freq" => uni(3.0, 4.2),
        "All_Core_Turbo_Freq" => uni(2.5, 3.8),
        "AVX2_P1Freq" => uni(1.6, 3.0),
        "AVX2_TurboFreq" => uni(2.6, 3.8),
        "AVX3_P1Freq" => uni(1.4, 2.8),
        "AVX3_TurboFreq" => uni(2.4, 3.6),
        "TMUL_P1Freq" => uni(1.2, 2.4),
        "TMUL_TurboFreq" => uni(2.0, 3.2),
        "Uncore_Freq" => uni(1.6, 2.5),
        "L1d_Cache" => choice(&[32.0, 48.0]),
        "L1i_Cache" => choice(&[32.0, 64.0]),
        "L2_Cache" => choice(&[1.25, 2.0]),
        "L3_Cache" => int(16, 112),
        "NUMA_Nodes" => choice(&[1.0, 2.0, 4.0, 8.0]),
        "UPI_Links" => choice(&[2.0, 3.0, 4.0]),
        "TDP" => int(150, 350),
        "Power_freq" => uni(1.5, 3.0),
        _ => uni(0.0, 1.0),
    }
}

/// Synthetic value pool for a default-schema categorical feature.
pub fn token_pool(name: &str) -> Vec<String> {
    let pool: &[&str] = match name {
        "Preset" => &["default", "performance", "power save", "latency tuned"],
        "OS" => &["CentOS Stream 8", "Ubuntu 22.04", "RHEL 9.2", "SLES 15 SP4"],
        "Microcode" => &["0x2b000190", "0x2b0004b1", "0x2b000461"],
        "CPU_Stepping" => &["E3", "E5", "S3"],
        "CPU_Family" => &["Xeon Platinum", "Xeon Gold", "Xeon Silver"],
        "Tool" => &["cpu2017 1.1.9", "cpu2017 1.1.8", "mlc 3.10"],
        _ => return ["alpha", "beta", "gamma"].iter().map(|v| format!("{name} {v}")).collect(),
    };
    pool.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFeature {
    pub name: String,
    pub kind: FeatureKind,
    /// Numeric features only: scaling bounds for `z`.
    pub lo: f64,
    pub hi: f64,
}

/// One nonlinear component; `coef` holds one weight per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Term {
    /// `z_a * z_b` (feature indices in schema order).
    Product { a: usize, b: usize, coef: Vec<f64> },
    /// `max(0, z_k - knot)`.
    Hinge { k: usize, knot: f64, coef: Vec<f64> },
    /// `z_k` when `token` occurs in any categorical value, else 0.
    TokenGate { token: String, k: usize, coef: Vec<f64> },
}

/// Everything needed to replay noiseless labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFunction {
    pub family: Family,
    pub suite: String,
    pub features: Vec<TruthFeature>,
    /// Per-output base level B_j.
    pub base: Vec<f64>,
    /// [out][n_features]; zero on categorical positions.
    pub weights: Vec<Vec<f64>>,
    /// Per-output weight of each token count.
    pub token_weights: Vec<BTreeMap<String, f64>>,
    pub terms: Vec<Term>,
    pub alpha: f64,
    pub lowercase: bool,
}

impl TruthFunction {
    pub fn to_json(&self) -> Result<String, SynthError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn output_dim(&self) -> usize {
        self.base.len()
    }

    fn z(&self, features: &[FeatureValue]) -> Result<(Vec<f64>, BTreeMap<String, f64>), SynthError> {
        if features.len() != self.features.len() {
            return Err(SynthError::Width { expected: self.features.len(), got: features.len() });
        }
        let mut z = vec![0.0; features.len()];
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for (k, (f, v)) in self.features.iter().zip(features).enumerate() {
            match (f.kind, v) {
                (FeatureKind::Numeric, FeatureValue::Number(x)) => z[k] = 2.0 * (x - f.lo) / (f.hi - f.lo) - 1.0,
                (FeatureKind::Numeric, FeatureValue::Missing) => {}
                (FeatureKind::Categorical, FeatureValue::Text(s)) => {
                    for t in tokenize(s, self.lowercase) {
                        *counts.entry(t).or_default() += 1.0;
                    }
                }
                (FeatureKind::Categorical, FeatureValue::Missing) => {}
                _ => return Err(SynthError::Kind(f.name.clone())),
            }
        }
        Ok((z, counts))
    }

    /// The linear score `l_j` and nonlinear score `v_j` for each output.
    pub fn scores(&self, features: &[FeatureValue]) -> Result<(Vec<f64>, Vec<f64>), SynthError> {
        let (z, counts) = self.z(features)?;
        let out = self.output_dim();
        let mut lin = vec![0.0; out];
        let mut non = vec![0.0; out];
        for j in 0..out {
            lin[j] = self.weights[j].iter().zip(&z).map(|(w, z)| w * z).sum::<f64>()
                + counts.iter().map(|(t, n)| self.token_weights[j].get(t).copied().unwrap_or(0.0) * n).sum::<f64>();
        }
        for term in &self.terms {
            let (value, coef) = match term {
                Term::Product { a, b, coef } => (z[*a] * z[*b], coef),
                Term::Hinge { k, knot, coef } => ((z[*k] - knot).max(0.0), coef),
                Term::TokenGate { token, k, coef } => (if counts.contains_key(token) { z[*k] } else { 0.0 }, coef),
            };
            for j in 0..out {
                non[j] += coef[j] * value;
            }
        }
        Ok((lin, non))
    }

    fn label_from_scores(&self, lin: &[f64], non: &[f64], alpha: f64) -> Vec<f64> {
        (0..self.output_dim())
            .map(|j| match self.family {
                Family::Linear => self.base[j] * (1.0 + LINEAR_SPREAD * lin[j]),
                Family::Nonlinear => self.base[j] * (LINEAR_SPREAD * lin[j] + alpha * non[j]).exp(),
            })
            .collect()
    }
}

/// Exact noiseless label vector for one record (values in schema order).
pub fn oracle_label(features: &[FeatureValue], truth: &TruthFunction) -> Result<Vec<f64>, SynthError> {
    let (lin, non) = truth.scores(features)?;
    Ok(truth.label_from_scores(&lin, &non, truth.alpha))
}

/// Generator self-check, emitted next to every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub family: Family,
    pub alpha: f64,
    pub target_linear_mape: f64,
    /// Least-squares fit on a fresh noiseless calibration sample.
    pub calibration_linear_mape: f64,
    /// Least-squares fit on the generated records themselves.
    pub dataset_linear_mape: f64,
    pub n_records: usize,
    pub label_min: f64,
    pub label_max: f64,
    /// Every numeric feature mean lies inside its declared range.
    pub feature_means_in_range: bool,
}

/// A generated dataset with its hidden truth.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub truth: TruthFunction,
    pub calibration: CalibrationReport,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_features(
    schema: &FeatureSchema,
    draws: &[Option<Draw>],
    pools: &[Vec<String>],
    empty_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<FeatureValue> {
    schema
        .features()
        .iter()
        .enumerate()
        .map(|(k, f)| match f.kind {
            FeatureKind::Numeric => FeatureValue::Number(draws[k].as_ref().expect("numeric draw").sample(rng)),
            FeatureKind::Categorical => {
                let pool = &pools[k];
                let pick = pool[rng.random_range(0..pool.len())].clone();
                if empty_rate > 0.0 && rng.random_bool(empty_rate) {
                    FeatureValue::Text(String::new())
                } else {
                    FeatureValue::Text(pick)
                }
            }
        })
        .collect()
}

/// Coefficient magnitudes of the interaction terms (products, token gate)
/// and of the hinge.
const PRODUCT_COEF: (f64, f64) = (0.03, 0.06);
const HINGE_COEF: (f64, f64) = (0.5, 1.0);

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn build_truth(
    schema: &FeatureSchema,
    suite: &SuiteSpec,
    family: Family,
    draws: &[Option<Draw>],
    pools: &[Vec<String>],
    seed: u64,
) -> TruthFunction {
    let mut rng = stream_rng(seed, 0);
    let out = suite.output_dim();
    let n = schema.len();
    let features: Vec<TruthFeature> = schema
        .features()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let (lo, hi) = draws[k].as_ref().map_or((0.0, 1.0), |d| d.bounds());
            TruthFeature { name: f.name.clone(), kind: f.kind, lo, hi: if hi > lo { hi } else { lo + 1.0 } }
        })
        .collect();
    let base: Vec<f64> = (0..out).map(|_| rng.random_range(50.0..500.0)).collect();

    let numeric: Vec<usize> = (0..n).filter(|&k| schema.features()[k].kind == FeatureKind::Numeric).collect();
    let tokens: BTreeSet<String> = pools.iter().flatten().flat_map(|v| tokenize(v, true)).collect();
    let mut weights = vec![vec![0.0; n]; out];
    let mut token_weights = vec![BTreeMap::new(); out];
    for j in 0..out {
        let raw: Vec<f64> = numeric.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = raw.iter().map(|v: &f64| v.abs()).sum::<f64>().max(1e-12);
        for (&k, w) in numeric.iter().zip(raw) {
            weights[j][k] = 0.8 * w / norm;
        }
        for t in &tokens {
            token_weights[j].insert(t.clone(), rng.random_range(-0.05..0.05));
        }
    }

    let mut terms = Vec::new();
    if family == Family::Nonlinear {
        let by_group =
            |g: ModelGroup| -> Vec<usize> { numeric.iter().copied().filter(|&k| schema.features()[k].model_group() == g).collect() };
        let pick = |rng: &mut ChaCha8Rng, from: &[usize]| from[rng.random_range(0..from.len())];
        let cpu = by_group(ModelGroup::Cpu);
        let mem = by_group(ModelGroup::Memory);
        let any = numeric.clone();
        let cpu_or_any = if cpu.len() >= 2 { cpu.clone() } else { any.clone() };
        let coef = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (0..out).map(|_| signed(rng, lo, hi)).collect::<Vec<f64>>();
        if !any.is_empty() {
            let a = pick(&mut rng, &cpu_or_any);
            let b = loop {
                let b = pick(&mut rng, &cpu_or_any);
                if b != a || cpu_or_any.len() < 2 {
                    break b;
                }
            };
            let c = coef(&mut rng, PRODUCT_COEF.0, PRODUCT_COEF.1);
            terms.push(Term::Product { a, b, coef: c });
            let m = if mem.is_empty() { pick(&mut rng, &any) } else { pick(&mut rng, &mem) };
            let k = pick(&mut rng, &cpu_or_any);
            let c = coef(&mut rng, PRODUCT_COEF.0, PRODUCT_COEF.1);
            terms.push(Term::Product { a: m, b: k, coef: c });
            let k = pick(&mut rng, &any);
            let knot = rng.random_range(-0.3..0.3);
            let c = coef(&mut rng, HINGE_COEF.0, HINGE_COEF.1);
            terms.push(Term::Hinge { k, knot, coef: c });
            if let Some(token) = tokens.iter().nth(rng.random_range(0..tokens.len().max(1))) {
                let k = pick(&mut rng, &cpu_or_any);
                let c = coef(&mut rng, PRODUCT_COEF.0, PRODUCT_COEF.1);
                terms.push(Term::TokenGate { token: token.clone(), k, coef: c });
            }
        }
    }
    TruthFunction { family, suite: suite.name.clone(), features, base, weights, token_weights, terms, alpha: 0.0, lowercase: true }
}

/// MAPE of the least-squares fit of `labels` on z-scores plus token
/// counts (with intercept), in-sample.
fn linear_fit_mape(truth: &TruthFunction, rows: &[Vec<FeatureValue>], labels: &[Vec<f64>]) -> f64 {
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let (z, counts) = truth.z(r).expect("rows match truth");
            let mut row: Vec<f64> =
                z.into_iter().enumerate().filter(|(k, _)| truth.features[*k].kind == FeatureKind::Numeric).map(|(_, v)| v).collect();
            row.extend(truth.token_weights[0].keys().map(|t| counts.get(t).copied().unwrap_or(0.0)));
            row.push(1.0);
            row
        })
        .collect();
    let (n, p) = (design.len(), design[0].len());
    let x = DMatrix::from_fn(n, p, |i, k| design[i][k]);
    let y = DMatrix::from_fn(n, truth.output_dim(), |i, j| labels[i][j]);
    let w = x.clone().svd(true, true).solve(&y, 1e-10).expect("svd with both factors");
    let fit = &x * w;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..truth.output_dim() {
            total += ((y[(i, j)] - fit[(i, j)]) / y[(i, j)]).abs();
        }
    }
    total / (n * truth.output_dim()) as f64
}

/// Smallest alpha (by bisection) whose linear-fit MAPE reaches `target`.
fn calibrate_alpha(truth: &TruthFunction, rows: &[Vec<FeatureValue>], target: f64) -> (f64, f64) {
    let scores: Vec<(Vec<f64>, Vec<f64>)> = rows.iter().map(|r| truth.scores(r).expect("rows match truth")).collect();
    let mape_at = |alpha: f64| {
        let labels: Vec<Vec<f64>> = scores.iter().map(|(l, v)| truth.label_from_scores(l, v, alpha)).collect();
        linear_fit_mape(truth, rows, &labels)
    };
    let mut hi = 0.25;
    let mut hi_mape = mape_at(hi);
    while hi_mape < target && hi < 16.0 {
        hi *= 2.0;
        hi_mape = mape_at(hi);
    }
    if hi_mape < target {
        return (hi, hi_mape);
    }
    let mut lo = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let m = mape_at(mid);
        if m < target {
            lo = mid;
        } else {
            hi = mid;
            hi_mape = m;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    (hi, hi_mape)
}

/// Generates `config.n_records` consolidated records with labels from a
/// freshly drawn truth function. Record `i` draws from its own RNG stream,
/// so a record does not depend on how many others are generated.
pub fn generate(config: &SynthConfig, schema: &FeatureSchema) -> Result<Synthetic, SynthError> {
    let suite = config.validate()?;
    let draws: Vec<Option<Draw>> =
        schema.features().iter().map(|f| (f.kind == FeatureKind::Numeric).then(|| numeric_range(&f.name))).collect();
    let pools: Vec<Vec<String>> =
        schema.features().iter().map(|f| if f.kind == FeatureKind::Categorical { token_pool(&f.name) } else { Vec::new() }).collect();
    let mut truth = build_truth(schema, &suite, config.family, &draws, &pools, config.seed);

    let (calibration_mape, alpha) = if config.family == Family::Nonlinear {
        let rows: Vec<Vec<FeatureValue>> = (0..CALIBRATION_SAMPLES)
            .map(|i| draw_features(schema, &draws, &pools, config.empty_char_rate, &mut stream_rng(config.seed ^ 0x5eed_ca1b, i as u64)))
            .collect();
        let (alpha, mape) = calibrate_alpha(&truth, &rows, config.target_linear_mape);
        (mape, alpha)
    } else {
        (0.0, 0.0)
    };
    truth.alpha = alpha;

    let mut records = Vec::with_capacity(config.n_records);
    let mut rows = Vec::with_capacity(config.n_records);
    for i in 0..config.n_records {
        let mut rng = stream_rng(config.seed, i as u64 + 1);
        let features = draw_features(schema, &draws, &pools, config.empty_char_rate, &mut rng);
        let mut labels = oracle_label(&features, &truth)?;
        if config.noise > 0.0 {
            for y in &mut labels {
                let e: f64 = StandardNormal.sample(&mut rng);
                *y *= (config.noise * e).exp();
            }
        }
        rows.push(features.clone());
        records.push(ConsolidatedRecord { features, labels, label_mask: None });
    }

    let labels: Vec<Vec<f64>> = records.iter().map(|r| r.labels.clone()).collect();
    let dataset_linear_mape = if config.n_records > 1 { linear_fit_mape(&truth, &rows, &labels) } else { 0.0 };
    let all: Vec<f64> = labels.iter().flatten().copied().collect();
    let feature_means_in_range = schema.features().iter().enumerate().filter(|(_, f)| f.kind == FeatureKind::Numeric).all(|(k, _)| {
        let mean = records.iter().filter_map(|r| r.features[k].as_number()).sum::<f64>() / records.len() as f64;
        mean >= truth.features[k].lo && mean <= truth.features[k].hi
    });
    let calibration = CalibrationReport {
        family: config.family,
        alpha,
        target_linear_mape: if config.family == Family::Nonlinear { config.target_linear_mape } else { 0.0 },
        calibration_linear_mape: calibration_mape,
        dataset_linear_mape,
        n_records: records.len(),
        label_min: all.iter().copied().fold(f64::INFINITY, f64::min),
        label_max: all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        feature_means_in_range,
    };
    if config.family == Family::Nonlinear && calibration_mape < config.target_linear_mape {
        log::warn!("nonlinear calibration reached only {calibration_mape:.4} linear-fit MAPE");
    }
    Ok(Synthetic { dataset: Dataset { suite, schema: schema.clone(), records }, truth, calibration })
}

/// Deterministic synthetic part number for a memory configuration.
fn dimm_part(features: &[FeatureValue], schema: &FeatureSchema) -> Option<(String, DimmSpec)> {
    let get = |name: &str| schema.index_of(name).and_then(|k| features[k].as_number());
    let (density, org, rank, cl) = (get("Density")?, get("Organization")?, get("DIMM_rank")?, get("CL")?);
    let part = format!("SYN-DDR5-{density}G-X{org}-{rank}R-CL{cl}");
    let spec = DimmSpec { generation: "DDR5".into(), density, organization: org, rank, cl };
    Some((part, spec))
}

/// Per-benchmark raw rows in the ingest CSV layout, with a synthetic DIMM
/// part number column when the memory fields exist. Row numbers count
/// from 1 in emission order.
pub fn to_raw_records(dataset: &Dataset) -> Vec<RawRecord> {
    let schema = &dataset.schema;
    let mut out = Vec::with_capacity(dataset.len() * dataset.suite.output_dim());
    for r in &dataset.records {
        let mut features: Vec<(String, String)> = schema
            .features()
            .iter()
            .zip(&r.features)
            .map(|(f, v)| {
                let text = match v {
                    FeatureValue::Number(x) => format!("{x}"),
                    FeatureValue::Text(s) => s.clone(),
                    FeatureValue::Missing => String::new(),
                };
                (f.name.clone(), text)
            })
            .collect();
        if let Some((part, _)) = dimm_part(&r.features, schema) {
            features.push((DIMM_PART_COLUMN.to_string(), part));
        }
        for (j, bench) in dataset.suite.benchmarks.iter().enumerate() {
            if r.label_mask.as_ref().is_some_and(|m| !m[j]) {
                continue;
            }
            out.push(RawRecord {
                features: features.clone(),
                suite: dataset.suite.name.clone(),
                benchmark: bench.clone(),
                score: r.labels[j],
                row: out.len() + 1,
            });
        }
    }
    out
}

/// Lookup table covering every synthetic part number in `dataset`.
pub fn dimm_lookup(dataset: &Dataset) -> DimmLookup {
    let mut lookup = DimmLookup::default();
    for r in &dataset.records {
        if let Some((part, spec)) = dimm_part(&r.features, &dataset.schema) {
            lookup.insert(part, spec);
        }
    }
    lookup
}
