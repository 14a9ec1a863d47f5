//! Linear comparison models: least squares, ridge, lasso and elastic net,
//! fitted independently per output column.
//!
//! Every fit minimizes `0.5 * |y - Xw - b|^2 + l1 * |w|_1 + 0.5 * l2 * |w|^2`
//! with an unpenalized intercept. The objective is not divided by the row
//! count, so `l2` enters the ridge normal equations as `X'X + l2 I`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encode::{EncodeError, Transforms};
use crate::ingest::Dataset;

pub const CD_TOL: f64 = 1e-8;
pub const CD_MAX_SWEEPS: usize = 10_000;
pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("X has {x} rows but Y has {y}")]
    Rows { x: usize, y: usize },
    #[error("model expects {expected} features, got {got}")]
    Features { expected: usize, got: usize },
    #[error("no rows to fit")]
    Empty,
    #[error("negative regularization ({0})")]
    Negative(f64),
    #[error("column {0} has no labelled rows")]
    NoLabels(usize),
    #[error("linear solve failed")]
    Solve,
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Regularization {
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Lr,
    Lasso,
    Ridge,
    ElasticNet,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Lr, BaselineKind::Lasso, BaselineKind::Ridge, BaselineKind::ElasticNet];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Lr => "lr",
            BaselineKind::Lasso => "lasso",
            BaselineKind::Ridge => "ridge",
            BaselineKind::ElasticNet => "elastic-net",
        }
    }

    /// Penalty for strength `lambda`; elastic net splits it evenly.
    pub fn regularization(self, lambda: f64) -> Regularization {
        match self {
            BaselineKind::Lr => Regularization::default(),
            BaselineKind::Lasso => Regularization { l1: lambda, l2: 0.0 },
            BaselineKind::Ridge => Regularization { l1: 0.0, l2: lambda },
            BaselineKind::ElasticNet => Regularization { l1: lambda / 2.0, l2: lambda / 2.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// [n_features][out_dim].
    pub weights: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    pub reg: Regularization,
    /// False when coordinate descent hit the sweep limit on some column.
    pub converged: bool,
    /// Hash of the design-matrix column names the weights are bound to.
    #[serde(default)]
    pub feature_hash: String,
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Fits every column of `y` on all rows of `x`.
pub fn fit_linear(x: &[Vec<f64>], y: &[Vec<f64>], reg: Regularization) -> Result<LinearModel, BaselineError> {
    fit_linear_masked(x, y, None, reg)
}

/// Like [`fit_linear`], but `mask[i][j] == false` leaves row `i` out of
/// the fit for column `j`.
pub fn fit_linear_masked(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    mask: Option<&[Vec<bool>]>,
    reg: Regularization,
) -> Result<LinearModel, BaselineError> {
    if x.len() != y.len() {
        return Err(BaselineError::Rows { x: x.len(), y: y.len() });
    }
    if x.is_empty() {
        return Err(BaselineError::Empty);
    }
    for v in [reg.l1, reg.l2] {
        if !(v >= 0.0) {
            return Err(BaselineError::Negative(v));
        }
    }
    let p = x[0].len();
    let out = y[0].len();
    if let Some(bad) = x.iter().find(|r| r.len() != p) {
        return Err(BaselineError::Features { expected: p, got: bad.len() });
    }
    let mut weights = vec![vec![0.0; out]; p];
    let mut intercept = vec![0.0; out];
    let mut converged = true;
    for j in 0..out {
        let rows: Vec<usize> = (0..x.len()).filter(|&i| mask.is_none_or(|m| m[i][j])).collect();
        if rows.is_empty() {
            return Err(BaselineError::NoLabels(j));
        }
        let target: Vec<f64> = rows.iter().map(|&i| y[i][j]).collect();
        let (w, b, ok) = fit_column(x, &rows, &target, reg)?;
        if !ok {
            log::warn!("coordinate descent did not converge for output {j} after {CD_MAX_SWEEPS} sweeps");
            converged = false;
        }
        for (k, wk) in w.into_iter().enumerate() {
            weights[k][j] = wk;
        }
        intercept[j] = b;
    }
    Ok(LinearModel { weights, intercept, reg, converged, feature_hash: String::new() })
}

fn fit_column(x: &[Vec<f64>], rows: &[usize], y: &[f64], reg: Regularization) -> Result<(Vec<f64>, f64, bool), BaselineError> {
    let n = rows.len();
    let p = x[0].len();
    let x_mean: Vec<f64> = (0..p).map(|k| rows.iter().map(|&i| x[i][k]).sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, p, |r, k| x[rows[r]][k] - x_mean[k]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));

    let (w, ok) = if reg.l1 > 0.0 { coordinate_descent(&xc, &yc, reg, None) } else { (solve_normal(&xc, &yc, reg.l2)?, true) };
    let b = y_mean - w.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok((w, b, ok))
}

/// `(X'X + l2 I) w = X'y`, via Cholesky, falling back to an SVD
/// pseudo-inverse when the system is singular.
fn solve_normal(x: &DMatrix<f64>, y: &DVector<f64>, l2: f64) -> Result<Vec<f64>, BaselineError> {
    let p = x.ncols();
    let mut gram = x.transpose() * x;
    for k in 0..p {
        gram[(k, k)] += l2;
    }
    let rhs = x.transpose() * y;
    if let Some(chol) = gram.clone().cholesky() {
        let w = chol.solve(&rhs);
        if w.iter().all(|v| v.is_finite()) {
            return Ok(w.iter().copied().collect());
        }
    }
    // Minimum-norm solution of the (possibly rank-deficient) least squares.
    let svd = x.clone().svd(true, true);
    let w = if l2 == 0.0 {
        svd.solve(y, 1e-12).map_err(|_| BaselineError::Solve)?
    } else {
        gram.svd(true, true).solve(&rhs, 1e-12).map_err(|_| BaselineError::Solve)?
    };
    Ok(w.iter().copied().collect())
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

pub(crate) fn objective(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], reg: Regularization) -> f64 {
    let wv = DVector::from_column_slice(w);
    let r = y - x * wv;
    0.5 * r.norm_squared() + reg.l1 * w.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * reg.l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Cyclic coordinate descent on centered data. `trace` collects the
/// objective after every sweep.
pub(crate) fn coordinate_descent(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    reg: Regularization,
    mut trace: Option<&mut Vec<f64>>,
) -> (Vec<f64>, bool) {
    let (n, p) = (x.nrows(), x.ncols());
    let sq: Vec<f64> = (0..p).map(|k| x.column(k).norm_squared()).collect();
    let mut w = vec![0.0; p];
    let mut r: Vec<f64> = y.iter().copied().collect();
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for k in 0..p {
            if sq[k] == 0.0 {
                continue;
            }
            let col = x.column(k);
            let rho = (0..n).map(|i| col[i] * r[i]).sum::<f64>() + sq[k] * w[k];
            let new = soft_threshold(rho, reg.l1) / (sq[k] + reg.l2);
            let delta = new - w[k];
            if delta != 0.0 {
                for i in 0..n {
                    r[i] -= col[i] * delta;
                }
                w[k] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(objective(x, y, &w, reg));
        }
        if max_change < CD_TOL {
            return (w, true);
        }
    }
    (w, false)
}

pub fn predict_linear(model: &LinearModel, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, BaselineError> {
    let p = model.n_features();
    x.iter()
        .map(|row| {
            if row.len() != p {
                return Err(BaselineError::Features { expected: p, got: row.len() });
            }
            Ok(model
                .intercept
                .iter()
                .enumerate()
                .map(|(j, b)| b + row.iter().zip(&model.weights).map(|(v, w)| v * w[j]).sum::<f64>())
                .collect())
        })
        .collect()
}

/// Flattened baseline inputs: normalized numeric features in schema order,
/// then bag-of-token counts (pad column excluded), each column
/// standardized with training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

fn raw_design(data: &Dataset, transforms: &Transforms) -> Result<Vec<Vec<f64>>, BaselineError> {
    let numeric = transforms.normalizer.apply(&data.schema, &data.records)?;
    Ok(numeric
        .into_iter()
        .zip(&data.records)
        .map(|(mut row, r)| {
            row.extend(transforms.tokenizer.token_counts(&data.schema, r));
            row
        })
        .collect())
}

impl DesignMatrix {
    pub fn fit(train: &Dataset, transforms: &Transforms) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::Empty);
        }
        let raw = raw_design(train, transforms)?;
        let mut names: Vec<String> = transforms.normalizer.features.iter().map(|f| f.name.clone()).collect();
        names.extend(transforms.tokenizer.vocab.tokens().iter().skip(1).map(|t| format!("token:{t}")));
        let n = raw.len() as f64;
        let p = names.len();
        let mean: Vec<f64> = (0..p).map(|k| raw.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale = (0..p)
            .map(|k| {
                let var = raw.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(DesignMatrix { names, mean, scale })
    }

    pub fn transform(&self, data: &Dataset, transforms: &Transforms) -> Result<Vec<Vec<f64>>, BaselineError> {
        let raw = raw_design(data, transforms)?;
        Ok(raw.into_iter().map(|row| row.iter().enumerate().map(|(k, v)| (v - self.mean[k]) / self.scale[k]).collect()).collect())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

fn label_mask(data: &Dataset) -> Option<Vec<Vec<bool>>> {
    if data.records.iter().all(|r| r.label_mask.is_none()) {
        return None;
    }
    let out = data.suite.output_dim();
    Some(data.records.iter().map(|r| r.label_mask.clone().unwrap_or_else(|| vec![true; out])).collect())
}

fn validation_mape(pred: &[Vec<f64>], data: &Dataset) -> f64 {
    let mask = label_mask(data);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (p, r)) in pred.iter().zip(&data.records).enumerate() {
        for (j, (yh, y)) in p.iter().zip(&r.labels).enumerate() {
            if *y != 0.0 && mask.as_ref().is_none_or(|m| m[i][j]) {
                total += ((y - yh) / y).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

/// A baseline ready to score new datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBaseline {
    pub kind: BaselineKind,
    pub lambda: f64,
    pub design: DesignMatrix,
    pub model: LinearModel,
    /// (lambda, validation MAPE) for every candidate tried.
    pub search: Vec<(f64, f64)>,
}

impl FittedBaseline {
    pub fn predict(&self, data: &Dataset, transforms: &Transforms) -> Result<Vec<Vec<f64>>, BaselineError> {
        predict_linear(&self.model, &self.design.transform(data, transforms)?)
    }
}

/// Fits `kind` on `train` for each lambda in `grid` and keeps the one with
/// the lowest validation MAPE. Plain least squares ignores the grid.
pub fn fit_baseline(
    kind: BaselineKind,
    train: &Dataset,
    val: &Dataset,
    transforms: &Transforms,
    grid: &[f64],
) -> Result<FittedBaseline, BaselineError> {
    let design = DesignMatrix::fit(train, transforms)?;
    let x_train = design.transform(train, transforms)?;
    let y_train = train.labels();
    let mask = label_mask(train);
    let x_val = design.transform(val, transforms)?;
    let lambdas: Vec<f64> = if kind == BaselineKind::Lr { vec![0.0] } else { grid.to_vec() };

    let mut best: Option<(f64, f64, LinearModel)> = None;
    let mut search = Vec::new();
    for &lambda in &lambdas {
        let mut model = fit_linear_masked(&x_train, &y_train, mask.as_deref(), kind.regularization(lambda))?;
        model.feature_hash = design.hash();
        let score = validation_mape(&predict_linear(&model, &x_val)?, val);
        search.push((lambda, score));
        if best.as_ref().is_none_or(|b| score < b.1) {
            best = Some((lambda, score, model));
        }
    }
    let (lambda, _, model) = best.ok_or(BaselineError::Empty)?;
    Ok(FittedBaseline { kind, lambda, design, model, search })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planted(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let y = x.iter().map(|r| vec![2.0 * r[0] - 3.0 * r[1] + 1.0]).collect();
        (x, y)
    }

    #[test]
    fn least_squares_recovers_plant() {
        let (x, y) = planted(30, 1);
        let m = fit_linear(&x, &y, Regularization::default()).unwrap();
        assert!((m.weights[0][0] - 2.0).abs() < 1e-6);
        assert!((m.weights[1][0] + 3.0).abs() < 1e-6);
        assert!((m.intercept[0] - 1.0).abs() < 1e-6);
        assert!(m.converged);
    }

    #[test]
    fn rank_deficient_falls_back_to_pinv() {
        // Duplicate column: minimum-norm solution splits the weight.
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<Vec<f64>> = (0..6).map(|i| vec![4.0 * i as f64]).collect();
        let m = fit_linear(&x, &y, Regularization::default()).unwrap();
        assert!((m.weights[0][0] - 2.0).abs() < 1e-8 && (m.weights[1][0] - 2.0).abs() < 1e-8);
        let pred = predict_linear(&m, &x).unwrap();
        for (p, t) in pred.iter().zip(&y) {
            assert!((p[0] - t[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn ridge_limits() {
        let (x, y) = planted(25, 2);
        let lr = fit_linear(&x, &y, Regularization::default()).unwrap();
        let tiny = fit_linear(&x, &y, Regularization { l1: 0.0, l2: 1e-10 }).unwrap();
        for k in 0..2 {
            assert!((lr.weights[k][0] - tiny.weights[k][0]).abs() < 1e-6);
        }
        let huge = fit_linear(&x, &y, Regularization { l1: 0.0, l2: 1e12 }).unwrap();
        let mean_y = y.iter().map(|r| r[0]).sum::<f64>() / 25.0;
        assert!(huge.weights.iter().all(|w| w[0].abs() < 1e-8));
        // Shrunk weights barely move the intercept off mean(y).
        assert!((huge.intercept[0] - mean_y).abs() < 1e-6);
    }

    #[test]
    fn large_l1_kills_every_weight() {
        let (x, y) = planted(40, 3);
        let m = fit_linear(&x, &y, Regularization { l1: 1e6, l2: 0.0 }).unwrap();
        assert!(m.weights.iter().all(|w| w[0] == 0.0));
    }

    #[test]
    fn lasso_small_penalty_near_least_squares() {
        let (x, y) = planted(40, 4);
        let m = fit_linear(&x, &y, Regularization { l1: 1e-9, l2: 0.0 }).unwrap();
        assert!((m.weights[0][0] - 2.0).abs() < 1e-6 && (m.weights[1][0] + 3.0).abs() < 1e-6);
    }

    #[test]
    fn coordinate_descent_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, p) = (30, 6);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        for reg in [Regularization { l1: 0.5, l2: 0.0 }, Regularization { l1: 0.2, l2: 0.7 }] {
            let mut trace = Vec::new();
            let (w, ok) = coordinate_descent(&x, &y, reg, Some(&mut trace));
            assert!(ok);
            assert!(trace.windows(2).all(|t| t[1] <= t[0] + 1e-12));
            assert!((trace.last().unwrap() - objective(&x, &y, &w, reg)).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_checks_width_and_broadcasts_intercept() {
        let m = LinearModel {
            weights: vec![vec![0.0, 0.0]; 3],
            intercept: vec![4.0, -1.0],
            reg: Regularization::default(),
            converged: true,
            feature_hash: String::new(),
        };
        assert_eq!(predict_linear(&m, &[vec![1.0, 2.0, 3.0]]).unwrap(), vec![vec![4.0, -1.0]]);
        assert!(matches!(predict_linear(&m, &[vec![1.0]]), Err(BaselineError::Features { expected: 3, got: 1 })));
    }

    #[test]
    fn mismatched_rows_rejected() {
        assert!(matches!(fit_linear(&[vec![1.0]], &[], Regularization::default()), Err(BaselineError::Rows { .. })));
    }

    #[test]
    fn masked_rows_skip_their_column() {
        let (x, mut y) = planted(20, 6);
        let mask: Vec<Vec<bool>> = (0..20).map(|i| vec![i != 3]).collect();
        y[3][0] = 1e9;
        let m = fit_linear_masked(&x, &y, Some(&mask), Regularization::default()).unwrap();
        assert!((m.weights[0][0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn model_json_round_trip() {
        let (x, y) = planted(10, 7);
        let m = fit_linear(&x, &y, Regularization { l1: 0.0, l2: 0.5 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(LinearModel::load(&path).unwrap(), m);
    }
}
