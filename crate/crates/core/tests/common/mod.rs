//! Straight-line reference implementation of the network, written with
//! plain loops over parameters read by path. Shares no code with the
//! model's tape graph.

#![allow(dead_code)]

use ncpp_core::encode::{encode_batch, EncodedBatch, NormalizerKind, Transforms};
use ncpp_core::ingest::Dataset;
use ncpp_core::model::{init_model, InterMode, Ncpp, NcppConfig};
use ncpp_core::schema::{FeatureSchema, ModelGroup};
use ncpp_core::synth::{generate, Family, SynthConfig};
use ncpp_core::tensor::Tensor;

/// [B][n][d]
pub type Seq = Vec<Vec<Vec<f64>>>;
/// [B][heads][n][n]
pub type Attn = Vec<Vec<Vec<Vec<f64>>>>;

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn synthetic(n: usize, family: Family, seed: u64) -> Dataset {
    let cfg = SynthConfig { n_records: n, family, seed, ..SynthConfig::default() };
    generate(&cfg, &FeatureSchema::default_schema()).unwrap().dataset
}

/// Small model plus an encoded batch over every record of `data`.
pub fn small_model(data: &Dataset, d: usize, heads: usize, layers: usize, seed: u64) -> (Ncpp, EncodedBatch) {
    let t = Transforms::fit(data, NormalizerKind::Zscore, 100).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = encode_batch(data, &idx, &t).unwrap();
    let cfg = NcppConfig {
        d_model: d,
        heads,
        layers,
        seed,
        output_dim: data.suite.output_dim(),
        vocab_size: t.tokenizer.vocab.len(),
        ..NcppConfig::default()
    };
    (init_model(&cfg, &data.schema).unwrap(), batch)
}

fn param<'a>(model: &'a Ncpp, path: &str) -> &'a Tensor {
    model.params.value(path).unwrap_or_else(|_| panic!("missing parameter {path}"))
}

/// y = x W (+ b) with W stored [in, out] row-major.
fn affine(model: &Ncpp, prefix: &str, x: &[f64], bias: bool) -> Vec<f64> {
    let w = param(model, &format!("{prefix}.weight"));
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, x.len(), "{prefix}: input width");
    let mut y = vec![0.0; cols];
    for (j, out) in y.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, xi) in x.iter().enumerate() {
            s += xi * w.data()[i * cols + j];
        }
        *out = s;
    }
    if bias {
        let b = param(model, &format!("{prefix}.bias"));
        for (v, bj) in y.iter_mut().zip(b.data()) {
            *v += bj;
        }
    }
    y
}

fn layer_norm(model: &Ncpp, prefix: &str, x: &[f64]) -> Vec<f64> {
    let eps = model.config.ln_eps;
    let g = param(model, &format!("{prefix}.gamma")).data();
    let b = param(model, &format!("{prefix}.beta")).data();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| g[i] * (v - mean) / (var + eps).sqrt() + b[i]).collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// One encoder layer: multi-head attention, add & norm, FFN, add & norm.
/// `key_mask[b][j] == false` removes key j from sample b's softmax.
pub fn encoder_layer(model: &Ncpp, prefix: &str, x: &Seq, key_mask: Option<&[Vec<bool>]>) -> (Seq, Attn) {
    let heads = model.config.heads;
    let mut out = Vec::with_capacity(x.len());
    let mut attn = Vec::with_capacity(x.len());
    for (b, seq) in x.iter().enumerate() {
        let n = seq.len();
        let d = seq[0].len();
        let dk = d / heads;
        let q: Vec<Vec<f64>> = seq.iter().map(|t| affine(model, &format!("{prefix}.wq"), t, false)).collect();
        let k: Vec<Vec<f64>> = seq.iter().map(|t| affine(model, &format!("{prefix}.wk"), t, false)).collect();
        let v: Vec<Vec<f64>> = seq.iter().map(|t| affine(model, &format!("{prefix}.wv"), t, false)).collect();
        let mask = key_mask.map(|m| &m[b]);
        let mut ctx = vec![vec![0.0; d]; n];
        let mut sample_attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let mut a_h = Vec::with_capacity(n);
            for i in 0..n {
                let allowed: Vec<usize> = (0..n).filter(|&j| mask.is_none_or(|m| m[j])).collect();
                let keys = if allowed.is_empty() { (0..n).collect() } else { allowed };
                let scores: Vec<f64> =
                    keys.iter().map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt()).collect();
                let w = softmax(&scores);
                let mut row = vec![0.0; n];
                for (&j, wj) in keys.iter().zip(&w) {
                    row[j] = *wj;
                }
                for c in cols.clone() {
                    ctx[i][c] = (0..n).map(|j| row[j] * v[j][c]).sum();
                }
                a_h.push(row);
            }
            sample_attn.push(a_h);
        }
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let o = affine(model, &format!("{prefix}.wo"), &ctx[i], false);
            let r1: Vec<f64> = seq[i].iter().zip(&o).map(|(a, b)| a + b).collect();
            let ln1 = layer_norm(model, &format!("{prefix}.ln1"), &r1);
            let hidden: Vec<f64> = affine(model, &format!("{prefix}.ffn1"), &ln1, true).into_iter().map(|v| v.max(0.0)).collect();
            let f = affine(model, &format!("{prefix}.ffn2"), &hidden, true);
            let r2: Vec<f64> = f.iter().zip(&ln1).map(|(a, b)| a + b).collect();
            y.push(layer_norm(model, &format!("{prefix}.ln2"), &r2));
        }
        out.push(y);
        attn.push(sample_attn);
    }
    (out, attn)
}

pub fn stack(model: &Ncpp, prefix: &str, x: &Seq, key_mask: Option<&[Vec<bool>]>) -> (Seq, Vec<Attn>) {
    let mut cur = x.clone();
    let mut all = Vec::new();
    for l in 0..model.config.layers {
        let (y, a) = encoder_layer(model, &format!("{prefix}.layer{l}"), &cur, key_mask);
        cur = y;
        all.push(a);
    }
    (cur, all)
}

/// conv (kernel 1) -> inference batch norm -> ReLU.
fn conv_layer(model: &Ncpp, prefix: &str, x: &[f64]) -> Vec<f64> {
    let y = affine(model, prefix, x, true);
    let eps = model.config.bn_eps;
    let g = param(model, &format!("{prefix}.bn.gamma")).data();
    let b = param(model, &format!("{prefix}.bn.beta")).data();
    let m = param(model, &format!("{prefix}.bn.running_mean")).data();
    let v = param(model, &format!("{prefix}.bn.running_var")).data();
    y.iter().enumerate().map(|(c, yc)| (g[c] * (yc - m[c]) / (v[c] + eps).sqrt() + b[c]).max(0.0)).collect()
}

fn residual_conv(model: &Ncpp, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h = conv_layer(model, &format!("{prefix}.l1"), x);
    let f = conv_layer(model, &format!("{prefix}.l2"), &h);
    let s = affine(model, &format!("{prefix}.skip"), x, true);
    f.iter().zip(&s).map(|(a, b)| a + b).collect()
}

pub struct OracleOutput {
    /// [B][output_dim]
    pub pred: Vec<Vec<f64>>,
    /// Per group (model order), per layer.
    pub intra: [Vec<Attn>; 4],
    pub inter: Vec<Attn>,
    /// Per group sequences entering the intra stacks.
    pub division: [Seq; 4],
}

/// Inference-mode forward pass (pooled inter-group mode).
pub fn forward(model: &Ncpp, batch: &EncodedBatch) -> OracleOutput {
    assert_eq!(model.config.inter_mode, InterMode::Pooled);
    let b = batch.batch;
    let n_num = batch.n_numeric();
    let (n_char, width) = (batch.n_char, batch.width);
    let table = param(model, "char.embedding");
    let e = table.shape()[1];

    let mut division: [Seq; 4] = Default::default();
    let mut char_mask = vec![vec![true; n_char]; b];
    for s in 0..b {
        let num: Vec<Vec<f64>> = (0..n_num).map(|p| residual_conv(model, "num.conv", &[batch.numeric[s * n_num + p]])).collect();
        for &(g, start, len) in &batch.numeric_layout {
            division[g.index()].push(num[start..start + len].to_vec());
        }
        let mut chars = Vec::with_capacity(n_char);
        for f in 0..n_char {
            let mut pooled = vec![0.0; e];
            let mut count = 0;
            for t in 0..width {
                let p = (s * n_char + f) * width + t;
                if batch.char_mask[p] {
                    let id = batch.char_ids[p];
                    for (c, v) in pooled.iter_mut().enumerate() {
                        *v += table.data()[id * e + c];
                    }
                    count += 1;
                }
            }
            if count > 0 {
                pooled.iter_mut().for_each(|v| *v /= count as f64);
            }
            char_mask[s][f] = count > 0;
            chars.push(residual_conv(model, "char.conv", &pooled));
        }
        division[ModelGroup::Char.index()].push(chars);
    }
    if model.config.feature_embedding {
        for g in ModelGroup::ALL {
            let fe = param(model, &format!("feature_embedding.{g}"));
            let d = fe.shape()[1];
            for seq in division[g.index()].iter_mut() {
                for (p, tok) in seq.iter_mut().enumerate() {
                    for (c, v) in tok.iter_mut().enumerate() {
                        *v += fe.data()[p * d + c];
                    }
                }
            }
        }
    }
    // A sample whose categorical features are all empty attends normally.
    for m in char_mask.iter_mut() {
        if m.iter().all(|&x| !x) {
            m.iter_mut().for_each(|x| *x = true);
        }
    }

    let mut groups = division.clone();
    let mut intra: [Vec<Attn>; 4] = Default::default();
    for g in ModelGroup::ALL {
        if model.config.intra.get(g) {
            let mask = (g == ModelGroup::Char).then_some(char_mask.as_slice());
            let (y, a) = stack(model, &format!("intra.{g}"), &division[g.index()], mask);
            groups[g.index()] = y;
            intra[g.index()] = a;
        }
    }
    let tokens: Seq = (0..b)
        .map(|s| {
            ModelGroup::ALL
                .iter()
                .map(|g| {
                    let seq = &groups[g.index()][s];
                    let d = seq[0].len();
                    (0..d).map(|c| seq.iter().map(|t| t[c]).sum::<f64>() / seq.len() as f64).collect()
                })
                .collect()
        })
        .collect();
    let (fused, inter) = stack(model, "inter", &tokens, None);
    let pred = fused.iter().map(|toks| affine(model, "head", &toks.concat(), true)).collect();
    OracleOutput { pred, intra, inter, division }
}

/// Flattens [B][h][n][n] for comparison with a trace tensor.
pub fn flatten_attn(a: &Attn) -> Vec<f64> {
    a.iter().flatten().flatten().flatten().copied().collect()
}

pub fn to_seq(t: &Tensor) -> Seq {
    let s = t.shape();
    (0..s[0]).map(|b| (0..s[1]).map(|i| t.data()[(b * s[1] + i) * s[2]..(b * s[1] + i + 1) * s[2]].to_vec()).collect()).collect()
}

pub fn from_seq(x: &Seq) -> Tensor {
    let (b, n, d) = (x.len(), x[0].len(), x[0][0].len());
    Tensor::new(vec![b, n, d], x.iter().flatten().flatten().copied().collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Adds N(0, 0.3)-ish noise to every parameter, keeping running variances
/// positive, so checks do not lean on the 0/1 initial statistics.
pub fn perturb(model: &mut Ncpp, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (path, p) in model.params.iter_mut() {
        let var = path.ends_with("running_var");
        for v in p.value.data_mut() {
            let noise: f64 = rng.random_range(-0.5..0.5);
            *v = if var { 0.5 + noise.abs() * 2.0 } else { *v + noise };
        }
    }
}
