//! The grouped-attention network.
//!
//! Numeric features (one scalar per position) and categorical features
//! (masked mean of token embeddings per position) pass through separate
//! residual conv blocks, gain a learned per-feature embedding, and are
//! split into four groups (Char, CPU, Other, Memory). Each group runs its
//! own attention encoder stack; the groups are then mean-pooled into four
//! tokens, mixed by an inter-group encoder stack, flattened and mapped to
//! one output per benchmark by a linear head.

mod layers;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::EncodedBatch;
use crate::schema::{group_partition, FeatureSchema, GroupPartition, ModelGroup};
use crate::tensor::{read_checkpoint, write_checkpoint, BatchStats, ParamStore, Tape, Tensor, TensorError, Var};

use layers::{Ctx, Init, MASKED_SCORE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("feature group '{0}' has no features")]
    MissingGroup(ModelGroup),
    #[error("batch does not match the model: {0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterMode {
    /// Attention over the four mean-pooled group tokens.
    #[default]
    Pooled,
    /// Attention over every feature position, pooled per group afterwards.
    Sequence,
}

/// Which groups run their intra-group attention stack; a disabled group
/// passes its features through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSwitch {
    pub char: bool,
    pub cpu: bool,
    pub other: bool,
    pub memory: bool,
}

impl Default for GroupSwitch {
    fn default() -> Self {
        GroupSwitch { char: true, cpu: true, other: true, memory: true }
    }
}

impl GroupSwitch {
    pub fn get(&self, g: ModelGroup) -> bool {
        match g {
            ModelGroup::Char => self.char,
            ModelGroup::Cpu => self.cpu,
            ModelGroup::Other => self.other,
            ModelGroup::Memory => self.memory,
        }
    }

    pub fn set(&mut self, g: ModelGroup, on: bool) {
        match g {
            ModelGroup::Char => self.char = on,
            ModelGroup::Cpu => self.cpu = on,
            ModelGroup::Other => self.other = on,
            ModelGroup::Memory => self.memory = on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NcppConfig {
    #[serde(alias = "H")]
    pub heads: usize,
    #[serde(alias = "L")]
    pub layers: usize,
    pub d_model: usize,
    pub embed_dim: usize,
    /// Conv block width; must equal `d_model` (defaults to it).
    pub conv_filters: Option<usize>,
    /// FFN hidden width; defaults to `2 * d_model`.
    pub ffn_dim: Option<usize>,
    pub output_dim: usize,
    pub vocab_size: usize,
    #[serde(alias = "delta")]
    pub huber_delta: f64,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    pub inter_mode: InterMode,
    /// Learned per-position embedding added after the conv blocks.
    pub feature_embedding: bool,
    pub intra: GroupSwitch,
}

impl Default for NcppConfig {
    fn default() -> Self {
        NcppConfig {
            heads: 2,
            layers: 1,
            d_model: 64,
            embed_dim: 4,
            conv_filters: None,
            ffn_dim: None,
            output_dim: 1,
            vocab_size: crate::encode::DEFAULT_VOCAB_CAP,
            huber_delta: 1.0,
            seed: 42,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            ln_eps: 1e-6,
            inter_mode: InterMode::Pooled,
            feature_embedding: true,
            intra: GroupSwitch::default(),
        }
    }
}

impl NcppConfig {
    pub fn filters(&self) -> usize {
        self.conv_filters.unwrap_or(self.d_model)
    }

    pub fn ffn(&self) -> usize {
        self.ffn_dim.unwrap_or(2 * self.d_model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let dims = [
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn()),
            ("output_dim", self.output_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.filters() != self.d_model {
            return bad(format!("conv_filters {} must equal d_model {}", self.filters(), self.d_model));
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size must be at least 3, got {}", self.vocab_size));
        }
        if !(self.huber_delta > 0.0) {
            return bad(format!("huber_delta must be positive, got {}", self.huber_delta));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) || !(self.ln_eps > 0.0) {
            return bad("bn_momentum must be in [0, 1) and eps values positive".into());
        }
        Ok(())
    }
}

/// The six ablation arms, in comparison-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationArm {
    #[default]
    Full,
    NoIntra,
    NoMemory,
    NoOther,
    NoCpu,
    NoWorkload,
}

impl AblationArm {
    pub const ALL: [AblationArm; 6] =
        [AblationArm::Full, AblationArm::NoIntra, AblationArm::NoMemory, AblationArm::NoOther, AblationArm::NoCpu, AblationArm::NoWorkload];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::NoIntra => "no-intra",
            AblationArm::NoMemory => "no-memory",
            AblationArm::NoOther => "no-other",
            AblationArm::NoCpu => "no-cpu",
            AblationArm::NoWorkload => "no-workload",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationArm::Full => "intra- and inter-group attention",
            AblationArm::NoIntra => "without intra-group attention",
            AblationArm::NoMemory => "without memory group attention",
            AblationArm::NoOther => "without other group attention",
            AblationArm::NoCpu => "without CPU group attention",
            AblationArm::NoWorkload => "without workload (char) group attention",
        }
    }

    pub fn parse(name: &str) -> Option<AblationArm> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Returns `base` with this arm's intra-group stacks switched off.
    pub fn apply(self, base: &NcppConfig) -> NcppConfig {
        let mut cfg = base.clone();
        cfg.intra = GroupSwitch::default();
        match self {
            AblationArm::Full => {}
            AblationArm::NoIntra => ModelGroup::ALL.into_iter().for_each(|g| cfg.intra.set(g, false)),
            AblationArm::NoMemory => cfg.intra.memory = false,
            AblationArm::NoOther => cfg.intra.other = false,
            AblationArm::NoCpu => cfg.intra.cpu = false,
            AblationArm::NoWorkload => cfg.intra.char = false,
        }
        cfg
    }
}

/// Attention weights captured during a traced forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    /// Per group (model order), per layer: [B, heads, n_g, n_g]. Empty for
    /// groups whose stack is disabled.
    pub intra: [Vec<Tensor>; 4],
    /// Per layer: [B, heads, m, m] with m = 4 (pooled) or all positions.
    pub inter: Vec<Tensor>,
}

impl AttentionTrace {
    /// Every captured matrix, for invariant checks.
    pub fn all(&self) -> impl Iterator<Item = &Tensor> {
        self.intra.iter().flatten().chain(&self.inter)
    }
}

pub struct ForwardOutput {
    /// [B, output_dim]
    pub pred: Var,
    pub trace: Option<AttentionTrace>,
    /// Trainable parameters bound as differentiable leaves.
    pub bound: Vec<(String, Var)>,
    /// Batch statistics per batch-norm prefix (training mode only).
    pub bn_updates: Vec<(String, BatchStats)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-statistics batch norm, gradients tracked.
    Train,
    /// Running-statistics batch norm, no gradients.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ncpp {
    pub config: NcppConfig,
    pub params: ParamStore,
    pub partition: GroupPartition,
    pub feature_names: Vec<String>,
}

const NUMERIC_GROUPS: [ModelGroup; 3] = [ModelGroup::Cpu, ModelGroup::Other, ModelGroup::Memory];

pub fn init_model(config: &NcppConfig, schema: &FeatureSchema) -> Result<Ncpp, ModelError> {
    config.validate()?;
    let partition = group_partition(schema);
    for g in ModelGroup::ALL {
        if partition.len(g) == 0 {
            return Err(ModelError::MissingGroup(g));
        }
    }
    let (d, f, ffn) = (config.d_model, config.filters(), config.ffn());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut init = Init { store: &mut store, rng: &mut rng };

    init.uniform("char.embedding".into(), &[config.vocab_size, config.embed_dim], 0.05);
    // Row 0 is padding: zero, and never updated because the masked lookup
    // routes no gradient to it.
    init.store.get_mut("char.embedding")?.value.data_mut()[..config.embed_dim].fill(0.0);
    init.residual_conv("char.conv", config.embed_dim, f);
    init.residual_conv("num.conv", 1, f);
    if config.feature_embedding {
        for g in ModelGroup::ALL {
            init.uniform(format!("feature_embedding.{g}"), &[partition.len(g), d], 0.05);
        }
    }
    for g in ModelGroup::ALL {
        if config.intra.get(g) {
            for l in 0..config.layers {
                init.encoder_layer(&format!("intra.{g}.layer{l}"), d, ffn);
            }
        }
    }
    for l in 0..config.layers {
        init.encoder_layer(&format!("inter.layer{l}"), d, ffn);
    }
    init.dense("head", 4 * d, config.output_dim, true);

    Ok(Ncpp { config: config.clone(), params: store, partition, feature_names: schema.names().map(str::to_string).collect() })
}

impl Ncpp {
    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn set_head_bias(&mut self, bias: &[f64]) -> Result<(), ModelError> {
        let p = self.params.get_mut("head.bias")?;
        if bias.len() != p.value.len() {
            return Err(ModelError::Batch(format!("head bias needs {} values, got {}", p.value.len(), bias.len())));
        }
        p.value.data_mut().copy_from_slice(bias);
        Ok(())
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<(), ModelError> {
        for g in NUMERIC_GROUPS {
            let have = batch.numeric_layout.iter().find(|l| l.0 == g).map_or(0, |l| l.2);
            if have != self.partition.len(g) {
                return Err(ModelError::Batch(format!("group {g}: {have} numeric columns, model expects {}", self.partition.len(g))));
            }
        }
        if batch.n_char != self.partition.len(ModelGroup::Char) {
            return Err(ModelError::Batch(format!(
                "{} categorical features, model expects {}",
                batch.n_char,
                self.partition.len(ModelGroup::Char)
            )));
        }
        if batch.labels.shape()[1] != self.config.output_dim {
            return Err(ModelError::Batch("label width differs from output_dim".into()));
        }
        Ok(())
    }

    /// Per-group feature sequences [B, n_g, d_model] in model group order.
    fn feature_division(&self, ctx: &mut Ctx, batch: &EncodedBatch) -> Result<[Var; 4], ModelError> {
        let cfg = &self.config;
        let b = batch.batch;
        let n_num = batch.n_numeric();
        let x = ctx.tape.constant(Tensor::new(vec![b, n_num, 1], batch.numeric.clone())?);
        let num = ctx.residual_conv(x, "num.conv", cfg.bn_eps)?;

        let table = ctx.p_table()?;
        let shape = [b, batch.n_char, batch.width];
        let emb = ctx.tape.embedding_masked(table, &batch.char_ids, &batch.char_mask, &shape)?;
        let pooled = ctx.tape.masked_mean(emb, &batch.char_mask)?;
        let chars = ctx.residual_conv(pooled, "char.conv", cfg.bn_eps)?;

        let mut out = [chars; 4];
        for &(g, start, len) in &batch.numeric_layout {
            out[g.index()] = ctx.tape.slice(num, start, len)?;
        }
        if cfg.feature_embedding {
            for g in ModelGroup::ALL {
                let fe = ctx.p(&format!("feature_embedding.{g}"))?;
                out[g.index()] = ctx.tape.add_trailing(out[g.index()], fe)?;
            }
        }
        Ok(out)
    }

    /// Additive key mask for the char group: categorical features with no
    /// tokens receive no attention, unless every feature of the sample is
    /// empty.
    fn char_key_bias(&self, ctx: &mut Ctx, batch: &EncodedBatch) -> Option<Var> {
        let n = batch.n_char;
        let h = self.config.heads;
        let empty: Vec<bool> = batch.char_mask.chunks(batch.width).map(|m| !m.iter().any(|&x| x)).collect();
        if !empty.iter().any(|&e| e) {
            return None;
        }
        let mut bias = vec![0.0; batch.batch * h * n * n];
        for s in 0..batch.batch {
            let row = &empty[s * n..(s + 1) * n];
            if row.iter().all(|&e| e) {
                continue;
            }
            for hi in 0..h {
                for q in 0..n {
                    let base = ((s * h + hi) * n + q) * n;
                    for (k, _) in row.iter().enumerate().filter(|(_, &e)| e) {
                        bias[base + k] = MASKED_SCORE;
                    }
                }
            }
        }
        Some(ctx.tape.constant(Tensor::new(vec![batch.batch * h, n, n], bias).expect("sized")))
    }

    fn stack(
        &self,
        ctx: &mut Ctx,
        mut x: Var,
        prefix: &str,
        key_bias: Option<Var>,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var, ModelError> {
        let mut captured = Vec::new();
        for l in 0..self.config.layers {
            let (y, attn) = ctx.encoder_layer(x, &format!("{prefix}.layer{l}"), self.config.heads, self.config.ln_eps, key_bias)?;
            if trace.is_some() {
                captured.push(attention_tensor(ctx.tape.value(attn), self.config.heads));
            }
            x = y;
        }
        if let Some(t) = trace {
            *t = captured;
        }
        Ok(x)
    }

    /// Full network on an encoded batch.
    pub fn forward(&self, tape: &mut Tape, batch: &EncodedBatch, mode: Mode, trace: bool) -> Result<ForwardOutput, ModelError> {
        self.check_batch(batch)?;
        let train = mode == Mode::Train;
        let mut ctx = Ctx::new(tape, &self.params, train, train);
        let mut tr = trace.then(AttentionTrace::default);

        let mut groups = self.feature_division(&mut ctx, batch)?;
        let char_bias = self.char_key_bias(&mut ctx, batch);
        for g in ModelGroup::ALL {
            if self.config.intra.get(g) {
                let bias = if g == ModelGroup::Char { char_bias } else { None };
                let slot = tr.as_mut().map(|t| &mut t.intra[g.index()]);
                groups[g.index()] = self.stack(&mut ctx, groups[g.index()], &format!("intra.{g}"), bias, slot)?;
            }
        }

        let b = batch.batch;
        let d = self.config.d_model;
        let fused = match self.config.inter_mode {
            InterMode::Pooled => {
                let tokens = self.pool_groups(&mut ctx, &groups, b, d)?;
                self.stack(&mut ctx, tokens, "inter", None, tr.as_mut().map(|t| &mut t.inter))?
            }
            InterMode::Sequence => {
                let seq = ctx.tape.concat(&groups)?;
                let mixed = self.stack(&mut ctx, seq, "inter", None, tr.as_mut().map(|t| &mut t.inter))?;
                let mut start = 0;
                let mut parts = [mixed; 4];
                for g in ModelGroup::ALL {
                    let n = self.partition.len(g);
                    parts[g.index()] = ctx.tape.slice(mixed, start, n)?;
                    start += n;
                }
                self.pool_groups(&mut ctx, &parts, b, d)?
            }
        };
        let flat = ctx.tape.reshape(fused, &[b, 4 * d])?;
        let pred = ctx.dense(flat, "head", true)?;
        Ok(ForwardOutput { pred, trace: tr, bound: ctx.bound, bn_updates: ctx.bn_updates })
    }

    /// Mean over each group's positions, stacked into [B, 4, d].
    fn pool_groups(&self, ctx: &mut Ctx, groups: &[Var; 4], b: usize, d: usize) -> Result<Var, ModelError> {
        let mut tokens = Vec::with_capacity(4);
        for &g in groups {
            let n = ctx.tape.shape(g)[1];
            let m = ctx.tape.mean_range(g, 0, n)?;
            tokens.push(ctx.tape.reshape(m, &[b, 1, d])?);
        }
        Ok(ctx.tape.concat(&tokens)?)
    }

    /// Inference-mode predictions [B, output_dim].
    pub fn predict(&self, batch: &EncodedBatch) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::Infer, false)?;
        Ok(tape.value(out.pred).clone())
    }

    /// Inference-mode predictions with every attention matrix.
    pub fn predict_traced(&self, batch: &EncodedBatch) -> Result<(Tensor, AttentionTrace), ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::Infer, true)?;
        Ok((tape.value(out.pred).clone(), out.trace.expect("trace requested")))
    }

    /// Per-group sequences after the conv blocks and feature embeddings,
    /// in inference mode.
    pub fn feature_division_values(&self, batch: &EncodedBatch) -> Result<[Tensor; 4], ModelError> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, false, false);
        let vars = self.feature_division(&mut ctx, batch)?;
        Ok(vars.map(|v| tape.value(v).clone()))
    }

    /// Runs one group's intra-group stack on `seq` ([B, n, d]). `key_mask`
    /// ([B, n], true = attend) masks keys as the char group does. Returns
    /// the output and per-layer attention [B, heads, n, n].
    pub fn intra_group_attention(
        &self,
        group: ModelGroup,
        seq: &Tensor,
        key_mask: Option<&[bool]>,
    ) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        if !self.config.intra.get(group) {
            return Ok((seq.clone(), Vec::new()));
        }
        self.run_stack(&format!("intra.{group}"), seq, key_mask)
    }

    /// Runs the inter-group stack on group tokens ([B, m, d]).
    pub fn inter_group_attention(&self, tokens: &Tensor) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        self.run_stack("inter", tokens, None)
    }

    fn run_stack(&self, prefix: &str, seq: &Tensor, key_mask: Option<&[bool]>) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        let s = seq.shape();
        if s.len() != 3 || s[1] == 0 || s[2] != self.config.d_model {
            return Err(ModelError::Batch(format!("sequence must be [B, n >= 1, {}], got {s:?}", self.config.d_model)));
        }
        let (b, n, h) = (s[0], s[1], self.config.heads);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, false, false);
        let x = ctx.tape.constant(seq.clone());
        let bias = match key_mask {
            None => None,
            Some(m) if m.len() != b * n => return Err(ModelError::Batch("key mask must be [B, n]".into())),
            Some(m) => {
                let mut bias = vec![0.0; b * h * n * n];
                for (i, v) in bias.iter_mut().enumerate() {
                    let (sample, key) = (i / (h * n * n), i % n);
                    if !m[sample * n + key] {
                        *v = MASKED_SCORE;
                    }
                }
                Some(ctx.tape.constant(Tensor::new(vec![b * h, n, n], bias)?))
            }
        };
        let mut attn = Vec::new();
        let out = self.stack(&mut ctx, x, prefix, bias, Some(&mut attn))?;
        Ok((tape.value(out).clone(), attn))
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<(), ModelError> {
        let m = self.config.bn_momentum;
        for (prefix, stats) in updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let p = self.params.get_mut(&format!("{prefix}.{suffix}"))?;
                for (r, v) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = m * *r + (1.0 - m) * v;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        let meta = serde_json::json!({
            "config": self.config,
            "features": self.feature_names,
            "extra": extra,
        });
        write_checkpoint(path, &self.params, &meta)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Ncpp::save`]; returns the model and
    /// the `extra` metadata.
    pub fn load(path: &Path, schema: &FeatureSchema) -> Result<(Ncpp, serde_json::Value), ModelError> {
        let ckpt = read_checkpoint(path)?;
        let config: NcppConfig = serde_json::from_value(ckpt.meta["config"].clone()).map_err(|e| ModelError::Meta(e.to_string()))?;
        let names: Vec<String> = serde_json::from_value(ckpt.meta["features"].clone()).map_err(|e| ModelError::Meta(e.to_string()))?;
        if names.iter().map(String::as_str).ne(schema.names()) {
            return Err(ModelError::Meta("checkpoint was trained on a different feature schema".into()));
        }
        let fresh = init_model(&config, schema)?;
        let fresh_paths: Vec<&str> = fresh.params.paths().collect();
        if ckpt.params.paths().ne(fresh_paths.iter().copied()) {
            return Err(ModelError::Meta("checkpoint parameters do not match its config".into()));
        }
        for (path, p) in fresh.params.iter() {
            if ckpt.params.value(path)?.shape() != p.value.shape() {
                return Err(ModelError::Meta(format!("parameter {path} has the wrong shape")));
            }
        }
        let extra = ckpt.meta["extra"].clone();
        Ok((Ncpp { params: ckpt.params, ..fresh }, extra))
    }
}

impl Ctx<'_> {
    fn p_table(&mut self) -> Result<Var, TensorError> {
        self.p("char.embedding")
    }
}

fn attention_tensor(attn: &Tensor, heads: usize) -> Tensor {
    let s = attn.shape();
    Tensor::new(vec![s[0] / heads, heads, s[1], s[2]], attn.data().to_vec()).expect("same length")
}

/// Closed-form trainable parameter count (see the README).
pub fn parameter_count(config: &NcppConfig, partition: &GroupPartition) -> usize {
    let (d, f, ffn, e, v) = (config.d_model, config.filters(), config.ffn(), config.embed_dim, config.vocab_size);
    let conv = |c: usize| 2 * c * f + f * f + 7 * f;
    let layer = 4 * d * d + 2 * d * ffn + ffn + 5 * d;
    let total_features: usize = ModelGroup::ALL.iter().map(|&g| partition.len(g)).sum();
    let enabled = ModelGroup::ALL.iter().filter(|&&g| config.intra.get(g)).count();
    v * e
        + conv(e)
        + conv(1)
        + if config.feature_embedding { total_features * d } else { 0 }
        + (enabled + 1) * config.layers * layer
        + 4 * d * config.output_dim
        + config.output_dim
}
