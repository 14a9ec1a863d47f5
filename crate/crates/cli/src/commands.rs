use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::info;

use ncpp_core::encode::Transforms;
use ncpp_core::evaluation::export_report;
use ncpp_core::explain::{export_importance, importance_report, Reduction, SampleSelection};
use ncpp_core::ingest::{
    apply_dimm_expansion, consolidate_multi_output, filter_outliers, parse_csv, write_raw_csv, Dataset, DimmLookup, IncompletePolicy,
    BENCHMARK_COLUMN, SCORE_COLUMN,
};
use ncpp_core::model::{AblationArm, Ncpp};
use ncpp_core::schema::{load_schema, FeatureSchema, SuiteSpec};
use ncpp_core::synth::{dimm_lookup, generate, to_raw_records, Family, SynthConfig};
use ncpp_core::training::{
    ablation_table, cross_validate, evaluate_model, predict_dataset, run_ablation_suite, run_fixed_split, TrainConfig, TrainOptions,
    BEST_CHECKPOINT,
};

use crate::exit::UsageError;
use crate::manifest::{FileHash, RunManifest};
use crate::{
    AblateArgs, Command, Common, DataArgs, ExplainArgs, FamilyArg, Hyper, IngestArgs, ModelArgs, Policy, ReductionArg, SynthArgs, TrainArgs,
};

pub const SEED_ENV: &str = "NCPP_SEED";
pub const CONFIG_FILE: &str = "config.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Synth(a) => synth(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Collects inputs and artifacts for the manifest.
struct Run {
    command: &'static str,
    start: Instant,
    out_dir: PathBuf,
    config: Option<FileHash>,
    inputs: Vec<FileHash>,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, out_dir: &Path) -> Result<Run> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run { command, start: Instant::now(), out_dir: out_dir.to_path_buf(), config: None, inputs: vec![], artifacts: vec![] })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileHash::of(path).with_context(|| format!("reading {}", path.display()))?);
        Ok(())
    }

    fn config_file(&mut self, path: Option<&Path>) -> Result<()> {
        if let Some(p) = path {
            self.config = Some(FileHash::of(p).with_context(|| format!("reading {}", p.display()))?);
        }
        Ok(())
    }

    fn wrote(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    fn finish(self, effective: serde_json::Value, seed: Option<u64>) -> Result<()> {
        let artifacts = self
            .artifacts
            .iter()
            .map(|p| FileHash::of(p).with_context(|| format!("hashing {}", p.display())))
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            effective_config: effective,
            inputs: self.inputs,
            seed,
            artifacts,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        let path = manifest.write(&self.out_dir).context("writing manifest")?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| UsageError(format!("{SEED_ENV}='{v}' is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

fn schema_of(common: &Common, fallback_dir: Option<&Path>) -> Result<FeatureSchema> {
    if let Some(p) = &common.schema {
        return Ok(load_schema(p)?);
    }
    if let Some(p) = fallback_dir.map(|d| d.join(SCHEMA_FILE)).filter(|p| p.exists()) {
        return Ok(load_schema(&p)?);
    }
    Ok(FeatureSchema::default_schema())
}

/// Defaults, then the config file, then NCPP_SEED, then flags.
fn train_config(hyper: &Hyper, suite: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = match &hyper.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.model.seed = s;
    }
    if let Some(s) = hyper.seed {
        cfg.model.seed = s;
    }
    if let Some(s) = suite {
        cfg.suite = s.to_string();
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.epochs, hyper.epochs);
    set(&mut cfg.batch_size, hyper.batch_size);
    set(&mut cfg.model.heads, hyper.heads);
    set(&mut cfg.model.layers, hyper.layers);
    set(&mut cfg.model.d_model, hyper.d_model);
    set(&mut cfg.k, hyper.k);
    if let Some(d) = hyper.delta {
        cfg.model.huber_delta = d;
    }
    if let Some(lr) = hyper.lr {
        cfg.lr_initial = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_raw(path: &Path) -> Result<bool> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?;
    Ok(headers.iter().any(|h| h == BENCHMARK_COLUMN) && headers.iter().any(|h| h == SCORE_COLUMN))
}

struct Ingested {
    dataset: Dataset,
    summary: serde_json::Value,
}

fn ingest_raw(
    path: &Path,
    schema: &FeatureSchema,
    suite: &SuiteSpec,
    dimm: Option<&Path>,
    z: Option<f64>,
    policy: IncompletePolicy,
) -> Result<Ingested> {
    let mut rows = parse_csv(path, schema).with_context(|| format!("parsing {}", path.display()))?;
    let n_rows = rows.len();
    let mut missing_parts = 0;
    if let Some(p) = dimm {
        let lookup = DimmLookup::load(p).with_context(|| format!("reading {}", p.display()))?;
        missing_parts = apply_dimm_expansion(&mut rows, &lookup);
    }
    let (rows, removed) = match z {
        Some(t) => filter_outliers(rows, t),
        None => (rows, 0),
    };
    let (dataset, report) = consolidate_multi_output(&rows, schema, suite, policy)?;
    info!("{n_rows} rows, {removed} outliers removed, {} configurations", dataset.len());
    let summary = serde_json::json!({
        "rows": n_rows,
        "outliers_removed": removed,
        "unknown_dimm_parts": missing_parts,
        "consolidation": report,
    });
    Ok(Ingested { dataset, summary })
}

fn load_data(args: &DataArgs, schema: &FeatureSchema, suite: &SuiteSpec, run: &mut Run) -> Result<Dataset> {
    run.input(&args.data)?;
    if let Some(p) = &args.dimm {
        run.input(p)?;
    }
    let data = if is_raw(&args.data)? {
        let z = (!args.no_filter).then_some(args.z_threshold);
        ingest_raw(&args.data, schema, suite, args.dimm.as_deref(), z, IncompletePolicy::Drop)?.dataset
    } else {
        Dataset::read_csv(&args.data, schema, suite).with_context(|| format!("reading {}", args.data.display()))?
    };
    if data.is_empty() {
        anyhow::bail!(ncpp_core::ingest::IngestError::Consolidated(format!("{} holds no usable records", args.data.display())));
    }
    Ok(data)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut run = Run::new("ingest", &a.common.out_dir)?;
    let schema = schema_of(&a.common, None)?;
    let suite = SuiteSpec::by_name(a.common.suite.as_deref().unwrap_or("SPECrate2017_fp_base"))?;
    run.input(&a.input)?;
    if let Some(p) = &a.dimm {
        run.input(p)?;
    }
    let policy = match a.policy {
        Policy::Drop => IncompletePolicy::Drop,
        Policy::Mask => IncompletePolicy::Mask,
    };
    let z = (!a.no_filter).then_some(a.z_threshold);
    let got = ingest_raw(&a.input, &schema, &suite, a.dimm.as_deref(), z, policy)?;
    let out = a.out.clone().unwrap_or_else(|| a.common.out_dir.join("consolidated.csv"));
    got.dataset.write_csv(&out)?;
    run.wrote(&out);
    let report = a.common.out_dir.join("ingest_report.json");
    fs::write(&report, serde_json::to_string_pretty(&got.summary)?)?;
    run.wrote(&report);
    let effective = serde_json::json!({
        "suite": suite.name,
        "z_threshold": z,
        "policy": format!("{:?}", a.policy).to_lowercase(),
        "schema_hash": schema.hash(),
    });
    run.finish(effective, None)
}

fn save_run_files(cfg: &TrainConfig, schema: &FeatureSchema, transforms: &Transforms, dir: &Path, run: &mut Run) -> Result<()> {
    transforms.save(dir)?;
    run.wrote(dir.join(ncpp_core::encode::NORMALIZER_FILE));
    run.wrote(dir.join(ncpp_core::encode::VOCAB_FILE));
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    run.wrote(dir.join(CONFIG_FILE));
    fs::write(dir.join(SCHEMA_FILE), schema.to_json())?;
    run.wrote(dir.join(SCHEMA_FILE));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train", &a.common.out_dir)?;
    run.config_file(a.hyper.config.as_deref())?;
    let cfg = train_config(&a.hyper, a.common.suite.as_deref())?;
    let schema = schema_of(&a.common, None)?;
    let suite = SuiteSpec::by_name(&cfg.suite)?;
    let data = load_data(&a.data, &schema, &suite, &mut run)?;
    let dir = &a.common.out_dir;
    let options = TrainOptions { checkpoint_dir: Some(dir.clone()), log_every: a.log_every };
    let out = run_fixed_split(&cfg, &data, &options)?;
    run.wrote(dir.join(BEST_CHECKPOINT));
    let final_path = dir.join(FINAL_CHECKPOINT);
    out.outcome.model.save(&final_path, serde_json::json!({ "epoch": cfg.epochs - 1, "suite": suite.name }))?;
    run.wrote(&final_path);
    save_run_files(&cfg, &schema, &out.transforms, dir, &mut run)?;
    let history = dir.join("history.csv");
    out.outcome.history.write_csv(&history)?;
    run.wrote(&history);
    let split = dir.join("split.json");
    fs::write(&split, serde_json::to_string(&out.split)?)?;
    run.wrote(&split);
    for p in export_report(&out.test_report, dir, "test_report")? {
        run.wrote(p);
    }
    let m = &out.test_report.overall;
    println!("best epoch {}: test MAE {:.4} MSE {:.4} MAPE {:.2}%", out.outcome.best_epoch, m.mae, m.mse, 100.0 * m.mape);
    let seed = cfg.seed();
    run.finish(serde_json::to_value(&cfg)?, Some(seed))
}

fn cv(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("cv", &a.common.out_dir)?;
    run.config_file(a.hyper.config.as_deref())?;
    let cfg = train_config(&a.hyper, a.common.suite.as_deref())?;
    let schema = schema_of(&a.common, None)?;
    let suite = SuiteSpec::by_name(&cfg.suite)?;
    let data = load_data(&a.data, &schema, &suite, &mut run)?;
    let dir = &a.common.out_dir;
    let options = TrainOptions { checkpoint_dir: Some(dir.clone()), log_every: a.log_every };
    let out = cross_validate(&cfg, &data, &options)?;
    for (f, report) in out.folds.iter().enumerate() {
        run.wrote(dir.join(format!("fold{f}")).join(BEST_CHECKPOINT));
        for p in export_report(report, dir, &format!("fold{f}_report"))? {
            run.wrote(p);
        }
    }
    for p in export_report(&out.aggregate, dir, "cv_report")? {
        run.wrote(p);
    }
    let m = &out.aggregate.overall;
    println!("{}-fold mean: MAE {:.4} MSE {:.4} MAPE {:.2}%", out.folds.len(), m.mae, m.mse, 100.0 * m.mape);
    let seed = cfg.seed();
    run.finish(serde_json::to_value(&cfg)?, Some(seed))
}

struct Loaded {
    model: Ncpp,
    transforms: Transforms,
    suite: SuiteSpec,
    data: Dataset,
    config: serde_json::Value,
}

/// Checkpoint, transforms and data; suite and schema fall back to the
/// files train wrote next to the checkpoint.
fn load_model(a: &ModelArgs, run: &mut Run) -> Result<Loaded> {
    let model_dir = a.model.parent().map(Path::to_path_buf).unwrap_or_default();
    let schema = schema_of(&a.common, Some(&model_dir))?;
    let saved: Option<TrainConfig> = match fs::read_to_string(model_dir.join(CONFIG_FILE)) {
        Ok(text) => Some(TrainConfig::from_json(&text)?),
        Err(_) => None,
    };
    let suite_name =
        a.common.suite.clone().or_else(|| saved.as_ref().map(|c| c.suite.clone())).unwrap_or_else(|| "SPECrate2017_fp_base".into());
    let suite = SuiteSpec::by_name(&suite_name)?;
    run.input(&a.model)?;
    let (model, _) = Ncpp::load(&a.model, &schema).with_context(|| format!("loading {}", a.model.display()))?;
    if model.config.output_dim != suite.output_dim() {
        return Err(UsageError(format!(
            "checkpoint predicts {} outputs but suite {} has {}",
            model.config.output_dim,
            suite.name,
            suite.output_dim()
        ))
        .into());
    }
    let tdir = a.transforms.clone().unwrap_or(model_dir);
    let transforms = Transforms::load(&tdir).with_context(|| format!("loading transforms from {}", tdir.display()))?;
    run.input(&tdir.join(ncpp_core::encode::NORMALIZER_FILE))?;
    run.input(&tdir.join(ncpp_core::encode::VOCAB_FILE))?;
    let data = load_data(&a.data, &schema, &suite, run)?;
    let config = serde_json::json!({ "suite": suite.name, "model": model.config, "schema_hash": schema.hash() });
    Ok(Loaded { model, transforms, suite, data, config })
}

fn evaluate(a: ModelArgs) -> Result<()> {
    let mut run = Run::new("evaluate", &a.common.out_dir)?;
    let l = load_model(&a, &mut run)?;
    let report = evaluate_model(&l.model, &l.data, &l.transforms, 64)?;
    let stem = a.stem.as_deref().unwrap_or("eval_report");
    for p in export_report(&report, &a.common.out_dir, stem)? {
        run.wrote(p);
    }
    let m = &report.overall;
    println!("MAE {:.4} MSE {:.4} MAPE {:.2}% over {} records", m.mae, m.mse, 100.0 * m.mape, l.data.len());
    let seed = l.model.config.seed;
    run.finish(l.config, Some(seed))
}

fn predict(a: ModelArgs) -> Result<()> {
    let mut run = Run::new("predict", &a.common.out_dir)?;
    let l = load_model(&a, &mut run)?;
    let pred = predict_dataset(&l.model, &l.data, &l.transforms, 64)?;
    let path = a.common.out_dir.join(format!("{}.csv", a.stem.as_deref().unwrap_or("predictions")));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["record".to_string()];
    header.extend(l.suite.benchmarks.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in pred.rows().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    run.wrote(&path);
    println!("wrote {} predictions to {}", l.data.len(), path.display());
    let seed = l.model.config.seed;
    run.finish(l.config, Some(seed))
}

fn explain(a: ExplainArgs) -> Result<()> {
    let mut run = Run::new("explain", &a.model.common.out_dir)?;
    let l = load_model(&a.model, &mut run)?;
    let idx: Vec<usize> = (0..l.data.len()).collect();
    let batch = ncpp_core::encode::encode_batch(&l.data, &idx, &l.transforms)?;
    let sel = if a.mean { SampleSelection::Mean } else { SampleSelection::Index(a.sample) };
    let reduction = match a.reduction {
        ReductionArg::Received => Reduction::Received,
        ReductionArg::Given => Reduction::Given,
    };
    let report = importance_report(&l.model, &batch, &l.suite.name, sel, a.head, a.layer, reduction)?;
    let files = export_importance(&report, &a.model.common.out_dir)?;
    for p in files.scores.iter().chain(&files.matrices).chain([&files.json]) {
        run.wrote(p);
    }
    for g in report.groups.iter().chain([&report.inter]) {
        let (k, s) = g.scores.iter().enumerate().fold((0, f64::MIN), |b, (k, &s)| if s > b.1 { (k, s) } else { b });
        println!("{}: top {} ({:.3})", g.group, g.features[k], s);
    }
    let mut config = l.config;
    config["explain"] = serde_json::json!({ "sample": report.provenance.sample, "head": a.head, "layer": a.layer, "reduction": reduction });
    let seed = l.model.config.seed;
    run.finish(config, Some(seed))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut run = Run::new("synth", &a.common.out_dir)?;
    run.config_file(a.config.as_deref())?;
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("config {}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n {
        cfg.n_records = n;
    }
    if let Some(f) = a.family {
        cfg.family = match f {
            FamilyArg::Linear => Family::Linear,
            FamilyArg::Nonlinear => Family::Nonlinear,
        };
    }
    if let Some(s) = a.noise {
        cfg.noise = s;
    }
    if let Some(s) = &a.common.suite {
        cfg.suite = s.clone();
    }
    let schema = schema_of(&a.common, None)?;
    let s = generate(&cfg, &schema)?;
    let out = a.out.clone().unwrap_or_else(|| a.common.out_dir.join("synth.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    if a.consolidated {
        s.dataset.write_csv(&out)?;
    } else {
        write_raw_csv(&out, &schema, &to_raw_records(&s.dataset))?;
    }
    run.wrote(&out);
    let side = |suffix: &str| {
        let stem = out.file_stem().and_then(|x| x.to_str()).unwrap_or("synth");
        out.with_file_name(format!("{stem}.{suffix}"))
    };
    let truth = side("truth.json");
    fs::write(&truth, s.truth.to_json()?)?;
    run.wrote(&truth);
    let calibration = side("calibration.json");
    fs::write(&calibration, serde_json::to_string_pretty(&s.calibration)?)?;
    run.wrote(&calibration);
    let dimm = side("dimm.csv");
    fs::write(&dimm, dimm_lookup(&s.dataset).to_csv_string())?;
    run.wrote(&dimm);
    println!("{} records, calibration linear MAPE {:.2}%", s.dataset.len(), 100.0 * s.calibration.calibration_linear_mape);
    let seed = cfg.seed;
    run.finish(serde_json::to_value(&cfg)?, Some(seed))
}

fn ablate(a: AblateArgs) -> Result<()> {
    let t = &a.train;
    let mut run = Run::new("ablate", &t.common.out_dir)?;
    run.config_file(t.hyper.config.as_deref())?;
    let cfg = train_config(&t.hyper, t.common.suite.as_deref())?;
    let schema = schema_of(&t.common, None)?;
    let suite = SuiteSpec::by_name(&cfg.suite)?;
    let data = load_data(&t.data, &schema, &suite, &mut run)?;
    let dir = &t.common.out_dir;
    let options = TrainOptions { checkpoint_dir: Some(dir.clone()), log_every: t.log_every };
    let rows = match &a.arm {
        Some(name) => {
            let arm = AblationArm::parse(name).ok_or_else(|| {
                let names: Vec<&str> = AblationArm::ALL.iter().map(|a| a.name()).collect();
                UsageError(format!("unknown arm '{name}', expected one of {}", names.join(", ")))
            })?;
            let arm_cfg = TrainConfig { ablation: arm, ..cfg.clone() };
            let arm_options = TrainOptions { checkpoint_dir: Some(dir.join(arm.name())), ..options.clone() };
            let out = run_fixed_split(&arm_cfg, &data, &arm_options)?;
            vec![ncpp_core::training::AblationRow { arm, description: arm.description().to_string(), report: out.test_report }]
        }
        None => run_ablation_suite(&cfg, &data, &options)?,
    };
    for r in &rows {
        run.wrote(dir.join(r.arm.name()).join(BEST_CHECKPOINT));
        for p in export_report(&r.report, dir, &format!("ablation_{}", r.arm.name()))? {
            run.wrote(p);
        }
    }
    let table = ablation_table(&rows);
    let path = dir.join("ablation.csv");
    fs::write(&path, &table)?;
    run.wrote(&path);
    print!("{table}");
    let mut effective = serde_json::to_value(&cfg)?;
    effective["arms"] = serde_json::json!(rows.iter().map(|r| r.arm.name()).collect::<Vec<_>>());
    let seed = cfg.seed();
    run.finish(effective, Some(seed))
}
