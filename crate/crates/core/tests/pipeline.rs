mod common;

use common::*;
use ncpp_core::encode::{encode_batch, NormalizerKind, Transforms};
use ncpp_core::ingest::{
    apply_dimm_expansion, consolidate_multi_output, filter_outliers, parse_csv, Dataset, DimmLookup, IncompletePolicy,
};
use ncpp_core::schema::{group_partition, FeatureKind, FeatureSchema, ModelGroup, SuiteSpec};
use ncpp_core::synth::Family;
use ncpp_core::training::{run_fixed_split, TrainConfig, TrainOptions};

fn fixture() -> Dataset {
    let schema = FeatureSchema::default_schema();
    let suite = SuiteSpec::by_name("SPECrate2017_fp_base").unwrap();
    let mut rows = parse_csv(&fixture_path("sample_spr_fp.csv"), &schema).unwrap();
    let lookup = DimmLookup::load(&fixture_path("dimm_lookup.csv")).unwrap();
    assert_eq!(apply_dimm_expansion(&mut rows, &lookup), 0);
    let (rows, _) = filter_outliers(rows, 3.0);
    consolidate_multi_output(&rows, &schema, &suite, IncompletePolicy::Drop).unwrap().0
}

#[test]
fn fixture_flows_through_ingest_and_encode() {
    let data = fixture();
    assert_eq!(data.len(), 4);
    assert_eq!(data.schema.len(), 35);
    let partition = group_partition(&data.schema);
    assert!(ModelGroup::ALL.iter().all(|&g| partition.len(g) > 0));
    // The lookup fills the memory fields left blank in one configuration.
    let rank = data.schema.index_of("DIMM_rank").unwrap();
    assert!(data.records.iter().all(|r| r.features[rank].as_number().is_some()));

    let t = Transforms::fit(&data, NormalizerKind::Zscore, 100).unwrap();
    let batch = encode_batch(&data, &[0, 1, 2, 3], &t).unwrap();
    assert_eq!(batch.n_char, data.schema.count_kind(FeatureKind::Categorical));
    assert_eq!(batch.n_numeric(), data.schema.count_kind(FeatureKind::Numeric));
    assert_eq!(batch.labels.shape(), &[4, 14]);
    assert!(batch.numeric.iter().all(|v| v.is_finite()));
}

#[test]
fn consolidated_csv_round_trips() {
    let data = synthetic(20, Family::Nonlinear, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.csv");
    data.write_csv(&path).unwrap();
    let back = Dataset::read_csv(&path, &data.schema, &data.suite).unwrap();
    assert_eq!(back.records, data.records);
}

fn short_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { epochs: 4, batch_size: 16, ..TrainConfig::default() };
    cfg.model.d_model = 8;
    cfg.model.seed = seed;
    cfg
}

#[test]
fn training_is_reproducible() {
    let data = synthetic(40, Family::Linear, 6);
    let a = run_fixed_split(&short_config(3), &data, &TrainOptions::default()).unwrap();
    let b = run_fixed_split(&short_config(3), &data, &TrainOptions::default()).unwrap();
    assert_eq!(a.outcome.best, b.outcome.best);
    assert!(a.outcome.history.same_trajectory(&b.outcome.history));
    assert_eq!(a.test_report, b.test_report);
    let c = run_fixed_split(&short_config(4), &data, &TrainOptions::default()).unwrap();
    assert_ne!(a.outcome.best, c.outcome.best);
}

#[test]
fn trained_model_matches_oracle() {
    let data = synthetic(40, Family::Nonlinear, 2);
    let run = run_fixed_split(&short_config(1), &data, &TrainOptions::default()).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch = encode_batch(&data, &idx, &run.transforms).unwrap();
    let pred = run.outcome.best.predict(&batch).unwrap();
    assert!(max_abs_diff(pred.data(), &forward(&run.outcome.best, &batch).pred.concat()) < 1e-8);
}
