mod common;

use common::*;
use ncpp_core::ingest::FeatureValue;
use ncpp_core::model::AblationArm;
use ncpp_core::schema::{FeatureKind, ModelGroup};
use ncpp_core::synth::Family;
use ncpp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq(b: usize, n: usize, d: usize, seed: u64) -> Seq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b).map(|_| (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()).collect()
}

#[test]
fn full_forward_matches_oracle() {
    let data = synthetic(6, Family::Nonlinear, 3);
    let (mut model, batch) = small_model(&data, 8, 2, 2, 11);
    perturb(&mut model, 12);
    let (pred, trace) = model.predict_traced(&batch).unwrap();
    let want = forward(&model, &batch);
    let flat: Vec<f64> = want.pred.concat();
    assert!(max_abs_diff(pred.data(), &flat) < 1e-10);
    for g in ModelGroup::ALL {
        for (l, a) in trace.intra[g.index()].iter().enumerate() {
            assert!(max_abs_diff(a.data(), &flatten_attn(&want.intra[g.index()][l])) < 1e-10, "intra {g} layer {l}");
        }
    }
    for (l, a) in trace.inter.iter().enumerate() {
        assert!(max_abs_diff(a.data(), &flatten_attn(&want.inter[l])) < 1e-10, "inter layer {l}");
    }
}

#[test]
fn division_matches_oracle() {
    let data = synthetic(4, Family::Linear, 8);
    let (mut model, batch) = small_model(&data, 8, 2, 1, 2);
    perturb(&mut model, 3);
    let got = model.feature_division_values(&batch).unwrap();
    let want = forward(&model, &batch);
    for g in ModelGroup::ALL {
        assert!(max_abs_diff(got[g.index()].data(), from_seq(&want.division[g.index()]).data()) < 1e-12);
    }
}

#[test]
fn group_stacks_on_random_inputs() {
    let data = synthetic(4, Family::Linear, 1);
    let (model, _) = small_model(&data, 8, 4, 2, 5);
    let x = random_seq(3, 5, 8, 9);
    for g in ModelGroup::ALL {
        let (out, attn) = model.intra_group_attention(g, &from_seq(&x), None).unwrap();
        let (want, want_attn) = stack(&model, &format!("intra.{g}"), &x, None);
        assert!(max_abs_diff(out.data(), from_seq(&want).data()) < 1e-10);
        for (a, w) in attn.iter().zip(&want_attn) {
            assert!(max_abs_diff(a.data(), &flatten_attn(w)) < 1e-10);
        }
    }
    let tokens = random_seq(2, 4, 8, 10);
    let (out, _) = model.inter_group_attention(&from_seq(&tokens)).unwrap();
    assert!(max_abs_diff(out.data(), from_seq(&stack(&model, "inter", &tokens, None).0).data()) < 1e-10);
}

#[test]
fn key_mask_matches_oracle() {
    let data = synthetic(4, Family::Linear, 1);
    let (model, _) = small_model(&data, 8, 2, 1, 5);
    let x = random_seq(2, 4, 8, 3);
    let mask = vec![vec![true, false, true, false], vec![false, true, true, true]];
    let flat: Vec<bool> = mask.concat();
    let (out, attn) = model.intra_group_attention(ModelGroup::Char, &from_seq(&x), Some(&flat)).unwrap();
    let (want, want_attn) = stack(&model, "intra.char", &x, Some(&mask));
    assert!(max_abs_diff(out.data(), from_seq(&want).data()) < 1e-10);
    assert!(max_abs_diff(attn[0].data(), &flatten_attn(&want_attn[0])) < 1e-10);
    // Masked keys receive exactly zero weight.
    let a = &want_attn[0];
    assert!(a[0].iter().flatten().all(|row| row[1] == 0.0 && row[3] == 0.0));
}

#[test]
fn empty_categorical_values_follow_the_mask_rule() {
    let mut data = synthetic(3, Family::Linear, 4);
    let char_idx = data.schema.features().iter().position(|f| f.kind == FeatureKind::Categorical).unwrap();
    data.records[0].features[char_idx] = FeatureValue::Text(String::new());
    for (j, f) in data.schema.features().to_vec().iter().enumerate() {
        if f.kind == FeatureKind::Categorical {
            data.records[1].features[j] = FeatureValue::Missing;
        }
    }
    let (mut model, batch) = small_model(&data, 8, 2, 1, 6);
    perturb(&mut model, 7);
    let (pred, _) = model.predict_traced(&batch).unwrap();
    assert!(max_abs_diff(pred.data(), &forward(&model, &batch).pred.concat()) < 1e-10);
}

#[test]
fn ablated_models_match_oracle() {
    let data = synthetic(4, Family::Linear, 2);
    for arm in AblationArm::ALL {
        let t = ncpp_core::encode::Transforms::fit(&data, ncpp_core::encode::NormalizerKind::Zscore, 100).unwrap();
        let base = ncpp_core::model::NcppConfig {
            d_model: 8,
            vocab_size: t.tokenizer.vocab.len(),
            output_dim: data.suite.output_dim(),
            ..Default::default()
        };
        let model = ncpp_core::model::init_model(&arm.apply(&base), &data.schema).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let batch = ncpp_core::encode::encode_batch(&data, &idx, &t).unwrap();
        let pred: Tensor = model.predict(&batch).unwrap();
        assert!(max_abs_diff(pred.data(), &forward(&model, &batch).pred.concat()) < 1e-10, "{}", arm.name());
    }
}
