mod common;

use std::time::Instant;

use cltune_core::autodiff::{max_relative_error, richardson_differences, Tape};
use cltune_core::corpus::{generate_domain, mask_batch, pack_sequences, Domain, DomainSpec, MaskedBatch, MaskingRule, Split};
use cltune_core::model::{init_params, Model, ModelConfig, ParamVector};
use cltune_core::rng::stream_rng;
use common::{relative_error, OracleForward};
use proptest::prelude::*;

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        max_seq_len: 16,
        d_model: 8,
        n_layers: layers,
        n_heads: 2,
        d_ff: 16,
        seed: 3,
    }
}

fn batch_for(config: &ModelConfig, rows: usize, seq_len: usize, seed: u64) -> MaskedBatch {
    let spec = DomainSpec::random(config.vocab_size - 4, 3, seed, seed).unwrap();
    let stream = generate_domain(&spec, rows * seq_len, Domain::Source, Split::Train).unwrap();
    let packed = pack_sequences(&stream, seq_len);
    mask_batch(&packed, config.vocab_size, MaskingRule::default(), &mut stream_rng(seed, "masking"), "masking").unwrap()
}

#[test]
fn parameter_count_matches_hand_tally() {
    let c = ModelConfig {
        vocab_size: 64,
        max_seq_len: 64,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        seed: 0,
    };
    // token 64x32, position 64x32, embedding LN 2x32
    let embeddings = 64 * 32 + 64 * 32 + 2 * 32;
    // q,k,v,o 32x32 + 32 each; LN 2x32; ff 32x64 + 64, 64x32 + 32; LN 2x32
    let block = 4 * (32 * 32 + 32) + 64 + (32 * 64 + 64) + (64 * 32 + 32) + 64;
    // output projection 32x64 + 64
    let head = 32 * 64 + 64;
    let tally = embeddings + 2 * block + head;
    assert_eq!(tally, 23_360);
    assert_eq!(c.param_count(), tally);
    assert_eq!(init_params(&c).unwrap().len(), tally);
}

#[test]
fn forward_matches_straight_line_oracle() {
    let c = tiny(1);
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let batch = batch_for(&c, 3, 12, 5);
    let loss = model.mlm_loss(&params, &batch).unwrap() as f64;
    let p64: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
    let oracle = OracleForward::new(&c, &p64).mlm_loss(&batch);
    assert!(relative_error(loss, oracle) <= 1e-5, "{loss} vs {oracle}");
}

#[test]
fn two_layer_forward_matches_oracle_in_f64() {
    let c = tiny(2);
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let mut batch = batch_for(&c, 2, 10, 8);
    batch = batch.with_padding(3);
    let p64: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
    let ours = model.mlm_loss_in(&p64, &batch).unwrap();
    let oracle = OracleForward::new(&c, &p64).mlm_loss(&batch);
    assert!(relative_error(ours, oracle) <= 1e-12, "{ours} vs {oracle}");
}

#[test]
fn representation_tail_matches_oracle_pooling() {
    let c = tiny(1);
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let rows = vec![vec![5, 9, 7, 12, 4, 4], vec![6, 6, 15, 0, 0, 0]];
    let batch = MaskedBatch::unmasked(&rows, 6).unwrap();
    let reps = model.hidden_representations(&params, &batch).unwrap();
    let p64: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
    let oracle = OracleForward::new(&c, &p64);
    for (r, rep) in reps.iter().enumerate() {
        assert_eq!(rep.len(), 2 * c.d_model);
        let want = oracle.pooled_final(&batch.input_ids[r * 6..(r + 1) * 6], &batch.attention_mask[r * 6..(r + 1) * 6]);
        for (a, b) in rep[c.d_model..].iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn fresh_model_loss_is_near_log_vocab() {
    let c = ModelConfig {
        vocab_size: 64,
        max_seq_len: 64,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        seed: 11,
    };
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let batch = batch_for(&c, 8, 64, 2);
    let loss = model.mlm_loss(&params, &batch).unwrap() as f64;
    let ln_v = (c.vocab_size as f64).ln();
    assert!((loss - ln_v).abs() <= 0.1 * ln_v, "loss {loss} vs ln V {ln_v}");
}

#[test]
fn half_probability_on_label_gives_ln2() {
    let c = tiny(1);
    let model = Model::new(c.clone()).unwrap();
    let mut params = init_params(&c).unwrap();
    let w = model.layout.slot("head.w").unwrap().range();
    let b = model.layout.slot("head.b").unwrap().range();
    params.values[w].fill(0.0);
    let label = 9u32;
    let bias = &mut params.values[b];
    bias.fill(0.0);
    bias[label as usize] = ((c.vocab_size - 1) as f32).ln();
    let mut batch = MaskedBatch::unmasked(&[vec![5, 6, 7, 8]], 4).unwrap();
    batch.mask_positions[0] = vec![2];
    batch.labels[0] = vec![label];
    let loss = model.mlm_loss(&params, &batch).unwrap();
    assert!((loss - std::f32::consts::LN_2).abs() < 1e-6, "{loss}");
}

#[test]
fn loss_only_depends_on_selected_positions() {
    let c = tiny(1);
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let batch = batch_for(&c, 2, 12, 21);
    let base = model.mlm_loss(&params, &batch).unwrap();
    // Reversing the order in which (position, label) pairs are listed does
    // not change which positions contribute.
    let mut reordered = batch.clone();
    for r in 0..reordered.batch_size {
        reordered.mask_positions[r].reverse();
        reordered.labels[r].reverse();
    }
    let other = model.mlm_loss(&params, &reordered).unwrap();
    assert!((base - other).abs() <= 1e-6);
}

#[test]
fn appended_padding_leaves_loss_unchanged() {
    let c = tiny(2);
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let batch = batch_for(&c, 3, 8, 4);
    let base = model.mlm_loss(&params, &batch).unwrap();
    let padded = model.mlm_loss(&params, &batch.with_padding(5)).unwrap();
    assert!((base - padded).abs() <= 1e-6, "{base} vs {padded}");
}

#[test]
fn gradient_matches_finite_differences_on_tiny_model() {
    let started = Instant::now();
    let c = tiny(1);
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let batch = batch_for(&c, 2, 10, 9);
    let p64: Vec<f64> = params.values.iter().map(|&x| x as f64).collect();
    let mut tape = Tape::<f64>::new();
    let loss = model.mlm_loss_on_tape(&mut tape, &p64, &batch).unwrap();
    let analytic = tape.gradient(loss, p64.len()).unwrap();
    let numeric = richardson_differences(&p64, 2e-3, |p| model.mlm_loss_in(p, &batch).unwrap());
    let err = max_relative_error(&analytic, &numeric);
    assert!(err <= 1e-4, "max relative error {err}");
    // The f32 reverse sweep agrees with the f64 one to storage precision.
    let (_, g32) = model.mlm_loss_and_gradient(&params, &batch).unwrap();
    let g32: Vec<f64> = g32.0.iter().map(|&g| g as f64).collect();
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (a, b) in g32.iter().zip(&analytic) {
        assert!((a - b).abs() <= 1e-4 * scale);
    }
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn forward_and_gradient_are_bitwise_deterministic() {
    let c = tiny(2);
    let model = Model::new(c.clone()).unwrap();
    let params = init_params(&c).unwrap();
    let batch = batch_for(&c, 4, 12, 13);
    let (l1, g1) = model.mlm_loss_and_gradient(&params, &batch).unwrap();
    let (l2, g2) = model.mlm_loss_and_gradient(&params, &batch).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(
        g1.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        g2.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(g1.len(), c.param_count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn flatten_unflatten_is_bitwise_identity(values in proptest::collection::vec(any::<f32>(), 1016..=1016)) {
        let c = tiny(1);
        prop_assume!(c.param_count() == 1016);
        let layout = cltune_core::model::ParamLayout::new(&c);
        let v = ParamVector::new(&c, values).unwrap();
        let back = ParamVector::flatten(&c, &v.unflatten(&layout)).unwrap();
        prop_assert_eq!(
            back.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
