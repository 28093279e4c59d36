use ndarray::array;

use super::*;
use crate::prompt::{BOS, EOS, PAD};

fn config(n_enc: usize, d_model: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: n_enc,
        n_dec_layers: 1,
        d_model,
        n_heads: heads,
        d_k: None,
        d_ff: 2 * d_model,
        vocab_size: vocab,
        max_source_len: 16,
        max_target_len: 8,
    }
}

fn stack_of(layers: Vec<NumArray>, source_ids: Vec<usize>) -> EncoderStack {
    EncoderStack {
        key_mask: source_ids.iter().map(|&id| id != PAD).collect(),
        memory: layers.last().unwrap().clone(),
        self_attention: Vec::new(),
        layers,
        source_ids,
    }
}

/// Encoder layers add a large multiple of the normalized positional encoding
/// (an identity map through ReLU pairs), so every layer's keys share the
/// decoder query's normalization; copy queries then match their own position.
pub(crate) fn hardwire_copy(model: &mut PgcModel) {
    let d = model.config.d_model;
    let d_ff = model.config.d_ff;
    assert!(d_ff >= 2 * d);
    let names: Vec<String> = model.store.names().to_vec();
    for name in names {
        let zero = name == "embed"
            || name.ends_with(".o")
            || name.ends_with(".w2")
            || name.ends_with(".b1")
            || name.ends_with(".b2")
            || name == "copy.w_c"
            || name == "copy.w_gs";
        if zero {
            let shape = model.param(&name).unwrap().dim();
            model.set_param(&name, NumArray::zeros(shape)).unwrap();
        }
    }
    let gain = 1000.0;
    let w1 = NumArray::from_shape_fn((d, d_ff), |(r, c)| match c {
        c if c == r => 1.0,
        c if c == r + d => -1.0,
        _ => 0.0,
    });
    let w2 = NumArray::from_shape_fn((d_ff, d), |(r, c)| match r {
        r if r == c => gain,
        r if r == c + d => -gain,
        _ => 0.0,
    });
    let centering = NumArray::from_shape_fn((d, d), |(r, c)| {
        (if r == c { 1.0 } else { 0.0 }) - 1.0 / d as f64
    });
    for i in 0..model.config.n_enc_layers {
        model
            .set_param(&format!("enc.{i}.ffn.w1"), w1.clone())
            .unwrap();
        model
            .set_param(&format!("enc.{i}.ffn.w2"), w2.clone())
            .unwrap();
        model
            .set_param(&format!("copy.w_h.{i}"), centering.clone())
            .unwrap();
    }
    model.set_param("copy.w_s", NumArray::eye(d) * 0.1).unwrap();
    model
        .set_param("copy.gate_bias", NumArray::from_elem((1, 1), -50.0))
        .unwrap();
}

#[test]
fn single_position_source() {
    let m = PgcModel::new(config(2, 8, 2, 12), 0).unwrap();
    let stack = encode(&m, &[5]).unwrap();
    assert!(stack.layers.iter().all(|h| h.nrows() == 1));
}

#[test]
fn layer_count_follows_config() {
    for n in [1, 2, 6] {
        let m = PgcModel::new(config(n, 8, 2, 12), 0).unwrap();
        assert_eq!(encode(&m, &[4, 5]).unwrap().layers.len(), n);
        assert_eq!(m.layer_weights().len(), n);
    }
}

#[test]
fn padded_suffix_leaves_real_positions_unchanged() {
    let m = PgcModel::new(config(2, 8, 2, 12), 1).unwrap();
    let plain = encode(&m, &[5, 6, 7]).unwrap();
    let padded = encode(&m, &[5, 6, 7, PAD, PAD]).unwrap();
    for (a, b) in plain.layers.iter().zip(&padded.layers) {
        for r in 0..3 {
            for c in 0..8 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn equal_logits_split_evenly() {
    let mut m = PgcModel::new(config(2, 4, 1, 8), 2).unwrap();
    m.set_param("copy.w_s", NumArray::zeros((4, 4))).unwrap();
    let stack = encode(&m, &[4, 5]).unwrap();
    let alpha = copy_attention(&m, &NumArray::ones((1, 4)), &stack).unwrap();
    assert_eq!(alpha, array![[0.5, 0.5]]);
}

#[test]
fn convex_combination_of_views() {
    let alpha = combine_views(&[array![[1.0, 0.0]], array![[0.0, 1.0]]], &[0.25, 0.75]).unwrap();
    assert_eq!(alpha, array![[0.25, 0.75]]);
}

#[test]
fn scatter_examples() {
    let p = scatter_copy(&[0.2, 0.5, 0.3], &[4, 5, 4], 6).unwrap();
    assert!((p[4] - 0.5).abs() < 1e-15);
    assert_eq!(p[5], 0.5);
    let q = scatter_copy(&[0.1, 0.6, 0.3], &[2, 0, 1], 3).unwrap();
    assert_eq!(q, vec![0.6, 0.3, 0.1]);
}

#[test]
fn gate_examples() {
    let mut m = PgcModel::new(config(1, 2, 1, 6), 3).unwrap();
    let stack = stack_of(vec![array![[1.0, 2.0], [3.0, -1.0]]], vec![4, 5]);
    m.set_param("copy.w_c", NumArray::zeros((2, 1))).unwrap();
    m.set_param("copy.w_gs", NumArray::zeros((2, 1))).unwrap();
    assert_eq!(
        generation_gate(&m, &[0.4, -0.6], &[0.25, 0.75], &stack).unwrap(),
        0.5
    );

    m.set_param("copy.gate_bias", array![[60.0]]).unwrap();
    assert!(generation_gate(&m, &[0.4, -0.6], &[0.25, 0.75], &stack).unwrap() > 1.0 - 1e-12);

    m.set_param("copy.w_c", array![[0.3], [-0.2]]).unwrap();
    m.set_param("copy.w_gs", array![[0.5], [0.1]]).unwrap();
    m.set_param("copy.gate_bias", array![[0.1]]).unwrap();
    // c = [2.5, -0.25]; logit = 0.75 + 0.05 + 0.2 - 0.06 + 0.1
    let expected = 1.0 / (1.0 + (-1.04f64).exp());
    let got = generation_gate(&m, &[0.4, -0.6], &[0.25, 0.75], &stack).unwrap();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn vocab_examples() {
    let mut m = PgcModel::new(config(1, 2, 1, 5), 4).unwrap();
    m.set_param("copy.w_v", NumArray::zeros((2, 5))).unwrap();
    assert!(vocab_distribution(&m, &[0.3, 0.9])
        .unwrap()
        .iter()
        .all(|&p| (p - 0.2).abs() < 1e-15));

    m.set_param(
        "copy.w_v",
        array![[1.0, 2.0, 3.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0]],
    )
    .unwrap();
    m.set_param("copy.b_v", array![[0.0, 0.0, -1.0, -1e9, -1e9]])
        .unwrap();
    let p = vocab_distribution(&m, &[1.0, 0.0]).unwrap();
    let e = 1f64.exp();
    let expected = [
        1.0 / (1.0 + 2.0 * e),
        e / (1.0 + 2.0 * e),
        e / (1.0 + 2.0 * e),
    ];
    for (a, b) in p.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }

    let shifted_b: NumArray = m.param("copy.b_v").unwrap() + 7.0;
    let before = decode::argmax(&vocab_distribution(&m, &[0.2, -0.4]).unwrap());
    m.set_param("copy.b_v", shifted_b).unwrap();
    assert_eq!(
        decode::argmax(&vocab_distribution(&m, &[0.2, -0.4]).unwrap()),
        before
    );
}

#[test]
fn mix_examples() {
    let pv = [0.5, 0.5, 0.0];
    let pc = [0.0, 0.25, 0.75];
    assert_eq!(mix(1.0, &pv, &pc).unwrap(), pv.to_vec());
    assert_eq!(mix(0.0, &pv, &pc).unwrap(), pc.to_vec());
    assert!((mix(0.4, &pv, &pc).unwrap()[1] - 0.35).abs() < 1e-15);
}

#[test]
fn decode_step_is_deterministic() {
    let m = PgcModel::new(config(2, 8, 2, 12), 5).unwrap();
    let stack = encode(&m, &[4, 12, 6]).unwrap();
    let a = decode_step(&m, &stack, &[BOS, 7], 13).unwrap();
    let b = decode_step(&m, &stack, &[BOS, 7], 13).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pure_copying_picks_a_source_token() {
    for seed in 0..20 {
        let mut m = PgcModel::new(config(2, 8, 2, 12), seed).unwrap();
        m.set_param("copy.gate_bias", array![[-1e3]]).unwrap();
        m.set_param("copy.w_c", NumArray::zeros((8, 1))).unwrap();
        m.set_param("copy.w_gs", NumArray::zeros((8, 1))).unwrap();
        let src = [9, 13, 5, 9];
        let stack = encode(&m, &src).unwrap();
        let step = decode_step(&m, &stack, &[BOS], 14).unwrap();
        assert!(src.contains(&decode::argmax(&step.p_final)));
    }
}

#[test]
fn hardwired_copy_reproduces_the_source() {
    let mut cfg = config(2, 64, 4, 40);
    cfg.d_ff = 128;
    cfg.d_k = Some(64);
    cfg.max_target_len = 12;
    let mut m = PgcModel::new(cfg, 6).unwrap();
    hardwire_copy(&mut m);
    let src = [17, 4, 45, 23, 9, 41, 30, 4, 12, 8];
    assert_eq!(greedy_decode(&m, &src, 46, 10).unwrap(), src.to_vec());
    assert_eq!(greedy_decode(&m, &src, 46, 4).unwrap(), src[..4].to_vec());
    assert_eq!(greedy_decode(&m, &src, 46, 1).unwrap(), vec![17]);
    assert!(!greedy_decode(&m, &src, 46, 10).unwrap().contains(&EOS));
}

#[test]
fn last_layer_two_head_export() {
    let m = PgcModel::new(config(2, 8, 2, 12), 7).unwrap();
    let stack = encode(&m, &[4, 5, 6, 7]).unwrap();
    let toks: Vec<String> = ["did", "she", "return", "?"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mats = export_attention(&stack, &toks, 1, Some(&[0, 1])).unwrap();
    assert_eq!(mats.len(), 2);
    for mat in &mats {
        assert_eq!(mat.weights.dim(), (4, 4));
        for row in mat.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
