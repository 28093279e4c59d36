use super::forward::{key_mask_rows, EncoderStack};
use super::{ModelError, PgcModel, Result};
use crate::tensor::{softmax, Graph, NumArray, TensorError, Var};

/// Graph nodes produced by the copy head for `T` decoder positions.
pub(crate) struct HeadVars {
    /// Combined copy attention `[T × L]`.
    pub alpha: Var,
    /// Per-encoder-layer attention `[T × L]` each.
    pub views: Vec<Var>,
    /// Gate probability `[T × 1]`.
    pub p_gen: Var,
    /// Generator distribution `[T × V]`.
    pub p_vocab: Var,
    /// Copy distribution over the extended vocabulary `[T × E]`.
    pub p_copy: Var,
    /// Mixed output distribution `[T × E]`.
    pub p_final: Var,
}

pub(crate) fn alpha_graph(
    g: &mut Graph,
    model: &PgcModel,
    s: Var,
    layers: &[Var],
    key_mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let ids = &model.layout.copy;
    let scale = 1.0 / (model.config.copy_key_dim() as f64).sqrt();
    let w_s = g.param(ids.w_s);
    let q = g.matmul(s, w_s)?;
    let rows = g.value(q).nrows();
    let mask = key_mask_rows(key_mask, rows);
    let logits = g.param(ids.layer_logits);
    let weights = g.softmax(logits, None)?;
    let mut views = Vec::with_capacity(layers.len());
    let mut alpha: Option<Var> = None;
    for (i, (&h, &w_h)) in layers.iter().zip(&ids.w_h).enumerate() {
        let w_h = g.param(w_h);
        let k = g.matmul(h, w_h)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, scale)?;
        let view = g.softmax(scores, Some(&mask))?;
        let w_i = g.slice_cols(weights, i, 1)?;
        let weighted = g.mul_broadcast(view, w_i)?;
        alpha = Some(match alpha {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
        views.push(view);
    }
    let alpha = alpha.ok_or_else(|| ModelError::Config("no encoder layers".into()))?;
    Ok((alpha, views))
}

fn gate_graph(g: &mut Graph, model: &PgcModel, s: Var, alpha: Var, last_layer: Var) -> Result<Var> {
    let ids = &model.layout.copy;
    let (w_c, w_gs, b) = (g.param(ids.w_c), g.param(ids.w_gs), g.param(ids.gate_bias));
    let context = g.matmul(alpha, last_layer)?;
    let from_context = g.matmul(context, w_c)?;
    let from_state = g.matmul(s, w_gs)?;
    let logit = g.add(from_context, from_state)?;
    let logit = g.add_row(logit, b)?;
    Ok(g.sigmoid(logit)?)
}

fn vocab_graph(g: &mut Graph, model: &PgcModel, s: Var) -> Result<Var> {
    let ids = &model.layout.copy;
    let (w_v, b_v) = (g.param(ids.w_v), g.param(ids.b_v));
    let logits = g.matmul(s, w_v)?;
    let logits = g.add_row(logits, b_v)?;
    Ok(g.softmax(logits, None)?)
}

fn check_extended(model: &PgcModel, source_ids: &[usize], extended_size: usize) -> Result<()> {
    if extended_size < model.config.vocab_size {
        return Err(ModelError::OutOfRange {
            what: "vocab_size",
            index: model.config.vocab_size,
            limit: extended_size + 1,
        });
    }
    if let Some(&bad) = source_ids.iter().find(|&&id| id >= extended_size) {
        return Err(ModelError::OutOfRange {
            what: "source id",
            index: bad,
            limit: extended_size,
        });
    }
    Ok(())
}

pub(crate) fn copy_head(
    g: &mut Graph,
    model: &PgcModel,
    s: Var,
    layers: &[Var],
    key_mask: &[bool],
    source_ids: &[usize],
    extended_size: usize,
) -> Result<HeadVars> {
    check_extended(model, source_ids, extended_size)?;
    let (alpha, views) = alpha_graph(g, model, s, layers, key_mask)?;
    let last = *layers.last().expect("alpha_graph rejects empty layers");
    let p_gen = gate_graph(g, model, s, alpha, last)?;
    let p_vocab = vocab_graph(g, model, s)?;
    let p_copy = g.scatter_cols(alpha, source_ids, extended_size)?;
    let padded = g.pad_cols(p_vocab, extended_size)?;
    let generated = g.mul_broadcast(padded, p_gen)?;
    let p_copy_gate = g.one_minus(p_gen)?;
    let copied = g.mul_broadcast(p_copy, p_copy_gate)?;
    let p_final = g.add(generated, copied)?;
    Ok(HeadVars {
        alpha,
        views,
        p_gen,
        p_vocab,
        p_copy,
        p_final,
    })
}

fn row(values: &[f64]) -> NumArray {
    NumArray::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

fn check_width(model: &PgcModel, what: &'static str, v: &[f64]) -> Result<()> {
    if v.len() != model.config.d_model {
        return Err(TensorError::ShapeMismatch {
            op: what,
            left: (1, v.len()),
            right: (1, model.config.d_model),
        }
        .into());
    }
    Ok(())
}

/// Simplex weights over encoder layers from their unconstrained logits.
pub fn layer_weights(logits: &NumArray) -> Vec<f64> {
    let flat: Vec<f64> = logits.iter().copied().collect();
    softmax(&flat, None).expect("layer logits are finite and unmasked")
}

/// `Σ_i weights[i] · views[i]`.
pub fn combine_views(views: &[NumArray], weights: &[f64]) -> Result<NumArray> {
    let first = views
        .first()
        .ok_or_else(|| ModelError::Config("no attention views".into()))?;
    if views.len() != weights.len() {
        return Err(TensorError::ShapeMismatch {
            op: "combine_views",
            left: (views.len(), 1),
            right: (weights.len(), 1),
        }
        .into());
    }
    let mut out = NumArray::zeros(first.dim());
    for (v, &w) in views.iter().zip(weights) {
        if v.dim() != first.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "combine_views",
                left: first.dim(),
                right: v.dim(),
            }
            .into());
        }
        out.scaled_add(w, v);
    }
    Ok(out)
}

/// Copy attention `[T × L]` for decoder states `s` (`[T × d_model]`).
pub fn copy_attention(model: &PgcModel, s: &NumArray, stack: &EncoderStack) -> Result<NumArray> {
    let mut g = Graph::new(&model.store);
    let s = g.constant(s.clone())?;
    let layers: Vec<Var> = stack
        .layers
        .iter()
        .map(|h| g.constant(h.clone()))
        .collect::<std::result::Result<_, _>>()?;
    let (alpha, _) = alpha_graph(&mut g, model, s, &layers, &stack.key_mask)?;
    Ok(g.value(alpha).clone())
}

/// `out[source_ids[l]] += alpha[l]` over `extended_size` slots.
pub fn scatter_copy(alpha: &[f64], source_ids: &[usize], extended_size: usize) -> Result<Vec<f64>> {
    if alpha.len() != source_ids.len() {
        return Err(TensorError::ShapeMismatch {
            op: "scatter_copy",
            left: (1, alpha.len()),
            right: (1, source_ids.len()),
        }
        .into());
    }
    let mut out = vec![0.0; extended_size];
    for (&a, &id) in alpha.iter().zip(source_ids) {
        let slot = out.get_mut(id).ok_or(ModelError::OutOfRange {
            what: "source id",
            index: id,
            limit: extended_size,
        })?;
        *slot += a;
    }
    Ok(out)
}

/// Gate probability for one decoder state and its copy attention.
pub fn generation_gate(
    model: &PgcModel,
    s_t: &[f64],
    alpha: &[f64],
    stack: &EncoderStack,
) -> Result<f64> {
    check_width(model, "generation_gate", s_t)?;
    let last = stack
        .layers
        .last()
        .ok_or_else(|| ModelError::Config("no encoder layers".into()))?;
    let mut g = Graph::new(&model.store);
    let s = g.constant(row(s_t))?;
    let a = g.constant(row(alpha))?;
    let h = g.constant(last.clone())?;
    let p = gate_graph(&mut g, model, s, a, h)?;
    Ok(g.scalar(p))
}

/// Generator distribution over the fixed vocabulary.
pub fn vocab_distribution(model: &PgcModel, s_t: &[f64]) -> Result<Vec<f64>> {
    check_width(model, "vocab_distribution", s_t)?;
    let mut g = Graph::new(&model.store);
    let s = g.constant(row(s_t))?;
    let p = vocab_graph(&mut g, model, s)?;
    Ok(g.value(p).iter().copied().collect())
}

/// `p_gen · P_vocab + (1 − p_gen) · P_copy` with `P_vocab` zero-padded to the
/// extended width.
pub fn mix(p_gen: f64, p_vocab: &[f64], p_copy: &[f64]) -> Result<Vec<f64>> {
    if p_vocab.len() > p_copy.len() {
        return Err(TensorError::ShapeMismatch {
            op: "mix",
            left: (1, p_vocab.len()),
            right: (1, p_copy.len()),
        }
        .into());
    }
    Ok(p_copy
        .iter()
        .enumerate()
        .map(|(i, &c)| p_gen * p_vocab.get(i).copied().unwrap_or(0.0) + (1.0 - p_gen) * c)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode, ModelConfig};
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny(layers: usize) -> PgcModel {
        let cfg = ModelConfig {
            n_enc_layers: layers,
            n_dec_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_k: Some(4),
            d_ff: 12,
            vocab_size: 16,
            max_source_len: 12,
            max_target_len: 6,
        };
        PgcModel::new(cfg, 11).unwrap()
    }

    fn state(seed: u64, rows: usize) -> NumArray {
        NumArray::from_shape_fn((rows, 8), |(r, c)| {
            ((seed as f64 + 1.0) * (r * 8 + c) as f64 * 0.37).sin()
        })
    }

    #[test]
    fn scatter_worked_example() {
        let p = scatter_copy(&[0.5, 0.3, 0.2], &[7, 9, 7], 12).unwrap();
        let mut expected = vec![0.0; 12];
        expected[7] = 0.7;
        expected[9] = 0.3;
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(scatter_copy(&[1.0], &[12], 12).is_err());
    }

    #[test]
    fn mix_worked_example() {
        let p = mix(0.25, &[0.5, 0.5], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p, vec![0.125, 0.125, 0.75]);
    }

    #[test]
    fn combine_views_is_weighted_sum() {
        let a = array![[1.0, 0.0], [0.5, 0.5]];
        let b = array![[0.0, 1.0], [1.0, 0.0]];
        let c = combine_views(&[a, b], &[0.25, 0.75]).unwrap();
        assert_eq!(c, array![[0.25, 0.75], [0.875, 0.125]]);
    }

    #[test]
    fn single_layer_reduces_to_plain_attention() {
        let m = tiny(1);
        let stack = encode(&m, &[4, 5, 6, 20]).unwrap();
        let s = state(1, 2);
        let alpha = copy_attention(&m, &s, &stack).unwrap();
        assert_eq!(m.layer_weights(), vec![1.0]);
        let q = s.dot(m.param("copy.w_s").unwrap());
        let k = stack.layers[0].dot(m.param("copy.w_h.0").unwrap());
        let scores = q.dot(&k.t()) / 2.0;
        let plain = crate::tensor::softmax_rows(&scores, None).unwrap();
        for (a, b) in alpha.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_matches_direct_formula() {
        let m = tiny(2);
        let stack = encode(&m, &[4, 5, 6]).unwrap();
        let s = state(2, 1);
        let alpha = copy_attention(&m, &s, &stack).unwrap();
        let a: Vec<f64> = alpha.iter().copied().collect();
        let s_t: Vec<f64> = s.iter().copied().collect();
        let gate = generation_gate(&m, &s_t, &a, &stack).unwrap();
        let ctx = alpha.dot(&stack.layers[1]);
        let logit = ctx.dot(m.param("copy.w_c").unwrap())[[0, 0]]
            + s.dot(m.param("copy.w_gs").unwrap())[[0, 0]]
            + m.param("copy.gate_bias").unwrap()[[0, 0]];
        assert!((gate - crate::tensor::sigmoid(logit)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn alpha_is_a_distribution(seed in 0u64..1000, logits in prop::collection::vec(-4.0f64..4.0, 3),
                                   ids in prop::collection::vec(4usize..30, 1..10)) {
            let mut m = tiny(3);
            m.set_param("copy.layer_logits", NumArray::from_shape_vec((1, 3), logits).unwrap()).unwrap();
            let stack = encode(&m, &ids).unwrap();
            let alpha = copy_attention(&m, &state(seed, 3), &stack).unwrap();
            for r in alpha.rows() {
                prop_assert!((r.sum() - 1.0).abs() < 1e-9);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn scatter_preserves_mass(alpha in prop::collection::vec(0.0f64..1.0, 1..20), width in 20usize..40,
                                  seed in any::<u64>()) {
            let ids: Vec<usize> = (0..alpha.len()).map(|i| ((seed >> (i % 32)) as usize + i * 7) % width).collect();
            let p = scatter_copy(&alpha, &ids, width).unwrap();
            let total: f64 = alpha.iter().sum();
            prop_assert!((p.iter().sum::<f64>() - total).abs() < 1e-12);
            for (slot, &mass) in p.iter().enumerate() {
                let oracle: f64 = ids.iter().zip(&alpha).filter(|(&id, _)| id == slot).map(|(_, a)| a).sum();
                prop_assert!((mass - oracle).abs() < 1e-12);
            }
        }

        #[test]
        fn gate_is_strictly_inside_unit_interval(bias in -200.0f64..200.0, seed in 0u64..100) {
            let mut m = tiny(2);
            m.set_param("copy.gate_bias", NumArray::from_elem((1, 1), bias)).unwrap();
            let stack = encode(&m, &[4, 5]).unwrap();
            let s: Vec<f64> = state(seed, 1).iter().copied().collect();
            let g = generation_gate(&m, &s, &[0.5, 0.5], &stack).unwrap();
            prop_assert!(g > 0.0 && g < 1.0);
        }
    }
}
