use ndarray::Array2;

use super::copy::copy_head;
use super::{AttnIds, FfnIds, ModelError, NormIds, PgcModel, Result};
use crate::prompt::{BOS, PAD, UNK};
use crate::tensor::{Graph, Mask, NumArray, Var};

/// Encoder outputs for one source sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    /// Source ids in the extended vocabulary.
    pub source_ids: Vec<usize>,
    /// `false` at padding positions.
    pub key_mask: Vec<bool>,
    /// Residual stream after each encoder layer, `[L × d_model]` each.
    pub layers: Vec<NumArray>,
    /// Normalized last layer, attended to by decoder cross-attention.
    pub memory: NumArray,
    /// Self-attention weights per layer, then per head, `[L × L]` each.
    pub self_attention: Vec<Vec<NumArray>>,
}

pub(crate) struct EncoderVars {
    pub layers: Vec<Var>,
    pub memory: Var,
    pub self_attention: Vec<Vec<Var>>,
}

pub(crate) fn positional_encoding(len: usize, d: usize) -> NumArray {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub(crate) fn key_mask_rows(key_mask: &[bool], rows: usize) -> Mask {
    Mask::from_shape_fn((rows, key_mask.len()), |(_, c)| key_mask[c])
}

fn causal_mask(len: usize) -> Mask {
    Mask::from_shape_fn((len, len), |(r, c)| c <= r)
}

impl PgcModel {
    fn embedding_ids(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .map(|&id| if id < self.config.vocab_size { id } else { UNK })
            .collect()
    }

    fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.layout.embed);
        let x = g.gather(table, &self.embedding_ids(ids))?;
        let pe = g.constant(positional_encoding(ids.len(), self.config.d_model))?;
        Ok(g.add(x, pe)?)
    }

    pub(crate) fn check_source(&self, source_ids: &[usize]) -> Result<()> {
        if source_ids.is_empty() {
            return Err(ModelError::EmptySource);
        }
        if source_ids.len() > self.config.max_source_len {
            return Err(ModelError::SourceTooLong {
                len: source_ids.len(),
                max: self.config.max_source_len,
            });
        }
        Ok(())
    }

    pub(crate) fn check_target(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(ModelError::EmptyPrefix);
        }
        if len > self.config.max_target_len {
            return Err(ModelError::TargetTooLong {
                len,
                max: self.config.max_target_len,
            });
        }
        Ok(())
    }

    pub(crate) fn encoder_graph(&self, g: &mut Graph, source_ids: &[usize]) -> Result<EncoderVars> {
        self.check_source(source_ids)?;
        let key_mask: Vec<bool> = source_ids.iter().map(|&id| id != PAD).collect();
        let mask = key_mask_rows(&key_mask, source_ids.len());
        let mut x = self.embed(g, source_ids)?;
        let mut layers = Vec::with_capacity(self.layout.enc.len());
        let mut self_attention = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            let a = norm(g, x, &layer.ln_attn)?;
            let (attn_out, weights) = self.attention(g, a, a, &layer.attn, &mask)?;
            x = g.add(x, attn_out)?;
            let b = norm(g, x, &layer.ln_ffn)?;
            let f = ffn(g, b, &layer.ffn)?;
            x = g.add(x, f)?;
            layers.push(x);
            self_attention.push(weights);
        }
        let memory = norm(g, x, &self.layout.enc_norm)?;
        Ok(EncoderVars {
            layers,
            memory,
            self_attention,
        })
    }

    /// Final decoder states `[T × d_model]` for decoder inputs `inputs`.
    pub(crate) fn decoder_graph(
        &self,
        g: &mut Graph,
        inputs: &[usize],
        memory: Var,
        key_mask: &[bool],
    ) -> Result<Var> {
        self.check_target(inputs.len())?;
        let self_mask = causal_mask(inputs.len());
        let cross_mask = key_mask_rows(key_mask, inputs.len());
        let mut x = self.embed(g, inputs)?;
        for layer in &self.layout.dec {
            let a = norm(g, x, &layer.ln_self)?;
            let (sa, _) = self.attention(g, a, a, &layer.self_attn, &self_mask)?;
            x = g.add(x, sa)?;
            let b = norm(g, x, &layer.ln_cross)?;
            let (ca, _) = self.attention(g, b, memory, &layer.cross_attn, &cross_mask)?;
            x = g.add(x, ca)?;
            let c = norm(g, x, &layer.ln_ffn)?;
            let f = ffn(g, c, &layer.ffn)?;
            x = g.add(x, f)?;
        }
        norm(g, x, &self.layout.dec_norm)
    }

    fn attention(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        ids: &AttnIds,
        mask: &Mask,
    ) -> Result<(Var, Vec<Var>)> {
        let dh = self.config.head_dim();
        let (wq, wk, wv, wo) = (
            g.param(ids.q),
            g.param(ids.k),
            g.param(ids.v),
            g.param(ids.o),
        );
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys, wk)?;
        let v = g.matmul(keys, wv)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let a = g.softmax(scores, Some(mask))?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((g.matmul(joined, wo)?, weights))
    }
}

fn norm(g: &mut Graph, x: Var, ids: &NormIds) -> Result<Var> {
    let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
    Ok(g.layer_norm(x, gain, bias)?)
}

fn ffn(g: &mut Graph, x: Var, ids: &FfnIds) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        g.param(ids.w1),
        g.param(ids.b1),
        g.param(ids.w2),
        g.param(ids.b2),
    );
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    Ok(g.add_row(o, b2)?)
}

/// Runs the encoder on `source_ids` (extended ids map to `<unk>` embeddings).
pub fn encode(model: &PgcModel, source_ids: &[usize]) -> Result<EncoderStack> {
    let mut g = Graph::new(&model.store);
    let vars = model.encoder_graph(&mut g, source_ids)?;
    Ok(EncoderStack {
        source_ids: source_ids.to_vec(),
        key_mask: source_ids.iter().map(|&id| id != PAD).collect(),
        layers: vars.layers.iter().map(|&v| g.value(v).clone()).collect(),
        memory: g.value(vars.memory).clone(),
        self_attention: vars
            .self_attention
            .iter()
            .map(|heads| heads.iter().map(|&v| g.value(v).clone()).collect())
            .collect(),
    })
}

/// Decoder inputs for teacher forcing: `<bos>` followed by all but the last
/// target id.
pub(crate) fn shift_right(target_ids: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(
            target_ids[..target_ids.len().saturating_sub(1)]
                .iter()
                .copied(),
        )
        .collect()
}

/// Mean per-token negative log-likelihood of one teacher-forced example.
pub(crate) fn forward_example(
    g: &mut Graph,
    model: &PgcModel,
    source_ids: &[usize],
    target_ids: &[usize],
    extended_size: usize,
) -> Result<Var> {
    let enc = model.encoder_graph(g, source_ids)?;
    let key_mask: Vec<bool> = source_ids.iter().map(|&id| id != PAD).collect();
    let inputs = shift_right(target_ids);
    let s = model.decoder_graph(g, &inputs, enc.memory, &key_mask)?;
    let head = copy_head(
        g,
        model,
        s,
        &enc.layers,
        &key_mask,
        source_ids,
        extended_size,
    )?;
    Ok(g.neg_log_pick(head.p_final, target_ids)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    pub(crate) fn tiny() -> PgcModel {
        let cfg = ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_k: None,
            d_ff: 12,
            vocab_size: 16,
            max_source_len: 10,
            max_target_len: 6,
        };
        PgcModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[2, 3]] - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn encoder_shapes_and_attention_rows() {
        let m = tiny();
        let stack = encode(&m, &[5, 6, 7, 20]).unwrap();
        assert_eq!(stack.layers.len(), 2);
        assert_eq!(stack.layers[1].dim(), (4, 8));
        assert_eq!(stack.self_attention[0].len(), 2);
        for row in stack.self_attention[1][0].rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oov_ids_embed_as_unk() {
        let m = tiny();
        let a = encode(&m, &[5, 16]).unwrap();
        let b = encode(&m, &[5, 25]).unwrap();
        let c = encode(&m, &[5, UNK]).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.layers, c.layers);
    }

    #[test]
    fn padding_is_never_attended() {
        let m = tiny();
        let stack = encode(&m, &[5, PAD, 7]).unwrap();
        for heads in &stack.self_attention {
            for a in heads {
                assert!(a.column(1).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn length_limits() {
        let m = tiny();
        assert_eq!(encode(&m, &[]), Err(ModelError::EmptySource));
        assert!(matches!(
            encode(&m, &[4; 11]),
            Err(ModelError::SourceTooLong { len: 11, max: 10 })
        ));
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let mut g = Graph::new(&m.store);
        let enc = m.encoder_graph(&mut g, &[5, 6, 7]).unwrap();
        let s1 = m
            .decoder_graph(&mut g, &[BOS, 8], enc.memory, &[true; 3])
            .unwrap();
        let s2 = m
            .decoder_graph(&mut g, &[BOS, 8, 9], enc.memory, &[true; 3])
            .unwrap();
        let (a, b) = (g.value(s1), g.value(s2));
        for r in 0..2 {
            for c in 0..8 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_right_prepends_bos() {
        assert_eq!(shift_right(&[7, 8, 2]), vec![BOS, 7, 8]);
        assert_eq!(shift_right(&[2]), vec![BOS]);
    }
}
