use super::forward::EncoderStack;
use super::{ModelError, Result};
use crate::tensor::NumArray;

/// One encoder self-attention head over a labelled source.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub layer: usize,
    pub head: usize,
    pub tokens: Vec<String>,
    /// Row `q` is the distribution of query position `q` over key positions.
    pub weights: NumArray,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AttentionMatrix {
    /// Header `query,<tok_0>,...`, then one row per query token.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query");
        for t in &self.tokens {
            out.push(',');
            out.push_str(&csv_field(t));
        }
        out.push('\n');
        for (q, row) in self.weights.rows().into_iter().enumerate() {
            out.push_str(&csv_field(&self.tokens[q]));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Selects encoder self-attention heads by layer; `heads = None` keeps all.
pub fn export_attention(
    stack: &EncoderStack,
    tokens: &[String],
    layer: usize,
    heads: Option<&[usize]>,
) -> Result<Vec<AttentionMatrix>> {
    let per_head = stack
        .self_attention
        .get(layer)
        .ok_or(ModelError::OutOfRange {
            what: "layer",
            index: layer,
            limit: stack.self_attention.len(),
        })?;
    if tokens.len() != stack.source_ids.len() {
        return Err(ModelError::OutOfRange {
            what: "token count",
            index: tokens.len(),
            limit: stack.source_ids.len(),
        });
    }
    let all: Vec<usize> = (0..per_head.len()).collect();
    heads
        .unwrap_or(&all)
        .iter()
        .map(|&h| {
            let weights = per_head.get(h).ok_or(ModelError::OutOfRange {
                what: "head",
                index: h,
                limit: per_head.len(),
            })?;
            Ok(AttentionMatrix {
                layer,
                head: h,
                tokens: tokens.to_vec(),
                weights: weights.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode, ModelConfig, PgcModel};

    #[test]
    fn csv_layout() {
        let m = AttentionMatrix {
            layer: 0,
            head: 1,
            tokens: vec!["a".into(), ",".into()],
            weights: ndarray::array![[0.25, 0.75], [1.0, 0.0]],
        };
        assert_eq!(m.to_csv(), "query,a,\",\"\na,0.25,0.75\n\",\",1,0\n");
    }

    #[test]
    fn exports_requested_heads() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 10,
            ..ModelConfig::desk()
        };
        let model = PgcModel::new(cfg, 0).unwrap();
        let stack = encode(&model, &[4, 5, 6]).unwrap();
        let toks: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let all = export_attention(&stack, &toks, 1, None).unwrap();
        assert_eq!(all.len(), 2);
        let one = export_attention(&stack, &toks, 1, Some(&[1])).unwrap();
        assert_eq!(one[0], all[1]);
        assert!(export_attention(&stack, &toks, 2, None).is_err());
        assert!(export_attention(&stack, &toks, 0, Some(&[2])).is_err());
        assert_eq!(all[0].to_csv().lines().count(), 4);
    }
}
