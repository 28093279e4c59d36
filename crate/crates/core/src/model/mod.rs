//! Transformer encoder-decoder with a multi-view pointer-generator head.
//!
//! The encoder keeps every layer's output `h_i`. At decoder step `t` with
//! final decoder state `s_t`, the copy head computes
//!
//! ```text
//! α_t  = Σ_i w_i · softmax( (W_s s_t)(W_{h,i} h_i)ᵀ / √d_k )       w = softmax(a)
//! P_copy(y) = Σ_{l : x_l = y} α_{t,l}
//! p_gen = sigmoid( w_c · Σ_l α_{t,l} h_{l,N} + w_s · s_t + b )
//! P_vocab = softmax( W_v s_t + b_v )
//! P(y) = p_gen · P_vocab(y) + (1 − p_gen) · P_copy(y)
//! ```
//!
//! over the extended vocabulary (generator vocabulary plus per-example
//! source OOV slots). The layer weights `w` live on the simplex, so `α_t` is
//! always a distribution over the unpadded source positions.

mod attention;
#[cfg(test)]
pub(crate) mod behaviour;
mod copy;
mod decode;
mod forward;

pub use attention::{export_attention, AttentionMatrix};
pub use copy::{
    combine_views, copy_attention, generation_gate, layer_weights, mix, scatter_copy,
    vocab_distribution,
};
pub use decode::{decode_step, greedy_decode, teacher_forced_steps, StepOutput};
pub(crate) use forward::forward_example;
pub use forward::{encode, EncoderStack};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{NumArray, ParamId, ParamStore, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("source length {len} exceeds max_source_len {max}")]
    SourceTooLong { len: usize, max: usize },
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("decoder length {len} exceeds max_target_len {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("{what} index {index} out of range (< {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Copy-head key width; `d_model / n_heads` when unset.
    #[serde(default)]
    pub d_k: Option<usize>,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Toy scale used for local training.
    pub fn desk() -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_k: None,
            d_ff: 256,
            vocab_size: 512,
            max_source_len: 128,
            max_target_len: 32,
        }
    }

    /// Layer, head and width counts of a T5-base-sized model.
    pub fn paper_scale() -> Self {
        Self {
            n_enc_layers: 6,
            n_dec_layers: 6,
            d_model: 768,
            n_heads: 8,
            d_k: None,
            d_ff: 3072,
            vocab_size: 32128,
            max_source_len: 512,
            max_target_len: 64,
        }
    }

    pub fn copy_key_dim(&self) -> usize {
        self.d_k.unwrap_or(self.d_model / self.n_heads.max(1))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
            ("d_k", self.copy_key_dim()),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::prompt::UNK {
            return Err(ModelError::Config(
                "vocab_size must leave room for the special tokens".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnIds {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncLayerIds {
    pub ln_attn: NormIds,
    pub attn: AttnIds,
    pub ln_ffn: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecLayerIds {
    pub ln_self: NormIds,
    pub self_attn: AttnIds,
    pub ln_cross: NormIds,
    pub cross_attn: AttnIds,
    pub ln_ffn: NormIds,
    pub ffn: FfnIds,
}

/// Copy-head parameter handles.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CopyIds {
    /// query map `[d_model × d_k]`
    pub w_s: ParamId,
    /// per-encoder-layer key maps `[d_model × d_k]`
    pub w_h: Vec<ParamId>,
    /// unconstrained layer-weight logits `[1 × N]`
    pub layer_logits: ParamId,
    /// gate weights on the context vector and decoder state, `[d_model × 1]`
    pub w_c: ParamId,
    pub w_gs: ParamId,
    /// gate bias `[1 × 1]`
    pub gate_bias: ParamId,
    /// generator output map `[d_model × V]` and bias `[1 × V]`
    pub w_v: ParamId,
    pub b_v: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub enc_norm: NormIds,
    pub dec: Vec<DecLayerIds>,
    pub dec_norm: NormIds,
    pub copy: CopyIds,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform with standard deviation `std`.
    fn uniform(&mut self, name: &str, shape: (usize, usize), std: f64) -> ParamId {
        let a = std * 3f64.sqrt();
        let rng = &mut self.rng;
        let value = NumArray::from_shape_fn(shape, |_| rng.random_range(-a..a));
        self.store.insert(name, value)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        self.uniform(name, (fan_in, fan_out), 1.0 / (fan_in as f64).sqrt())
    }

    fn fill(&mut self, name: &str, shape: (usize, usize), v: f64) -> ParamId {
        self.store.insert(name, NumArray::from_elem(shape, v))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.fill(&format!("{prefix}.gain"), (1, d), 1.0),
            bias: self.fill(&format!("{prefix}.bias"), (1, d), 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnIds {
        FfnIds {
            w1: self.linear(&format!("{prefix}.w1"), d, d_ff),
            b1: self.fill(&format!("{prefix}.b1"), (1, d_ff), 0.0),
            w2: self.linear(&format!("{prefix}.w2"), d_ff, d),
            b2: self.fill(&format!("{prefix}.b2"), (1, d), 0.0),
        }
    }
}

fn build_layout(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Layout {
    let d = config.d_model;
    let dk = config.copy_key_dim();
    let mut init = Init {
        store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let embed = init.uniform("embed", (config.vocab_size, d), 0.5);
    let enc = (0..config.n_enc_layers)
        .map(|i| EncLayerIds {
            ln_attn: init.norm(&format!("enc.{i}.ln_attn"), d),
            attn: init.attn(&format!("enc.{i}.attn"), d),
            ln_ffn: init.norm(&format!("enc.{i}.ln_ffn"), d),
            ffn: init.ffn(&format!("enc.{i}.ffn"), d, config.d_ff),
        })
        .collect();
    let enc_norm = init.norm("enc.norm", d);
    let dec = (0..config.n_dec_layers)
        .map(|i| DecLayerIds {
            ln_self: init.norm(&format!("dec.{i}.ln_self"), d),
            self_attn: init.attn(&format!("dec.{i}.self_attn"), d),
            ln_cross: init.norm(&format!("dec.{i}.ln_cross"), d),
            cross_attn: init.attn(&format!("dec.{i}.cross_attn"), d),
            ln_ffn: init.norm(&format!("dec.{i}.ln_ffn"), d),
            ffn: init.ffn(&format!("dec.{i}.ffn"), d, config.d_ff),
        })
        .collect();
    let dec_norm = init.norm("dec.norm", d);
    let copy = CopyIds {
        w_s: init.linear("copy.w_s", d, dk),
        w_h: (0..config.n_enc_layers)
            .map(|i| init.linear(&format!("copy.w_h.{i}"), d, dk))
            .collect(),
        layer_logits: init.fill("copy.layer_logits", (1, config.n_enc_layers), 0.0),
        w_c: init.linear("copy.w_c", d, 1),
        w_gs: init.linear("copy.w_gs", d, 1),
        gate_bias: init.fill("copy.gate_bias", (1, 1), 0.0),
        w_v: init.linear("copy.w_v", d, config.vocab_size),
        b_v: init.fill("copy.b_v", (1, config.vocab_size), 0.0),
    };
    Layout {
        embed,
        enc,
        enc_norm,
        dec,
        dec_norm,
        copy,
    }
}

/// Model configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PgcModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub(crate) layout: Layout,
}

impl PgcModel {
    /// Randomly initialized model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = build_layout(&config, &mut store, seed);
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Overwrites a parameter by name, checking its shape.
    pub fn set_param(&mut self, name: &str, value: NumArray) -> Result<()> {
        let id = self.store.id(name)?;
        let expected = self.store.value(id).dim();
        if value.dim() != expected {
            return Err(TensorError::ParamShape {
                name: name.to_string(),
                expected,
                found: value.dim(),
            }
            .into());
        }
        *self.store.value_mut(id) = value;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&NumArray> {
        Ok(self.store.value(self.store.id(name)?))
    }

    /// Current simplex weights over encoder layers.
    pub fn layer_weights(&self) -> Vec<f64> {
        layer_weights(self.store.value(self.layout.copy.layer_logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        let bad = ModelConfig {
            n_heads: 5,
            ..ModelConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        let zero = ModelConfig {
            n_enc_layers: 0,
            ..ModelConfig::desk()
        };
        assert!(zero.validate().is_err());
        assert_eq!(ModelConfig::desk().copy_key_dim(), 16);
        assert_eq!(ModelConfig::paper_scale().n_enc_layers, 6);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            ..ModelConfig::desk()
        };
        let a = PgcModel::new(cfg.clone(), 1).unwrap();
        let b = PgcModel::new(cfg.clone(), 1).unwrap();
        let c = PgcModel::new(cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store, c.store);
        let w = a.layer_weights();
        assert_eq!(w.len(), 2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
