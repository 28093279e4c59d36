//! Teacher-forced training, checkpoints and synthetic tasks.
//!
//! Each step draws a mini-batch from a per-epoch shuffle, sums per-example
//! gradients of the mean token negative log-likelihood, clips their global
//! norm and applies one Adam update.

mod checkpoint;
mod synthetic;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};
pub use synthetic::{make_synthetic, SyntheticSpec, SyntheticTask, GATE_MARKER};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DialogueExample;
use crate::eval::PredictionRecord;
use crate::model::{forward_example, greedy_decode, ModelConfig, ModelError, PgcModel};
use crate::prompt::{detokenize, PromptVersion, PromptedExample, Prompter, Tokenizer, Vocab, EOS};
use crate::tensor::{AdamConfig, Gradients, Graph, ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("example {0} has an empty target")]
    EmptyTarget(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config hash {found} does not match its model config ({expected})")]
    CorruptConfig { found: String, expected: String },
    #[error("checkpoint model config differs from the requested one")]
    ConfigMismatch {
        expected: Box<ModelConfig>,
        found: Box<ModelConfig>,
    },
    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub prompt_version: PromptVersion,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    /// Steps between checkpoints; `0` disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            prompt_version: PromptVersion::default(),
            clip_norm: 1.0,
            checkpoint_interval: 0,
            max_steps: None,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            learning_rate: 2e-5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(TrainError::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Position of the next mini-batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Index of the next batch within `epoch`.
    pub batch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Mean batch loss after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

/// Loss and gradients of one example against an arbitrary parameter store
/// laid out like `model.store`.
pub fn loss_and_grads(
    model: &PgcModel,
    store: &ParamStore,
    example: &PromptedExample,
) -> Result<(f64, Gradients)> {
    if example.target_ids.is_empty() {
        return Err(TrainError::EmptyTarget(format!(
            "{}#{}",
            example.origin.story_id, example.origin.turn_id
        )));
    }
    let mut g = Graph::new(store);
    let loss = forward_example(
        &mut g,
        model,
        &example.source_ids,
        &example.target_ids,
        example.extended_size(model.config.vocab_size),
    )?;
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), grads))
}

/// Mean over target positions of `-ln P(gold)` with the gold prefix fed to
/// the decoder.
pub fn teacher_forced_loss(model: &PgcModel, example: &PromptedExample) -> Result<f64> {
    if example.target_ids.is_empty() {
        return Err(TrainError::EmptyTarget(format!(
            "{}#{}",
            example.origin.story_id, example.origin.turn_id
        )));
    }
    let mut g = Graph::new(&model.store);
    let loss = forward_example(
        &mut g,
        model,
        &example.source_ids,
        &example.target_ids,
        example.extended_size(model.config.vocab_size),
    )?;
    Ok(g.scalar(loss))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Resumable training run over a fixed example list.
pub struct Trainer<'a> {
    pub model: PgcModel,
    config: TrainConfig,
    data: &'a [PromptedExample],
    state: TrainState,
    curve: Vec<LossRecord>,
    order: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: PgcModel, config: TrainConfig, data: &'a [PromptedExample]) -> Result<Self> {
        Self::resume(model, config, data, TrainState::default(), Vec::new())
    }

    /// Continues from `state`; `model` must carry the matching optimizer state.
    pub fn resume(
        model: PgcModel,
        config: TrainConfig,
        data: &'a [PromptedExample],
        state: TrainState,
        curve: Vec<LossRecord>,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if let Some(ex) = data.iter().find(|e| e.target_ids.is_empty()) {
            return Err(TrainError::EmptyTarget(format!(
                "{}#{}",
                ex.origin.story_id, ex.origin.turn_id
            )));
        }
        let order = epoch_order(data.len(), config.seed, state.epoch);
        Ok(Self {
            model,
            config,
            data,
            state,
            curve,
            order,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn curve(&self) -> &[LossRecord] {
        &self.curve
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
            || self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// One optimizer step; `None` once training is finished.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let bs = self.config.batch_size;
        let start = self.state.batch * bs;
        let batch: Vec<usize> = self.order[start..(start + bs).min(self.data.len())].to_vec();
        let scale = 1.0 / batch.len() as f64;
        self.model.store.zero_grad();
        let mut total = 0.0;
        for &i in &batch {
            let (loss, grads) = loss_and_grads(&self.model, &self.model.store, &self.data[i])?;
            total += loss;
            self.model.store.accumulate(&grads, scale);
        }
        if self.config.clip_norm > 0.0 {
            self.model.store.clip_grad_norm(self.config.clip_norm);
        }
        self.model
            .store
            .adam_step(self.config.learning_rate, AdamConfig::default());
        self.state.step += 1;
        let record = LossRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            loss: total * scale,
        };
        self.curve.push(record);
        self.state.batch += 1;
        if self.state.batch >= self.batches_per_epoch() {
            self.state.batch = 0;
            self.state.epoch += 1;
            self.order = epoch_order(self.data.len(), self.config.seed, self.state.epoch);
        }
        Ok(Some(record))
    }

    /// Steps until finished, calling `on_checkpoint` every
    /// `checkpoint_interval` steps.
    pub fn run<F>(&mut self, mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Self) -> Result<()>,
    {
        while self.step()?.is_some() {
            let every = self.config.checkpoint_interval;
            if every > 0 && self.state.step.is_multiple_of(every) {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, vocab: &Vocab, prompter: &Prompter) -> Checkpoint {
        Checkpoint::new(
            &self.model,
            vocab,
            &prompter.categories,
            self.config.clone(),
            self.state,
            self.curve.clone(),
        )
    }

    pub fn into_parts(self) -> (PgcModel, Vec<LossRecord>) {
        (self.model, self.curve)
    }
}

/// Result of [`train_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<LossRecord>,
    /// Mean step loss per epoch, in epoch order.
    pub epoch_means: Vec<f64>,
}

pub fn epoch_means(curve: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in curve {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.loss;
        out[r.epoch].1 += 1;
    }
    out.into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(s, n)| s / n as f64)
        .collect()
}

/// Trains `model` in place from scratch optimizer state.
pub fn train_loop(
    model: &mut PgcModel,
    examples: &[PromptedExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model.clone(), config.clone(), examples)?;
    trainer.run(|_| Ok(()))?;
    let (trained, curve) = trainer.into_parts();
    *model = trained;
    Ok(TrainReport {
        epoch_means: epoch_means(&curve),
        curve,
    })
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "epoch,step,loss").map_err(io)?;
    for r in curve {
        writeln!(out, "{},{},{}", r.epoch, r.step, r.loss).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Generator vocabulary over prompt sources and answers.
pub fn build_vocab<T: Tokenizer>(
    examples: &[DialogueExample],
    prompter: &Prompter<T>,
    max_size: usize,
    min_count: usize,
) -> Vocab {
    let lists: Vec<Vec<String>> = examples
        .iter()
        .flat_map(|e| {
            [
                prompter.tokenizer.tokenize(&prompter.source_text(e)),
                prompter.tokenizer.tokenize(&e.turn.answer),
            ]
        })
        .collect();
    Vocab::build(lists.iter().map(|l| l.as_slice()), max_size, min_count)
}

/// Encodes examples for training, truncated to the model's length limits.
/// Examples whose answer has no tokens are dropped.
pub fn prepare<T: Tokenizer>(
    examples: &[DialogueExample],
    prompter: &Prompter<T>,
    vocab: &Vocab,
    config: &ModelConfig,
) -> Vec<PromptedExample> {
    examples
        .iter()
        .map(|e| prompter.encode(e, vocab))
        .filter(|p| !p.target_ids.is_empty())
        .map(|p| p.truncated(config.max_source_len, config.max_target_len))
        .collect()
}

/// Greedy answer text for one example.
pub fn answer<T: Tokenizer>(
    model: &PgcModel,
    prompter: &Prompter<T>,
    vocab: &Vocab,
    example: &DialogueExample,
) -> Result<String> {
    let p = prompter
        .encode_source(example, vocab)
        .truncated(model.config.max_source_len, model.config.max_target_len);
    let ids = greedy_decode(
        model,
        &p.source_ids,
        p.extended_size(vocab.len()),
        model.config.max_target_len,
    )?;
    let tokens: Vec<String> = ids
        .iter()
        .map(|&id| vocab.decode_id(id, &p.oov_tokens).to_string())
        .collect();
    Ok(detokenize(&tokens))
}

pub fn predict<T: Tokenizer>(
    model: &PgcModel,
    prompter: &Prompter<T>,
    vocab: &Vocab,
    examples: &[DialogueExample],
) -> Result<Vec<PredictionRecord>> {
    examples
        .iter()
        .map(|e| {
            Ok(PredictionRecord {
                story_id: e.story_id.clone(),
                turn_id: e.turn.turn_id,
                text: answer(model, prompter, vocab, e)?,
            })
        })
        .collect()
}

/// Greedy-decoding accuracy against gold target ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenAccuracy {
    /// Fraction of gold positions (including `<eos>`) reproduced.
    pub token: f64,
    /// Fraction of examples reproduced exactly.
    pub sequence: f64,
    pub n_tokens: usize,
    pub n_examples: usize,
}

pub fn token_accuracy(model: &PgcModel, examples: &[PromptedExample]) -> Result<TokenAccuracy> {
    let (mut hit, mut total, mut exact) = (0usize, 0usize, 0usize);
    for ex in examples {
        let mut decoded = greedy_decode(
            model,
            &ex.source_ids,
            ex.extended_size(model.config.vocab_size),
            ex.target_ids.len(),
        )?;
        decoded.push(EOS);
        let correct = ex
            .target_ids
            .iter()
            .enumerate()
            .filter(|&(i, &gold)| decoded.get(i) == Some(&gold))
            .count();
        hit += correct;
        total += ex.target_ids.len();
        exact += usize::from(correct == ex.target_ids.len());
    }
    Ok(TokenAccuracy {
        token: hit as f64 / total.max(1) as f64,
        sequence: exact as f64 / examples.len().max(1) as f64,
        n_tokens: total,
        n_examples: examples.len(),
    })
}
