//! Prompt-guided copy mechanism for conversational question answering.
//!
//! The crate turns CoQA-style dialogues into prompted encoder inputs, runs a
//! small transformer encoder-decoder whose output layer mixes a vocabulary
//! softmax with a copy distribution pooled over every encoder layer, trains
//! it with teacher forcing, and scores answers with the standard CoQA
//! metrics.
//!
//! | module | role |
//! |---|---|
//! | [`corpus`] | CoQA ingestion, history assembly, extractive/generative classes |
//! | [`prompt`] | tokenizer, vocabularies, the three prompt templates, categories |
//! | [`tensor`] | dense arrays, reverse-mode autodiff, Adam, gradient checking |
//! | [`model`] | encoder-decoder, multi-view copy head, gate, greedy decoding |
//! | [`train`] | teacher-forced loss, training loop, synthetic tasks, checkpoints |
//! | [`eval`] | normalization, EM/F1, O/G/E splits, category report, raw baseline |

pub mod corpus;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod tensor;
pub mod train;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/corpus.md")]
    struct Corpus;
    #[doc = include_str!("../../../book/src/prompts.md")]
    struct Prompts;
    #[doc = include_str!("../../../book/src/copy-mechanism.md")]
    struct CopyMechanism;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
