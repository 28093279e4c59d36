//! CoQA ingestion, per-turn example assembly and answer classification.

mod coqa;

pub use coqa::{ingest, ingest_str};

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::normalized_tokens;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("story {story_id}: {message}")]
    Structure { story_id: String, message: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub turn_id: u32,
    pub question: String,
    /// Annotated evidence span; empty when the answer has no span.
    pub rationale: String,
    /// Free-form gold answer.
    pub answer: String,
    /// Character offset of the rationale in the story, `-1` when absent.
    pub span_start: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerClass {
    Extractive,
    Generative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub story_id: String,
    pub turn: ConversationTurn,
    /// Earlier turns of the same dialogue, oldest first.
    pub history: Vec<ConversationTurn>,
    pub answer_class: AnswerClass,
    /// Additional human answers (dev set), used only as scoring references.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_references: Vec<String>,
}

impl DialogueExample {
    /// Builds an example and derives its class from the turn's texts.
    pub fn new(
        story_id: impl Into<String>,
        turn: ConversationTurn,
        history: Vec<ConversationTurn>,
    ) -> Self {
        let answer_class = classify_answer(&turn.answer, &turn.rationale);
        Self {
            story_id: story_id.into(),
            turn,
            history,
            answer_class,
            extra_references: Vec::new(),
        }
    }

    /// Gold answers, primary first.
    pub fn references(&self) -> Vec<String> {
        std::iter::once(self.turn.answer.clone())
            .chain(self.extra_references.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_examples: usize,
    pub n_extractive: usize,
    pub n_generative: usize,
    /// `n_extractive / n_examples`, or 0 for an empty corpus.
    pub extractive_fraction: f64,
}

fn find_subsequence(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Extractive iff the normalized answer is a non-empty contiguous token
/// subsequence of the normalized rationale.
pub fn classify_answer(answer: &str, rationale: &str) -> AnswerClass {
    let a = normalized_tokens(answer);
    let r = normalized_tokens(rationale);
    if find_subsequence(&r, &a).is_some() {
        AnswerClass::Extractive
    } else {
        AnswerClass::Generative
    }
}

/// Replaces an extractive example's rationale with the shortest span of it
/// that normalizes to the answer. Generative examples are returned as-is.
pub fn tighten_rationale(example: &DialogueExample) -> DialogueExample {
    let mut out = example.clone();
    if example.answer_class != AnswerClass::Extractive {
        return out;
    }
    if let Some(span) = answer_span(&example.turn.answer, &example.turn.rationale) {
        out.turn.rationale = span.to_string();
    }
    out
}

/// Shortest substring of `rationale` (on raw-word boundaries, outer
/// punctuation trimmed) whose normalization equals that of `answer`.
fn answer_span<'r>(answer: &str, rationale: &'r str) -> Option<&'r str> {
    let target = normalized_tokens(answer);
    if target.is_empty() {
        return None;
    }
    // (normalized token, byte span of the raw word it came from)
    let mut flat: Vec<(String, usize, usize)> = Vec::new();
    let mut start = None;
    let bytes_end = rationale.len();
    let mut words = Vec::new();
    for (i, c) in rationale.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                words.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        words.push((s, bytes_end));
    }
    for &(s, e) in &words {
        for tok in normalized_tokens(&rationale[s..e]) {
            flat.push((tok, s, e));
        }
    }
    let n = target.len();
    let mut best: Option<&str> = None;
    for i in 0..flat.len().saturating_sub(n - 1) {
        if flat[i..i + n].iter().map(|t| &t.0).ne(target.iter()) {
            continue;
        }
        let span = rationale[flat[i].1..flat[i + n - 1].2]
            .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
        if normalized_tokens(span) != target {
            continue;
        }
        if best.is_none_or(|b| span.len() < b.len()) {
            best = Some(span);
        }
    }
    best
}

pub fn compute_stats(examples: &[DialogueExample]) -> CorpusStats {
    let n_extractive = examples
        .iter()
        .filter(|e| e.answer_class == AnswerClass::Extractive)
        .count();
    let n_examples = examples.len();
    CorpusStats {
        n_examples,
        n_extractive,
        n_generative: n_examples - n_extractive,
        extractive_fraction: if n_examples == 0 {
            0.0
        } else {
            n_extractive as f64 / n_examples as f64
        },
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| CorpusError::Line {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}
