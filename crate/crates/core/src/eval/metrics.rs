use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// ASCII punctuation as removed by the standard CoQA/SQuAD scorer.
fn is_scorer_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_article(word: &str) -> bool {
    matches!(word, "a" | "an" | "the")
}

/// Lowercase, strip punctuation, drop the articles `a`/`an`/`the`, and
/// collapse whitespace.
///
/// Articles are matched on word boundaries, so `the—end` loses its article
/// just as it would under a `\b(a|an|the)\b` substitution.
pub fn normalize(text: &str) -> String {
    normalized_tokens(text).join(" ")
}

/// Token sequence of [`normalize`].
pub fn normalized_tokens(text: &str) -> Vec<String> {
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !is_scorer_punct(*c))
        .collect();
    let mut out = Vec::new();
    for raw in stripped.split_whitespace() {
        let mut piece = String::new();
        let mut word = String::new();
        let flush = |word: &mut String, piece: &mut String, out: &mut Vec<String>| {
            if is_article(word) {
                if !piece.is_empty() {
                    out.push(std::mem::take(piece));
                }
            } else {
                piece.push_str(word);
            }
            word.clear();
        };
        for c in raw.chars() {
            if is_word_char(c) {
                word.push(c);
            } else {
                flush(&mut word, &mut piece, &mut out);
                piece.push(c);
            }
        }
        flush(&mut word, &mut piece, &mut out);
        if !piece.is_empty() {
            out.push(piece);
        }
    }
    out
}

/// Exact match after normalization: 0 or 1.
pub fn em(pred: &str, gold: &str) -> f64 {
    if normalize(pred) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Token-level F1 over normalized tokens (multiset overlap).
pub fn f1(pred: &str, gold: &str) -> f64 {
    let p = normalized_tokens(pred);
    let g = normalized_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// How multiple gold references are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Score against the primary reference only.
    #[default]
    Single,
    /// Best score over all references.
    MultiMax,
}

/// `(em, f1)` of `pred` against `references` (primary first).
pub fn score_multi(pred: &str, references: &[String], mode: ScoreMode) -> (f64, f64) {
    match (mode, references.first()) {
        (_, None) => (0.0, 0.0),
        (ScoreMode::Single, Some(primary)) => (em(pred, primary), f1(pred, primary)),
        (ScoreMode::MultiMax, Some(_)) => references.iter().fold((0.0, 0.0), |(e, f), r| {
            (e.max(em(pred, r)), f.max(f1(pred, r)))
        }),
    }
}
