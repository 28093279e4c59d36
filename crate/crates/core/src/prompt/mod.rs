//! Prompt construction and question categories.
//!
//! Three prompt versions turn a [`DialogueExample`] into encoder input:
//!
//! | version | source text |
//! |---|---|
//! | 1 | `Question: {q} Rationale: {r}` |
//! | 2 | `{Category} Question: {q} Rationale: {r}` |
//! | 3 | per history turn `{Cat} Question: {q} Rationale: {r} Answer: {a} `, then `{Category} Question: {q} Rationale: {r} Answer:` |
//!
//! The category is the question's leading interrogative word, capitalized,
//! or `Other` when it is not among the most frequent training first words.

mod tokenizer;
mod vocab;

pub use tokenizer::{detokenize, tokenize, Tokenizer, WordTokenizer};
pub use vocab::{Vocab, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConversationTurn, DialogueExample};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("cannot build a category vocabulary from an empty example list")]
    EmptyCorpus,
    #[error("category vocabulary size must be at least 1")]
    ZeroCategories,
    #[error("unknown prompt version {0} (expected 1, 2 or 3)")]
    UnknownVersion(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    V1QuestionRationale,
    V2QuestionDescription,
    V3ConversationHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub version: PromptKind,
    /// Number of prior turns prepended by version 3.
    pub history_depth: usize,
}

impl PromptVersion {
    pub fn v1() -> Self {
        Self {
            version: PromptKind::V1QuestionRationale,
            history_depth: 0,
        }
    }

    pub fn v2() -> Self {
        Self {
            version: PromptKind::V2QuestionDescription,
            history_depth: 0,
        }
    }

    pub fn v3(history_depth: usize) -> Self {
        Self {
            version: PromptKind::V3ConversationHistory,
            history_depth,
        }
    }

    /// Version by number as used on the command line.
    pub fn from_number(n: u8, history_depth: usize) -> Result<Self, PromptError> {
        match n {
            1 => Ok(Self::v1()),
            2 => Ok(Self::v2()),
            3 => Ok(Self::v3(history_depth)),
            other => Err(PromptError::UnknownVersion(other)),
        }
    }

    pub fn number(&self) -> u8 {
        match self.version {
            PromptKind::V1QuestionRationale => 1,
            PromptKind::V2QuestionDescription => 2,
            PromptKind::V3ConversationHistory => 3,
        }
    }
}

impl Default for PromptVersion {
    fn default() -> Self {
        Self::v3(1)
    }
}

pub const OTHER_CATEGORY: &str = "Other";

/// Most frequent lowercase first words of training questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocab {
    categories: Vec<String>,
}

impl CategoryVocab {
    /// Vocabulary from an explicit word list (lowercased, duplicates dropped,
    /// order kept).
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self, PromptError> {
        let mut categories: Vec<String> = Vec::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !w.is_empty() && !categories.contains(&w) {
                categories.push(w);
            }
        }
        if categories.is_empty() {
            return Err(PromptError::ZeroCategories);
        }
        Ok(Self { categories })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn contains(&self, word: &str) -> bool {
        self.categories.iter().any(|c| c == word)
    }
}

/// Lowercased leading word of a question, without surrounding punctuation.
pub fn first_word(question: &str) -> Option<String> {
    let word = question
        .split_whitespace()
        .next()?
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    (!word.is_empty()).then_some(word)
}

/// The `k` most frequent first words, ties broken lexicographically.
pub fn build_category_vocab(
    examples: &[DialogueExample],
    k: usize,
) -> Result<CategoryVocab, PromptError> {
    if examples.is_empty() {
        return Err(PromptError::EmptyCorpus);
    }
    if k == 0 {
        return Err(PromptError::ZeroCategories);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in examples {
        if let Some(w) = first_word(&ex.turn.question) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words: Vec<String> = ranked.into_iter().take(k).map(|(w, _)| w).collect();
    CategoryVocab::from_words(&words)
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Category label of a question: its capitalized first word if that word is
/// in `vocab`, else `Other`.
pub fn categorize(question: &str, vocab: &CategoryVocab) -> String {
    match first_word(question) {
        Some(w) if vocab.contains(&w) => capitalize(&w),
        _ => OTHER_CATEGORY.to_string(),
    }
}

fn turn_segment(turn: &ConversationTurn, category: Option<&str>) -> String {
    match category {
        Some(c) => format!(
            "{c} Question: {} Rationale: {}",
            turn.question, turn.rationale
        ),
        None => format!("Question: {} Rationale: {}", turn.question, turn.rationale),
    }
}

/// Source text of `example` under `version`.
pub fn build_prompt(
    example: &DialogueExample,
    version: PromptVersion,
    vocab: &CategoryVocab,
) -> String {
    let turn = &example.turn;
    match version.version {
        PromptKind::V1QuestionRationale => turn_segment(turn, None),
        PromptKind::V2QuestionDescription => {
            turn_segment(turn, Some(&categorize(&turn.question, vocab)))
        }
        PromptKind::V3ConversationHistory => {
            let skip = example.history.len().saturating_sub(version.history_depth);
            let mut text = String::new();
            for past in &example.history[skip..] {
                let cat = categorize(&past.question, vocab);
                text.push_str(&turn_segment(past, Some(&cat)));
                text.push_str(" Answer: ");
                text.push_str(&past.answer);
                text.push(' ');
            }
            text.push_str(&turn_segment(
                turn,
                Some(&categorize(&turn.question, vocab)),
            ));
            text.push_str(" Answer:");
            text
        }
    }
}

/// Identifies the dialogue turn a prompt was built from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExampleKey {
    pub story_id: String,
    pub turn_id: u32,
}

impl From<&DialogueExample> for ExampleKey {
    fn from(ex: &DialogueExample) -> Self {
        Self {
            story_id: ex.story_id.clone(),
            turn_id: ex.turn.turn_id,
        }
    }
}

/// Model-ready prompt: text, tokens and ids under the extended vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedExample {
    pub source_text: String,
    /// Gold answer, empty at inference.
    pub target_text: String,
    pub source_tokens: Vec<String>,
    /// Ids `>= vocab.len()` index `oov_tokens`.
    pub source_ids: Vec<usize>,
    /// Gold answer ids followed by EOS; empty at inference.
    pub target_ids: Vec<usize>,
    /// Source tokens outside the generator vocabulary, in first-seen order.
    pub oov_tokens: Vec<String>,
    pub origin: ExampleKey,
}

impl PromptedExample {
    /// Size of the extended vocabulary for this example.
    pub fn extended_size(&self, vocab_len: usize) -> usize {
        vocab_len + self.oov_tokens.len()
    }

    /// Keeps the last `max_source` source positions and the first
    /// `max_target` target positions (the final one forced to EOS).
    pub fn truncated(mut self, max_source: usize, max_target: usize) -> Self {
        if self.source_ids.len() > max_source {
            let cut = self.source_ids.len() - max_source;
            self.source_ids.drain(..cut);
            self.source_tokens.drain(..cut);
        }
        if self.target_ids.len() > max_target && max_target > 0 {
            self.target_ids.truncate(max_target);
            if let Some(last) = self.target_ids.last_mut() {
                *last = EOS;
            }
        }
        self
    }
}

/// Builds and encodes prompts with a fixed version and category vocabulary.
#[derive(Debug, Clone)]
pub struct Prompter<T: Tokenizer = WordTokenizer> {
    pub version: PromptVersion,
    pub categories: CategoryVocab,
    pub tokenizer: T,
}

impl Prompter<WordTokenizer> {
    pub fn new(version: PromptVersion, categories: CategoryVocab) -> Self {
        Self {
            version,
            categories,
            tokenizer: WordTokenizer,
        }
    }
}

impl<T: Tokenizer> Prompter<T> {
    pub fn source_text(&self, example: &DialogueExample) -> String {
        build_prompt(example, self.version, &self.categories)
    }

    /// Prompt with the gold answer as target.
    pub fn encode(&self, example: &DialogueExample, vocab: &Vocab) -> PromptedExample {
        self.encode_with_target(example, &example.turn.answer, vocab)
    }

    /// Prompt without a target, for inference.
    pub fn encode_source(&self, example: &DialogueExample, vocab: &Vocab) -> PromptedExample {
        self.encode_with_target(example, "", vocab)
    }

    fn encode_with_target(
        &self,
        example: &DialogueExample,
        target: &str,
        vocab: &Vocab,
    ) -> PromptedExample {
        let source_text = self.source_text(example);
        let source_tokens = self.tokenizer.tokenize(&source_text);
        let (source_ids, oov_tokens) = vocab.encode_source(&source_tokens);
        let target_ids = if target.is_empty() {
            Vec::new()
        } else {
            let mut ids = vocab.encode_target(&self.tokenizer.tokenize(target), &oov_tokens);
            ids.push(EOS);
            ids
        };
        PromptedExample {
            source_text,
            target_text: target.to_string(),
            source_tokens,
            source_ids,
            target_ids,
            oov_tokens,
            origin: ExampleKey::from(example),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConversationTurn;
    use proptest::prelude::*;

    fn turn(id: u32, q: &str, r: &str, a: &str) -> ConversationTurn {
        ConversationTurn {
            turn_id: id,
            question: q.into(),
            rationale: r.into(),
            answer: a.into(),
            span_start: 0,
        }
    }

    fn ex_with_question(q: &str) -> DialogueExample {
        DialogueExample::new("s", turn(1, q, "r", "a"), vec![])
    }

    fn yes_no_example() -> DialogueExample {
        DialogueExample::new(
            "s",
            turn(
                4,
                "Did she return safely?",
                "Gardner was nowhere to be found",
                "no",
            ),
            vec![],
        )
    }

    fn redundant_text_example() -> DialogueExample {
        DialogueExample::new(
            "s",
            turn(
                3,
                "And what else?",
                "overdose of sedatives and the surgical anesthetic propofol",
                "surgical anesthetic propofol",
            ),
            vec![
                turn(1, "He died of what?", "an overdose", "an overdose"),
                turn(2, "Of what?", "overdose of sedatives", "sedatives"),
            ],
        )
    }

    fn cats() -> CategoryVocab {
        CategoryVocab::from_words(&["what", "how", "did", "and", "who"]).unwrap()
    }

    #[test]
    fn category_vocab_by_frequency() {
        let exs: Vec<_> = ["What is it?", "What was it?", "Who is it?"]
            .iter()
            .map(|q| ex_with_question(q))
            .collect();
        let v = build_category_vocab(&exs, 1).unwrap();
        assert_eq!(v.categories(), ["what"]);
        let v = build_category_vocab(&exs, 10).unwrap();
        assert_eq!(v.categories(), ["what", "who"]);
        assert_eq!(build_category_vocab(&[], 3), Err(PromptError::EmptyCorpus));
    }

    #[test]
    fn category_ties_are_lexicographic() {
        let exs: Vec<_> = ["why?", "how?", "when?"]
            .iter()
            .map(|q| ex_with_question(q))
            .collect();
        assert_eq!(
            build_category_vocab(&exs, 2).unwrap().categories(),
            ["how", "when"]
        );
    }

    #[test]
    fn categorize_examples() {
        let v = cats();
        assert_eq!(
            categorize("How many planets are there away from the Sun?", &v),
            "How"
        );
        assert_eq!(categorize("Did she return safely?", &v), "Did");
        assert_eq!(categorize("Name the two actors.", &v), "Other");
        assert_eq!(categorize("", &v), "Other");
        assert_eq!(categorize("Who?", &v), "Who");
    }

    #[test]
    fn version_one_golden() {
        let text = build_prompt(&yes_no_example(), PromptVersion::v1(), &cats());
        assert_eq!(
            text,
            "Question: Did she return safely? Rationale: Gardner was nowhere to be found"
        );
    }

    #[test]
    fn version_two_golden() {
        let text = build_prompt(&yes_no_example(), PromptVersion::v2(), &cats());
        assert_eq!(
            text,
            "Did Question: Did she return safely? Rationale: Gardner was nowhere to be found"
        );
    }

    #[test]
    fn version_three_golden() {
        let text = build_prompt(&redundant_text_example(), PromptVersion::v3(1), &cats());
        assert_eq!(
            text,
            "Other Question: Of what? Rationale: overdose of sedatives Answer: sedatives \
             And Question: And what else? Rationale: overdose of sedatives and the surgical \
             anesthetic propofol Answer:"
        );
    }

    #[test]
    fn version_three_depth_saturates() {
        let ex = redundant_text_example();
        let all = build_prompt(&ex, PromptVersion::v3(2), &cats());
        assert_eq!(all, build_prompt(&ex, PromptVersion::v3(9), &cats()));
        assert!(all.starts_with("Other Question: He died of what? Rationale: an overdose Answer: an overdose Other Question: Of what?"));
    }

    #[test]
    fn encode_maps_oov_source_tokens_to_extended_ids() {
        let ex = yes_no_example();
        let vocab = Vocab::from_tokens(["question", ":", "did", "she", "rationale", "no"]);
        let p = Prompter::new(PromptVersion::v1(), cats()).encode(&ex, &vocab);
        assert_eq!(p.source_tokens.len(), p.source_ids.len());
        assert_eq!(p.source_tokens, tokenize(&p.source_text));
        let gardner = p.source_tokens.iter().position(|t| t == "gardner").unwrap();
        assert!(p.source_ids[gardner] >= vocab.len());
        assert_eq!(p.oov_tokens[p.source_ids[gardner] - vocab.len()], "gardner");
        assert_eq!(p.target_ids, vec![vocab.id("no").unwrap(), EOS]);
    }

    #[test]
    fn truncation_keeps_the_current_turn() {
        let ex = redundant_text_example();
        let vocab = Vocab::from_tokens(["question", ":"]);
        let p = Prompter::new(PromptVersion::v3(2), cats()).encode(&ex, &vocab);
        let t = p.clone().truncated(5, 2);
        assert_eq!(
            t.source_tokens,
            p.source_tokens[p.source_tokens.len() - 5..]
        );
        assert_eq!(t.target_ids.len(), 2);
        assert_eq!(*t.target_ids.last().unwrap(), EOS);
    }

    fn sentence() -> impl Strategy<Value = String> {
        "[A-Za-z][a-z]{0,6}( [a-z0-9']{1,7}){0,5}\\??"
    }

    proptest! {
        #[test]
        fn version_one_is_suffix_of_version_two(q in sentence(), r in sentence()) {
            let ex = DialogueExample::new("s", turn(1, &q, &r, "x"), vec![]);
            let v = cats();
            let v1 = build_prompt(&ex, PromptVersion::v1(), &v);
            let v2 = build_prompt(&ex, PromptVersion::v2(), &v);
            let cat = categorize(&q, &v);
            prop_assert_eq!(v2, format!("{cat} {v1}"));
        }

        #[test]
        fn version_three_without_history_extends_version_two(q in sentence(), r in sentence()) {
            let ex = DialogueExample::new("s", turn(2, &q, &r, "x"), vec![turn(1, "What?", "y", "y")]);
            let v = cats();
            let v2 = build_prompt(&ex, PromptVersion::v2(), &v);
            let v3 = build_prompt(&ex, PromptVersion::v3(0), &v);
            prop_assert_eq!(v3, format!("{v2} Answer:"));
        }

        #[test]
        fn categorize_ignores_case(q in sentence()) {
            let v = cats();
            prop_assert_eq!(categorize(&q, &v), categorize(&q.to_lowercase(), &v));
        }
    }
}
