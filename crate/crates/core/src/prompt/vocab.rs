use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Generator vocabulary. Ids `0..4` are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials followed by `words` in order, duplicates skipped.
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from(tokens)
    }

    /// Most frequent tokens with at least `min_count` occurrences, capped so
    /// that the vocabulary (specials included) has at most `max_size` entries.
    /// Ties are broken lexicographically.
    pub fn build<'a, I>(token_lists: I, max_size: usize, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for list in token_lists {
            for t in list {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIAL_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let room = max_size.saturating_sub(SPECIAL_TOKENS.len());
        Self::from_tokens(ranked.into_iter().take(room).map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids under the extended vocabulary: out-of-vocabulary tokens get
    /// `len() + k` where `k` indexes the returned OOV list.
    pub fn encode_source(&self, tokens: &[String]) -> (Vec<usize>, Vec<String>) {
        let mut oov: Vec<String> = Vec::new();
        let ids = tokens
            .iter()
            .map(|t| match self.id(t) {
                Some(id) => id,
                None => {
                    let k = oov.iter().position(|o| o == t).unwrap_or_else(|| {
                        oov.push(t.clone());
                        oov.len() - 1
                    });
                    self.len() + k
                }
            })
            .collect();
        (ids, oov)
    }

    /// Target ids: in-vocabulary tokens keep their id, source OOV tokens
    /// take their extended id, anything else becomes UNK.
    pub fn encode_target(&self, tokens: &[String], oov: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .or_else(|| oov.iter().position(|o| o == t).map(|k| self.len() + k))
                    .unwrap_or(UNK)
            })
            .collect()
    }

    /// Surface token for an extended id.
    pub fn decode_id<'a>(&'a self, id: usize, oov: &'a [String]) -> &'a str {
        if id < self.len() {
            &self.tokens[id]
        } else {
            oov.get(id - self.len())
                .map(String::as_str)
                .unwrap_or(SPECIAL_TOKENS[UNK])
        }
    }

    /// Id fed to embedding lookups: extended ids collapse to UNK.
    pub fn embedding_id(&self, id: usize) -> usize {
        if id < self.len() {
            id
        } else {
            UNK
        }
    }
}
