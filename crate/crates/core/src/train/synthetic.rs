use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::corpus::{ConversationTurn, DialogueExample};

/// Token whose presence decides a gate-task answer.
pub const GATE_MARKER: &str = "beacon";

const COPY_QUESTION: &str = "what was stated ?";
const GATE_QUESTION: &str = "did it appear ?";
/// Vocabulary slots left for special tokens and prompt words.
const RESERVED: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// The answer repeats the rationale, which mixes common words with
    /// one-off tokens the generator vocabulary cannot hold.
    CopyTask,
    /// The answer is `yes` iff the rationale contains [`GATE_MARKER`].
    GateTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    /// Target generator vocabulary size; the common-word pool is slightly
    /// smaller.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_examples: usize,
    pub seed: u64,
    /// Probability that a rationale token is a one-off token.
    pub oov_rate: f64,
}

impl SyntheticSpec {
    pub fn new(task: SyntheticTask, n_examples: usize, seed: u64) -> Self {
        Self {
            task,
            vocab_size: 512,
            min_len: 4,
            max_len: 12,
            n_examples,
            seed,
            oov_rate: 0.15,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.vocab_size.saturating_sub(RESERVED)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Synthetic(m.to_string()));
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail("need 1 <= min_len <= max_len");
        }
        if self.pool_size() < 2 {
            return fail("vocab_size leaves no room for content words");
        }
        if !(0.0..1.0).contains(&self.oov_rate) {
            return fail("oov_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Deterministic synthetic dialogue turns.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Vec<DialogueExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool = spec.pool_size();
    let mut out = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut words: Vec<String> = (0..len)
            .map(|j| {
                if rng.random_bool(spec.oov_rate) {
                    format!("x{}n{}t{}", spec.seed, i, j)
                } else {
                    format!("w{}", rng.random_range(0..pool))
                }
            })
            .collect();
        let (question, answer) = match spec.task {
            SyntheticTask::CopyTask => (COPY_QUESTION, words.join(" ")),
            SyntheticTask::GateTask => {
                let present = rng.random_bool(0.5);
                if present {
                    let at = rng.random_range(0..len);
                    words[at] = GATE_MARKER.to_string();
                }
                (
                    GATE_QUESTION,
                    if present { "yes" } else { "no" }.to_string(),
                )
            }
        };
        let turn = ConversationTurn {
            turn_id: 1,
            question: question.to_string(),
            rationale: words.join(" "),
            answer,
            span_start: 0,
        };
        let tag = match spec.task {
            SyntheticTask::CopyTask => "copy",
            SyntheticTask::GateTask => "gate",
        };
        out.push(DialogueExample::new(
            format!("{tag}-{}-{i}", spec.seed),
            turn,
            Vec::new(),
        ));
    }
    Ok(out)
}
