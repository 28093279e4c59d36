//! CoQA-style scoring: normalization, EM/F1, overall/generative/extractive
//! splits and per-category breakdowns.

mod metrics;

pub use metrics::{em, f1, normalize, normalized_tokens, score_multi, ScoreMode};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tighten_rationale, AnswerClass, DialogueExample};
use crate::prompt::{categorize, CategoryVocab};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction for story {story_id} turn {turn_id} has no matching example")]
    UnmatchedPrediction { story_id: String, turn_id: u32 },
    #[error("duplicate prediction for story {story_id} turn {turn_id}")]
    DuplicatePrediction { story_id: String, turn_id: u32 },
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub story_id: String,
    pub turn_id: u32,
    pub text: String,
}

/// A prediction joined with its gold references (primary first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub story_id: String,
    pub turn_id: u32,
    pub text: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    /// Mean F1 as a percentage.
    pub f1: f64,
    pub count: usize,
}

/// Scores are percentages; a split with no examples reports `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub o_em: Option<f64>,
    pub o_f1: Option<f64>,
    pub g_em: Option<f64>,
    pub g_f1: Option<f64>,
    pub e_em: Option<f64>,
    pub e_f1: Option<f64>,
    pub n_overall: usize,
    pub n_generative: usize,
    pub n_extractive: usize,
    pub per_category: Vec<CategoryScore>,
    pub mode: ScoreMode,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl EvalReport {
    /// Copy with every score rounded to one decimal place.
    pub fn rounded(&self) -> Self {
        let r = |x: Option<f64>| x.map(round1);
        Self {
            o_em: r(self.o_em),
            o_f1: r(self.o_f1),
            g_em: r(self.g_em),
            g_f1: r(self.g_f1),
            e_em: r(self.e_em),
            e_f1: r(self.e_f1),
            per_category: self
                .per_category
                .iter()
                .map(|c| CategoryScore {
                    f1: round1(c.f1),
                    ..c.clone()
                })
                .collect(),
            ..self.clone()
        }
    }

    /// `category,f1,count` rows for plotting.
    pub fn category_csv(&self) -> String {
        let mut out = String::from("category,f1,count\n");
        for c in &self.per_category {
            out.push_str(&format!("{},{:.1},{}\n", c.category, c.f1, c.count));
        }
        out
    }

    /// Table row in O-EM, O-F1, G-EM, G-F1, E-EM, E-F1 order.
    pub fn table_row(&self) -> String {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}"));
        format!(
            "O-EM {} | O-F1 {} | G-EM {} | G-F1 {} | E-EM {} | E-F1 {}",
            f(self.o_em),
            f(self.o_f1),
            f(self.g_em),
            f(self.g_f1),
            f(self.e_em),
            f(self.e_f1)
        )
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub mode: ScoreMode,
    pub categories: CategoryVocab,
    /// Number of categories kept, by descending count.
    pub top_k: usize,
}

impl EvalOptions {
    pub fn new(categories: CategoryVocab) -> Self {
        Self {
            mode: ScoreMode::Single,
            categories,
            top_k: 10,
        }
    }
}

#[derive(Default)]
struct Split {
    em: f64,
    f1: f64,
    n: usize,
}

impl Split {
    fn add(&mut self, em: f64, f1: f64) {
        self.em += em;
        self.f1 += f1;
        self.n += 1;
    }

    fn means(&self) -> (Option<f64>, Option<f64>) {
        if self.n == 0 {
            (None, None)
        } else {
            let n = self.n as f64;
            (Some(100.0 * self.em / n), Some(100.0 * self.f1 / n))
        }
    }
}

/// Joins predictions to their examples and attaches the gold references.
pub fn join_predictions(
    records: &[PredictionRecord],
    examples: &[DialogueExample],
) -> Result<Vec<(Prediction, AnswerClass, String)>, EvalError> {
    let by_key: HashMap<(&str, u32), &DialogueExample> = examples
        .iter()
        .map(|e| ((e.story_id.as_str(), e.turn.turn_id), e))
        .collect();
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .map(|r| {
            let ex = by_key
                .get(&(r.story_id.as_str(), r.turn_id))
                .ok_or_else(|| EvalError::UnmatchedPrediction {
                    story_id: r.story_id.clone(),
                    turn_id: r.turn_id,
                })?;
            if !seen.insert((r.story_id.as_str(), r.turn_id)) {
                return Err(EvalError::DuplicatePrediction {
                    story_id: r.story_id.clone(),
                    turn_id: r.turn_id,
                });
            }
            let p = Prediction {
                story_id: r.story_id.clone(),
                turn_id: r.turn_id,
                text: r.text.clone(),
                references: ex.references(),
            };
            Ok((p, ex.answer_class, ex.turn.question.clone()))
        })
        .collect()
}

/// Scores predictions by answer class and question category.
pub fn evaluate(
    records: &[PredictionRecord],
    examples: &[DialogueExample],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let joined = join_predictions(records, examples)?;
    let (mut overall, mut gen, mut ext) = (Split::default(), Split::default(), Split::default());
    let mut by_category: BTreeMap<String, Split> = BTreeMap::new();
    for (p, class, question) in &joined {
        let (e, f) = score_multi(&p.text, &p.references, opts.mode);
        overall.add(e, f);
        match class {
            AnswerClass::Generative => gen.add(e, f),
            AnswerClass::Extractive => ext.add(e, f),
        }
        by_category
            .entry(categorize(question, &opts.categories))
            .or_default()
            .add(e, f);
    }
    let mut per_category: Vec<CategoryScore> = by_category
        .into_iter()
        .map(|(category, s)| CategoryScore {
            f1: s.means().1.unwrap_or(0.0),
            count: s.n,
            category,
        })
        .collect();
    per_category.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.category.cmp(&b.category))
    });
    per_category.truncate(opts.top_k);

    let (o_em, o_f1) = overall.means();
    let (g_em, g_f1) = gen.means();
    let (e_em, e_f1) = ext.means();
    Ok(EvalReport {
        o_em,
        o_f1,
        g_em,
        g_f1,
        e_em,
        e_f1,
        n_overall: overall.n,
        n_generative: gen.n,
        n_extractive: ext.n,
        per_category,
        mode: opts.mode,
    })
}

/// Predictions that answer every turn with its annotated rationale.
pub fn rationale_predictions(examples: &[DialogueExample], tighten: bool) -> Vec<PredictionRecord> {
    examples
        .iter()
        .map(|e| {
            let rationale = if tighten {
                tighten_rationale(e).turn.rationale
            } else {
                e.turn.rationale.clone()
            };
            PredictionRecord {
                story_id: e.story_id.clone(),
                turn_id: e.turn.turn_id,
                text: rationale,
            }
        })
        .collect()
}

/// The no-model baseline: each turn's rationale scored as its answer.
pub fn raw_baseline(examples: &[DialogueExample], tighten: bool, opts: &EvalOptions) -> EvalReport {
    evaluate(&rationale_predictions(examples, tighten), examples, opts)
        .expect("rationale predictions are keyed by the examples themselves")
}
