use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::{ConversationTurn, CorpusError, DialogueExample, Result};

#[derive(Deserialize)]
struct RawFile {
    data: Vec<RawStory>,
}

#[derive(Deserialize)]
struct RawStory {
    id: String,
    questions: Vec<RawQuestion>,
    answers: Vec<RawAnswer>,
    #[serde(default)]
    additional_answers: BTreeMap<String, Vec<RawAnswer>>,
}

#[derive(Deserialize)]
struct RawQuestion {
    input_text: String,
    turn_id: u32,
}

#[derive(Deserialize)]
struct RawAnswer {
    #[serde(default = "missing_span")]
    span_start: i64,
    #[serde(default)]
    span_text: String,
    input_text: String,
    turn_id: u32,
}

fn missing_span() -> i64 {
    -1
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)).min(text.len())
}

/// Reads a CoQA-format JSON file into per-turn examples.
pub fn ingest(path: &Path) -> Result<Vec<DialogueExample>> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_str(&text)
}

/// [`ingest`] on in-memory JSON.
pub fn ingest_str(text: &str) -> Result<Vec<DialogueExample>> {
    let raw: RawFile = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for story in raw.data {
        out.extend(story_examples(story)?);
    }
    Ok(out)
}

fn story_examples(story: RawStory) -> Result<Vec<DialogueExample>> {
    let structural = |message: String| CorpusError::Structure {
        story_id: story.id.clone(),
        message,
    };
    if story.questions.len() != story.answers.len() {
        return Err(structural(format!(
            "{} questions but {} answers",
            story.questions.len(),
            story.answers.len()
        )));
    }
    let mut turns: Vec<ConversationTurn> = Vec::with_capacity(story.questions.len());
    for (q, a) in story.questions.iter().zip(&story.answers) {
        if q.turn_id != a.turn_id {
            return Err(structural(format!(
                "question turn_id {} paired with answer turn_id {}",
                q.turn_id, a.turn_id
            )));
        }
        if q.turn_id == 0 || turns.last().is_some_and(|t| t.turn_id >= q.turn_id) {
            return Err(structural(format!(
                "turn_id {} is not positive and strictly increasing",
                q.turn_id
            )));
        }
        let rationale = a.span_text.trim();
        let (rationale, span_start) = if a.span_start < 0 || rationale.is_empty() {
            (String::new(), -1)
        } else {
            (rationale.to_string(), a.span_start)
        };
        turns.push(ConversationTurn {
            turn_id: q.turn_id,
            question: q.input_text.trim().to_string(),
            rationale,
            answer: a.input_text.trim().to_string(),
            span_start,
        });
    }

    let mut examples = Vec::with_capacity(turns.len());
    for (i, turn) in turns.iter().enumerate() {
        let mut ex = DialogueExample::new(story.id.clone(), turn.clone(), turns[..i].to_vec());
        ex.extra_references = story
            .additional_answers
            .values()
            .filter_map(|answers| answers.iter().find(|a| a.turn_id == turn.turn_id))
            .map(|a| a.input_text.trim().to_string())
            .collect();
        examples.push(ex);
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{compute_stats, AnswerClass};

    const THREE_TURNS: &str = r#"{"version": "1.0", "data": [{
        "source": "cnn", "id": "s1", "filename": "x.story",
        "story": "He died of an overdose of sedatives and the surgical anesthetic propofol.",
        "questions": [
            {"input_text": "He died of what?", "turn_id": 1},
            {"input_text": "Of what?", "turn_id": 2},
            {"input_text": "And what else?", "turn_id": 3}
        ],
        "answers": [
            {"span_start": 11, "span_end": 21, "span_text": "an overdose", "input_text": "an overdose", "turn_id": 1},
            {"span_start": 14, "span_end": 35, "span_text": "overdose of sedatives", "input_text": "sedatives", "turn_id": 2},
            {"span_start": 14, "span_end": 72, "span_text": " overdose of sedatives and the surgical anesthetic propofol", "input_text": "surgical anesthetic propofol", "turn_id": 3}
        ],
        "additional_answers": {
            "0": [
                {"span_start": 11, "span_end": 21, "span_text": "an overdose", "input_text": "overdose", "turn_id": 1},
                {"span_start": 14, "span_end": 35, "span_text": "sedatives", "input_text": "sedatives", "turn_id": 2},
                {"span_start": -1, "span_end": -1, "span_text": "unknown", "input_text": "propofol", "turn_id": 3}
            ]
        }
    }]}"#;

    #[test]
    fn three_turn_story() {
        let ex = ingest_str(THREE_TURNS).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[2].history.len(), 2);
        assert_eq!(ex[2].history[1].answer, "sedatives");
        assert_eq!(
            ex[2].turn.rationale,
            "overdose of sedatives and the surgical anesthetic propofol"
        );
        assert_eq!(ex[2].extra_references, vec!["propofol".to_string()]);
        assert!(ex.iter().all(|e| e.answer_class == AnswerClass::Extractive));
        let ids: Vec<u32> = ex[2]
            .history
            .iter()
            .map(|t| t.turn_id)
            .chain([ex[2].turn.turn_id])
            .collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn empty_data_is_empty() {
        assert!(ingest_str(r#"{"data": []}"#).unwrap().is_empty());
    }

    #[test]
    fn unknown_answers_have_no_rationale() {
        let text = r#"{"data": [{"id": "u", "questions": [{"input_text": "Why?", "turn_id": 1}],
            "answers": [{"span_start": -1, "span_end": -1, "span_text": "unknown", "input_text": "unknown", "turn_id": 1}]}]}"#;
        let ex = ingest_str(text).unwrap();
        assert_eq!(ex[0].turn.rationale, "");
        assert_eq!(ex[0].turn.span_start, -1);
        assert_eq!(ex[0].answer_class, AnswerClass::Generative);
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let text = "{\"data\": [\n  {\"id\": oops}\n]}";
        match ingest_str(text) {
            Err(CorpusError::Parse { offset, .. }) => assert_eq!(&text[offset..offset + 1], "o"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_turn_ids_name_the_story() {
        let text = r#"{"data": [{"id": "story-42", "questions": [{"input_text": "Q?", "turn_id": 1}],
            "answers": [{"span_start": 0, "span_end": 1, "span_text": "x", "input_text": "x", "turn_id": 2}]}]}"#;
        let err = ingest_str(text).unwrap_err();
        assert!(matches!(&err, CorpusError::Structure { story_id, .. } if story_id == "story-42"));
        assert!(err.to_string().contains("story-42"));
    }

    #[test]
    fn hand_built_counts_survive_ingest() {
        // 3 extractive turns and 2 generative ones
        let rows = [
            ("red fox", "red fox"),
            ("red fox", "fox"),
            ("the fifth planet from the Sun", "fifth planet"),
            ("the fifth planet from the Sun", "Five"),
            ("Gardner was nowhere to be found", "no"),
        ];
        let questions: Vec<String> = (1..=rows.len())
            .map(|i| format!(r#"{{"input_text": "q{i}?", "turn_id": {i}}}"#))
            .collect();
        let answers: Vec<String> = rows
            .iter()
            .enumerate()
            .map(|(i, (r, a))| {
                format!(
                    r#"{{"span_start": 0, "span_end": 1, "span_text": "{r}", "input_text": "{a}", "turn_id": {}}}"#,
                    i + 1
                )
            })
            .collect();
        let text = format!(
            r#"{{"data": [{{"id": "h", "questions": [{}], "answers": [{}]}}]}}"#,
            questions.join(","),
            answers.join(",")
        );
        let stats = compute_stats(&ingest_str(&text).unwrap());
        assert_eq!((stats.n_extractive, stats.n_generative), (3, 2));
    }
}
