use pgc::corpus::{ingest_str, AnswerClass};
use pgc::eval::{evaluate, EvalOptions};
use pgc::model::{ModelConfig, PgcModel};
use pgc::prompt::{build_category_vocab, PromptVersion, Prompter};
use pgc::train::{build_vocab, predict, prepare, Checkpoint, TrainConfig, Trainer};

const COQA: &str = r#"{"version": "1.0", "data": [
  {"id": "s1", "story": "text", "questions": [
      {"input_text": "Did she return safely?", "turn_id": 1},
      {"input_text": "What did she do?", "turn_id": 2},
      {"input_text": "Where was the dog?", "turn_id": 3}],
   "answers": [
      {"span_start": 0, "span_text": "Gardner was nowhere to be found", "input_text": "no", "turn_id": 1},
      {"span_start": 5, "span_text": "she was taking a nap", "input_text": "taking a nap", "turn_id": 2},
      {"span_start": 9, "span_text": "the dog slept in the barn", "input_text": "in the barn", "turn_id": 3}]}
]}"#;

fn tiny(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: 2,
        n_dec_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_k: None,
        d_ff: 16,
        vocab_size,
        max_source_len: 48,
        max_target_len: 8,
    }
}

#[test]
fn ingest_train_checkpoint_predict_evaluate() {
    let examples = ingest_str(COQA).unwrap();
    assert_eq!(examples.len(), 3);
    assert_eq!(examples[2].history.len(), 2);
    assert_eq!(examples[0].answer_class, AnswerClass::Generative);

    let prompter = Prompter::new(
        PromptVersion::v3(1),
        build_category_vocab(&examples, 10).unwrap(),
    );
    let vocab = build_vocab(&examples, &prompter, 64, 1);
    let config = tiny(vocab.len());
    let data = prepare(&examples, &prompter, &vocab, &config);
    assert_eq!(data.len(), 3);

    let train = TrainConfig {
        batch_size: 2,
        max_steps: Some(6),
        seed: 11,
        prompt_version: PromptVersion::v3(1),
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(
        PgcModel::new(config.clone(), 11).unwrap(),
        train.clone(),
        &data,
    )
    .unwrap();
    trainer.run(|_| Ok(())).unwrap();
    let ckpt = trainer.checkpoint(&vocab, &prompter);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load_expecting(&path, &config).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.state.step, 6);

    let model = loaded.to_model().unwrap();
    let direct = predict(&trainer.model, &prompter, &vocab, &examples).unwrap();
    let reloaded = predict(&model, &loaded.prompter(), &loaded.vocab, &examples).unwrap();
    assert_eq!(direct, reloaded);

    let report = evaluate(
        &reloaded,
        &examples,
        &EvalOptions::new(loaded.categories.clone()),
    )
    .unwrap();
    assert_eq!(
        (report.n_overall, report.n_generative, report.n_extractive),
        (3, 1, 2)
    );
    let f1 = report.o_f1.unwrap();
    assert!((0.0..=100.0).contains(&f1));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let examples = ingest_str(COQA).unwrap();
    let prompter = Prompter::new(
        PromptVersion::v2(),
        build_category_vocab(&examples, 10).unwrap(),
    );
    let vocab = build_vocab(&examples, &prompter, 64, 1);
    let config = tiny(vocab.len());
    let data = prepare(&examples, &prompter, &vocab, &config);
    let train = |steps| TrainConfig {
        batch_size: 2,
        max_steps: Some(steps),
        seed: 4,
        prompt_version: PromptVersion::v2(),
        ..TrainConfig::desk()
    };

    let mut whole =
        Trainer::new(PgcModel::new(config.clone(), 4).unwrap(), train(8), &data).unwrap();
    whole.run(|_| Ok(())).unwrap();

    let mut first =
        Trainer::new(PgcModel::new(config.clone(), 4).unwrap(), train(3), &data).unwrap();
    first.run(|_| Ok(())).unwrap();
    let ckpt = first.checkpoint(&vocab, &prompter);
    let mut second = Trainer::resume(
        ckpt.to_model().unwrap(),
        train(8),
        &data,
        ckpt.state,
        ckpt.loss_curve.clone(),
    )
    .unwrap();
    second.run(|_| Ok(())).unwrap();

    assert_eq!(second.curve(), whole.curve());
    assert_eq!(
        second.model.store.to_stored(),
        whole.model.store.to_stored()
    );
}
