use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use pgc::corpus::{
    compute_stats, ingest, read_jsonl, tighten_rationale, write_jsonl, DialogueExample,
};
use pgc::eval::{evaluate, raw_baseline, EvalOptions, EvalReport, PredictionRecord, ScoreMode};
use pgc::model::{encode, export_attention, ModelConfig, PgcModel};
use pgc::prompt::{
    build_category_vocab, CategoryVocab, ExampleKey, PromptedExample, Prompter, EOS,
};
use pgc::tensor::grad_check;
use pgc::train::{
    build_vocab, loss_and_grads, make_synthetic, predict, prepare, write_loss_csv, Checkpoint,
    SyntheticSpec, Trainer,
};

use crate::config::{write_sidecar, RunConfig};
use crate::CliError;

fn data<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Data(format!("{context}: {e}"))
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| {
        CliError::Usage(format!(
            "missing --{flag}; pass it on the command line or in the config file"
        ))
    })
}

fn existing<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    let p = required(path, flag)?;
    if !p.is_file() {
        return Err(CliError::Data(format!(
            "--{flag} {} does not exist or is not a file",
            p.display()
        )));
    }
    Ok(p)
}

fn writable(path: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(p) = path {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty());
        if let Some(dir) = parent {
            if !dir.is_dir() {
                return Err(CliError::Data(format!(
                    "output directory {} does not exist",
                    dir.display()
                )));
            }
        }
    }
    Ok(())
}

/// CoQA JSON, or line-delimited examples when the extension is `.jsonl`.
fn load_examples(path: &Path) -> Result<Vec<DialogueExample>, CliError> {
    let context = path.display().to_string();
    let examples = if path.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl(path).map_err(|e| CliError::Data(format!("{context}: {e}")))?
    } else {
        ingest(path).map_err(|e| CliError::Data(format!("{context}: {e}")))?
    };
    if examples.is_empty() {
        return Err(CliError::Data(format!("{context} contains no examples")));
    }
    Ok(examples)
}

fn categories(cfg: &RunConfig, input: &[DialogueExample]) -> Result<CategoryVocab, CliError> {
    let owned;
    let source = match &cfg.train_input {
        Some(_) => {
            owned = load_examples(existing(&cfg.train_input, "train-input")?)?;
            &owned
        }
        None => input,
    };
    build_category_vocab(source, cfg.top_k_categories).map_err(|e| CliError::Usage(e.to_string()))
}

fn write_text(output: &Option<PathBuf>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(data(&p.display().to_string())),
        None => out.write_all(text.as_bytes()).map_err(data("stdout")),
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("record serializes") + "\n")
        .collect()
}

fn say(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(data("stdout"))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = existing(&cfg.checkpoint, "checkpoint")?;
    Checkpoint::load(path).map_err(|e| CliError::Data(e.to_string()))
}

pub fn execute(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    cfg.model
        .validate()
        .map_err(|e| CliError::Usage(format!("model config: {e}")))?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    writable(&cfg.output)?;
    match cfg.subcommand.as_str() {
        "ingest" => ingest_cmd(cfg, out),
        "stats" => stats_cmd(cfg, out),
        "prompts" => prompts_cmd(cfg, out),
        "train" => train_cmd(cfg, out),
        "predict" => predict_cmd(cfg, out),
        "eval" => eval_cmd(cfg, out),
        "raw-baseline" => raw_baseline_cmd(cfg, out),
        "gradcheck" => gradcheck_cmd(cfg, out),
        "synthetic" => synthetic_cmd(cfg, out),
        "export-attention" => export_attention_cmd(cfg, out),
        other => Err(CliError::Usage(format!("unknown subcommand {other:?}"))),
    }?;
    if let Some(output) = &cfg.output {
        write_sidecar(cfg, output)?;
    }
    Ok(())
}

fn ingest_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let input = existing(&cfg.input, "input")?;
    let mut examples = load_examples(input)?;
    if cfg.tighten {
        examples = examples.iter().map(tighten_rationale).collect();
    }
    match &cfg.output {
        Some(p) => {
            write_jsonl(p, &examples).map_err(|e| CliError::Data(e.to_string()))?;
            say(
                out,
                &format!("wrote {} examples to {}", examples.len(), p.display()),
            )
        }
        None => write_text(&None, &jsonl(&examples), out),
    }
}

fn stats_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let examples = load_examples(existing(&cfg.input, "input")?)?;
    let stats = compute_stats(&examples);
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
    write_text(&cfg.output, &text, out)
}

#[derive(Serialize)]
struct PromptRecord<'a> {
    story_id: &'a str,
    turn_id: u32,
    version: u8,
    source_text: String,
    target_text: &'a str,
}

fn prompts_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let examples = load_examples(existing(&cfg.input, "input")?)?;
    let prompter = Prompter::new(cfg.train.prompt_version, categories(cfg, &examples)?);
    let records: Vec<PromptRecord> = examples
        .iter()
        .map(|e| PromptRecord {
            story_id: &e.story_id,
            turn_id: e.turn.turn_id,
            version: cfg.train.prompt_version.number(),
            source_text: prompter.source_text(e),
            target_text: &e.turn.answer,
        })
        .collect();
    write_text(&cfg.output, &jsonl(&records), out)
}

fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let input = existing(&cfg.input, "input")?;
    let output = required(&cfg.output, "output")?;
    let examples = load_examples(input)?;
    let prompter = Prompter::new(cfg.train.prompt_version, categories(cfg, &examples)?);
    let vocab = build_vocab(&examples, &prompter, cfg.vocab_max, cfg.vocab_min_count);
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let prepared = prepare(&examples, &prompter, &vocab, &model_cfg);
    let model = PgcModel::new(model_cfg, cfg.seed)
        .map_err(|e| CliError::Usage(format!("model config: {e}")))?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), &prepared)
        .map_err(|e| CliError::Data(e.to_string()))?;
    say(
        out,
        &format!(
            "training on {} examples, vocabulary {}, {} parameters",
            prepared.len(),
            vocab.len(),
            trainer.model.num_parameters()
        ),
    )?;
    trainer
        .run(|t| t.checkpoint(&vocab, &prompter).save(output))
        .map_err(|e| CliError::Data(e.to_string()))?;
    trainer
        .checkpoint(&vocab, &prompter)
        .save(output)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut loss_path = output.as_os_str().to_owned();
    loss_path.push(".loss.csv");
    write_loss_csv(Path::new(&loss_path), trainer.curve())
        .map_err(|e| CliError::Data(e.to_string()))?;
    let last = trainer.curve().last().map_or(f64::NAN, |r| r.loss);
    say(
        out,
        &format!(
            "{} steps, final loss {last:.4}; checkpoint {}",
            trainer.state().step,
            output.display()
        ),
    )
}

fn predict_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let examples = load_examples(existing(&cfg.input, "input")?)?;
    let ckpt = load_checkpoint(cfg)?;
    let model = ckpt.to_model().map_err(|e| CliError::Data(e.to_string()))?;
    let preds = predict(&model, &ckpt.prompter(), &ckpt.vocab, &examples)
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_text(&cfg.output, &jsonl(&preds), out)
}

fn report_outputs(
    cfg: &RunConfig,
    report: &EvalReport,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    say(out, &report.rounded().table_row())?;
    if let Some(p) = &cfg.output {
        let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
        std::fs::write(p, json).map_err(data(&p.display().to_string()))?;
        let mut csv = p.as_os_str().to_owned();
        csv.push(".categories.csv");
        std::fs::write(&csv, report.category_csv()).map_err(data(&p.display().to_string()))?;
    }
    Ok(())
}

fn eval_options(cfg: &RunConfig, categories: CategoryVocab) -> EvalOptions {
    EvalOptions {
        mode: if cfg.multi_ref {
            ScoreMode::MultiMax
        } else {
            ScoreMode::Single
        },
        top_k: cfg.top_k_categories,
        ..EvalOptions::new(categories)
    }
}

fn eval_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let examples = load_examples(existing(&cfg.input, "input")?)?;
    let pred_path = existing(&cfg.predictions, "predictions")?;
    let preds: Vec<PredictionRecord> = read_jsonl(pred_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", pred_path.display())))?;
    let cats = match &cfg.checkpoint {
        Some(_) => load_checkpoint(cfg)?.categories,
        None => categories(cfg, &examples)?,
    };
    let report = evaluate(&preds, &examples, &eval_options(cfg, cats))
        .map_err(|e| CliError::Data(e.to_string()))?;
    report_outputs(cfg, &report, out)
}

fn raw_baseline_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let examples = load_examples(existing(&cfg.input, "input")?)?;
    let opts = eval_options(cfg, categories(cfg, &examples)?);
    report_outputs(cfg, &raw_baseline(&examples, cfg.tighten, &opts), out)
}

/// Five source positions (one outside the vocabulary) and three target
/// positions, the middle one copyable only from the source.
fn gradcheck_example(vocab_size: usize) -> PromptedExample {
    let oov = vocab_size;
    PromptedExample {
        source_text: String::new(),
        target_text: String::new(),
        source_tokens: vec![String::new(); 5],
        source_ids: vec![4, 5, 6, 4, oov],
        target_ids: vec![5, oov, EOS],
        oov_tokens: vec!["oov".into()],
        origin: ExampleKey {
            story_id: "gradcheck".into(),
            turn_id: 1,
        },
    }
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn gradcheck_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.model.vocab_size < 7 || cfg.model.max_source_len < 5 || cfg.model.max_target_len < 3 {
        return Err(CliError::Usage(
            "gradcheck needs vocab_size >= 7, max_source_len >= 5 and max_target_len >= 3".into(),
        ));
    }
    let model =
        PgcModel::new(cfg.model.clone(), cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let example = gradcheck_example(cfg.model.vocab_size);
    let samples = (cfg.gradcheck_samples > 0).then_some(cfg.gradcheck_samples);
    let report = grad_check(
        &model.store,
        |store| loss_and_grads(&model, store, &example).expect("gradcheck example fits the model"),
        1e-5,
        samples,
    );
    let line = format!(
        "max relative error {:.3e} over {} coordinates (worst {}[{}])",
        report.max_rel_error, report.coordinates_checked, report.worst_param, report.worst_index
    );
    write_text(&cfg.output, &format!("{line}\n"), out)?;
    if report.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "gradient check failed: {line} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn synthetic_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        oov_rate: cfg.synthetic_oov_rate,
        ..SyntheticSpec::new(cfg.synthetic_task, cfg.synthetic_examples, cfg.seed)
    };
    let examples = make_synthetic(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    write_text(&cfg.output, &jsonl(&examples), out)
}

fn export_attention_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let examples = load_examples(existing(&cfg.input, "input")?)?;
    let dir = required(&cfg.output, "output")?;
    let ckpt = load_checkpoint(cfg)?;
    let example = examples.get(cfg.example_index).ok_or_else(|| {
        CliError::Usage(format!(
            "--example-index {} is out of range ({} examples)",
            cfg.example_index,
            examples.len()
        ))
    })?;
    let model = ckpt.to_model().map_err(|e| CliError::Data(e.to_string()))?;
    let prompter = ckpt.prompter();
    let p = prompter
        .encode_source(example, &ckpt.vocab)
        .truncated(model.config.max_source_len, model.config.max_target_len);
    let stack = encode(&model, &p.source_ids).map_err(|e| CliError::Data(e.to_string()))?;
    let layer = cfg.layer.unwrap_or(model.config.n_enc_layers - 1);
    let matrices = export_attention(&stack, &p.source_tokens, layer, cfg.heads.as_deref())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(dir).map_err(data(&dir.display().to_string()))?;
    for m in &matrices {
        let path = dir.join(format!("layer{}_head{}.csv", m.layer, m.head));
        std::fs::write(&path, m.to_csv()).map_err(data(&path.display().to_string()))?;
        say(out, &format!("wrote {}", path.display()))?;
    }
    Ok(())
}
