//! Command-line driver: argument parsing, config layering and subcommands.
//!
//! Exit codes: 0 on success, 1 on a usage or config error, 2 on a data
//! error (missing or malformed input, failed check).

mod commands;
mod config;

pub use config::{load_config, parse_config, sidecar_path, RunConfig};

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pgc::prompt::PromptVersion;
use pgc::train::SyntheticTask;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pgc",
    version,
    about = "Prompt-guided copy model for conversational question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file; flags given on the command line override its values
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for initialization, batch order and synthetic data (falls back to $PGC_SEED)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct Io {
    /// Input examples: CoQA JSON or line-delimited examples (.jsonl)
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Output file (stdout when omitted, where supported)
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Categories {
    /// Corpus the question categories are counted on (defaults to --input)
    #[arg(long, value_name = "FILE")]
    train_input: Option<PathBuf>,
    /// Number of interrogative-word categories kept
    #[arg(long, value_name = "K")]
    top_k_categories: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct Prompting {
    /// Prompt version: 1 question+rationale, 2 adds the category word, 3 adds history
    #[arg(long = "version", value_name = "N", value_parser = clap::value_parser!(u8).range(1..=3))]
    prompt_version: Option<u8>,
    /// Prior turns included by version 3
    #[arg(long, value_name = "N")]
    history_depth: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TaskArg {
    Copy,
    Gate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a CoQA JSON file into line-delimited examples
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        /// Replace each extractive rationale by the answer span it contains
        #[arg(long)]
        tighten: bool,
    },
    /// Print extractive/generative counts of a corpus
    Stats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
    },
    /// Emit prompt texts as line-delimited JSON
    Prompts {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        prompting: Prompting,
        #[command(flatten)]
        categories: Categories,
    },
    /// Train a model and write a checkpoint plus a loss curve CSV
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        prompting: Prompting,
        #[command(flatten)]
        categories: Categories,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Rewrite the checkpoint every N steps (0 = only at the end)
        #[arg(long, value_name = "N")]
        checkpoint_interval: Option<u64>,
        /// Largest generator vocabulary, special tokens included
        #[arg(long, value_name = "N")]
        vocab_max: Option<usize>,
    },
    /// Greedy-decode answers with a trained checkpoint
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Score a predictions file against gold examples
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        categories: Categories,
        /// Line-delimited predictions {story_id, turn_id, text}
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
        /// Take categories from this checkpoint instead of counting them
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Score against every human answer and keep the best
        #[arg(long)]
        multi_ref: bool,
    },
    /// Score the annotated rationale itself as the answer
    RawBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        categories: Categories,
        /// Use the tightened rationale for extractive examples
        #[arg(long)]
        tighten: bool,
        /// Score against every human answer and keep the best
        #[arg(long)]
        multi_ref: bool,
    },
    /// Compare analytic and finite-difference gradients of the training loss
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates probed per parameter (0 = all)
        #[arg(long, value_name = "N")]
        samples_per_param: Option<usize>,
    },
    /// Generate a synthetic copy or gate dataset as line-delimited examples
    Synthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long, value_name = "N")]
        examples: Option<usize>,
        /// Probability that a rationale token is a one-off token
        #[arg(long)]
        oov_rate: Option<f64>,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Write encoder self-attention matrices of one example as CSV files
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: Io,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Position of the example within --input
        #[arg(long, value_name = "I")]
        example_index: Option<usize>,
        /// Encoder layer (defaults to the last)
        #[arg(long)]
        layer: Option<usize>,
        /// Comma-separated head indices (defaults to all)
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<usize>>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn base_config(common: &Common, name: &str) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    cfg.subcommand = name.to_string();
    let env_seed = match std::env::var("PGC_SEED") {
        Ok(s) => Some(s.trim().parse::<u64>().map_err(|_| {
            CliError::Usage(format!(
                "PGC_SEED must be a non-negative integer, got {s:?}"
            ))
        })?),
        Err(_) => None,
    };
    set(&mut cfg.seed, common.seed.or(env_seed));
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn apply_io(cfg: &mut RunConfig, io: Io) {
    set_opt(&mut cfg.input, io.input);
    set_opt(&mut cfg.output, io.output);
}

fn apply_categories(cfg: &mut RunConfig, c: Categories) {
    set_opt(&mut cfg.train_input, c.train_input);
    set(&mut cfg.top_k_categories, c.top_k_categories);
}

fn apply_prompting(cfg: &mut RunConfig, p: Prompting) -> Result<(), CliError> {
    let depth = p
        .history_depth
        .unwrap_or(cfg.train.prompt_version.history_depth.max(1));
    if let Some(n) = p.prompt_version {
        cfg.train.prompt_version =
            PromptVersion::from_number(n, depth).map_err(|e| CliError::Usage(e.to_string()))?;
    } else if p.history_depth.is_some() {
        cfg.train.prompt_version.history_depth = depth;
    }
    Ok(())
}

/// Effective config for the parsed command line.
fn resolve(command: Command) -> Result<RunConfig, CliError> {
    Ok(match command {
        Command::Ingest {
            common,
            io,
            tighten,
        } => {
            let mut cfg = base_config(&common, "ingest")?;
            apply_io(&mut cfg, io);
            cfg.tighten |= tighten;
            cfg
        }
        Command::Stats { common, io } => {
            let mut cfg = base_config(&common, "stats")?;
            apply_io(&mut cfg, io);
            cfg
        }
        Command::Prompts {
            common,
            io,
            prompting,
            categories,
        } => {
            let mut cfg = base_config(&common, "prompts")?;
            apply_io(&mut cfg, io);
            apply_prompting(&mut cfg, prompting)?;
            apply_categories(&mut cfg, categories);
            cfg
        }
        Command::Train {
            common,
            io,
            prompting,
            categories,
            epochs,
            max_steps,
            learning_rate,
            batch_size,
            checkpoint_interval,
            vocab_max,
        } => {
            let mut cfg = base_config(&common, "train")?;
            apply_io(&mut cfg, io);
            apply_prompting(&mut cfg, prompting)?;
            apply_categories(&mut cfg, categories);
            set(&mut cfg.train.epochs, epochs);
            set_opt(&mut cfg.train.max_steps, max_steps);
            set(&mut cfg.train.learning_rate, learning_rate);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.checkpoint_interval, checkpoint_interval);
            set(&mut cfg.vocab_max, vocab_max);
            cfg
        }
        Command::Predict {
            common,
            io,
            checkpoint,
        } => {
            let mut cfg = base_config(&common, "predict")?;
            apply_io(&mut cfg, io);
            set_opt(&mut cfg.checkpoint, checkpoint);
            cfg
        }
        Command::Eval {
            common,
            io,
            categories,
            predictions,
            checkpoint,
            multi_ref,
        } => {
            let mut cfg = base_config(&common, "eval")?;
            apply_io(&mut cfg, io);
            apply_categories(&mut cfg, categories);
            set_opt(&mut cfg.predictions, predictions);
            set_opt(&mut cfg.checkpoint, checkpoint);
            cfg.multi_ref |= multi_ref;
            cfg
        }
        Command::RawBaseline {
            common,
            io,
            categories,
            tighten,
            multi_ref,
        } => {
            let mut cfg = base_config(&common, "raw-baseline")?;
            apply_io(&mut cfg, io);
            apply_categories(&mut cfg, categories);
            cfg.tighten |= tighten;
            cfg.multi_ref |= multi_ref;
            cfg
        }
        Command::Gradcheck {
            common,
            samples_per_param,
        } => {
            let mut cfg = base_config(&common, "gradcheck")?;
            set(&mut cfg.gradcheck_samples, samples_per_param);
            cfg
        }
        Command::Synthetic {
            common,
            task,
            examples,
            oov_rate,
            output,
        } => {
            let mut cfg = base_config(&common, "synthetic")?;
            set(
                &mut cfg.synthetic_task,
                task.map(|t| match t {
                    TaskArg::Copy => SyntheticTask::CopyTask,
                    TaskArg::Gate => SyntheticTask::GateTask,
                }),
            );
            set(&mut cfg.synthetic_examples, examples);
            set(&mut cfg.synthetic_oov_rate, oov_rate);
            set_opt(&mut cfg.output, output);
            cfg
        }
        Command::ExportAttention {
            common,
            io,
            checkpoint,
            example_index,
            layer,
            heads,
        } => {
            let mut cfg = base_config(&common, "export-attention")?;
            apply_io(&mut cfg, io);
            set_opt(&mut cfg.checkpoint, checkpoint);
            set(&mut cfg.example_index, example_index);
            set_opt(&mut cfg.layer, layer);
            set_opt(&mut cfg.heads, heads);
            cfg
        }
    })
}

/// Runs one command line (program name first) and returns its exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    return 0;
                }
                _ => 1,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    let result = resolve(cli.command).and_then(|cfg| commands::execute(&cfg, out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}
