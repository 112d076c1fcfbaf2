//! `xmodal`: generate synthetic corpora, filter teacher transcripts, train
//! language models and students, decode and score.
//!
//! Exit status is 0 on success, 1 on usage or configuration errors and 2 on
//! runtime failures.

// `!(x > 0.0)` style guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod corpus;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use xmodal_core::decode::{DEFAULT_LM_ORDER, DESK_BEAM_WIDTH};
use xmodal_core::distill::{DEFAULT_LAMBDA_CTC, DEFAULT_LAMBDA_KD};
use xmodal_core::eval::{DEFAULT_MAX_AGREEMENT_WER, DEFAULT_MIN_VALID_RATIO};
use xmodal_core::model::PRESETS;
use xmodal_core::train::Scenario;

/// A problem with the invocation or configuration rather than the run.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Cross-modal CTC distillation toolkit")]
struct Cli {
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run single-threaded. Results are bit-identical at any worker count;
    /// this only removes scheduling from the picture.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired corpus with teacher posteriors
    GenData(GenDataArgs),
    /// Two-stage filter of teacher transcripts: dictionary words, then
    /// agreement with a second transcription
    Filter(FilterArgs),
    /// Train a word n-gram language model
    TrainLm(TrainLmArgs),
    /// Train a student model under one of the supervision scenarios
    Train(TrainArgs),
    /// Decode a manifest with a trained model
    Decode(DecodeArgs),
    /// Decode and score against reference transcripts
    EvalWer(EvalArgs),
    /// Run the oracle and gradient property suite
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML) with [data], [model], [loss], [optim],
    /// [decode] and [filter] sections; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; the resolved configuration is written here
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus seed
    #[arg(long)]
    seed: Option<u64>,
    /// Number of utterances, train and dev together
    #[arg(long)]
    utterances: Option<usize>,
    /// Utterances held out for the dev manifest
    #[arg(long)]
    dev: Option<usize>,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    /// Dictionary, one word per line
    #[arg(long)]
    dict: PathBuf,
    #[arg(long, help = format!(
        "Keep if at least this share of words with 4+ letters are dictionary words [default: {DEFAULT_MIN_VALID_RATIO:.2}]"
    ))]
    min_valid: Option<f64>,
    #[arg(long, help = format!(
        "Keep if the WER between the two transcriptions is below this [default: {DEFAULT_MAX_AGREEMENT_WER:.2}]"
    ))]
    max_wer: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainLmArgs {
    #[command(flatten)]
    common: Common,
    /// Take sentences from this manifest field
    #[arg(long, required_unless_present = "text")]
    manifest: Option<PathBuf>,
    /// Take sentences from a text file, one per line
    #[arg(long, conflicts_with = "manifest")]
    text: Option<PathBuf>,
    /// Manifest field holding the sentences
    #[arg(long, default_value = "transcript_asr")]
    field: String,
    #[arg(long, help = format!("N-gram order [default: {DEFAULT_LM_ORDER}]"))]
    order: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// full_supervision, no_supervision or pretrain_finetune [default: no_supervision]
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Training manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Dev manifest with ground truth [default: dev.jsonl beside the training manifest]
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Alphabet file [default: alphabet.txt beside the manifest, else the config's]
    #[arg(long)]
    alphabet: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, help = format!("Model preset: {} [default: desk]", PRESETS.join(", ")))]
    preset: Option<String>,
    #[arg(long, help = format!("Weight of the CTC term [default: {DEFAULT_LAMBDA_CTC}]"))]
    lambda_ctc: Option<f64>,
    #[arg(long, help = format!("Weight of the distillation term [default: {DEFAULT_LAMBDA_KD}]"))]
    lambda_kd: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Dev evaluation interval in steps
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Seed for initialization, batching and dropout
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub(crate) struct DecodeFlags {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Alphabet file [default: alphabet.txt beside the manifest, else the config's]
    #[arg(long)]
    alphabet: Option<PathBuf>,
    #[arg(long, help = format!("Prefix beam search with this width [config default: {DESK_BEAM_WIDTH}]"))]
    beam: Option<usize>,
    /// Best-path decoding even if the config asks for beam search
    #[arg(long, conflicts_with_all = ["beam", "lm"])]
    greedy: bool,
    /// Word LM for shallow fusion (implies beam search)
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    lm_weight: Option<f64>,
    #[arg(long)]
    word_bonus: Option<f64>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Manifest field holding the reference transcripts
    #[arg(long, default_value = "transcript_gt")]
    reference: String,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the paper-size shape check
    #[arg(long)]
    quick: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || matches!(cause.downcast_ref(), Some(xmodal_core::Error::Config(_))) {
            return 1;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let workers = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = workers {
        if n == 0 {
            return Err(Invalid("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a.common, a.seed, a.utterances, a.dev),
        Command::Filter(a) => commands::filter(&a.common, &a.manifest, &a.dict, a.min_valid, a.max_wer),
        Command::TrainLm(a) => {
            commands::train_lm(&a.common, a.manifest.as_deref(), a.text.as_deref(), &a.field, a.order)
        }
        Command::Train(a) => commands::train(a),
        Command::Decode(a) => commands::decode(&a.common, &a.decode),
        Command::EvalWer(a) => commands::eval_wer(&a.common, &a.decode, &a.reference),
        Command::Check(a) => commands::check(&a.out, a.seed, a.quick),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => ExitCode::from(1),
                _ => {
                    eprintln!("\n{}", Cli::command().render_help());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // causes that only repeat their parent's text are dropped
            let mut message = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !message.contains(&text) {
                    if !message.is_empty() {
                        message.push_str(": ");
                    }
                    message.push_str(&text);
                }
            }
            eprintln!("error: {message}");
            ExitCode::from(exit_code(&e))
        }
    }
}
