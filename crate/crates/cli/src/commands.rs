use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use xmodal_core::decode::{beam_search, greedy_transcript, NGramLM};
use xmodal_core::eval::{corpus_wer, filter_corpus, read_manifest, wer_str, write_manifest, WerBreakdown};
use xmodal_core::model::{Mode, ModelConfig};
use xmodal_core::teacher::{generate_corpus, generate_lexicon, Utterance};
use xmodal_core::train::run_scenario;
use xmodal_core::{check as suite, Model32, PosteriorGrid};

use crate::config::{DecodeMethod, RunConfig};
use crate::corpus::{
    load_utterances, resolve_alphabet, write_relocated, write_utterances, ALPHABET_FILE, DEV_MANIFEST, LEXICON_FILE,
    TRAIN_MANIFEST,
};
use crate::{Common, DecodeFlags, Invalid, TrainArgs};

pub const CURVE_FILE: &str = "curve.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const CHECKPOINT_FILE: &str = "model.jlip";
pub const LM_FILE: &str = "lm.txt";
pub const WER_FILE: &str = "wer.csv";

fn prepare_out(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(
    common: &Common,
    seed: Option<u64>,
    utterances: Option<usize>,
    dev: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let corpus = &mut cfg.data.corpus;
    if let Some(s) = seed {
        corpus.seed = s;
    }
    if let Some(n) = utterances {
        corpus.num_utterances = n;
    }
    if let Some(d) = dev {
        cfg.data.dev_utterances = d;
    }
    cfg.data.corpus.validate()?;
    let total = cfg.data.corpus.num_utterances;
    if cfg.data.dev_utterances >= total {
        return Err(invalid(format!(
            "dev_utterances ({}) must be smaller than num_utterances ({total})",
            cfg.data.dev_utterances
        )));
    }
    prepare_out(&common.out)?;
    cfg.echo(&common.out)?;

    let utts = generate_corpus(&cfg.data.corpus)?;
    let lexicon = generate_lexicon(&cfg.data.corpus)?;
    let records = write_utterances(&common.out, &utts)?;
    let split = total - cfg.data.dev_utterances;
    write_manifest(&common.out.join(TRAIN_MANIFEST), &records[..split])?;
    write_manifest(&common.out.join(DEV_MANIFEST), &records[split..])?;
    cfg.data.corpus.alphabet.save(&common.out.join(ALPHABET_FILE))?;
    let mut words = lexicon.join("\n");
    words.push('\n');
    write_text(&common.out.join(LEXICON_FILE), &words)?;
    println!(
        "wrote {split} training and {} dev utterances to {}",
        cfg.data.dev_utterances,
        common.out.display()
    );
    Ok(())
}

pub fn filter(
    common: &Common,
    manifest: &Path,
    dict: &Path,
    min_valid: Option<f64>,
    max_wer: Option<f64>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(v) = min_valid {
        cfg.filter.min_valid_ratio = v;
    }
    if let Some(v) = max_wer {
        cfg.filter.max_agreement_wer = v;
    }
    let t = cfg.thresholds();
    if !(0.0..=1.0).contains(&t.min_valid_ratio) || !(t.max_agreement_wer > 0.0) {
        return Err(invalid("--min-valid must lie in [0, 1] and --max-wer must be positive"));
    }
    prepare_out(&common.out)?;
    cfg.echo(&common.out)?;

    let text = std::fs::read_to_string(dict).with_context(|| format!("reading {}", dict.display()))?;
    let dictionary: HashSet<String> = text
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect();
    let records = read_manifest(manifest)?;
    let (report, kept) = filter_corpus(&records, &dictionary, &t)?;
    write_relocated(&common.out.join("filtered.jsonl"), manifest, &kept)?;
    write_text(&common.out.join("filter_report.jsonl"), &report.to_jsonl())?;
    let summary = report.summary(&t);
    write_text(&common.out.join("filter_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn train_lm(
    common: &Common,
    manifest: Option<&Path>,
    text: Option<&Path>,
    field: &str,
    order: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(o) = order {
        cfg.decode.lm_order = o;
    }
    let lines: Vec<String> = match (manifest, text) {
        (_, Some(path)) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::to_owned)
            .collect(),
        (Some(path), None) => {
            let records = read_manifest(path)?;
            records
                .iter()
                .map(|r| {
                    let value = match field {
                        "transcript_gt" => r.transcript_gt.clone(),
                        "transcript_asr" => r.transcript_asr.clone(),
                        "transcript_asr2" => r.transcript_asr2.clone(),
                        other => r.extra.get(other).and_then(|v| v.as_str()).map(str::to_owned),
                    };
                    value.ok_or_else(|| anyhow::anyhow!("utterance {} has no {field}", r.id))
                })
                .collect::<anyhow::Result<_>>()?
        }
        (None, None) => return Err(invalid("train-lm needs --manifest or --text")),
    };
    let lm = NGramLM::train(lines.iter(), cfg.ngram())?;
    prepare_out(&common.out)?;
    cfg.echo(&common.out)?;
    lm.save(&common.out.join(LM_FILE))?;
    println!(
        "trained order-{} LM over {} words from {} sentences",
        lm.order(),
        lm.vocab().len(),
        lines.len()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let common = &args.common;
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = args.scenario {
        cfg.loss.scenario = s;
    }
    if let Some(v) = args.lambda_ctc {
        cfg.loss.lambda_ctc = v;
    }
    if let Some(v) = args.lambda_kd {
        cfg.loss.lambda_kd = v;
    }
    if let Some(p) = args.preset {
        cfg.model.preset = p;
    }
    let o = &mut cfg.optim;
    if let Some(v) = args.epochs {
        o.epochs = v;
    }
    if let Some(v) = args.finetune_epochs {
        o.finetune_epochs = v;
    }
    if let Some(v) = args.batch_size {
        o.batch_size = v;
    }
    if let Some(v) = args.lr {
        o.lr = v;
    }
    if let Some(v) = args.eval_every {
        o.eval_every = v;
    }
    if let Some(v) = args.max_steps {
        o.max_steps = v;
    }
    if let Some(s) = args.seed {
        o.seed = s;
        cfg.model.seed = s;
    }
    let scenario = cfg.scenario()?;
    let dev_path = match args.dev {
        Some(p) => p,
        None => {
            let beside = args
                .manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
                .join(DEV_MANIFEST);
            if args.manifest.file_name() == beside.file_name() || !beside.is_file() {
                return Err(invalid("no dev manifest found; pass --dev"));
            }
            beside
        }
    };
    let alphabet = resolve_alphabet(args.alphabet.as_deref(), &args.manifest, &cfg.data.corpus.alphabet)?;
    let train = load_utterances(&args.manifest)?;
    let dev = load_utterances(&dev_path)?;
    let Some(first) = train.first() else {
        return Err(xmodal_core::Error::Data {
            message: "training manifest is empty".into(),
            ids: Vec::new(),
        }
        .into());
    };
    let input_dim = first.features.cols();
    let init = match &args.init {
        Some(path) => Model32::load(path)?,
        None => {
            let config = ModelConfig::preset(&cfg.model.preset, input_dim, alphabet.num_symbols())?;
            Model32::init(&config, cfg.model.seed)?
        }
    };
    let mc = init.config();
    if mc.input_dim != input_dim || mc.num_symbols != alphabet.num_symbols() {
        return Err(invalid(format!(
            "model expects {} features and {} symbols; data has {input_dim} and the alphabet {}",
            mc.input_dim,
            mc.num_symbols,
            alphabet.num_symbols()
        )));
    }

    prepare_out(&common.out)?;
    cfg.echo(&common.out)?;
    eprintln!(
        "training {} ({} params) on {} utterances, dev {}",
        scenario.scenario,
        init.num_params(),
        train.len(),
        dev.len()
    );
    let outcome = run_scenario(&scenario, &alphabet, init, &train, &dev)?;
    outcome.curve.save(&common.out.join(CURVE_FILE))?;
    write_text(&common.out.join(STEPS_FILE), &outcome.steps_csv())?;
    outcome.params.save(&common.out.join(CHECKPOINT_FILE))?;
    if let Some(wer) = outcome.curve.final_wer() {
        println!(
            "{} steps, final dev greedy WER {:.2}%",
            outcome.steps.len(),
            100.0 * wer
        );
    }
    Ok(())
}

struct Decoding {
    utterances: Vec<Utterance>,
    hypotheses: Vec<String>,
    /// Flag echo for report headers.
    description: String,
}

fn run_decoding(cfg: &mut RunConfig, flags: &DecodeFlags) -> anyhow::Result<Decoding> {
    let d = &mut cfg.decode;
    if let Some(w) = flags.beam {
        d.method = DecodeMethod::Beam;
        d.beam_width = w;
    }
    if let Some(lm) = &flags.lm {
        d.method = DecodeMethod::Beam;
        d.lm = Some(lm.clone());
    }
    if flags.greedy {
        d.method = DecodeMethod::Greedy;
        d.lm = None;
    }
    if let Some(v) = flags.lm_weight {
        d.lm_weight = v;
    }
    if let Some(v) = flags.word_bonus {
        d.word_bonus = v;
    }
    let beam = cfg.beam()?;
    let model = Model32::load(&flags.checkpoint)?;
    let alphabet = resolve_alphabet(flags.alphabet.as_deref(), &flags.manifest, &cfg.data.corpus.alphabet)?;
    let lm = match (&cfg.decode.method, &cfg.decode.lm) {
        (DecodeMethod::Beam, Some(path)) => Some(NGramLM::load(path)?),
        _ => None,
    };
    let utterances = load_utterances(&flags.manifest)?;
    let method = cfg.decode.method;
    let hypotheses = utterances
        .par_iter()
        .map(|u| -> anyhow::Result<String> {
            let (logits, _) = model
                .forward(&u.features, Mode::Eval)
                .with_context(|| format!("utterance {}", u.id))?;
            let grid = PosteriorGrid::from_logits(&logits.cast::<f64>())?;
            Ok(match method {
                DecodeMethod::Greedy => greedy_transcript(&grid, &alphabet)?,
                DecodeMethod::Beam => beam_search(&grid, &alphabet, &beam, lm.as_ref())?.transcript,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut description = format!(
        "manifest={} checkpoint={}",
        flags.manifest.display(),
        flags.checkpoint.display()
    );
    match method {
        DecodeMethod::Greedy => description.push_str(" decoder=greedy"),
        DecodeMethod::Beam => {
            let _ = write!(description, " decoder=beam beam={}", beam.width);
            match &cfg.decode.lm {
                Some(p) => {
                    let _ = write!(
                        description,
                        " lm={} lm_weight={} word_bonus={}",
                        p.display(),
                        beam.lm_weight,
                        beam.word_bonus
                    );
                }
                None => description.push_str(" lm=none"),
            }
        }
    }
    Ok(Decoding {
        utterances,
        hypotheses,
        description,
    })
}

pub fn decode(common: &Common, flags: &DecodeFlags) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let result = run_decoding(&mut cfg, flags)?;
    prepare_out(&common.out)?;
    cfg.echo(&common.out)?;
    let mut out = String::new();
    for (u, h) in result.utterances.iter().zip(&result.hypotheses) {
        out.push_str(&serde_json::json!({ "id": u.id, "hypothesis": h }).to_string());
        out.push('\n');
    }
    write_text(&common.out.join("hypotheses.jsonl"), &out)?;
    println!(
        "decoded {} utterances ({})",
        result.hypotheses.len(),
        result.description
    );
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn eval_wer(common: &Common, flags: &DecodeFlags, reference_field: &str) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let result = run_decoding(&mut cfg, flags)?;
    let references: Vec<String> = result
        .utterances
        .iter()
        .map(|u| {
            match reference_field {
                "transcript_gt" => u.transcript_gt.clone(),
                "transcript_asr" => u.transcript_asr.clone(),
                "transcript_asr2" => u.transcript_asr2.clone(),
                other => return Err(invalid(format!("unknown reference field {other:?}"))),
            }
            .ok_or_else(|| anyhow::anyhow!("utterance {} has no {reference_field}", u.id))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut csv = format!("# xmodal eval-wer {} reference={reference_field}\n", result.description);
    csv.push_str("id,ref_words,substitutions,insertions,deletions,wer,reference,hypothesis\n");
    for ((u, r), h) in result.utterances.iter().zip(&references).zip(&result.hypotheses) {
        let b = wer_str(r, h).unwrap_or(WerBreakdown {
            insertions: h.split_whitespace().count(),
            ..Default::default()
        });
        let per = if b.ref_words == 0 {
            String::new()
        } else {
            format!("{:.6}", b.wer)
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{per},{},{}",
            csv_field(&u.id),
            b.ref_words,
            b.substitutions,
            b.insertions,
            b.deletions,
            csv_field(r),
            csv_field(h)
        );
    }
    let total = corpus_wer(
        references
            .iter()
            .map(String::as_str)
            .zip(result.hypotheses.iter().map(String::as_str)),
    );
    let summary = format!(
        "WER {:.2}% ({} substitutions, {} insertions, {} deletions over {} words, {} utterances)\n",
        100.0 * total.wer,
        total.substitutions,
        total.insertions,
        total.deletions,
        total.ref_words,
        references.len()
    );

    prepare_out(&common.out)?;
    cfg.echo(&common.out)?;
    write_text(&common.out.join(WER_FILE), &csv)?;
    write_text(
        &common.out.join("wer_summary.txt"),
        &format!("# {}\n{summary}", result.description),
    )?;
    print!("{summary}");
    Ok(())
}

pub fn check(out: &Path, seed: u64, quick: bool) -> anyhow::Result<()> {
    prepare_out(out)?;
    let results = suite::run_suite(seed, quick)?;
    for r in &results {
        println!("{r}");
    }
    write_text(&out.join("check.json"), &serde_json::to_string_pretty(&results)?)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        anyhow::bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}
