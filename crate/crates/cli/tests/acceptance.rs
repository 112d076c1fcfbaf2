//! Acceptance criteria A1 to A9. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.
//!
//! A3 and A4 train small models and take several minutes on one core.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use xmodal_core::check::{self, CheckResult};
use xmodal_core::model::{ModelConfig, ModelParams};
use xmodal_core::teacher::{generate_corpus, GenConfig, Utterance};
use xmodal_core::train::{run_scenario, AdamConfig, Scenario, ScenarioConfig, Schedule};
use xmodal_core::Alphabet;

type Criterion = (&'static str, fn() -> Outcome);

const SEEDS: [u64; 3] = [0, 1, 2];

const A1_BUDGET: Duration = Duration::from_secs(5);
const A2_BUDGET: Duration = Duration::from_secs(60);
const A3_BUDGET: Duration = Duration::from_secs(15 * 60);
const A3_TARGET_WER: f64 = 0.30;
const A4_MARGIN: f64 = 0.05;
const MIN_PASSING_SEEDS: usize = 2;
const SHAPE_LENGTHS: [usize; 4] = [1, 2, 7, 40];
const INPUT_DIM: usize = 16;

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(id: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        let detail = detail.into();
        println!("{id} {} {detail}", if passed { "PASS" } else { "FAIL" });
        Outcome { id, passed, detail }
    }
}

fn worst_of(results: &[CheckResult]) -> String {
    results
        .iter()
        .map(|r| format!("{}={:.2e}/{:.0e}", r.name, r.worst, r.tolerance))
        .collect::<Vec<_>>()
        .join(" ")
}

fn a1() -> Outcome {
    let r = check::ctc_oracle(200, 0).unwrap();
    Outcome::new(
        "A1",
        r.passed && r.elapsed < A1_BUDGET,
        format!(
            "ctc vs brute force n={} worst={:.2e} tol={:.0e} time={:.2}s<5s",
            r.instances,
            r.worst,
            r.tolerance,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn a2() -> Outcome {
    let start = Instant::now();
    let mut results = check::loss_gradients(&SEEDS).unwrap();
    let symbols = Alphabet::english().num_symbols();
    results.push(check::model_gradients("desk", &ModelConfig::desk(INPUT_DIM, symbols), &SEEDS).unwrap());
    let elapsed = start.elapsed();
    Outcome::new(
        "A2",
        results.iter().all(|r| r.passed) && elapsed < A2_BUDGET,
        format!("{} time={:.1}s<60s", worst_of(&results), elapsed.as_secs_f64()),
    )
}

/// Sparse-label corpus with about 40 student frames per utterance.
fn training_corpus(seed: u64, spike_jitter: usize, teacher_noise: f64) -> (GenConfig, Vec<Utterance>) {
    let gen = GenConfig {
        num_utterances: 600,
        transcript_length: (4, 6),
        frames_per_grapheme: (6, 9),
        feature_noise_sigma: 0.5,
        teacher_peakiness: 0.9,
        spike_jitter,
        teacher_noise,
        seed,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&gen).unwrap();
    (gen, corpus)
}

fn a3() -> Outcome {
    let start = Instant::now();
    let mut passing = 0;
    let mut runs = Vec::new();
    for seed in SEEDS {
        let (gen, corpus) = training_corpus(seed, 1, 0.0);
        let (train, dev) = corpus.split_at(500);
        let init =
            ModelParams::<f32>::init(&ModelConfig::compact(gen.feature_dim, gen.alphabet.num_symbols()), seed).unwrap();
        let mut reached = Vec::new();
        for scenario in [Scenario::NoSupervision, Scenario::FullSupervision] {
            let cfg = ScenarioConfig {
                scenario,
                epochs: 40,
                batch_size: 16,
                eval_every: 10,
                seed,
                optim: AdamConfig {
                    lr: 1e-3,
                    schedule: Schedule::WarmupPoly {
                        warmup: 200,
                        total: 0,
                        power: 2.0,
                        floor: 0.01,
                    },
                    ..AdamConfig::default()
                },
                max_steps: Some(1500),
                stop_at_wer: Some(A3_TARGET_WER),
                ..ScenarioConfig::default()
            };
            let out = run_scenario(&cfg, &gen.alphabet, init.clone(), train, dev).unwrap();
            let budget = out.steps.len();
            reached.push((out.curve.steps_to_reach(A3_TARGET_WER), budget));
        }
        let (kd, (ctc, budget)) = (reached[0].0, reached[1]);
        // a CTC run that never gets there counts as needing the whole budget
        let ok = match (kd, ctc) {
            (Some(k), Some(c)) => 2 * k <= c,
            (Some(k), None) => 2 * k <= budget,
            _ => false,
        };
        passing += ok as usize;
        let show = |s: Option<usize>| s.map_or("never".to_string(), |s| s.to_string());
        runs.push(format!("seed{seed}:kd={}/ctc={}", show(kd), show(ctc)));
    }
    let elapsed = start.elapsed();
    Outcome::new(
        "A3",
        passing >= MIN_PASSING_SEEDS && elapsed <= A3_BUDGET,
        format!(
            "steps to dev WER<=0.30, need kd<=ctc/2 on >=2/3: {} passing={passing}/3 time={:.0}s<=900s",
            runs.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn a4() -> Outcome {
    let mut passing = 0;
    let mut runs = Vec::new();
    for seed in SEEDS {
        let (gen, corpus) = training_corpus(seed, 0, 0.7);
        let (train, dev) = corpus.split_at(500);
        let init =
            ModelParams::<f32>::init(&ModelConfig::compact(gen.feature_dim, gen.alphabet.num_symbols()), seed).unwrap();
        let mut finals = Vec::new();
        for scenario in [Scenario::NoSupervision, Scenario::FullSupervision] {
            let cfg = ScenarioConfig {
                scenario,
                epochs: 47,
                max_steps: Some(1500),
                seed,
                ..ScenarioConfig::default()
            };
            let out = run_scenario(&cfg, &gen.alphabet, init.clone(), train, dev).unwrap();
            finals.push(out.curve.final_wer().unwrap());
        }
        let teacher = xmodal_core::eval::corpus_wer(train.iter().map(|u| {
            (
                u.transcript_gt.as_deref().unwrap(),
                u.transcript_asr.as_deref().unwrap(),
            )
        }));
        let ok = finals[0] <= finals[1] + A4_MARGIN;
        passing += ok as usize;
        runs.push(format!(
            "seed{seed}:teacher={:.3}/nosup={:.3}/full={:.3}",
            teacher.wer, finals[0], finals[1]
        ));
    }
    Outcome::new(
        "A4",
        passing >= MIN_PASSING_SEEDS,
        format!(
            "final dev WER, need nosup<=full+0.05 on >=2/3: {} passing={passing}/3",
            runs.join(" ")
        ),
    )
}

fn a5() -> Outcome {
    let r = check::decoder_oracle(100, 0).unwrap();
    let inversions = check::beam_width_inversions(100, 0).unwrap();
    Outcome::new(
        "A5",
        r.passed,
        format!(
            "beam W=1e4 vs exhaustive n={} worst={:.2e} tol={:.0e}; score<=optimum at W=1..1024; width inversions={inversions}/100 (reported)",
            r.instances, r.worst, r.tolerance
        ),
    )
}

fn a6() -> Outcome {
    let r = check::wer_oracle(200, 0).unwrap();
    Outcome::new(
        "A6",
        r.passed,
        format!(
            "wer vs brute-force edit cost n={} mismatches={} (exact)",
            r.instances, r.worst
        ),
    )
}

fn a7() -> Outcome {
    let r = check::filter_boundaries().unwrap();
    Outcome::new(
        "A7",
        r.passed,
        format!(
            "0.90 kept, 0.8999 rejected, 0.2799 kept, 0.28 rejected: cases={} violations={}",
            r.instances, r.worst
        ),
    )
}

fn a8() -> Outcome {
    let symbols = Alphabet::english().num_symbols();
    let results = [
        check::shape_contract("desk", &ModelConfig::desk(INPUT_DIM, symbols), &SHAPE_LENGTHS).unwrap(),
        check::shape_contract("paper", &ModelConfig::paper(INPUT_DIM, symbols), &SHAPE_LENGTHS).unwrap(),
    ];
    Outcome::new(
        "A8",
        results.iter().all(|r| r.passed),
        format!(
            "output frames = 2 x input for T in {SHAPE_LENGTHS:?}: desk violations={} paper violations={}",
            results[0].worst, results[1].worst
        ),
    )
}

const A9_CONFIG: &str = r#"
[data]
dev_utterances = 8

[data.corpus]
num_utterances = 40
seed = 5

[model]
preset = "tiny"

[optim]
epochs = 2
batch_size = 8
eval_every = 2
"#;

fn xmodal(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_xmodal")).args(args).status().unwrap();
    assert!(status.success(), "xmodal {args:?} exited with {status}");
}

fn a9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.toml");
    std::fs::write(&config, A9_CONFIG).unwrap();
    let config = config.to_str().unwrap();
    let data = root.join("data");
    xmodal(&["gen-data", "--config", config, "--out", data.to_str().unwrap()]);
    let manifest = data.join("train.jsonl");
    let train = |out: &Path| {
        xmodal(&[
            "--deterministic",
            "train",
            "--config",
            config,
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    };
    let (first, second) = (root.join("run1"), root.join("run2"));
    train(&first);
    train(&second);
    let same = |name: &str| std::fs::read(first.join(name)).unwrap() == std::fs::read(second.join(name)).unwrap();
    let (curve, checkpoint) = (same("curve.csv"), same("model.jlip"));
    Outcome::new(
        "A9",
        curve && checkpoint,
        format!("two --deterministic train runs: curve.csv identical={curve} model.jlip identical={checkpoint}"),
    )
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 9] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
    ];
    let outcomes: Vec<Outcome> = criteria
        .iter()
        .filter(|(id, _)| filter.as_deref().is_none_or(|f| id.contains(f)))
        .map(|(_, run)| run())
        .collect();
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        for o in outcomes.iter().filter(|o| !o.passed) {
            eprintln!("{} failed: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
