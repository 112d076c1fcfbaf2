use super::*;
use crate::alphabet::Alphabet;
use crate::distill::LossWeights;
use crate::error::Error;
use crate::model::{ModelConfig, ModelParams};
use crate::teacher::{generate_corpus, GenConfig, Utterance};

fn corpus(n: usize, seed: u64) -> (GenConfig, Vec<Utterance>) {
    let gen = GenConfig {
        num_utterances: n,
        transcript_length: (3, 5),
        frames_per_grapheme: (2, 3),
        feature_dim: 6,
        vocab_size: 20,
        word_length: (1, 3),
        seed,
        ..GenConfig::default()
    };
    let c = generate_corpus(&gen).unwrap();
    (gen, c)
}

fn quick(scenario: Scenario) -> ScenarioConfig {
    ScenarioConfig {
        scenario,
        epochs: 2,
        batch_size: 4,
        eval_every: 3,
        optim: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        ..ScenarioConfig::default()
    }
}

fn init(gen: &GenConfig) -> ModelParams<f32> {
    ModelParams::init(&ModelConfig::tiny(gen.feature_dim, gen.alphabet.num_symbols()), 1).unwrap()
}

#[test]
fn empty_training_set_is_an_error() {
    let (gen, _) = corpus(1, 0);
    let mut p = init(&gen);
    let mut s = OptimState::new(p.num_params());
    let opts = EpochOptions {
        batch_size: 2,
        weights: LossWeights::default(),
        optim: AdamConfig::default(),
        clip_norm: Some(DEFAULT_CLIP_NORM),
        seed: 0,
    };
    let r = train_epoch(&mut p, &mut s, &[], &opts, 1, 0, |_, _| Ok(false));
    assert!(matches!(r, Err(Error::Data { .. })));
}

#[test]
fn missing_fields_are_reported_by_id() {
    let (gen, mut c) = corpus(6, 1);
    c[2].transcript_asr = None;
    c[4].teacher_posteriors = None;
    let err = prepare_examples(&c, &gen.alphabet, TargetSource::Teacher, true).unwrap_err();
    match err {
        Error::Data { ids, .. } => assert_eq!(ids, vec![c[2].id.clone(), c[4].id.clone()]),
        other => panic!("{other}"),
    }
    let err = run_scenario(&quick(Scenario::NoSupervision), &gen.alphabet, init(&gen), &c, &c[..2]).unwrap_err();
    assert!(matches!(err, Error::Data { .. }));
    c[0].transcript_gt = Some("ab#".into());
    let err = prepare_examples(&c, &gen.alphabet, TargetSource::GroundTruth, false).unwrap_err();
    assert!(err.to_string().contains(&c[0].id));
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let (gen, c) = corpus(16, 2);
    let (train, dev) = c.split_at(12);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_scenario(&quick(Scenario::NoSupervision), &gen.alphabet, init(&gen), train, dev).unwrap())
    };
    let a = run(1);
    let b = run(1);
    let c2 = run(2);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params, b.params);
    assert_eq!(a.steps, c2.steps);
    assert_eq!(a.curve.to_csv(), c2.curve.to_csv());
    assert_eq!(a.params.to_bytes(), c2.params.to_bytes());
}

#[test]
fn curve_steps_increase_and_csv_has_fixed_columns() {
    let (gen, c) = corpus(16, 3);
    let (train, dev) = c.split_at(12);
    let cfg = ScenarioConfig {
        eval_every: 4,
        ..quick(Scenario::NoSupervision)
    };
    let out = run_scenario(&cfg, &gen.alphabet, init(&gen), train, dev).unwrap();
    let steps: Vec<usize> = out.curve.points.iter().map(|p| p.step).collect();
    // Three batches per epoch; epoch ends are always evaluated.
    assert_eq!(steps, vec![0, 3, 4, 6]);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    let csv = out.curve.to_csv();
    assert!(csv.starts_with("step,epoch,ctc_loss,kd_loss,dev_greedy_wer\n"));
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(out.steps.len(), 6);
    assert!(out.steps_csv().lines().nth(1).unwrap().starts_with("1,1,"));
}

#[test]
fn zero_epochs_leave_only_the_initial_point() {
    let (gen, c) = corpus(8, 4);
    let cfg = ScenarioConfig {
        epochs: 0,
        ..quick(Scenario::NoSupervision)
    };
    let out = run_scenario(&cfg, &gen.alphabet, init(&gen), &c, &c).unwrap();
    assert_eq!(out.curve.points.len(), 1);
    assert_eq!(out.curve.points[0].step, 0);
    assert_eq!(out.params, init(&gen));
}

#[test]
fn pretrain_without_finetune_equals_no_supervision() {
    let (gen, c) = corpus(12, 5);
    let (train, dev) = c.split_at(8);
    let a = run_scenario(&quick(Scenario::NoSupervision), &gen.alphabet, init(&gen), train, dev).unwrap();
    let cfg = ScenarioConfig {
        finetune_epochs: 0,
        ..quick(Scenario::PretrainFinetune)
    };
    let b = run_scenario(&cfg, &gen.alphabet, init(&gen), train, dev).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params, b.params);

    let cfg = ScenarioConfig {
        finetune_epochs: 1,
        ..quick(Scenario::PretrainFinetune)
    };
    let c = run_scenario(&cfg, &gen.alphabet, init(&gen), train, dev).unwrap();
    // 10% of 8 utterances rounds up to one batch of fine-tuning.
    assert_eq!(c.steps.len(), a.steps.len() + 1);
    let last = c.steps.last().unwrap();
    assert_eq!(last.epoch, 3);
    assert_eq!(last.kd_grad_norm, 0.0);
}

#[test]
fn zero_kd_weight_is_ctc_only_and_zero_ctc_weight_is_kd_only() {
    let (gen, c) = corpus(12, 6);
    let (train, dev) = c.split_at(8);
    let ctc_only = ScenarioConfig {
        weights: LossWeights::new(1.0, 0.0).unwrap(),
        ..quick(Scenario::NoSupervision)
    };
    let out = run_scenario(&ctc_only, &gen.alphabet, init(&gen), train, dev).unwrap();
    for r in &out.steps {
        assert_eq!(r.kd_grad_norm, 0.0);
        assert!(r.ctc_grad_norm > 0.0);
        assert!(r.kd_loss.is_some());
    }
    let kd_only = ScenarioConfig {
        weights: LossWeights::new(0.0, 1.0).unwrap(),
        ..quick(Scenario::NoSupervision)
    };
    let out = run_scenario(&kd_only, &gen.alphabet, init(&gen), train, dev).unwrap();
    for r in &out.steps {
        assert_eq!(r.ctc_grad_norm, 0.0);
        assert!(r.kd_grad_norm > 0.0);
        assert!(r.ctc_loss.is_some());
    }
    let full = run_scenario(&quick(Scenario::FullSupervision), &gen.alphabet, init(&gen), train, dev).unwrap();
    assert!(full.steps.iter().all(|r| r.kd_grad_norm == 0.0));
}

#[test]
fn infeasible_targets_fall_back_to_kd() {
    let (gen, mut c) = corpus(4, 7);
    // Two student frames give four output frames, too few for five letters
    // with a repeat.
    c[0].features = crate::matrix::Matrix::from_fn(2, gen.feature_dim, |r, k| (r + k) as f32 * 0.1);
    let grid = crate::grid::PosteriorGrid::from_probs(&crate::matrix::Matrix::filled(4, 29, 1.0)).unwrap();
    c[0].teacher_posteriors = Some(grid);
    c[0].transcript_asr = Some("aabba".into());
    let examples = prepare_examples(&c, &gen.alphabet, TargetSource::Teacher, true).unwrap();
    let mut p = init(&gen);
    let mut s = OptimState::new(p.num_params());
    let opts = EpochOptions {
        batch_size: 4,
        weights: LossWeights::default(),
        optim: AdamConfig::default(),
        clip_norm: Some(DEFAULT_CLIP_NORM),
        seed: 0,
    };
    let mut seen = Vec::new();
    let (m, _) = train_epoch(&mut p, &mut s, &examples, &opts, 1, 0, |_, r| {
        seen.push(r.clone());
        Ok(false)
    })
    .unwrap();
    assert_eq!(m.infeasible, 1);
    assert_eq!(seen[0].infeasible, 1);

    let ctc_only = EpochOptions {
        weights: LossWeights::ctc_only(),
        ..opts
    };
    let (m, _) = train_epoch(&mut p, &mut s, &examples, &ctc_only, 2, 1, |_, _| Ok(false)).unwrap();
    assert_eq!(m.infeasible, 1);
}

#[test]
fn first_epoch_loss_falls_on_the_desk_preset() {
    let (gen, c) = corpus(48, 8);
    let (train, dev) = c.split_at(40);
    let model = ModelParams::<f32>::init(&ModelConfig::desk(gen.feature_dim, 29), 3).unwrap();
    for scenario in [
        Scenario::FullSupervision,
        Scenario::NoSupervision,
        Scenario::PretrainFinetune,
    ] {
        let cfg = ScenarioConfig {
            scenario,
            epochs: 1,
            finetune_epochs: 0,
            batch_size: 4,
            eval_every: 0,
            optim: AdamConfig {
                lr: 1e-3,
                schedule: Schedule::Constant,
                ..AdamConfig::default()
            },
            ..ScenarioConfig::default()
        };
        let weights = if scenario == Scenario::FullSupervision {
            LossWeights::ctc_only()
        } else {
            cfg.weights
        };
        let out = run_scenario(&cfg, &gen.alphabet, model.clone(), train, dev).unwrap();
        let p0 = &out.curve.points[0];
        let initial = weights.lambda_ctc * p0.ctc_loss.unwrap() + weights.lambda_kd * p0.kd_loss.unwrap();
        let mut tail: Vec<f64> = out.steps[out.steps.len() * 3 / 4..].iter().map(|r| r.total).collect();
        tail.sort_by(f64::total_cmp);
        let median = tail[tail.len() / 2];
        assert!(median < initial, "{scenario}: median {median} vs initial {initial}");
    }
}

#[test]
fn scenario_names_round_trip() {
    for s in [
        Scenario::FullSupervision,
        Scenario::NoSupervision,
        Scenario::PretrainFinetune,
    ] {
        assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
    }
    assert!("semi".parse::<Scenario>().is_err());
    let _ = Alphabet::english();
}
