mod common;

use aura::ambiguity::{rationale_entropy, BeliefPair};
use aura::data::{generate_synthetic, AmbiguityLabel, BeliefRole, Split, SynthConfig, System};
use aura::pipeline::{self, reasoner_beliefs, run, Combiner, Mode, PipelineConfig};
use aura::reasoner::{train, ReasonerRole, TrainConfig};
use aura::scoring::Backend;
use common::{pretrained_prior, synth};
use std::collections::BTreeSet;

fn zero_prior() -> Backend {
    pipeline::resolve_prior(&PipelineConfig::new(Mode::Aura, 0), None, &TrainConfig::default()).unwrap()
}

#[test]
fn clean_data_is_learned_in_every_mode() {
    for seed in [1, 2, 3] {
        let train = synth(1000, 4, 0.0, seed, Split::Train);
        let test = synth(300, 4, 0.0, seed, Split::Test);
        let prior = pretrained_prior(4, seed);
        for mode in [Mode::Aura, Mode::Standard] {
            let out = run(&train, &test, &PipelineConfig::new(mode, seed), &prior).unwrap();
            assert!(out.accuracy() > 0.9, "{mode} seed {seed}: {}", out.accuracy());
        }
    }
}

#[test]
fn without_rationales_or_cues_accuracy_is_chance() {
    let gen = |split, n| {
        generate_synthetic(&SynthConfig::new(n, 4, 0.0, 7).cue_rate(0.0).split(split))
            .unwrap()
            .dataset
    };
    let train = gen(Split::Train, 1000);
    let test = gen(Split::Test, 1000);
    let out = run(&train, &test, &PipelineConfig::new(Mode::NoRationales, 7), &zero_prior()).unwrap();
    assert!((out.accuracy() - 0.25).abs() < 0.1, "{}", out.accuracy());
}

#[test]
fn zero_epochs_from_zero_prior_predicts_first_choice() {
    let train = synth(200, 4, 0.3, 2, Split::Train);
    let test = synth(400, 4, 0.3, 2, Split::Test);
    for mode in [Mode::Aura, Mode::Standard, Mode::NoRationales] {
        let mut cfg = PipelineConfig::new(mode, 2);
        cfg.train_config_stage1.epochs = 0;
        if let Some(c) = cfg.train_config_stage2.as_mut() {
            c.epochs = 0;
        }
        let out = run(&train, &test, &cfg, &zero_prior()).unwrap();
        assert!(out.routing.iter().all(|r| r.predicted_index == 0));
        for r in &out.routing {
            assert!(r.final_distribution.iter().all(|p| (p - 0.25).abs() < 1e-12));
        }
        assert!((out.accuracy() - 0.25).abs() < 0.1, "{mode}: {}", out.accuracy());
        assert!(!out.warnings.is_empty());
    }
}

#[test]
fn routing_follows_the_training_threshold() {
    let train = synth(800, 4, 0.5, 3, Split::Train);
    let test = synth(300, 4, 0.5, 3, Split::Test);
    let prior = pretrained_prior(4, 3);
    let out = run(&train, &test, &PipelineConfig::new(Mode::Aura, 3), &prior).unwrap();
    let tau = out.partition.as_ref().unwrap().tau;
    let r2 = out.reasoner2.as_ref().unwrap();
    let (mut n1, mut n2) = (0, 0);
    for (d, inst) in out.routing.iter().zip(&test.instances) {
        let h = d.entropy.unwrap();
        let p = prior.score_instance(inst, BeliefRole::Prior).unwrap();
        let q1 = reasoner_beliefs(&out.reasoner1, inst, BeliefRole::Posterior).unwrap();
        let q2 = reasoner_beliefs(r2, inst, BeliefRole::Posterior).unwrap();
        let oracle_h: f64 = q1.probs.iter().zip(&p.probs).map(|(q, p)| -q * p.ln()).sum();
        assert!((h - oracle_h).abs() < 1e-9 * oracle_h.abs().max(1.0));
        if h >= tau {
            assert_eq!(d.label, Some(AmbiguityLabel::Ambiguous));
            assert_eq!(d.system_used, System::System2);
            assert_eq!(d.final_distribution, q2.probs);
            n2 += 1;
        } else {
            assert_eq!(d.label, Some(AmbiguityLabel::Unambiguous));
            assert_eq!(d.system_used, System::System1);
            assert_eq!(d.final_distribution, q1.probs);
            n1 += 1;
        }
    }
    assert!(n1 > 0 && n2 > 0, "{n1} / {n2}");
}

#[test]
fn stage_two_trains_on_exactly_the_ambiguous_set() {
    let train_ds = synth(600, 4, 0.5, 4, Split::Train);
    let test = synth(100, 4, 0.5, 4, Split::Test);
    let prior = pretrained_prior(4, 4);
    let cfg = PipelineConfig::new(Mode::Aura, 4);
    let out = run(&train_ds, &test, &cfg, &prior).unwrap();

    // Recompute the partition by hand.
    let hs: Vec<f64> = train_ds
        .instances
        .iter()
        .map(|inst| {
            let p = prior.score_instance(inst, BeliefRole::Prior).unwrap();
            let q = reasoner_beliefs(&out.reasoner1, inst, BeliefRole::Posterior).unwrap();
            rationale_entropy(&BeliefPair::new(p, q).unwrap())
        })
        .collect();
    let tau = hs.iter().sum::<f64>() / hs.len() as f64;
    let expected: BTreeSet<&str> = train_ds
        .instances
        .iter()
        .zip(&hs)
        .filter(|(_, h)| **h >= tau)
        .map(|(i, _)| i.id.as_str())
        .collect();
    let partition = out.partition.as_ref().unwrap();
    assert!((partition.tau - tau).abs() < 1e-12);
    let got: BTreeSet<&str> = partition.ambiguous_ids().collect();
    assert_eq!(got, expected);
    assert!(!got.is_empty() && got.len() < train_ds.len());

    let subset = train_ds.filter_ids(|id| expected.contains(id));
    let r2 = train(&out.init_state, &subset.instances, &cfg.stage_config(2), ReasonerRole::PosteriorStage2).unwrap();
    assert_eq!(out.reasoner2.as_ref().unwrap().weights, r2.weights);
}

#[test]
fn both_stages_start_from_the_prior() {
    let train = synth(300, 4, 0.5, 5, Split::Train);
    let test = synth(50, 4, 0.5, 5, Split::Test);
    let prior = pretrained_prior(4, 5);
    let Backend::Builtin(prior_state) = &prior else { unreachable!() };
    let mut cfg = PipelineConfig::new(Mode::Aura, 5);
    cfg.train_config_stage2.as_mut().unwrap().epochs = 0;
    let out = run(&train, &test, &cfg, &prior).unwrap();
    assert_eq!(out.init_state.weights, prior_state.weights);
    assert_eq!(out.reasoner2.as_ref().unwrap().weights, prior_state.weights);
    assert_ne!(out.reasoner1.weights, prior_state.weights);
    assert_eq!(out.reasoner1.role, ReasonerRole::PosteriorStage1);
    assert_eq!(out.reasoner2.as_ref().unwrap().role, ReasonerRole::PosteriorStage2);
}

#[test]
fn runs_are_deterministic() {
    let train = synth(400, 4, 0.5, 6, Split::Train);
    let test = synth(100, 4, 0.5, 6, Split::Test);
    let prior = pretrained_prior(4, 6);
    for mode in [Mode::Aura, Mode::Standard, Mode::NoRationales] {
        let cfg = PipelineConfig::new(mode, 6);
        let a = run(&train, &test, &cfg, &prior).unwrap();
        let b = run(&train, &test, &cfg, &prior).unwrap();
        assert_eq!(a, b);
    }
    let a = run(&train, &test, &PipelineConfig::new(Mode::Aura, 6), &prior).unwrap();
    let c = run(&train, &test, &PipelineConfig::new(Mode::Aura, 8), &prior).unwrap();
    assert_ne!(a.reasoner1.weights, c.reasoner1.weights);
}

#[test]
fn mean_combiner_averages_both_systems() {
    let train = synth(400, 4, 0.5, 9, Split::Train);
    let test = synth(100, 4, 0.5, 9, Split::Test);
    let prior = pretrained_prior(4, 9);
    let mut cfg = PipelineConfig::new(Mode::Aura, 9);
    cfg.combiner = Combiner::Mean;
    let out = run(&train, &test, &cfg, &prior).unwrap();
    let r2 = out.reasoner2.as_ref().unwrap();
    for (d, inst) in out.routing.iter().zip(&test.instances) {
        assert_eq!(d.system_used, System::Combined);
        let q1 = reasoner_beliefs(&out.reasoner1, inst, BeliefRole::Posterior).unwrap();
        let q2 = reasoner_beliefs(r2, inst, BeliefRole::Posterior).unwrap();
        for ((f, a), b) in d.final_distribution.iter().zip(&q1.probs).zip(&q2.probs) {
            assert!((f - (a + b) / 2.0).abs() < 1e-9);
        }
    }
}

#[test]
fn persisted_runs_reload() {
    let train = synth(300, 4, 0.5, 10, Split::Train);
    let test = synth(80, 4, 0.5, 10, Split::Test);
    let prior = pretrained_prior(4, 10);
    let out = run(&train, &test, &PipelineConfig::new(Mode::Aura, 10), &prior).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = out.persist(dir.path()).unwrap();
    let loaded = aura::data::load_artifacts(dir.path()).unwrap();
    assert_eq!(written, loaded);
    assert_eq!(loaded.routing, out.routing);
    assert_eq!(loaded.report.accuracy, out.accuracy());
    let r2 = aura::reasoner::ReasonerState::load(
        &dir.path().join(loaded.reasoner2_state_path.unwrap()),
    )
    .unwrap();
    assert_eq!(&r2, out.reasoner2.as_ref().unwrap());
}

#[test]
fn mode_and_stage_config_must_agree() {
    let train = synth(50, 4, 0.5, 1, Split::Train);
    let mut cfg = PipelineConfig::new(Mode::Standard, 1);
    cfg.mode = Mode::Aura;
    assert!(matches!(
        run(&train, &train, &cfg, &zero_prior()),
        Err(pipeline::PipelineError::InvalidConfig(_))
    ));
}
