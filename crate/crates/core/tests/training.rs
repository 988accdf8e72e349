use std::path::Path;

use dne_core::corpus::{generate_synthetic_corpus, label_frames, mix_at_snr, synth_noise, synth_speech, CorpusConfig, Manifest, NoiseKind};
use dne_core::enhance::BackboneKind;
use dne_core::model::{joint_train_step, DneMode, Model, ModelConfig, StepConfig, Utterance};
use dne_core::trainer::{epoch_checkpoint_path, train, TrainConfig};
use dne_core::vad::auc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(dir: &Path, seed: u64) -> Manifest {
    let cfg = CorpusConfig {
        train_utterances: 12,
        test_per_cell: 1,
        noise_seconds: 6.0,
        ..CorpusConfig::default()
    };
    generate_synthetic_corpus(&cfg, seed, dir).unwrap().train
}

fn config(kind: BackboneKind, dne: DneMode, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelConfig::tiny(kind, dne));
    cfg.epochs = epochs;
    cfg.seed = 4;
    cfg
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"), 1);
    let cfg = config(BackboneKind::Unet, DneMode::Dne, 2);
    let a = train(&manifest, &cfg, &dir.path().join("a"), None).unwrap();
    let b = train(&manifest, &cfg, &dir.path().join("b"), None).unwrap();
    assert_eq!(std::fs::read(&a.best).unwrap(), std::fs::read(&b.best).unwrap());
    assert_eq!(std::fs::read(&a.last).unwrap(), std::fs::read(&b.last).unwrap());
    assert_eq!(std::fs::read(&a.log_path).unwrap(), std::fs::read(&b.log_path).unwrap());
    assert_eq!(a.records.len(), 3);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"), 2);
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    train(&manifest, &config(BackboneKind::Ddae, DneMode::Dne, 2), &full, None).unwrap();
    train(&manifest, &config(BackboneKind::Ddae, DneMode::Dne, 1), &part, None).unwrap();
    let resumed = train(
        &manifest,
        &config(BackboneKind::Ddae, DneMode::Dne, 2),
        &part,
        Some(&epoch_checkpoint_path(&part, 1)),
    )
    .unwrap();
    assert_eq!(resumed.records.len(), 3);
    assert_eq!(
        std::fs::read(epoch_checkpoint_path(&full, 2)).unwrap(),
        std::fs::read(epoch_checkpoint_path(&part, 2)).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("train_log.tsv")).unwrap(),
        std::fs::read(part.join("train_log.tsv")).unwrap()
    );
}

#[test]
fn validation_mse_falls_during_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(&dir.path().join("data"), 3);
    let mut cfg = config(BackboneKind::Ddae, DneMode::Dne, 4);
    cfg.lr_se = 3e-3;
    let out = train(&manifest, &cfg, &dir.path().join("run"), None).unwrap();
    assert!(out.final_val_mse() < out.initial_val_mse(), "{:?}", out.records);
}

fn utterance(seed: u64, snr: f64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = synth_speech(16000, &mut rng);
    let noise = synth_noise(NoiseKind::White, 16000, &mut rng);
    let m = mix_at_snr(&clean, &noise, snr, &mut rng).unwrap();
    let labels = label_frames(&m.clean).unwrap();
    Utterance::prepare(format!("u{seed}"), &m.noisy, Some(&m.clean), Some(labels)).unwrap()
}

/// Passing the selections back in changes nothing: they are constants of
/// the backward pass.
#[test]
fn frozen_selection_gives_the_same_gradients() {
    let batch: Vec<Utterance> = (0..2).map(|i| utterance(20 + i, 5.0)).collect();
    let refs: Vec<&Utterance> = batch.iter().collect();
    for kind in [BackboneKind::Ddae, BackboneKind::Blstm, BackboneKind::Unet] {
        let mut m = Model::<f64>::new(ModelConfig::tiny(kind, DneMode::Dne), 6).unwrap();
        let a = m.compute_gradients(&refs, 1.0, 8, None).unwrap();
        let ga: Vec<_> = m.vad_store.params().iter().map(|p| p.grad.clone()).collect();
        let sa: Vec<_> = m.se_store.params().iter().map(|p| p.grad.clone()).collect();
        let b = m.compute_gradients(&refs, 1.0, 8, Some(&a.selections)).unwrap();
        let gb: Vec<_> = m.vad_store.params().iter().map(|p| p.grad.clone()).collect();
        let sb: Vec<_> = m.se_store.params().iter().map(|p| p.grad.clone()).collect();
        assert_eq!(a.selections, b.selections);
        assert_eq!(ga, gb, "{kind}");
        assert_eq!(sa, sb, "{kind}");
    }
}

/// Without an embedding the detector's gradient does not depend on λ.
#[test]
fn baseline_detector_ignores_lambda() {
    let u = utterance(30, 0.0);
    let mut m = Model::<f64>::new(ModelConfig::tiny(BackboneKind::Ddae, DneMode::Off), 2).unwrap();
    m.compute_gradients(&[&u], 0.0, 1, None).unwrap();
    let g0: Vec<_> = m.vad_store.params().iter().map(|p| p.grad.clone()).collect();
    m.compute_gradients(&[&u], 5.0, 1, None).unwrap();
    let g5: Vec<_> = m.vad_store.params().iter().map(|p| p.grad.clone()).collect();
    assert_eq!(g0, g5);

    let mut m = Model::<f64>::new(ModelConfig::tiny(BackboneKind::Ddae, DneMode::Dne), 2).unwrap();
    m.compute_gradients(&[&u], 0.0, 1, None).unwrap();
    let g0: Vec<_> = m.vad_store.params().iter().map(|p| p.grad.clone()).collect();
    m.compute_gradients(&[&u], 5.0, 1, None).unwrap();
    let g5: Vec<_> = m.vad_store.params().iter().map(|p| p.grad.clone()).collect();
    assert_ne!(g0, g5);
}

#[test]
fn detector_learns_to_find_speech() {
    let train_set: Vec<Utterance> = (0..24).map(|i| utterance(100 + i, [0.0, 5.0, 10.0][i as usize % 3])).collect();
    let test_set: Vec<Utterance> = (0..6).map(|i| utterance(500 + i, [0.0, 5.0, 10.0][i as usize % 3])).collect();
    let mut m = Model::<f32>::new(ModelConfig::tiny(BackboneKind::Ddae, DneMode::Off), 1).unwrap();
    let score = |m: &Model<f32>| {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for u in &test_set {
            s.extend(m.posterior(u).unwrap().iter().map(|&p| p as f64));
            l.extend_from_slice(&u.labels.as_ref().unwrap().y);
        }
        auc(&s, &l).unwrap()
    };
    let before = score(&m);
    for epoch in 0..15u64 {
        for (i, chunk) in train_set.chunks(4).enumerate() {
            let batch: Vec<&Utterance> = chunk.iter().collect();
            let step = StepConfig {
                lambda: 0.0,
                lr_se: 1e-3,
                lr_vad: 1e-2,
                seed: epoch * 100 + i as u64,
            };
            joint_train_step(&mut m, &batch, &step).unwrap();
        }
    }
    let after = score(&m);
    assert!(after > 0.95, "AUC {before:.3} -> {after:.3}");
}
