use viewbridge::config::TrainConfig;
use viewbridge::domain::ClipDims;
use viewbridge::encoder::{FreezeMask, Layer};
use viewbridge::gradcheck::tiny_config;
use viewbridge::pipeline::Benchmark;
use viewbridge::synth::GeneratorSpec;
use viewbridge::trainer::{init_params, run_baseline, train_phase1, train_phase2, BaselineKind, TrainingData};

fn tiny_spec(seed: u64) -> GeneratorSpec {
    let mut spec = GeneratorSpec::benchmark(seed);
    spec.num_classes = 4;
    spec.n_clips_per_class = 10;
    spec.dims = ClipDims { frames: 2, height: 8, width: 8, channels: 3 };
    spec
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs_phase1: 2,
        epochs_phase2: 2,
        batch_phase1: 4,
        batch_phase2: 8,
        pairs_per_target: 2,
        queue_capacity: 8,
        pseudo_conf_threshold: 0.0,
        alpha: 1.0,
        lambda1: 1.0,
        seed: 3,
        ..tiny_config()
    }
}

fn tiny_data() -> TrainingData {
    Benchmark::generate(&tiny_spec(5), 5).unwrap().training_data().unwrap()
}

#[test]
fn frozen_tensors_are_bit_identical_after_phase2() {
    let cfg = TrainConfig { freeze_fraction: 0.5, ..tiny_cfg() };
    let data = tiny_data();
    let start = init_params(&cfg).unwrap();
    let out = train_phase2(&data, &cfg, start.clone()).unwrap();
    let mask = FreezeMask::from_fraction(start.dims.n_blocks, cfg.freeze_fraction).unwrap();
    let mut changed = 0;
    for ((info, before), (_, after)) in start.tensors().into_iter().zip(out.params.tensors()) {
        if mask.is_frozen(info.layer) {
            let same = before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{} moved", info.name);
        } else if before != after {
            changed += 1;
        }
    }
    assert!(mask.is_frozen(Layer::Embedding) && mask.is_frozen(Layer::Block(0)));
    assert!(!mask.is_frozen(Layer::Block(1)) && !mask.is_frozen(Layer::FinalNorm));
    assert!(changed > 0);
}

#[test]
fn target_labels_never_reach_training() {
    let bench = Benchmark::generate(&tiny_spec(5), 5).unwrap();
    let data = bench.training_data().unwrap();
    assert!(!data.target.is_empty());
    assert!(data.target.iter().all(|&i| data.clips[i].class_id.is_none()));

    // Scrambling every target label in the input changes nothing downstream.
    let mut scrambled = bench.home.clips.clone();
    for c in scrambled.iter_mut().filter(|c| c.modality.is_target()) {
        c.class_id = c.class_id.map(|y| (y + 1) % 4);
    }
    let mut manifest = bench.home.manifest.clone();
    for r in manifest.records.iter_mut().filter(|r| r.modality.is_target()) {
        r.class_id = r.class_id.map(|y| (y + 1) % 4);
    }
    let other = TrainingData::prepare(&scrambled, &manifest, &bench.groups, &bench.split).unwrap();
    let cfg = tiny_cfg();
    let start = init_params(&cfg).unwrap();
    let a = train_phase2(&data, &cfg, start.clone()).unwrap();
    let b = train_phase2(&other, &cfg, start).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn zero_contrastive_weight_ignores_temperature() {
    let data = tiny_data();
    let a_cfg = TrainConfig { lambda1: 0.0, tau: 0.1, ..tiny_cfg() };
    let b_cfg = TrainConfig { lambda1: 0.0, tau: 0.7, ..tiny_cfg() };
    let a = train_phase1(&data, &a_cfg, init_params(&a_cfg).unwrap()).unwrap();
    let b = train_phase1(&data, &b_cfg, init_params(&b_cfg).unwrap()).unwrap();
    assert_eq!(a.params, b.params);
    let c_cfg = TrainConfig { lambda1: 1.0, ..a_cfg };
    let c = train_phase1(&data, &c_cfg, init_params(&c_cfg).unwrap()).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_alignment_weight_matches_rejecting_every_target() {
    let data = tiny_data();
    let base = tiny_cfg();
    let start = init_params(&base).unwrap();
    let no_alpha = TrainConfig { alpha: 0.0, ..base.clone() };
    let no_targets = TrainConfig { pseudo_conf_threshold: 1.0 + 1e-9, ..base.clone() };
    let a = train_phase2(&data, &no_alpha, start.clone()).unwrap();
    let b = train_phase2(&data, &no_targets, start.clone()).unwrap();
    assert_eq!(a.params, b.params);
    let c = train_phase2(&data, &base, start).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn baselines_are_deterministic() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let a = run_baseline(&data, &cfg, BaselineKind::FullMethod).unwrap();
    let b = run_baseline(&data, &cfg, BaselineKind::FullMethod).unwrap();
    assert_eq!(a.final_params(), b.final_params());
    assert_eq!(a.metrics(), b.metrics());
    let other = run_baseline(&data, &TrainConfig { seed: 4, ..cfg }, BaselineKind::FullMethod).unwrap();
    assert_ne!(a.final_params(), other.final_params());
}

#[test]
fn finetune_only_has_no_phase2() {
    let data = tiny_data();
    let run = run_baseline(&data, &tiny_cfg(), BaselineKind::FinetuneOnly).unwrap();
    assert!(run.phase2.is_none());
    assert!(run.metrics().iter().all(|m| m.phase == 1));
}
