use std::path::Path;

use aikd::augment::{AugmentPolicy, ExtraAugment};
use aikd::data::{generate_synthetic, Dataset, SyntheticSpec};
use aikd::losses::{guide_loss, LogitsBatch, LossWeights};
use aikd::models::{Architecture, Checkpoint, Classifier, ClassifierSpec};
use aikd::training::{
    distill, distill_step, prepare_batch, pretrain, read_step_log, split_images, Ablation, Phase, RunOptions, RunState,
    TeacherInput, TrainConfig,
};
use aikd::Error;

const SPEC: ClassifierSpec = ClassifierSpec { architecture: Architecture::TinyCnn, num_classes: 3, input_resolution: 12 };

fn data() -> Dataset {
    generate_synthetic(&SyntheticSpec { num_classes: 3, samples_per_class: 10, val_per_class: 4, resolution: 12, ..SyntheticSpec::default() })
        .unwrap()
}

fn cfg(phase: Phase, epochs: usize) -> TrainConfig {
    TrainConfig { phase, epochs, batch_size: 10, lr_milestones: vec![], seed: 3, ..TrainConfig::default() }
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions { out_dir: dir.to_path_buf(), config_digest: "t".into(), ..RunOptions::default() }
}

fn superior(dir: &Path, data: &Dataset) -> std::path::PathBuf {
    pretrain(&cfg(Phase::Pretrain, 1), SPEC, data, &opts(&dir.join("phase1"))).unwrap().checkpoint
}

#[test]
fn steps_touch_only_the_student_and_snapshots_are_exact() {
    let data = data();
    let config = cfg(Phase::Distill, 2);
    let sup = Classifier::build(SPEC, 99).unwrap();
    let mut state = RunState::new(&config, Classifier::build(SPEC, 3).unwrap(), Some(sup)).unwrap();
    state.epoch = 1;
    let sup_hash = state.triple.superior.as_ref().unwrap().checksum();
    let prev_hash = state.triple.previous.checksum();
    let critic_hash = state.critic.as_ref().unwrap().store().checksum();
    let student_hash = state.triple.student.checksum();
    let weights = config.effective_weights();
    for i in 0..3 {
        let batch = prepare_batch(&data.train, &[0, 4, 8, 12, 16, 20], 3, &config, &data.manifest.normalization, 1, i).unwrap();
        let rec = distill_step(&mut state, &batch, &weights, &config, 0.1).unwrap();
        assert!(rec.lp > 0.0 && rec.lg > 0.0 && rec.ld != 0.0);
        assert_eq!(state.triple.superior.as_ref().unwrap().checksum(), sup_hash);
        assert_eq!(state.triple.previous.checksum(), prev_hash);
    }
    assert_ne!(state.triple.student.checksum(), student_hash);
    assert_ne!(state.critic.as_ref().unwrap().store().checksum(), critic_hash);

    state.triple.snapshot_previous();
    let x = split_images(&data.val, &data.manifest.normalization);
    let prev = LogitsBatch::from_array(state.triple.previous.predict(x.view()).unwrap()).unwrap();
    let stu = LogitsBatch::from_array(state.triple.student.predict(x.view()).unwrap()).unwrap();
    assert!(guide_loss(&prev, &stu, 1.0).unwrap().item().abs() <= 1e-10);
}

#[test]
fn weights_always_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    let sup = superior(dir.path(), &data);
    let config = cfg(Phase::Distill, 2);
    distill(&config, SPEC, &data, Some(&sup), &opts(&dir.path().join("d"))).unwrap();
    let w = LossWeights::default();
    let log = read_step_log(&dir.path().join("d/log.jsonl")).unwrap();
    assert_eq!(log.len(), 6);
    for r in &log {
        let lp_weight = if r.epoch > 0 { w.alpha_p } else { 0.0 };
        assert!((r.ce_weight + lp_weight + w.alpha_g - 1.0).abs() < 1e-12, "{r:?}");
        assert_eq!(r.lp == 0.0, r.epoch == 0);
    }
}

#[test]
fn zero_omega_matches_no_adv_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    let sup = superior(dir.path(), &data);
    let full = TrainConfig { weights: LossWeights { omega: 0.0, ..LossWeights::default() }, ..cfg(Phase::Distill, 2) };
    let no_adv = TrainConfig { ablation: Ablation::NoAdv, ..cfg(Phase::Distill, 2) };
    let a = distill(&full, SPEC, &data, Some(&sup), &opts(&dir.path().join("a"))).unwrap();
    let b = distill(&no_adv, SPEC, &data, Some(&sup), &opts(&dir.path().join("b"))).unwrap();
    assert_eq!(a.student.checksum(), b.student.checksum());
    let (la, lb) = (read_step_log(&dir.path().join("a/log.jsonl")).unwrap(), read_step_log(&dir.path().join("b/log.jsonl")).unwrap());
    assert_eq!(la, lb);
    assert!(la.iter().all(|r| r.ld == 0.0 && r.la == 0.0));
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    let mut config = cfg(Phase::Pretrain, 2);
    config.sgd.lr = 1e200;
    let out = dir.path().join("p");
    match pretrain(&config, SPEC, &data, &opts(&out)) {
        Err(Error::NonFinite { step, record }) => {
            assert!(step > 0);
            let abort = std::fs::read_to_string(out.join("abort.json")).unwrap();
            assert_eq!(abort.trim(), record);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.metrics)),
    }
}

#[test]
fn superior_is_required_and_verified() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    let config = cfg(Phase::Distill, 1);
    match distill(&config, SPEC, &data, None, &opts(&dir.path().join("x"))) {
        Err(Error::Config { key, message }) => {
            assert_eq!(key, "superior");
            assert!(message.contains("phase-1"));
        }
        other => panic!("{:?}", other.map(|o| o.metrics)),
    }
    for preset in [Ablation::OnlyProgressive, Ablation::Baseline] {
        let c = TrainConfig { ablation: preset, ..config.clone() };
        distill(&c, SPEC, &data, None, &opts(&dir.path().join(preset.name()))).unwrap();
    }

    let sup = superior(dir.path(), &data);
    let mut ckpt = Checkpoint::load(&sup).unwrap();
    ckpt.heldout.as_mut().unwrap().accuracy += 0.25;
    let tampered = dir.path().join("tampered");
    ckpt.save(&tampered).unwrap();
    assert!(matches!(distill(&config, SPEC, &data, Some(&tampered), &opts(&dir.path().join("y"))), Err(Error::SpecMismatch(_))));

    let wrong = ClassifierSpec { num_classes: 4, ..SPEC };
    assert!(matches!(distill(&config, wrong, &data, Some(&sup), &opts(&dir.path().join("z"))), Err(Error::SpecMismatch(_))));
}

#[test]
fn resume_rejects_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    let out = dir.path().join("p");
    pretrain(&cfg(Phase::Pretrain, 2), SPEC, &data, &RunOptions { stop_after: Some(1), ..opts(&out) }).unwrap();
    let resume = RunOptions { resume_from: Some(out.join("ckpt_epoch_1")), config_digest: "other".into(), ..opts(&out) };
    assert!(matches!(pretrain(&cfg(Phase::Pretrain, 2), SPEC, &data, &resume), Err(Error::SpecMismatch(_))));
}

#[test]
fn unmixed_teachers_with_mixup_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    let sup = superior(dir.path(), &data);
    for teacher_input in [TeacherInput::Mixed, TeacherInput::Unmixed] {
        let config = TrainConfig {
            teacher_input,
            augment: AugmentPolicy { extra: ExtraAugment::Mixup, ..AugmentPolicy::default() },
            ..cfg(Phase::Distill, 2)
        };
        let out = dir.path().join(format!("{teacher_input:?}"));
        distill(&config, SPEC, &data, Some(&sup), &opts(&out)).unwrap();
        assert!(read_step_log(&out.join("log.jsonl")).unwrap().iter().all(|r| r.total.is_finite()));
    }
}

#[test]
fn phases_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let data = data();
    assert!(matches!(pretrain(&cfg(Phase::Distill, 1), SPEC, &data, &opts(dir.path())), Err(Error::Config { .. })));
    let bad = TrainConfig { lr_milestones: vec![3], ..cfg(Phase::Pretrain, 2) };
    match pretrain(&bad, SPEC, &data, &opts(dir.path())) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "train.lr_milestones"),
        other => panic!("{:?}", other.map(|o| o.metrics)),
    }
}
