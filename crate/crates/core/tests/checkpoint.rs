mod common;

use candle_core::Device;
use common::criteria;
use common::{flat, tiny, trainer};
use cmae::experiment::Checkpoint;
use cmae::CmaeError;

#[test]
fn replay_and_resume_are_bit_identical() {
    let o = criteria::determinism_checkpoint();
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn corrupt_file_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.safetensors");
    std::fs::write(&p, b"definitely not safetensors").unwrap();
    let err = Checkpoint::load(&p, &Device::Cpu).unwrap_err();
    assert!(matches!(err, CmaeError::Checkpoint { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ckpt.safetensors");
    trainer(tiny(&[])).checkpoint().unwrap().save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Checkpoint::load(&p, &Device::Cpu).is_err());
}

#[test]
fn larger_model_names_the_mismatched_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ckpt.safetensors");
    trainer(tiny(&[])).checkpoint().unwrap().save(&p).unwrap();
    let ckpt = Checkpoint::load(&p, &Device::Cpu).unwrap();
    let mut bigger = trainer(tiny(&[("encoder_dim", "64")]));
    match bigger.restore(&ckpt).unwrap_err() {
        CmaeError::ParamShape { name, expected, found } => {
            assert!(!name.is_empty());
            assert_ne!(expected, found);
        }
        e => panic!("expected a shape error, got {e}"),
    }
}

#[test]
fn changed_config_is_refused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ckpt.safetensors");
    trainer(tiny(&[])).checkpoint().unwrap().save(&p).unwrap();
    let ckpt = Checkpoint::load(&p, &Device::Cpu).unwrap();
    let same = tiny(&[("out_dir", "/elsewhere"), ("log_every", "7")]);
    ckpt.check_fingerprint(&same, false, &p).unwrap();
    let other = tiny(&[("tau", "0.5")]);
    let err = ckpt.check_fingerprint(&other, false, &p).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    ckpt.check_fingerprint(&other, true, &p).unwrap();
}

#[test]
fn first_steps_touch_exactly_the_expected_state() {
    let mut t = trainer(tiny(&[("crop_warmup_epochs", "never")]));
    let online0 = t.state.online.snapshot().unwrap();
    let momentum0 = t.state.momentum.snapshot().unwrap();
    // warmup starts from a zero learning rate
    let (_, lr) = t.train_step().unwrap();
    assert_eq!((t.step, lr), (1, 0.0));
    let ckpt = t.checkpoint().unwrap();
    assert_eq!(ckpt.adam.len(), online0.len());
    assert!(ckpt.adam.values().all(|m| m.steps == 1));
    for (name, v) in t.state.online.snapshot().unwrap() {
        assert_eq!(flat(&v), flat(&online0[&name]), "online `{name}` moved at lr 0");
    }
    t.train_step().unwrap();
    let online2 = t.state.online.snapshot().unwrap();
    let momentum2 = t.state.momentum.snapshot().unwrap();
    for (name, v) in &online0 {
        assert_ne!(flat(v), flat(&online2[name]), "online `{name}` unchanged");
    }
    for (name, v) in &momentum0 {
        assert_ne!(flat(v), flat(&momentum2[name]), "momentum `{name}` unchanged");
    }
    assert!(t.cache.is_empty());
}

#[test]
fn checkpoint_round_trips_every_field() {
    let mut t = trainer(tiny(&[("crop_warmup_epochs", "1")]));
    for _ in 0..6 {
        t.maybe_refresh_crops().unwrap();
        t.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ckpt.safetensors");
    let a = t.checkpoint().unwrap();
    a.save(&p).unwrap();
    let b = Checkpoint::load(&p, &Device::Cpu).unwrap();
    assert_eq!((a.step, a.epoch), (b.step, b.epoch));
    assert_eq!(a.fingerprint, b.fingerprint);
    assert_eq!(a.classes, b.classes);
    assert_eq!(a.crops, b.crops);
    assert!(!b.crops.is_empty());
    assert_eq!(a.online.keys().collect::<Vec<_>>(), b.online.keys().collect::<Vec<_>>());
}
