use std::path::Path;

use candle_core::{DType, Device, Tensor};
use plutonet::data::{self, Pair};
use plutonet::decoders::{ForwardMode, ModelConfig, NetworkConfig, PlutoNet};
use plutonet::losses::{consistency_loss, supervised_loss, LossConfig};
use plutonet::metrics::{evaluate, EvalConfig};
use plutonet::trainer::{load_checkpoint, read_manifest, StopReason, TrainConfig, Trainer};
use plutonet::Error;

fn corpus(dir: &Path, n: usize) -> Vec<Pair> {
    data::generate_synthetic(n, 5, dir, 64).unwrap();
    let samples = data::load_corpus(dir, true).unwrap();
    data::load_pairs(&samples).unwrap()
}

fn model(seed: u64) -> PlutoNet {
    PlutoNet::new(&NetworkConfig::default(), seed, DType::F32, &Device::Cpu).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 4,
        ..Default::default()
    }
}

#[test]
fn checkpoints_and_history_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = corpus(&tmp.path().join("data"), 12);
    let (train, val) = pairs.split_at(8);
    let run = tmp.path().join("run");
    let m = model(1);
    let eval = EvalConfig { batch_size: 4, ..Default::default() };
    let history = Trainer::new(&m, &quick(2), &LossConfig::default())
        .eval(&eval)
        .output_dir(&run)
        .fit(train, val)
        .unwrap();
    assert_eq!(history.epochs.len(), 2);
    assert_eq!(history.total_steps, 4);
    assert_eq!(history.stop_reason, StopReason::MaxEpochs);
    let best = history.best();
    assert!(history.epochs.iter().all(|e| e.val_total >= best.val_total - 1e-8));
    assert!(history.epochs.iter().all(|e| e.train_l_c.is_some() && e.wall_time_s.is_none()));

    let manifest = read_manifest(&run.join("checkpoints/best")).unwrap();
    assert_eq!(manifest.val_loss, best.val_total);
    assert_eq!(manifest.epoch, history.best_epoch);
    assert_eq!(manifest.parameters.total, m.count_parameters().total);

    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 4);
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count(), 2);

    // the last checkpoint holds the final weights
    let (restored, last) = load_checkpoint(&run.join("checkpoints/last"), Some(m.config())).unwrap();
    assert_eq!(restored.checksum().unwrap(), m.checksum().unwrap());
    assert_eq!(last.checksum, m.checksum().unwrap());
    let refs: Vec<&Pair> = val.iter().collect();
    let (images, _) = data::to_batch(&refs, DType::F32, &Device::Cpu).unwrap();
    let a = m.forward(&images, ForwardMode::Eval).unwrap().main.into_tensor();
    let b = restored.forward(&images, ForwardMode::Eval).unwrap().main.into_tensor();
    let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(diff, 0.0);

    // the recorded validation dice is reproduced from the best checkpoint
    let (best_model, _) = load_checkpoint(&run.join("checkpoints/best"), None).unwrap();
    let ev = evaluate(&best_model, val, &eval, &LossConfig::default()).unwrap();
    assert!((ev.mean().dice - manifest.val_dice).abs() < 1e-6);

    let other = NetworkConfig {
        model: ModelConfig { se_reduction: 8, ..Default::default() },
        ..Default::default()
    };
    let err = load_checkpoint(&run.join("checkpoints/best"), Some(&other)).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn deterministic_runs_write_identical_histories() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = corpus(&tmp.path().join("data"), 10);
    let (train, val) = pairs.split_at(6);
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let m = model(3);
        Trainer::new(&m, &quick(1), &LossConfig::default()).output_dir(&dir).fit(train, val).unwrap();
        (
            std::fs::read(dir.join("history.json")).unwrap(),
            std::fs::read(dir.join("train_log.jsonl")).unwrap(),
            m.checksum().unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn validation_leaves_parameters_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = corpus(&tmp.path().join("data"), 4);
    let m = model(4);
    let before = m.checksum().unwrap();
    evaluate(&m, &pairs, &EvalConfig::default(), &LossConfig::default()).unwrap();
    assert_eq!(m.checksum().unwrap(), before);
}

#[test]
fn auxiliary_gradients_follow_the_consistency_switch() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = corpus(&tmp.path().join("data"), 2);
    let refs: Vec<&Pair> = pairs.iter().collect();
    let (images, truth) = data::to_batch(&refs, DType::F32, &Device::Cpu).unwrap();
    let m = model(5);
    let aux_vars = m.store().trainable_vars(Some("aux"));
    let cfg = LossConfig::default();

    let out = m.forward(&images, ForwardMode::Train { auxiliary: true }).unwrap();
    let l_s = supervised_loss(&out.main, &truth, &cfg).unwrap();
    let l_c = consistency_loss(&out.main, out.aux.as_ref().unwrap(), &cfg).unwrap();
    let grads = (l_s + l_c).unwrap().backward().unwrap();
    let norm: f32 = aux_vars
        .iter()
        .map(|v| grads.get(v).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
        .sum();
    assert!(norm > 0.0);

    let out = m.forward(&images, ForwardMode::Train { auxiliary: false }).unwrap();
    let grads = supervised_loss(&out.main, &truth, &cfg).unwrap().backward().unwrap();
    assert!(aux_vars.iter().all(|v| grads.get(v).is_none()));
}

#[test]
fn consistency_without_auxiliary_decoder_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = corpus(&tmp.path().join("data"), 4);
    let net = NetworkConfig {
        model: ModelConfig { auxiliary: false, ..Default::default() },
        ..Default::default()
    };
    let m = PlutoNet::new(&net, 0, DType::F32, &Device::Cpu).unwrap();
    let err = Trainer::new(&m, &quick(1), &LossConfig::default())
        .fit(&pairs[..2], &pairs[2..])
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let disabled = TrainConfig { consistency_enabled: false, ..quick(1) };
    Trainer::new(&m, &disabled, &LossConfig::default()).fit(&pairs[..2], &pairs[2..]).unwrap();
}

#[test]
fn empty_splits_are_rejected() {
    let m = model(0);
    let err = Trainer::new(&m, &quick(1), &LossConfig::default()).fit(&[], &[]).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = corpus(&tmp.path().join("data"), 6);
    let (train, val) = pairs.split_at(4);
    let run = tmp.path().join("run");
    let m = model(6);
    Trainer::new(&m, &quick(1), &LossConfig::default()).output_dir(&run).fit(train, val).unwrap();
    let good = read_manifest(&run.join("checkpoints/last")).unwrap();

    // poison one parameter so the next forward pass produces NaN
    let w = m.store().get("head.conv.weight").unwrap();
    w.set(&Tensor::full(f32::NAN, w.shape(), &Device::Cpu).unwrap()).unwrap();
    let err = Trainer::new(&m, &quick(1), &LossConfig::default()).output_dir(&run).fit(train, val).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(read_manifest(&run.join("checkpoints/last")).unwrap(), good);
}
