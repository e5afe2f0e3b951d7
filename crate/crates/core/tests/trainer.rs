use std::path::Path;

use mdepth::data::InMemoryDataset;
use mdepth::network::CheckpointFile;
use mdepth::train::{checkpoint_name, FINAL_CHECKPOINT, LAST_GOOD_CHECKPOINT, LOG_FILE, LOG_HEADER};
use mdepth::{Error, LossConfig, Network, NetworkConfig, Precision, Scalar, TrainConfig, Trainer};

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 2,
        learning_rate: 1e-3,
        seed: 3,
        max_steps: Some(steps),
        ..TrainConfig::default()
    }
}

fn data() -> InMemoryDataset {
    InMemoryDataset::synthetic(5, 21, 16, 16).unwrap()
}

fn typed<T: Scalar>(c: TrainConfig) -> TrainConfig {
    let precision = if T::DTYPE == mdepth::DType::F64 { Precision::F64 } else { Precision::F32 };
    TrainConfig { precision, ..c }
}

fn trainer<T: Scalar>(c: TrainConfig) -> Trainer<T> {
    let c = typed::<T>(c);
    let net = Network::<T>::build(NetworkConfig::toy().with_seed(8)).unwrap();
    Trainer::new(net, c, LossConfig::default()).unwrap()
}

fn bits<T: Scalar>(net: &Network<T>) -> Vec<u64> {
    net.params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().map(|&v| Scalar::to_f64(v).to_bits()))
        .collect()
}

#[test]
fn vanishing_learning_rate_leaves_parameters_unchanged() {
    // 1e-60 underflows to zero in single precision.
    let mut t = trainer::<f32>(TrainConfig { learning_rate: 1e-60, ..cfg(4) });
    let before = bits(t.network());
    let log = t.run(&data(), None).unwrap();
    assert_eq!(log.len(), 4);
    assert_eq!(bits(t.network()), before);
}

#[test]
fn identical_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut ta = trainer::<f32>(cfg(6));
    let mut tb = trainer::<f32>(cfg(6));
    let la = ta.run(&data(), Some(&a)).unwrap();
    let lb = tb.run(&data(), Some(&b)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(bits(ta.network()), bits(tb.network()));
    assert_eq!(std::fs::read(a.join(LOG_FILE)).unwrap(), std::fs::read(b.join(LOG_FILE)).unwrap());
    assert_eq!(
        std::fs::read(a.join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(b.join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn log_layout() {
    let dir = tempfile::tempdir().unwrap();
    trainer::<f32>(cfg(3)).run(&data(), Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,0,") && lines[3].starts_with("2,0,"));
    assert!(lines[1].ends_with(",0"));
}

fn resumed_matches_uninterrupted<T: Scalar>(split: u64, total: u64) {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let mut whole = trainer::<T>(cfg(total));
    whole.run(&data(), Some(&full)).unwrap();

    trainer::<T>(cfg(split)).run(&data(), Some(&part)).unwrap();
    let mut rest = Trainer::<T>::load(&part.join(FINAL_CHECKPOINT), typed::<T>(cfg(total)), LossConfig::default()).unwrap();
    assert_eq!(rest.step(), split);
    rest.run(&data(), Some(&part)).unwrap();

    assert_eq!(bits(rest.network()), bits(whole.network()));
    assert_eq!(rest.adam_state(), whole.adam_state());
    assert_eq!(rest.network().stats(), whole.network().stats());
    let read = |d: &Path| std::fs::read(d.join(LOG_FILE)).unwrap();
    assert_eq!(read(&part), read(&full));
}

#[test]
fn resume_matches_uninterrupted_run() {
    // Splits inside an epoch (3 batches each) and on its boundary.
    resumed_matches_uninterrupted::<f32>(4, 12);
    resumed_matches_uninterrupted::<f64>(6, 11);
}

#[test]
fn divergence_reports_step_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = Network::<f32>::build(NetworkConfig::toy()).unwrap();
    net.params_mut()[0].tensor.data_mut()[0] = f32::INFINITY;
    let mut t = Trainer::new(net, cfg(5), LossConfig::default()).unwrap();
    let err = t.run(&data(), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0 }), "{err}");
    assert_eq!(t.step(), 0);
    let saved = CheckpointFile::read(&dir.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    assert_eq!(saved, t.to_checkpoint());
    assert!(!dir.path().join(FINAL_CHECKPOINT).exists());
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { checkpoint_every: 2, ..cfg(5) };
    trainer::<f32>(c).run(&data(), Some(dir.path())).unwrap();
    for step in [2, 4] {
        assert!(dir.path().join(checkpoint_name(step)).is_file(), "step {step}");
    }
    assert!(!dir.path().join(checkpoint_name(5)).exists());
    let last = Trainer::<f32>::load(&dir.path().join(FINAL_CHECKPOINT), cfg(5), LossConfig::default()).unwrap();
    assert_eq!(last.step(), 5);
}

#[test]
fn schedule_respects_epochs_and_max_steps() {
    let t = trainer::<f32>(TrainConfig { epochs: 2, max_steps: None, ..cfg(0) });
    assert_eq!(t.planned_steps(5), 6);
    let t = trainer::<f32>(TrainConfig { epochs: 2, max_steps: Some(4), ..cfg(0) });
    assert_eq!(t.planned_steps(5), 4);
}

#[test]
fn precision_must_match_network_type() {
    let net = Network::<f64>::build(NetworkConfig::toy()).unwrap();
    let c = TrainConfig { precision: Precision::F32, ..cfg(1) };
    assert!(matches!(Trainer::new(net, c, LossConfig::default()), Err(Error::Config(_))));
}

#[test]
fn empty_dataset_is_rejected() {
    let mut t = trainer::<f32>(cfg(1));
    assert!(t.run(&InMemoryDataset::default(), None).is_err());
}
