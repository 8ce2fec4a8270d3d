use graphflow::checkpoint::{load, save, write_checkpoint};
use graphflow::data::{make_windows_in, SplitName};
use graphflow::detector::{score, AnomalyReport, ThresholdSet};
use graphflow::synth::{synth_generate, SynthConfig};
use graphflow::trainer::{prepare, train, Dataset, TrainConfig};
use graphflow::{Error, FlowModel};

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        window: 20,
        stride: 5,
        batch_size: 16,
        epochs: 3,
        hidden: 4,
        cond_dim: 3,
        made_hidden: 10,
        seed,
        ..TrainConfig::default()
    }
}

fn data() -> graphflow::data::SeriesTable {
    synth_generate(&SynthConfig {
        len: 600,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn dataset(config: &TrainConfig) -> Dataset {
    prepare(&data(), config).unwrap().0
}

fn bytes(model: &FlowModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).unwrap();
    buf
}

#[test]
fn same_seed_trains_byte_identical_models() {
    let config = quick_config(4);
    let ds = dataset(&config);
    let a = train(&ds, &config).unwrap();
    let b = train(&ds, &config).unwrap();
    assert_eq!(bytes(&a.best), bytes(&b.best));
    assert_eq!(bytes(&a.last), bytes(&b.last));
    let c = train(&ds, &quick_config(5)).unwrap();
    assert_ne!(bytes(&a.best), bytes(&c.best));
}

#[test]
fn training_lowers_the_loss() {
    let config = TrainConfig {
        epochs: 8,
        ..quick_config(1)
    };
    let out = train(&dataset(&config), &config).unwrap();
    let first = out.log.first().unwrap();
    let last = out.log.last().unwrap();
    assert!(last.train_loss < first.train_loss);
    assert!(out.log.iter().all(|e| e.val_loss.is_finite()));
    assert_eq!(out.log.len(), 8);
}

#[test]
fn best_model_has_lowest_validation_loss() {
    let config = TrainConfig {
        epochs: 5,
        ..quick_config(2)
    };
    let out = train(&dataset(&config), &config).unwrap();
    let min = out
        .log
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[out.best_epoch - 1].val_loss, min);
}

#[test]
fn zero_epochs_returns_the_initialized_model() {
    let config = TrainConfig {
        epochs: 0,
        ..quick_config(3)
    };
    let ds = dataset(&config);
    let out = train(&ds, &config).unwrap();
    let mut init = FlowModel::init(&config, ds.names.clone(), ds.norm.clone()).unwrap();
    init.train_scores = out.best.train_scores.clone();
    assert_eq!(out.best, init);
    assert_eq!(out.best_epoch, 0);
    assert_eq!(
        out.best.train_scores.as_ref().unwrap().len(),
        ds.train.len()
    );
}

#[test]
fn labeled_training_windows_are_rejected() {
    let config = quick_config(0);
    let mut ds = dataset(&config);
    ds.train.labels = Some(vec![false; ds.train.len()]);
    assert!(matches!(train(&ds, &config), Err(Error::Usage(_))));
}

#[test]
fn checkpoint_file_roundtrip_reproduces_scores() {
    let config = quick_config(6);
    let table = data();
    let out = train(&dataset(&config), &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&out.best, &path).unwrap();
    let back = load(&path).unwrap();
    let w = back.windows_for(&table, SplitName::Test).unwrap();
    let a = score(&out.best, &w).unwrap();
    let b = score(&back, &w).unwrap();
    let bits = |s: &graphflow::detector::ScoreSeries| -> Vec<u64> {
        s.entity.iter().flatten().map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn windows_for_matches_manual_windowing() {
    let config = quick_config(7);
    let table = data();
    let (ds, normalized, ranges) = prepare(&table, &config).unwrap();
    let model = FlowModel::init(&config, ds.names.clone(), ds.norm.clone()).unwrap();
    let via_model = model.windows_for(&table, SplitName::Val).unwrap();
    let manual = make_windows_in(&normalized, ranges.val.clone(), 20, 5).unwrap();
    assert_eq!(via_model.values, manual.values);
    assert_eq!(via_model.starts, manual.starts);
    assert!(via_model.labels.is_some());
}

#[test]
fn entity_count_mismatch_names_both_counts() {
    let config = quick_config(0);
    let ds = dataset(&config);
    let model = FlowModel::init(&config, ds.names.clone(), ds.norm.clone()).unwrap();
    let other = synth_generate(&SynthConfig {
        entities: 4,
        len: 300,
        ..SynthConfig::default()
    })
    .unwrap();
    match model.windows_for(&other, SplitName::All) {
        Err(Error::Config(msg)) => assert!(msg.contains('3') && msg.contains('4'), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn report_flags_follow_thresholds() {
    let config = quick_config(8);
    let table = data();
    let out = train(&dataset(&config), &config).unwrap();
    let model = out.best;
    let th = ThresholdSet::fit(model.train_scores.as_ref().unwrap(), &[0.8; 3]).unwrap();
    let w = model.windows_for(&table, SplitName::Test).unwrap();
    let report = AnomalyReport::build(&model, &w, th).unwrap();
    for (s, f) in report.scores.window.iter().zip(&report.flags.window) {
        assert_eq!(*f, *s > report.thresholds.global);
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("window_start,S_c,flag,S_c_sensor_0,"));
    assert_eq!(text.lines().count(), report.scores.len() + 1);
    let unlabeled = model
        .windows_for(&table.without_labels(), SplitName::Test)
        .unwrap();
    let th = ThresholdSet::fit(model.train_scores.as_ref().unwrap(), &[0.8; 3]).unwrap();
    let plain = AnomalyReport::build(&model, &unlabeled, th).unwrap();
    assert!(!plain.summary().contains("auroc"));
}

#[test]
fn no_graph_adjacency_is_identity() {
    let config = TrainConfig {
        no_graph: true,
        ..quick_config(0)
    };
    let ds = dataset(&config);
    let model = FlowModel::init(&config, ds.names.clone(), ds.norm.clone()).unwrap();
    for a in model.adjacency(&ds.train.values).unwrap() {
        assert_eq!(a, graphflow::Tensor::eye(3));
    }
}

#[test]
fn single_target_zeroes_entity_means() {
    let config = TrainConfig {
        single_target: true,
        ..quick_config(9)
    };
    let ds = dataset(&config);
    let model = FlowModel::init(&config, ds.names.clone(), ds.norm.clone()).unwrap();
    assert_eq!(model.targets.mu, vec![0.0; 3]);
    let full = FlowModel::init(&quick_config(9), ds.names.clone(), ds.norm.clone()).unwrap();
    assert!(full.targets.mu.iter().all(|&m| m != 0.0));
    // Same parameter draws either way.
    assert_eq!(full.flow, model.flow);
}

#[test]
fn test_split_windows_lie_after_validation() {
    let config = quick_config(0);
    let table = data();
    let ds = dataset(&config);
    let model = FlowModel::init(&config, ds.names, ds.norm).unwrap();
    let test = model.windows_for(&table, SplitName::Test).unwrap();
    assert!(test.starts.iter().all(|&s| s >= 480));
}
