use attrank::container::{Container, DType};
use attrank::infer::rank_beam;
use attrank::metrics::LabelView;
use attrank::model::AttRNParams;
use attrank::protocol::{build_benchmark, read_dataset, write_dataset, BenchmarkConfig};
use attrank::train::{evaluate, rank_dataset, train, TrainConfig};

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 0.02,
        epochs: 2,
        decoder_dim: 8,
        attention_dim: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn disk_round_trip_preserves_training_and_rankings() {
    let cfg = BenchmarkConfig {
        train: 24,
        validation: 6,
        test: 6,
        t: 12,
        noise: vec![1.5, 2.0, 2.5],
        ..BenchmarkConfig::default()
    };
    let s = build_benchmark(11, &cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for ds in [&s.train, &s.validation, &s.test] {
        write_dataset(tmp.path().join(ds.split.to_string()), ds, DType::F64).unwrap();
    }
    let train_set = read_dataset(tmp.path().join("train")).unwrap();
    let validation = read_dataset(tmp.path().join("validation")).unwrap();
    let test = read_dataset(tmp.path().join("test")).unwrap();
    assert_eq!(train_set, s.train);

    let tc = config();
    let from_disk = train(&tc, &train_set, &validation, tc.init_for(&train_set).unwrap()).unwrap();
    let in_memory = train(&tc, &s.train, &s.validation, tc.init_for(&s.train).unwrap()).unwrap();
    assert_eq!(from_disk.params, in_memory.params);

    let path = tmp.path().join("model.emb");
    from_disk.params.to_container(serde_json::json!({"note": "test"})).write(&path).unwrap();
    let container = Container::read(&path).unwrap();
    assert_eq!(container.meta["note"], "test");
    let restored = AttRNParams::from_container(&container).unwrap();
    assert_eq!(restored, from_disk.params);

    let before = rank_dataset(&from_disk.params, &test, 3).unwrap();
    let after = rank_dataset(&restored, &test, 3).unwrap();
    assert_eq!(before, after);
    assert_eq!(before[0], rank_beam(&restored, &test.episodes[0].bundle, 3).unwrap());
    let report = evaluate(&restored, &test, 3, LabelView::AtLeast(1)).unwrap();
    assert!((0.0..=1.0).contains(&report.map.mean));
    assert_eq!(report.per_query.len() + report.excluded, test.len());
}

#[test]
fn f32_datasets_widen_on_load() {
    let cfg = BenchmarkConfig {
        train: 4,
        validation: 2,
        test: 2,
        t: 10,
        ..BenchmarkConfig::default()
    };
    let s = build_benchmark(3, &cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(tmp.path(), &s.test, DType::F32).unwrap();
    let back = read_dataset(tmp.path()).unwrap();
    for (a, b) in back.episodes.iter().zip(&s.test.episodes) {
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.bundle.query(0).iter().zip(b.bundle.query(0)) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
}
