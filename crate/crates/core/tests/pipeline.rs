use bicovg::checkpoint;
use bicovg::config::{Config, Split};
use bicovg::data::{load_split, save_split, DataFormat, SyntheticSpec};
use bicovg::run::{evaluate, fit, FitOptions};
use bicovg::training::TrainState;

fn small_corpus() -> (bicovg::data::Dataset, bicovg::data::Dataset) {
    SyntheticSpec {
        train: 120,
        test: 60,
        seed: 9,
        ..SyntheticSpec::default()
    }
    .generate()
    .unwrap()
}

#[test]
fn corpus_survives_both_disk_formats() {
    let (train, test) = small_corpus();
    train.check_disjoint(&test).unwrap();
    for format in [DataFormat::Idx, DataFormat::Raw] {
        let dir = tempfile::tempdir().unwrap();
        save_split(&train, dir.path(), Split::Train, format).unwrap();
        save_split(&test, dir.path(), Split::Test, format).unwrap();
        let a = load_split(dir.path(), Split::Train, 10).unwrap();
        let b = load_split(dir.path(), Split::Test, 10).unwrap();
        assert!(a.images.bitwise_eq(&train.images));
        assert!(b.images.bitwise_eq(&test.images));
        assert_eq!(a.labels, train.labels);
        assert_eq!(b.labels, test.labels);
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_weights() {
    let (train, _) = small_corpus();
    let cfg = Config::from_toml_with(
        bicovg::config::preset_source("desk8").unwrap(),
        &["train.hgb_m=4".into(), "train.epochs=2".into()],
    )
    .unwrap();
    let one = FitOptions {
        epochs: Some(1),
        ..FitOptions::default()
    };

    let mut straight = TrainState::new(cfg.clone()).unwrap();
    fit(&mut straight, &train, None, &FitOptions::default(), |_| {}).unwrap();

    let mut first = TrainState::new(cfg.clone()).unwrap();
    first.total_steps = straight.total_steps;
    fit(&mut first, &train, None, &one, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    checkpoint::save(&first, &path).unwrap();
    let mut resumed = checkpoint::load_for(&path, &cfg.arch).unwrap();
    assert_eq!(resumed.epoch, 1);
    fit(&mut resumed, &train, None, &FitOptions::default(), |_| {}).unwrap();

    for (a, b) in straight.groups.iter().zip(&resumed.groups) {
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert!(pa.value.bitwise_eq(&pb.value), "{} diverged after resume", pa.name);
        }
    }
    assert_eq!(evaluate(&mut straight, &train).unwrap(), evaluate(&mut resumed, &train).unwrap());
}

#[test]
fn checkpoint_refuses_other_architecture() {
    let st = TrainState::new(Config::preset("desk8").unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&st, &path).unwrap();
    let other = Config::preset("desk16").unwrap();
    assert!(checkpoint::load_for(&path, &other.arch).is_err());
}
