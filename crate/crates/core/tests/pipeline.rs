use std::path::PathBuf;

use softshape::checkpoint::{Checkpoint, CheckpointMeta};
use softshape::data::{align_labels, load_ucr_tsv, prepare, prepare_with_means};
use softshape::export::{attention_map, stage_rows, Stage};
use softshape::train::{evaluate, run, TrainConfig};
use softshape::ModelState32;

fn italy() -> softshape::data::Dataset {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ItalyPowerDemand.tsv");
    load_ucr_tsv(path).unwrap()
}

#[test]
fn bundled_dataset_shapes() {
    let d = italy();
    assert_eq!((d.sample_count(), d.series_length, d.num_classes), (1096, 24, 2));
    let p = prepare(&d, 0).unwrap();
    assert_eq!((p.split.train.len(), p.split.val.len(), p.split.test.len()), (658, 219, 219));
}

#[test]
fn checkpoint_reproduces_test_accuracy() {
    let raw = italy();
    let data = prepare(&raw, 3).unwrap();
    let cfg = TrainConfig {
        m: Some(8),
        d: 8,
        max_epochs: 4,
        warmup_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let r = run::<f32>(&data, &cfg).unwrap();
    let meta = CheckpointMeta {
        dataset: "ItalyPowerDemand".into(),
        split_seed: data.split.seed,
        class_labels: data.dataset.class_labels.clone(),
        impute_means: data.impute_means.clone(),
        train_config: cfg,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::from_state(&r.outcome.state, meta).save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    let state: ModelState32 = ck.to_state().unwrap();
    let again = prepare_with_means(&align_labels(&raw, &ck.meta.class_labels).unwrap(), &ck.meta.impute_means).unwrap();
    let acc = evaluate(&state, &again.subset(&data.split.test)).unwrap();
    assert_eq!(acc, r.test_accuracy);

    let series: Vec<f32> = again.records[0].values.iter().map(|&v| v as f32).collect();
    let map = attention_map(&state, &series).unwrap();
    assert_eq!(map.rows.len(), 24);
    let (prov, rows) = stage_rows(&state, &series, Stage::Input).unwrap();
    assert_eq!((prov.len(), rows.ncols()), (5, 8));
}
