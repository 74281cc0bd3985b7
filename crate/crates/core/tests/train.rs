use std::path::Path;

use rpeflow::dataset::{make_dataset, SpeedMode};
use rpeflow::model::ModelConfig;
use rpeflow::scenegen::SceneConfig;
use rpeflow::tensor::ParamStore;
use rpeflow::train::*;
use rpeflow::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        levels: 2,
        channels_2d: vec![4, 6],
        channels_3d: vec![4, 6],
        corr_radius: 1,
        knn: 4,
        latent_dim: 3,
        ..ModelConfig::tiny()
    }
}

fn dataset(dir: &Path) {
    let scene = SceneConfig {
        width: 16,
        height: 16,
        focal: 16.0,
        num_points: 48,
        ..SceneConfig::default()
    };
    make_dataset(&scene, 4, 0.75, SpeedMode::Fast, dir, 3).unwrap();
}

fn config(iterations: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: small_model(),
        ..RunConfig::default()
    };
    cfg.train.iterations = iterations;
    cfg.train.batch_size = 2;
    cfg.train.seed = 5;
    cfg
}

#[test]
fn batches_cover_each_epoch_once() {
    for n in [1, 3, 7] {
        for bs in [1, 2, 4] {
            let flat: Vec<usize> = (0..n * 3).flat_map(|it| batch_indices(n, bs, 9, it)).collect();
            for epoch in flat.chunks(n).take(bs * n * 3 / n) {
                let mut e = epoch.to_vec();
                e.sort();
                assert_eq!(e, (0..n).collect::<Vec<_>>());
            }
            assert_eq!(batch_indices(n, bs, 9, 5), batch_indices(n, bs, 9, 5));
        }
    }
    assert_ne!(
        (0..4).flat_map(|i| batch_indices(8, 2, 1, i)).collect::<Vec<_>>(),
        (0..4).flat_map(|i| batch_indices(8, 2, 2, i)).collect::<Vec<_>>()
    );
}

#[test]
fn resume_is_bit_exact_at_f64() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let cfg = config(4);
    let data = prepare_split::<f64>(tmp.path(), "train", &cfg.model, true).unwrap();

    let mut straight = Trainer::<f64>::new(cfg.clone()).unwrap();
    let rows = train_run(&mut straight, &data, &tmp.path().join("a"), true, |_| {}).unwrap();

    let mut first = Trainer::<f64>::new(config(2)).unwrap();
    train_run(&mut first, &data, &tmp.path().join("b"), true, |_| {}).unwrap();
    let mut resumed = Trainer::<f64>::resume(&tmp.path().join("b").join(FINAL_DIR)).unwrap();
    assert_eq!(resumed.iteration, 2);
    resumed.config.train.iterations = 4;
    let rows_b = train_run(&mut resumed, &data, &tmp.path().join("b"), true, |_| {}).unwrap();

    assert_eq!(rows, rows_b);
    assert_eq!(straight.params, resumed.params);
    assert_eq!(straight.adam.m, resumed.adam.m);
    assert_eq!(resumed.adam.step, 4);
    assert_eq!(read_log(&tmp.path().join("b").join(LOG_FILE)).unwrap(), rows);
    let (_, best) = load_model::<f64>(&tmp.path().join("a").join(BEST_DIR)).unwrap();
    let best_iter = straight.best.unwrap().1;
    assert!(best_iter >= 1 && best_iter <= 4);
    if best_iter == 4 {
        assert_eq!(best, straight.params);
    }
}

#[test]
fn no_mi_logs_feature_loss_without_using_it() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let mut cfg = config(2);
    cfg.train.loss.beta = 0.0;
    cfg.train.optimizer.weight_decay = 0.0;
    let data = prepare_split::<f64>(tmp.path(), "train", &cfg.model, true).unwrap();
    let mut t = Trainer::<f64>::new(cfg).unwrap();
    for _ in 0..2 {
        let row = t.step(&data).unwrap();
        assert_eq!(row.loss, row.task);
        assert!(row.feat > 0.0);
    }
    let mi_before: Vec<_> = Trainer::<f64>::new(config(0)).unwrap().params.iter().filter(|(n, _)| n.contains(".mi.")).map(|(_, v)| v.clone()).collect();
    let mi_after: Vec<_> = t.params.iter().filter(|(n, _)| n.contains(".mi.")).map(|(_, v)| v.clone()).collect();
    assert_eq!(mi_before, mi_after);
}

#[test]
fn ground_truth_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let data = prepare_split::<f64>(tmp.path(), "val", &small_model(), true).unwrap();
    let rep = evaluate_split::<f64>(&Predictor::GroundTruth, &data).unwrap();
    assert_eq!(rep.epe2d, 0.0);
    assert_eq!(rep.epe3d_full, 0.0);
    assert_eq!(rep.epe3d_nocc, 0.0);
    assert_eq!(rep.acc1px, 1.0);
    assert_eq!(rep.acc05_full, 1.0);
}

#[test]
fn run_config_parsing() {
    let cfg = RunConfig::from_json(r#"{"train": {"iterations": 7, "loss": {"beta": 0.0}}}"#).unwrap();
    assert_eq!(cfg.train.iterations, 7);
    assert_eq!(cfg.train.loss.alpha, 10.0);
    assert_eq!(cfg.model, ModelConfig::default());
    assert_eq!(cfg.train.optimizer.lr, 1e-3);
    assert_eq!(cfg.train.optimizer.weight_decay, 1e-6);
    for bad in [
        r#"{"trian": {}}"#,
        r#"{"model": {"levles": 3}}"#,
        r#"{"train": {"batch_size": 0}}"#,
        r#"{"train": {"optimizer": {"lr": -1, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0}}}"#,
        r#"{"model": {"levels": 1}}"#,
    ] {
        assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn mismatched_checkpoint_is_a_contract_error() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Trainer::<f32>::new(config(0)).unwrap();
    t.save(tmp.path(), false).unwrap();
    assert!(load_model::<f32>(tmp.path()).is_ok());
    let other = rpeflow::model::Network::new(ModelConfig::tiny()).unwrap();
    assert!(matches!(check_params(&other, &t.params), Err(Error::Contract(_))));
    let mut extra: ParamStore<f32> = t.params.clone();
    extra.insert("stray", rpeflow::tensor::Tensor::zeros(&[1]));
    assert!(matches!(check_params(&t.net, &extra), Err(Error::Contract(_))));
}

#[test]
fn non_finite_weights_abort_training() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let cfg = config(1);
    let data = prepare_split::<f64>(tmp.path(), "train", &cfg.model, true).unwrap();
    let mut t = Trainer::<f64>::new(cfg).unwrap();
    t.params.get_mut("head.l0.flow").unwrap().data_mut()[0] = f64::NAN;
    assert!(matches!(t.step(&data), Err(Error::NonFinite { level: 0, .. })));
}
