use mtd_core::dataset::{
    generate_synthetic, simulate_incompleteness, split, IncompletenessSpec, MultiViewDataset, SplitSpec, SyntheticSpec,
};
use mtd_core::experiment::{load_prepared, prepare, write_prepared, DatasetSource, ExperimentConfig};
use mtd_core::metrics::average_precision;
use mtd_core::model::{ModelConfig, MtdModel};
use mtd_core::trainer::{evaluate, fit, TrainConfig};
use mtd_core::Matrix;

/// Full-batch logistic regression on views placed side by side.
fn linear_ap(train: &MultiViewDataset, test: &MultiViewDataset) -> f64 {
    let features = |d: &MultiViewDataset| -> Vec<Vec<f64>> {
        (0..d.n())
            .map(|i| {
                let mut f = vec![1.0];
                for x in d.views() {
                    f.extend_from_slice(x.row(i));
                }
                f
            })
            .collect()
    };
    let (xt, xs) = (features(train), features(test));
    let (c, dim) = (train.num_labels(), xt[0].len());
    let mut w = vec![vec![0.0; c]; dim];
    for _ in 0..1000 {
        let mut g = vec![vec![0.0; c]; dim];
        for (i, x) in xt.iter().enumerate() {
            for j in 0..c {
                let z: f64 = (0..dim).map(|k| x[k] * w[k][j]).sum();
                let err = 1.0 / (1.0 + (-z).exp()) - train.labels().get(i, j);
                for k in 0..dim {
                    g[k][j] += err * x[k];
                }
            }
        }
        for k in 0..dim {
            for j in 0..c {
                w[k][j] -= 0.1 * g[k][j] / xt.len() as f64;
            }
        }
    }
    let p = Matrix::from_fn(xs.len(), c, |i, j| {
        let z: f64 = (0..dim).map(|k| xs[i][k] * w[k][j]).sum();
        1.0 / (1.0 + (-z).exp())
    });
    average_precision(&p, test.labels()).unwrap()
}

#[test]
fn synthetic_data_is_linearly_learnable() {
    let full = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train, test) = split(&full, &SplitSpec { train_ratio: 0.7, seed: 0 }).unwrap();
    let ap = linear_ap(&train, &test);
    assert!(ap > 0.9, "linear AP {ap}");
}

#[test]
fn loss_falls_over_twenty_epochs_with_defaults() {
    let full = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let inc = simulate_incompleteness(&full, &IncompletenessSpec::default()).unwrap();
    let (train, _) = split(&inc, &SplitSpec::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let (_, record) = fit(&train, None, &ModelConfig::default(), &cfg).unwrap();
    let first = record.per_epoch_losses[0].losses.l_total;
    let last = record.per_epoch_losses[19].losses.l_total;
    assert!(last < first, "epoch 1 {first}, epoch 20 {last}");
}

#[test]
fn prepared_directory_to_checkpoint_to_evaluation() {
    let cfg = ExperimentConfig::new(DatasetSource {
        path: None,
        synthetic: Some(SyntheticSpec {
            n: 120,
            view_dims: vec![6, 9],
            num_labels: 4,
            ..SyntheticSpec::default()
        }),
    });
    let dir = tempfile::tempdir().unwrap();
    let (data, manifest) = prepare(&cfg, 0).unwrap();
    write_prepared(dir.path(), &data, &manifest).unwrap();
    let p = load_prepared(dir.path()).unwrap();

    let model_cfg = ModelConfig {
        hidden: vec![16],
        embed_dim: 8,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (model, record) = fit(&p.train, Some(&p.test), &model_cfg, &train_cfg).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    model.save(&ckpt).unwrap();
    let reloaded = MtdModel::load(&ckpt).unwrap();
    let report = evaluate(&reloaded, &p.test).unwrap();
    assert_eq!(&report, record.final_metrics().unwrap());
    for v in report.values() {
        assert!((0.0..=1.0).contains(&v), "metric {v} out of range");
    }
}
