use lovasz::harness::{
    absent_class_probe, bias_sweep, generate_circles, generate_multiclass, train_linear, Dataset, LossKind,
    MulticlassConfig, OptimizerKind, SweepLoss, SweepTable, SyntheticConfig, TrainConfig,
};
use lovasz::io::{FloatField, PgmImage};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn sweep_csv_is_reproducible() {
    let cfg = SyntheticConfig {
        seed: 7,
        ..SyntheticConfig::default()
    };
    let run = || {
        let data = generate_circles(&cfg).unwrap();
        let mut buf = Vec::new();
        bias_sweep(&data, &SweepLoss::ALL, &cfg.bias_grid)
            .unwrap()
            .write_csv(&mut buf)
            .unwrap();
        buf
    };
    let a = run();
    assert_eq!(a, run());
    let table = SweepTable::read_csv(&a[..]).unwrap();
    assert_eq!(table.rows.len(), 5 * 601);
}

#[test]
fn sweep_separates_surrogates() {
    // cross-entropy and hinge favour far more negative biases than the
    // Jaccard loss; the Lovász hinge stays close to it
    let cfg = SyntheticConfig::default();
    let data = generate_circles(&cfg).unwrap();
    let t = bias_sweep(&data, &SweepLoss::ALL, &cfg.bias_grid).unwrap();
    let jac = t.argmin(SweepLoss::Jaccard).unwrap();
    assert!((t.argmin(SweepLoss::LovaszHinge).unwrap() - jac).abs() < 0.2);
    assert!((t.argmin(SweepLoss::CrossEntropy).unwrap() - jac).abs() > 0.5);
    assert!((t.argmin(SweepLoss::Hinge).unwrap() - jac).abs() > 0.5);
}

#[test]
fn bias_only_training_finds_the_sweep_minimum() {
    for seed in 0..3 {
        let cfg = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        let data = generate_circles(&cfg).unwrap();
        let (train, _) = data.split();
        let train_set = Dataset {
            images: train.iter().map(|&i| data.images[i].clone()).collect(),
            num_classes: 2,
        };
        let target = bias_sweep(&train_set, &[SweepLoss::LovaszHinge], &cfg.bias_grid)
            .unwrap()
            .argmin(SweepLoss::LovaszHinge)
            .unwrap();
        let result = train_linear(
            &data,
            &TrainConfig {
                loss: LossKind::LovaszHinge,
                optimizer: OptimizerKind::Momentum,
                batch_size: train.len(),
                epochs: 300,
                bias_only: true,
                seed,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(result.model.weights[[0, 0]], 1.0);
        let b = result.model.bias[0];
        assert!((b - target).abs() <= 0.01, "seed {seed}: learned {b}, sweep {target}");
    }
}

#[test]
fn present_classes_help_the_rare_class() {
    let mut all = Vec::new();
    let mut present = Vec::new();
    for seed in 0..5 {
        let data = generate_multiclass(&MulticlassConfig {
            seed,
            ..MulticlassConfig::default()
        })
        .unwrap();
        for (loss, out) in [
            (LossKind::LovaszSoftmaxAll, &mut all),
            (LossKind::LovaszSoftmaxPresent, &mut present),
        ] {
            let cfg = TrainConfig {
                loss,
                lr_base: 0.05,
                epochs: 40,
                batch_size: 2,
                seed,
                ..TrainConfig::default()
            };
            out.push(train_linear(&data, &cfg).unwrap().last().dataset_miou);
        }
    }
    assert!(median(present.clone()) >= median(all.clone()), "present {present:?} all {all:?}");
}

#[test]
fn equibatch_training_runs() {
    let data = generate_multiclass(&MulticlassConfig {
        n_images: 10,
        seed: 2,
        ..MulticlassConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        loss: LossKind::CrossEntropy,
        equibatch: true,
        epochs: 5,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let r = train_linear(&data, &cfg).unwrap();
    for rec in &r.records {
        assert!((0.0..=1.0).contains(&rec.image_miou) && (0.0..=1.0).contains(&rec.dataset_miou));
    }
    assert_eq!(r.final_report.per_class.len(), 3);
}

#[test]
fn flipping_a_whole_image_moves_both_metrics() {
    let data = generate_circles(&SyntheticConfig::default()).unwrap();
    let mut gt: Vec<Vec<usize>> = data.images.iter().map(|i| i.labels.clone()).collect();
    gt[0].iter_mut().for_each(|l| *l = 1);
    let all: Vec<usize> = (0..gt[0].len()).collect();
    let probe = absent_class_probe(&gt, &gt, 2, 0, &all, 0).unwrap();
    assert_eq!(probe.image_delta(), -1.0);
    assert!(probe.dataset_delta().abs() > 0.1 / gt.len() as f64, "{probe:?}");
}

#[test]
fn masks_and_features_survive_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_circles(&SyntheticConfig {
        n_images: 2,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    for (k, img) in data.images.iter().enumerate() {
        let mask = dir.path().join(format!("{k}.pgm"));
        PgmImage::from_labels(img.width, img.height, &img.labels)
            .unwrap()
            .save(&mask)
            .unwrap();
        assert_eq!(PgmImage::load(&mask).unwrap().labels(), img.labels);
        let feats = dir.path().join(format!("{k}.lsv"));
        let field = FloatField::new(50, 50, 1, img.features.iter().copied().collect()).unwrap();
        field.save(&feats).unwrap();
        assert_eq!(FloatField::load(&feats).unwrap(), field);
    }
}
