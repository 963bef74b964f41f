//! End-to-end pipeline properties that cross module boundaries: corpus
//! generation through split construction, featurization, training,
//! persistence, detection, and metrics.

use kfolden::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainedPredictor};
use kfolden::corpus::{
    build_semantic_shift_split, generate_synthetic_corpus, BenchmarkSplit, ShiftKind, SplitSpec,
};
use kfolden::detect::{evaluate_detector, fit, DetectorConfig, Method};
use kfolden::features::FeaturizerConfig;
use kfolden::kfolden::{train_kfolden, train_kfolden_serial, KFoldenConfig};
use kfolden::net::{train_classifier, AdamConfig, BackboneConfig, Dataset, TrainConfig};

fn synthetic_split(num_labels: usize, m: usize, noise: f64, seed: u64) -> BenchmarkSplit {
    let corpus = generate_synthetic_corpus(num_labels, 120, 8, noise, seed);
    let spec = SplitSpec {
        shift_kind: ShiftKind::SemanticShift,
        m,
        n: num_labels - m,
        per_label_caps: None,
        seed,
        valid_fraction: 0.25,
        test_fraction: 0.25,
    };
    build_semantic_shift_split(&corpus, &spec).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 16,
        optimizer: AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn featurizer_config() -> FeaturizerConfig {
    FeaturizerConfig::hashed_bow(64, 0)
}

/// With `noise_rate = 1` every token is drawn from the all-labels keyword
/// union, so no classifier can beat chance; mean test accuracy over five
/// seeds must sit within 0.1 of `1/m`.
#[test]
fn label_free_corpus_trains_to_chance_accuracy() {
    let m = 3;
    let mut accuracies = Vec::new();
    for seed in 0..5 {
        let split = synthetic_split(4, m, 1.0, seed);
        let featurizer = featurizer_config().build().unwrap();
        let data = Dataset::from_documents(&split.train, &featurizer, m).unwrap();
        let model = BackboneConfig::linear().build(data.features[0].dim(), m, seed);
        let (model, _) = train_classifier(model, &data, &quick_train(), seed).unwrap();
        let correct = split
            .id_test
            .iter()
            .filter(|doc| {
                let x = featurizer.featurize(&doc.text);
                let pass = model.forward(&x, 1.0, None).unwrap();
                let argmax = pass
                    .probs
                    .probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                argmax == doc.label
            })
            .count();
        accuracies.push(correct as f64 / split.id_test.len() as f64);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let chance = 1.0 / m as f64;
    assert!(
        (mean - chance).abs() < 0.1,
        "mean accuracy {mean:.3} strays from chance {chance:.3}: {accuracies:?}"
    );
}

/// Scoring through a saved-and-reloaded checkpoint must equal scoring the
/// freshly trained ensemble bit for bit, and the resulting report must show
/// real separation on the zero-noise benchmark.
#[test]
fn persistence_changes_no_scores() {
    let split = synthetic_split(4, 3, 0.0, 9);
    let featurizer = featurizer_config().build().unwrap();
    let data = Dataset::from_documents(&split.train, &featurizer, 3).unwrap();
    let config = KFoldenConfig {
        gamma: 1.0,
        backbone: BackboneConfig::linear(),
        train: quick_train(),
        seed_base: 9,
    };
    let (ensemble, _) = train_kfolden(&data, &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let checkpoint = Checkpoint {
        predictor: TrainedPredictor::KFolden(ensemble),
        featurizer: featurizer_config(),
        label_names: split.label_space.names[..3].to_vec(),
        seed: 9,
        gamma: 1.0,
    };
    save_checkpoint(dir.path(), &checkpoint).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, checkpoint);

    let detector_config = DetectorConfig::new(Method::KFolden, 9);
    let fresh_detector = fit(&detector_config, &checkpoint.predictor, &featurizer, &split).unwrap();
    let (fresh_report, fresh_records) =
        evaluate_detector(&fresh_detector, &checkpoint.predictor, &featurizer, &split).unwrap();
    let loaded_featurizer = loaded.build_featurizer().unwrap();
    let loaded_detector = fit(&detector_config, &loaded.predictor, &loaded_featurizer, &split).unwrap();
    let (loaded_report, loaded_records) =
        evaluate_detector(&loaded_detector, &loaded.predictor, &loaded_featurizer, &split).unwrap();

    assert_eq!(fresh_records, loaded_records);
    assert_eq!(fresh_report, loaded_report);
    assert!(
        fresh_report.auroc > 0.5,
        "no separation on the zero-noise benchmark: {fresh_report:?}"
    );
    assert_eq!(fresh_report.id_count, split.id_test.len());
    assert_eq!(fresh_report.ood_count, split.ood_test.len());
}

/// The data-parallel and sequential training paths must produce the same
/// ensemble parameters bit for bit.
#[test]
fn parallel_and_serial_training_agree_exactly() {
    let split = synthetic_split(4, 3, 0.0, 4);
    let featurizer = featurizer_config().build().unwrap();
    let data = Dataset::from_documents(&split.train, &featurizer, 3).unwrap();
    let config = KFoldenConfig {
        gamma: 0.5,
        backbone: BackboneConfig::linear(),
        train: quick_train(),
        seed_base: 4,
    };
    let (parallel, parallel_logs) = train_kfolden(&data, &config).unwrap();
    let (serial, serial_logs) = train_kfolden_serial(&data, &config).unwrap();
    assert_eq!(parallel, serial);
    assert_eq!(parallel_logs, serial_logs);
}
