//! Saving and loading trained predictors.
//!
//! A checkpoint is a directory. A single classifier is one `model.json`; a
//! plain ensemble adds `member_<i>.json` files and a manifest; a
//! leave-one-label-out ensemble stores `sub_<masked_label>.json` files and a
//! manifest carrying `k`, `gamma`, the label names, the per-sub-model seeds,
//! and the featurizer configuration. All files are JSON written through a
//! temp-then-rename step, so an interrupted save never leaves a readable but
//! half-written checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::write_atomic;
use crate::features::{FeatureVector, Featurizer, FeaturizerConfig};
use crate::kfolden::{KFoldenEnsemble, SubModel, VanillaEnsemble};
use crate::net::{BackboneConfig, BackboneKind, Classifier, ProbDist};
use crate::rng::ChaCha8Rng;
use crate::{Error, Result};

/// Any trained model that can map a feature vector to a distribution over
/// the in-distribution labels.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedPredictor {
    Single(Classifier),
    Vanilla(VanillaEnsemble),
    KFolden(KFoldenEnsemble),
}

impl TrainedPredictor {
    /// Number of in-distribution labels the predictor scores.
    pub fn num_labels(&self) -> usize {
        match self {
            TrainedPredictor::Single(m) => m.num_classes,
            TrainedPredictor::Vanilla(e) => e.num_classes(),
            TrainedPredictor::KFolden(e) => e.num_labels,
        }
    }

    /// Deterministic forward pass at the given temperature.
    pub fn predict(&self, x: &FeatureVector, temperature: f64) -> Result<ProbDist> {
        match self {
            TrainedPredictor::Single(m) => Ok(m.forward(x, temperature, None)?.probs),
            TrainedPredictor::Vanilla(e) => e.predict(x, temperature),
            TrainedPredictor::KFolden(e) => e.predict(x, temperature),
        }
    }

    /// Prediction averaged over `passes` stochastic dropout forwards.
    pub fn predict_mc(
        &self,
        x: &FeatureVector,
        temperature: f64,
        passes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ProbDist> {
        match self {
            TrainedPredictor::Single(m) => {
                crate::net::mc_average_forward(m, x, temperature, passes, rng)
            }
            TrainedPredictor::Vanilla(e) => {
                let mut sum = vec![0.0; e.num_classes()];
                for m in &e.models {
                    let p = crate::net::mc_average_forward(m, x, temperature, passes, rng)?;
                    for (acc, v) in sum.iter_mut().zip(&p.probs) {
                        *acc += v;
                    }
                }
                let n = e.models.len() as f64;
                Ok(ProbDist {
                    probs: sum.into_iter().map(|v| v / n).collect(),
                })
            }
            TrainedPredictor::KFolden(e) => e.predict_mc(x, temperature, passes, rng),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            TrainedPredictor::Single(_) => "single classifier",
            TrainedPredictor::Vanilla(_) => "plain ensemble",
            TrainedPredictor::KFolden(_) => "leave-one-label-out ensemble",
        }
    }
}

/// A trained predictor together with everything needed to score raw text:
/// the featurizer it was trained with, the label names its class indices
/// refer to, and the seed the training run started from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub predictor: TrainedPredictor,
    pub featurizer: FeaturizerConfig,
    /// Visible label names; index in this list == class index.
    pub label_names: Vec<String>,
    /// Root training seed (sub-model `i` derives `seed + i`).
    pub seed: u64,
    /// KL weight the ensemble was trained with; 0 outside kfolden training.
    pub gamma: f64,
}

impl Checkpoint {
    /// Build the featurizer recorded in the checkpoint.
    pub fn build_featurizer(&self) -> Result<Featurizer> {
        self.featurizer.build()
    }

    /// Human-readable predictor kind, for logs and error messages.
    pub fn kind_name(&self) -> &'static str {
        self.predictor.kind_name()
    }

    fn validate(&self) -> Result<()> {
        if self.label_names.len() != self.predictor.num_labels() {
            return Err(Error::Checkpoint(format!(
                "{} label names recorded for a predictor over {} labels",
                self.label_names.len(),
                self.predictor.num_labels()
            )));
        }
        Ok(())
    }
}

/// Weights plus the shape needed to rebuild a classifier.
#[derive(Debug, Serialize, Deserialize)]
struct StoredModel {
    backbone: BackboneConfig,
    input_dim: usize,
    num_classes: usize,
    /// Flat row-major parameters, weights before biases per layer.
    params: Vec<f64>,
}

impl StoredModel {
    fn from_classifier(model: &Classifier) -> Self {
        let backbone = match model.kind {
            BackboneKind::Linear => BackboneConfig::linear(),
            BackboneKind::Mlp => BackboneConfig::mlp(model.hidden_dim, model.dropout_rate),
        };
        StoredModel {
            backbone,
            input_dim: model.input_dim,
            num_classes: model.num_classes,
            params: model.params().to_vec(),
        }
    }

    fn into_classifier(self) -> Result<Classifier> {
        Classifier::from_parts(
            self.backbone.kind,
            self.input_dim,
            self.backbone.hidden_dim,
            self.num_classes,
            self.backbone.dropout_rate,
            self.params,
        )
    }
}

/// `model.json` for a lone classifier.
#[derive(Debug, Serialize, Deserialize)]
struct SingleFile {
    format: String,
    model: StoredModel,
    featurizer: FeaturizerConfig,
    label_names: Vec<String>,
    seed: u64,
}

/// `ensemble.json` manifest for either ensemble flavor.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
enum EnsembleManifest {
    KfoldenEnsemble {
        k: usize,
        gamma: f64,
        label_names: Vec<String>,
        seed_base: u64,
        /// Seed each sub-model trained with, in masked-label order.
        seeds: Vec<u64>,
        featurizer: FeaturizerConfig,
    },
    PlainEnsemble {
        count: usize,
        label_names: Vec<String>,
        seed_base: u64,
        seeds: Vec<u64>,
        featurizer: FeaturizerConfig,
    },
}

const SINGLE_FORMAT: &str = "single-classifier";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Write a checkpoint directory, creating it if needed. Every file goes
/// through temp-then-rename, so a crash mid-save cannot leave a manifest
/// that points at missing or truncated members.
pub fn save_checkpoint(dir: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.validate()?;
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    match &checkpoint.predictor {
        TrainedPredictor::Single(model) => {
            let file = SingleFile {
                format: SINGLE_FORMAT.to_string(),
                model: StoredModel::from_classifier(model),
                featurizer: checkpoint.featurizer.clone(),
                label_names: checkpoint.label_names.clone(),
                seed: checkpoint.seed,
            };
            write_json(&dir.join("model.json"), &file)
        }
        TrainedPredictor::Vanilla(ensemble) => {
            for (i, model) in ensemble.models.iter().enumerate() {
                write_json(
                    &dir.join(format!("member_{i}.json")),
                    &StoredModel::from_classifier(model),
                )?;
            }
            let count = ensemble.models.len();
            let manifest = EnsembleManifest::PlainEnsemble {
                count,
                label_names: checkpoint.label_names.clone(),
                seed_base: checkpoint.seed,
                seeds: (0..count as u64)
                    .map(|i| checkpoint.seed.wrapping_add(i))
                    .collect(),
                featurizer: checkpoint.featurizer.clone(),
            };
            write_json(&dir.join("ensemble.json"), &manifest)
        }
        TrainedPredictor::KFolden(ensemble) => {
            for sub in ensemble.sub_models() {
                write_json(
                    &dir.join(format!("sub_{}.json", sub.masked_label)),
                    &StoredModel::from_classifier(&sub.model),
                )?;
            }
            let k = ensemble.num_labels;
            let manifest = EnsembleManifest::KfoldenEnsemble {
                k,
                gamma: ensemble.gamma,
                label_names: checkpoint.label_names.clone(),
                seed_base: checkpoint.seed,
                seeds: (0..k as u64)
                    .map(|i| checkpoint.seed.wrapping_add(i))
                    .collect(),
                featurizer: checkpoint.featurizer.clone(),
            };
            write_json(&dir.join("ensemble.json"), &manifest)
        }
    }
}

/// Load a checkpoint directory written by [`save_checkpoint`], rebuilding
/// and re-validating the predictor.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("ensemble.json");
    if manifest_path.exists() {
        return match read_json::<EnsembleManifest>(&manifest_path)? {
            EnsembleManifest::KfoldenEnsemble {
                k,
                gamma,
                label_names,
                seed_base,
                seeds,
                featurizer,
            } => {
                if seeds.len() != k {
                    return Err(Error::Checkpoint(format!(
                        "manifest lists {} seeds for k = {k}",
                        seeds.len()
                    )));
                }
                let mut sub_models = Vec::with_capacity(k);
                for masked in 0..k {
                    let stored: StoredModel = read_json(&dir.join(format!("sub_{masked}.json")))?;
                    sub_models.push(SubModel {
                        masked_label: masked,
                        model: stored.into_classifier()?,
                        label_order: (0..k).filter(|&l| l != masked).collect(),
                    });
                }
                let checkpoint = Checkpoint {
                    predictor: TrainedPredictor::KFolden(KFoldenEnsemble::new(
                        sub_models, gamma,
                    )?),
                    featurizer,
                    label_names,
                    seed: seed_base,
                    gamma,
                };
                checkpoint.validate()?;
                Ok(checkpoint)
            }
            EnsembleManifest::PlainEnsemble {
                count,
                label_names,
                seed_base,
                seeds,
                featurizer,
            } => {
                if count == 0 {
                    return Err(Error::Checkpoint("ensemble manifest lists no members".into()));
                }
                if seeds.len() != count {
                    return Err(Error::Checkpoint(format!(
                        "manifest lists {} seeds for {count} members",
                        seeds.len()
                    )));
                }
                let mut models = Vec::with_capacity(count);
                for i in 0..count {
                    let stored: StoredModel = read_json(&dir.join(format!("member_{i}.json")))?;
                    models.push(stored.into_classifier()?);
                }
                let first = models[0].num_classes;
                if models.iter().any(|m| m.num_classes != first) {
                    return Err(Error::Checkpoint(
                        "ensemble members disagree on class count".into(),
                    ));
                }
                let checkpoint = Checkpoint {
                    predictor: TrainedPredictor::Vanilla(VanillaEnsemble { models }),
                    featurizer,
                    label_names,
                    seed: seed_base,
                    gamma: 0.0,
                };
                checkpoint.validate()?;
                Ok(checkpoint)
            }
        };
    }

    let single_path = dir.join("model.json");
    if !single_path.exists() {
        return Err(Error::Checkpoint(format!(
            "{} holds neither ensemble.json nor model.json",
            dir.display()
        )));
    }
    let file: SingleFile = read_json(&single_path)?;
    if file.format != SINGLE_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unrecognized model format {:?}",
            file.format
        )));
    }
    let checkpoint = Checkpoint {
        predictor: TrainedPredictor::Single(file.model.into_classifier()?),
        featurizer: file.featurizer,
        label_names: file.label_names,
        seed: file.seed,
        gamma: 0.0,
    };
    checkpoint.validate()?;
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeaturizerConfig;
    use crate::kfolden::{train_kfolden, train_vanilla_ensemble, KFoldenConfig};
    use crate::net::{Dataset, TrainConfig};
    use crate::rng;

    fn tiny_dataset(num_classes: usize) -> Dataset {
        let mut rng = rng::seeded(11, "checkpoint-data");
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for label in 0..num_classes {
            for _ in 0..6 {
                let values: Vec<f64> = (0..5)
                    .map(|d| {
                        let base = if d == label % 5 { 1.0 } else { 0.0 };
                        base + 0.1 * rng::uniform_f64(&mut rng)
                    })
                    .collect();
                features.push(FeatureVector { values });
                labels.push(label);
            }
        }
        Dataset::new(features, labels, num_classes).unwrap()
    }

    fn featurizer_config() -> FeaturizerConfig {
        FeaturizerConfig::HashedBow {
            dim: 5,
            hash_seed: 0,
            hash: "fnv1a-64".into(),
        }
    }

    fn label_names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("label{i}")).collect()
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_round_trip_is_exact() {
        let data = tiny_dataset(3);
        let model = BackboneConfig::mlp(4, 0.2).build(5, 3, 7);
        let (model, _) = crate::net::train_classifier(model, &data, &quick_train(), 7).unwrap();
        let checkpoint = Checkpoint {
            predictor: TrainedPredictor::Single(model),
            featurizer: featurizer_config(),
            label_names: label_names(3),
            seed: 7,
            gamma: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &checkpoint).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, checkpoint);
    }

    #[test]
    fn kfolden_round_trip_is_exact() {
        let data = tiny_dataset(4);
        let config = KFoldenConfig {
            gamma: 1.0,
            backbone: BackboneConfig::linear(),
            train: quick_train(),
            seed_base: 3,
        };
        let (ensemble, _) = train_kfolden(&data, &config).unwrap();
        let checkpoint = Checkpoint {
            predictor: TrainedPredictor::KFolden(ensemble),
            featurizer: featurizer_config(),
            label_names: label_names(4),
            seed: 3,
            gamma: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &checkpoint).unwrap();
        for masked in 0..4 {
            assert!(dir.path().join(format!("sub_{masked}.json")).exists());
        }
        assert!(dir.path().join("ensemble.json").exists());
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, checkpoint);
    }

    #[test]
    fn vanilla_round_trip_is_exact() {
        let data = tiny_dataset(3);
        let (ensemble, _) = train_vanilla_ensemble(
            &data,
            2,
            &BackboneConfig::linear(),
            &quick_train(),
            9,
        )
        .unwrap();
        let checkpoint = Checkpoint {
            predictor: TrainedPredictor::Vanilla(ensemble),
            featurizer: featurizer_config(),
            label_names: label_names(3),
            seed: 9,
            gamma: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &checkpoint).unwrap();
        assert!(dir.path().join("member_0.json").exists());
        assert!(dir.path().join("member_1.json").exists());
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, checkpoint);
    }

    #[test]
    fn save_is_byte_stable() {
        let data = tiny_dataset(3);
        let model = BackboneConfig::linear().build(5, 3, 1);
        let (model, _) = crate::net::train_classifier(model, &data, &quick_train(), 1).unwrap();
        let checkpoint = Checkpoint {
            predictor: TrainedPredictor::Single(model),
            featurizer: featurizer_config(),
            label_names: label_names(3),
            seed: 1,
            gamma: 0.0,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(a.path(), &checkpoint).unwrap();
        save_checkpoint(b.path(), &checkpoint).unwrap();
        assert_eq!(
            fs::read(a.path().join("model.json")).unwrap(),
            fs::read(b.path().join("model.json")).unwrap()
        );
    }

    #[test]
    fn empty_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn truncated_params_are_rejected() {
        let data = tiny_dataset(3);
        let model = BackboneConfig::linear().build(5, 3, 2);
        let (model, _) = crate::net::train_classifier(model, &data, &quick_train(), 2).unwrap();
        let checkpoint = Checkpoint {
            predictor: TrainedPredictor::Single(model),
            featurizer: featurizer_config(),
            label_names: label_names(3),
            seed: 2,
            gamma: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &checkpoint).unwrap();
        let path = dir.path().join("model.json");
        let mut file: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let params = file["model"]["params"].as_array_mut().unwrap();
        params.pop();
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn missing_sub_model_file_is_rejected() {
        let data = tiny_dataset(4);
        let config = KFoldenConfig {
            gamma: 0.5,
            backbone: BackboneConfig::linear(),
            train: quick_train(),
            seed_base: 4,
        };
        let (ensemble, _) = train_kfolden(&data, &config).unwrap();
        let checkpoint = Checkpoint {
            predictor: TrainedPredictor::KFolden(ensemble),
            featurizer: featurizer_config(),
            label_names: label_names(4),
            seed: 4,
            gamma: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &checkpoint).unwrap();
        fs::remove_file(dir.path().join("sub_2.json")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn predictor_label_count_must_match_names() {
        let model = BackboneConfig::linear().build(5, 3, 0);
        let checkpoint = Checkpoint {
            predictor: TrainedPredictor::Single(model),
            featurizer: featurizer_config(),
            label_names: label_names(4),
            seed: 0,
            gamma: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(save_checkpoint(dir.path(), &checkpoint).is_err());
    }

    #[test]
    fn vanilla_mc_with_rate_zero_matches_deterministic() {
        let data = tiny_dataset(3);
        let (ensemble, _) = train_vanilla_ensemble(
            &data,
            2,
            &BackboneConfig::linear(),
            &quick_train(),
            5,
        )
        .unwrap();
        let predictor = TrainedPredictor::Vanilla(ensemble);
        let x = FeatureVector {
            values: vec![0.3, -0.1, 0.7, 0.0, 0.2],
        };
        let mut rng = rng::seeded(0, "mc");
        let mc = predictor.predict_mc(&x, 1.0, 4, &mut rng).unwrap();
        let det = predictor.predict(&x, 1.0).unwrap();
        assert_eq!(mc.probs, det.probs);
    }
}
