//! Leave-one-label-out ensemble training and prediction.
//!
//! For a k-label task, k sub-models are trained, each with one label masked:
//! its examples contribute a weighted divergence-from-uniform loss instead of
//! cross-entropy, teaching the sub-model to flatten its output on inputs
//! from outside its visible label set. At prediction time each sub-model's
//! (k-1)-class distribution is zero-padded at its masked position and the k
//! padded distributions are averaged, yielding a k-class distribution whose
//! maximum is naturally damped on out-of-distribution inputs.

use serde::{Deserialize, Serialize};

use crate::features::FeatureVector;
use crate::net::{
    train_classifier, train_joint, mc_average_forward, BackboneConfig, Classifier, Dataset,
    JointExample, ProbDist, TrainConfig, TrainLog,
};
use crate::rng::ChaCha8Rng;
use crate::{exec, Error, Result};

/// Configuration for leave-one-label-out ensemble training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldenConfig {
    /// Weight of the divergence-from-uniform loss on masked-label examples,
    /// in `[0, 1]`. At 0 masked examples are skipped entirely, making each
    /// sub-model's training identical to plain (k-1)-class training.
    pub gamma: f64,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    /// Sub-model i trains with seed `seed_base + i`.
    pub seed_base: u64,
}

impl KFoldenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0,1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn sub_model_seed(&self, masked_label: usize) -> u64 {
        self.seed_base.wrapping_add(masked_label as u64)
    }
}

/// One member of the ensemble: a (k-1)-class classifier plus the bookkeeping
/// tying its output dimensions back to global labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModel {
    pub masked_label: usize,
    /// Classifier over the k-1 visible labels.
    pub model: Classifier,
    /// Global label of each model output dimension, strictly ascending;
    /// never contains `masked_label`.
    pub label_order: Vec<usize>,
}

impl SubModel {
    /// Output dimension corresponding to a global label, if visible.
    pub fn visible_position(&self, global_label: usize) -> Option<usize> {
        self.label_order.binary_search(&global_label).ok()
    }

    fn validate(&self, num_labels: usize) -> Result<()> {
        let expected: Vec<usize> = (0..num_labels)
            .filter(|&l| l != self.masked_label)
            .collect();
        if self.label_order != expected {
            return Err(Error::Config(format!(
                "sub-model masking {} has label_order {:?}, expected {:?}",
                self.masked_label, self.label_order, expected
            )));
        }
        if self.model.num_classes != num_labels - 1 {
            return Err(Error::Config(format!(
                "sub-model masking {} covers {} classes, expected {}",
                self.masked_label,
                self.model.num_classes,
                num_labels - 1
            )));
        }
        Ok(())
    }
}

/// Insert a zero at the sub-model's masked position, lifting its
/// (k-1)-class distribution onto the full k-label space.
///
/// Entry `j` of `p` lands at global position `label_order[j]`; the masked
/// position holds exactly 0, so total mass is preserved.
pub fn pad_distribution(sub: &SubModel, p: &ProbDist) -> Result<ProbDist> {
    let k = sub.label_order.len() + 1;
    if p.num_classes() != k - 1 {
        return Err(Error::DimMismatch {
            expected: k - 1,
            got: p.num_classes(),
        });
    }
    let mut padded = vec![0.0; k];
    for (j, &global) in sub.label_order.iter().enumerate() {
        padded[global] = p.probs[j];
    }
    Ok(ProbDist { probs: padded })
}

/// The full leave-one-label-out ensemble: one sub-model per masked label.
#[derive(Debug, Clone, PartialEq)]
pub struct KFoldenEnsemble {
    /// Sub-model `i` masks label `i`.
    sub_models: Vec<SubModel>,
    pub num_labels: usize,
    pub gamma: f64,
}

impl KFoldenEnsemble {
    /// Assemble an ensemble, checking that the sub-models' masked labels are
    /// exactly `{0..k}` and each is shaped for k-1 visible labels. Sub-models
    /// may arrive in any order; they are stored sorted by masked label.
    pub fn new(mut sub_models: Vec<SubModel>, gamma: f64) -> Result<Self> {
        let k = sub_models.len();
        if k < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 labels, got {k}"
            )));
        }
        sub_models.sort_by_key(|s| s.masked_label);
        for (i, sub) in sub_models.iter().enumerate() {
            if sub.masked_label != i {
                return Err(Error::Config(format!(
                    "masked labels must cover 0..{k} exactly; missing {i}"
                )));
            }
            sub.validate(k)?;
        }
        Ok(KFoldenEnsemble {
            sub_models,
            num_labels: k,
            gamma,
        })
    }

    pub fn sub_models(&self) -> &[SubModel] {
        &self.sub_models
    }

    /// Deterministic ensemble prediction: average of the k zero-padded
    /// sub-model distributions, each computed at `temperature`.
    pub fn predict(&self, x: &FeatureVector, temperature: f64) -> Result<ProbDist> {
        let mut sum = vec![0.0; self.num_labels];
        for sub in &self.sub_models {
            let probs = sub.model.forward(x, temperature, None)?.probs;
            let padded = pad_distribution(sub, &probs)?;
            for (acc, p) in sum.iter_mut().zip(&padded.probs) {
                *acc += p;
            }
        }
        let k = self.num_labels as f64;
        Ok(ProbDist {
            probs: sum.into_iter().map(|p| p / k).collect(),
        })
    }

    /// Ensemble prediction with each sub-model's distribution averaged over
    /// `passes` stochastic dropout forwards (sub-models draw from `rng` in
    /// masked-label order). With dropout rate 0 or `passes == 1` this
    /// reduces to the single-pass path.
    pub fn predict_mc(
        &self,
        x: &FeatureVector,
        temperature: f64,
        passes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ProbDist> {
        let mut sum = vec![0.0; self.num_labels];
        for sub in &self.sub_models {
            let probs = mc_average_forward(&sub.model, x, temperature, passes, rng)?;
            let padded = pad_distribution(sub, &probs)?;
            for (acc, p) in sum.iter_mut().zip(&padded.probs) {
                *acc += p;
            }
        }
        let k = self.num_labels as f64;
        Ok(ProbDist {
            probs: sum.into_iter().map(|p| p / k).collect(),
        })
    }
}

/// Remap a global label to the sub-model output dimension used when
/// `masked_label` is removed.
fn remap_label(global: usize, masked_label: usize) -> usize {
    if global < masked_label {
        global
    } else {
        global - 1
    }
}

/// Train one leave-one-label-out sub-model.
///
/// Examples of visible labels contribute cross-entropy against their
/// remapped label; examples of the masked label are pushed toward the
/// uniform output with weight `gamma`, shuffled into the same mini-batches.
/// When `gamma == 0` masked examples are dropped from the schedule entirely,
/// so the run is exactly plain training on the visible labels.
pub fn train_sub_model(
    train: &Dataset,
    masked_label: usize,
    config: &KFoldenConfig,
) -> Result<(SubModel, TrainLog)> {
    config.validate()?;
    let k = train.num_classes;
    if k < 2 {
        return Err(Error::Config(format!(
            "leave-one-label-out training needs at least 2 labels, got {k}"
        )));
    }
    if masked_label >= k {
        return Err(Error::ClassOutOfRange(masked_label, k));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("sub-model training set".into()));
    }
    let input_dim = train.features[0].dim();
    if !train.labels.contains(&masked_label) {
        log::warn!(
            "masked label {masked_label} absent from the training set; \
             sub-model degenerates to plain training on the visible labels"
        );
    }

    let mut examples = Vec::with_capacity(train.len());
    for (features, &label) in train.features.iter().zip(&train.labels) {
        if label == masked_label {
            if config.gamma == 0.0 {
                continue;
            }
            examples.push(JointExample {
                features: features.clone(),
                target: None,
            });
        } else {
            examples.push(JointExample {
                features: features.clone(),
                target: Some(remap_label(label, masked_label)),
            });
        }
    }

    let seed = config.sub_model_seed(masked_label);
    let model = config.backbone.build(input_dim, k - 1, seed);
    let (model, log) = train_joint(model, &examples, config.gamma, &config.train, seed)?;
    let sub = SubModel {
        masked_label,
        model,
        label_order: (0..k).filter(|&l| l != masked_label).collect(),
    };
    Ok((sub, log))
}

/// Train the full ensemble: one sub-model per label, independently (and in
/// parallel when the `parallel` feature is on).
pub fn train_kfolden(
    train: &Dataset,
    config: &KFoldenConfig,
) -> Result<(KFoldenEnsemble, Vec<TrainLog>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("ensemble training set".into()));
    }
    let k = train.num_classes;
    let results = exec::map_indexed(k, |i| train_sub_model(train, i, config));
    assemble(results, config.gamma)
}

/// Sequential twin of [`train_kfolden`]; produces an identical ensemble and
/// exists for benchmarking and for checking that parallel training does not
/// change results.
pub fn train_kfolden_serial(
    train: &Dataset,
    config: &KFoldenConfig,
) -> Result<(KFoldenEnsemble, Vec<TrainLog>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("ensemble training set".into()));
    }
    let k = train.num_classes;
    let results = exec::map_indexed_serial(k, |i| train_sub_model(train, i, config));
    assemble(results, config.gamma)
}

fn assemble(
    results: Vec<Result<(SubModel, TrainLog)>>,
    gamma: f64,
) -> Result<(KFoldenEnsemble, Vec<TrainLog>)> {
    let mut subs = Vec::with_capacity(results.len());
    let mut logs = Vec::with_capacity(results.len());
    for result in results {
        let (sub, log) = result?;
        subs.push(sub);
        logs.push(log);
    }
    Ok((KFoldenEnsemble::new(subs, gamma)?, logs))
}

/// An ensemble of independently seeded full-label classifiers; prediction is
/// the plain average of member distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaEnsemble {
    pub models: Vec<Classifier>,
}

impl VanillaEnsemble {
    pub fn num_classes(&self) -> usize {
        self.models[0].num_classes
    }

    /// Mean of the member distributions at `temperature`.
    pub fn predict(&self, x: &FeatureVector, temperature: f64) -> Result<ProbDist> {
        let c = self.num_classes();
        let mut sum = vec![0.0; c];
        for model in &self.models {
            let probs = model.forward(x, temperature, None)?.probs;
            for (acc, p) in sum.iter_mut().zip(&probs.probs) {
                *acc += p;
            }
        }
        let n = self.models.len() as f64;
        Ok(ProbDist {
            probs: sum.into_iter().map(|p| p / n).collect(),
        })
    }
}

/// Train `count` full-label classifiers differing only in their seed
/// (`seed_base + member index`), in parallel when enabled.
pub fn train_vanilla_ensemble(
    train: &Dataset,
    count: usize,
    backbone: &BackboneConfig,
    train_config: &TrainConfig,
    seed_base: u64,
) -> Result<(VanillaEnsemble, Vec<TrainLog>)> {
    assert!(count >= 1, "ensemble needs at least one member");
    if train.is_empty() {
        return Err(Error::EmptyDataset("ensemble training set".into()));
    }
    let input_dim = train.features[0].dim();
    let results = exec::map_indexed(count, |i| {
        let seed = seed_base.wrapping_add(i as u64);
        let model = backbone.build(input_dim, train.num_classes, seed);
        train_classifier(model, train, train_config, seed)
    });
    let mut models = Vec::with_capacity(count);
    let mut logs = Vec::with_capacity(count);
    for result in results {
        let (model, log) = result?;
        models.push(model);
        logs.push(log);
    }
    Ok((VanillaEnsemble { models }, logs))
}
