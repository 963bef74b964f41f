//! Turning trained predictors into out-of-distribution scorers.
//!
//! Every detector emits an `ood_score` where higher means more
//! out-of-distribution: probability methods (max-softmax confidence,
//! temperature scaling, stochastic-dropout averaging, and the
//! leave-one-label-out ensemble) map confidence through `1 - max_prob`, and
//! the Mahalanobis family scores by minimum squared distance to class
//! centroids under a shared covariance. Fitting selects the temperature or
//! pass count on the OOD validation set by AUROC where the method calls for
//! it, fits any distance statistics on the ID validation set, and tunes the
//! acceptance threshold for detection accuracy on the configured tuning set.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedPredictor;
use crate::corpus::{write_atomic, BenchmarkSplit, Document};
use crate::features::{FeatureVector, Featurizer};
use crate::metrics::{auroc_from_scores, evaluate, MetricReport, Prediction, ScoredExample};
use crate::net::{Classifier, ProbDist};
use crate::{exec, rng, Error, Result};

/// Detection strategies: four single-model baselines and the
/// leave-one-label-out ensemble alone or combined with a post-hoc method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Msp,
    Scaling,
    Mahalanobis,
    Dropout,
    #[serde(rename = "kfolden")]
    KFolden,
    #[serde(rename = "kfolden-scaling")]
    KFoldenScaling,
    #[serde(rename = "kfolden-mahalanobis")]
    KFoldenMahalanobis,
    #[serde(rename = "kfolden-dropout")]
    KFoldenDropout,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Msp,
        Method::Scaling,
        Method::Mahalanobis,
        Method::Dropout,
        Method::KFolden,
        Method::KFoldenScaling,
        Method::KFoldenMahalanobis,
        Method::KFoldenDropout,
    ];

    /// Stable identifier used in configs, file names, and score exports.
    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Scaling => "scaling",
            Method::Mahalanobis => "mahalanobis",
            Method::Dropout => "dropout",
            Method::KFolden => "kfolden",
            Method::KFoldenScaling => "kfolden-scaling",
            Method::KFoldenMahalanobis => "kfolden-mahalanobis",
            Method::KFoldenDropout => "kfolden-dropout",
        }
    }

    /// Whether the method scores a leave-one-label-out ensemble.
    pub fn needs_ensemble(self) -> bool {
        matches!(
            self,
            Method::KFolden
                | Method::KFoldenScaling
                | Method::KFoldenMahalanobis
                | Method::KFoldenDropout
        )
    }

    /// Whether a softmax temperature is selected or applied.
    pub fn uses_scaling(self) -> bool {
        matches!(self, Method::Scaling | Method::KFoldenScaling)
    }

    /// Whether predictions average stochastic dropout forwards.
    pub fn uses_dropout(self) -> bool {
        matches!(self, Method::Dropout | Method::KFoldenDropout)
    }

    /// Whether the score is a distance rather than `1 - max_prob`.
    pub fn uses_mahalanobis(self) -> bool {
        matches!(self, Method::Mahalanobis | Method::KFoldenMahalanobis)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Which validation pool the acceptance threshold is tuned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningSet {
    /// ID validation examples only.
    IdValid,
    /// ID plus OOD validation examples.
    #[default]
    OodValid,
}

impl TuningSet {
    pub fn name(self) -> &'static str {
        match self {
            TuningSet::IdValid => "id_valid",
            TuningSet::OodValid => "ood_valid",
        }
    }
}

impl fmt::Display for TuningSet {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<TuningSet> {
        match s {
            "id_valid" => Ok(TuningSet::IdValid),
            "ood_valid" => Ok(TuningSet::OodValid),
            other => Err(Error::Config(format!(
                "unknown tuning set {other:?}; expected id_valid or ood_valid"
            ))),
        }
    }
}

/// What threshold tuning maximizes on the tuning set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneObjective {
    /// Fraction of tuning examples handled correctly: ID accepted plus OOD
    /// rejected.
    #[default]
    DetectionAccuracy,
}

/// Softmax temperatures searched when scaling methods select one.
pub const TEMPERATURE_GRID: [f64; 5] = [1.0, 10.0, 100.0, 1000.0, 5000.0];
/// Max-probability acceptance thresholds searched by probability methods.
pub const THRESHOLD_GRID: [f64; 6] = [0.0, 0.001, 0.01, 0.05, 0.1, 0.2];
/// Finer threshold grid for temperature-scaling methods, whose max
/// probabilities compress toward `1/C` at large temperatures.
pub const SCALING_THRESHOLD_GRID: [f64; 10] = [
    0.0, 0.0005, 0.001, 0.0015, 0.002, 0.005, 0.01, 0.05, 0.1, 0.2,
];
/// Stochastic pass counts searched when dropout methods select one.
pub const DROPOUT_PASS_GRID: [usize; 5] = [5, 10, 15, 20, 30];
/// Quantiles of ID tuning distances forming the Mahalanobis threshold grid.
pub const DISTANCE_QUANTILES: [f64; 5] = [0.80, 0.85, 0.90, 0.95, 0.99];

/// How to build one detector. `None` hyperparameters are filled in by
/// [`fit`]: the temperature and pass count by AUROC on OOD-valid, the
/// threshold by detection accuracy on the tuning set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub method: Method,
    /// Acceptance cutoff; tuned when absent.
    pub threshold: Option<f64>,
    /// Softmax temperature (scaling methods only); selected when absent.
    pub temperature: Option<f64>,
    /// Stochastic forwards per example (dropout methods only); selected when
    /// absent.
    pub dropout_passes: Option<usize>,
    pub tuning_set: TuningSet,
    pub objective: TuneObjective,
    /// Seed for per-example dropout draws while scoring.
    pub seed: u64,
    pub temperature_grid: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    pub passes_grid: Vec<usize>,
}

impl DetectorConfig {
    /// Config with every hyperparameter left to be tuned over the default
    /// grids (scaling methods search the finer threshold grid).
    pub fn new(method: Method, seed: u64) -> Self {
        DetectorConfig {
            method,
            threshold: None,
            temperature: None,
            dropout_passes: None,
            tuning_set: TuningSet::default(),
            objective: TuneObjective::default(),
            seed,
            temperature_grid: TEMPERATURE_GRID.to_vec(),
            threshold_grid: if method.uses_scaling() {
                SCALING_THRESHOLD_GRID.to_vec()
            } else {
                THRESHOLD_GRID.to_vec()
            },
            passes_grid: DROPOUT_PASS_GRID.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperature {
            if !self.method.uses_scaling() {
                return Err(Error::Config(format!(
                    "temperature applies only to scaling methods, not {}",
                    self.method
                )));
            }
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        if let Some(p) = self.dropout_passes {
            if !self.method.uses_dropout() {
                return Err(Error::Config(format!(
                    "dropout_passes applies only to dropout methods, not {}",
                    self.method
                )));
            }
            if p == 0 {
                return Err(Error::Config("dropout_passes must be at least 1".into()));
            }
        }
        if let Some(phi) = self.threshold {
            let ok = if self.method.uses_mahalanobis() {
                phi.is_finite() && phi >= 0.0
            } else {
                (0.0..=1.0).contains(&phi)
            };
            if !ok {
                return Err(Error::Config(format!(
                    "threshold {phi} is out of range for {}",
                    self.method
                )));
            }
        }
        if self.method.uses_scaling() && self.temperature.is_none() {
            if self.temperature_grid.is_empty() {
                return Err(Error::Config("temperature grid is empty".into()));
            }
            if let Some(bad) = self
                .temperature_grid
                .iter()
                .find(|t| !(t.is_finite() && **t > 0.0))
            {
                return Err(Error::Config(format!(
                    "temperature grid entry {bad} must be positive"
                )));
            }
        }
        if self.method.uses_dropout() && self.dropout_passes.is_none() {
            if self.passes_grid.is_empty() {
                return Err(Error::Config("dropout pass grid is empty".into()));
            }
            if self.passes_grid.contains(&0) {
                return Err(Error::Config("dropout pass grid entry 0 is invalid".into()));
            }
        }
        if self.threshold.is_none() && !self.method.uses_mahalanobis() {
            if self.threshold_grid.is_empty() {
                return Err(Error::Config("threshold grid is empty".into()));
            }
            if let Some(bad) = self
                .threshold_grid
                .iter()
                .find(|phi| !(0.0..=1.0).contains(*phi))
            {
                return Err(Error::Config(format!(
                    "threshold grid entry {bad} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-class centroids and a shared covariance over a predictor's
/// penultimate representation, with the factorization needed to score by
/// squared Mahalanobis distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisStats {
    /// Per-class mean representation.
    pub centroids: Vec<Vec<f64>>,
    /// Per-class example counts.
    pub counts: Vec<usize>,
    /// Shared covariance before regularization, row-major `dim x dim`.
    pub covariance: Vec<f64>,
    /// Diagonal regularization added before factorization.
    pub epsilon: f64,
    dim: usize,
    /// Lower-triangular Cholesky factor of `covariance + epsilon * I`.
    chol: Vec<f64>,
}

impl MahalanobisStats {
    /// Fit centroids and the shared covariance from representation vectors.
    ///
    /// The covariance pools within-class scatter over all examples:
    /// `(1/N) * sum_c sum_{x in c} (x - mu_c)(x - mu_c)^T`, then
    /// `epsilon = max(1e-6 * trace / dim, 1e-12)` is added to the diagonal
    /// before factorization, so even degenerate scatter (single points per
    /// class) stays positive definite.
    pub fn fit(representations: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        if representations.is_empty() {
            return Err(Error::EmptyDataset(
                "covariance fitting requires examples".into(),
            ));
        }
        if representations.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} representations but {} labels",
                representations.len(),
                labels.len()
            )));
        }
        let dim = representations[0].len();
        if dim == 0 {
            return Err(Error::Config("zero-dimensional representation".into()));
        }
        for r in representations {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::Config("non-finite representation".into()));
            }
        }
        let mut counts = vec![0usize; num_classes];
        for &label in labels {
            if label >= num_classes {
                return Err(Error::ClassOutOfRange(label, num_classes));
            }
            counts[label] += 1;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(missing));
        }

        let mut centroids = vec![vec![0.0; dim]; num_classes];
        for (r, &label) in representations.iter().zip(labels) {
            for (acc, v) in centroids[label].iter_mut().zip(r) {
                *acc += v;
            }
        }
        for (centroid, &count) in centroids.iter_mut().zip(&counts) {
            for v in centroid.iter_mut() {
                *v /= count as f64;
            }
        }

        let mut covariance = vec![0.0; dim * dim];
        let mut residual = vec![0.0; dim];
        for (r, &label) in representations.iter().zip(labels) {
            for (d, (v, mu)) in residual.iter_mut().zip(r.iter().zip(&centroids[label])) {
                *d = v - mu;
            }
            for a in 0..dim {
                let ra = residual[a];
                for b in 0..dim {
                    covariance[a * dim + b] += ra * residual[b];
                }
            }
        }
        let n = representations.len() as f64;
        for v in covariance.iter_mut() {
            *v /= n;
        }

        let trace: f64 = (0..dim).map(|d| covariance[d * dim + d]).sum();
        let epsilon = (1e-6 * trace / dim as f64).max(1e-12);
        let mut regularized = covariance.clone();
        for d in 0..dim {
            regularized[d * dim + d] += epsilon;
        }
        let chol = cholesky_lower(&regularized, dim)?;

        Ok(MahalanobisStats {
            centroids,
            counts,
            covariance,
            epsilon,
            dim,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Minimum over classes of the squared Mahalanobis distance to that
    /// class's centroid; higher means more out-of-distribution.
    ///
    /// Each distance solves `L y = x - mu_c` against the stored Cholesky
    /// factor and returns `|y|^2`; the covariance is never inverted.
    pub fn score(&self, representation: &[f64]) -> Result<f64> {
        if representation.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: representation.len(),
            });
        }
        let mut best = f64::INFINITY;
        let mut diff = vec![0.0; self.dim];
        let mut solved = vec![0.0; self.dim];
        for centroid in &self.centroids {
            for (d, (v, mu)) in diff.iter_mut().zip(representation.iter().zip(centroid)) {
                *d = v - mu;
            }
            forward_substitute(&self.chol, self.dim, &diff, &mut solved);
            let distance: f64 = solved.iter().map(|y| y * y).sum();
            if distance < best {
                best = distance;
            }
        }
        Ok(best)
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky_lower(matrix: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut lower = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut sum = matrix[i * dim + j];
            for k in 0..j {
                sum -= lower[i * dim + k] * lower[j * dim + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite(i));
                }
                lower[i * dim + i] = sum.sqrt();
            } else {
                lower[i * dim + j] = sum / lower[j * dim + j];
            }
        }
    }
    Ok(lower)
}

/// Solve `L y = b` for lower-triangular `L`, writing `y` into `out`.
fn forward_substitute(lower: &[f64], dim: usize, b: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        let mut sum = b[i];
        for k in 0..i {
            sum -= lower[i * dim + k] * out[k];
        }
        out[i] = sum / lower[i * dim + i];
    }
}

/// Fit Mahalanobis statistics from labeled feature vectors through a
/// classifier's penultimate representation.
pub fn fit_mahalanobis(
    model: &Classifier,
    examples: &[(FeatureVector, usize)],
) -> Result<MahalanobisStats> {
    let mut representations = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for (x, label) in examples {
        representations.push(model.forward(x, 1.0, None)?.penultimate);
        labels.push(*label);
    }
    MahalanobisStats::fit(&representations, &labels, model.num_classes)
}

/// Confidence-based score for one distribution: `(1 - max_prob, argmax)`,
/// ties broken toward the lowest index.
pub fn msp_from_dist(p: &ProbDist) -> (f64, usize) {
    (1.0 - p.max_prob(), p.argmax())
}

/// Direction of the acceptance comparison when tuning a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcceptRule {
    /// Accept when the statistic is at least the threshold (max-prob floor).
    AtLeast,
    /// Accept when the statistic is at most the threshold (distance ceiling).
    AtMost,
}

/// Pick the grid value maximizing detection accuracy — the fraction of
/// tuning examples correctly accepted (ID) or rejected (OOD) — with ties
/// going to the smallest value. `stats` pairs each example's acceptance
/// statistic with its OOD truth flag.
pub fn tune_threshold(stats: &[(f64, bool)], grid: &[f64], rule: AcceptRule) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Config("threshold tuning needs a non-empty tuning set".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let mut candidates = grid.to_vec();
    candidates.sort_by(|a, b| a.total_cmp(b));
    let mut best = candidates[0];
    let mut best_correct = 0usize;
    let mut first = true;
    for &threshold in &candidates {
        let correct = stats
            .iter()
            .filter(|(stat, is_ood)| {
                let accept = match rule {
                    AcceptRule::AtLeast => *stat >= threshold,
                    AcceptRule::AtMost => *stat <= threshold,
                };
                accept != *is_ood
            })
            .count();
        if first || correct > best_correct {
            best = threshold;
            best_correct = correct;
            first = false;
        }
    }
    Ok(best)
}

/// A detector with all hyperparameters resolved, ready to score examples.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDetector {
    pub method: Method,
    /// Softmax temperature applied when scoring; 1 outside scaling methods.
    pub temperature: f64,
    /// Stochastic forwards per example; 1 outside dropout methods.
    pub dropout_passes: usize,
    /// Acceptance cutoff: a max-prob floor for probability methods, a
    /// distance ceiling for the Mahalanobis family.
    pub threshold: f64,
    /// Which validation pool the threshold came from.
    pub tuning_set: TuningSet,
    stats: Option<MahalanobisStats>,
    /// Per-sub-model stats in masked-label order (kfolden-mahalanobis).
    sub_stats: Vec<MahalanobisStats>,
    seed: u64,
}

/// The detector's verdict on one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Higher means more out-of-distribution.
    pub ood_score: f64,
    /// Argmax label if accepted as in-distribution, else `Rejected`.
    pub predicted_label: Prediction,
    pub max_prob: f64,
    pub is_ood_truth: bool,
}

/// One exported score line: verdict plus example identity and method tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub ood_score: f64,
    pub predicted_label: Prediction,
    pub max_prob: f64,
    pub is_ood_truth: bool,
    pub method: Method,
}

fn check_compatible(method: Method, predictor: &TrainedPredictor) -> Result<()> {
    let ok = match predictor {
        TrainedPredictor::Single(_) => !method.needs_ensemble(),
        TrainedPredictor::Vanilla(_) => {
            !method.needs_ensemble() && !method.uses_mahalanobis()
        }
        TrainedPredictor::KFolden(_) => method.needs_ensemble(),
    };
    if ok {
        Ok(())
    } else {
        let kind = match predictor {
            TrainedPredictor::Single(_) => "a single classifier",
            TrainedPredictor::Vanilla(_) => "a plain ensemble",
            TrainedPredictor::KFolden(_) => "a leave-one-label-out ensemble",
        };
        Err(Error::Config(format!(
            "method {method} cannot score {kind}"
        )))
    }
}

/// Dropout stream name: one generator per (pass count, example), so scores
/// are reproducible example-by-example and unchanged by batch order.
fn mc_stream(passes: usize, id: &str) -> String {
    format!("mc-{passes}-{id}")
}

struct ValidPool {
    features: Vec<FeatureVector>,
    ids: Vec<String>,
    labels: Vec<usize>,
    /// OOD truth per entry; ID examples come first.
    is_ood: Vec<bool>,
    id_count: usize,
}

fn featurize_pool(
    featurizer: &Featurizer,
    id_docs: &[Document],
    ood_docs: &[Document],
) -> ValidPool {
    let mut docs: Vec<&Document> = id_docs.iter().collect();
    docs.extend(ood_docs.iter());
    let features = exec::map_slice(&docs, |d| featurizer.featurize(&d.text));
    ValidPool {
        features,
        ids: docs.iter().map(|d| d.id.clone()).collect(),
        labels: docs.iter().map(|d| d.label).collect(),
        is_ood: (0..docs.len()).map(|i| i >= id_docs.len()).collect(),
        id_count: id_docs.len(),
    }
}

fn select_temperature(
    predictor: &TrainedPredictor,
    pool: &ValidPool,
    grid: &[f64],
) -> Result<f64> {
    let mut candidates = grid.to_vec();
    candidates.sort_by(|a, b| a.total_cmp(b));
    let mut best = candidates[0];
    let mut best_auroc = f64::NEG_INFINITY;
    for &t in &candidates {
        let scores = map_scores(&pool.features, |x| {
            predictor.predict(x, t).map(|p| 1.0 - p.max_prob())
        })?;
        let auroc = auroc_from_scores(scores.into_iter().zip(pool.is_ood.iter().copied()))?;
        if auroc > best_auroc {
            best = t;
            best_auroc = auroc;
        }
    }
    Ok(best)
}

fn select_passes(
    predictor: &TrainedPredictor,
    pool: &ValidPool,
    grid: &[usize],
    seed: u64,
) -> Result<usize> {
    let mut candidates = grid.to_vec();
    candidates.sort_unstable();
    let mut best = candidates[0];
    let mut best_auroc = f64::NEG_INFINITY;
    for &passes in &candidates {
        let scores = map_scores_indexed(&pool.features, |i, x| {
            let mut rng = rng::seeded(seed, &mc_stream(passes, &pool.ids[i]));
            predictor
                .predict_mc(x, 1.0, passes, &mut rng)
                .map(|p| 1.0 - p.max_prob())
        })?;
        let auroc = auroc_from_scores(scores.into_iter().zip(pool.is_ood.iter().copied()))?;
        if auroc > best_auroc {
            best = passes;
            best_auroc = auroc;
        }
    }
    Ok(best)
}

fn map_scores<F>(features: &[FeatureVector], f: F) -> Result<Vec<f64>>
where
    F: Fn(&FeatureVector) -> Result<f64> + Sync + Send,
{
    exec::map_slice(features, f).into_iter().collect()
}

fn map_scores_indexed<F>(features: &[FeatureVector], f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &FeatureVector) -> Result<f64> + Sync + Send,
{
    exec::map_indexed(features.len(), |i| f(i, &features[i]))
        .into_iter()
        .collect()
}

fn fit_stats_for_method(
    method: Method,
    predictor: &TrainedPredictor,
    pool: &ValidPool,
) -> Result<(Option<MahalanobisStats>, Vec<MahalanobisStats>)> {
    if !method.uses_mahalanobis() {
        return Ok((None, Vec::new()));
    }
    let id_features = &pool.features[..pool.id_count];
    let id_labels = &pool.labels[..pool.id_count];
    match predictor {
        TrainedPredictor::Single(model) => {
            let representations: Result<Vec<Vec<f64>>> =
                exec::map_slice(id_features, |x| {
                    model.forward(x, 1.0, None).map(|pass| pass.penultimate)
                })
                .into_iter()
                .collect();
            let stats =
                MahalanobisStats::fit(&representations?, id_labels, model.num_classes)?;
            Ok((Some(stats), Vec::new()))
        }
        TrainedPredictor::KFolden(ensemble) => {
            let k = ensemble.num_labels;
            let mut per_class = vec![0usize; k];
            for &label in id_labels {
                if label >= k {
                    return Err(Error::ClassOutOfRange(label, k));
                }
                per_class[label] += 1;
            }
            if let Some(missing) = per_class.iter().position(|&c| c == 0) {
                return Err(Error::EmptyClass(missing));
            }
            let mut sub_stats = Vec::with_capacity(k);
            for sub in ensemble.sub_models() {
                let masked = sub.masked_label;
                let mut representations = Vec::new();
                let mut labels = Vec::new();
                for (x, &label) in id_features.iter().zip(id_labels) {
                    if label == masked {
                        continue;
                    }
                    representations.push(sub.model.forward(x, 1.0, None)?.penultimate);
                    labels.push(if label < masked { label } else { label - 1 });
                }
                sub_stats.push(MahalanobisStats::fit(&representations, &labels, k - 1)?);
            }
            Ok((None, sub_stats))
        }
        TrainedPredictor::Vanilla(_) => Err(Error::Config(
            "distance statistics need a single classifier or a leave-one-label-out ensemble"
                .into(),
        )),
    }
}

/// Resolve a detector against a trained predictor and a benchmark split:
/// select the temperature or pass count on OOD-valid by AUROC when the
/// method needs one, fit distance statistics on ID-valid, and tune the
/// acceptance threshold on the configured tuning set.
pub fn fit(
    config: &DetectorConfig,
    predictor: &TrainedPredictor,
    featurizer: &Featurizer,
    split: &BenchmarkSplit,
) -> Result<FittedDetector> {
    config.validate()?;
    check_compatible(config.method, predictor)?;
    if split.id_valid.is_empty() {
        return Err(Error::Config("detector fitting needs ID validation examples".into()));
    }
    let pool = featurize_pool(featurizer, &split.id_valid, &split.ood_valid);

    let needs_ood_valid = (config.method.uses_scaling() && config.temperature.is_none())
        || (config.method.uses_dropout() && config.dropout_passes.is_none())
        || (config.threshold.is_none() && config.tuning_set == TuningSet::OodValid);
    if needs_ood_valid && split.ood_valid.is_empty() {
        return Err(Error::Config(
            "hyperparameter selection on ood_valid needs OOD validation examples".into(),
        ));
    }

    let temperature = if config.method.uses_scaling() {
        match config.temperature {
            Some(t) => t,
            None => select_temperature(predictor, &pool, &config.temperature_grid)?,
        }
    } else {
        1.0
    };
    let dropout_passes = if config.method.uses_dropout() {
        match config.dropout_passes {
            Some(p) => p,
            None => select_passes(predictor, &pool, &config.passes_grid, config.seed)?,
        }
    } else {
        1
    };
    let (stats, sub_stats) = fit_stats_for_method(config.method, predictor, &pool)?;

    let mut detector = FittedDetector {
        method: config.method,
        temperature,
        dropout_passes,
        threshold: f64::NAN,
        tuning_set: config.tuning_set,
        stats,
        sub_stats,
        seed: config.seed,
    };

    detector.threshold = match config.threshold {
        Some(phi) => phi,
        None => {
            let tuning_len = match config.tuning_set {
                TuningSet::IdValid => pool.id_count,
                TuningSet::OodValid => pool.features.len(),
            };
            let mut stats_with_truth = Vec::with_capacity(tuning_len);
            for i in 0..tuning_len {
                let verdict = detector.score_features(predictor, &pool.features[i], &pool.ids[i])?;
                let stat = if config.method.uses_mahalanobis() {
                    verdict.0
                } else {
                    verdict.1
                };
                stats_with_truth.push((stat, pool.is_ood[i]));
            }
            if config.method.uses_mahalanobis() {
                let id_distances: Vec<f64> = stats_with_truth[..pool.id_count]
                    .iter()
                    .map(|(d, _)| *d)
                    .collect();
                let grid = distance_grid(&id_distances);
                tune_threshold(&stats_with_truth, &grid, AcceptRule::AtMost)?
            } else {
                tune_threshold(&stats_with_truth, &config.threshold_grid, AcceptRule::AtLeast)?
            }
        }
    };
    Ok(detector)
}

/// Candidate distance ceilings: upper quantiles of the ID tuning distances.
fn distance_grid(id_distances: &[f64]) -> Vec<f64> {
    let mut sorted = id_distances.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut grid: Vec<f64> = DISTANCE_QUANTILES
        .iter()
        .map(|q| {
            let rank = (q * n as f64).ceil() as usize;
            sorted[rank.clamp(1, n) - 1]
        })
        .collect();
    grid.dedup();
    grid
}

impl FittedDetector {
    /// Raw per-example quantities before the acceptance rule:
    /// `(ood_score, max_prob, argmax)`.
    fn score_features(
        &self,
        predictor: &TrainedPredictor,
        x: &FeatureVector,
        id: &str,
    ) -> Result<(f64, f64, usize)> {
        let probs = if self.method.uses_dropout() {
            let mut rng = rng::seeded(self.seed, &mc_stream(self.dropout_passes, id));
            predictor.predict_mc(x, self.temperature, self.dropout_passes, &mut rng)?
        } else {
            predictor.predict(x, self.temperature)?
        };
        let (confidence_score, argmax) = msp_from_dist(&probs);
        let max_prob = probs.max_prob();
        let ood_score = if self.method.uses_mahalanobis() {
            match (&self.stats, predictor) {
                (Some(stats), TrainedPredictor::Single(model)) => {
                    stats.score(&model.forward(x, 1.0, None)?.penultimate)?
                }
                (None, TrainedPredictor::KFolden(ensemble))
                    if !self.sub_stats.is_empty() =>
                {
                    let mut total = 0.0;
                    for (sub, stats) in ensemble.sub_models().iter().zip(&self.sub_stats) {
                        total += stats.score(&sub.model.forward(x, 1.0, None)?.penultimate)?;
                    }
                    total / self.sub_stats.len() as f64
                }
                _ => {
                    return Err(Error::Config(format!(
                        "detector {} has no fitted distance statistics for this predictor",
                        self.method
                    )))
                }
            }
        } else {
            confidence_score
        };
        Ok((ood_score, max_prob, argmax))
    }

    /// Score one document: compute the OOD score and apply the acceptance
    /// rule (max-prob floor, or distance ceiling for Mahalanobis methods).
    pub fn score_document(
        &self,
        predictor: &TrainedPredictor,
        featurizer: &Featurizer,
        doc: &Document,
        is_ood_truth: bool,
    ) -> Result<DetectionResult> {
        let x = featurizer.featurize(&doc.text);
        let (ood_score, max_prob, argmax) = self.score_features(predictor, &x, &doc.id)?;
        let accepted = if self.method.uses_mahalanobis() {
            ood_score <= self.threshold
        } else {
            max_prob >= self.threshold
        };
        Ok(DetectionResult {
            ood_score,
            predicted_label: if accepted {
                Prediction::Label(argmax)
            } else {
                Prediction::Rejected
            },
            max_prob,
            is_ood_truth,
        })
    }

    /// Score a batch of documents sharing one truth flag, in input order.
    pub fn score_documents(
        &self,
        predictor: &TrainedPredictor,
        featurizer: &Featurizer,
        docs: &[Document],
        is_ood_truth: bool,
    ) -> Result<Vec<DetectionResult>> {
        exec::map_slice(docs, |doc| {
            self.score_document(predictor, featurizer, doc, is_ood_truth)
        })
        .into_iter()
        .collect()
    }
}

/// Score `id_test` then `ood_test`, producing export records alongside the
/// metric inputs (which carry ground-truth labels for ID accuracy).
pub fn score_test_sets(
    detector: &FittedDetector,
    predictor: &TrainedPredictor,
    featurizer: &Featurizer,
    split: &BenchmarkSplit,
) -> Result<(Vec<ScoreRecord>, Vec<ScoredExample>)> {
    let mut records = Vec::with_capacity(split.id_test.len() + split.ood_test.len());
    let mut scored = Vec::with_capacity(records.capacity());
    for (docs, is_ood) in [(&split.id_test, false), (&split.ood_test, true)] {
        let results = detector.score_documents(predictor, featurizer, docs, is_ood)?;
        for (doc, result) in docs.iter().zip(results) {
            records.push(ScoreRecord {
                id: doc.id.clone(),
                ood_score: result.ood_score,
                predicted_label: result.predicted_label,
                max_prob: result.max_prob,
                is_ood_truth: is_ood,
                method: detector.method,
            });
            scored.push(ScoredExample {
                ood_score: result.ood_score,
                max_prob: result.max_prob,
                predicted_label: result.predicted_label,
                is_ood_truth: is_ood,
                true_label: (!is_ood).then_some(doc.label),
            });
        }
    }
    Ok((records, scored))
}

/// Score the test sets and reduce them to a metric report.
pub fn evaluate_detector(
    detector: &FittedDetector,
    predictor: &TrainedPredictor,
    featurizer: &Featurizer,
    split: &BenchmarkSplit,
) -> Result<(MetricReport, Vec<ScoreRecord>)> {
    let (records, scored) = score_test_sets(detector, predictor, featurizer, split)?;
    let report = evaluate(&scored)?;
    Ok((report, records))
}

/// Write score records as one JSON object per line, atomically.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Read score records written by [`write_scores`].
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
