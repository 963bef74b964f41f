//! Classifier backbones with analytic gradients and an Adam trainer.
//!
//! Two small backbones are provided: a linear softmax classifier and a
//! one-hidden-layer tanh MLP with inverted dropout. Everything runs in
//! double precision with hand-derived gradients, so training is exactly
//! reproducible from a seed and gradients can be checked against finite
//! differences.

// Indexed loops here mirror the flat row-major parameter layout.
#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::features::{FeatureVector, Featurizer};
use crate::rng::{self, ChaCha8Rng};
use crate::{exec, Error, Result};

/// Floor applied to probabilities inside logarithms.
const LOG_FLOOR: f64 = 1e-12;

/// Backbone architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Linear,
    Mlp,
}

/// Serializable architecture description, enough to rebuild a fresh
/// classifier for any (input_dim, num_classes) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Hidden width; required for `Mlp`, ignored for `Linear`.
    #[serde(default)]
    pub hidden_dim: usize,
    /// Hidden-layer dropout probability; ignored for `Linear`.
    #[serde(default)]
    pub dropout_rate: f64,
}

impl BackboneConfig {
    pub fn linear() -> Self {
        BackboneConfig {
            kind: BackboneKind::Linear,
            hidden_dim: 0,
            dropout_rate: 0.0,
        }
    }

    pub fn mlp(hidden_dim: usize, dropout_rate: f64) -> Self {
        BackboneConfig {
            kind: BackboneKind::Mlp,
            hidden_dim,
            dropout_rate,
        }
    }

    /// Instantiate a freshly initialized classifier.
    pub fn build(&self, input_dim: usize, num_classes: usize, seed: u64) -> Classifier {
        match self.kind {
            BackboneKind::Linear => Classifier::new_linear(input_dim, num_classes, seed),
            BackboneKind::Mlp => Classifier::new_mlp(
                input_dim,
                self.hidden_dim,
                num_classes,
                self.dropout_rate,
                seed,
            ),
        }
    }
}

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    pub probs: Vec<f64>,
}

impl ProbDist {
    pub fn uniform(num_classes: usize) -> Self {
        ProbDist {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidDistribution(format!(
                "entries outside [0,1]: {:?}",
                self.probs
            )));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A classifier with a flat parameter vector.
///
/// Parameter layout (row-major):
/// - `Linear`: class weights `C x D`, then `C` biases.
/// - `Mlp`: hidden weights `H x D`, `H` hidden biases, output weights
///   `C x H`, `C` output biases.
///
/// The struct holds no random state: dropout draws come from a generator the
/// caller passes to [`Classifier::forward`], so inference stays deterministic
/// and callers control exactly which stream feeds each stochastic pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub kind: BackboneKind,
    pub input_dim: usize,
    /// Hidden width; 0 for the linear backbone.
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Hidden-layer dropout probability; 0 for the linear backbone.
    pub dropout_rate: f64,
    params: Vec<f64>,
}

impl Classifier {
    /// Linear softmax classifier with Glorot-uniform weights, zero biases.
    ///
    /// A single class is permitted: the model then outputs the constant
    /// distribution `[1.0]`. It arises as the sub-model of a two-label
    /// leave-one-label-out ensemble.
    pub fn new_linear(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        assert!(input_dim >= 1, "input_dim must be positive");
        assert!(num_classes >= 1, "need at least 1 class");
        let mut rng = rng::seeded(seed, "init");
        let limit = (6.0 / (input_dim + num_classes) as f64).sqrt();
        let mut params = Vec::with_capacity(num_classes * (input_dim + 1));
        for _ in 0..num_classes * input_dim {
            params.push(rng::uniform_symmetric(&mut rng, limit));
        }
        params.extend(std::iter::repeat_n(0.0, num_classes));
        Classifier {
            kind: BackboneKind::Linear,
            input_dim,
            hidden_dim: 0,
            num_classes,
            dropout_rate: 0.0,
            params,
        }
    }

    /// One-hidden-layer tanh MLP with inverted dropout on the hidden layer.
    pub fn new_mlp(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Self {
        assert!(input_dim >= 1, "input_dim must be positive");
        assert!(hidden_dim >= 1, "hidden_dim must be positive");
        assert!(num_classes >= 1, "need at least 1 class");
        assert!(
            (0.0..1.0).contains(&dropout_rate),
            "dropout_rate must lie in [0,1)"
        );
        let mut rng = rng::seeded(seed, "init");
        let mut params = Vec::with_capacity(Self::mlp_param_count(
            input_dim, hidden_dim, num_classes,
        ));
        let limit1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        for _ in 0..hidden_dim * input_dim {
            params.push(rng::uniform_symmetric(&mut rng, limit1));
        }
        params.extend(std::iter::repeat_n(0.0, hidden_dim));
        let limit2 = (6.0 / (hidden_dim + num_classes) as f64).sqrt();
        for _ in 0..num_classes * hidden_dim {
            params.push(rng::uniform_symmetric(&mut rng, limit2));
        }
        params.extend(std::iter::repeat_n(0.0, num_classes));
        Classifier {
            kind: BackboneKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
            dropout_rate,
            params,
        }
    }

    fn mlp_param_count(input_dim: usize, hidden_dim: usize, num_classes: usize) -> usize {
        hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes
    }

    /// Rebuild a classifier from stored parts, validating shape and
    /// finiteness (used when loading checkpoints).
    pub fn from_parts(
        kind: BackboneKind,
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        dropout_rate: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = match kind {
            BackboneKind::Linear => num_classes * (input_dim + 1),
            BackboneKind::Mlp => Self::mlp_param_count(input_dim, hidden_dim, num_classes),
        };
        if num_classes < 1 {
            return Err(Error::Checkpoint(format!(
                "classifier needs at least 1 class, found {num_classes}"
            )));
        }
        if kind == BackboneKind::Mlp && hidden_dim == 0 {
            return Err(Error::Checkpoint("mlp backbone with hidden_dim 0".into()));
        }
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture (expected {expected})",
                params.len()
            )));
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Checkpoint(format!(
                "dropout_rate {dropout_rate} outside [0,1)"
            )));
        }
        Ok(Classifier {
            kind,
            input_dim,
            hidden_dim,
            num_classes,
            dropout_rate,
            params,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Compute class probabilities for `x` at the given softmax temperature.
    ///
    /// Pass a generator to enable hidden-layer dropout (training / stochastic
    /// scoring); pass `None` for the deterministic inference path. Dropout
    /// rate 0 never draws from the generator, so it is bit-identical to the
    /// deterministic path.
    pub fn forward(
        &self,
        x: &FeatureVector,
        temperature: f64,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        assert!(temperature > 0.0, "temperature must be positive");
        if x.dim() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                got: x.dim(),
            });
        }
        let (c, d, h) = (self.num_classes, self.input_dim, self.hidden_dim);
        match self.kind {
            BackboneKind::Linear => {
                let mut logits = vec![0.0; c];
                for class in 0..c {
                    let row = &self.params[class * d..(class + 1) * d];
                    let bias = self.params[c * d + class];
                    logits[class] = bias
                        + row
                            .iter()
                            .zip(&x.values)
                            .map(|(w, v)| w * v)
                            .sum::<f64>();
                }
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                let probs = ProbDist {
                    probs: softmax(&scaled),
                };
                Ok(ForwardPass {
                    probs,
                    penultimate: x.values.clone(),
                    input: x.values.clone(),
                    hidden: Vec::new(),
                    dropped: Vec::new(),
                    mask: Vec::new(),
                })
            }
            BackboneKind::Mlp => {
                let w1_end = h * d;
                let b1_end = w1_end + h;
                let w2_end = b1_end + c * h;
                let mut hidden = vec![0.0; h];
                for j in 0..h {
                    let row = &self.params[j * d..(j + 1) * d];
                    let bias = self.params[w1_end + j];
                    let z = bias
                        + row
                            .iter()
                            .zip(&x.values)
                            .map(|(w, v)| w * v)
                            .sum::<f64>();
                    hidden[j] = z.tanh();
                }
                let (dropped, mask) = match dropout {
                    Some(rng) if self.dropout_rate > 0.0 => {
                        let keep = 1.0 - self.dropout_rate;
                        let mask: Vec<f64> = (0..h)
                            .map(|_| {
                                if rng::uniform_f64(rng) < self.dropout_rate {
                                    0.0
                                } else {
                                    1.0 / keep
                                }
                            })
                            .collect();
                        let dropped = hidden.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        (dropped, mask)
                    }
                    _ => (hidden.clone(), vec![1.0; h]),
                };
                let mut logits = vec![0.0; c];
                for class in 0..c {
                    let row = &self.params[b1_end + class * h..b1_end + (class + 1) * h];
                    let bias = self.params[w2_end + class];
                    logits[class] = bias
                        + row
                            .iter()
                            .zip(&dropped)
                            .map(|(w, v)| w * v)
                            .sum::<f64>();
                }
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                let probs = ProbDist {
                    probs: softmax(&scaled),
                };
                Ok(ForwardPass {
                    probs,
                    penultimate: hidden.clone(),
                    input: x.values.clone(),
                    hidden,
                    dropped,
                    mask,
                })
            }
        }
    }

    /// Accumulate parameter gradients for one example into `grads`, given the
    /// loss gradient w.r.t. the (unscaled, temperature-1) logits.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &[f64], grads: &mut [f64]) {
        let (c, d, h) = (self.num_classes, self.input_dim, self.hidden_dim);
        debug_assert_eq!(dlogits.len(), c);
        debug_assert_eq!(grads.len(), self.params.len());
        match self.kind {
            BackboneKind::Linear => {
                for class in 0..c {
                    let g = dlogits[class];
                    for (slot, v) in grads[class * d..(class + 1) * d]
                        .iter_mut()
                        .zip(&pass.input)
                    {
                        *slot += g * v;
                    }
                    grads[c * d + class] += g;
                }
            }
            BackboneKind::Mlp => {
                let w1_end = h * d;
                let b1_end = w1_end + h;
                let w2_end = b1_end + c * h;
                // Output layer.
                for class in 0..c {
                    let g = dlogits[class];
                    for (slot, v) in grads[b1_end + class * h..b1_end + (class + 1) * h]
                        .iter_mut()
                        .zip(&pass.dropped)
                    {
                        *slot += g * v;
                    }
                    grads[w2_end + class] += g;
                }
                // Back through dropout and tanh.
                let mut dhidden = vec![0.0; h];
                for class in 0..c {
                    let g = dlogits[class];
                    let row = &self.params[b1_end + class * h..b1_end + (class + 1) * h];
                    for (slot, w) in dhidden.iter_mut().zip(row) {
                        *slot += g * w;
                    }
                }
                for j in 0..h {
                    let dz = dhidden[j] * pass.mask[j] * (1.0 - pass.hidden[j] * pass.hidden[j]);
                    for (slot, v) in grads[j * d..(j + 1) * d].iter_mut().zip(&pass.input) {
                        *slot += dz * v;
                    }
                    grads[w1_end + j] += dz;
                }
            }
        }
    }
}

/// Result of one forward pass: probabilities plus the cached activations
/// needed for the backward pass and for distance-based detectors.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub probs: ProbDist,
    /// Representation fed to distance-based detectors: the raw input for the
    /// linear backbone, the pre-dropout hidden activations for the MLP.
    pub penultimate: Vec<f64>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    dropped: Vec<f64>,
    mask: Vec<f64>,
}

/// Average the probabilities of `passes` stochastic dropout forwards.
///
/// A model with dropout rate 0 produces identical passes, so the average
/// collapses to a single deterministic forward — bit-identical to
/// [`Classifier::forward`] without a generator, and the generator is left
/// untouched.
pub fn mc_average_forward(
    model: &Classifier,
    x: &FeatureVector,
    temperature: f64,
    passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbDist> {
    assert!(passes >= 1, "need at least one forward pass");
    if model.dropout_rate == 0.0 {
        return Ok(model.forward(x, temperature, None)?.probs);
    }
    let mut sum = vec![0.0; model.num_classes];
    for _ in 0..passes {
        let pass = model.forward(x, temperature, Some(rng))?;
        for (acc, p) in sum.iter_mut().zip(&pass.probs.probs) {
            *acc += p;
        }
    }
    let n = passes as f64;
    Ok(ProbDist {
        probs: sum.into_iter().map(|p| p / n).collect(),
    })
}

/// Cross-entropy against a single target class.
///
/// Returns the loss and its gradient w.r.t. the logits (valid at temperature
/// 1): `p - onehot(target)`.
pub fn cross_entropy_loss(p: &ProbDist, target: usize) -> Result<(f64, Vec<f64>)> {
    let c = p.num_classes();
    if target >= c {
        return Err(Error::ClassOutOfRange(target, c));
    }
    let loss = -p.probs[target].max(LOG_FLOOR).ln();
    let mut grad = p.probs.clone();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Divergence of `p` from the uniform distribution over its classes:
/// `sum_c p_c ln(p_c * C)`, with `0 ln 0 := 0`.
///
/// Returns the loss and its gradient w.r.t. the logits (valid at temperature
/// 1): `p_j (ln p_j + H(p))` where `H` is the Shannon entropy.
pub fn kl_to_uniform_loss(p: &ProbDist) -> (f64, Vec<f64>) {
    let c = p.num_classes() as f64;
    let ln_c = c.ln();
    let mut loss = 0.0;
    let mut entropy = 0.0;
    for &q in &p.probs {
        if q > 0.0 {
            let lq = q.max(LOG_FLOOR).ln();
            loss += q * (lq + ln_c);
            entropy -= q * lq;
        }
    }
    let grad = p
        .probs
        .iter()
        .map(|&q| {
            if q > 0.0 {
                q * (q.max(LOG_FLOOR).ln() + entropy)
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied directly to parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam optimizer state: per-parameter moment estimates plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with decoupled weight decay.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(bad));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + c.epsilon);
            if c.weight_decay > 0.0 {
                update += c.weight_decay * params[i];
            }
            params[i] -= c.lr * update;
        }
        Ok(())
    }
}

/// Scale `grads` down so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Featurized examples with integer targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<FeatureVector>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimMismatch {
                expected: features.len(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ClassOutOfRange(bad, num_classes));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    /// Featurize a document list (in parallel when the `parallel` feature is
    /// on; the result is order-stable either way).
    pub fn from_documents(
        docs: &[crate::corpus::Document],
        featurizer: &Featurizer,
        num_classes: usize,
    ) -> Result<Self> {
        let features = exec::map_slice(docs, |d| featurizer.featurize(&d.text));
        let labels = docs.iter().map(|d| d.label).collect();
        Dataset::new(features, labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One training example for [`train_joint`]: a class target means
/// cross-entropy; no target means the example is pushed toward the uniform
/// output distribution.
#[derive(Debug, Clone)]
pub struct JointExample {
    pub features: FeatureVector,
    pub target: Option<usize>,
}

/// Training-loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Global gradient-norm clip applied to every mini-batch.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            clip_norm: 1.0,
        }
    }
}

/// Mean loss components of one epoch. `ce` averages over targeted examples,
/// `kl` over targetless ones (before the `gamma` weight); `objective` is the
/// mean optimized quantity over all examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub kl: f64,
    pub objective: f64,
}

/// Per-epoch loss history plus the number of optimizer steps taken.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
}

/// Mini-batch Adam training over a mixed objective: cross-entropy for
/// examples with a target, `gamma` times the uniform-divergence loss for
/// examples without one, averaged within each shuffled batch.
///
/// Deterministic given the seed: shuffling, dropout draws, and batch order
/// are all derived from it.
pub fn train_joint(
    mut model: Classifier,
    examples: &[JointExample],
    gamma: f64,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, TrainLog)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("training requires examples".into()));
    }
    assert!(config.batch_size >= 1, "batch_size must be positive");
    for ex in examples {
        if let Some(t) = ex.target {
            if t >= model.num_classes {
                return Err(Error::ClassOutOfRange(t, model.num_classes));
            }
        }
    }

    let mut shuffle_rng = rng::seeded(seed, "train-shuffle");
    let mut dropout_rng = rng::seeded(seed, "train-dropout");
    let use_dropout = model.kind == BackboneKind::Mlp && model.dropout_rate > 0.0;

    let mut adam = AdamState::new(model.param_count(), config.optimizer);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grads = vec![0.0; model.param_count()];

    for epoch in 0..config.epochs {
        rng::shuffle(&mut shuffle_rng, &mut order);
        let (mut ce_sum, mut ce_n) = (0.0, 0usize);
        let (mut kl_sum, mut kl_n) = (0.0, 0usize);
        let mut objective_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let ex = &examples[i];
                let dropout = if use_dropout {
                    Some(&mut dropout_rng)
                } else {
                    None
                };
                let pass = model.forward(&ex.features, 1.0, dropout)?;
                let (contribution, dlogits) = match ex.target {
                    Some(t) => {
                        let (loss, grad) = cross_entropy_loss(&pass.probs, t)?;
                        ce_sum += loss;
                        ce_n += 1;
                        (loss, grad)
                    }
                    None => {
                        let (loss, mut grad) = kl_to_uniform_loss(&pass.probs);
                        kl_sum += loss;
                        kl_n += 1;
                        grad.iter_mut().for_each(|g| *g *= gamma);
                        (gamma * loss, grad)
                    }
                };
                objective_sum += contribution;
                model.backward(&pass, &dlogits, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut model.params, &grads)?;
        }
        log.epochs.push(EpochLog {
            epoch,
            ce: if ce_n > 0 { ce_sum / ce_n as f64 } else { 0.0 },
            kl: if kl_n > 0 { kl_sum / kl_n as f64 } else { 0.0 },
            objective: objective_sum / examples.len() as f64,
        });
    }
    log.steps = adam.steps_taken();
    Ok((model, log))
}

/// Plain cross-entropy training over a labeled dataset.
pub fn train_classifier(
    model: Classifier,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, TrainLog)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training requires examples".into()));
    }
    if model.num_classes != data.num_classes {
        return Err(Error::DimMismatch {
            expected: model.num_classes,
            got: data.num_classes,
        });
    }
    let examples: Vec<JointExample> = data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(f, &l)| JointExample {
            features: f.clone(),
            target: Some(l),
        })
        .collect();
    train_joint(model, &examples, 0.0, config, seed)
}
