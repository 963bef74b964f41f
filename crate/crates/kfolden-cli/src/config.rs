//! Experiment configuration: a strict TOML schema covering corpus, split,
//! model, and evaluation settings for a full run.
//!
//! Unknown keys anywhere in the file are errors, so typos fail fast instead
//! of silently falling back to defaults. Search grids are validated against
//! each hyperparameter's legal range at load time. The root `seed` and `out`
//! can be overridden from the command line or `KFOLDEN_*` environment
//! variables; everything else lives only in the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kfolden::corpus::{ShiftKind, SplitSpec};
use kfolden::detect::{
    Method, TuningSet, DROPOUT_PASS_GRID, SCALING_THRESHOLD_GRID, TEMPERATURE_GRID, THRESHOLD_GRID,
};
use kfolden::features::FeaturizerConfig;
use kfolden::net::{AdamConfig, BackboneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Which predictor `train` produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One classifier over all visible labels.
    Vanilla,
    /// Independent classifiers differing only in init/shuffle seed.
    VanillaEnsemble,
    /// Leave-one-label-out ensemble with the uniformity penalty.
    Kfolden,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::VanillaEnsemble => "vanilla-ensemble",
            ModelKind::Kfolden => "kfolden",
        }
    }
}

/// Top-level experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream derives from it by name.
    #[serde(default)]
    pub seed: u64,
    /// Output directory for splits, checkpoints, and reports.
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub split: SplitSection,
    pub featurizer: FeaturizerConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub grids: GridsSection,
}

/// Where documents come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Keyword-recoverable generated corpus.
    Synthetic {
        /// Dataset name used in reports; defaults to `synthetic<labels>`.
        name: Option<String>,
        num_labels: usize,
        docs_per_label: usize,
        vocab_per_label: usize,
        #[serde(default)]
        noise_rate: f64,
    },
    /// Corpus files on disk (`.jsonl` or `.csv`).
    Files {
        /// Dataset name used in reports; defaults to the file stem.
        name: Option<String>,
        path: PathBuf,
        /// Second corpus from another source; required for
        /// non-semantic-shift splits.
        ood_path: Option<PathBuf>,
    },
}

impl DatasetConfig {
    /// Report-facing dataset name.
    pub fn name(&self) -> String {
        match self {
            DatasetConfig::Synthetic {
                name, num_labels, ..
            } => name
                .clone()
                .unwrap_or_else(|| format!("synthetic{num_labels}")),
            DatasetConfig::Files { name, path, .. } => name.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "corpus".to_string())
            }),
        }
    }
}

/// How the corpus is cut into the five benchmark sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub shift_kind: ShiftKind,
    /// Visible label count (semantic shift only).
    #[serde(default)]
    pub m: usize,
    /// Held-out label count (semantic shift only).
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub per_label_caps: Option<usize>,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_valid_fraction() -> f64 {
    0.15
}

fn default_test_fraction() -> f64 {
    0.25
}

impl SplitSection {
    /// Assemble the library split recipe; the seed comes from the root seed
    /// so one knob reproduces the whole pipeline.
    pub fn to_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            shift_kind: self.shift_kind,
            m: self.m,
            n: self.n,
            per_label_caps: self.per_label_caps,
            seed,
            valid_fraction: self.valid_fraction,
            test_fraction: self.test_fraction,
        }
    }
}

/// Optimizer and model-kind settings for `train`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Uniformity-penalty weight for the leave-one-label-out ensemble.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Member count for `vanilla-ensemble`; defaults to the label count.
    #[serde(default)]
    pub ensemble_count: Option<usize>,
}

fn default_model() -> ModelKind {
    ModelKind::Kfolden
}

fn default_epochs() -> usize {
    5
}

fn default_batch_size() -> usize {
    32
}

fn default_lr() -> f64 {
    0.001
}

fn default_clip_norm() -> f64 {
    1.0
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            model: default_model(),
            gamma: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            weight_decay: 0.0,
            clip_norm: default_clip_norm(),
            ensemble_count: None,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            clip_norm: self.clip_norm,
        }
    }
}

/// Detector selection and fixed hyperparameters for `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub tuning_set: TuningSet,
    /// Fixed softmax temperature for scaling methods; searched when absent.
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Fixed stochastic-forward count for dropout methods.
    #[serde(default)]
    pub dropout_passes: Option<usize>,
    /// Fixed acceptance cutoff; tuned when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Msp]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: default_methods(),
            tuning_set: TuningSet::default(),
            temperature: None,
            dropout_passes: None,
            threshold: None,
        }
    }
}

/// Hyperparameter search grids; absent grids fall back to the defaults the
/// detectors ship with.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsSection {
    /// Candidate uniformity-penalty weights, each in `[0, 1]`.
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    /// Candidate softmax temperatures, each positive.
    #[serde(default)]
    pub temperature: Option<Vec<f64>>,
    /// Candidate probability floors, each in `[0, 1]`.
    #[serde(default)]
    pub threshold: Option<Vec<f64>>,
    /// Candidate stochastic-forward counts, each at least 1.
    #[serde(default)]
    pub passes: Option<Vec<usize>>,
}

impl GridsSection {
    pub fn temperature_grid(&self) -> Vec<f64> {
        self.temperature
            .clone()
            .unwrap_or_else(|| TEMPERATURE_GRID.to_vec())
    }

    /// Probability-floor candidates for `method`; scaling methods default to
    /// the finer grid.
    pub fn threshold_grid(&self, method: Method) -> Vec<f64> {
        self.threshold.clone().unwrap_or_else(|| {
            if method.uses_scaling() {
                SCALING_THRESHOLD_GRID.to_vec()
            } else {
                THRESHOLD_GRID.to_vec()
            }
        })
    }

    pub fn passes_grid(&self) -> Vec<usize> {
        self.passes
            .clone()
            .unwrap_or_else(|| DROPOUT_PASS_GRID.to_vec())
    }
}

impl ExperimentConfig {
    /// Parse `path` strictly and validate every cross-field rule.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config
            .validate()
            .with_context(|| format!("validating config {}", path.display()))?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_labels,
                docs_per_label,
                vocab_per_label,
                noise_rate,
                ..
            } => {
                if *num_labels < 2 {
                    bail!("dataset.num_labels must be at least 2, got {num_labels}");
                }
                if *docs_per_label == 0 || *vocab_per_label == 0 {
                    bail!("dataset.docs_per_label and dataset.vocab_per_label must be positive");
                }
                if !(0.0..=1.0).contains(noise_rate) {
                    bail!("dataset.noise_rate must lie in [0,1], got {noise_rate}");
                }
            }
            DatasetConfig::Files { ood_path, .. } => {
                if self.split.shift_kind == ShiftKind::NonSemanticShift && ood_path.is_none() {
                    bail!("non-semantic-shift splits need dataset.ood_path (a second source)");
                }
            }
        }
        if self.split.shift_kind == ShiftKind::SemanticShift {
            if self.split.m < 2 {
                bail!("split.m must be at least 2 for semantic shift, got {}", self.split.m);
            }
            if self.split.n < 1 {
                bail!("split.n must be at least 1 for semantic shift, got {}", self.split.n);
            }
            if let DatasetConfig::Synthetic { num_labels, .. } = &self.dataset {
                if self.split.m + self.split.n != *num_labels {
                    bail!(
                        "split.m + split.n must equal dataset.num_labels: {} + {} != {num_labels}",
                        self.split.m,
                        self.split.n
                    );
                }
            }
        }
        let frac = |name: &str, f: f64| -> Result<()> {
            if !(f > 0.0 && f < 1.0) {
                bail!("split.{name} must lie in (0,1), got {f}");
            }
            Ok(())
        };
        frac("valid_fraction", self.split.valid_fraction)?;
        frac("test_fraction", self.split.test_fraction)?;
        if self.split.valid_fraction + self.split.test_fraction >= 1.0 {
            bail!(
                "split.valid_fraction + split.test_fraction must stay below 1, got {}",
                self.split.valid_fraction + self.split.test_fraction
            );
        }

        if self.featurizer.dim() == 0 {
            bail!("featurizer.dim must be positive");
        }
        if self.train.epochs == 0 {
            bail!("train.epochs must be at least 1");
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be at least 1");
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            bail!("train.lr must be positive and finite, got {}", self.train.lr);
        }
        if !(self.train.weight_decay >= 0.0 && self.train.weight_decay.is_finite()) {
            bail!("train.weight_decay must be non-negative, got {}", self.train.weight_decay);
        }
        if self.train.clip_norm <= 0.0 || self.train.clip_norm.is_nan() {
            bail!("train.clip_norm must be positive, got {}", self.train.clip_norm);
        }
        if let Some(gamma) = self.train.gamma {
            if !(0.0..=1.0).contains(&gamma) {
                bail!("train.gamma must lie in [0,1], got {gamma}");
            }
        }
        if self.train.ensemble_count == Some(0) {
            bail!("train.ensemble_count must be at least 1");
        }

        if self.eval.methods.is_empty() {
            bail!("eval.methods must name at least one detector");
        }
        if let Some(t) = self.eval.temperature {
            if !(t > 0.0 && t.is_finite()) {
                bail!("eval.temperature must be positive and finite, got {t}");
            }
        }
        if let Some(p) = self.eval.dropout_passes {
            if p == 0 {
                bail!("eval.dropout_passes must be at least 1");
            }
        }
        if let Some(phi) = self.eval.threshold {
            if !(0.0..=1.0).contains(&phi) {
                bail!("eval.threshold must lie in [0,1], got {phi}");
            }
        }

        self.validate_grids()
    }

    fn validate_grids(&self) -> Result<()> {
        let check_f64 = |name: &str, grid: &Option<Vec<f64>>, ok: &dyn Fn(f64) -> bool, range: &str| -> Result<()> {
            if let Some(values) = grid {
                if values.is_empty() {
                    bail!("grids.{name} must not be empty");
                }
                for &v in values {
                    if !ok(v) {
                        bail!("grids.{name} entry {v} lies outside {range}");
                    }
                }
            }
            Ok(())
        };
        check_f64("gamma", &self.grids.gamma, &|v| (0.0..=1.0).contains(&v), "[0,1]")?;
        check_f64("temperature", &self.grids.temperature, &|v| v > 0.0 && v.is_finite(), "(0,inf)")?;
        check_f64("threshold", &self.grids.threshold, &|v| (0.0..=1.0).contains(&v), "[0,1]")?;
        if let Some(passes) = &self.grids.passes {
            if passes.is_empty() {
                bail!("grids.passes must not be empty");
            }
            if passes.contains(&0) {
                bail!("grids.passes entries must be at least 1");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
seed = 7
out = "runs/demo"

[dataset]
kind = "synthetic"
num_labels = 4
docs_per_label = 50
vocab_per_label = 8

[split]
shift_kind = "semantic-shift"
m = 3
n = 1

[featurizer]
kind = "hashed-bow"
dim = 64
hash_seed = 0

[backbone]
kind = "linear"
"#
        .to_string()
    }

    fn parse(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = parse(&minimal_toml()).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.dataset.name(), "synthetic4");
        assert_eq!(config.train.model, ModelKind::Kfolden);
        assert_eq!(config.train.epochs, 5);
        assert_eq!(config.train.batch_size, 32);
        assert_eq!(config.eval.methods, vec![Method::Msp]);
        assert_eq!(config.eval.tuning_set, TuningSet::OodValid);
        let spec = config.split.to_spec(config.seed);
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.m, 3);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let top = minimal_toml() + "\nbogus = 1\n";
        assert!(toml::from_str::<ExperimentConfig>(&top).is_err());
        let nested = minimal_toml() + "\n[train]\nbogus = 1\n";
        assert!(toml::from_str::<ExperimentConfig>(&nested).is_err());
    }

    #[test]
    fn split_must_cover_synthetic_labels() {
        let text = minimal_toml().replace("m = 3", "m = 2");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("must equal dataset.num_labels"), "{err}");
    }

    #[test]
    fn grid_entries_outside_legal_ranges_are_rejected() {
        for (section, message) in [
            ("[grids]\ngamma = [0.5, 1.5]", "gamma"),
            ("[grids]\ntemperature = [0.0]", "temperature"),
            ("[grids]\nthreshold = [-0.1]", "threshold"),
            ("[grids]\npasses = [0]", "passes"),
            ("[grids]\ngamma = []", "gamma"),
        ] {
            let text = minimal_toml() + "\n" + section + "\n";
            let err = parse(&text).unwrap_err().to_string();
            assert!(err.contains(message), "{section}: {err}");
        }
    }

    #[test]
    fn scaling_methods_default_to_the_finer_threshold_grid() {
        let grids = GridsSection::default();
        assert_eq!(grids.threshold_grid(Method::Msp), THRESHOLD_GRID.to_vec());
        assert_eq!(
            grids.threshold_grid(Method::Scaling),
            SCALING_THRESHOLD_GRID.to_vec()
        );
        let custom = GridsSection {
            threshold: Some(vec![0.1, 0.2]),
            ..GridsSection::default()
        };
        assert_eq!(custom.threshold_grid(Method::Scaling), vec![0.1, 0.2]);
    }

    #[test]
    fn eval_hyperparameters_are_range_checked() {
        for (line, message) in [
            ("[eval]\nmethods = []", "at least one detector"),
            ("[eval]\ntemperature = -1.0", "eval.temperature"),
            ("[eval]\ndropout_passes = 0", "eval.dropout_passes"),
            ("[eval]\nthreshold = 1.5", "eval.threshold"),
        ] {
            let text = minimal_toml() + "\n" + line + "\n";
            let err = parse(&text).unwrap_err().to_string();
            assert!(err.contains(message), "{line}: {err}");
        }
    }

    #[test]
    fn files_dataset_names_default_to_the_stem() {
        let text = minimal_toml().replace(
            "kind = \"synthetic\"\nnum_labels = 4\ndocs_per_label = 50\nvocab_per_label = 8",
            "kind = \"files\"\npath = \"data/news_corpus.jsonl\"",
        );
        let config = parse(&text).unwrap();
        assert_eq!(config.dataset.name(), "news_corpus");
    }

    #[test]
    fn non_semantic_shift_requires_a_second_source() {
        let text = minimal_toml()
            .replace(
                "kind = \"synthetic\"\nnum_labels = 4\ndocs_per_label = 50\nvocab_per_label = 8",
                "kind = \"files\"\npath = \"data/a.jsonl\"",
            )
            .replace("shift_kind = \"semantic-shift\"\nm = 3\nn = 1", "shift_kind = \"non-semantic-shift\"");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("ood_path"), "{err}");
    }
}
