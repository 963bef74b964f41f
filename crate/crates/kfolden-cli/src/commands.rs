//! The four pipeline stages behind the CLI subcommands.
//!
//! Each stage reads earlier stages' outputs from the run directory and writes
//! its own via atomic temp-then-rename, so an interrupted run never leaves a
//! half-written split, checkpoint, or report behind. Nothing written here
//! contains a timestamp: rerunning a stage with the same config and seed
//! reproduces every output byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use kfolden::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainedPredictor};
use kfolden::corpus::{
    self, build_non_semantic_shift_split, build_semantic_shift_split, generate_synthetic_corpus,
    load_corpus, read_split, write_atomic, write_split, BenchmarkSplit, CorpusFormat,
    LabeledCorpus, ShiftKind,
};
use kfolden::detect::{evaluate_detector, fit, write_scores, DetectorConfig, Method, TuningSet};
use kfolden::kfolden::{train_kfolden, train_vanilla_ensemble, KFoldenConfig};
use kfolden::metrics::{MetricReport, CSV_HEADER};
use kfolden::net::{train_classifier, Dataset, TrainLog};

use crate::config::{DatasetConfig, ExperimentConfig, ModelKind};

/// Everything `eval` records about one detector run: the tuned
/// hyperparameters alongside the metrics they produced.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub dataset: String,
    pub method: String,
    pub backbone: String,
    /// Validation pool the threshold (and temperature/passes) came from.
    pub tuning_set: String,
    pub temperature: f64,
    pub dropout_passes: usize,
    pub threshold: f64,
    pub metrics: MetricReport,
}

impl ReportFile {
    fn csv_row(&self) -> String {
        self.metrics
            .csv_row(&self.dataset, &self.method, &self.backbone)
    }
}

/// Build the benchmark split described by the config and write it under
/// `<out>/split/`, printing per-set label and instance counts.
pub fn cmd_build_split(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let spec = config.split.to_spec(seed);
    let split = match config.split.shift_kind {
        ShiftKind::SemanticShift => {
            let corpus = load_primary_corpus(&config.dataset, seed)?;
            build_semantic_shift_split(&corpus, &spec)?
        }
        ShiftKind::NonSemanticShift => {
            let (id_corpus, ood_corpus) = load_corpus_pair(&config.dataset, seed)?;
            build_non_semantic_shift_split(&id_corpus, &ood_corpus, &spec)?
        }
    };

    let dir = out.join("split");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_split(&dir, &split)?;

    println!("split written to {}", dir.display());
    println!("{}", counts_table(&split));
    Ok(())
}

/// Per-set label and instance counts, one row per benchmark set.
fn counts_table(split: &BenchmarkSplit) -> String {
    let sets: [(&str, &[corpus::Document]); 5] = [
        ("train", &split.train),
        ("id_valid", &split.id_valid),
        ("ood_valid", &split.ood_valid),
        ("id_test", &split.id_test),
        ("ood_test", &split.ood_test),
    ];
    let mut rows = vec![vec![
        "set".to_string(),
        "labels".to_string(),
        "instances".to_string(),
    ]];
    for (name, docs) in sets {
        let labels: std::collections::BTreeSet<usize> = docs.iter().map(|d| d.label).collect();
        rows.push(vec![
            name.to_string(),
            labels.len().to_string(),
            docs.len().to_string(),
        ]);
    }
    render_aligned(&rows)
}

fn corpus_format(path: &Path) -> Result<CorpusFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => Ok(CorpusFormat::Jsonl),
        Some("csv") => Ok(CorpusFormat::Csv),
        _ => bail!(
            "cannot infer corpus format of {} (expected .jsonl or .csv)",
            path.display()
        ),
    }
}

fn load_primary_corpus(dataset: &DatasetConfig, seed: u64) -> Result<LabeledCorpus> {
    match dataset {
        DatasetConfig::Synthetic {
            num_labels,
            docs_per_label,
            vocab_per_label,
            noise_rate,
            ..
        } => Ok(generate_synthetic_corpus(
            *num_labels,
            *docs_per_label,
            *vocab_per_label,
            *noise_rate,
            seed,
        )),
        DatasetConfig::Files { path, .. } => {
            load_corpus(path, corpus_format(path)?).with_context(|| format!("loading {}", path.display()))
        }
    }
}

/// Two same-label corpora from distinct sources, for non-semantic-shift
/// splits. The synthetic generator uses `seed` and `seed + 1`, which yields
/// disjoint source tags over one label inventory.
fn load_corpus_pair(dataset: &DatasetConfig, seed: u64) -> Result<(LabeledCorpus, LabeledCorpus)> {
    match dataset {
        DatasetConfig::Synthetic {
            num_labels,
            docs_per_label,
            vocab_per_label,
            noise_rate,
            ..
        } => {
            let id = generate_synthetic_corpus(
                *num_labels,
                *docs_per_label,
                *vocab_per_label,
                *noise_rate,
                seed,
            );
            let ood = generate_synthetic_corpus(
                *num_labels,
                *docs_per_label,
                *vocab_per_label,
                *noise_rate,
                seed.wrapping_add(1),
            );
            Ok((id, ood))
        }
        DatasetConfig::Files { path, ood_path, .. } => {
            let ood_path = ood_path
                .as_ref()
                .ok_or_else(|| anyhow!("non-semantic-shift splits need dataset.ood_path"))?;
            let id = load_corpus(path, corpus_format(path)?)
                .with_context(|| format!("loading {}", path.display()))?;
            let ood = load_corpus(ood_path, corpus_format(ood_path)?)
                .with_context(|| format!("loading {}", ood_path.display()))?;
            Ok((id, ood))
        }
    }
}

/// Train the configured predictor on `<out>/split/` (or `--split`), write the
/// checkpoint under `<out>/model/` and per-epoch loss lines to
/// `<out>/train.log`.
pub fn cmd_train(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    method: Option<ModelKind>,
    gamma_flag: Option<f64>,
    split_dir: Option<PathBuf>,
) -> Result<()> {
    let split_dir = split_dir.unwrap_or_else(|| out.join("split"));
    let split = read_split(&split_dir)
        .with_context(|| format!("reading split {}", split_dir.display()))?;
    let k = split.label_space.k();

    let model_kind = method.unwrap_or(config.train.model);
    if gamma_flag.is_some() && model_kind != ModelKind::Kfolden {
        bail!("--gamma applies only to --method kfolden, not {}", model_kind.name());
    }
    let gamma = gamma_flag.or(config.train.gamma).unwrap_or(1.0);
    if let Some(flag) = gamma_flag {
        if !(0.0..=1.0).contains(&flag) {
            bail!("--gamma must lie in [0,1], got {flag}");
        }
    }

    let featurizer = config.featurizer.build()?;
    let data = Dataset::from_documents(&split.train, &featurizer, k)?;
    let input_dim = data.features[0].dim();
    let train_config = config.train.to_train_config();

    let (predictor, log_text, checkpoint_gamma) = match model_kind {
        ModelKind::Vanilla => {
            let model = config.backbone.build(input_dim, k, seed);
            let (model, log) = train_classifier(model, &data, &train_config, seed)?;
            let text = format_train_log("", &log);
            (TrainedPredictor::Single(model), text, 0.0)
        }
        ModelKind::VanillaEnsemble => {
            let count = config.train.ensemble_count.unwrap_or(k);
            let (ensemble, logs) =
                train_vanilla_ensemble(&data, count, &config.backbone, &train_config, seed)?;
            let mut text = String::new();
            for (i, log) in logs.iter().enumerate() {
                text.push_str(&format_train_log(&format!("member {i} "), log));
            }
            (TrainedPredictor::Vanilla(ensemble), text, 0.0)
        }
        ModelKind::Kfolden => {
            let kf_config = KFoldenConfig {
                gamma,
                backbone: config.backbone,
                train: train_config,
                seed_base: seed,
            };
            let (ensemble, logs) = train_kfolden(&data, &kf_config)?;
            let mut text = String::new();
            for (i, log) in logs.iter().enumerate() {
                let name = &split.label_space.names[i];
                text.push_str(&format_train_log(&format!("sub {i} (masking {name}) "), log));
            }
            (TrainedPredictor::KFolden(ensemble), text, gamma)
        }
    };

    print!("{log_text}");
    write_atomic(&out.join("train.log"), log_text.as_bytes())?;

    let checkpoint = Checkpoint {
        predictor,
        featurizer: config.featurizer.clone(),
        label_names: split.label_space.names[..k].to_vec(),
        seed,
        gamma: checkpoint_gamma,
    };
    let model_dir = out.join("model");
    save_checkpoint(&model_dir, &checkpoint)?;
    println!(
        "{} checkpoint written to {}",
        checkpoint.kind_name(),
        model_dir.display()
    );
    Ok(())
}

/// One line per epoch with the loss components kept separate.
fn format_train_log(prefix: &str, log: &TrainLog) -> String {
    let mut text = String::new();
    for epoch in &log.epochs {
        text.push_str(&format!(
            "{prefix}epoch {}: ce {:.6} kl {:.6} objective {:.6}\n",
            epoch.epoch + 1,
            epoch.ce,
            epoch.kl,
            epoch.objective
        ));
    }
    text
}

/// Fit each requested detector on the checkpoint and split, score the test
/// sets, and write per-method reports plus one combined CSV.
pub fn cmd_eval(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    methods_flag: Vec<Method>,
    tuning_flag: Option<TuningSet>,
    checkpoint_dir: Option<PathBuf>,
    split_dir: Option<PathBuf>,
) -> Result<()> {
    let split_dir = split_dir.unwrap_or_else(|| out.join("split"));
    let split = read_split(&split_dir)
        .with_context(|| format!("reading split {}", split_dir.display()))?;
    let checkpoint_dir = checkpoint_dir.unwrap_or_else(|| out.join("model"));
    let checkpoint = load_checkpoint(&checkpoint_dir)
        .with_context(|| format!("loading checkpoint {}", checkpoint_dir.display()))?;
    if checkpoint.featurizer != config.featurizer {
        log::warn!(
            "config featurizer differs from the checkpoint's; scoring with the checkpoint's"
        );
    }
    let featurizer = checkpoint.build_featurizer()?;

    let methods = if methods_flag.is_empty() {
        config.eval.methods.clone()
    } else {
        methods_flag
    };
    for (i, method) in methods.iter().enumerate() {
        if methods[..i].contains(method) {
            bail!("method {method} requested twice");
        }
    }
    let tuning_set = tuning_flag.unwrap_or(config.eval.tuning_set);
    let dataset_name = config.dataset.name();
    let backbone = backbone_name(&checkpoint.predictor);

    let eval_dir = out.join("eval");
    let mut rows = Vec::with_capacity(methods.len());
    let mut table = vec![CSV_HEADER.split(',').map(str::to_string).collect::<Vec<_>>()];
    for &method in &methods {
        let mut detector_config = DetectorConfig::new(method, seed);
        detector_config.tuning_set = tuning_set;
        detector_config.temperature_grid = config.grids.temperature_grid();
        detector_config.threshold_grid = config.grids.threshold_grid(method);
        detector_config.passes_grid = config.grids.passes_grid();
        if method.uses_scaling() {
            detector_config.temperature = config.eval.temperature;
        }
        if method.uses_dropout() {
            detector_config.dropout_passes = config.eval.dropout_passes;
        }
        if !method.uses_mahalanobis() {
            detector_config.threshold = config.eval.threshold;
        }

        let detector = fit(&detector_config, &checkpoint.predictor, &featurizer, &split)
            .with_context(|| format!("fitting {method}"))?;
        let (metrics, records) =
            evaluate_detector(&detector, &checkpoint.predictor, &featurizer, &split)
                .with_context(|| format!("scoring {method}"))?;

        let method_dir = eval_dir.join(method.name());
        std::fs::create_dir_all(&method_dir)
            .with_context(|| format!("creating {}", method_dir.display()))?;
        write_scores(&method_dir.join("scores.jsonl"), &records)?;
        let report = ReportFile {
            dataset: dataset_name.clone(),
            method: method.name().to_string(),
            backbone: backbone.to_string(),
            tuning_set: detector.tuning_set.name().to_string(),
            temperature: detector.temperature,
            dropout_passes: detector.dropout_passes,
            threshold: detector.threshold,
            metrics,
        };
        write_json(&method_dir.join("report.json"), &report)?;
        table.push(report.csv_row().split(',').map(str::to_string).collect());
        rows.push(report);
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    write_atomic(&eval_dir.join("summary.csv"), csv.as_bytes())?;

    println!("{}", render_aligned(&table));
    println!("reports written to {}", eval_dir.display());
    Ok(())
}

/// Backbone label for report rows.
fn backbone_name(predictor: &TrainedPredictor) -> &'static str {
    use kfolden::net::BackboneKind;
    let kind = match predictor {
        TrainedPredictor::Single(model) => model.kind,
        TrainedPredictor::Vanilla(ensemble) => ensemble.models[0].kind,
        TrainedPredictor::KFolden(ensemble) => ensemble.sub_models()[0].model.kind,
    };
    match kind {
        BackboneKind::Linear => "linear",
        BackboneKind::Mlp => "mlp",
    }
}

/// Merge report files into one comparison table sorted by dataset, method,
/// and backbone; write CSV and aligned-text forms when `out` is known.
pub fn cmd_report(out: Option<&Path>, paths: &[PathBuf]) -> Result<()> {
    if paths.is_empty() {
        bail!("no report paths given; pass report.json files or directories containing them");
    }
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            collect_report_files(path, &mut files)?;
        } else if path.is_file() {
            files.push(path.clone());
        } else {
            bail!("{} is neither a file nor a directory", path.display());
        }
    }
    files.dedup();
    if files.is_empty() {
        bail!("no report.json files found under the given paths");
    }

    let mut by_key: BTreeMap<(String, String, String), (ReportFile, PathBuf)> = BTreeMap::new();
    for file in &files {
        let report: ReportFile = read_json(file)?;
        let key = (
            report.dataset.clone(),
            report.method.clone(),
            report.backbone.clone(),
        );
        match by_key.get(&key) {
            None => {
                by_key.insert(key, (report, file.clone()));
            }
            Some((existing, first_file)) => {
                if *existing != report {
                    bail!(
                        "conflicting reports for ({}, {}, {}): {} vs {}",
                        key.0,
                        key.1,
                        key.2,
                        first_file.display(),
                        file.display()
                    );
                }
            }
        }
    }

    let mut table = vec![CSV_HEADER.split(',').map(str::to_string).collect::<Vec<_>>()];
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for (report, _) in by_key.values() {
        table.push(report.csv_row().split(',').map(str::to_string).collect());
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }

    let text = render_aligned(&table);
    println!("{text}");
    match out {
        Some(out) => {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            write_atomic(&out.join("comparison.csv"), csv.as_bytes())?;
            let mut text_file = text.clone();
            text_file.push('\n');
            write_atomic(&out.join("comparison.txt"), text_file.as_bytes())?;
            println!("comparison written to {}", out.display());
        }
        None => {
            println!();
            print!("{csv}");
        }
    }
    Ok(())
}

/// Gather `report.json` files under `dir` recursively, in sorted order.
fn collect_report_files(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading {}", dir.display()))?;
    entries.sort();
    for entry in entries {
        if entry.is_dir() {
            collect_report_files(&entry, files)?;
        } else if entry.file_name().is_some_and(|n| n == "report.json") {
            files.push(entry);
        }
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_atomic(path, body.as_bytes())?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Left-align each column to its widest cell; single trailing newline absent.
fn render_aligned(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; columns];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut text = String::new();
    for (r, row) in rows.iter().enumerate() {
        if r > 0 {
            text.push('\n');
        }
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                text.push_str("  ");
            }
            if i + 1 == row.len() {
                text.push_str(cell);
            } else {
                text.push_str(&format!("{cell:<width$}", width = widths[i]));
            }
        }
    }
    text
}
