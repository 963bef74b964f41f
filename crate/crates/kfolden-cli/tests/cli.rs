//! Black-box tests of the `kfolden` binary: the full pipeline on a small
//! synthetic benchmark, flag/environment precedence, and failure exits.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kfolden"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config() -> String {
    r#"
seed = 3

[dataset]
kind = "synthetic"
num_labels = 4
docs_per_label = 60
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

[train]
model = "kfolden"
gamma = 1.0
epochs = 6
batch_size = 16
lr = 0.01

[eval]
methods = ["kfolden"]
tuning_set = "ood_valid"
"#
    .to_string()
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = binary();
    cmd.args(args);
    for (key, value) in envs {
        cmd.env(key, value);
    }
    cmd.output().unwrap()
}

fn assert_ok(output: &Output) -> String {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn assert_fails(output: &Output, needle: &str) {
    assert!(!output.status.success(), "command unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains(needle), "stderr missing {needle:?}:\n{stderr}");
}

#[test]
fn pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let config = config.to_str().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();

    let stdout = assert_ok(&run(&["--config", config, "--out", out_str, "build-split"], &[]));
    for set in ["train", "id_valid", "ood_valid", "id_test", "ood_test"] {
        assert!(stdout.contains(set), "counts table missing {set}:\n{stdout}");
        assert!(out.join("split").join(format!("{set}.jsonl")).is_file());
    }
    assert!(out.join("split/label_space.json").is_file());

    let stdout = assert_ok(&run(&["--config", config, "--out", out_str, "train"], &[]));
    assert!(stdout.contains("epoch 1:"), "{stdout}");
    assert!(out.join("model/ensemble.json").is_file());
    assert!(out.join("train.log").is_file());

    let stdout = assert_ok(&run(&["--config", config, "--out", out_str, "eval"], &[]));
    assert!(stdout.contains("auroc"), "{stdout}");
    assert!(out.join("eval/kfolden/report.json").is_file());
    assert!(out.join("eval/kfolden/scores.jsonl").is_file());
    assert!(out.join("eval/summary.csv").is_file());

    let stdout = assert_ok(&run(
        &["--config", config, "--out", out_str, "report", out.join("eval").to_str().unwrap()],
        &[],
    ));
    assert!(stdout.contains("kfolden"), "{stdout}");
    assert!(out.join("comparison.csv").is_file());
    assert!(out.join("comparison.txt").is_file());

    let summary = std::fs::read_to_string(out.join("eval/summary.csv")).unwrap();
    assert!(summary.starts_with("dataset,method,backbone,auroc,aupr_out,tnr_at_95tpr,id_acc,ood_err\n"));
    assert!(summary.contains("synthetic4,kfolden,linear,"), "{summary}");

    let first_score = std::fs::read_to_string(out.join("eval/kfolden/scores.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let score: serde_json::Value = serde_json::from_str(&first_score).unwrap();
    for key in ["id", "ood_score", "predicted_label", "max_prob", "is_ood_truth", "method"] {
        assert!(score.get(key).is_some(), "scores.jsonl missing {key}: {first_score}");
    }
}

#[test]
fn uniformity_loss_component_decreases_over_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let config = config.to_str().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();

    assert_ok(&run(&["--config", config, "--out", out_str, "build-split"], &[]));
    assert_ok(&run(&["--config", config, "--out", out_str, "train"], &[]));

    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    let kl_of = |line: &str| -> f64 {
        let rest = line.split(" kl ").nth(1).unwrap();
        rest.split_whitespace().next().unwrap().parse().unwrap()
    };
    for sub in 0..3 {
        let prefix = format!("sub {sub} ");
        let lines: Vec<&str> = log.lines().filter(|l| l.starts_with(&prefix)).collect();
        assert_eq!(lines.len(), 6, "expected 6 epochs for sub {sub}:\n{log}");
        let first = kl_of(lines[0]);
        let last = kl_of(lines[lines.len() - 1]);
        assert!(
            last < first,
            "sub {sub}: uniformity loss did not decrease ({first} -> {last})"
        );
    }
}

#[test]
fn seed_precedence_is_flag_over_env_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let config = config.to_str().unwrap();
    let splits: Vec<String> = [
        ("config", vec![], vec![]),
        ("env", vec![], vec![("KFOLDEN_SEED", "5")]),
        ("flag", vec!["--seed", "7"], vec![("KFOLDEN_SEED", "5")]),
    ]
    .into_iter()
    .map(|(name, extra_args, envs): (&str, Vec<&str>, Vec<(&str, &str)>)| {
        let out = dir.path().join(name);
        let mut args = vec!["--config", config, "--out", out.to_str().unwrap()];
        args.extend(extra_args);
        args.push("build-split");
        assert_ok(&run(&args, &envs));
        std::fs::read_to_string(out.join("split/train.jsonl")).unwrap()
    })
    .collect();
    assert_ne!(splits[0], splits[1], "env seed ignored");
    assert_ne!(splits[1], splits[2], "flag did not beat env");
    assert_ne!(splits[0], splits[2]);

    // Same seed through different channels must agree byte for byte.
    let env_out = dir.path().join("env-as-flag");
    assert_ok(&run(
        &["--config", config, "--out", env_out.to_str().unwrap(), "--seed", "5", "build-split"],
        &[],
    ));
    assert_eq!(
        splits[1],
        std::fs::read_to_string(env_out.join("split/train.jsonl")).unwrap()
    );
}

#[test]
fn eval_method_flag_overrides_the_config_list() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let config = config.to_str().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();

    assert_ok(&run(&["--config", config, "--out", out_str, "build-split"], &[]));
    assert_ok(&run(&["--config", config, "--out", out_str, "train"], &[]));
    assert_ok(&run(
        &["--config", config, "--out", out_str, "eval", "--method", "kfolden-scaling", "--tuning-set", "id_valid"],
        &[],
    ));
    assert!(out.join("eval/kfolden-scaling/report.json").is_file());
    assert!(!out.join("eval/kfolden").exists(), "config methods were not overridden");
    let report = std::fs::read_to_string(out.join("eval/kfolden-scaling/report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["tuning_set"], "id_valid");
    assert_eq!(report["method"], "kfolden-scaling");
}

#[test]
fn missing_checkpoint_fails_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let config = config.to_str().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();

    assert_ok(&run(&["--config", config, "--out", out_str, "build-split"], &[]));
    let output = run(&["--config", config, "--out", out_str, "eval"], &[]);
    assert_fails(&output, "model");
}

#[test]
fn unknown_config_keys_fail_fast() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &(small_config() + "\n[grids]\nbogus_knob = [1]\n"));
    let out = dir.path().join("run");
    let output = run(
        &["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "build-split"],
        &[],
    );
    assert_fails(&output, "bogus_knob");
}

#[test]
fn gamma_flag_requires_the_kfolden_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let config = config.to_str().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();
    assert_ok(&run(&["--config", config, "--out", out_str, "build-split"], &[]));
    let output = run(
        &["--config", config, "--out", out_str, "train", "--method", "vanilla", "--gamma", "0.5"],
        &[],
    );
    assert_fails(&output, "--gamma");
}

#[test]
fn report_rejects_conflicting_duplicates_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_fails(&run(&["report", empty.to_str().unwrap()], &[]), "no report.json files");

    let report = |auroc: f64| {
        format!(
            r#"{{"dataset":"d","method":"msp","backbone":"linear","tuning_set":"ood_valid",
"temperature":1.0,"dropout_passes":1,"threshold":0.1,
"metrics":{{"auroc":{auroc},"aupr_out":0.5,"tnr_at_95tpr":0.5,"id_accuracy":0.9,
"ood_error_rate":0.2,"id_count":10,"ood_count":5}}}}"#
        )
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    std::fs::write(a.join("report.json"), report(0.9)).unwrap();
    std::fs::write(b.join("report.json"), report(0.8)).unwrap();
    let output = run(&["report", a.to_str().unwrap(), b.to_str().unwrap()], &[]);
    assert_fails(&output, "conflicting reports");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("a/report.json") && stderr.contains("b/report.json"), "{stderr}");

    // Identical duplicates merge cleanly into one row.
    std::fs::write(b.join("report.json"), report(0.9)).unwrap();
    let output = run(&["report", a.to_str().unwrap(), b.to_str().unwrap()], &[]);
    let stdout = assert_ok(&output);
    let data_rows = stdout
        .lines()
        .filter(|l| l.starts_with("d ") && l.contains("msp"))
        .count();
    assert_eq!(data_rows, 1, "{stdout}");
}
