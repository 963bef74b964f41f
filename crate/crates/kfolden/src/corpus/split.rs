//! Construction of five-set benchmark splits from labeled corpora.

use std::collections::{BTreeSet, HashSet};

use super::{BenchmarkSplit, Document, LabelSpace, LabeledCorpus, ShiftKind, SplitSpec};
use crate::rng::{self, ChaCha8Rng};
use crate::{Error, Result};

/// Per-label three-way partition, in shuffled order.
struct LabelPortions {
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

/// Shuffle one label's document positions and cut off the test and valid
/// shares first; whatever remains is the train share.
fn partition_label(
    mut doc_indices: Vec<usize>,
    rng: &mut ChaCha8Rng,
    spec: &SplitSpec,
    label_name: &str,
    require_train: bool,
) -> Result<LabelPortions> {
    let total = doc_indices.len();
    let n_test = (spec.test_fraction * total as f64).floor() as usize;
    let n_valid = (spec.valid_fraction * total as f64).floor() as usize;
    let n_train = total - n_test - n_valid;
    let enough = n_test >= 1 && n_valid >= 1 && (!require_train || n_train >= 1);
    if !enough {
        let need = min_docs_needed(spec, require_train);
        return Err(Error::InsufficientLabel(label_name.to_string(), need, total));
    }
    rng::shuffle(rng, &mut doc_indices);
    let test = doc_indices[..n_test].to_vec();
    let valid = doc_indices[n_test..n_test + n_valid].to_vec();
    let train = if require_train {
        doc_indices[n_test + n_valid..].to_vec()
    } else {
        Vec::new()
    };
    Ok(LabelPortions { train, valid, test })
}

/// Smallest document count whose floor-based shares are all non-empty.
fn min_docs_needed(spec: &SplitSpec, require_train: bool) -> usize {
    for total in 2..1_000_000usize {
        let n_test = (spec.test_fraction * total as f64).floor() as usize;
        let n_valid = (spec.valid_fraction * total as f64).floor() as usize;
        let n_train = total - n_test - n_valid;
        if n_test >= 1 && n_valid >= 1 && (!require_train || n_train >= 1) {
            return total;
        }
    }
    usize::MAX
}

fn capped(docs: &[usize], cap: Option<usize>) -> &[usize] {
    match cap {
        Some(c) => &docs[..docs.len().min(c)],
        None => docs,
    }
}

/// Hold out `spec.n` whole labels as the out-of-distribution classes.
///
/// A seeded shuffle of the label inventory picks which labels stay visible:
/// the first `m` shuffled labels are reindexed to `0..m` and feed
/// `train`/`id_valid`/`id_test`; the remaining `n` become `m..m+n` and feed
/// only `ood_valid`/`ood_test` (their train-share documents are dropped —
/// held-out labels must never be trained on). Every label is split with the
/// same shuffled test-then-valid-then-train cut, so set sizes stay
/// proportional per label.
pub fn build_semantic_shift_split(
    corpus: &LabeledCorpus,
    spec: &SplitSpec,
) -> Result<BenchmarkSplit> {
    if spec.shift_kind != ShiftKind::SemanticShift {
        return Err(Error::SplitSpec(
            "this builder requires shift_kind = semantic-shift".to_string(),
        ));
    }
    spec.validate_fractions()?;
    let total_labels = corpus.label_count();
    if spec.m < 2 {
        return Err(Error::SplitSpec(format!(
            "need m >= 2 visible labels, got m={}",
            spec.m
        )));
    }
    if spec.n < 1 {
        return Err(Error::SplitSpec(format!(
            "need n >= 1 held-out labels, got n={}",
            spec.n
        )));
    }
    if spec.m + spec.n != total_labels {
        return Err(Error::SplitSpec(format!(
            "m + n must cover the corpus labels: m={} + n={} != {total_labels}",
            spec.m, spec.n
        )));
    }

    let mut order: Vec<usize> = (0..total_labels).collect();
    let mut holdout_rng = rng::seeded(spec.seed, "label-holdout");
    rng::shuffle(&mut holdout_rng, &mut order);

    let names: Vec<String> = order
        .iter()
        .map(|&old| corpus.label_names[old].clone())
        .collect();
    let mut new_label_of = vec![0usize; total_labels];
    for (new, &old) in order.iter().enumerate() {
        new_label_of[old] = new;
    }

    let remap = |indices: &[usize], new_label: usize| -> Vec<Document> {
        indices
            .iter()
            .map(|&i| {
                let doc = &corpus.documents[i];
                Document {
                    id: doc.id.clone(),
                    text: doc.text.clone(),
                    label: new_label,
                    source: doc.source.clone(),
                }
            })
            .collect()
    };

    let mut split = BenchmarkSplit {
        train: Vec::new(),
        id_valid: Vec::new(),
        id_test: Vec::new(),
        ood_valid: Vec::new(),
        ood_test: Vec::new(),
        shift_kind: ShiftKind::SemanticShift,
        label_space: LabelSpace {
            id_labels: (0..spec.m).collect(),
            ood_labels: (spec.m..total_labels).collect(),
            names,
        },
    };

    for (new_label, &old_label) in order.iter().enumerate() {
        let name = &corpus.label_names[old_label];
        let visible = new_label < spec.m;
        let mut label_rng = rng::seeded(spec.seed, &format!("split-{name}"));
        let portions = partition_label(
            corpus.doc_indices_with_label(old_label),
            &mut label_rng,
            spec,
            name,
            visible,
        )?;
        let cap = spec.per_label_caps;
        if visible {
            split.train.extend(remap(capped(&portions.train, cap), new_label));
            split
                .id_valid
                .extend(remap(capped(&portions.valid, cap), new_label));
            split
                .id_test
                .extend(remap(capped(&portions.test, cap), new_label));
        } else {
            split
                .ood_valid
                .extend(remap(capped(&portions.valid, cap), new_label));
            split
                .ood_test
                .extend(remap(capped(&portions.test, cap), new_label));
        }
    }

    split.validate()?;
    Ok(split)
}

/// Pair a training corpus with a same-label corpus from a different source.
///
/// Both corpora must share one label inventory by name (order may differ; the
/// second corpus is remapped onto the first's indices) and must not share any
/// source tag. `train`/`id_valid`/`id_test` come from the first corpus;
/// `ood_valid`/`ood_test` take the test and valid shares of the second, with
/// the rest of the second corpus unused. `spec.m`/`spec.n` are ignored: the
/// shared inventory fixes the visible label count and no label is held out.
pub fn build_non_semantic_shift_split(
    id_corpus: &LabeledCorpus,
    ood_corpus: &LabeledCorpus,
    spec: &SplitSpec,
) -> Result<BenchmarkSplit> {
    if spec.shift_kind != ShiftKind::NonSemanticShift {
        return Err(Error::SplitSpec(
            "this builder requires shift_kind = non-semantic-shift".to_string(),
        ));
    }
    spec.validate_fractions()?;

    let left: BTreeSet<&str> = id_corpus.label_names.iter().map(String::as_str).collect();
    let right: BTreeSet<&str> = ood_corpus.label_names.iter().map(String::as_str).collect();
    if left != right {
        return Err(Error::LabelMismatch {
            only_left: left.difference(&right).map(|s| s.to_string()).collect(),
            only_right: right.difference(&left).map(|s| s.to_string()).collect(),
        });
    }
    if id_corpus.label_count() < 2 {
        return Err(Error::SplitSpec(format!(
            "need at least 2 shared labels, found {}",
            id_corpus.label_count()
        )));
    }

    let id_sources: HashSet<&str> = id_corpus.documents.iter().map(|d| d.source.as_str()).collect();
    let shared: Vec<&str> = ood_corpus
        .documents
        .iter()
        .map(|d| d.source.as_str())
        .filter(|s| id_sources.contains(s))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !shared.is_empty() {
        return Err(Error::SplitSpec(format!(
            "corpora must come from different sources; shared: {shared:?}"
        )));
    }

    let k = id_corpus.label_count();
    let mut split = BenchmarkSplit {
        train: Vec::new(),
        id_valid: Vec::new(),
        id_test: Vec::new(),
        ood_valid: Vec::new(),
        ood_test: Vec::new(),
        shift_kind: ShiftKind::NonSemanticShift,
        label_space: LabelSpace {
            id_labels: (0..k).collect(),
            ood_labels: Vec::new(),
            names: id_corpus.label_names.clone(),
        },
    };

    let collect = |corpus: &LabeledCorpus, indices: &[usize], label: usize| -> Vec<Document> {
        indices
            .iter()
            .map(|&i| {
                let doc = &corpus.documents[i];
                Document {
                    id: doc.id.clone(),
                    text: doc.text.clone(),
                    label,
                    source: doc.source.clone(),
                }
            })
            .collect()
    };

    let cap = spec.per_label_caps;
    for (label, name) in id_corpus.label_names.iter().enumerate() {
        let mut label_rng = rng::seeded(spec.seed, &format!("split-{name}"));
        let portions = partition_label(
            id_corpus.doc_indices_with_label(label),
            &mut label_rng,
            spec,
            name,
            true,
        )?;
        split
            .train
            .extend(collect(id_corpus, capped(&portions.train, cap), label));
        split
            .id_valid
            .extend(collect(id_corpus, capped(&portions.valid, cap), label));
        split
            .id_test
            .extend(collect(id_corpus, capped(&portions.test, cap), label));

        let ood_label = ood_corpus
            .label_names
            .iter()
            .position(|n| n == name)
            .expect("inventories verified equal");
        let mut ood_rng = rng::seeded(spec.seed, &format!("split-ood-{name}"));
        let portions = partition_label(
            ood_corpus.doc_indices_with_label(ood_label),
            &mut ood_rng,
            spec,
            name,
            false,
        )?;
        split
            .ood_valid
            .extend(collect(ood_corpus, capped(&portions.valid, cap), label));
        split
            .ood_test
            .extend(collect(ood_corpus, capped(&portions.test, cap), label));
    }

    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn make_corpus(source: &str, labels: &[(&str, usize)]) -> LabeledCorpus {
        let mut documents = Vec::new();
        let mut line = 0;
        for (label_idx, (_, count)) in labels.iter().enumerate() {
            for _ in 0..*count {
                line += 1;
                documents.push(Document {
                    id: format!("{source}:{line}"),
                    text: format!("document number {line}"),
                    label: label_idx,
                    source: source.to_string(),
                });
            }
        }
        LabeledCorpus::new(documents, labels.iter().map(|(n, _)| n.to_string()).collect())
    }

    fn ten_label_corpus() -> LabeledCorpus {
        let labels: Vec<(String, usize)> =
            (0..10).map(|i| (format!("topic{i}"), 12)).collect();
        let borrowed: Vec<(&str, usize)> =
            labels.iter().map(|(n, c)| (n.as_str(), *c)).collect();
        make_corpus("news", &borrowed)
    }

    fn spec(shift_kind: ShiftKind, m: usize, n: usize) -> SplitSpec {
        SplitSpec {
            shift_kind,
            m,
            n,
            per_label_caps: None,
            seed: 7,
            valid_fraction: 0.25,
            test_fraction: 0.25,
        }
    }

    fn labels_in(docs: &[Document]) -> std::collections::BTreeSet<usize> {
        docs.iter().map(|d| d.label).collect()
    }

    #[test]
    fn nine_visible_one_held_out() {
        let corpus = ten_label_corpus();
        let split =
            build_semantic_shift_split(&corpus, &spec(ShiftKind::SemanticShift, 9, 1)).unwrap();
        assert_eq!(labels_in(&split.train).len(), 9);
        assert_eq!(labels_in(&split.id_test).len(), 9);
        assert_eq!(labels_in(&split.ood_test).len(), 1);
        assert_eq!(labels_in(&split.ood_valid), labels_in(&split.ood_test));
        assert_eq!(split.label_space.k(), 9);
        assert_eq!(split.label_space.t(), 1);
        // 12 docs per label at 0.25/0.25: 3 test, 3 valid, 6 train.
        assert_eq!(split.train.len(), 9 * 6);
        assert_eq!(split.id_valid.len(), 9 * 3);
        assert_eq!(split.ood_test.len(), 3);
    }

    #[test]
    fn two_visible_eight_held_out() {
        let corpus = ten_label_corpus();
        let split =
            build_semantic_shift_split(&corpus, &spec(ShiftKind::SemanticShift, 2, 8)).unwrap();
        assert_eq!(labels_in(&split.train).len(), 2);
        assert_eq!(labels_in(&split.ood_test).len(), 8);
        assert!(labels_in(&split.ood_test)
            .iter()
            .all(|l| *l >= 2 && *l < 10));
    }

    #[test]
    fn same_seed_rebuilds_identically() {
        let corpus = ten_label_corpus();
        let s = spec(ShiftKind::SemanticShift, 6, 4);
        let a = build_semantic_shift_split(&corpus, &s).unwrap();
        let b = build_semantic_shift_split(&corpus, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_changes_the_split() {
        let corpus = ten_label_corpus();
        let mut s = spec(ShiftKind::SemanticShift, 6, 4);
        let a = build_semantic_shift_split(&corpus, &s).unwrap();
        s.seed = 8;
        let b = build_semantic_shift_split(&corpus, &s).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn held_out_labels_never_reach_training() {
        let corpus = ten_label_corpus();
        let split =
            build_semantic_shift_split(&corpus, &spec(ShiftKind::SemanticShift, 5, 5)).unwrap();
        let id: std::collections::BTreeSet<usize> =
            split.label_space.id_labels.iter().copied().collect();
        assert!(labels_in(&split.ood_valid).is_disjoint(&id));
        assert!(labels_in(&split.ood_test).is_disjoint(&id));
    }

    #[test]
    fn insufficient_label_is_named() {
        let corpus = make_corpus("tiny", &[("big", 12), ("small", 2), ("other", 12)]);
        let err = build_semantic_shift_split(&corpus, &spec(ShiftKind::SemanticShift, 2, 1))
            .unwrap_err();
        match err {
            Error::InsufficientLabel(name, need, found) => {
                assert_eq!(name, "small");
                assert_eq!(found, 2);
                assert!(need > found);
            }
            other => panic!("expected InsufficientLabel, got {other}"),
        }
    }

    #[test]
    fn label_counts_must_cover_corpus() {
        let corpus = ten_label_corpus();
        let err = build_semantic_shift_split(&corpus, &spec(ShiftKind::SemanticShift, 6, 5))
            .unwrap_err();
        assert!(matches!(err, Error::SplitSpec(_)), "{err}");
    }

    #[test]
    fn caps_bound_every_set_per_label() {
        let corpus = ten_label_corpus();
        let mut s = spec(ShiftKind::SemanticShift, 8, 2);
        s.per_label_caps = Some(2);
        let split = build_semantic_shift_split(&corpus, &s).unwrap();
        for (_, docs) in split.sets() {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for d in docs {
                *counts.entry(d.label).or_default() += 1;
            }
            assert!(counts.values().all(|&c| c <= 2));
        }
    }

    fn nss_pair() -> (LabeledCorpus, LabeledCorpus) {
        let labels = [("world", 12), ("sport", 12), ("biz", 12), ("tech", 12)];
        let id_corpus = make_corpus("headlines", &labels);
        let ood_corpus = make_corpus("archive", &labels);
        (id_corpus, ood_corpus)
    }

    #[test]
    fn same_labels_different_source() {
        let (id_corpus, ood_corpus) = nss_pair();
        let split = build_non_semantic_shift_split(
            &id_corpus,
            &ood_corpus,
            &spec(ShiftKind::NonSemanticShift, 0, 0),
        )
        .unwrap();
        assert_eq!(split.label_space.k(), 4);
        assert_eq!(split.label_space.t(), 0);
        assert_eq!(labels_in(&split.ood_test).len(), 4);
        assert!(split.ood_test.iter().all(|d| d.source == "archive"));
        assert!(split.train.iter().all(|d| d.source == "headlines"));
        assert_eq!(split.ood_valid.len(), 4 * 3);
        assert_eq!(split.ood_test.len(), 4 * 3);
    }

    #[test]
    fn missing_label_reports_difference() {
        let id_corpus = make_corpus("headlines", &[("world", 12), ("sport", 12), ("biz", 12)]);
        let ood_corpus = make_corpus("archive", &[("world", 12), ("sport", 12)]);
        let err = build_non_semantic_shift_split(
            &id_corpus,
            &ood_corpus,
            &spec(ShiftKind::NonSemanticShift, 0, 0),
        )
        .unwrap_err();
        match err {
            Error::LabelMismatch {
                only_left,
                only_right,
            } => {
                assert_eq!(only_left, vec!["biz"]);
                assert!(only_right.is_empty());
            }
            other => panic!("expected LabelMismatch, got {other}"),
        }
    }

    #[test]
    fn second_corpus_is_remapped_by_name() {
        let id_corpus = make_corpus("headlines", &[("world", 12), ("sport", 12)]);
        // Opposite first-appearance order in the second corpus.
        let ood_corpus = make_corpus("archive", &[("sport", 12), ("world", 12)]);
        let split = build_non_semantic_shift_split(
            &id_corpus,
            &ood_corpus,
            &spec(ShiftKind::NonSemanticShift, 0, 0),
        )
        .unwrap();
        // In the second corpus, lines 1..=12 are "sport" docs; their split
        // label index must be the first corpus's index for "sport", i.e. 1.
        for doc in split.ood_test.iter().chain(&split.ood_valid) {
            let line: usize = doc.id.rsplit(':').next().unwrap().parse().unwrap();
            let expected = if line <= 12 { 1 } else { 0 };
            assert_eq!(doc.label, expected, "doc {}", doc.id);
        }
    }

    #[test]
    fn shared_sources_are_rejected() {
        let labels = [("world", 12), ("sport", 12)];
        let id_corpus = make_corpus("same", &labels);
        let ood_corpus = make_corpus("same", &labels);
        let err = build_non_semantic_shift_split(
            &id_corpus,
            &ood_corpus,
            &spec(ShiftKind::NonSemanticShift, 0, 0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("same"), "{err}");
    }

    #[test]
    fn nss_caps_apply() {
        let (id_corpus, ood_corpus) = nss_pair();
        let mut s = spec(ShiftKind::NonSemanticShift, 0, 0);
        s.per_label_caps = Some(2);
        let split = build_non_semantic_shift_split(&id_corpus, &ood_corpus, &s).unwrap();
        for (_, docs) in split.sets() {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for d in docs {
                *counts.entry(d.label).or_default() += 1;
            }
            assert!(counts.values().all(|&c| c <= 2));
        }
    }

    proptest! {
        #[test]
        fn random_corpora_satisfy_invariants(
            num_labels in 3usize..6,
            docs_per_label in 8usize..24,
            seed in 0u64..1000,
            m in 2usize..4,
        ) {
            prop_assume!(m < num_labels);
            let labels: Vec<(String, usize)> = (0..num_labels)
                .map(|i| (format!("l{i}"), docs_per_label))
                .collect();
            let borrowed: Vec<(&str, usize)> =
                labels.iter().map(|(n, c)| (n.as_str(), *c)).collect();
            let corpus = make_corpus("gen", &borrowed);
            let s = SplitSpec {
                shift_kind: ShiftKind::SemanticShift,
                m,
                n: num_labels - m,
                per_label_caps: None,
                seed,
                valid_fraction: 0.25,
                test_fraction: 0.25,
            };
            let split = build_semantic_shift_split(&corpus, &s).unwrap();
            split.validate().unwrap();
            // Purity: rebuilding from the same inputs yields the same split.
            let again = build_semantic_shift_split(&corpus, &s).unwrap();
            prop_assert_eq!(split, again);
        }
    }
}
