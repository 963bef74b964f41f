//! Labeled text corpora and the five-set benchmark splits used for
//! out-of-distribution evaluation.
//!
//! A benchmark split separates a corpus into `train` / `id_valid` / `id_test`
//! over the visible (in-distribution) labels plus `ood_valid` / `ood_test`
//! holding the distribution shift: either documents of held-out labels
//! (semantic shift) or same-label documents from a different source
//! (non-semantic shift).

mod io;
mod split;
mod synthetic;

pub use io::{load_corpus, read_split, write_split, CorpusFormat};
pub use io::write_atomic;
pub use split::{build_non_semantic_shift_split, build_semantic_shift_split};
pub use synthetic::generate_synthetic_corpus;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One labeled text document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    /// Unique within any corpus or split; formed as `source:line`.
    pub id: String,
    pub text: String,
    /// Index into the owning corpus's (or split's) label inventory.
    pub label: usize,
    /// Tag identifying the corpus of origin.
    pub source: String,
}

/// Documents plus their label inventory, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub documents: Vec<Document>,
    pub label_names: Vec<String>,
}

impl LabeledCorpus {
    pub fn new(documents: Vec<Document>, label_names: Vec<String>) -> Self {
        debug_assert!(documents.iter().all(|d| d.label < label_names.len()));
        LabeledCorpus {
            documents,
            label_names,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn label_count(&self) -> usize {
        self.label_names.len()
    }

    /// Positions of all documents carrying `label`, in corpus order.
    pub fn doc_indices_with_label(&self, label: usize) -> Vec<usize> {
        self.documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Which kind of distribution shift a split encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// Held-out documents come from labels never seen in training.
    SemanticShift,
    /// Held-out documents carry training labels but come from another source.
    NonSemanticShift,
}

/// Partition of label indices into visible and held-out sets.
///
/// Indices are contiguous: visible labels are `0..k` and held-out labels are
/// `k..k+t`, so classifier outputs can use label indices directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    pub id_labels: Vec<usize>,
    pub ood_labels: Vec<usize>,
    /// Name of every label index, visible first.
    pub names: Vec<String>,
}

impl LabelSpace {
    /// Number of visible labels.
    pub fn k(&self) -> usize {
        self.id_labels.len()
    }

    /// Number of held-out labels (zero for non-semantic shift).
    pub fn t(&self) -> usize {
        self.ood_labels.len()
    }

    pub fn name_of(&self, label: usize) -> &str {
        &self.names[label]
    }

    fn validate(&self) -> Result<()> {
        if self.k() < 2 {
            return Err(Error::SplitInvariant(format!(
                "need at least 2 visible labels, found {}",
                self.k()
            )));
        }
        let expected_id: Vec<usize> = (0..self.k()).collect();
        let expected_ood: Vec<usize> = (self.k()..self.k() + self.t()).collect();
        if self.id_labels != expected_id || self.ood_labels != expected_ood {
            return Err(Error::SplitInvariant(
                "label indices must be contiguous: visible 0..k, held-out k..k+t".to_string(),
            ));
        }
        if self.names.len() != self.k() + self.t() {
            return Err(Error::SplitInvariant(format!(
                "have {} label names for {} labels",
                self.names.len(),
                self.k() + self.t()
            )));
        }
        Ok(())
    }
}

/// The five evaluation sets plus their label space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkSplit {
    pub train: Vec<Document>,
    pub id_valid: Vec<Document>,
    pub id_test: Vec<Document>,
    pub ood_valid: Vec<Document>,
    pub ood_test: Vec<Document>,
    pub shift_kind: ShiftKind,
    pub label_space: LabelSpace,
}

impl BenchmarkSplit {
    /// The five sets with their canonical file-stem names.
    pub fn sets(&self) -> [(&'static str, &[Document]); 5] {
        [
            ("train", &self.train),
            ("id_valid", &self.id_valid),
            ("id_test", &self.id_test),
            ("ood_valid", &self.ood_valid),
            ("ood_test", &self.ood_test),
        ]
    }

    /// Check every structural invariant, returning the first violation.
    ///
    /// Covers: pairwise id-disjointness of the five sets; label ranges per
    /// set; for semantic shift, that no held-out document carries a visible
    /// label; for non-semantic shift, that held-out and train sources never
    /// overlap.
    pub fn validate(&self) -> Result<()> {
        self.label_space.validate()?;
        let mut seen: HashSet<&str> = HashSet::new();
        for (set_name, docs) in self.sets() {
            for doc in docs {
                if !seen.insert(doc.id.as_str()) {
                    return Err(Error::SplitInvariant(format!(
                        "document {:?} appears in more than one set (second sighting in {set_name})",
                        doc.id
                    )));
                }
            }
        }
        let id_set: HashSet<usize> = self.label_space.id_labels.iter().copied().collect();
        let ood_set: HashSet<usize> = self.label_space.ood_labels.iter().copied().collect();
        for (set_name, docs) in [
            ("train", &self.train),
            ("id_valid", &self.id_valid),
            ("id_test", &self.id_test),
        ] {
            for doc in docs {
                if !id_set.contains(&doc.label) {
                    return Err(Error::SplitInvariant(format!(
                        "{set_name} document {:?} carries non-visible label {}",
                        doc.id, doc.label
                    )));
                }
            }
        }
        for (set_name, docs) in [("ood_valid", &self.ood_valid), ("ood_test", &self.ood_test)] {
            for doc in docs {
                match self.shift_kind {
                    ShiftKind::SemanticShift => {
                        if !ood_set.contains(&doc.label) {
                            return Err(Error::SplitInvariant(format!(
                                "{set_name} document {:?} carries visible label {} under semantic shift",
                                doc.id, doc.label
                            )));
                        }
                    }
                    ShiftKind::NonSemanticShift => {
                        if !id_set.contains(&doc.label) {
                            return Err(Error::SplitInvariant(format!(
                                "{set_name} document {:?} carries unknown label {}",
                                doc.id, doc.label
                            )));
                        }
                    }
                }
            }
        }
        if self.shift_kind == ShiftKind::NonSemanticShift {
            let train_sources: HashSet<&str> =
                self.train.iter().map(|d| d.source.as_str()).collect();
            for docs in [&self.ood_valid, &self.ood_test] {
                for doc in docs.iter() {
                    if train_sources.contains(doc.source.as_str()) {
                        return Err(Error::SplitInvariant(format!(
                            "held-out document {:?} shares source {:?} with the train set",
                            doc.id, doc.source
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Recipe for constructing a [`BenchmarkSplit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub shift_kind: ShiftKind,
    /// Visible label count (semantic shift only; ignored otherwise).
    pub m: usize,
    /// Held-out label count (semantic shift only; ignored otherwise).
    pub n: usize,
    /// Per-set, per-label document cap applied after splitting.
    pub per_label_caps: Option<usize>,
    pub seed: u64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl SplitSpec {
    pub(crate) fn validate_fractions(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(self.valid_fraction) || !ok(self.test_fraction) {
            return Err(Error::SplitSpec(format!(
                "fractions must lie in (0,1): valid={}, test={}",
                self.valid_fraction, self.test_fraction
            )));
        }
        if self.valid_fraction + self.test_fraction >= 1.0 {
            return Err(Error::SplitSpec(format!(
                "valid_fraction + test_fraction must stay below 1, got {}",
                self.valid_fraction + self.test_fraction
            )));
        }
        Ok(())
    }
}
