//! Deterministic synthetic corpora for desk-scale experiments and tests.

use super::{Document, LabeledCorpus};
use crate::rng;

/// Tokens per generated document.
const DOC_LEN: usize = 20;

/// Generate a corpus whose labels are recoverable by keyword occurrence.
///
/// Label `i` owns the disjoint keyword set `{k<i>w0 .. k<i>w<v-1>}`. Each
/// document draws [`DOC_LEN`] tokens: with probability `noise_rate` a token
/// comes uniformly from the union of every label's keywords (carrying zero
/// class information), otherwise uniformly from the document's own label
/// set. At `noise_rate = 0` documents contain only their own label's
/// keywords; at `noise_rate = 1` the corpus carries no label signal at all.
///
/// Output is a pure function of the arguments; the source tag embeds the
/// seed so corpora from different seeds never share document ids.
pub fn generate_synthetic_corpus(
    num_labels: usize,
    docs_per_label: usize,
    vocab_per_label: usize,
    noise_rate: f64,
    seed: u64,
) -> LabeledCorpus {
    assert!(num_labels >= 2, "need at least 2 labels, got {num_labels}");
    assert!(vocab_per_label >= 1, "need at least 1 keyword per label");
    assert!(
        (0.0..=1.0).contains(&noise_rate),
        "noise_rate must lie in [0,1], got {noise_rate}"
    );

    let source = format!("synthetic-{seed}");
    let mut rng = rng::seeded(seed, "synthetic-corpus");
    let mut documents = Vec::with_capacity(num_labels * docs_per_label);
    let mut line = 0usize;
    for label in 0..num_labels {
        for _ in 0..docs_per_label {
            line += 1;
            let mut tokens = Vec::with_capacity(DOC_LEN);
            for _ in 0..DOC_LEN {
                let from_label = if rng::uniform_f64(&mut rng) < noise_rate {
                    rng::index(&mut rng, num_labels)
                } else {
                    label
                };
                let word = rng::index(&mut rng, vocab_per_label);
                tokens.push(format!("k{from_label}w{word}"));
            }
            documents.push(Document {
                id: format!("{source}:{line}"),
                text: tokens.join(" "),
                label,
                source: source.clone(),
            });
        }
    }
    let label_names = (0..num_labels).map(|i| format!("label{i}")).collect();
    LabeledCorpus::new(documents, label_names)
}
