//! Document featurization: tokenization, hashed bag-of-words, and
//! embedding-average representations.
//!
//! Both featurizers are order-free and training-free, which keeps every run
//! deterministic and lets sub-model trainings share one immutable featurizer.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lowercased tokens of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<String>,
}

/// Fixed-dimension real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Word-vector lookup table with a fallback for unknown tokens.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    fallback: Vec<f64>,
}

impl EmbeddingTable {
    /// Build a table from explicit entries. The fallback is the zero vector.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        let mut vectors = HashMap::new();
        for (token, v) in entries {
            assert_eq!(v.len(), dim, "embedding entry dimension mismatch");
            vectors.entry(token).or_insert(v);
        }
        EmbeddingTable {
            dim,
            vectors,
            fallback: vec![0.0; dim],
        }
    }

    pub fn get(&self, token: &str) -> &[f64] {
        self.vectors
            .get(token)
            .map(Vec::as_slice)
            .unwrap_or(&self.fallback)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn fallback(&self) -> &[f64] {
        &self.fallback
    }
}

/// Lowercase, split on Unicode whitespace, and strip surrounding
/// non-alphanumeric characters from each token. Tokens that strip to nothing
/// (pure punctuation) are dropped.
pub fn tokenize(text: &str) -> TokenStream {
    let tokens = text
        .split_whitespace()
        .map(|raw| {
            raw.to_lowercase()
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect();
    TokenStream { tokens }
}

/// FNV-1a over the token bytes, seeded. Stated here because the bucket layout
/// is part of the on-disk featurizer contract: any platform hashing the same
/// token with the same seed lands in the same bucket.
fn fnv1a_seeded(token: &str, seed: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x1000_0000_01b3;
    let mut h = FNV_OFFSET ^ seed;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash each token into one of `dim` buckets, count, and L2-normalize.
/// An empty token stream yields the zero vector.
pub fn featurize_hashed_bow(tokens: &TokenStream, dim: usize, hash_seed: u64) -> FeatureVector {
    assert!(dim >= 1, "hashed bag-of-words needs dim >= 1");
    let mut values = vec![0.0; dim];
    for token in &tokens.tokens {
        let bucket = (fnv1a_seeded(token, hash_seed) % dim as u64) as usize;
        values[bucket] += 1.0;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    FeatureVector::new(values)
}

/// Arithmetic mean of per-token vectors; unknown tokens use the table
/// fallback. An empty token stream yields the fallback vector itself.
pub fn featurize_embedding_average(tokens: &TokenStream, table: &EmbeddingTable) -> FeatureVector {
    if tokens.tokens.is_empty() {
        return FeatureVector::new(table.fallback().to_vec());
    }
    let mut values = vec![0.0; table.dim];
    for token in &tokens.tokens {
        let v = table.get(token);
        for (acc, x) in values.iter_mut().zip(v) {
            *acc += x;
        }
    }
    let n = tokens.tokens.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    FeatureVector::new(values)
}

/// Parse a GloVe-style plain-text word-vector file: one entry per line, the
/// token followed by `dim` whitespace-separated decimal floats.
///
/// Duplicate tokens keep the first occurrence (a warning is logged). A row
/// with the wrong float count or an unparseable float is an error naming the
/// line.
pub fn load_embedding_table(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        let floats: Vec<&str> = parts.collect();
        if floats.len() != dim {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {dim} floats after token, found {}", floats.len()),
            ));
        }
        let mut v = Vec::with_capacity(dim);
        for f in floats {
            let x: f64 = f.parse().map_err(|_| {
                Error::parse(path, line_no, format!("unparseable float {f:?}"))
            })?;
            v.push(x);
        }
        if vectors.contains_key(token) {
            log::warn!("duplicate embedding for {token:?} at line {line_no}; keeping first");
            continue;
        }
        vectors.insert(token.to_string(), v);
    }
    Ok(EmbeddingTable {
        dim,
        vectors,
        fallback: vec![0.0; dim],
    })
}

/// Serializable featurizer description, stored alongside model checkpoints so
/// evaluation rebuilds the identical feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeaturizerConfig {
    HashedBow {
        dim: usize,
        hash_seed: u64,
        /// Bucket hash identity, recorded for reproducibility across machines.
        #[serde(default = "default_hash_name")]
        hash: String,
    },
    EmbeddingAverage {
        path: String,
        dim: usize,
    },
}

fn default_hash_name() -> String {
    "fnv1a-64".to_string()
}

impl FeaturizerConfig {
    pub fn hashed_bow(dim: usize, hash_seed: u64) -> Self {
        FeaturizerConfig::HashedBow {
            dim,
            hash_seed,
            hash: default_hash_name(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeaturizerConfig::HashedBow { dim, .. } => *dim,
            FeaturizerConfig::EmbeddingAverage { dim, .. } => *dim,
        }
    }

    /// Instantiate the featurizer, loading the embedding table if needed.
    pub fn build(&self) -> Result<Featurizer> {
        match self {
            FeaturizerConfig::HashedBow { dim, hash_seed, .. } => Ok(Featurizer::HashedBow {
                dim: *dim,
                hash_seed: *hash_seed,
            }),
            FeaturizerConfig::EmbeddingAverage { path, dim } => {
                let table = load_embedding_table(Path::new(path), *dim)?;
                Ok(Featurizer::EmbeddingAverage { table })
            }
        }
    }
}

/// A ready-to-use featurizer. Immutable after construction; safe to share
/// across concurrent training tasks.
#[derive(Debug, Clone)]
pub enum Featurizer {
    HashedBow { dim: usize, hash_seed: u64 },
    EmbeddingAverage { table: EmbeddingTable },
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::HashedBow { dim, .. } => *dim,
            Featurizer::EmbeddingAverage { table } => table.dim,
        }
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        let tokens = tokenize(text);
        match self {
            Featurizer::HashedBow { dim, hash_seed } => {
                featurize_hashed_bow(&tokens, *dim, *hash_seed)
            }
            Featurizer::EmbeddingAverage { table } => featurize_embedding_average(&tokens, table),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn tokenize_strips_surrounding_punctuation() {
        assert_eq!(tokenize("The cat, sat.").tokens, vec!["the", "cat", "sat"]);
    }

    #[test]
    fn tokenize_empty_input() {
        assert!(tokenize("").tokens.is_empty());
    }

    #[test]
    fn tokenize_collapses_whitespace() {
        assert_eq!(tokenize("A  A\tA").tokens, vec!["a", "a", "a"]);
    }

    #[test]
    fn tokenize_drops_pure_punctuation() {
        assert_eq!(tokenize("-- hello !!").tokens, vec!["hello"]);
        assert_eq!(tokenize("don't stop").tokens, vec!["don't", "stop"]);
    }

    #[test]
    fn hashed_bow_single_bucket_has_unit_norm() {
        let tokens = TokenStream {
            tokens: vec!["x".into(), "x".into()],
        };
        let v = featurize_hashed_bow(&tokens, 16, 0);
        let nonzero: Vec<f64> = v.values.iter().copied().filter(|x| *x != 0.0).collect();
        assert_eq!(nonzero, vec![1.0]);
    }

    #[test]
    fn hashed_bow_empty_is_zero_vector() {
        let v = featurize_hashed_bow(&TokenStream { tokens: vec![] }, 8, 0);
        assert_eq!(v.values, vec![0.0; 8]);
    }

    #[test]
    fn hashed_bow_is_deterministic() {
        let tokens = tokenize("one two three two");
        let a = featurize_hashed_bow(&tokens, 32, 99);
        let b = featurize_hashed_bow(&tokens, 32, 99);
        assert_eq!(a, b);
    }

    #[test]
    fn hashed_bow_seed_changes_layout() {
        let tokens = tokenize("one two three");
        let a = featurize_hashed_bow(&tokens, 1024, 0);
        let b = featurize_hashed_bow(&tokens, 1024, 1);
        assert_ne!(a, b);
    }

    #[test]
    fn embedding_average_of_two() {
        let table = EmbeddingTable::from_entries(
            2,
            vec![
                ("a".to_string(), vec![1.0, 0.0]),
                ("b".to_string(), vec![0.0, 1.0]),
            ],
        );
        let v = featurize_embedding_average(&tokenize("a b"), &table);
        assert_eq!(v.values, vec![0.5, 0.5]);
    }

    #[test]
    fn embedding_average_all_oov_is_fallback() {
        let table = EmbeddingTable::from_entries(3, vec![("a".to_string(), vec![1.0, 2.0, 3.0])]);
        let v = featurize_embedding_average(&tokenize("zz yy"), &table);
        assert_eq!(v.values, vec![0.0, 0.0, 0.0]);
        let empty = featurize_embedding_average(&tokenize(""), &table);
        assert_eq!(empty.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_average_single_token_is_identity() {
        let table = EmbeddingTable::from_entries(2, vec![("a".to_string(), vec![0.25, -1.5])]);
        let v = featurize_embedding_average(&tokenize("a"), &table);
        assert_eq!(v.values, vec![0.25, -1.5]);
    }

    #[test]
    fn load_embedding_table_parses_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 1.0 2.0 3.0").unwrap();
        writeln!(f, "dog -1 0.5 0").unwrap();
        let table = load_embedding_table(f.path(), 3).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.get("cat"), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn load_embedding_table_wrong_count_names_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 1.0 2.0 3.0").unwrap();
        writeln!(f, "dog 1.0 2.0").unwrap();
        let err = load_embedding_table(f.path(), 3).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn load_embedding_table_bad_float_names_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 1.0 x 3.0").unwrap();
        let err = load_embedding_table(f.path(), 3).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn load_embedding_table_duplicate_keeps_first() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 1.0 2.0").unwrap();
        writeln!(f, "cat 9.0 9.0").unwrap();
        let table = load_embedding_table(f.path(), 2).unwrap();
        assert_eq!(table.get("cat"), &[1.0, 2.0]);
    }

    #[test]
    fn featurizer_config_round_trips() {
        let cfg = FeaturizerConfig::hashed_bow(64, 5);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: FeaturizerConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let f = back.build().unwrap();
        assert_eq!(f.dim(), 64);
    }
}
