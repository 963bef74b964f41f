//! Out-of-distribution detection for text classification via a k-fold
//! leave-one-label-out ensemble.
//!
//! The library trains `k` sub-models for a `k`-label task, each with one label
//! masked. Masked-label examples are pushed toward the uniform distribution by
//! a KL penalty, so the assembled ensemble answers confidently on in-distribution
//! inputs and flatly on everything else. Around that core sit:
//!
//! - [`corpus`]: labeled-corpus ingestion, semantic/non-semantic-shift benchmark
//!   splits, and a deterministic synthetic corpus generator,
//! - [`features`]: tokenization plus hashed bag-of-words and embedding-average
//!   featurizers,
//! - [`net`]: linear and one-hidden-layer MLP backbones with analytic gradients
//!   and an Adam trainer,
//! - [`kfolden`]: the leave-one-label-out ensemble and the vanilla-ensemble
//!   baseline,
//! - [`detect`]: OOD scorers (max softmax probability, temperature scaling,
//!   Mahalanobis distance, MC dropout, and the k-fold ensemble variants),
//! - [`metrics`]: AUROC, AUPR with OOD positive, TNR@95TPR, ID accuracy, and
//!   the thresholded OOD error rate.
//!
//! Everything is deterministic for a fixed seed: sub-model training, dropout
//! sampling, split construction, and scoring all derive their randomness from
//! explicit seeds, and parallel execution (see [`exec`]) never changes results.

pub mod checkpoint;
pub mod corpus;
pub mod detect;
mod error;
pub mod exec;
pub mod features;
pub mod kfolden;
pub mod metrics;
pub mod net;
pub mod rng;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
