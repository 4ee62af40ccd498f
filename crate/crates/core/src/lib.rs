//! Distinct leaf enumeration (DLE) over truncated next-token distributions.
//!
//! A truncation rule turns every next-token distribution into a small active
//! set, which defines a finite pruned decoding tree. [`dle::enumerate`]
//! walks that tree deterministically and returns distinct leaves in policy
//! order. [`baseline`] samples the same distribution with replacement,
//! [`metrics`] and [`cache_sim`] score both, and [`oracle`] provides
//! brute-force ground truth.
//!
//! The numeric core is generic over [`Probability`] (`f32` or `f64`). The
//! aliases below fix the scalar for the common case.

pub mod aggregate;
pub mod baseline;
pub mod cache_sim;
pub mod dle;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod num;
pub mod oracle;
pub mod rng;
pub mod tree;
pub mod truncation;

pub use aggregate::{majority_vote, pass_at_k, AnswerExtractor, VoteResult, Weighting, UNPARSED};
pub use baseline::{sample_sequences, sample_with_token_budget, Draw, SampleRun};
pub use cache_sim::{simulate, theoretical_hit_count, CacheStats, Eviction, PrefixCache};
pub use dle::{enumerate, BranchPolicy, Budget, DleError, EarlyStopConfig, EnumerationResult, Leaf, StopReason};
pub use metrics::{coverage, distinct_n, expected_coverage_closed_form, marginal_gain_closed_form, repetition_rate};
pub use model::{LanguageModel, ModelError, ModelSpec, NextTokenDistribution, NgramModel, TableModel, TokenId};
pub use num::Probability;
pub use tree::{NodeId, PrunedTree};
pub use truncation::{active_set, ActiveSet, TruncationRule};

pub type Distribution = NextTokenDistribution<f64>;
pub type Rule = TruncationRule<f64>;
pub type Active = ActiveSet<f64>;
pub type Tree = PrunedTree<f64>;
pub type Enumeration = EnumerationResult<f64>;
pub type LeafF64 = Leaf<f64>;
pub type Sample = SampleRun<f64>;

pub type Distribution32 = NextTokenDistribution<f32>;
pub type Rule32 = TruncationRule<f32>;
pub type Enumeration32 = EnumerationResult<f32>;
