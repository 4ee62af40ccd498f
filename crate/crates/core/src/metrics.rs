//! Coverage, closed-form expected coverage, diversity and repetition.

use std::collections::HashSet;

use serde::Serialize;

use crate::cache_sim::PrefixTrie;
use crate::model::TokenId;
use crate::num::{CompensatedSum, Probability};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("sequence {index} duplicates an earlier sequence")]
    DuplicateSequences { index: usize },
    #[error("sequence of length {len} has no {n}-grams")]
    SequenceTooShort { len: usize, n: usize },
    #[error("n must be at least 1")]
    ZeroN,
}

/// A coverage value with the absolute error bound of its summation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage<P> {
    pub value: P,
    pub error_bound: P,
}

/// Total mass of a set of distinct sequences.
pub fn coverage<P, S>(leaves: &[(S, P)]) -> Result<Coverage<P>, MetricsError>
where
    P: Probability,
    S: AsRef<[TokenId]>,
{
    let mut seen = HashSet::with_capacity(leaves.len());
    let mut sum = CompensatedSum::new();
    for (index, (seq, q)) in leaves.iter().enumerate() {
        if !seen.insert(seq.as_ref()) {
            return Err(MetricsError::DuplicateSequences { index });
        }
        sum.add(*q);
    }
    let value = sum.value();
    debug_assert!(value >= P::zero() && value <= P::one() + P::sum_tolerance() * P::of(leaves.len().max(1) as f64));
    Ok(Coverage {
        value,
        error_bound: sum.error_bound(),
    })
}

/// Per-k coverage of an ordered leaf list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub per_k: Vec<f64>,
    pub final_coverage: f64,
    pub error_bound: f64,
    pub method: String,
}

impl CoverageReport {
    /// `per_k[i]` is the coverage of the first `i + 1` leaves.
    pub fn from_ordered<P, S>(leaves: &[(S, P)], method: impl Into<String>) -> Result<Self, MetricsError>
    where
        P: Probability,
        S: AsRef<[TokenId]>,
    {
        let total = coverage(leaves)?;
        let mut sum = CompensatedSum::new();
        let per_k = leaves
            .iter()
            .map(|(_, q)| {
                sum.add(*q);
                sum.value().as_f64()
            })
            .collect();
        Ok(Self {
            per_k,
            final_coverage: total.value.as_f64(),
            error_bound: total.error_bound.as_f64(),
            method: method.into(),
        })
    }
}

fn survival<P: Probability>(q: P, k: u64) -> P {
    let base = P::one() - q;
    match i32::try_from(k) {
        Ok(k) => base.powi(k),
        Err(_) => base.powf(P::of(k as f64)),
    }
}

/// Expected mass of the distinct set obtained from `k` independent draws:
/// `Σ Q (1 − (1 − Q)^k)`.
pub fn expected_coverage_closed_form<P: Probability>(masses: &[P], k: u64) -> P {
    let mut sum = CompensatedSum::new();
    for &q in masses {
        sum.add(q * (P::one() - survival(q, k)));
    }
    sum.value()
}

/// Expected gain of draw `k + 1`: `Σ Q² (1 − Q)^k`.
pub fn marginal_gain_closed_form<P: Probability>(masses: &[P], k: u64) -> P {
    let mut sum = CompensatedSum::new();
    for &q in masses {
        sum.add(q * q * survival(q, k));
    }
    sum.value()
}

/// Unique n-grams over all n-grams of `tokens`.
pub fn distinct_n<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroN);
    }
    if tokens.len() < n {
        return Err(MetricsError::SequenceTooShort { len: tokens.len(), n });
    }
    let windows = tokens.windows(n);
    let total = windows.len();
    let unique: HashSet<&[T]> = windows.collect();
    Ok(unique.len() as f64 / total as f64)
}

/// Repeated-prefix tokens over total tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Repetition {
    pub repeated: usize,
    pub total: usize,
}

impl Repetition {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.repeated as f64 / self.total as f64
        }
    }
}

/// Counts, for each generation after the first, the longest prefix it
/// shares with any earlier generation of the same question.
pub fn repetition(generations: &[Vec<TokenId>]) -> Repetition {
    let mut trie = PrefixTrie::new();
    let mut out = Repetition::default();
    for g in generations {
        out.repeated += trie.longest_prefix(g);
        out.total += g.len();
        trie.insert(g);
    }
    out
}

pub fn repetition_rate(generations: &[Vec<TokenId>]) -> f64 {
    repetition(generations).rate()
}

/// Token-weighted rate over several questions.
pub fn repetition_rate_batch(questions: &[Vec<Vec<TokenId>>]) -> Repetition {
    questions.iter().map(|q| repetition(q)).fold(Repetition::default(), |a, b| Repetition {
        repeated: a.repeated + b.repeated,
        total: a.total + b.total,
    })
}
