//! Answer extraction, majority voting and pass@k.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::Serialize;

use crate::num::Probability;

/// Label for completions the extractor could not parse. It never wins.
pub const UNPARSED: &str = "__unparsed__";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregateError {
    #[error("no labeled leaves to vote over")]
    EmptyInput,
    #[error("invalid extractor {0:?}")]
    InvalidExtractor(String),
    #[error("invalid weighting {0:?} (expected uniform|prob)")]
    InvalidWeighting(String),
}

#[derive(Debug, Clone)]
pub enum AnswerExtractor {
    /// The whole completion, trimmed.
    Identity,
    /// Text after the last occurrence of the delimiter, trimmed.
    Suffix(String),
    /// Capture group of the first match.
    Regex { pattern: Regex, group: usize },
}

impl AnswerExtractor {
    pub fn suffix(delimiter: &str) -> Result<Self, AggregateError> {
        if delimiter.is_empty() {
            return Err(AggregateError::InvalidExtractor("suffix delimiter is empty".into()));
        }
        Ok(Self::Suffix(delimiter.to_string()))
    }

    /// Uses group 1 when the pattern has one, otherwise the whole match.
    pub fn regex(pattern: &str) -> Result<Self, AggregateError> {
        let pattern = Regex::new(pattern).map_err(|e| AggregateError::InvalidExtractor(e.to_string()))?;
        let group = usize::from(pattern.captures_len() > 1);
        Ok(Self::Regex { pattern, group })
    }

    pub fn extract(&self, text: &str) -> String {
        let label = match self {
            AnswerExtractor::Identity => Some(text.trim()),
            AnswerExtractor::Suffix(d) => text.rfind(d.as_str()).map(|i| text[i + d.len()..].trim()),
            AnswerExtractor::Regex { pattern, group } => pattern
                .captures(text)
                .and_then(|c| c.get(*group))
                .map(|m| m.as_str().trim()),
        };
        match label {
            Some(l) if !l.is_empty() => l.to_string(),
            _ => UNPARSED.to_string(),
        }
    }
}

impl FromStr for AnswerExtractor {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "identity" {
            Ok(Self::Identity)
        } else if let Some(d) = s.strip_prefix("suffix:") {
            Self::suffix(d)
        } else if let Some(p) = s.strip_prefix("regex:") {
            Self::regex(p)
        } else {
            Err(AggregateError::InvalidExtractor(s.to_string()))
        }
    }
}

impl fmt::Display for AnswerExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerExtractor::Identity => f.write_str("identity"),
            AnswerExtractor::Suffix(d) => write!(f, "suffix:{d}"),
            AnswerExtractor::Regex { pattern, .. } => write!(f, "regex:{}", pattern.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Uniform,
    #[serde(rename = "prob")]
    Probability,
}

impl FromStr for Weighting {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "prob" | "probability" => Ok(Weighting::Probability),
            _ => Err(AggregateError::InvalidWeighting(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Tally<P> {
    pub count: usize,
    pub weight: P,
    pub total_q: P,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteResult<P> {
    /// `None` only when every leaf is unparsed.
    pub winner: Option<String>,
    pub tally: BTreeMap<String, Tally<P>>,
}

impl<P: Probability> VoteResult<P> {
    pub fn weight(&self, label: &str) -> Option<P> {
        self.tally.get(label).map(|t| t.weight)
    }
}

/// Plurality over labels. Ties go to the larger total `Q`, then to the
/// lexicographically smallest label.
pub fn majority_vote<P: Probability, S: AsRef<str>>(
    leaves: &[(S, P)],
    weighting: Weighting,
) -> Result<VoteResult<P>, AggregateError> {
    if leaves.is_empty() {
        return Err(AggregateError::EmptyInput);
    }
    let mut tally: BTreeMap<String, Tally<P>> = BTreeMap::new();
    for (label, q) in leaves {
        let t = tally.entry(label.as_ref().to_string()).or_insert(Tally {
            count: 0,
            weight: P::zero(),
            total_q: P::zero(),
        });
        t.count += 1;
        t.total_q = t.total_q + *q;
        t.weight = t.weight
            + match weighting {
                Weighting::Uniform => P::one(),
                Weighting::Probability => *q,
            };
    }
    let mut winner: Option<(&String, &Tally<P>)> = None;
    // BTreeMap order makes strict comparisons keep the smallest label.
    for (label, t) in tally.iter().filter(|(l, _)| l.as_str() != UNPARSED) {
        let better = match winner {
            None => true,
            Some((_, w)) => t.weight > w.weight || (t.weight == w.weight && t.total_q > w.total_q),
        };
        if better {
            winner = Some((label, t));
        }
    }
    Ok(VoteResult {
        winner: winner.map(|(l, _)| l.clone()),
        tally,
    })
}

/// True when any label is accepted.
pub fn pass_at_k<S: AsRef<str>>(labels: &[S], accepted: &HashSet<String>) -> bool {
    labels.iter().any(|l| accepted.contains(l.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_and_weighted_examples() {
        let r = majority_vote(&[("A", 0.1), ("A", 0.1), ("B", 0.5)], Weighting::Uniform).unwrap();
        assert_eq!(r.winner.as_deref(), Some("A"));
        assert_eq!(r.weight("A"), Some(2.0));
        let r = majority_vote(&[("A", 0.1), ("B", 0.5)], Weighting::Probability).unwrap();
        assert_eq!(r.winner.as_deref(), Some("B"));
    }

    #[test]
    fn tie_rules() {
        let r = majority_vote(&[("B", 0.4), ("A", 0.6)], Weighting::Uniform).unwrap();
        assert_eq!(r.winner.as_deref(), Some("A"));
        let r = majority_vote(&[("A", 0.4), ("B", 0.6)], Weighting::Uniform).unwrap();
        assert_eq!(r.winner.as_deref(), Some("B"));
        let r = majority_vote(&[("B", 0.5), ("A", 0.5)], Weighting::Uniform).unwrap();
        assert_eq!(r.winner.as_deref(), Some("A"));
    }

    #[test]
    fn unparsed_never_wins() {
        let r = majority_vote(&[(UNPARSED, 0.9), (UNPARSED, 0.05), ("x", 0.05)], Weighting::Uniform).unwrap();
        assert_eq!(r.winner.as_deref(), Some("x"));
        let r = majority_vote(&[(UNPARSED, 1.0)], Weighting::Uniform).unwrap();
        assert_eq!(r.winner, None);
        let empty: [(&str, f64); 0] = [];
        assert_eq!(majority_vote(&empty, Weighting::Uniform), Err(AggregateError::EmptyInput));
    }

    #[test]
    fn extractors() {
        let text = "so the answer is #### 42 ";
        assert_eq!(AnswerExtractor::Identity.extract(text), "so the answer is #### 42");
        assert_eq!("suffix:####".parse::<AnswerExtractor>().unwrap().extract(text), "42");
        assert_eq!("suffix:@@".parse::<AnswerExtractor>().unwrap().extract(text), UNPARSED);
        assert_eq!(r"regex:answer is \D*(\d+)".parse::<AnswerExtractor>().unwrap().extract(text), "42");
        assert_eq!(r"regex:\d+".parse::<AnswerExtractor>().unwrap().extract(text), "42");
        assert!("regex:(".parse::<AnswerExtractor>().is_err());
        assert!("suffix:".parse::<AnswerExtractor>().is_err());
        assert!("first-line".parse::<AnswerExtractor>().is_err());
    }

    #[test]
    fn pass_at_k_examples() {
        let acc: HashSet<String> = ["C".to_string()].into();
        assert!(pass_at_k(&["A", "B", "C"], &acc));
        assert!(!pass_at_k(&["A", "B", "C"], &HashSet::new()));
        assert!(pass_at_k(&["C", "C"], &acc));
    }

    fn labeled() -> impl Strategy<Value = Vec<(String, f64)>> {
        prop::collection::vec((prop::sample::select(vec!["a", "b", "c", "d"]), 0.01f64..1.0), 1..12)
            .prop_map(|v| v.into_iter().map(|(l, q)| (l.to_string(), q)).collect())
    }

    proptest! {
        #[test]
        fn winner_invariant_to_rescaling(leaves in labeled(), c in 0.1f64..10.0) {
            let scaled: Vec<(String, f64)> = leaves.iter().map(|(l, q)| (l.clone(), q * c)).collect();
            for w in [Weighting::Uniform, Weighting::Probability] {
                let a = majority_vote(&leaves, w).unwrap().winner;
                let b = majority_vote(&scaled, w).unwrap().winner;
                // exact ties in scaled float sums can flip; only compare clear winners
                let t = majority_vote(&leaves, w).unwrap();
                let mut ws: Vec<f64> = t.tally.values().map(|x| x.weight).collect();
                ws.sort_by(|x, y| y.partial_cmp(x).unwrap());
                if ws.len() < 2 || ws[0] - ws[1] > 1e-9 {
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn dominant_label_stays(leaves in labeled(), q in 0.01f64..1.0) {
            let before = majority_vote(&leaves, Weighting::Uniform).unwrap();
            let win = before.winner.clone().unwrap();
            let top = before.tally[&win].count;
            let strictly = before.tally.iter().all(|(l, t)| *l == win || t.count < top);
            if strictly {
                let mut more = leaves.clone();
                more.push((win.clone(), q));
                prop_assert_eq!(majority_vote(&more, Weighting::Uniform).unwrap().winner, Some(win));
            }
        }
    }
}
