//! Brute-force reference computations.
//!
//! Everything here is deliberately naive: plain recursion, linear scans and
//! linear-space products. The engine in [`crate::dle`] is checked against it.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::baseline::{draw_one, DrawOutcome};
use crate::model::{LanguageModel, ModelError, TableModel, TokenId};
use crate::num::{CompensatedSum, Probability};
use crate::rng::{substream, Substream};
use crate::truncation::{active_set, TruncationRule};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("a path reached depth {max_depth} without eos")]
    DepthExceeded { max_depth: usize },
    #[error("subset size {k} exceeds the {n} available leaves")]
    SubsetTooLarge { k: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLeaf<P> {
    pub tokens: Vec<TokenId>,
    pub q: P,
}

#[derive(Debug, Clone)]
pub struct OracleLeafSet<P> {
    /// Depth-first discovery order, greedy child first.
    pub leaves: Vec<OracleLeaf<P>>,
    pub total_mass: P,
    /// Nodes visited, root included.
    pub node_count: usize,
}

impl<P: Probability> OracleLeafSet<P> {
    pub fn masses(&self) -> Vec<P> {
        self.leaves.iter().map(|l| l.q).collect()
    }
}

/// Every leaf of the pruned tree under `prompt`, with its exact mass.
pub fn enumerate_all_leaves<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    max_depth: usize,
) -> Result<OracleLeafSet<P>, OracleError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    fn visit<P: Probability, M: LanguageModel<P> + ?Sized>(
        model: &M,
        rule: &TruncationRule<P>,
        prompt: &[TokenId],
        max_depth: usize,
        prefix: &mut Vec<TokenId>,
        q: P,
        out: &mut OracleLeafSet<P>,
    ) -> Result<(), OracleError> {
        out.node_count += 1;
        if prefix.last() == Some(&model.eos()) {
            out.leaves.push(OracleLeaf { tokens: prefix.clone(), q });
            return Ok(());
        }
        if prefix.len() >= max_depth {
            return Err(OracleError::DepthExceeded { max_depth });
        }
        let dist = model.next_distribution(prompt, prefix)?;
        for &(token, weight) in active_set(&dist, rule).members() {
            prefix.push(token);
            visit(model, rule, prompt, max_depth, prefix, q * weight, out)?;
            prefix.pop();
        }
        Ok(())
    }

    let mut out = OracleLeafSet {
        leaves: Vec::new(),
        total_mass: P::zero(),
        node_count: 0,
    };
    visit(model, rule, prompt, max_depth, &mut Vec::new(), P::one(), &mut out)?;
    out.total_mass = out.leaves.iter().map(|l| l.q).sum();
    Ok(out)
}

/// The `k` heaviest leaves; equal masses keep discovery order.
pub fn top_k_by_mass<P: Probability>(set: &OracleLeafSet<P>, k: usize) -> Result<Vec<OracleLeaf<P>>, OracleError> {
    if k > set.leaves.len() {
        return Err(OracleError::SubsetTooLarge { k, n: set.leaves.len() });
    }
    let mut sorted = set.leaves.clone();
    sorted.sort_by(|a, b| b.q.partial_cmp(&a.q).unwrap());
    sorted.truncate(k);
    Ok(sorted)
}

/// Largest total mass over all `k`-subsets, by trying every subset.
pub fn best_subset_exhaustive<P: Probability>(masses: &[P], k: usize) -> Result<(P, Vec<usize>), OracleError> {
    fn go<P: Probability>(m: &[P], k: usize, start: usize, cur: &mut Vec<usize>, best: &mut (P, Vec<usize>)) {
        if cur.len() == k {
            let s: P = cur.iter().map(|&i| m[i]).sum();
            if s > best.0 {
                *best = (s, cur.clone());
            }
            return;
        }
        for i in start..m.len() {
            cur.push(i);
            go(m, k, i + 1, cur, best);
            cur.pop();
        }
    }
    if k > masses.len() {
        return Err(OracleError::SubsetTooLarge { k, n: masses.len() });
    }
    let mut best = (P::neg_infinity(), Vec::new());
    go(masses, k, 0, &mut Vec::with_capacity(k), &mut best);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub k: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of the expected distinct-set coverage of `k`
/// independent draws.
pub fn monte_carlo_expected_coverage<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    k: usize,
    trials: usize,
    seed: u64,
    max_seq_len: usize,
) -> Result<McEstimate, OracleError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    Ok(monte_carlo_expected_coverage_multi(model, rule, prompt, &[k], trials, seed, max_seq_len)?[0])
}

/// Like [`monte_carlo_expected_coverage`] for several `k` at once. Each
/// trial draws `max(ks)` sequences and scores every prefix of that list, so
/// the estimates share draws. Trials run in parallel on per-trial streams.
pub fn monte_carlo_expected_coverage_multi<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    ks: &[usize],
    trials: usize,
    seed: u64,
    max_seq_len: usize,
) -> Result<Vec<McEstimate>, OracleError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    if trials < 100 {
        return Err(ModelError::InvalidParameter("Monte Carlo needs at least 100 trials".into()).into());
    }
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = substream(seed, Substream::MonteCarlo, trial as u64);
            let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
            let mut cov = 0.0;
            let mut at_k = Vec::with_capacity(ks.len());
            let mut spent = 0;
            for drawn in 1..=k_max {
                match draw_one(model, rule, prompt, P::one(), max_seq_len, None, &mut spent, &mut rng)? {
                    DrawOutcome::Complete(tokens, log_q, _) => {
                        if seen.insert(tokens) {
                            cov += log_q.exp().as_f64();
                        }
                    }
                    DrawOutcome::OutOfBudget => unreachable!("no allowance was set"),
                }
                if ks.contains(&drawn) {
                    at_k.push((drawn, cov));
                }
            }
            Ok(ks.iter().map(|k| at_k.iter().find(|(d, _)| d == k).map_or(0.0, |x| x.1)).collect())
        })
        .collect::<Result<_, ModelError>>()?;

    let n = trials as f64;
    Ok(ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mut sum = CompensatedSum::<f64>::new();
            per_trial.iter().for_each(|t| sum.add(t[j]));
            let mean = sum.value() / n;
            let mut sq = CompensatedSum::<f64>::new();
            per_trial.iter().for_each(|t| sq.add((t[j] - mean).powi(2)));
            let var = sq.value() / (n - 1.0);
            McEstimate {
                k,
                mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect())
}

/// Shape of the random table models used by property tests.
#[derive(Debug, Clone, Copy)]
pub struct RandomModelParams {
    /// Vocabulary size including eos, drawn from `2..=max_vocab`.
    pub max_vocab: usize,
    /// Completions are at most this long; eos is forced at the last step.
    pub max_depth: usize,
    /// Nonzero tokens per distribution, drawn from `1..=max_support`.
    pub max_support: usize,
}

impl Default for RandomModelParams {
    fn default() -> Self {
        Self {
            max_vocab: 6,
            max_depth: 6,
            max_support: 3,
        }
    }
}

/// Random terminating table model with sparse distributions.
pub fn random_table_model<R: Rng + ?Sized>(rng: &mut R, params: RandomModelParams) -> TableModel {
    assert!(params.max_vocab >= 2 && params.max_depth >= 1 && params.max_support >= 1);
    let vocab_size = rng.gen_range(2..=params.max_vocab);
    let mut names: Vec<String> = (0..vocab_size - 1).map(|i| format!("t{i}")).collect();
    names.push("<eos>".into());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut model = TableModel::new(&refs, "<eos>").expect("generated vocabulary is valid");

    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        let key = prefix.iter().map(|&i| refs[i]).collect::<Vec<_>>().join(" ");
        let dist: Vec<(usize, f64)> = if prefix.len() + 1 >= params.max_depth {
            vec![(vocab_size - 1, 1.0)]
        } else {
            let support = rng.gen_range(1..=params.max_support.min(vocab_size));
            let mut ids: Vec<usize> = (0..vocab_size).collect();
            ids.shuffle(rng);
            ids.truncate(support);
            let raw: Vec<f64> = ids.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            ids.into_iter().zip(raw).map(|(i, w)| (i, w / total)).collect()
        };
        let entries: Vec<(&str, f64)> = dist.iter().map(|&(i, p)| (refs[i], p)).collect();
        model = model.with_transition(&key, &entries).expect("generated distribution is valid");
        for &(i, _) in &dist {
            if i != vocab_size - 1 {
                let mut next = prefix.clone();
                next.push(i);
                stack.push(next);
            }
        }
    }
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{branching_example, shared_prefix_example};
    use crate::metrics::expected_coverage_closed_form;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn branching_example_leaves() {
        let set = enumerate_all_leaves(&branching_example(), &TruncationRule::<f64>::EpsilonInclusive(0.1), &[], 10).unwrap();
        let m = set.masses();
        let expected = [0.504, 0.126, 0.27, 0.1];
        assert_eq!(m.len(), 4);
        for (a, b) in m.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((set.total_mass - 1.0).abs() < 1e-12);
        let top = top_k_by_mass(&set, 2).unwrap();
        assert!((top[0].q + top[1].q - 0.774).abs() < 1e-12);
    }

    #[test]
    fn counting_and_depth() {
        let set = enumerate_all_leaves(&shared_prefix_example(0, 3), &TruncationRule::<f64>::TopK(2), &[], 10).unwrap();
        assert_eq!(set.leaves.len(), 8);
        let single = enumerate_all_leaves(&shared_prefix_example(4, 0), &TruncationRule::<f64>::TopK(2), &[], 10).unwrap();
        assert_eq!(single.leaves.len(), 1);
        assert_eq!(single.leaves[0].q, 1.0);
        assert!(matches!(
            enumerate_all_leaves(&shared_prefix_example(4, 0), &TruncationRule::<f64>::TopK(2), &[], 3),
            Err(OracleError::DepthExceeded { max_depth: 3 })
        ));
    }

    #[test]
    fn subset_search() {
        let (best, idx) = best_subset_exhaustive(&[0.1f64, 0.4, 0.2, 0.3], 2).unwrap();
        assert!((best - 0.7).abs() < 1e-15);
        assert_eq!(idx, vec![1, 3]);
        assert!(best_subset_exhaustive(&[0.1f64], 2).is_err());
    }

    #[test]
    fn random_models_terminate_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = random_table_model(&mut rng, RandomModelParams::default());
            let set = enumerate_all_leaves(&m, &TruncationRule::<f64>::TopK(6), &[], 6).unwrap();
            assert!((set.total_mass - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn monte_carlo_two_leaf() {
        let m = TableModel::new(&["a", "b", "<eos>"], "<eos>")
            .and_then(|m| m.with_transition("", &[("a", 0.7), ("b", 0.3)]))
            .and_then(|m| m.with_default(&[("<eos>", 1.0)]))
            .unwrap();
        let rule = TruncationRule::<f64>::TopK(2);
        let est = monte_carlo_expected_coverage(&m, &rule, &[], 1, 20_000, 3, 8).unwrap();
        let exact = expected_coverage_closed_form(&[0.7, 0.3], 1);
        assert!((est.mean - exact).abs() <= 3.0 * est.std_error, "{est:?}");

        let single = shared_prefix_example(2, 0);
        let est = monte_carlo_expected_coverage(&single, &rule, &[], 3, 100, 3, 8).unwrap();
        assert_eq!((est.mean, est.std_error), (1.0, 0.0));
    }
}
