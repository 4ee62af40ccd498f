//! Independent sampling with replacement from the truncated distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dle::StopReason;
use crate::model::{LanguageModel, ModelError, TokenId};
use crate::num::Probability;
use crate::rng::{substream, Substream};
use crate::truncation::{active_set, apply_temperature, ActiveSet, TruncationRule};

/// One sampled completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw<P> {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    /// `ln Q` under the tempered, truncated distribution.
    pub log_q: P,
    pub stop_reason: StopReason,
}

impl<P: Probability> Draw<P> {
    pub fn q(&self) -> P {
        self.log_q.exp()
    }
}

#[derive(Debug, Clone)]
pub struct SampleRun<P> {
    /// Successful draws in draw order. Duplicates are kept.
    pub sequences: Vec<Draw<P>>,
    pub seed: u64,
    pub temperature: P,
    pub rule: TruncationRule<P>,
    /// Draws aborted by a model error, with the error text.
    pub failures: Vec<(usize, String)>,
    /// Tokens generated across all draws, failed ones included.
    pub tokens_generated: usize,
}

impl<P> SampleRun<P> {
    pub fn degraded(&self) -> bool {
        !self.failures.is_empty()
    }
}

fn pick<P: Probability, R: Rng + ?Sized>(active: &ActiveSet<P>, rng: &mut R) -> (TokenId, P) {
    let members = active.members();
    let mut u = P::of(rng.gen::<f64>());
    for &(token, weight) in members {
        if u < weight {
            return (token, weight);
        }
        u = u - weight;
    }
    *members.last().expect("active sets are never empty")
}

/// Outcome of a single draw that may be cut short by a token allowance.
#[derive(Debug)]
pub enum DrawOutcome<P> {
    Complete(Vec<TokenId>, P, StopReason),
    OutOfBudget,
}

/// Draws one completion token by token. `allowance` caps the number of
/// tokens this draw may generate; `spent` is incremented per token.
#[allow(clippy::too_many_arguments)]
pub fn draw_one<P, M, R>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    temperature: P,
    max_seq_len: usize,
    allowance: Option<usize>,
    spent: &mut usize,
    rng: &mut R,
) -> Result<DrawOutcome<P>, ModelError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
    R: Rng + ?Sized,
{
    let eos = model.eos();
    let mut tokens = Vec::new();
    let mut log_q = P::zero();
    let mut used = 0usize;
    loop {
        if tokens.last() == Some(&eos) {
            return Ok(DrawOutcome::Complete(tokens, log_q, StopReason::Eos));
        }
        if tokens.len() >= max_seq_len {
            return Ok(DrawOutcome::Complete(tokens, log_q, StopReason::LengthCap));
        }
        if allowance.is_some_and(|a| used >= a) {
            return Ok(DrawOutcome::OutOfBudget);
        }
        let dist = model.next_distribution(prompt, &tokens)?;
        let dist = apply_temperature(&dist, temperature)?;
        let (token, weight) = pick(&active_set(&dist, rule), rng);
        tokens.push(token);
        log_q = log_q + weight.ln();
        used += 1;
        *spent += 1;
    }
}

fn draw_rng(seed: u64, index: usize) -> ChaCha8Rng {
    substream(seed, Substream::BaselineDraw, index as u64)
}

/// `k` independent draws. Draw `i` uses its own random stream derived from
/// `(seed, i)`, so any single draw can be reproduced in isolation.
pub fn sample_sequences<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    k: usize,
    seed: u64,
    temperature: P,
    max_seq_len: usize,
) -> Result<SampleRun<P>, ModelError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    if k == 0 {
        return Err(ModelError::InvalidParameter("k must be at least 1".into()));
    }
    let mut run = SampleRun {
        sequences: Vec::with_capacity(k),
        seed,
        temperature,
        rule: rule.clone(),
        failures: Vec::new(),
        tokens_generated: 0,
    };
    for index in 0..k {
        let mut rng = draw_rng(seed, index);
        match draw_one(model, rule, prompt, temperature, max_seq_len, None, &mut run.tokens_generated, &mut rng) {
            Ok(DrawOutcome::Complete(tokens, log_q, stop_reason)) => run.sequences.push(Draw {
                index,
                tokens,
                log_q,
                stop_reason,
            }),
            Ok(DrawOutcome::OutOfBudget) => unreachable!("no allowance was set"),
            Err(e) => run.failures.push((index, e.to_string())),
        }
    }
    Ok(run)
}

/// Sampling under a total token budget.
#[derive(Debug, Clone)]
pub struct BudgetRun<P> {
    pub completed: Vec<Draw<P>>,
    pub tokens_generated: usize,
    /// Tokens spent on the draw that ran out of budget.
    pub discarded: usize,
}

/// Draws until the next token would exceed `max_new_tokens`. The draw in
/// progress at that point is discarded.
pub fn sample_with_token_budget<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    max_new_tokens: usize,
    seed: u64,
    temperature: P,
    max_seq_len: usize,
) -> Result<BudgetRun<P>, ModelError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    let mut spent = 0usize;
    let mut completed = Vec::new();
    for index in 0.. {
        let mut rng = draw_rng(seed, index);
        let before = spent;
        match draw_one(model, rule, prompt, temperature, max_seq_len, Some(max_new_tokens - spent), &mut spent, &mut rng)? {
            DrawOutcome::Complete(tokens, log_q, stop_reason) => completed.push(Draw {
                index,
                tokens,
                log_q,
                stop_reason,
            }),
            DrawOutcome::OutOfBudget => {
                return Ok(BudgetRun {
                    completed,
                    tokens_generated: spent,
                    discarded: spent - before,
                })
            }
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{branching_example, shared_prefix_example};
    use crate::model::TableModel;

    fn two_leaf() -> TableModel {
        TableModel::new(&["a", "b", "<eos>"], "<eos>")
            .and_then(|m| m.with_transition("", &[("a", 0.7), ("b", 0.3)]))
            .and_then(|m| m.with_default(&[("<eos>", 1.0)]))
            .unwrap()
    }

    #[test]
    fn deterministic_model_repeats() {
        let m = shared_prefix_example(3, 0);
        let run = sample_sequences(&m, &TruncationRule::<f64>::TopK(5), &[], 8, 1, 1.0, 64).unwrap();
        assert_eq!(run.sequences.len(), 8);
        assert!(run.sequences.iter().all(|d| d.tokens == run.sequences[0].tokens && d.q() == 1.0));
    }

    #[test]
    fn two_leaf_frequency() {
        let m = two_leaf();
        let run = sample_sequences(&m, &TruncationRule::<f64>::TopK(2), &[], 10_000, 2024, 1.0, 8).unwrap();
        let a = run.sequences.iter().filter(|d| d.tokens[0] == TokenId(0)).count();
        let freq = a as f64 / 10_000.0;
        assert!((freq - 0.7).abs() < 0.02, "{freq}");
        for d in &run.sequences {
            let expected = if d.tokens[0] == TokenId(0) { 0.7 } else { 0.3 };
            assert!((d.q() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let m = branching_example();
        let rule = TruncationRule::<f64>::EpsilonInclusive(0.1);
        let run = sample_sequences(&m, &rule, &[], 20, 9, 0.0, 16).unwrap();
        let greedy = m.tokenize_str("A A A <eos>");
        assert!(run.sequences.iter().all(|d| d.tokens == greedy));
    }

    #[test]
    fn draws_reproducible_individually() {
        let m = branching_example();
        let rule = TruncationRule::<f64>::EpsilonInclusive(0.1);
        let ten = sample_sequences(&m, &rule, &[], 10, 77, 1.0, 16).unwrap();
        let twenty = sample_sequences(&m, &rule, &[], 20, 77, 1.0, 16).unwrap();
        assert_eq!(ten.sequences[..], twenty.sequences[..10]);
    }

    #[test]
    fn token_budget_counts_whole_sequences() {
        let m = shared_prefix_example(4, 1);
        // every sequence costs 6 tokens
        let run = sample_with_token_budget(&m, &TruncationRule::<f64>::TopK(2), &[], 20, 3, 1.0, 64).unwrap();
        assert_eq!(run.completed.len(), 3);
        assert_eq!(run.tokens_generated, 20);
        assert_eq!(run.discarded, 2);
    }

    #[test]
    fn model_error_marks_run_degraded() {
        let m = TableModel::new(&["a", "b", "<eos>"], "<eos>")
            .and_then(|m| m.with_transition("", &[("a", 0.5), ("b", 0.5)]))
            .and_then(|m| m.with_transition("a", &[("<eos>", 1.0)]))
            .unwrap();
        let run = sample_sequences(&m, &TruncationRule::<f64>::TopK(2), &[], 40, 5, 1.0, 8).unwrap();
        assert!(run.degraded());
        assert_eq!(run.sequences.len() + run.failures.len(), 40);
    }

    trait Tok {
        fn tokenize_str(&self, s: &str) -> Vec<TokenId>;
    }

    impl Tok for TableModel {
        fn tokenize_str(&self, s: &str) -> Vec<TokenId> {
            s.split_whitespace().map(|t| self.vocab().get(t).unwrap()).collect()
        }
    }
}
