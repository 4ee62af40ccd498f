//! Truncation criteria, the renormalized truncated distribution and
//! sequence probabilities under it.
//!
//! For an active set `A` with raw mass `Z`, the truncated weight of a member
//! `v` is `p(v) / Z` when `|A| >= 2`. When at most one token survives, all
//! mass goes to the argmax token with weight exactly one.

use std::fmt;
use std::str::FromStr;

use crate::model::{LanguageModel, ModelError, NextTokenDistribution, TokenId};
use crate::num::Probability;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("cannot parse truncation rule {0:?}")]
    Syntax(String),
    #[error("parameter out of range in {0:?}")]
    Range(String),
    #[error("composite rule must contain at least one component")]
    EmptyComposite,
}

/// Criterion selecting the active set at each decoding step.
#[derive(Debug, Clone, PartialEq)]
pub enum TruncationRule<P> {
    /// The `k` most probable tokens.
    TopK(usize),
    /// Smallest prefix of the sorted distribution whose mass reaches `p`.
    TopP(P),
    /// Tokens with probability at least `p_min` times the maximum.
    MinP(P),
    /// Tokens with probability strictly above `ε`.
    Epsilon(P),
    /// Tokens with probability at least `ε` (boundary included).
    EpsilonInclusive(P),
    /// Intersection of the component active sets.
    Composite(Vec<TruncationRule<P>>),
}

impl<P: Probability> TruncationRule<P> {
    pub fn validate(&self) -> Result<(), RuleError> {
        let unit = |p: P| p > P::zero() && p <= P::one();
        let ok = match self {
            TruncationRule::TopK(k) => *k >= 1,
            TruncationRule::TopP(p)
            | TruncationRule::MinP(p)
            | TruncationRule::Epsilon(p)
            | TruncationRule::EpsilonInclusive(p) => unit(*p),
            TruncationRule::Composite(rules) => {
                if rules.is_empty() {
                    return Err(RuleError::EmptyComposite);
                }
                return rules.iter().try_for_each(|r| r.validate());
            }
        };
        if ok {
            Ok(())
        } else {
            Err(RuleError::Range(self.to_string()))
        }
    }

    /// Membership mask of the tokens satisfying this criterion.
    fn admits(&self, probs: &[P], order: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; probs.len()];
        match self {
            TruncationRule::TopK(k) => {
                for &i in order.iter().take(*k) {
                    mask[i] = true;
                }
            }
            TruncationRule::TopP(p) => {
                let target = *p - P::cumulative_slack();
                let mut cumulative = P::zero();
                for &i in order {
                    mask[i] = true;
                    cumulative = cumulative + probs[i];
                    if cumulative >= target {
                        break;
                    }
                }
            }
            TruncationRule::MinP(p_min) => {
                let threshold = *p_min * probs[order[0]];
                for (i, &p) in probs.iter().enumerate() {
                    mask[i] = p >= threshold;
                }
            }
            TruncationRule::Epsilon(eps) => {
                for (i, &p) in probs.iter().enumerate() {
                    mask[i] = p > *eps;
                }
            }
            TruncationRule::EpsilonInclusive(eps) => {
                for (i, &p) in probs.iter().enumerate() {
                    mask[i] = p >= *eps;
                }
            }
            TruncationRule::Composite(rules) => {
                mask.iter_mut().for_each(|m| *m = true);
                for rule in rules {
                    for (m, a) in mask.iter_mut().zip(rule.admits(probs, order)) {
                        *m &= a;
                    }
                }
            }
        }
        mask
    }
}

impl<P: Probability> fmt::Display for TruncationRule<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncationRule::TopK(k) => write!(f, "top_k:{k}"),
            TruncationRule::TopP(p) => write!(f, "top_p:{p}"),
            TruncationRule::MinP(p) => write!(f, "min_p:{p}"),
            TruncationRule::Epsilon(p) => write!(f, "epsilon:{p}"),
            TruncationRule::EpsilonInclusive(p) => write!(f, "epsilon_inclusive:{p}"),
            TruncationRule::Composite(rules) => {
                let parts: Vec<String> = rules.iter().map(|r| r.to_string()).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

impl<P: Probability + FromStr> FromStr for TruncationRule<P> {
    type Err = RuleError;

    /// Parses `epsilon:0.05`, `top_p:0.9`, `min_p:0.1`, `top_k:10`,
    /// `epsilon_inclusive:0.1`, or `+`-joined combinations of these.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        let mut rules = Vec::with_capacity(parts.len());
        for part in &parts {
            let (name, value) = part.split_once(':').ok_or_else(|| RuleError::Syntax(s.to_string()))?;
            let real = || value.trim().parse::<P>().map_err(|_| RuleError::Syntax(s.to_string()));
            let rule = match name.trim() {
                "top_k" => TruncationRule::TopK(value.trim().parse().map_err(|_| RuleError::Syntax(s.to_string()))?),
                "top_p" => TruncationRule::TopP(real()?),
                "min_p" => TruncationRule::MinP(real()?),
                "epsilon" => TruncationRule::Epsilon(real()?),
                "epsilon_inclusive" => TruncationRule::EpsilonInclusive(real()?),
                _ => return Err(RuleError::Syntax(s.to_string())),
            };
            rules.push(rule);
        }
        let rule = if rules.len() == 1 {
            rules.pop().unwrap()
        } else {
            TruncationRule::Composite(rules)
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// Surviving tokens with their renormalized weights.
///
/// Members are ordered by weight descending, ties by token id ascending, so
/// the first member is always the greedy choice.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet<P> {
    members: Vec<(TokenId, P)>,
    raw_mass: P,
}

impl<P: Probability> ActiveSet<P> {
    pub fn members(&self) -> &[(TokenId, P)] {
        &self.members
    }

    /// Sum of the untruncated probabilities of the members.
    pub fn raw_mass(&self) -> P {
        self.raw_mass
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_branching(&self) -> bool {
        self.members.len() >= 2
    }

    pub fn greedy(&self) -> TokenId {
        self.members[0].0
    }

    pub fn weight(&self, token: TokenId) -> Option<P> {
        self.members.iter().find(|(t, _)| *t == token).map(|(_, w)| *w)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.weight(token).is_some()
    }
}

/// Token ids sorted by probability descending, id ascending.
fn sorted_order<P: Probability>(probs: &[P]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Argmax probability; ties go to the lowest token id.
pub fn greedy_token<P: Probability>(dist: &NextTokenDistribution<P>) -> TokenId {
    let probs = dist.probs();
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    TokenId::from(best)
}

/// Applies `rule` to `dist`. Zero-probability tokens never survive; if no
/// token survives, the argmax becomes a singleton with weight one.
pub fn active_set<P: Probability>(dist: &NextTokenDistribution<P>, rule: &TruncationRule<P>) -> ActiveSet<P> {
    let probs = dist.probs();
    let order = sorted_order(probs);
    let mask = rule.admits(probs, &order);
    let survivors: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| mask[i] && probs[i] > P::zero())
        .collect();

    if survivors.len() <= 1 {
        let g = greedy_token(dist);
        return ActiveSet {
            members: vec![(g, P::one())],
            raw_mass: probs[g.index()],
        };
    }
    let raw_mass: P = survivors.iter().map(|&i| probs[i]).sum();
    ActiveSet {
        members: survivors
            .into_iter()
            .map(|i| (TokenId::from(i), probs[i] / raw_mass))
            .collect(),
        raw_mass,
    }
}

/// `p_i^(1/τ)` renormalized. `τ = 0` yields a point mass on the argmax.
pub fn apply_temperature<P: Probability>(
    dist: &NextTokenDistribution<P>,
    temperature: P,
) -> Result<NextTokenDistribution<P>, ModelError> {
    if temperature < P::zero() || !temperature.is_finite() {
        return Err(ModelError::InvalidParameter(format!("temperature must be >= 0, got {temperature}")));
    }
    if temperature == P::zero() {
        return Ok(NextTokenDistribution::point_mass(dist.len(), greedy_token(dist)));
    }
    if temperature == P::one() {
        return Ok(dist.clone());
    }
    let logs: Vec<P> = dist
        .probs()
        .iter()
        .map(|&p| if p > P::zero() { p.ln() / temperature } else { P::neg_infinity() })
        .collect();
    let max = logs.iter().copied().fold(P::neg_infinity(), P::max);
    let weights: Vec<P> = logs.iter().map(|&l| (l - max).exp()).collect();
    NextTokenDistribution::from_weights(weights)
}

/// Probability `Q` of `completion` under the truncated distribution,
/// accumulated in log space. Zero if any token falls outside its active set.
pub fn sequence_probability<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<P, ModelError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    Ok(sequence_log_probability(model, rule, prompt, completion)?.exp())
}

/// `ln Q(completion)`, negative infinity outside the support.
pub fn sequence_log_probability<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<P, ModelError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    let mut log_q = P::zero();
    for t in 0..completion.len() {
        let dist = model.next_distribution(prompt, &completion[..t])?;
        match active_set(&dist, rule).weight(completion[t]) {
            Some(w) => log_q = log_q + w.ln(),
            None => return Ok(P::neg_infinity()),
        }
    }
    Ok(log_q)
}
