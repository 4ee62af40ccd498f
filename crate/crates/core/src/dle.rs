//! Distinct leaf enumeration.
//!
//! The first rollout decodes greedily from the prompt. Every non-followed
//! member of a branching active set becomes a [`BranchPoint`]. A branch
//! policy then repeatedly picks one branch point, appends its token and
//! decodes greedily again, until the leaf or token budget is spent or no
//! branch point remains. Leaves are distinct by construction: each is a
//! different path in the same prefix tree.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{LanguageModel, ModelError, TokenId};
use crate::num::Probability;
use crate::rng::{substream, Substream};
use crate::tree::{NodeId, NodeStatus, PrunedTree, TreeError, ROOT};
use crate::truncation::{active_set, TruncationRule};

pub const DEFAULT_MAX_SEQ_LEN: usize = 512;
pub const DEFAULT_EARLY_STOP_N: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DleError {
    #[error("frontier is empty")]
    EmptyFrontier,
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("invalid branch policy {0:?}")]
    InvalidPolicy(String),
    #[error("model failed before any leaf was produced: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchPolicy {
    /// Largest alternative path mass `Q(prefix ∘ v)`.
    ProbFirst,
    /// Earliest position.
    DivFirst,
    /// Drawn with probability proportional to alternative path mass.
    RandBranch { seed: u64 },
    /// Largest edge weight `q(v | prefix)`.
    GlobalProb,
    /// Deepest position.
    Dfs,
}

impl FromStr for BranchPolicy {
    type Err = DleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probfirst" => Ok(BranchPolicy::ProbFirst),
            "divfirst" => Ok(BranchPolicy::DivFirst),
            "globalprob" => Ok(BranchPolicy::GlobalProb),
            "dfs" => Ok(BranchPolicy::Dfs),
            _ => match s.strip_prefix("randbranch:").map(str::parse::<u64>) {
                Some(Ok(seed)) => Ok(BranchPolicy::RandBranch { seed }),
                _ => Err(DleError::InvalidPolicy(s.to_string())),
            },
        }
    }
}

impl fmt::Display for BranchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchPolicy::ProbFirst => f.write_str("probfirst"),
            BranchPolicy::DivFirst => f.write_str("divfirst"),
            BranchPolicy::RandBranch { seed } => write!(f, "randbranch:{seed}"),
            BranchPolicy::GlobalProb => f.write_str("globalprob"),
            BranchPolicy::Dfs => f.write_str("dfs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Budget {
    pub max_leaves: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub max_seq_len: usize,
}

impl Budget {
    pub fn leaves(k: usize) -> Self {
        Self {
            max_leaves: Some(k),
            max_new_tokens: None,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }

    pub fn tokens(n: usize) -> Self {
        Self {
            max_leaves: None,
            max_new_tokens: Some(n),
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }

    /// Leaf budget large enough to explore any tree completely.
    pub fn exhaustive() -> Self {
        Self::leaves(usize::MAX)
    }

    pub fn with_max_seq_len(mut self, len: usize) -> Self {
        self.max_seq_len = len;
        self
    }

    pub fn validate(&self) -> Result<(), DleError> {
        if self.max_leaves.is_none() && self.max_new_tokens.is_none() {
            return Err(DleError::InvalidBudget("one of max_leaves / max_new_tokens must be finite".into()));
        }
        if self.max_leaves == Some(0) || self.max_new_tokens == Some(0) || self.max_seq_len == 0 {
            return Err(DleError::InvalidBudget("budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub n: usize,
}

impl EarlyStopConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            n: DEFAULT_EARLY_STOP_N,
        }
    }

    pub fn after(n: usize) -> Self {
        assert!(n >= 1, "early-stop window must be at least one token");
        Self { enabled: true, n }
    }
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self::after(DEFAULT_EARLY_STOP_N)
    }
}

/// An unexplored alternative token. Its child node already exists in the
/// tree (created when the parent was expanded) but has not been expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPoint<P> {
    pub node: NodeId,
    pub parent: NodeId,
    pub token: TokenId,
    /// Index of the alternative token within the completion.
    pub position: usize,
    pub log_mass: P,
    pub edge_weight: P,
    /// Discovery order, the final tie-breaker.
    pub discovered: usize,
}

impl<P: Probability> BranchPoint<P> {
    pub fn mass(&self) -> P {
        self.log_mass.exp()
    }
}

fn near<P: Probability>(a: P, b: P) -> bool {
    (a - b).abs() <= P::cumulative_slack()
}

/// `Greater` when `a` should be expanded before `b`.
fn priority<P: Probability>(policy: &BranchPolicy, a: &BranchPoint<P>, b: &BranchPoint<P>) -> Ordering {
    let by_score = |x: P, y: P| {
        if near(x, y) {
            Ordering::Equal
        } else {
            x.partial_cmp(&y).unwrap_or(Ordering::Equal)
        }
    };
    let primary = match policy {
        BranchPolicy::ProbFirst | BranchPolicy::RandBranch { .. } => by_score(a.log_mass, b.log_mass),
        BranchPolicy::GlobalProb => by_score(a.edge_weight, b.edge_weight),
        BranchPolicy::DivFirst => b.position.cmp(&a.position),
        BranchPolicy::Dfs => a.position.cmp(&b.position),
    };
    primary.then_with(|| {
        (b.position, b.token, b.discovered)
            .cmp(&(a.position, a.token, a.discovered))
    })
}

/// Index of the branch point `policy` would expand next.
///
/// `rng` is only consulted by [`BranchPolicy::RandBranch`].
pub fn select_branch<P: Probability, R: Rng + ?Sized>(
    frontier: &[BranchPoint<P>],
    policy: &BranchPolicy,
    rng: &mut R,
) -> Result<usize, DleError> {
    if frontier.is_empty() {
        return Err(DleError::EmptyFrontier);
    }
    if let BranchPolicy::RandBranch { .. } = policy {
        let max = frontier
            .iter()
            .map(|b| b.log_mass)
            .fold(P::neg_infinity(), P::max);
        let weights: Vec<f64> = frontier.iter().map(|b| (b.log_mass - max).exp().as_f64()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return Ok(i);
            }
            u -= w;
        }
        return Ok(frontier.len() - 1);
    }
    let mut best = 0;
    for i in 1..frontier.len() {
        if priority(policy, &frontier[i], &frontier[best]) == Ordering::Greater {
            best = i;
        }
    }
    Ok(best)
}

/// True when the first `n` tokens after the branching token equal the first
/// `n` post-branch tokens of some earlier sibling continuation. Disabled
/// (`None`) never fires.
pub fn early_stop_check(new_tokens_after_branch: &[TokenId], sibling_continuations: &[Vec<TokenId>], n: Option<usize>) -> bool {
    let Some(n) = n else { return false };
    if new_tokens_after_branch.len() < n {
        return false;
    }
    let window = &new_tokens_after_branch[..n];
    sibling_continuations
        .iter()
        .any(|s| s.len() >= n && &s[..n] == window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Eos,
    LengthCap,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Eos => "eos",
            StopReason::LengthCap => "length-cap",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf<P> {
    /// Completion tokens (prompt excluded), including a final eos if any.
    pub tokens: Vec<TokenId>,
    pub node: NodeId,
    pub log_q: P,
    pub stop_reason: StopReason,
    /// Tokens appended to the tree while producing this leaf.
    pub new_tokens: usize,
    /// Prompt plus generated tokens inherited from the tree.
    pub reused_prefix_len: usize,
    /// Generation order, starting at 0.
    pub order: usize,
}

impl<P: Probability> Leaf<P> {
    pub fn q(&self) -> P {
        self.log_q.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EarlyStopEvent {
    /// Node holding the alternative token that started the branch.
    pub branch_node: NodeId,
    /// Last node generated before the stop.
    pub stop_node: NodeId,
    pub position: usize,
    /// `order` of the leaf whose continuation was matched.
    pub matched_leaf: usize,
    pub wasted_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EnumerationStats {
    /// Every token appended to the tree, including branch tokens.
    pub tokens_generated: usize,
    pub leaf_tokens: usize,
    pub wasted_on_early_stop: usize,
    pub discarded_on_budget: usize,
    pub lost_to_errors: usize,
    /// Prompt and prefix tokens reused across leaves.
    pub reused_tokens: usize,
    pub model_calls: usize,
    /// Rollouts started from a branch point.
    pub branches_explored: usize,
}

#[derive(Debug, Clone)]
pub struct EnumerationResult<P> {
    pub leaves: Vec<Leaf<P>>,
    pub frontier_exhausted: bool,
    /// Set when a model error cut the run short after at least one leaf.
    pub degraded: Option<String>,
    pub stats: EnumerationStats,
    pub early_stops: Vec<EarlyStopEvent>,
    pub tree: PrunedTree<P>,
    pub prompt_len: usize,
}

impl<P: Probability> EnumerationResult<P> {
    pub fn coverage_curve(&self) -> Vec<P> {
        let mut acc = crate::num::CompensatedSum::new();
        self.leaves
            .iter()
            .map(|l| {
                acc.add(l.q());
                acc.value()
            })
            .collect()
    }
}

enum Outcome {
    Leaf(NodeId, StopReason),
    EarlyStopped { node: NodeId, matched_leaf: usize },
    BudgetExhausted,
    Failed(ModelError),
}

struct Rollout<P> {
    outcome: Outcome,
    tokens: usize,
    branch_points: Vec<BranchPoint<P>>,
}

/// Stateful enumeration of one prompt.
pub struct Enumerator<'a, P: Probability, M: LanguageModel<P> + ?Sized> {
    model: &'a M,
    rule: &'a TruncationRule<P>,
    prompt: &'a [TokenId],
    policy: BranchPolicy,
    budget: Budget,
    early_stop: EarlyStopConfig,
    tree: PrunedTree<P>,
    frontier: Vec<BranchPoint<P>>,
    leaves: Vec<Leaf<P>>,
    stats: EnumerationStats,
    early_stops: Vec<EarlyStopEvent>,
    discovered: usize,
    rng: ChaCha8Rng,
}

impl<'a, P: Probability, M: LanguageModel<P> + ?Sized> Enumerator<'a, P, M> {
    pub fn new(
        model: &'a M,
        rule: &'a TruncationRule<P>,
        prompt: &'a [TokenId],
        policy: BranchPolicy,
        budget: Budget,
        early_stop: EarlyStopConfig,
    ) -> Result<Self, DleError> {
        budget.validate()?;
        if prompt.contains(&model.eos()) {
            return Err(ModelError::EosInPrefix.into());
        }
        let seed = match policy {
            BranchPolicy::RandBranch { seed } => seed,
            _ => 0,
        };
        Ok(Self {
            model,
            rule,
            prompt,
            policy,
            budget,
            early_stop,
            tree: PrunedTree::new(),
            frontier: Vec::new(),
            leaves: Vec::new(),
            stats: EnumerationStats::default(),
            early_stops: Vec::new(),
            discovered: 0,
            rng: substream(seed, Substream::RandBranch, 0),
        })
    }

    fn token_budget_left(&self) -> bool {
        self.budget
            .max_new_tokens
            .is_none_or(|cap| self.stats.tokens_generated < cap)
    }

    /// Continuations (after the branch position) of completed leaves that
    /// pass through `parent`.
    fn sibling_continuations(&self, parent: NodeId, branch_index: usize) -> Vec<(usize, Vec<TokenId>)> {
        let parent_depth = self.tree.node(parent).depth;
        self.leaves
            .iter()
            .filter(|l| self.tree.ancestor_at(l.node, parent_depth) == Some(parent))
            .map(|l| (l.order, l.tokens.get(branch_index + 1..).unwrap_or(&[]).to_vec()))
            .collect()
    }

    /// Greedy decoding from `start` until eos, the length cap, the token
    /// budget or an early-stop match.
    fn greedy_rollout(&mut self, start: NodeId, from_branch: bool) -> Rollout<P> {
        let eos = self.model.eos();
        let mut node = start;
        let mut tokens = usize::from(from_branch);
        let mut branch_points = Vec::new();

        let branch_index = self.tree.node(start).depth.saturating_sub(1);
        let siblings = if from_branch && self.early_stop.enabled {
            let parent = self.tree.node(start).parent.unwrap_or(ROOT);
            self.sibling_continuations(parent, branch_index)
        } else {
            Vec::new()
        };
        let window = self.early_stop.enabled.then_some(self.early_stop.n);
        let mut after_branch: Vec<TokenId> = Vec::new();

        loop {
            let current = self.tree.node(node);
            if current.token == Some(eos) {
                return Rollout { outcome: Outcome::Leaf(node, StopReason::Eos), tokens, branch_points };
            }
            if current.depth >= self.budget.max_seq_len {
                return Rollout { outcome: Outcome::Leaf(node, StopReason::LengthCap), tokens, branch_points };
            }
            if !self.token_budget_left() {
                return Rollout { outcome: Outcome::BudgetExhausted, tokens, branch_points };
            }

            let generated = self.tree.sequence(node);
            self.stats.model_calls += 1;
            let dist = match self.model.next_distribution(self.prompt, &generated) {
                Ok(d) => d,
                Err(e) => {
                    self.tree.set_status(node, NodeStatus::Failed);
                    return Rollout { outcome: Outcome::Failed(e), tokens, branch_points };
                }
            };
            let active = active_set(&dist, self.rule);
            let children = match self.tree.expand_node(node, &active) {
                Ok(c) => c,
                Err(e) => unreachable!("rollout reached an expanded node: {e}"),
            };
            for &child in &children[1..] {
                let c = self.tree.node(child);
                branch_points.push(BranchPoint {
                    node: child,
                    parent: node,
                    token: c.token.unwrap(),
                    position: c.depth - 1,
                    log_mass: c.path_log_mass,
                    edge_weight: c.edge_weight,
                    discovered: self.discovered,
                });
                self.discovered += 1;
            }
            node = children[0];
            tokens += 1;
            self.stats.tokens_generated += 1;

            if !siblings.is_empty() {
                after_branch.push(self.tree.node(node).token.unwrap());
                if after_branch.len() == self.early_stop.n {
                    let conts: Vec<Vec<TokenId>> = siblings.iter().map(|(_, c)| c.clone()).collect();
                    if early_stop_check(&after_branch, &conts, window) {
                        let matched_leaf = siblings
                            .iter()
                            .find(|(_, c)| c.len() >= after_branch.len() && c[..after_branch.len()] == after_branch[..])
                            .map(|(o, _)| *o)
                            .unwrap();
                        return Rollout {
                            outcome: Outcome::EarlyStopped { node, matched_leaf },
                            tokens,
                            branch_points,
                        };
                    }
                }
            }
        }
    }

    fn record_leaf(&mut self, node: NodeId, stop_reason: StopReason, new_tokens: usize) {
        self.tree.set_status(node, NodeStatus::Leaf);
        let tokens = self.tree.sequence(node);
        let reused_prefix_len = self.prompt.len() + tokens.len() - new_tokens;
        self.stats.leaf_tokens += new_tokens;
        self.stats.reused_tokens += reused_prefix_len;
        self.leaves.push(Leaf {
            tokens,
            node,
            log_q: self.tree.node(node).path_log_mass,
            stop_reason,
            new_tokens,
            reused_prefix_len,
            order: self.leaves.len(),
        });
    }

    /// Runs the enumeration to completion.
    pub fn run(mut self) -> Result<EnumerationResult<P>, DleError> {
        let mut degraded = None;
        let max_leaves = self.budget.max_leaves.unwrap_or(usize::MAX);

        let first = self.greedy_rollout(ROOT, false);
        let mut done = false;
        match first.outcome {
            Outcome::Leaf(node, reason) => {
                self.record_leaf(node, reason, first.tokens);
                self.frontier.extend(first.branch_points);
            }
            Outcome::BudgetExhausted => {
                self.stats.discarded_on_budget += first.tokens;
                done = true;
            }
            Outcome::Failed(e) => return Err(e.into()),
            Outcome::EarlyStopped { .. } => unreachable!("first rollout has no siblings"),
        }

        while !done && self.leaves.len() < max_leaves && !self.frontier.is_empty() {
            if !self.token_budget_left() {
                break;
            }
            let idx = select_branch(&self.frontier, &self.policy, &mut self.rng)?;
            let bp = self.frontier.remove(idx);
            self.stats.tokens_generated += 1;
            self.stats.branches_explored += 1;
            let rollout = self.greedy_rollout(bp.node, true);
            match rollout.outcome {
                Outcome::Leaf(node, reason) => {
                    self.record_leaf(node, reason, rollout.tokens);
                    self.frontier.extend(rollout.branch_points);
                }
                Outcome::EarlyStopped { node, matched_leaf } => {
                    self.tree.set_status(node, NodeStatus::PrunedByEarlyStop);
                    self.stats.wasted_on_early_stop += rollout.tokens;
                    self.early_stops.push(EarlyStopEvent {
                        branch_node: bp.node,
                        stop_node: node,
                        position: bp.position,
                        matched_leaf,
                        wasted_tokens: rollout.tokens,
                    });
                    self.frontier.extend(rollout.branch_points);
                }
                Outcome::BudgetExhausted => {
                    self.stats.discarded_on_budget += rollout.tokens;
                    done = true;
                }
                Outcome::Failed(e) => {
                    self.stats.lost_to_errors += rollout.tokens;
                    degraded = Some(e.to_string());
                    done = true;
                }
            }
        }

        Ok(EnumerationResult {
            frontier_exhausted: self.frontier.is_empty(),
            leaves: self.leaves,
            degraded,
            stats: self.stats,
            early_stops: self.early_stops,
            tree: self.tree,
            prompt_len: self.prompt.len(),
        })
    }
}

/// Enumerates distinct leaves of the pruned tree below `prompt`.
pub fn enumerate<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    policy: BranchPolicy,
    budget: Budget,
    early_stop: EarlyStopConfig,
) -> Result<EnumerationResult<P>, DleError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    Enumerator::new(model, rule, prompt, policy, budget, early_stop)?.run()
}

/// Diagnostics for early-stopped branches, obtained by letting each stopped
/// branch finish greedily outside the tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EarlyStopDiagnostics {
    pub branches_explored: usize,
    pub triggered: usize,
    /// Stopped branches out of all explored branches.
    pub trigger_rate: f64,
    /// Stopped branches whose full continuation equals the matched sibling's.
    pub exact_suffix_match: f64,
    /// Stopped branches whose answer label equals the matched sibling's.
    pub exact_answer_match: f64,
    pub wasted_tokens: usize,
}

/// Greedy completion of `generated` until eos or `max_seq_len`.
pub fn greedy_complete<P, M>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    generated: &[TokenId],
    max_seq_len: usize,
) -> Result<Vec<TokenId>, ModelError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
{
    let eos = model.eos();
    let mut seq = generated.to_vec();
    while seq.last() != Some(&eos) && seq.len() < max_seq_len {
        let dist = model.next_distribution(prompt, &seq)?;
        seq.push(active_set(&dist, rule).greedy());
    }
    Ok(seq)
}

pub fn early_stop_diagnostics<P, M, F>(
    model: &M,
    rule: &TruncationRule<P>,
    prompt: &[TokenId],
    result: &EnumerationResult<P>,
    max_seq_len: usize,
    mut answer: F,
) -> Result<EarlyStopDiagnostics, ModelError>
where
    P: Probability,
    M: LanguageModel<P> + ?Sized,
    F: FnMut(&[TokenId]) -> String,
{
    let mut suffix = 0usize;
    let mut answers = 0usize;
    for ev in &result.early_stops {
        let partial = result.tree.sequence(ev.stop_node);
        let full = greedy_complete(model, rule, prompt, &partial, max_seq_len)?;
        let sibling = &result.leaves[ev.matched_leaf].tokens;
        let after = ev.position + 1;
        if full.get(after..) == sibling.get(after..) {
            suffix += 1;
        }
        if answer(&full) == answer(sibling) {
            answers += 1;
        }
    }
    let triggered = result.early_stops.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EarlyStopDiagnostics {
        branches_explored: result.stats.branches_explored,
        triggered,
        trigger_rate: ratio(triggered, result.stats.branches_explored),
        exact_suffix_match: ratio(suffix, triggered),
        exact_answer_match: ratio(answers, triggered),
        wasted_tokens: result.stats.wasted_on_early_stop,
    })
}
