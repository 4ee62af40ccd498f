//! `cache-sim`, `vote`, `ngram-train` and `oracle`.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use clap::Args;
use dle_core::aggregate::Tally;
use dle_core::cache_sim::{simulate, CacheStats, Eviction, PrefixCache};
use dle_core::model::Tokenization;
use dle_core::oracle::{enumerate_all_leaves, monte_carlo_expected_coverage_multi, top_k_by_mass};
use dle_core::{
    expected_coverage_closed_form, majority_vote, marginal_gain_closed_form, pass_at_k, AnswerExtractor, NgramModel,
    TokenId, Weighting,
};
use serde::Serialize;

use crate::error::{load_error, CliError};
use crate::report::{read_records, read_to_string, to_json_pretty, write_file};
use crate::setup::{parse_k_range, ModelArgs};

fn emit(out: &Option<PathBuf>, contents: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CacheSimArgs {
    /// Leaves JSONL written by `enumerate` or `sample`.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Cache capacity in tokens, or `inf`.
    #[arg(long, default_value = "inf")]
    pub capacity: String,
    /// Tokens per cache block.
    #[arg(long, default_value_t = 1)]
    pub block: usize,
    /// `none` or `lru`.
    #[arg(long, default_value = "lru")]
    pub evict: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CacheSimReport {
    #[serde(flatten)]
    stats: CacheStats,
    actual_rate: f64,
    theoretical_rate: f64,
    streams: usize,
    block: usize,
    capacity: Option<usize>,
    eviction: Eviction,
}

pub fn cache_sim_command(args: &CacheSimArgs) -> Result<(), CliError> {
    let capacity = match args.capacity.as_str() {
        "inf" => None,
        s => Some(
            s.parse::<usize>()
                .map_err(|_| CliError::Config(format!("invalid --capacity {s:?} (expected N or inf)")))?,
        ),
    };
    if args.block == 0 {
        return Err(CliError::Config("--block must be positive".into()));
    }
    let eviction: Eviction = args.evict.parse().map_err(CliError::Config)?;
    let streams: Vec<Vec<TokenId>> = read_records(&args.input)?
        .into_iter()
        .map(|r| r.prompt_tokens.into_iter().chain(r.tokens).collect())
        .collect();
    let mut cache = PrefixCache::new(args.block, capacity, eviction);
    let stats = simulate(&streams, &mut cache);
    if !(stats.c_act <= stats.c_th && stats.c_th <= stats.l_flat) {
        return Err(CliError::Invariant(format!("cache counts out of order: {stats:?}")));
    }
    let report = CacheSimReport {
        stats,
        actual_rate: stats.actual_rate(),
        theoretical_rate: stats.theoretical_rate(),
        streams: streams.len(),
        block: args.block,
        capacity,
        eviction,
    };
    emit(&args.out, &to_json_pretty(&report))
}

#[derive(Debug, Clone, Args)]
pub struct VoteArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// identity, suffix:STR or regex:PAT.
    #[arg(long, default_value = "identity")]
    pub extract: String,
    /// uniform or prob.
    #[arg(long, default_value = "uniform")]
    pub weighting: String,
    /// Accepted answer for pass@k. Repeatable.
    #[arg(long)]
    pub accept: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PromptVote {
    prompt_index: usize,
    prompt: String,
    leaves: usize,
    winner: Option<String>,
    tally: BTreeMap<String, Tally<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pass_at_k: Option<bool>,
}

pub fn vote_command(args: &VoteArgs) -> Result<(), CliError> {
    let extractor: AnswerExtractor = args.extract.parse()?;
    let weighting: Weighting = args.weighting.parse()?;
    let accepted: HashSet<String> = args.accept.iter().cloned().collect();
    let mut groups: BTreeMap<usize, (String, Vec<(String, f64)>)> = BTreeMap::new();
    for r in read_records(&args.input)? {
        let label = extractor.extract(&r.text);
        groups.entry(r.prompt_index).or_insert_with(|| (r.prompt.clone(), Vec::new())).1.push((label, r.q));
    }
    let mut votes = Vec::with_capacity(groups.len());
    for (prompt_index, (prompt, labeled)) in groups {
        let result = majority_vote(&labeled, weighting)?;
        let labels: Vec<&str> = labeled.iter().map(|(l, _)| l.as_str()).collect();
        votes.push(PromptVote {
            prompt_index,
            prompt,
            leaves: labeled.len(),
            winner: result.winner,
            tally: result.tally,
            pass_at_k: (!accepted.is_empty()).then(|| pass_at_k(&labels, &accepted)),
        });
    }
    emit(&args.out, &to_json_pretty(&votes))
}

#[derive(Debug, Clone, Args)]
pub struct NgramTrainArgs {
    /// Plain text, one training sequence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// char or whitespace.
    #[arg(long, default_value = "char")]
    pub tokenization: String,
    /// Model document, loadable as `ngram:PATH`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn ngram_train_command(args: &NgramTrainArgs) -> Result<(), CliError> {
    let tokenization: Tokenization = args.tokenization.parse().map_err(load_error)?;
    let corpus = read_to_string(&args.corpus)?;
    let model = NgramModel::train(&corpus, args.order, args.alpha, tokenization).map_err(load_error)?;
    log::info!("trained order-{} model with a vocabulary of {} tokens", args.order, model.vocab().len());
    write_file(&args.out, &model.to_json())
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// k values for top-k and closed-form coverage.
    #[arg(long, default_value = "1,2,4,8")]
    pub k: String,
    /// Also estimate expected coverage by Monte Carlo with this many trials.
    #[arg(long)]
    pub mc_trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct OracleLeafRow {
    tokens: Vec<TokenId>,
    text: String,
    q: f64,
}

#[derive(Debug, Serialize)]
struct OracleRow {
    k: usize,
    top_k_coverage: f64,
    expected_coverage_closed: f64,
    marginal_gain_closed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_std_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    prompt_index: usize,
    total_mass: f64,
    node_count: usize,
    leaves: Vec<OracleLeafRow>,
    per_k: Vec<OracleRow>,
}

pub fn oracle_command(args: &OracleArgs) -> Result<(), CliError> {
    let ks = parse_k_range(&args.k)?;
    if args.mc_trials.is_some_and(|t| t < 100) {
        return Err(CliError::Config("--mc-trials must be at least 100".into()));
    }
    let loaded = args.model.load()?;
    let model = loaded.model.as_ref();
    let max_depth = args.model.max_seq_len;
    let mut reports = Vec::with_capacity(loaded.prompts.len());
    for prompt in &loaded.prompts {
        let set = enumerate_all_leaves(model, &loaded.rule, &prompt.tokens, max_depth)?;
        let masses = set.masses();
        let mc = match args.mc_trials {
            Some(trials) => Some(monte_carlo_expected_coverage_multi(
                model,
                &loaded.rule,
                &prompt.tokens,
                &ks,
                trials,
                args.seed,
                max_depth,
            )?),
            None => None,
        };
        let per_k = ks
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let top = top_k_by_mass(&set, k.min(masses.len()))?;
                Ok(OracleRow {
                    k,
                    top_k_coverage: top.iter().map(|l| l.q).sum(),
                    expected_coverage_closed: expected_coverage_closed_form(&masses, k as u64),
                    marginal_gain_closed: marginal_gain_closed_form(&masses, k as u64),
                    mc_mean: mc.as_ref().map(|m| m[i].mean),
                    mc_std_error: mc.as_ref().map(|m| m[i].std_error),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        reports.push(OracleReport {
            prompt_index: prompt.index,
            total_mass: set.total_mass,
            node_count: set.node_count,
            leaves: set
                .leaves
                .iter()
                .map(|l| OracleLeafRow {
                    tokens: l.tokens.clone(),
                    text: model.detokenize(&l.tokens),
                    q: l.q,
                })
                .collect(),
            per_k,
        });
    }
    emit(&args.out, &to_json_pretty(&reports))
}
