//! `enumerate` and `sample`: per-prompt generation with JSONL, metrics and
//! manifest output.

use std::collections::HashSet;
use std::path::PathBuf;

use clap::{ArgGroup, Args};
use dle_core::baseline::{sample_with_token_budget, Draw};
use dle_core::cache_sim::{simulate, CacheStats, PrefixCache};
use dle_core::dle::EnumerationStats;
use dle_core::metrics::{coverage, repetition};
use dle_core::tree::{flatten, TreeDump};
use dle_core::{enumerate, sample_sequences, BranchPolicy, Budget, DleError, Enumeration, LanguageModel, TokenId};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;
use crate::report::{sibling_path, to_json_pretty, to_jsonl, Degraded, LeafRecord, Manifest};
use crate::setup::{derive_seed, parse_early_stop, ModelArgs, Prompt};

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Leaves or draws as JSONL.
    #[arg(long, default_value = "leaves.jsonl")]
    pub out: PathBuf,
    /// Metrics JSON. Defaults to `<out stem>.metrics.json`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Run manifest. Defaults to `<out stem>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl OutputArgs {
    fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| sibling_path(&self.out, "metrics.json"))
    }

    fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| sibling_path(&self.out, "manifest.json"))
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EnumerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// probfirst, divfirst, randbranch:SEED, globalprob or dfs.
    #[arg(long, default_value = "probfirst")]
    pub policy: String,
    /// Leaf budget.
    #[arg(long)]
    pub k: Option<usize>,
    /// Budget of newly generated tokens.
    #[arg(long)]
    pub token_budget: Option<usize>,
    /// Early-stop window in tokens, or `off`.
    #[arg(long, default_value = "10")]
    pub early_stop_n: String,
    /// Writes the pruned tree of every prompt as JSON.
    #[arg(long)]
    pub dump_tree: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("amount").required(true).args(["k", "token_budget"])))]
pub struct SampleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Number of draws per prompt.
    #[arg(long)]
    pub k: Option<usize>,
    /// Draw until this many tokens have been generated per prompt.
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Serialize)]
struct CacheReport {
    #[serde(flatten)]
    stats: CacheStats,
    actual_rate: f64,
    theoretical_rate: f64,
}

impl From<CacheStats> for CacheReport {
    fn from(stats: CacheStats) -> Self {
        Self {
            stats,
            actual_rate: stats.actual_rate(),
            theoretical_rate: stats.theoretical_rate(),
        }
    }
}

#[derive(Debug, Serialize)]
struct EnumeratePromptMetrics {
    prompt_index: usize,
    leaves: usize,
    coverage: f64,
    coverage_error_bound: f64,
    coverage_per_k: Vec<f64>,
    frontier_exhausted: bool,
    degraded: Option<String>,
    stats: EnumerationStats,
    early_stops: usize,
    repetition_rate: f64,
    cache: CacheReport,
}

#[derive(Debug, Serialize)]
struct SamplePromptMetrics {
    prompt_index: usize,
    seed: u64,
    draws: usize,
    distinct: usize,
    coverage_distinct: f64,
    tokens_generated: usize,
    failures: usize,
    degraded: Option<String>,
    repetition_rate: f64,
    cache: CacheReport,
}

#[derive(Debug, Serialize)]
struct MetricsFile<T> {
    command: &'static str,
    mean_coverage: f64,
    prompts: Vec<T>,
}

/// Largest coverage accepted before reporting an invariant violation.
const COVERAGE_LIMIT: f64 = 1.0 + 1e-9;

fn cache_of(prompt: &[TokenId], completions: &[Vec<TokenId>]) -> CacheReport {
    simulate(&flatten(prompt, completions), &mut PrefixCache::unlimited()).into()
}

fn check_coverage(index: usize, value: f64) -> Result<(), CliError> {
    if !(0.0..=COVERAGE_LIMIT).contains(&value) {
        return Err(CliError::Invariant(format!("prompt {index}: coverage {value} outside [0, 1]")));
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Serialize)]
struct TreeFile {
    prompt_index: usize,
    #[serde(flatten)]
    tree: TreeDump,
}

pub fn enumerate_command(args: &EnumerateArgs) -> Result<(), CliError> {
    let policy: BranchPolicy = args.policy.parse()?;
    let early_stop = parse_early_stop(&args.early_stop_n)?;
    let budget = Budget {
        max_leaves: args.k.or(if args.token_budget.is_none() { Some(usize::MAX) } else { None }),
        max_new_tokens: args.token_budget,
        max_seq_len: args.model.max_seq_len,
    };
    budget.validate()?;
    let loaded = args.model.load()?;
    let model = loaded.model.as_ref();
    let runs: Vec<Result<Enumeration, DleError>> = loaded
        .prompts
        .par_iter()
        .map(|p| enumerate(model, &loaded.rule, &p.tokens, policy, budget, early_stop))
        .collect();

    let mut manifest = Manifest::new("enumerate", args, None);
    manifest.model_sha256 = loaded.model_sha256.clone();
    manifest.prompts_sha256 = loaded.prompts_sha256.clone();
    let mut records = Vec::new();
    let mut metrics = Vec::new();
    let mut trees = Vec::new();
    for (prompt, run) in loaded.prompts.iter().zip(runs) {
        let run = match run {
            Ok(run) => run,
            Err(DleError::Model(e)) => {
                manifest.degraded.push(Degraded {
                    prompt_index: prompt.index,
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(reason) = &run.degraded {
            manifest.degraded.push(Degraded {
                prompt_index: prompt.index,
                reason: reason.clone(),
            });
        }
        records.extend(leaf_records(model, prompt, &run));
        metrics.push(enumerate_metrics(prompt, &run)?);
        if args.dump_tree.is_some() {
            trees.push(TreeFile {
                prompt_index: prompt.index,
                tree: run.tree.dump(),
            });
        }
    }

    manifest.emit("leaves", &args.output.out, &to_jsonl(&records))?;
    let file = MetricsFile {
        command: "enumerate",
        mean_coverage: mean(metrics.iter().map(|m| m.coverage)),
        prompts: metrics,
    };
    manifest.emit("metrics", &args.output.metrics_path(), &to_json_pretty(&file))?;
    if let Some(path) = &args.dump_tree {
        manifest.emit("tree", path, &to_json_pretty(&trees))?;
    }
    finish(manifest, &args.output.manifest_path())
}

fn leaf_records(model: &dyn LanguageModel<f64>, prompt: &Prompt, run: &Enumeration) -> Vec<LeafRecord> {
    run.leaves
        .iter()
        .map(|leaf| LeafRecord {
            tokens: leaf.tokens.clone(),
            text: model.detokenize(&leaf.tokens),
            q: leaf.q(),
            log_q: leaf.log_q,
            new_tokens: leaf.new_tokens,
            reused_prefix: leaf.reused_prefix_len,
            stop_reason: leaf.stop_reason.to_string(),
            order: leaf.order,
            draw: None,
            prompt_index: prompt.index,
            prompt: prompt.text.clone(),
            prompt_tokens: prompt.tokens.clone(),
        })
        .collect()
}

fn enumerate_metrics(prompt: &Prompt, run: &Enumeration) -> Result<EnumeratePromptMetrics, CliError> {
    let pairs: Vec<(&[TokenId], f64)> = run.leaves.iter().map(|l| (l.tokens.as_slice(), l.q())).collect();
    let cov = coverage(&pairs)?;
    check_coverage(prompt.index, cov.value)?;
    let completions: Vec<Vec<TokenId>> = run.leaves.iter().map(|l| l.tokens.clone()).collect();
    Ok(EnumeratePromptMetrics {
        prompt_index: prompt.index,
        leaves: run.leaves.len(),
        coverage: cov.value,
        coverage_error_bound: cov.error_bound,
        coverage_per_k: run.coverage_curve(),
        frontier_exhausted: run.frontier_exhausted,
        degraded: run.degraded.clone(),
        stats: run.stats.clone(),
        early_stops: run.early_stops.len(),
        repetition_rate: repetition(&completions).rate(),
        cache: cache_of(&prompt.tokens, &completions),
    })
}

struct SampleOutcome {
    seed: u64,
    draws: Vec<Draw<f64>>,
    tokens_generated: usize,
    failures: usize,
    degraded: Option<String>,
}

fn sample_prompt(args: &SampleArgs, model: &dyn LanguageModel<f64>, rule: &dle_core::Rule, prompt: &Prompt) -> SampleOutcome {
    let seed = derive_seed(args.seed, prompt.index);
    let (temperature, max_len) = (args.temperature, args.model.max_seq_len);
    let result = match (args.k, args.token_budget) {
        (Some(k), _) => sample_sequences(model, rule, &prompt.tokens, k, seed, temperature, max_len).map(|run| {
            let degraded = run.failures.first().map(|(i, e)| format!("{} failed draws, first at {i}: {e}", run.failures.len()));
            SampleOutcome {
                seed,
                tokens_generated: run.tokens_generated,
                failures: run.failures.len(),
                draws: run.sequences,
                degraded,
            }
        }),
        (None, Some(n)) => sample_with_token_budget(model, rule, &prompt.tokens, n, seed, temperature, max_len).map(|run| SampleOutcome {
            seed,
            draws: run.completed,
            tokens_generated: run.tokens_generated,
            failures: 0,
            degraded: None,
        }),
        (None, None) => unreachable!("clap requires k or token_budget"),
    };
    result.unwrap_or_else(|e| SampleOutcome {
        seed,
        draws: Vec::new(),
        tokens_generated: 0,
        failures: 1,
        degraded: Some(e.to_string()),
    })
}

pub fn sample_command(args: &SampleArgs) -> Result<(), CliError> {
    if !(args.temperature >= 0.0 && args.temperature.is_finite()) {
        return Err(CliError::Config(format!("invalid temperature {}", args.temperature)));
    }
    if args.k == Some(0) || args.token_budget == Some(0) {
        return Err(CliError::Config("--k and --token-budget must be positive".into()));
    }
    let loaded = args.model.load()?;
    let model = loaded.model.as_ref();
    let outcomes: Vec<SampleOutcome> = loaded
        .prompts
        .par_iter()
        .map(|p| sample_prompt(args, model, &loaded.rule, p))
        .collect();

    let mut manifest = Manifest::new("sample", args, Some(args.seed));
    manifest.model_sha256 = loaded.model_sha256.clone();
    manifest.prompts_sha256 = loaded.prompts_sha256.clone();
    let mut records = Vec::new();
    let mut metrics = Vec::new();
    for (prompt, outcome) in loaded.prompts.iter().zip(outcomes) {
        if let Some(reason) = &outcome.degraded {
            manifest.degraded.push(Degraded {
                prompt_index: prompt.index,
                reason: reason.clone(),
            });
        }
        for (order, d) in outcome.draws.iter().enumerate() {
            records.push(LeafRecord {
                tokens: d.tokens.clone(),
                text: model.detokenize(&d.tokens),
                q: d.q(),
                log_q: d.log_q,
                new_tokens: d.tokens.len(),
                reused_prefix: prompt.tokens.len(),
                stop_reason: d.stop_reason.to_string(),
                order,
                draw: Some(d.index),
                prompt_index: prompt.index,
                prompt: prompt.text.clone(),
                prompt_tokens: prompt.tokens.clone(),
            });
        }
        let mut seen = HashSet::new();
        let distinct: Vec<(&[TokenId], f64)> = outcome
            .draws
            .iter()
            .filter(|d| seen.insert(d.tokens.as_slice()))
            .map(|d| (d.tokens.as_slice(), d.q()))
            .collect();
        let cov = coverage(&distinct)?;
        check_coverage(prompt.index, cov.value)?;
        let completions: Vec<Vec<TokenId>> = outcome.draws.iter().map(|d| d.tokens.clone()).collect();
        metrics.push(SamplePromptMetrics {
            prompt_index: prompt.index,
            seed: outcome.seed,
            draws: outcome.draws.len(),
            distinct: distinct.len(),
            coverage_distinct: cov.value,
            tokens_generated: outcome.tokens_generated,
            failures: outcome.failures,
            degraded: outcome.degraded,
            repetition_rate: repetition(&completions).rate(),
            cache: cache_of(&prompt.tokens, &completions),
        });
    }

    manifest.emit("draws", &args.output.out, &to_jsonl(&records))?;
    let file = MetricsFile {
        command: "sample",
        mean_coverage: mean(metrics.iter().map(|m| m.coverage_distinct)),
        prompts: metrics,
    };
    manifest.emit("metrics", &args.output.metrics_path(), &to_json_pretty(&file))?;
    finish(manifest, &args.output.manifest_path())
}

/// Writes the manifest, then reports degraded prompts as a model error.
pub fn finish<C: Serialize>(manifest: Manifest<C>, path: &std::path::Path) -> Result<(), CliError> {
    crate::report::write_file(path, &to_json_pretty(&manifest))?;
    match manifest.degraded.first() {
        None => Ok(()),
        Some(d) => Err(CliError::Model(format!(
            "{} prompt(s) degraded; first: prompt {}: {}",
            manifest.degraded.len(),
            d.prompt_index,
            d.reason
        ))),
    }
}
