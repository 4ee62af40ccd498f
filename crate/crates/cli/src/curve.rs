//! `compare` and `coverage-curve`: DLE coverage against sampled coverage and
//! the closed-form expectation, per k.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use dle_core::{
    enumerate, expected_coverage_closed_form, sample_sequences, BranchPolicy, Budget, EarlyStopConfig,
    LanguageModel, Rule,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::CliError;
use crate::report::{sibling_path, Degraded, Manifest};
use crate::setup::{derive_seed, parse_early_stop, parse_k_range, ModelArgs, Prompt};

#[derive(Debug, Clone, Args, Serialize)]
pub struct CurveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Values of k: `N`, `A..B` or a comma-separated list.
    #[arg(long, default_value = "1..32")]
    pub k: String,
    #[arg(long, default_value = "probfirst")]
    pub policy: String,
    /// Early-stop window for the DLE run, or `off`.
    #[arg(long, default_value = "off")]
    pub early_stop_n: String,
    /// Independent sampling runs per prompt.
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leaf limit when enumerating the full support for the closed form.
    #[arg(long, default_value_t = 100_000)]
    pub max_support: usize,
    /// CSV destination. Prints to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Per-prompt curves indexed like the requested k values.
struct PromptCurves {
    dle: Vec<f64>,
    dle_tokens: Vec<usize>,
    closed: Option<Vec<f64>>,
    /// `sampled[r][i]`: coverage of replicate `r` at `ks[i]`.
    sampled: Vec<Vec<f64>>,
    sampled_tokens: Vec<Vec<usize>>,
    degraded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub k: usize,
    pub coverage_dle: f64,
    pub expected_coverage_closed: Option<f64>,
    pub coverage_sampled_mean: f64,
    pub coverage_sampled_std: f64,
    pub tokens_dle: f64,
    pub tokens_sampled_mean: f64,
}

struct Setup<'a> {
    model: &'a dyn LanguageModel<f64>,
    rule: &'a Rule,
    ks: &'a [usize],
    policy: BranchPolicy,
    early_stop: EarlyStopConfig,
    args: &'a CurveArgs,
}

impl Setup<'_> {
    fn curves(&self, prompt: &Prompt) -> Result<PromptCurves, CliError> {
        let k_max = *self.ks.iter().max().expect("k list is non-empty");
        let max_len = self.args.model.max_seq_len;
        let budget = Budget::leaves(k_max).with_max_seq_len(max_len);
        let run = enumerate(self.model, self.rule, &prompt.tokens, self.policy, budget, self.early_stop)?;
        let mut degraded = run.degraded.clone();
        let cumulative = run.coverage_curve();
        let mut spent = Vec::with_capacity(run.leaves.len());
        let mut total = 0;
        for leaf in &run.leaves {
            total += leaf.new_tokens;
            spent.push(total);
        }
        let at = |k: usize| k.min(cumulative.len()).checked_sub(1);
        let dle = self.ks.iter().map(|&k| at(k).map_or(0.0, |i| cumulative[i])).collect();
        let dle_tokens = self.ks.iter().map(|&k| at(k).map_or(0, |i| spent[i])).collect();

        let support_budget = Budget::leaves(self.args.max_support).with_max_seq_len(max_len);
        let support = enumerate(
            self.model,
            self.rule,
            &prompt.tokens,
            BranchPolicy::ProbFirst,
            support_budget,
            EarlyStopConfig::disabled(),
        )?;
        let closed = if support.frontier_exhausted && support.degraded.is_none() {
            let masses: Vec<f64> = support.leaves.iter().map(|l| l.q()).collect();
            Some(self.ks.iter().map(|&k| expected_coverage_closed_form(&masses, k as u64)).collect())
        } else {
            log::warn!("prompt {}: support exceeds --max-support, closed form omitted", prompt.index);
            None
        };

        let base = derive_seed(self.args.seed, prompt.index);
        let mut sampled = Vec::with_capacity(self.args.replicates);
        let mut sampled_tokens = Vec::with_capacity(self.args.replicates);
        for r in 0..self.args.replicates {
            let draws = sample_sequences(self.model, self.rule, &prompt.tokens, k_max, derive_seed(base, r), 1.0, max_len)
                .map_err(|e| CliError::Model(e.to_string()))?;
            if let Some((i, e)) = draws.failures.first() {
                degraded = degraded.or(Some(format!("replicate {r}, draw {i}: {e}")));
            }
            let mut seen = HashSet::new();
            let (mut cov, mut tokens) = (0.0, 0);
            let mut per_draw = Vec::with_capacity(k_max);
            let mut draws = draws.sequences.iter().peekable();
            for index in 0..k_max {
                if let Some(d) = draws.next_if(|d| d.index == index) {
                    tokens += d.tokens.len();
                    if seen.insert(d.tokens.clone()) {
                        cov += d.q();
                    }
                }
                per_draw.push((cov, tokens));
            }
            sampled.push(self.ks.iter().map(|&k| per_draw[k - 1].0).collect());
            sampled_tokens.push(self.ks.iter().map(|&k| per_draw[k - 1].1).collect());
        }
        Ok(PromptCurves {
            dle,
            dle_tokens,
            closed,
            sampled,
            sampled_tokens,
            degraded,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Averages over prompts. The sampled spread is taken across replicates of
/// the prompt-averaged coverage.
fn rows(ks: &[usize], curves: &[PromptCurves], replicates: usize) -> Vec<CurveRow> {
    let n = curves.len() as f64;
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let per_rep: Vec<f64> = (0..replicates)
                .map(|r| curves.iter().map(|c| c.sampled[r][i]).sum::<f64>() / n)
                .collect();
            let tokens_rep: Vec<f64> = (0..replicates)
                .map(|r| curves.iter().map(|c| c.sampled_tokens[r][i] as f64).sum::<f64>() / n)
                .collect();
            let closed = curves
                .iter()
                .map(|c| c.closed.as_ref().map(|v| v[i]))
                .sum::<Option<f64>>()
                .map(|s| s / n);
            CurveRow {
                k,
                coverage_dle: curves.iter().map(|c| c.dle[i]).sum::<f64>() / n,
                expected_coverage_closed: closed,
                coverage_sampled_mean: mean(&per_rep),
                coverage_sampled_std: std_dev(&per_rep),
                tokens_dle: curves.iter().map(|c| c.dle_tokens[i] as f64).sum::<f64>() / n,
                tokens_sampled_mean: mean(&tokens_rep),
            }
        })
        .collect()
}

fn to_csv(rows: &[CurveRow], with_tokens: bool) -> String {
    let mut out = String::from("k,coverage_dle,expected_coverage_closed,coverage_sampled_mean,coverage_sampled_std");
    if with_tokens {
        out.push_str(",tokens_dle,tokens_sampled_mean");
    }
    out.push('\n');
    for r in rows {
        let closed = r.expected_coverage_closed.map(|c| c.to_string()).unwrap_or_default();
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.k, r.coverage_dle, closed, r.coverage_sampled_mean, r.coverage_sampled_std
        );
        if with_tokens {
            let _ = write!(out, ",{},{}", r.tokens_dle, r.tokens_sampled_mean);
        }
        out.push('\n');
    }
    out
}

pub fn curve_command(args: &CurveArgs, with_tokens: bool) -> Result<(), CliError> {
    let name = if with_tokens { "compare" } else { "coverage-curve" };
    let ks = parse_k_range(&args.k)?;
    let policy: BranchPolicy = args.policy.parse()?;
    let early_stop = parse_early_stop(&args.early_stop_n)?;
    if args.replicates == 0 || args.max_support == 0 {
        return Err(CliError::Config("--replicates and --max-support must be positive".into()));
    }
    let loaded = args.model.load()?;
    let setup = Setup {
        model: loaded.model.as_ref(),
        rule: &loaded.rule,
        ks: &ks,
        policy,
        early_stop,
        args,
    };
    let curves: Vec<PromptCurves> = loaded
        .prompts
        .par_iter()
        .map(|p| setup.curves(p))
        .collect::<Result<_, CliError>>()?;
    let table = rows(&ks, &curves, args.replicates);
    let csv = to_csv(&table, with_tokens);
    let degraded: Vec<(usize, String)> = curves
        .iter()
        .zip(&loaded.prompts)
        .filter_map(|(c, p)| c.degraded.clone().map(|d| (p.index, d)))
        .collect();
    match &args.out {
        None => print!("{csv}"),
        Some(path) => {
            let mut manifest = Manifest::new(name, args, Some(args.seed));
            manifest.model_sha256 = loaded.model_sha256.clone();
            manifest.prompts_sha256 = loaded.prompts_sha256.clone();
            manifest.degraded = degraded
                .iter()
                .map(|(i, d)| Degraded {
                    prompt_index: *i,
                    reason: d.clone(),
                })
                .collect();
            manifest.emit("curve", path, &csv)?;
            let manifest_path = sibling_path(path, "manifest.json");
            return crate::run::finish(manifest, &manifest_path);
        }
    }
    if let Some((i, d)) = degraded.first() {
        return Err(CliError::Model(format!("prompt {i} degraded: {d}")));
    }
    Ok(())
}
