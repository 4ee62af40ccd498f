//! Argument groups shared by several commands and their loading.

use std::path::PathBuf;

use clap::Args;
use dle_core::dle::DEFAULT_MAX_SEQ_LEN;
use dle_core::rng::{substream, Substream};
use dle_core::{EarlyStopConfig, LanguageModel, ModelSpec, Rule, TokenId};
use rand::RngCore;
use serde::Serialize;

use crate::error::{load_error, CliError};
use crate::report::{read_to_string, sha256_hex};

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Model: table:PATH, ngram:PATH or remote[:TOP_N].
    #[arg(long)]
    pub model: String,
    /// Truncation rule, e.g. epsilon:0.05 or top_p:0.95+top_k:10.
    #[arg(long)]
    pub rule: String,
    /// A single prompt. Defaults to the empty prompt.
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    /// One prompt per line.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Maximum number of generated tokens per sequence.
    #[arg(long, default_value_t = DEFAULT_MAX_SEQ_LEN)]
    pub max_seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct Prompt {
    pub index: usize,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

pub struct Loaded {
    pub model: Box<dyn LanguageModel<f64>>,
    pub rule: Rule,
    pub prompts: Vec<Prompt>,
    pub model_sha256: Option<String>,
    pub prompts_sha256: String,
}

impl ModelArgs {
    pub fn load(&self) -> Result<Loaded, CliError> {
        let rule: Rule = self.rule.parse()?;
        if self.max_seq_len == 0 {
            return Err(CliError::Config("--max-seq-len must be positive".into()));
        }
        let spec: ModelSpec = self.model.parse().map_err(load_error)?;
        let texts: Vec<String> = match (&self.prompt, &self.prompt_file) {
            (Some(p), _) => vec![p.clone()],
            (None, Some(path)) => read_to_string(path)?.lines().map(str::to_string).collect(),
            (None, None) => vec![String::new()],
        };
        if texts.is_empty() {
            return Err(CliError::Config("prompt file contains no prompts".into()));
        }
        let model_sha256 = match &spec {
            ModelSpec::Table(path) | ModelSpec::Ngram(path) => {
                let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
                Some(sha256_hex(&bytes))
            }
            ModelSpec::Remote { .. } => None,
        };
        let model = spec.load::<f64>().map_err(load_error)?;
        let prompts = texts
            .iter()
            .enumerate()
            .map(|(index, text)| {
                let tokens = model
                    .tokenize(text)
                    .map_err(|e| CliError::Config(format!("prompt {index}: {e}")))?;
                Ok(Prompt {
                    index,
                    text: text.clone(),
                    tokens,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Loaded {
            model,
            rule,
            prompts_sha256: sha256_hex(texts.join("\n").as_bytes()),
            prompts,
            model_sha256,
        })
    }
}

/// `off` or a window length of at least one token.
pub fn parse_early_stop(s: &str) -> Result<EarlyStopConfig, CliError> {
    match s {
        "off" => Ok(EarlyStopConfig::disabled()),
        _ => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(EarlyStopConfig::after(n)),
            _ => Err(CliError::Config(format!("invalid --early-stop-n {s:?} (expected a positive integer or off)"))),
        },
    }
}

/// `N` (meaning `1..N`), `A..B` (inclusive) or a comma-separated list.
pub fn parse_k_range(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Config(format!("invalid k range {s:?}"));
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        (num(a)?..=num(b)?).collect()
    } else if s.contains(',') {
        s.split(',').map(num).collect::<Result<_, _>>()?
    } else {
        (1..=num(s)?).collect()
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

/// Independent child seed number `index` of `seed`.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    substream(seed, Substream::Replicate, index as u64).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_ranges() {
        assert_eq!(parse_k_range("3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_k_range("2..4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_k_range("1,8,4").unwrap(), vec![1, 8, 4]);
        assert!(parse_k_range("0..3").is_err());
        assert!(parse_k_range("5..2").is_err());
        assert!(parse_k_range("x").is_err());
    }

    #[test]
    fn early_stop_flag() {
        assert!(!parse_early_stop("off").unwrap().enabled);
        assert_eq!(parse_early_stop("10").unwrap(), EarlyStopConfig::after(10));
        assert!(parse_early_stop("0").is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(1, 0), derive_seed(1, 0));
    }
}
