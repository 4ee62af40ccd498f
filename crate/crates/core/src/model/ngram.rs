use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_file, LanguageModel, ModelError, NextTokenDistribution, TokenId, Vocabulary};
use crate::num::Probability;

pub const NGRAM_EOS: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    Char,
    Whitespace,
}

impl FromStr for Tokenization {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(Tokenization::Char),
            "whitespace" => Ok(Tokenization::Whitespace),
            _ => Err(ModelError::InvalidParameter(format!("unknown tokenization {s:?}"))),
        }
    }
}

impl fmt::Display for Tokenization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tokenization::Char => "char",
            Tokenization::Whitespace => "whitespace",
        })
    }
}

impl Tokenization {
    fn split(&self, line: &str) -> Vec<String> {
        match self {
            Tokenization::Char => line.chars().map(String::from).collect(),
            Tokenization::Whitespace => line.split_whitespace().map(String::from).collect(),
        }
    }
}

/// Context of `order - 1` tokens; `None` pads positions before the start.
type Context = Vec<Option<TokenId>>;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

/// Add-α smoothed n-gram model.
///
/// `P(v | ctx) = (count(ctx, v) + α) / (count(ctx) + α·|V|)`, where the
/// context is the last `order - 1` tokens of prompt and completion.
#[derive(Debug, Clone)]
pub struct NgramModel {
    vocab: Vocabulary,
    order: usize,
    alpha: f64,
    tokenization: Tokenization,
    counts: HashMap<Context, ContextCounts>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NgramDocument {
    order: usize,
    alpha: f64,
    tokenization: Tokenization,
    vocab: Vec<String>,
    eos: String,
    contexts: Vec<ContextEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextEntry {
    context: Vec<Option<String>>,
    next: BTreeMap<String, u64>,
}

impl NgramModel {
    /// Counts n-grams over one training sequence per non-empty line, with one
    /// end-of-sequence token appended to each line.
    pub fn train(corpus: &str, order: usize, alpha: f64, tokenization: Tokenization) -> Result<Self, ModelError> {
        if order == 0 {
            return Err(ModelError::InvalidParameter("n-gram order must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("smoothing alpha must be > 0, got {alpha}")));
        }
        let lines: Vec<Vec<String>> = corpus
            .lines()
            .map(|l| tokenization.split(l.trim_end_matches('\r')))
            .filter(|toks| !toks.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }

        let mut tokens: Vec<String> = Vec::new();
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for tok in lines.iter().flatten() {
            if tok == NGRAM_EOS {
                return Err(ModelError::InvalidVocabulary(format!("corpus contains reserved token {NGRAM_EOS}")));
            }
            if seen.insert(tok.as_str(), ()).is_none() {
                tokens.push(tok.clone());
            }
        }
        tokens.push(NGRAM_EOS.to_string());
        let vocab = Vocabulary::new(tokens, NGRAM_EOS)?;

        let mut counts: HashMap<Context, ContextCounts> = HashMap::new();
        for line in &lines {
            let mut ids: Vec<TokenId> = line.iter().map(|t| vocab.get(t).unwrap()).collect();
            ids.push(vocab.eos());
            for i in 0..ids.len() {
                let ctx = context_of(&ids[..i], order);
                let entry = counts.entry(ctx).or_default();
                entry.total += 1;
                *entry.next.entry(ids[i]).or_insert(0) += 1;
            }
        }

        Ok(Self {
            vocab,
            order,
            alpha,
            tokenization,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tokenization(&self) -> Tokenization {
        self.tokenization
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn to_json(&self) -> String {
        let name = |id: &TokenId| self.vocab.token(*id).unwrap().to_string();
        let mut contexts: Vec<ContextEntry> = self
            .counts
            .iter()
            .map(|(ctx, c)| ContextEntry {
                context: ctx.iter().map(|t| t.as_ref().map(name)).collect(),
                next: c.next.iter().map(|(t, n)| (name(t), *n)).collect(),
            })
            .collect();
        contexts.sort_by(|a, b| a.context.cmp(&b.context));
        let doc = NgramDocument {
            order: self.order,
            alpha: self.alpha,
            tokenization: self.tokenization,
            vocab: self.vocab.tokens().to_vec(),
            eos: NGRAM_EOS.to_string(),
            contexts,
        };
        serde_json::to_string_pretty(&doc).expect("n-gram document serializes")
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: NgramDocument = serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        if doc.order == 0 || !(doc.alpha > 0.0 && doc.alpha.is_finite()) {
            return Err(ModelError::InvalidParameter("order must be >= 1 and alpha > 0".into()));
        }
        let vocab = Vocabulary::new(doc.vocab, &doc.eos)?;
        let lookup = |t: &str| vocab.get(t).ok_or_else(|| ModelError::UnknownToken(t.to_string()));
        let mut counts = HashMap::new();
        for entry in doc.contexts {
            if entry.context.len() != doc.order - 1 {
                return Err(ModelError::Parse("context length does not match order".into()));
            }
            let ctx = entry
                .context
                .iter()
                .map(|t| t.as_deref().map(lookup).transpose())
                .collect::<Result<Context, _>>()?;
            let mut c = ContextCounts::default();
            for (t, n) in &entry.next {
                c.next.insert(lookup(t)?, *n);
                c.total += n;
            }
            counts.insert(ctx, c);
        }
        Ok(Self {
            vocab,
            order: doc.order,
            alpha: doc.alpha,
            tokenization: doc.tokenization,
            counts,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&read_file(path)?)
    }
}

fn context_of(history: &[TokenId], order: usize) -> Context {
    let width = order - 1;
    let mut ctx: Context = vec![None; width.saturating_sub(history.len())];
    let start = history.len().saturating_sub(width);
    ctx.extend(history[start..].iter().copied().map(Some));
    ctx
}

impl<P: Probability> LanguageModel<P> for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn eos(&self) -> TokenId {
        self.vocab.eos()
    }

    fn token_str(&self, id: TokenId) -> Option<String> {
        self.vocab.token(id).map(str::to_string)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        self.tokenization
            .split(text)
            .iter()
            .map(|t| match self.vocab.get(t) {
                Some(id) if id == self.vocab.eos() => Err(ModelError::EosInPrefix),
                Some(id) => Ok(id),
                None => Err(ModelError::UnknownToken(t.clone())),
            })
            .collect()
    }

    fn detokenize(&self, ids: &[TokenId]) -> String {
        let parts: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != self.vocab.eos())
            .filter_map(|&id| self.vocab.token(id))
            .collect();
        match self.tokenization {
            Tokenization::Char => parts.concat(),
            Tokenization::Whitespace => parts.join(" "),
        }
    }

    fn next_distribution(
        &self,
        prompt: &[TokenId],
        generated: &[TokenId],
    ) -> Result<NextTokenDistribution<P>, ModelError> {
        if prompt.contains(&self.vocab.eos()) || generated.contains(&self.vocab.eos()) {
            return Err(ModelError::EosInPrefix);
        }
        let width = self.order - 1;
        let tail: Vec<TokenId> = if generated.len() >= width {
            generated[generated.len() - width..].to_vec()
        } else {
            let from_prompt = (width - generated.len()).min(prompt.len());
            prompt[prompt.len() - from_prompt..]
                .iter()
                .chain(generated)
                .copied()
                .collect()
        };
        let ctx = context_of(&tail, self.order);
        let v = self.vocab.len() as f64;
        let (total, next) = match self.counts.get(&ctx) {
            Some(c) => (c.total as f64, Some(&c.next)),
            None => (0.0, None),
        };
        let denom = total + self.alpha * v;
        let probs = (0..self.vocab.len())
            .map(|i| {
                let count = next
                    .and_then(|n| n.get(&TokenId::from(i)))
                    .copied()
                    .unwrap_or(0) as f64;
                P::of((count + self.alpha) / denom)
            })
            .collect();
        NextTokenDistribution::new(probs)
    }
}
