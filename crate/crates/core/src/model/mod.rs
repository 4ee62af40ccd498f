//! Conditional next-token probability sources.
//!
//! Three backends implement [`LanguageModel`]: an explicit transition
//! table, an add-α smoothed n-gram model and a client for remote
//! log-probability endpoints.

mod ngram;
mod remote;
mod table;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::num::Probability;

pub use ngram::{NgramModel, Tokenization};
pub use remote::{RemoteClient, RemoteConfig, RemoteDistribution, RemoteError, RemoteErrorKind};
pub use table::{TableDocument, TableModel};

/// Index of a token in a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("no transition for prefix {prefix:?} and no default distribution")]
    MissingTransition { prefix: String },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("prefix contains the end-of-sequence token")]
    EosInPrefix,
    #[error("corpus is empty after tokenization")]
    EmptyCorpus,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse model document: {0}")]
    Parse(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

/// Ordered token strings with a designated end-of-sequence token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos: &str) -> Result<Self, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::InvalidVocabulary("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId::from(i)).is_some() {
                return Err(ModelError::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        let eos = *index
            .get(eos)
            .ok_or_else(|| ModelError::InvalidVocabulary(format!("eos token {eos:?} not in vocabulary")))?;
        Ok(Self { tokens, index, eos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Checks that every id is in range and that eos, if present, is last.
    pub fn check_sequence(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        for (pos, &id) in ids.iter().enumerate() {
            if id.index() >= self.len() {
                return Err(ModelError::TokenOutOfRange(id));
            }
            if id == self.eos && pos + 1 != ids.len() {
                return Err(ModelError::EosInPrefix);
            }
        }
        Ok(())
    }
}

/// Probability vector over the vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution<P> {
    probs: Vec<P>,
}

impl<P: Probability> NextTokenDistribution<P> {
    /// Validates non-negativity and unit sum.
    pub fn new(probs: Vec<P>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::InvalidDistribution("empty probability vector".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p >= P::zero()))
        {
            return Err(ModelError::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let total: P = probs.iter().copied().sum();
        if (total - P::one()).abs() > P::sum_tolerance() {
            return Err(ModelError::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn from_weights(weights: Vec<P>) -> Result<Self, ModelError> {
        let total: P = weights.iter().copied().sum();
        if !(total > P::zero()) || !total.is_finite() {
            return Err(ModelError::InvalidDistribution(format!("weights sum to {total}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    /// Point mass on one token.
    pub fn point_mass(len: usize, token: TokenId) -> Self {
        let mut probs = vec![P::zero(); len];
        probs[token.index()] = P::one();
        Self { probs }
    }

    pub fn probs(&self) -> &[P] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> P {
        self.probs.get(token.index()).copied().unwrap_or_else(P::zero)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A conditional next-token probability source.
///
/// `prompt` holds the conditioning tokens and `generated` the completion so
/// far. Neither may contain the end-of-sequence token.
pub trait LanguageModel<P: Probability>: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn eos(&self) -> TokenId;

    fn token_str(&self, id: TokenId) -> Option<String>;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ModelError>;

    fn detokenize(&self, ids: &[TokenId]) -> String;

    fn next_distribution(
        &self,
        prompt: &[TokenId],
        generated: &[TokenId],
    ) -> Result<NextTokenDistribution<P>, ModelError>;
}

/// Which backend to load, as written on the command line.
///
/// `table:PATH`, `ngram:PATH` (a trained model document) or
/// `remote[:TOP_N]` (endpoint from `DLE_REMOTE_URL` / `DLE_REMOTE_KEY`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Table(PathBuf),
    Ngram(PathBuf),
    Remote { top_n: usize },
}

impl FromStr for ModelSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "table" if !arg.is_empty() => Ok(ModelSpec::Table(arg.into())),
            "ngram" if !arg.is_empty() => Ok(ModelSpec::Ngram(arg.into())),
            "remote" if arg.is_empty() => Ok(ModelSpec::Remote { top_n: 20 }),
            "remote" => match arg.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(ModelSpec::Remote { top_n: n }),
                _ => Err(ModelError::InvalidParameter(format!("bad remote top_n {arg:?}"))),
            },
            _ => Err(ModelError::InvalidParameter(format!("unrecognised model spec {s:?}"))),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Table(p) => write!(f, "table:{}", p.display()),
            ModelSpec::Ngram(p) => write!(f, "ngram:{}", p.display()),
            ModelSpec::Remote { top_n } => write!(f, "remote:{top_n}"),
        }
    }
}

impl ModelSpec {
    pub fn load<P: Probability>(&self) -> Result<Box<dyn LanguageModel<P>>, ModelError> {
        match self {
            ModelSpec::Table(path) => Ok(Box::new(TableModel::from_path(path)?)),
            ModelSpec::Ngram(path) => Ok(Box::new(NgramModel::from_path(path)?)),
            ModelSpec::Remote { top_n } => {
                let config = RemoteConfig::from_env()?;
                Ok(Box::new(RemoteClient::new(config, *top_n)?))
            }
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<String, ModelError> {
    std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}
