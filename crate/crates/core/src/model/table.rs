use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, LanguageModel, ModelError, NextTokenDistribution, TokenId, Vocabulary};
use crate::num::Probability;

/// On-disk form of a [`TableModel`].
///
/// Transition keys are the space-joined tokens of the generated prefix
/// (prompt excluded); the empty string is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDocument {
    pub vocab: Vec<String>,
    pub eos: String,
    pub transitions: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<BTreeMap<String, f64>>,
}

/// Explicit prefix → distribution table.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: Vocabulary,
    transitions: HashMap<Vec<TokenId>, Vec<f64>>,
    default: Option<Vec<f64>>,
}

impl TableModel {
    pub fn new(tokens: &[&str], eos: &str) -> Result<Self, ModelError> {
        let vocab = Vocabulary::new(tokens.iter().map(|s| s.to_string()).collect(), eos)?;
        Ok(Self {
            vocab,
            transitions: HashMap::new(),
            default: None,
        })
    }

    /// Adds the distribution after `prefix` (space-separated tokens).
    pub fn with_transition(mut self, prefix: &str, probs: &[(&str, f64)]) -> Result<Self, ModelError> {
        let key = self.parse_prefix(prefix)?;
        let dense = self.dense(probs.iter().map(|(t, p)| (*t, *p)))?;
        self.transitions.insert(key, dense);
        Ok(self)
    }

    pub fn with_default(mut self, probs: &[(&str, f64)]) -> Result<Self, ModelError> {
        self.default = Some(self.dense(probs.iter().map(|(t, p)| (*t, *p)))?);
        Ok(self)
    }

    pub fn from_document(doc: &TableDocument) -> Result<Self, ModelError> {
        let vocab = Vocabulary::new(doc.vocab.clone(), &doc.eos)?;
        let mut model = Self {
            vocab,
            transitions: HashMap::with_capacity(doc.transitions.len()),
            default: None,
        };
        for (prefix, probs) in &doc.transitions {
            let key = model.parse_prefix(prefix)?;
            let dense = model
                .dense(probs.iter().map(|(t, p)| (t.as_str(), *p)))
                .map_err(|e| ModelError::Parse(format!("transition {prefix:?}: {e}")))?;
            model.transitions.insert(key, dense);
        }
        if let Some(d) = &doc.default {
            model.default = Some(model.dense(d.iter().map(|(t, p)| (t.as_str(), *p)))?);
        }
        Ok(model)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: TableDocument = serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        Self::from_document(&doc)
    }

    pub fn from_path(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&read_file(path)?)
    }

    pub fn to_document(&self) -> TableDocument {
        let sparse = |probs: &[f64]| -> BTreeMap<String, f64> {
            probs
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, p)| (self.vocab.tokens()[i].clone(), *p))
                .collect()
        };
        TableDocument {
            vocab: self.vocab.tokens().to_vec(),
            eos: self.vocab.token(self.vocab.eos()).unwrap().to_string(),
            transitions: self
                .transitions
                .iter()
                .map(|(k, v)| (self.join(k), sparse(v)))
                .collect(),
            default: self.default.as_deref().map(sparse),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn join(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.vocab.token(id).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn parse_prefix(&self, prefix: &str) -> Result<Vec<TokenId>, ModelError> {
        let ids = prefix
            .split_whitespace()
            .map(|t| self.vocab.get(t).ok_or_else(|| ModelError::UnknownToken(t.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if ids.contains(&self.vocab.eos()) {
            return Err(ModelError::EosInPrefix);
        }
        Ok(ids)
    }

    fn dense<'a>(&self, probs: impl Iterator<Item = (&'a str, f64)>) -> Result<Vec<f64>, ModelError> {
        let mut dense = vec![0.0; self.vocab.len()];
        for (tok, p) in probs {
            let id = self
                .vocab
                .get(tok)
                .ok_or_else(|| ModelError::UnknownToken(tok.to_string()))?;
            dense[id.index()] = p;
        }
        NextTokenDistribution::new(dense.clone())?;
        Ok(dense)
    }
}

impl<P: Probability> LanguageModel<P> for TableModel {
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
        let ids = text
            .split_whitespace()
            .map(|t| self.vocab.get(t).ok_or_else(|| ModelError::UnknownToken(t.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if ids.contains(&self.vocab.eos()) {
            return Err(ModelError::EosInPrefix);
        }
        Ok(ids)
    }

    fn detokenize(&self, ids: &[TokenId]) -> String {
        self.join(
            &ids.iter()
                .copied()
                .filter(|&id| id != self.vocab.eos())
                .collect::<Vec<_>>(),
        )
    }

    fn next_distribution(
        &self,
        _prompt: &[TokenId],
        generated: &[TokenId],
    ) -> Result<NextTokenDistribution<P>, ModelError> {
        if generated.contains(&self.vocab.eos()) {
            return Err(ModelError::EosInPrefix);
        }
        let probs = self
            .transitions
            .get(generated)
            .or(self.default.as_ref())
            .ok_or_else(|| ModelError::MissingTransition {
                prefix: self.join(generated),
            })?;
        NextTokenDistribution::new(probs.iter().map(|&p| P::of(p)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_token() -> TableModel {
        TableModel::new(&["a", "b", "<eos>"], "<eos>")
            .unwrap()
            .with_transition("", &[("a", 0.9), ("b", 0.1)])
            .unwrap()
    }

    #[test]
    fn root_lookup() {
        let m = two_token();
        let d: NextTokenDistribution<f64> = m.next_distribution(&[], &[]).unwrap();
        assert_eq!(d.probs(), &[0.9, 0.1, 0.0]);
    }

    #[test]
    fn default_fallback_is_exact() {
        let m = two_token().with_default(&[("<eos>", 1.0)]).unwrap();
        let d: NextTokenDistribution<f64> = m.next_distribution(&[], &[TokenId(1)]).unwrap();
        assert_eq!(d.probs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_transition_errors() {
        let m = two_token();
        let r: Result<NextTokenDistribution<f64>, _> = m.next_distribution(&[], &[TokenId(0)]);
        assert!(matches!(r, Err(ModelError::MissingTransition { .. })));
    }

    #[test]
    fn prompt_is_ignored_for_lookup() {
        let m = two_token();
        let a: NextTokenDistribution<f64> = m.next_distribution(&[TokenId(1), TokenId(0)], &[]).unwrap();
        let b: NextTokenDistribution<f64> = m.next_distribution(&[], &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn document_round_trip() {
        let json = r#"{"vocab":["a","b","<eos>"],"eos":"<eos>",
            "transitions":{"":{"a":0.9,"b":0.1},"a":{"<eos>":1.0}},
            "default":{"<eos>":1.0}}"#;
        let m = TableModel::from_json(json).unwrap();
        let again = TableModel::from_document(&m.to_document()).unwrap();
        assert_eq!(m.to_document(), again.to_document());
    }

    #[test]
    fn rejects_bad_documents() {
        let bad_sum = r#"{"vocab":["a","<eos>"],"eos":"<eos>","transitions":{"":{"a":0.5}}}"#;
        assert!(TableModel::from_json(bad_sum).is_err());
        let bad_token = r#"{"vocab":["a","<eos>"],"eos":"<eos>","transitions":{"":{"z":1.0}}}"#;
        assert!(TableModel::from_json(bad_token).is_err());
        let eos_key = r#"{"vocab":["a","<eos>"],"eos":"<eos>","transitions":{"<eos>":{"a":1.0}}}"#;
        assert!(TableModel::from_json(eos_key).is_err());
    }
}
