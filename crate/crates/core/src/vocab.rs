use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];

/// String <-> id mapping. Ids 0..5 are the reserved specials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for s in symbols {
            v.push(s.into());
        }
        v
    }

    fn push(&mut self, s: String) {
        if !self.index.contains_key(&s) {
            self.index.insert(s.clone(), self.tokens.len());
            self.tokens.push(s);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps whitespace-separated text to ids; unknown symbols are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::InvalidArgument(format!("symbol `{t}` not in vocabulary"))))
            .collect()
    }

    /// Joins ids into whitespace-separated text, stopping at EOS and skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == EOS {
                break;
            }
            if id < SPECIALS.len() {
                continue;
            }
            if let Some(t) = self.token(id) {
                out.push(t);
            }
        }
        out.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_roundtrip() {
        let v = Vocab::new(["a", "b", "a"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("<sep>"), Some(SEP));
        let ids = v.encode("b a b").unwrap();
        assert_eq!(ids, vec![6, 5, 6]);
        assert_eq!(v.decode(&[6, 5, EOS, 6]), "b a");
        assert!(v.encode("z").is_err());
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back.id("b"), Some(6));
    }
}
