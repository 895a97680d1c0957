use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bijective token/id map. Ids `0..4` are always PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from content tokens, placed after the reserved ids
    /// in the given order.
    pub fn new<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> =
            RESERVED.iter().map(|s| s.to_string()).chain(content.into_iter().map(Into::into)).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= NUM_RESERVED {
            return Err(DataError::Config(format!(
                "vocabulary needs at least {} tokens, got {}",
                NUM_RESERVED + 1,
                tokens.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(DataError::Format(format!("id {i} must be {r}, found {}", tokens[i])));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::Config(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of `size` ids whose content tokens are named `w<id>`.
    pub fn synthetic(size: usize) -> Result<Self> {
        Self::new((NUM_RESERVED..size).map(|i| format!("w{i}")))
    }

    /// Keeps the `cap` most frequent tokens of the text (ties broken by
    /// first occurrence).
    pub fn from_frequencies<'a, I>(tokens: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, t) in tokens.into_iter().enumerate() {
            if RESERVED.contains(&t) {
                continue;
            }
            counts.entry(t).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap);
        Self::new(ranked.into_iter().map(|(t, _, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization. Unknown tokens and literal control tokens
    /// (PAD, BOS, EOS) both become UNK.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| match self.id(t) {
                id if id < NUM_RESERVED => UNK,
                id => id,
            })
            .collect()
    }

    /// Space-joined tokens; ids outside the vocabulary decode as UNK.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(RESERVED[UNK])).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = DataError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
