//! Word-level vocabulary with reserved control tokens.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const SEP_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;

const RESERVED: [&str; 4] = [PAD, BOS, SEP, EOS];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("token {token:?} is not in the vocabulary")]
    OutOfVocabulary { token: String },
    #[error("reserved token {0:?} must appear exactly once at its fixed id")]
    Reserved(String),
    #[error("duplicate token {0:?}")]
    Duplicate(String),
}

/// Dense token/id bijection. Ids 0..4 are `<pad> <bos> <sep> <eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the whitespace-separated words of `texts`,
    /// sorted so the result does not depend on input order.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(words)
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens are filtered")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        for (id, name) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*name) {
                return Err(VocabError::Reserved((*name).to_owned()));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as TokenId).is_some() {
                return Err(if RESERVED.contains(&tok.as_str()) {
                    VocabError::Reserved(tok.clone())
                } else {
                    VocabError::Duplicate(tok.clone())
                });
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: TokenId) -> bool {
        id <= EOS_ID
    }

    /// Splits on whitespace; every word must be a known, non-reserved token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace()
            .map(|w| match self.id(w) {
                Some(id) if !Self::is_reserved(id) => Ok(id),
                _ => Err(VocabError::OutOfVocabulary { token: w.to_owned() }),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for tok in &self.tokens {
            h.update(tok.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VocabError;
    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Token ids of a prompt or a full trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn extend_from_slice(&mut self, ids: &[TokenId]) {
        self.0.extend_from_slice(ids);
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    pub fn starts_with_bos(&self) -> bool {
        self.0.first() == Some(&BOS_ID)
    }

    pub fn display<'a>(&'a self, vocab: &'a Vocabulary) -> impl fmt::Display + 'a {
        struct D<'a>(&'a [TokenId], &'a Vocabulary);
        impl fmt::Display for D<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.1.detokenize(self.0))
            }
        }
        D(&self.0, vocab)
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}
