use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tokenizer::tokenize;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const USER: TokenId = 4;
pub const ASSISTANT: TokenId = 5;
pub const ACTION: TokenId = 6;
pub const RESPONSE: TokenId = 7;

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 8] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<user>",
    "<assistant>",
    "<action>",
    "<response>",
];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIALS.len()
}

/// Token/id mapping. Specials occupy ids `0..8`; the rest follow in
/// descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Counts tokens over `texts` and keeps those seen at least `min_count` times.
    pub fn build<I, S>(texts: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t)))
    }

    /// Vocabulary from non-special tokens in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = HashMap::new();
        for (i, s) in SPECIALS.iter().enumerate() {
            index.insert(s.to_string(), i as TokenId);
        }
        for tok in tokens {
            if index.contains_key(&tok) {
                continue;
            }
            index.insert(tok.clone(), all.len() as TokenId);
            all.push(tok);
        }
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a plain (non-special) token; UNK when unknown. Text that spells
    /// a special token never maps onto it.
    pub fn id(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) if !is_special(id) => id,
            _ => UNK,
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token) != UNK
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(SPECIALS[UNK as usize])
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Non-special tokens in id order.
    pub fn plain_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    /// Stable content hash used to pair checkpoints with vocabularies.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    /// One non-special token per line; line `i` holds id `8 + i`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.plain_tokens().join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(&body))
    }

    pub fn from_lines(body: &str) -> Self {
        Self::from_tokens(body.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}
