use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
    pub min_count: usize,
    pub max_len: usize,
}

impl Vocabulary {
    /// Keeps tokens occurring at least `min_count` times; ids ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a, I, S>(sentences: I, min_count: usize, max_len: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let id_to_token = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(id_to_token, min_count, max_len)
    }

    fn from_tokens(id_to_token: Vec<String>, min_count: usize, max_len: usize) -> Self {
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { id_to_token, token_to_id, min_count, max_len }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.get(token).is_some_and(|&i| i >= SPECIALS.len())
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `[BOS] payload [EOS]`, payload truncated to `max_len`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len().min(self.max_len) + 2);
        out.push(BOS);
        out.extend(tokens.iter().take(self.max_len).map(|t| self.id(t.as_ref())));
        out.push(EOS);
        out
    }

    /// Stops at the first EOS; BOS and PAD are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            match id {
                EOS => break,
                BOS | PAD => {}
                _ => out.push(tok.to_string()),
            }
        }
        Ok(out)
    }

    /// FNV-1a over the token list and length settings.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::fnv1a(self.id_to_token.join("\n").as_bytes());
        h ^= self.max_len as u64;
        h = h.wrapping_mul(0x100000001b3);
        h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(s)?;
        if v.id_to_token.len() < SPECIALS.len() || v.id_to_token[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Invalid("vocabulary must start with the four special tokens".into()));
        }
        Ok(Self::from_tokens(v.id_to_token, v.min_count, v.max_len))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
