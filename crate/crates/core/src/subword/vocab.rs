use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::SpecialTokens;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const START_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const END_ID: u32 = 4;

/// Bijective token/id mapping shared by source and target sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    token_of: Vec<String>,
}

impl Vocabulary {
    /// Reserved tokens at ids 0..=4, then every other token of `tokens`
    /// ordered by descending frequency and then lexicographically.
    pub fn build<'a, I>(tokens: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            if !SpecialTokens::contains(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut rest: Vec<(&str, u64)> = counts.into_iter().collect();
        rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let token_of = SpecialTokens::DEFAULT
            .ordered()
            .iter()
            .map(|s| s.to_string())
            .chain(rest.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(token_of).expect("built vocabulary is bijective")
    }

    fn from_tokens(token_of: Vec<String>) -> Result<Self> {
        let specials = SpecialTokens::DEFAULT.ordered();
        if token_of.len() < specials.len() || token_of[..specials.len()] != specials {
            return Err(Error::contract("vocabulary must start with <pad> <unk> <start> <sep> <end>"));
        }
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (i, t) in token_of.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { id_of, token_of })
    }

    pub fn size(&self) -> usize {
        self.token_of.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.id_of.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.token_of.get(id as usize).map(String::as_str).unwrap_or(crate::corpus::UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// `token<TAB>id` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (i, t) in self.token_of.iter().enumerate() {
            text.push_str(t);
            text.push('\t');
            text.push_str(&i.to_string());
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut token_of = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err(format!("expected token<TAB>id, got {line:?}")))?;
            let id: usize = id.parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
            if id != token_of.len() {
                return Err(parse_err(format!("ids must be dense and ordered; expected {}", token_of.len())));
            }
            token_of.push(tok.to_string());
        }
        Self::from_tokens(token_of)
    }
}
