//! Symbol class space, LaTeX token sequences and counting ground truth.
//!
//! The vocabulary file is UTF-8 text with one token per line; the line number
//! is the class id. `sos` must sit on line 0 and `eos` on line 1.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SOS: &str = "sos";
pub const EOS: &str = "eos";
pub const SOS_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Tokens that leave no ink on the page. Their counting ground truth is zero.
pub const INVISIBLE_TOKENS: [&str; 6] = [SOS, EOS, "^", "_", "{", "}"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    invisible: Vec<bool>,
}

impl SymbolVocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.first().map(String::as_str) != Some(SOS) {
            return Err(Error::InvalidVocabulary("line 0 must be \"sos\"".into()));
        }
        if tokens.get(1).map(String::as_str) != Some(EOS) {
            return Err(Error::InvalidVocabulary("line 1 must be \"eos\"".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!(
                    "line {id}: token {tok:?} is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!(
                    "line {id}: duplicate token {tok:?}"
                )));
            }
        }
        // Invisible tokens missing from a reduced vocabulary are skipped.
        let invisible = tokens
            .iter()
            .map(|t| INVISIBLE_TOKENS.contains(&t.as_str()))
            .collect();
        Ok(Self {
            tokens,
            index,
            invisible,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.is_empty()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the canonical file contents.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::InvalidId {
                id,
                size: self.len(),
            })
    }

    pub fn is_invisible(&self, id: usize) -> bool {
        self.invisible.get(id).copied().unwrap_or(false)
    }

    pub fn invisible_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.invisible[i]).collect()
    }

    /// Wraps the whitespace-delimited markup with `sos`/`eos`.
    pub fn tokenize(&self, markup: &str) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(markup.len() / 2 + 2);
        ids.push(SOS_ID);
        for (position, tok) in markup.split_whitespace().enumerate() {
            match self.id(tok) {
                Some(id) if id != SOS_ID && id != EOS_ID => ids.push(id),
                _ => {
                    return Err(Error::UnknownToken {
                        token: tok.to_string(),
                        position,
                    })
                }
            }
        }
        ids.push(EOS_ID);
        Ok(TokenSequence(ids))
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        self.join_ids(seq.interior())
    }

    /// Space-joins ids, dropping any `sos`/`eos` framing.
    pub fn join_ids(&self, ids: &[usize]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id)?;
            if id != SOS_ID && id != EOS_ID {
                parts.push(tok);
            }
        }
        Ok(parts.join(" "))
    }

    /// Per-class occurrence counts with invisible classes forced to zero.
    pub fn counting_ground_truth(&self, seq: &TokenSequence) -> Result<CountVector> {
        let mut counts = vec![0.0; self.len()];
        for &id in seq.ids() {
            if id >= self.len() {
                return Err(Error::InvalidId {
                    id,
                    size: self.len(),
                });
            }
            if !self.invisible[id] {
                counts[id] += 1.0;
            }
        }
        Ok(CountVector(counts))
    }
}

impl fmt::Display for SymbolVocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vocabulary[{} classes]", self.len())
    }
}

/// Class ids framed by `sos` ... `eos`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != SOS_ID || ids[ids.len() - 1] != EOS_ID {
            return Err(Error::MalformedSequence(
                "sequence must start with sos and end with eos".into(),
            ));
        }
        if ids[1..ids.len() - 1]
            .iter()
            .any(|&i| i == SOS_ID || i == EOS_ID)
        {
            return Err(Error::MalformedSequence(
                "sos/eos inside sequence body".into(),
            ));
        }
        Ok(Self(ids))
    }

    /// Builds a sequence from unframed ids, adding `sos`/`eos`.
    pub fn from_interior(interior: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(interior.len() + 2);
        ids.push(SOS_ID);
        ids.extend_from_slice(interior);
        ids.push(EOS_ID);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn interior(&self) -> &[usize] {
        &self.0[1..self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Strips a leading `sos` and everything from the first `eos` on.
pub fn strip_framing(ids: &[usize]) -> &[usize] {
    let ids = match ids.first() {
        Some(&SOS_ID) => &ids[1..],
        _ => ids,
    };
    match ids.iter().position(|&i| i == EOS_ID) {
        Some(end) => &ids[..end],
        None => ids,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountVector(pub Vec<f64>);

impl CountVector {
    pub fn zeros(classes: usize) -> Self {
        Self(vec![0.0; classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}
