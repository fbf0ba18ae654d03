use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const BOS: usize = 4;
pub const UNK: usize = 5;
pub const NUM_SPECIALS: usize = 6;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[BOS]", "[UNK]"];

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Byte,
    Char,
    WordList,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    mode: TokenizerMode,
    /// Non-special tokens, in id order starting at `NUM_SPECIALS`.
    tokens: Vec<String>,
}

impl From<TokenizerFile> for Tokenizer {
    fn from(f: TokenizerFile) -> Self {
        Self::with_tokens(f.mode, f.tokens)
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        Self {
            mode: t.mode,
            tokens: t.vocab[NUM_SPECIALS..].to_vec(),
        }
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.vocab == other.vocab
    }
}

impl Tokenizer {
    fn with_tokens(mode: TokenizerMode, tokens: Vec<String>) -> Self {
        let vocab: Vec<String> = SPECIAL_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(tokens)
            .collect();
        let index = vocab
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { mode, vocab, index }
    }

    /// Every distinct character of `texts`, sorted by code point.
    pub fn char_level<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        Self::with_tokens(
            TokenizerMode::Char,
            chars.into_iter().map(|c| c.to_string()).collect(),
        )
    }

    pub fn byte_level() -> Self {
        Self::with_tokens(
            TokenizerMode::Byte,
            (0..=255u8).map(|b| format!("<{b:02x}>")).collect(),
        )
    }

    /// Whitespace-separated words from an externally supplied list.
    pub fn word_list(words: Vec<String>) -> Result<Self> {
        let distinct: BTreeSet<&String> = words.iter().collect();
        if distinct.len() != words.len() {
            return Err(LabError::Invalid("word list has duplicates".into()));
        }
        if words
            .iter()
            .any(|w| w.is_empty() || w.chars().any(char::is_whitespace))
        {
            return Err(LabError::Invalid(
                "word list entries must be non-empty and contain no whitespace".into(),
            ));
        }
        Ok(Self::with_tokens(TokenizerMode::WordList, words))
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.mode {
            TokenizerMode::Byte => text.bytes().map(|b| NUM_SPECIALS + b as usize).collect(),
            TokenizerMode::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .map(|c| *self.index.get(&*c.encode_utf8(&mut buf)).unwrap_or(&UNK))
                    .collect()
            }
            TokenizerMode::WordList => text
                .split_whitespace()
                .map(|w| *self.index.get(w).unwrap_or(&UNK))
                .collect(),
        }
    }

    /// Specials other than UNK are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut pieces: Vec<&str> = Vec::with_capacity(ids.len());
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(LabError::UnknownToken {
                id,
                vocab: self.vocab.len(),
            })?;
            if is_special(id) && id != UNK {
                continue;
            }
            match self.mode {
                TokenizerMode::Byte if id != UNK => bytes.push((id - NUM_SPECIALS) as u8),
                _ => pieces.push(tok),
            }
        }
        Ok(match self.mode {
            TokenizerMode::Byte => String::from_utf8_lossy(&bytes).into_owned(),
            TokenizerMode::Char => pieces.concat(),
            TokenizerMode::WordList => pieces.join(" "),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_round_trip() {
        let t = Tokenizer::char_level(["héllo world", "abce"]);
        let ids = t.encode("hello abc");
        assert!(ids.iter().all(|&i| !is_special(i)));
        assert_eq!(t.decode(&ids).unwrap(), "hello abc");
        assert_eq!(t.encode("z"), vec![UNK]);
    }

    #[test]
    fn byte_round_trip() {
        let t = Tokenizer::byte_level();
        assert_eq!(t.vocab_size(), 262);
        let s = "naïve ☃";
        assert_eq!(t.decode(&t.encode(s)).unwrap(), s);
    }

    #[test]
    fn word_list_round_trip() {
        let t = Tokenizer::word_list(vec!["the".into(), "cat".into(), "sat".into()]).unwrap();
        assert_eq!(t.encode("the  cat sat"), vec![6, 7, 8]);
        assert_eq!(t.decode(&[6, 7, 8]).unwrap(), "the cat sat");
        assert!(Tokenizer::word_list(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = Tokenizer::char_level(["xyz"]);
        let back: Tokenizer = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.encode("zyx"), t.encode("zyx"));
    }
}
