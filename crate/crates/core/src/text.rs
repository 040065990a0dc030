//! Caption tokenization, vocabulary construction and id encoding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const END_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

const SPECIALS: [&str; 4] = [PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN];

/// Upper bound on the default sequence length.
pub const MAX_LEN_CAP: usize = 40;

fn is_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, '।' | '.' | ',' | '?' | '!')
}

/// NFC-normalizes `caption` and splits it on whitespace and sentence
/// punctuation (danda, period, comma, question and exclamation marks).
pub fn tokenize(caption: &str) -> Result<Vec<String>> {
    let normalized: String = caption.nfc().collect();
    let tokens: Vec<String> = normalized
        .split(is_separator)
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyCaption);
    }
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            counts: Vec::new(),
        };
        for s in SPECIALS {
            v.push(s.to_owned(), 0);
        }
        v
    }

    fn push(&mut self, token: String, count: u64) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        self.counts.push(count);
    }

    /// Builds a vocabulary from tokenized captions. Tokens seen at least
    /// `min_count` times get ids from 4 upward, most frequent first, ties in
    /// lexicographic order.
    pub fn build(corpus: &[Vec<String>], min_count: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::CorpusEmpty);
        }
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for tok in corpus.iter().flatten() {
            if SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok.as_str()).or_default() += 1;
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Self::with_specials();
        for (tok, c) in kept {
            vocab.push(tok.to_owned(), c);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    /// Id for a surface token; sentinels and unknown words map to unk.
    fn lookup(&self, token: &str) -> u32 {
        match self.token_to_id.get(token) {
            Some(&id) if id > UNK_ID => id,
            _ => UNK_ID,
        }
    }

    /// Serializes as `<id>\t<token>\t<count>` lines in id order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, (tok, c)) in self.id_to_token.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{id}\t{tok}\t{c}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            counts: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::ParseError {
                line: lineno,
                msg: msg.to_owned(),
            };
            let mut fields = line.split('\t');
            let (Some(id), Some(tok), Some(count), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(err("expected three tab-separated fields"));
            };
            let id: usize = id.parse().map_err(|_| err("bad id"))?;
            let count: u64 = count.parse().map_err(|_| err("bad count"))?;
            if id != vocab.len() {
                return Err(err("ids must be contiguous and ascending"));
            }
            if id < SPECIALS.len() && tok != SPECIALS[id] {
                return Err(err("special tokens must occupy ids 0-3"));
            }
            if id >= SPECIALS.len() && SPECIALS.contains(&tok) {
                return Err(err("special token outside reserved ids"));
            }
            if tok.is_empty() || vocab.token_to_id.contains_key(tok) {
                return Err(err("empty or duplicate token"));
            }
            vocab.push(tok.to_owned(), count);
        }
        if vocab.len() < SPECIALS.len() {
            return Err(Error::ParseError {
                line: vocab.len() + 1,
                msg: "missing special tokens".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCaption {
    pub ids: Vec<u32>,
    pub true_length: usize,
}

impl EncodedCaption {
    /// The non-pad prefix: start, body, end.
    pub fn body(&self) -> &[u32] {
        &self.ids[..self.true_length]
    }
}

/// Frames `tokens` as `[start, ids.., end]`, truncating the body to
/// `max_len - 2` and right-padding to exactly `max_len`.
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<EncodedCaption> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(START_ID);
    ids.extend(tokens.iter().take(max_len - 2).map(|t| vocab.lookup(t)));
    ids.push(END_ID);
    let true_length = ids.len();
    ids.resize(max_len, PAD_ID);
    Ok(EncodedCaption { ids, true_length })
}

/// Renders ids as space-joined tokens, skipping start, end and pad.
pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::UnknownId {
            id,
            size: vocab.len(),
        })?;
        match id {
            PAD_ID | START_ID | END_ID => {}
            _ => words.push(tok),
        }
    }
    Ok(words.join(" "))
}

/// `min(longest + 2, 40)` over the given tokenized captions.
pub fn default_max_len<'a>(captions: impl IntoIterator<Item = &'a Vec<String>>) -> usize {
    let longest = captions.into_iter().map(Vec::len).max().unwrap_or(1);
    (longest + 2).min(MAX_LEN_CAP)
}
