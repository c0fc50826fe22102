//! Character vocabulary and text normalization.
//!
//! The output alphabet is `a-z`, `0-9`, space, comma, period, apostrophe and an
//! unknown symbol, plus the framing symbols `<sos>` and `<eos>`. `<sos>` is an
//! input-only symbol: the character distribution never predicts it.

use std::collections::HashMap;

use crate::error::{LasError, Result};

/// Textual form of the unknown-character symbol inside normalized strings.
pub const UNK: &str = "<unk>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";

pub const UNK_ID: usize = 40;
pub const SOS_ID: usize = 41;
pub const EOS_ID: usize = 42;
/// Number of symbols, including `<sos>` and `<eos>`.
pub const VOCAB_SIZE: usize = 43;
/// Width of the character distribution (everything except `<sos>`).
pub const OUTPUT_SIZE: usize = VOCAB_SIZE - 1;

const PUNCT: [char; 4] = [' ', ',', '.', '\''];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = ('a'..='z').chain('0'..='9').map(String::from).collect();
        symbols.extend(PUNCT.iter().map(|c| c.to_string()));
        symbols.extend([UNK, SOS, EOS].iter().map(|s| s.to_string()));
        Self::build(symbols)
    }

    fn build(symbols: Vec<String>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocabulary { symbols, index }
    }

    /// Rebuilds a vocabulary from its serialized symbol list. Only the standard
    /// symbol order is accepted, since model shapes depend on it.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let v = Self::build(symbols);
        if v != Self::standard() {
            return Err(LasError::format("vocabulary", "symbol list differs from the standard alphabet"));
        }
        Ok(v)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Frames `text` as `<sos> y1 .. yS <eos>`.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = vec![SOS_ID];
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if rest.starts_with(UNK) {
                ids.push(UNK_ID);
                rest = &rest[UNK.len()..];
                continue;
            }
            let id = if is_kept(c) {
                self.index[c.encode_utf8(&mut [0; 4]) as &str]
            } else {
                return Err(LasError::Encoding(c));
            };
            ids.push(id);
            rest = &rest[c.len_utf8()..];
        }
        ids.push(EOS_ID);
        Ok(TokenSequence { ids })
    }

    /// Inverse of [`encode`](Self::encode); framing symbols are dropped.
    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &t in tokens {
            match t {
                SOS_ID | EOS_ID => {}
                _ => out.push_str(self.symbol(t).ok_or(LasError::Token(t))?),
            }
        }
        Ok(out)
    }
}

/// Maps a vocabulary id to its position in the character distribution.
pub fn output_index(token: usize) -> Result<usize> {
    match token {
        SOS_ID => Err(LasError::Token(token)),
        t if t < SOS_ID => Ok(t),
        EOS_ID => Ok(SOS_ID),
        t => Err(LasError::Token(t)),
    }
}

/// Maps a position in the character distribution back to a vocabulary id.
pub fn output_token(index: usize) -> usize {
    if index < SOS_ID {
        index
    } else {
        EOS_ID
    }
}

fn is_kept(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || PUNCT.contains(&c)
}

/// Lower-cases, replaces every character outside the alphabet with `<unk>`,
/// collapses whitespace runs and trims.
pub fn normalize(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    let mut rest = lowered.as_str();
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        if rest.starts_with(UNK) {
            out.push_str(UNK);
            rest = &rest[UNK.len()..];
            continue;
        }
        if is_kept(c) {
            out.push(c);
        } else {
            out.push_str(UNK);
        }
        rest = &rest[c.len_utf8()..];
    }
    out
}

/// Token ids framed by `<sos>` ... `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Checks the framing invariant: `<sos>` only first, `<eos>` only last.
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let n = ids.len();
        if n < 2 || ids[0] != SOS_ID || ids[n - 1] != EOS_ID {
            return Err(LasError::format("token sequence", "must be framed by <sos> ... <eos>"));
        }
        for &t in &ids[1..n - 1] {
            if t == SOS_ID || t == EOS_ID || t >= VOCAB_SIZE {
                return Err(LasError::Token(t));
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Characters between the framing symbols.
    pub fn chars(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    /// Number of decoding steps (characters plus `<eos>`).
    pub fn steps(&self) -> usize {
        self.ids.len() - 1
    }
}
