//! Word-level add-k smoothed n-gram language model.
//!
//! A sentence `w1 .. wm` is scored as `Σ log P(w_i | h_i) + log P(</s> | h_{m+1})`
//! where the history is `<s> w1 .. w_{i-1}` truncated to its last `n-1` words.
//! `P(w | h) = (C(h, w) + k) / (C(h) + k·V)` with `V` the seen words plus the
//! unknown-word class and `</s>`. There is no backoff: an unseen history is uniform.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LasError, Result};
use crate::vocab::UNK;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    n: usize,
    k: f64,
    words: BTreeSet<String>,
    /// Full-order n-grams (history words then the predicted word).
    counts: HashMap<Vec<String>, u64>,
    history_totals: HashMap<Vec<String>, u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    k: f64,
    vocab_size: usize,
}

impl NGramModel {
    /// Fits on normalized text lines, one sentence per line.
    pub fn fit<S: AsRef<str>>(corpus: &[S], n: usize, k: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(LasError::EmptyInput("language model corpus"));
        }
        if n == 0 || !(k > 0.0) {
            return Err(LasError::Config("n-gram order must be >= 1 and k > 0".into()));
        }
        let mut m = NGramModel {
            n,
            k,
            words: BTreeSet::new(),
            counts: HashMap::new(),
            history_totals: HashMap::new(),
        };
        for line in corpus {
            let words: Vec<&str> = line.as_ref().split_whitespace().collect();
            m.words.extend(words.iter().map(|w| w.to_string()));
            for gram in m.events(&words) {
                m.add(gram, 1);
            }
        }
        Ok(m)
    }

    fn add(&mut self, gram: Vec<String>, count: u64) {
        let hist = gram[..gram.len() - 1].to_vec();
        *self.history_totals.entry(hist).or_default() += count;
        *self.counts.entry(gram).or_default() += count;
    }

    /// The `(history, word)` events of one sentence, unknown words mapped to `<unk>`.
    fn events(&self, words: &[&str]) -> Vec<Vec<String>> {
        let mut history = vec![BOS.to_string()];
        let mut out = Vec::with_capacity(words.len() + 1);
        for w in words.iter().copied().chain(std::iter::once(EOS)) {
            let w = if w == EOS || self.words.contains(w) { w } else { UNK };
            let start = history.len().saturating_sub(self.n - 1);
            let mut gram = history[start..].to_vec();
            gram.push(w.to_string());
            out.push(gram);
            history.push(w.to_string());
        }
        out
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// `V`: seen words, `<unk>` and `</s>`.
    pub fn vocab_size(&self) -> usize {
        self.words.len() + usize::from(!self.words.contains(UNK)) + 1
    }

    /// Words the model predicts explicitly: seen words, `<unk>` and `</s>`.
    pub fn outcomes(&self) -> Vec<String> {
        let mut v: Vec<String> = self.words.iter().cloned().collect();
        if !self.words.contains(UNK) {
            v.push(UNK.to_string());
        }
        v.push(EOS.to_string());
        v
    }

    /// `P(word | history)` where `history` is already truncated to `n-1` words.
    pub fn prob(&self, history: &[String], word: &str) -> f64 {
        let word = if word == EOS || self.words.contains(word) { word } else { UNK };
        let mut gram = history.to_vec();
        gram.push(word.to_string());
        let c = self.counts.get(&gram).copied().unwrap_or(0) as f64;
        let total = self.history_totals.get(history).copied().unwrap_or(0) as f64;
        (c + self.k) / (total + self.k * self.vocab_size() as f64)
    }

    /// Natural-log probability of a sentence including its end marker.
    pub fn log_prob(&self, text: &str) -> f64 {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.events(&words)
            .iter()
            .map(|g| self.prob(&g[..g.len() - 1], &g[g.len() - 1]).ln())
            .sum()
    }

    /// Histories observed in training.
    pub fn histories(&self) -> impl Iterator<Item = &Vec<String>> {
        self.history_totals.keys()
    }

    /// JSON header line then sorted `ngram\tcount` lines.
    pub fn to_text(&self) -> String {
        let header = Header {
            n: self.n,
            k: self.k,
            vocab_size: self.vocab_size(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        let sorted: BTreeMap<String, u64> = self.counts.iter().map(|(g, c)| (g.join(" "), *c)).collect();
        for (g, c) in sorted {
            out.push_str(&format!("{g}\t{c}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Header = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| LasError::format("language model", format!("header: {e}")))?;
        let mut m = NGramModel {
            n: header.n,
            k: header.k,
            words: BTreeSet::new(),
            counts: HashMap::new(),
            history_totals: HashMap::new(),
        };
        for (i, line) in lines.enumerate() {
            let bad = || LasError::format("language model", format!("line {}: {line:?}", i + 2));
            let (gram, count) = line.split_once('\t').ok_or_else(bad)?;
            let count: u64 = count.parse().map_err(|_| bad())?;
            let gram: Vec<String> = gram.split(' ').map(str::to_string).collect();
            if gram.is_empty() || gram.len() > m.n {
                return Err(bad());
            }
            let w = &gram[gram.len() - 1];
            if w != EOS {
                m.words.insert(w.clone());
            }
            m.add(gram, count);
        }
        if m.vocab_size() != header.vocab_size {
            return Err(LasError::format(
                "language model",
                format!("header vocab_size {} but counts imply {}", header.vocab_size, m.vocab_size()),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| LasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        NGramModel::from_text(&fs::read_to_string(path).map_err(|e| LasError::io(path, e))?)
    }
}
