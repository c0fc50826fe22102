//! Scoring and analysis: word and character error rates, recall against
//! training frequency, error by utterance length, and attention alignments.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::beam::{decode, BeamResult, Dictionary};
use crate::error::{LasError, Result};
use crate::listener::encode;
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::speller::{decoder_step, AttendCache, DecoderState};
use crate::synth::Utterance;
use crate::vocab::{output_index, TokenSequence, Vocabulary, EOS_ID, UNK};

/// Edit counts of one alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / N`.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_words as f64
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.rate()
    }

    /// Pools counts, so the pooled rate weights utterances by length.
    pub fn merge(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_words += other.ref_words;
    }
}

/// Minimum edit alignment of `hyp` against `reference`. On ties the
/// backtrace prefers a match or substitution, then a deletion, then an insertion.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> WerBreakdown {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = WerBreakdown {
        ref_words: n,
        ..WerBreakdown::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            if reference[i - 1] != hyp[j - 1] {
                out.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out
}

/// Scoring words: `<unk>` markers removed unless `keep_unk`, then split on whitespace.
pub fn score_words(text: &str, keep_unk: bool) -> Vec<String> {
    let text = if keep_unk { text.to_string() } else { text.replace(UNK, "") };
    text.split_whitespace().map(str::to_string).collect()
}

pub fn wer_with(reference: &str, hyp: &str, keep_unk: bool) -> Result<WerBreakdown> {
    let r = score_words(reference, keep_unk);
    if r.is_empty() {
        return Err(LasError::EmptyReference);
    }
    Ok(edit_counts(&r, &score_words(hyp, keep_unk)))
}

/// Word error counts with `<unk>` stripped.
pub fn wer(reference: &str, hyp: &str) -> Result<WerBreakdown> {
    wer_with(reference, hyp, false)
}

/// Character error counts (spaces included).
pub fn cer(reference: &str, hyp: &str) -> Result<WerBreakdown> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(LasError::EmptyReference);
    }
    Ok(edit_counts(&r, &hyp.chars().collect::<Vec<_>>()))
}

/// Pooled counts over parallel reference and hypothesis lists.
pub fn corpus_error(
    refs: &[String],
    hyps: &[String],
    metric: impl Fn(&str, &str) -> Result<WerBreakdown>,
) -> Result<WerBreakdown> {
    check_parallel(refs, hyps)?;
    let mut total = WerBreakdown::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.merge(&metric(r, h)?);
    }
    Ok(total)
}

fn check_parallel(refs: &[String], hyps: &[String]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(LasError::Dimension {
            op: "parallel transcripts",
            lhs: vec![refs.len()],
            rhs: vec![hyps.len()],
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordRecall {
    pub word: String,
    pub train_count: usize,
    /// Test utterances whose reference contains the word.
    pub expected: usize,
    /// Of those, how many hypotheses contain it.
    pub hits: usize,
    pub recall: f64,
}

/// Per test word type: recall over utterances containing it, with its
/// training count. Each word counts once per utterance.
pub fn recall_by_frequency(train: &[String], refs: &[String], hyps: &[String]) -> Result<Vec<WordRecall>> {
    check_parallel(refs, hyps)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in train {
        for w in t.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut stats: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (r, h) in refs.iter().zip(hyps) {
        let hyp_words: BTreeSet<&str> = h.split_whitespace().collect();
        for w in r.split_whitespace().collect::<BTreeSet<_>>() {
            let e = stats.entry(w).or_default();
            e.0 += 1;
            e.1 += usize::from(hyp_words.contains(w));
        }
    }
    Ok(stats
        .into_iter()
        .map(|(w, (expected, hits))| WordRecall {
            word: w.to_string(),
            train_count: counts.get(w).copied().unwrap_or(0),
            expected,
            hits,
            recall: hits as f64 / expected as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthRow {
    pub words: usize,
    pub utterances: usize,
    pub mean_substitutions: f64,
    pub mean_insertions: f64,
    pub mean_deletions: f64,
    /// Mean per-utterance WER, percent.
    pub mean_wer: f64,
}

/// Errors bucketed by reference word count, ascending.
pub fn error_by_length(refs: &[String], hyps: &[String]) -> Result<Vec<LengthRow>> {
    check_parallel(refs, hyps)?;
    let mut buckets: BTreeMap<usize, Vec<WerBreakdown>> = BTreeMap::new();
    for (r, h) in refs.iter().zip(hyps) {
        let b = wer(r, h)?;
        buckets.entry(b.ref_words).or_default().push(b);
    }
    Ok(buckets
        .into_iter()
        .map(|(words, rows)| {
            let n = rows.len() as f64;
            let mean = |f: fn(&WerBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / n;
            LengthRow {
                words,
                utterances: rows.len(),
                mean_substitutions: mean(|b| b.substitutions as f64),
                mean_insertions: mean(|b| b.insertions as f64),
                mean_deletions: mean(|b| b.deletions as f64),
                mean_wer: mean(WerBreakdown::percent),
            }
        })
        .collect())
}

/// Attention weights of each output step over the encoder steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    /// One label per output step; the final one is `<eos>`.
    pub labels: Vec<String>,
    /// `[steps, U]`.
    pub weights: Tensor<f32>,
}

impl AlignmentMatrix {
    pub fn to_csv(&self) -> String {
        let (_, u) = self.weights.dims2();
        let mut out = String::from("char");
        for j in 0..u {
            out.push_str(&format!(",u{j}"));
        }
        out.push('\n');
        for (i, label) in self.labels.iter().enumerate() {
            out.push('"');
            out.push_str(&label.replace('"', "\"\""));
            out.push('"');
            for v in self.weights.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.weights.rows()).map(|i| self.weights.argmax_row(i)).collect()
    }
}

/// Fraction of adjacent output steps whose most-attended encoder step does
/// not move backwards. A single row counts as monotone.
pub fn monotonicity(m: &AlignmentMatrix) -> f64 {
    let path = m.argmax_path();
    if path.len() < 2 {
        return 1.0;
    }
    let ok = path.windows(2).filter(|w| w[1] >= w[0]).count();
    ok as f64 / (path.len() - 1) as f64
}

/// Teacher-forced attention over `features` while spelling `tokens`
/// (`<sos> ... <eos>`).
pub fn alignment(store: &ParamStore<f32>, cfg: &ModelConfig, features: &Tensor<f32>, tokens: &[usize]) -> Result<AlignmentMatrix> {
    let seq = TokenSequence::from_ids(tokens.to_vec())?;
    let vocab = Vocabulary::standard();
    let enc = encode(store, cfg, features)?;
    let cache = AttendCache::new(store, &enc)?;
    let mut state = DecoderState::initial(cfg);
    let mut labels = Vec::with_capacity(seq.steps());
    let mut rows = Vec::with_capacity(seq.steps());
    for w in tokens.windows(2) {
        output_index(w[1])?;
        let out = decoder_step(store, &state, w[0], &cache)?;
        labels.push(vocab.symbol(w[1]).ok_or(LasError::Token(w[1]))?.to_string());
        rows.push(out.alpha);
        state = out.state;
    }
    debug_assert_eq!(labels.last().map(String::as_str), vocab.symbol(EOS_ID));
    Ok(AlignmentMatrix {
        labels,
        weights: Tensor::from_rows(&rows)?,
    })
}

/// Beam-decodes every utterance, in parallel when `workers > 1`, keeping input order.
pub fn decode_corpus(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    utts: &[Utterance],
    beta: usize,
    dict: Option<&Dictionary>,
    workers: usize,
) -> Result<Vec<BeamResult>> {
    let one = |u: &Utterance| decode(store, cfg, &u.features, beta, None, dict);
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| LasError::Config(e.to_string()))?;
        pool.install(|| utts.par_iter().map(one).collect())
    } else {
        utts.iter().map(one).collect()
    }
}

/// Text of the best hypothesis of each result (empty when there is none).
pub fn best_texts(results: &[BeamResult]) -> Vec<String> {
    let vocab = Vocabulary::standard();
    results
        .iter()
        .map(|r| r.best().map(|h| h.text(&vocab)).unwrap_or_default())
        .collect()
}
