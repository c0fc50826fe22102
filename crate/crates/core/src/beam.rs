//! Left-to-right beam search over any autoregressive step model, with an
//! optional dictionary constraint and length-normalized LM rescoring.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LasError, Result};
use crate::listener::{encode, EncoderOutput};
use crate::lm::NGramModel;
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::speller::{decoder_step, AttendCache, DecoderState};
use crate::vocab::{output_index, output_token, Vocabulary, EOS_ID, SOS_ID};

/// An autoregressive model over output symbols `0..output_size()`.
pub trait StepModel {
    type State: Clone;

    fn output_size(&self) -> usize;
    /// Output symbol that ends a sequence.
    fn eos(&self) -> usize;
    fn initial(&self) -> Self::State;
    /// Log probabilities of the next symbol after feeding `prev` (`None` at the start).
    fn step(&self, state: &Self::State, prev: Option<usize>) -> Result<(Self::State, Vec<f64>)>;
}

/// Restricts expansions given the symbols emitted so far.
pub trait Constraint {
    fn allows(&self, prefix: &[usize], next: usize) -> bool;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted output symbols; a complete hypothesis ends with the end symbol.
    pub symbols: Vec<usize>,
    /// Cumulative `log P(y | x)`.
    pub log_prob: f64,
    pub complete: bool,
    pub lm_log_prob: Option<f64>,
    /// Rescored value `log P / |y|_c + λ log P_LM`.
    pub combined: Option<f64>,
}

impl Hypothesis {
    /// Emitted symbols excluding the end symbol.
    pub fn chars(&self) -> &[usize] {
        if self.complete {
            &self.symbols[..self.symbols.len() - 1]
        } else {
            &self.symbols
        }
    }

    /// `log P / max(1, |y|_c)`.
    pub fn norm_score(&self) -> f64 {
        self.log_prob / self.chars().len().max(1) as f64
    }

    /// The active ranking score: combined if rescored, raw otherwise.
    pub fn score(&self) -> f64 {
        self.combined.unwrap_or(self.log_prob)
    }

    /// Text of a hypothesis over the standard vocabulary's output symbols.
    pub fn text(&self, vocab: &Vocabulary) -> String {
        self.chars()
            .iter()
            .map(|&s| vocab.symbol(output_token(s)).unwrap_or("").to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Ranked best first; at most β entries.
    pub hyps: Vec<Hypothesis>,
    /// False when nothing reached the end symbol and partials were returned.
    pub complete: bool,
}

impl BeamResult {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hyps.first()
    }
}

/// Descending by score, then ascending lexicographic symbols.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b))
}

fn sort_hyps(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| rank(a.score(), &a.symbols, b.score(), &b.symbols));
}

struct Live<S> {
    symbols: Vec<usize>,
    log_prob: f64,
    state: S,
}

/// Beam search of width `beta` for at most `max_len` symbols (end symbol included).
///
/// Each round expands every live hypothesis by every allowed symbol and keeps
/// the `beta` best expansions; those ending in the end symbol leave the beam
/// for the complete set. Search stops when the beam is empty, at `max_len`, or
/// once `beta` hypotheses are complete and none of the live ones can overtake
/// the worst of them.
pub fn beam_search<M: StepModel>(
    model: &M,
    beta: usize,
    max_len: usize,
    constraint: Option<&dyn Constraint>,
) -> Result<BeamResult> {
    if beta == 0 || max_len == 0 {
        return Err(LasError::Config("beam width and max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let mut live = vec![Live {
        symbols: Vec::new(),
        log_prob: 0.0,
        state: model.initial(),
    }];
    let mut complete: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (i, h) in live.iter().enumerate() {
            let (state, lp) = model.step(&h.state, h.symbols.last().copied())?;
            if lp.len() != model.output_size() {
                return Err(LasError::Dimension {
                    op: "beam_search",
                    lhs: vec![lp.len()],
                    rhs: vec![model.output_size()],
                });
            }
            for (k, &l) in lp.iter().enumerate() {
                if constraint.is_some_and(|c| !c.allows(&h.symbols, k)) {
                    continue;
                }
                let mut symbols = h.symbols.clone();
                symbols.push(k);
                cands.push((h.log_prob + l, symbols, i));
            }
            states.push(state);
        }
        cands.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
        cands.truncate(beta);
        let mut next = Vec::with_capacity(cands.len());
        for (log_prob, symbols, i) in cands {
            if symbols.last() == Some(&eos) {
                complete.push(Hypothesis {
                    symbols,
                    log_prob,
                    complete: true,
                    lm_log_prob: None,
                    combined: None,
                });
            } else {
                next.push(Live {
                    symbols,
                    log_prob,
                    state: states[i].clone(),
                });
            }
        }
        live = next;
        if complete.len() >= beta {
            sort_hyps(&mut complete);
            let floor = complete[beta - 1].log_prob;
            if live.iter().all(|h| h.log_prob < floor) {
                break;
            }
        }
    }
    if complete.is_empty() {
        let mut hyps: Vec<Hypothesis> = live
            .into_iter()
            .map(|h| Hypothesis {
                symbols: h.symbols,
                log_prob: h.log_prob,
                complete: false,
                lm_log_prob: None,
                combined: None,
            })
            .collect();
        sort_hyps(&mut hyps);
        hyps.truncate(beta);
        return Ok(BeamResult { hyps, complete: false });
    }
    sort_hyps(&mut complete);
    complete.truncate(beta);
    Ok(BeamResult {
        hyps: complete,
        complete: true,
    })
}

/// Stepwise argmax decoding; ties go to the lowest symbol.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    let mut state = model.initial();
    let mut symbols = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let (next, lp) = model.step(&state, symbols.last().copied())?;
        let mut best = 0;
        for (k, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = k;
            }
        }
        log_prob += lp[best];
        symbols.push(best);
        state = next;
        if best == model.eos() {
            return Ok(Hypothesis {
                symbols,
                log_prob,
                complete: true,
                lm_log_prob: None,
                combined: None,
            });
        }
    }
    Ok(Hypothesis {
        symbols,
        log_prob,
        complete: false,
        lm_log_prob: None,
        combined: None,
    })
}

/// The trained speller attending over one encoded utterance.
pub struct LasDecoder<'a> {
    store: &'a ParamStore<f32>,
    cfg: &'a ModelConfig,
    cache: AttendCache<f32>,
}

impl<'a> LasDecoder<'a> {
    pub fn new(store: &'a ParamStore<f32>, cfg: &'a ModelConfig, enc: &EncoderOutput<f32>) -> Result<Self> {
        Ok(LasDecoder {
            store,
            cfg,
            cache: AttendCache::new(store, enc)?,
        })
    }

    /// `2U + 10`.
    pub fn default_max_len(&self) -> usize {
        2 * self.cache.encoder_len() + 10
    }
}

impl StepModel for LasDecoder<'_> {
    type State = DecoderState<f32>;

    fn output_size(&self) -> usize {
        crate::vocab::OUTPUT_SIZE
    }

    fn eos(&self) -> usize {
        output_index(EOS_ID).expect("eos has an output index")
    }

    fn initial(&self) -> Self::State {
        DecoderState::initial(self.cfg)
    }

    fn step(&self, state: &Self::State, prev: Option<usize>) -> Result<(Self::State, Vec<f64>)> {
        let token = prev.map(output_token).unwrap_or(SOS_ID);
        let out = decoder_step(self.store, state, token, &self.cache)?;
        Ok((out.state, out.log_probs.iter().map(|&v| v as f64).collect()))
    }
}

/// A step model renormalized over a subset of its outputs, renumbered
/// `0..subset.len()`. The end symbol must be in the subset.
pub struct Restricted<'m, M> {
    pub inner: &'m M,
    pub subset: Vec<usize>,
}

impl<M: StepModel> StepModel for Restricted<'_, M> {
    type State = M::State;

    fn output_size(&self) -> usize {
        self.subset.len()
    }

    fn eos(&self) -> usize {
        let e = self.inner.eos();
        self.subset.iter().position(|&s| s == e).expect("subset contains the end symbol")
    }

    fn initial(&self) -> Self::State {
        self.inner.initial()
    }

    fn step(&self, state: &Self::State, prev: Option<usize>) -> Result<(Self::State, Vec<f64>)> {
        let (next, lp) = self.inner.step(state, prev.map(|p| self.subset[p]))?;
        let picked: Vec<f64> = self.subset.iter().map(|&s| lp[s]).collect();
        let m = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + picked.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        Ok((next, picked.iter().map(|v| v - lse).collect()))
    }
}

/// Prefix trie of allowed words.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    nodes: Vec<TrieNode>,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<char, usize>,
    terminal: bool,
}

impl Dictionary {
    pub fn new<'w>(words: impl IntoIterator<Item = &'w str>) -> Self {
        let mut d = Dictionary {
            nodes: vec![TrieNode::default()],
        };
        for w in words {
            d.insert(w);
        }
        d
    }

    pub fn insert(&mut self, word: &str) {
        if word.is_empty() {
            return;
        }
        let mut n = 0;
        for c in word.chars() {
            n = match self.nodes[n].children.get(&c) {
                Some(&m) => m,
                None => {
                    self.nodes.push(TrieNode::default());
                    let m = self.nodes.len() - 1;
                    self.nodes[n].children.insert(c, m);
                    m
                }
            };
        }
        self.nodes[n].terminal = true;
    }

    fn walk(&self, word: &[char]) -> Option<usize> {
        word.iter().try_fold(0, |n, c| self.nodes[n].children.get(c).copied())
    }

    pub fn contains(&self, word: &str) -> bool {
        let w: Vec<char> = word.chars().collect();
        self.walk(&w).is_some_and(|n| self.nodes[n].terminal)
    }

    pub fn is_prefix(&self, prefix: &str) -> bool {
        let w: Vec<char> = prefix.chars().collect();
        self.walk(&w).is_some()
    }
}

/// Single-character symbol of an output index, if it has one.
fn output_char(vocab: &Vocabulary, index: usize) -> Option<char> {
    let s = vocab.symbol(output_token(index))?;
    let mut it = s.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

/// Dictionary constraint over the standard vocabulary's output symbols.
pub struct DictionaryConstraint<'d> {
    pub dict: &'d Dictionary,
    pub vocab: Vocabulary,
}

impl Constraint for DictionaryConstraint<'_> {
    fn allows(&self, prefix: &[usize], next: usize) -> bool {
        let mut word: Vec<char> = Vec::new();
        for &s in prefix.iter().rev() {
            match output_char(&self.vocab, s) {
                Some(' ') => break,
                Some(c) => word.push(c),
                None => return false,
            }
        }
        word.reverse();
        let at_word_end = |w: &[char]| self.dict.walk(w).is_some_and(|n| self.dict.nodes[n].terminal);
        if output_token(next) == EOS_ID {
            return at_word_end(&word);
        }
        match output_char(&self.vocab, next) {
            Some(' ') => !word.is_empty() && at_word_end(&word),
            Some(c) => {
                word.push(c);
                self.dict.walk(&word).is_some()
            }
            None => false,
        }
    }
}

/// Beam-decodes one feature matrix with the trained model.
pub fn decode(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    features: &Tensor<f32>,
    beta: usize,
    max_len: Option<usize>,
    dict: Option<&Dictionary>,
) -> Result<BeamResult> {
    let enc = encode(store, cfg, features)?;
    let dec = LasDecoder::new(store, cfg, &enc)?;
    let constraint = dict.map(|d| DictionaryConstraint {
        dict: d,
        vocab: Vocabulary::standard(),
    });
    beam_search(
        &dec,
        beta,
        max_len.unwrap_or_else(|| dec.default_max_len()),
        constraint.as_ref().map(|c| c as &dyn Constraint),
    )
}

/// Rescores complete hypotheses with `log P / |y|_c + λ log P_LM` and re-ranks.
/// `lm_score` returning `None` sinks the hypothesis to `-∞`.
pub fn rescore_with(result: &BeamResult, lambda: f64, lm_score: impl Fn(&Hypothesis) -> Option<f64>) -> Result<BeamResult> {
    if !(lambda >= 0.0) {
        return Err(LasError::Config("lambda must be non-negative".into()));
    }
    if result.hyps.iter().any(|h| !h.complete) {
        return Err(LasError::Config("rescoring needs complete hypotheses".into()));
    }
    let mut hyps = result.hyps.clone();
    for h in &mut hyps {
        let lm = lm_score(h).unwrap_or(f64::NEG_INFINITY);
        h.lm_log_prob = Some(lm);
        h.combined = Some(if lambda == 0.0 { h.norm_score() } else { h.norm_score() + lambda * lm });
    }
    sort_hyps(&mut hyps);
    Ok(BeamResult {
        hyps,
        complete: result.complete,
    })
}

/// [`rescore_with`] using an n-gram model over the hypothesis text.
pub fn rescore(result: &BeamResult, lm: &NGramModel, lambda: f64) -> Result<BeamResult> {
    let vocab = Vocabulary::standard();
    rescore_with(result, lambda, |h| Some(lm.log_prob(&h.text(&vocab))))
}

/// Lowest WER (percent) among the hypotheses, with its rank.
pub fn oracle_wer(result: &BeamResult, truth: &str, vocab: &Vocabulary) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, h) in result.hyps.iter().enumerate() {
        let w = crate::eval::wer(truth, &h.text(vocab))?.percent();
        if best.is_none_or(|(b, _)| w < b) {
            best = Some((w, i));
        }
    }
    best.ok_or(LasError::EmptyInput("beam result"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestHyp {
    pub text: String,
    pub log_prob: f64,
    pub norm_score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lm_logprob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub combined: Option<f64>,
}

/// One line of an n-best file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBest {
    pub utt_id: String,
    pub hyps: Vec<NBestHyp>,
}

impl NBest {
    pub fn from_result(utt_id: &str, result: &BeamResult, vocab: &Vocabulary) -> Self {
        NBest {
            utt_id: utt_id.to_string(),
            hyps: result
                .hyps
                .iter()
                .map(|h| NBestHyp {
                    text: h.text(vocab),
                    log_prob: h.log_prob,
                    norm_score: h.norm_score(),
                    lm_logprob: h.lm_log_prob,
                    combined: h.combined,
                })
                .collect(),
        }
    }

    /// Rebuilds a complete beam result; text is re-encoded to output symbols.
    pub fn to_result(&self, vocab: &Vocabulary) -> Result<BeamResult> {
        let hyps = self
            .hyps
            .iter()
            .map(|h| {
                let seq = vocab.encode(&h.text)?;
                let symbols = seq.ids()[1..].iter().map(|&t| output_index(t)).collect::<Result<Vec<_>>>()?;
                Ok(Hypothesis {
                    symbols,
                    log_prob: h.log_prob,
                    complete: true,
                    lm_log_prob: h.lm_logprob,
                    combined: h.combined,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BeamResult { hyps, complete: true })
    }
}

pub fn write_nbest(out: &mut impl Write, items: &[NBest]) -> Result<()> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| LasError::format("n-best", e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| LasError::format("n-best", e.to_string()))?;
    }
    Ok(())
}

pub fn read_nbest(text: &str) -> Result<Vec<NBest>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| LasError::format("n-best", format!("line {}: {e}", i + 1))))
        .collect()
}
