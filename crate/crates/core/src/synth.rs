//! Synthetic speech-like corpus: every character renders as a run of noisy
//! copies of a per-symbol template frame.
//!
//! Feature files are `LASFEAT1`, `u32 T`, `u32 D`, then `T·D` little-endian
//! `f32`. Manifests are UTF-8 TSV rows of `utt_id`, path relative to the
//! manifest's directory, and the normalized transcript.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LasError, Result};
use crate::numerics::Tensor;
use crate::vocab::{normalize, Vocabulary, EOS_ID, SOS_ID, VOCAB_SIZE};

pub const FEATURE_MAGIC: &[u8; 8] = b"LASFEAT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Amplitude of the symbol's first template coordinate.
    pub primary_amplitude: f32,
    /// Amplitude of the symbol's second template coordinate.
    pub secondary_amplitude: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            frames_min: 4,
            frames_max: 10,
            feature_dim: 40,
            noise: 0.1,
            primary_amplitude: 1.0,
            secondary_amplitude: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_min < 1 || self.frames_max < self.frames_min {
            return Err(LasError::Config("need 1 <= frames_min <= frames_max".into()));
        }
        if self.feature_dim < 8 {
            return Err(LasError::Config("feature_dim must be at least 8".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(LasError::Config("noise must be non-negative".into()));
        }
        if self.primary_amplitude == self.secondary_amplitude {
            return Err(LasError::Config("template amplitudes must differ".into()));
        }
        Ok(())
    }

    /// Two-hot template for vocabulary symbol `id`: the primary amplitude at
    /// `id mod D` and the secondary one a symbol-dependent offset further on.
    pub fn template(&self, id: usize) -> Vec<f32> {
        let d = self.feature_dim;
        let p = id % d;
        let q = (p + 1 + id / d) % d;
        let mut t = vec![0.0; d];
        t[p] = self.primary_amplitude;
        t[q] += self.secondary_amplitude;
        t
    }

    /// Smallest Euclidean distance between templates of distinct symbols.
    pub fn min_template_distance(&self) -> f64 {
        let ids: Vec<usize> = (0..VOCAB_SIZE).filter(|&i| i != SOS_ID && i != EOS_ID).collect();
        let mut best = f64::INFINITY;
        for (k, &a) in ids.iter().enumerate() {
            let ta = self.template(a);
            for &b in &ids[k + 1..] {
                let tb = self.template(b);
                let d: f64 = ta.iter().zip(&tb).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-utterance generator stream, independent of generation order.
pub fn utterance_rng(seed: u64, utt_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(utt_id.as_bytes()))
}

/// Renders `text` as a `[T, D]` feature matrix.
pub fn synth_utterance<R: Rng + ?Sized>(cfg: &SynthConfig, text: &str, rng: &mut R) -> Result<Tensor<f32>> {
    synth_scaled(cfg, text, 1.0, rng)
}

fn synth_scaled<R: Rng + ?Sized>(cfg: &SynthConfig, text: &str, noise_scale: f64, rng: &mut R) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let seq = vocab.encode(text)?;
    if seq.chars().is_empty() {
        return Err(LasError::EmptyInput("synth_utterance text"));
    }
    let sigma = cfg.noise * noise_scale;
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| LasError::Config(e.to_string()))?;
    let d = cfg.feature_dim;
    let mut data = Vec::new();
    let mut frames = 0;
    for &id in seq.chars() {
        let template = cfg.template(id);
        let n = rng.random_range(cfg.frames_min..=cfg.frames_max);
        for _ in 0..n {
            for &v in &template {
                // Drawn even at zero sigma so durations agree across noise levels.
                data.push(v + noise.sample(rng) as f32);
            }
        }
        frames += n;
    }
    Tensor::matrix(frames, d, data)
}

pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let (t, d) = features.dims2();
    let mut buf = Vec::with_capacity(16 + 4 * features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LasError::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| LasError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| LasError::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        LasError::Format { what, detail } => LasError::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(LasError::format("feature file", "missing LASFEAT1 header"));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * t * d {
        return Err(LasError::format(
            "feature file",
            format!("expected {} payload bytes, found {}", 4 * t * d, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(t, d, data)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Relative to the corpus root.
    pub path: PathBuf,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest {
            root: root.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(LasError::format("manifest", format!("duplicate utt_id {:?}", e.utt_id)));
            }
            if e.utt_id.contains(['\t', '\n']) {
                return Err(LasError::format("manifest", format!("bad utt_id {:?}", e.utt_id)));
            }
            if normalize(&e.transcript) != e.transcript {
                return Err(LasError::format(
                    "manifest",
                    format!("transcript of {} is not normalized", e.utt_id),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Reads a manifest; relative feature paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LasError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let (Some(id), Some(p), Some(tr)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(LasError::format(
                    "manifest",
                    format!("{}:{}: expected 3 tab-separated columns", path.display(), n + 1),
                ));
            };
            entries.push(ManifestEntry {
                utt_id: id.to_string(),
                path: PathBuf::from(p),
                transcript: tr.to_string(),
            });
        }
        Manifest::new(root, entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.utt_id, e.path.display(), e.transcript));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| LasError::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| LasError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| LasError::io(path, e))
    }

    /// Loads every feature matrix.
    pub fn load(&self) -> Result<Vec<Utterance>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(Utterance {
                    id: e.utt_id.clone(),
                    features: read_features(&self.feature_path(e))?,
                    transcript: e.transcript.clone(),
                })
            })
            .collect()
    }
}

/// One labelled utterance in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor<f32>,
    pub transcript: String,
}

/// Generates utterances in memory, ids `{prefix}{index:05}`.
pub fn synth_corpus(cfg: &SynthConfig, texts: &[String], prefix: &str, noise_scale: f64) -> Result<Vec<Utterance>> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let id = format!("{prefix}{i:05}");
            let mut rng = utterance_rng(cfg.seed, &id);
            Ok(Utterance {
                features: synth_scaled(cfg, t, noise_scale, &mut rng)?,
                id,
                transcript: t.clone(),
            })
        })
        .collect()
}

/// Writes a corpus under `root` (`manifest.tsv` plus `feats/*.feat`).
///
/// With `noisy`, a second corpus with doubled noise is written under
/// `root/noisy`, sharing ids, transcripts and durations.
pub fn gen_corpus(cfg: &SynthConfig, texts: &[String], root: &Path, noisy: bool) -> Result<Vec<Manifest>> {
    let mut out = vec![write_corpus(cfg, texts, root, 1.0)?];
    if noisy {
        out.push(write_corpus(cfg, texts, &root.join("noisy"), 2.0)?);
    }
    Ok(out)
}

fn write_corpus(cfg: &SynthConfig, texts: &[String], root: &Path, noise_scale: f64) -> Result<Manifest> {
    for t in texts {
        if normalize(t) != *t {
            return Err(LasError::format("corpus text", format!("{t:?} is not normalized")));
        }
    }
    let utts = synth_corpus(cfg, texts, "utt", noise_scale)?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let rel = PathBuf::from("feats").join(format!("{}.feat", u.id));
        write_features(&root.join(&rel), &u.features)?;
        entries.push(ManifestEntry {
            utt_id: u.id.clone(),
            path: rel,
            transcript: u.transcript.clone(),
        });
    }
    let m = Manifest::new(root, entries)?;
    m.write(&root.join("manifest.tsv"))?;
    Ok(m)
}

/// Default lexicon for synthetic transcripts; every word has at most 8 characters.
pub const LEXICON: &[&str] = &[
    "call", "triple", "aaa", "roadside", "help", "seven", "eight", "nine", "four", "minus", "how", "much",
    "would", "wood", "chuck", "what", "is", "the", "tv", "guide", "saint", "mary's", "animal", "clinic", "on",
    "play", "music", "weather", "today", "near", "me", "open", "map", "two", "three", "five", "one", "zero",
    "news", "xbmc",
];

/// Chance that the next word is one of the current word's preferred successors.
const FOLLOW_PROB: f64 = 0.7;

/// Word sequences from a first-order Markov chain over `lexicon`: each word
/// has a few preferred successors, so the text carries n-gram structure.
pub fn generate_texts(seed: u64, count: usize, lexicon: &[&str], min_words: usize, max_words: usize) -> Result<Vec<String>> {
    if lexicon.is_empty() || min_words == 0 || max_words < min_words {
        return Err(LasError::Config("need a lexicon and 1 <= min_words <= max_words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let successors: Vec<Vec<usize>> = (0..lexicon.len())
        .map(|_| (0..3).map(|_| rng.random_range(0..lexicon.len())).collect())
        .collect();
    let mut texts = Vec::with_capacity(count);
    for _ in 0..count {
        let n = rng.random_range(min_words..=max_words);
        let mut w = rng.random_range(0..lexicon.len());
        let mut words = vec![lexicon[w]];
        for _ in 1..n {
            w = if rng.random_bool(FOLLOW_PROB) {
                *successors[w].choose(&mut rng).unwrap()
            } else {
                rng.random_range(0..lexicon.len())
            };
            words.push(lexicon[w]);
        }
        texts.push(words.join(" "));
    }
    Ok(texts)
}
