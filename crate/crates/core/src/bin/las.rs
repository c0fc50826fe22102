use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use las::beam::{oracle_wer, read_nbest, rescore, write_nbest, Dictionary, NBest};
use las::eval::{alignment, corpus_error, decode_corpus, error_by_length, recall_by_frequency, wer_with, WerBreakdown};
use las::lm::NGramModel;
use las::synth::{gen_corpus, generate_texts, Manifest, SynthConfig, LEXICON};
use las::training::{train, Checkpoint, Example, StepLog, TrainConfig, TrainHooks};
use las::vocab::{normalize, Vocabulary};
use las::ModelConfig;

#[derive(Parser)]
#[command(name = "las", version, about = "Attention-based character-level speech transcriber")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// RNG seed; overrides any seed in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and decoding.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON config with optional "model", "train" and "synth" sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// One transcript per line; otherwise sentences come from the built-in lexicon.
        #[arg(long)]
        texts: Option<PathBuf>,
        /// Word list used instead of the built-in lexicon.
        #[arg(long, conflicts_with = "texts")]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_words: usize,
        #[arg(long, default_value_t = 3)]
        max_words: usize,
        /// Also write a doubled-noise copy under OUT/noisy.
        #[arg(long)]
        noisy: bool,
    },
    /// Train a model; writes OUT/final.ckpt and periodic checkpoints.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines step log; defaults to stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Beam-decode a manifest to an n-best JSON-lines file.
    Decode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        /// Restrict output to words in this list.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a word n-gram language model.
    FitLm {
        /// Text lines or a manifest (transcripts are used).
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        k: f64,
    },
    /// Rescore an n-best file with a language model.
    Rescore {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, default_value_t = 0.008)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Eval {
        /// Manifest, `utt_id<TAB>text` file or n-best file.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Same formats; for n-best files the top hypothesis is scored.
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        keep_unk: bool,
        /// Print the error breakdown by reference length as CSV.
        #[arg(long)]
        by_length: bool,
        /// Print per-word recall against counts in this training transcript file.
        #[arg(long)]
        recall_train: Option<PathBuf>,
        /// Report oracle WER over all hypotheses of an n-best file.
        #[arg(long)]
        oracle: bool,
    },
    /// WER and oracle WER for several beam widths, as CSV.
    BeamSweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        beams: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention weights of one utterance as a CSV matrix.
    AttentionDump {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        utt: String,
        /// Align to the reference transcript instead of the decoded text.
        #[arg(long)]
        reference: bool,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthConfig,
}

impl Common {
    fn file_config(&self) -> Result<FileConfig> {
        let mut cfg: FileConfig = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => FileConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        Ok(cfg)
    }

    fn workers(&self) -> usize {
        self.workers.unwrap_or(1).max(1)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(str::to_string)
        .collect())
}

/// `utt_id -> text` from a manifest, a two-column TSV or an n-best file.
fn read_transcripts(path: &Path, all_hyps: bool) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        return Ok(read_nbest(&text)?
            .into_iter()
            .map(|nb| {
                let mut hyps: Vec<String> = nb.hyps.into_iter().map(|h| h.text).collect();
                if !all_hyps {
                    hyps.truncate(1);
                }
                (nb.utt_id, hyps)
            })
            .collect());
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (id, t) = match cols.as_slice() {
            [id, t] | [id, _, t] => (*id, *t),
            _ => bail!("{}:{}: expected 2 or 3 tab-separated columns", path.display(), n + 1),
        };
        out.push((id.to_string(), vec![normalize(t)]));
    }
    Ok(out)
}

fn load_examples(manifest: &Manifest) -> Result<(Vec<las::synth::Utterance>, Vec<Example>)> {
    let utts = manifest.load()?;
    let vocab = Vocabulary::standard();
    let ex = utts
        .iter()
        .map(|u| Example::from_utterance(&vocab, u))
        .collect::<las::Result<Vec<_>>>()?;
    Ok((utts, ex))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.cmd {
        Cmd::GenData {
            out,
            count,
            texts,
            lexicon,
            min_words,
            max_words,
            noisy,
        } => {
            let cfg = common.file_config()?;
            let texts = match (texts, lexicon) {
                (Some(p), _) => read_lines(&p)?
                    .iter()
                    .map(|l| normalize(l))
                    .filter(|l| !l.is_empty())
                    .take(count)
                    .collect(),
                (None, Some(p)) => {
                    let words: Vec<String> = read_lines(&p)?.iter().map(|w| normalize(w)).filter(|w| !w.is_empty()).collect();
                    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
                    generate_texts(cfg.synth.seed, count, &refs, min_words, max_words)?
                }
                (None, None) => generate_texts(cfg.synth.seed, count, LEXICON, min_words, max_words)?,
            };
            let manifests = gen_corpus(&cfg.synth, &texts, &out, noisy)?;
            for m in manifests {
                eprintln!("wrote {} utterances under {}", m.len(), m.root.display());
            }
        }
        Cmd::Train {
            manifest,
            out,
            checkpoint,
            log,
        } => {
            let cfg = common.file_config()?;
            let (_, examples) = load_examples(&Manifest::read(&manifest)?)?;
            let ckpt = match checkpoint {
                Some(p) => {
                    let mut c = Checkpoint::load(&p)?;
                    if common.config.is_some() {
                        c.train = cfg.train;
                    }
                    c
                }
                None => Checkpoint::fresh(cfg.model, cfg.train)?,
            };
            let mut sink = output(log.as_deref())?;
            let mut write_err = None;
            let mut on_step = |l: &StepLog| {
                let line = serde_json::to_string(l).expect("log line serializes");
                if let Err(e) = writeln!(sink, "{line}") {
                    write_err.get_or_insert(e);
                }
            };
            let done = train(
                ckpt,
                &examples,
                TrainHooks {
                    checkpoint_dir: Some(out.clone()),
                    on_step: Some(&mut on_step),
                },
            )?;
            sink.flush()?;
            if let Some(e) = write_err {
                return Err(e).context("writing training log");
            }
            eprintln!("trained {} steps; final checkpoint {}", done.step, out.join("final.ckpt").display());
        }
        Cmd::Decode {
            manifest,
            checkpoint,
            beam,
            dict,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = Manifest::read(&manifest)?;
            let (utts, _) = load_examples(&m)?;
            let dict = match dict {
                Some(p) => Some(Dictionary::new(read_lines(&p)?.iter().map(|s| s.trim()))),
                None => None,
            };
            let results = decode_corpus(&ckpt.params, &ckpt.model, &utts, beam, dict.as_ref(), common.workers())?;
            let vocab = Vocabulary::standard();
            let items: Vec<NBest> = utts
                .iter()
                .zip(&results)
                .map(|(u, r)| NBest::from_result(&u.id, r, &vocab))
                .collect();
            let mut w = output(out.as_deref())?;
            write_nbest(&mut w, &items)?;
            w.flush()?;
        }
        Cmd::FitLm { text, out, order, k } => {
            let lines: Vec<String> = read_transcripts(&text, false)
                .map(|rows| rows.into_iter().flat_map(|(_, t)| t).collect())
                .or_else(|_| read_lines(&text).map(|ls| ls.iter().map(|l| normalize(l)).collect()))?;
            let lm = NGramModel::fit(&lines, order, k)?;
            lm.save(&out)?;
            eprintln!("fitted {order}-gram model, vocabulary {}", lm.vocab_size());
        }
        Cmd::Rescore { nbest, lm, lambda, out } => {
            let lm = NGramModel::load(&lm)?;
            let vocab = Vocabulary::standard();
            let text = fs::read_to_string(&nbest).with_context(|| format!("reading {}", nbest.display()))?;
            let items = read_nbest(&text)?
                .iter()
                .map(|nb| Ok(NBest::from_result(&nb.utt_id, &rescore(&nb.to_result(&vocab)?, &lm, lambda)?, &vocab)))
                .collect::<Result<Vec<_>>>()?;
            let mut w = output(out.as_deref())?;
            write_nbest(&mut w, &items)?;
            w.flush()?;
        }
        Cmd::Eval {
            reference,
            hyp,
            keep_unk,
            by_length,
            recall_train,
            oracle,
        } => {
            let refs = read_transcripts(&reference, false)?;
            let hyps: HashMap<String, Vec<String>> = read_transcripts(&hyp, oracle)?.into_iter().collect();
            let mut r_texts = Vec::new();
            let mut h_texts = Vec::new();
            let mut total = WerBreakdown::default();
            let mut oracle_total = WerBreakdown::default();
            for (id, r) in &refs {
                let h = hyps.get(id).ok_or_else(|| anyhow!("no hypothesis for {id}"))?;
                let top = h.first().cloned().unwrap_or_default();
                total.merge(&wer_with(&r[0], &top, keep_unk)?);
                let best = h
                    .iter()
                    .map(|x| wer_with(&r[0], x, keep_unk))
                    .collect::<las::Result<Vec<_>>>()?
                    .into_iter()
                    .min_by_key(|b| b.errors())
                    .unwrap_or_else(|| wer_with(&r[0], "", keep_unk).expect("reference checked above"));
                oracle_total.merge(&best);
                r_texts.push(r[0].clone());
                h_texts.push(top);
            }
            println!(
                "WER {:.2} (S={} I={} D={} N={} utterances={})",
                total.percent(),
                total.substitutions,
                total.insertions,
                total.deletions,
                total.ref_words,
                refs.len()
            );
            if oracle {
                println!("oracle WER {:.2}", oracle_total.percent());
            }
            if by_length {
                println!("words,utterances,substitutions,insertions,deletions,wer");
                for r in error_by_length(&r_texts, &h_texts)? {
                    println!(
                        "{},{},{:.4},{:.4},{:.4},{:.2}",
                        r.words, r.utterances, r.mean_substitutions, r.mean_insertions, r.mean_deletions, r.mean_wer
                    );
                }
            }
            if let Some(p) = recall_train {
                let train: Vec<String> = read_transcripts(&p, false)?.into_iter().flat_map(|(_, t)| t).collect();
                println!("word,train_count,expected,hits,recall");
                for r in recall_by_frequency(&train, &r_texts, &h_texts)? {
                    println!("{},{},{},{},{:.4}", r.word, r.train_count, r.expected, r.hits, r.recall);
                }
            }
        }
        Cmd::BeamSweep {
            manifest,
            checkpoint,
            beams,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (utts, _) = load_examples(&Manifest::read(&manifest)?)?;
            let vocab = Vocabulary::standard();
            let refs: Vec<String> = utts.iter().map(|u| u.transcript.clone()).collect();
            let mut w = output(out.as_deref())?;
            writeln!(w, "beam,wer,oracle_wer")?;
            for beta in beams {
                let results = decode_corpus(&ckpt.params, &ckpt.model, &utts, beta, None, common.workers())?;
                let hyps = las::eval::best_texts(&results);
                let top = corpus_error(&refs, &hyps, las::eval::wer)?;
                let mut errors = 0.0;
                for (r, res) in refs.iter().zip(&results) {
                    let (best, _) = oracle_wer(res, r, &vocab)?;
                    errors += best / 100.0 * las::eval::score_words(r, false).len() as f64;
                }
                writeln!(w, "{beta},{:.2},{:.2}", top.percent(), 100.0 * errors / top.ref_words as f64)?;
            }
            w.flush()?;
        }
        Cmd::AttentionDump {
            manifest,
            checkpoint,
            utt,
            reference,
            beam,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = Manifest::read(&manifest)?;
            let entry = m
                .entries
                .iter()
                .find(|e| e.utt_id == utt)
                .ok_or_else(|| anyhow!("utterance {utt} not in {}", manifest.display()))?;
            let features = las::synth::read_features(&m.feature_path(entry))?;
            let vocab = Vocabulary::standard();
            let text = if reference {
                entry.transcript.clone()
            } else {
                let r = las::beam::decode(&ckpt.params, &ckpt.model, &features, beam, None, None)?;
                r.best().map(|h| h.text(&vocab)).unwrap_or_default()
            };
            let tokens = vocab.encode(&text)?;
            let a = alignment(&ckpt.params, &ckpt.model, &features, tokens.ids())?;
            let mut w = output(out.as_deref())?;
            w.write_all(a.to_csv().as_bytes())?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
