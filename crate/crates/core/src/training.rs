//! Joint training of listener and speller: minibatch SGD on the negative
//! log-likelihood of the transcripts, with a constant-rate sampling trick,
//! length buckets, geometric learning-rate decay and binary checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LasError, Result};
use crate::listener::listen;
use crate::model::ModelConfig;
use crate::numerics::{clip_global_norm, ParamSource, ParamStore, Scalar, Tape, Tensor, Var};
use crate::speller::{sequence_log_prob_vars, InputPolicy, Speller, TeacherForcing};
use crate::synth::{fnv1a, Utterance};
use crate::vocab::{output_token, Vocabulary, EOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    /// Examples processed between decays; `None` means a twentieth of the dataset.
    pub decay_interval: Option<u64>,
    pub sampling_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<u64>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub workers: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.2,
            decay: 0.98,
            decay_interval: None,
            sampling_rate: 0.1,
            batch_size: 16,
            epochs: 10,
            max_steps: None,
            clip_norm: 5.0,
            seed: 0,
            workers: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LasError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sampling_rate) {
            return Err(LasError::Config("sampling_rate must lie in [0, 1]".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(LasError::Config("decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(LasError::Config("batch_size and workers must be positive".into()));
        }
        if self.decay_interval == Some(0) {
            return Err(LasError::Config("decay_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn interval_for(&self, dataset_size: usize) -> u64 {
        self.decay_interval.unwrap_or((dataset_size as u64 / 20).max(1))
    }

    /// `lr0 · decay^⌊examples_seen / interval⌋`.
    pub fn learning_rate_at(&self, examples_seen: u64, interval: u64) -> f64 {
        self.learning_rate * self.decay.powi((examples_seen / interval.max(1)) as i32)
    }
}

/// One training pair: a `[T, D]` feature matrix and its framed token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor<f32>,
    pub tokens: Vec<usize>,
}

impl Example {
    pub fn from_utterance(vocab: &Vocabulary, u: &Utterance) -> Result<Self> {
        Ok(Example {
            id: u.id.clone(),
            features: u.features.clone(),
            tokens: vocab.encode(&u.transcript)?.ids().to_vec(),
        })
    }
}

/// Examples padded to common lengths: features with zero frames, targets
/// with `<eos>`. The true lengths mask the padding out of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar> {
    pub ids: Vec<String>,
    pub features: Vec<Tensor<T>>,
    pub frame_lens: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(LasError::EmptyInput("batch"));
        }
        let max_t = examples.iter().map(|e| e.features.rows()).max().unwrap_or(0);
        let max_s = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut b = Batch {
            ids: Vec::new(),
            features: Vec::new(),
            frame_lens: Vec::new(),
            targets: Vec::new(),
            target_lens: Vec::new(),
        };
        for e in examples {
            let (t, d) = e.features.dims2();
            let mut data: Vec<T> = e.features.data().iter().map(|v| T::cast(*v as f64)).collect();
            data.resize(max_t * d, T::zero());
            let mut tokens = e.tokens.clone();
            tokens.resize(max_s, EOS_ID);
            b.ids.push(e.id.clone());
            b.features.push(Tensor::matrix(max_t, d, data)?);
            b.frame_lens.push(t);
            b.targets.push(tokens);
            b.target_lens.push(e.tokens.len());
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded features and targets of member `i`.
    pub fn item(&self, i: usize) -> Result<(Tensor<T>, &[usize])> {
        let x = &self.features[i];
        let t = self.frame_lens[i];
        let d = x.cols();
        Ok((Tensor::matrix(t, d, x.data()[..t * d].to_vec())?, &self.targets[i][..self.target_lens[i]]))
    }
}

/// Constant-rate sampling trick: each input after `<sos>` is, with
/// probability `rate`, drawn from the previous step's distribution instead of
/// taken from the ground truth.
pub struct SamplingPolicy<R> {
    rate: f64,
    rng: R,
    pub positions: usize,
    pub sampled: usize,
}

impl<R: Rng> SamplingPolicy<R> {
    pub fn new(rate: f64, rng: R) -> Self {
        SamplingPolicy {
            rate,
            rng,
            positions: 0,
            sampled: 0,
        }
    }
}

impl<T: Scalar, R: Rng> InputPolicy<T> for SamplingPolicy<R> {
    fn choose(&mut self, _step: usize, ground_truth: usize, prev: &Tensor<T>) -> usize {
        self.positions += 1;
        if self.rate <= 0.0 || self.rng.random::<f64>() >= self.rate {
            return ground_truth;
        }
        self.sampled += 1;
        let weights = prev.data().iter().map(|lp| lp.as_f64().exp());
        match WeightedIndex::new(weights) {
            Ok(dist) => output_token(dist.sample(&mut self.rng)),
            Err(_) => ground_truth,
        }
    }
}

/// Sampling stream for one utterance in one epoch, independent of batching.
pub fn sampling_rng(seed: u64, epoch: u64, utt_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(utt_id.as_bytes()) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}

/// `−log P(y* | x)` for one utterance, with decoder inputs chosen by `policy`.
pub fn example_loss_vars<'t, T: Scalar>(
    params: &impl ParamSource<'t, T>,
    cfg: &ModelConfig,
    x: Var<'t, T>,
    tokens: &[usize],
    policy: &mut impl InputPolicy<T>,
) -> Result<Var<'t, T>> {
    let h = listen(params, cfg, x)?;
    let speller = Speller::bind(params)?;
    sequence_log_prob_vars(&speller, cfg, h, tokens, policy)?.log_prob.scale(-1.0)
}

/// Teacher-forced mean loss over a batch.
pub fn batch_loss_vars<'t, T: Scalar>(
    params: &impl ParamSource<'t, T>,
    cfg: &ModelConfig,
    tape: &'t Tape<T>,
    batch: &Batch<T>,
) -> Result<Var<'t, T>> {
    if batch.is_empty() {
        return Err(LasError::EmptyInput("batch"));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (x, tokens) = batch.item(i)?;
        let x = tape.constant(x)?;
        losses.push(example_loss_vars(params, cfg, x, tokens, &mut TeacherForcing)?);
    }
    tape.add_n(&losses)?.scale(1.0 / batch.len() as f64)
}

/// Teacher-forced mean batch loss.
pub fn loss<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, batch: &Batch<T>) -> Result<f64> {
    let tape = Tape::new();
    let params = store.bind(&tape, false)?;
    Ok(batch_loss_vars(&params, cfg, &tape, batch)?.value().data()[0].as_f64())
}

/// The decoder inputs actually fed when training on `(x, tokens)` at `rate`.
pub fn sampled_step_inputs<T: Scalar, R: Rng>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    tokens: &[usize],
    rate: f64,
    rng: R,
) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let params = store.bind(&tape, false)?;
    let x = tape.constant(x.clone())?;
    let h = listen(&params, cfg, x)?;
    let speller = Speller::bind(&params)?;
    let mut policy = SamplingPolicy::new(rate, rng);
    Ok(sequence_log_prob_vars(&speller, cfg, h, tokens, &mut policy)?.inputs)
}

/// Loss and parameter gradients of one utterance.
pub struct ExampleGrad<T: Scalar> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub positions: usize,
    pub sampled: usize,
}

pub fn example_grad<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    tokens: &[usize],
    policy: &mut impl InputPolicy<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let params = store.bind(&tape, true)?;
    let x = tape.constant(x.clone())?;
    let l = example_loss_vars(&params, cfg, x, tokens, policy)?;
    let grads = tape.backward(l)?;
    Ok((l.value().data()[0].as_f64(), params.collect_grads(&grads)))
}

/// Mean loss and gradient over a batch with the sampling trick applied.
/// Per-utterance gradients are summed in batch order regardless of `workers`.
pub fn batch_grad(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    batch: &Batch<f32>,
    rate: f64,
    seed: u64,
    epoch: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<ExampleGrad<f32>> {
    if batch.is_empty() {
        return Err(LasError::EmptyInput("batch"));
    }
    let one = |i: usize| -> Result<ExampleGrad<f32>> {
        let (x, tokens) = batch.item(i)?;
        let mut policy = SamplingPolicy::new(rate, sampling_rng(seed, epoch, &batch.ids[i]));
        let (loss, grads) = example_grad(store, cfg, &x, tokens, &mut policy)?;
        Ok(ExampleGrad {
            loss,
            grads,
            positions: policy.positions,
            sampled: policy.sampled,
        })
    };
    let parts: Vec<Result<ExampleGrad<f32>>> = match pool {
        Some(pool) => pool.install(|| (0..batch.len()).into_par_iter().map(one).collect()),
        None => (0..batch.len()).map(one).collect(),
    };
    let mut total: Option<ExampleGrad<f32>> = None;
    for part in parts {
        let part = part?;
        match &mut total {
            None => total = Some(part),
            Some(t) => {
                t.loss += part.loss;
                t.positions += part.positions;
                t.sampled += part.sampled;
                for (a, g) in t.grads.iter_mut().zip(&part.grads) {
                    a.add_assign(g);
                }
            }
        }
    }
    let mut total = total.expect("non-empty batch");
    let n = batch.len() as f64;
    total.loss /= n;
    for g in &mut total.grads {
        g.scale_assign(1.0 / n as f32);
    }
    Ok(total)
}

/// Groups examples of similar frame length into batches.
pub fn make_buckets(examples: &[Example], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| {
        (examples[a].features.rows(), &examples[a].id).cmp(&(examples[b].features.rows(), &examples[b].id))
    });
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    pub params: ParamStore<f32>,
    pub step: u64,
    pub examples_seen: u64,
    pub epoch: u64,
    pub rng: RngState,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LASCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    examples_seen: u64,
    epoch: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
}

impl Checkpoint {
    pub fn fresh(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        Ok(Checkpoint {
            params: model.init_params(train.seed),
            vocab: Vocabulary::standard().symbols().to_vec(),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(train.seed)),
            model,
            train,
            step: 0,
            examples_seen: 0,
            epoch: 0,
        })
    }

    /// Layout: magic, `u32` version, `u32`-prefixed JSON metadata, `u32`
    /// symbol count and `u32`-prefixed UTF-8 symbols, `u32` tensor count and
    /// per tensor `u32` name length, name, `u32` rank, `u32` dims and
    /// little-endian `f32` data. All integers are little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            examples_seen: self.examples_seen,
            epoch: self.epoch,
            rng_seed: self.rng.seed.to_vec(),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| LasError::format("checkpoint", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_bytes(&mut out, &meta);
        put_u32(&mut out, self.vocab.len() as u32);
        for s in &self.vocab {
            put_bytes(&mut out, s.as_bytes());
        }
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(LasError::format("checkpoint", "missing LASCKPT1 header"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(LasError::format("checkpoint", format!("unsupported version {version}")));
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(r.sized()?).map_err(|e| LasError::format("checkpoint", e.to_string()))?;
        let n_sym = r.u32()? as usize;
        let mut vocab = Vec::with_capacity(n_sym);
        for _ in 0..n_sym {
            vocab.push(r.string()?);
        }
        Vocabulary::from_symbols(vocab.clone())?;
        let n_params = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(LasError::format("checkpoint", "trailing bytes"));
        }
        meta.model.check_params(&params)?;
        let seed: [u8; 32] = meta
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| LasError::format("checkpoint", "bad rng seed"))?;
        let word_pos = meta
            .rng_word_pos
            .parse()
            .map_err(|_| LasError::format("checkpoint", "bad rng position"))?;
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            vocab,
            params,
            step: meta.step,
            examples_seen: meta.examples_seen,
            epoch: meta.epoch,
            rng: RngState {
                seed,
                stream: meta.rng_stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| LasError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| LasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path).map_err(|e| LasError::io(path, e))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LasError::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn sized(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.sized()?.to_vec()).map_err(|e| LasError::format("checkpoint", e.to_string()))
    }
}

/// Where and how a training run reports progress.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub on_step: Option<&'a mut dyn FnMut(&StepLog)>,
}

/// Continues training `ckpt` on `examples` until its epoch or step budget is
/// spent. Batch order within an epoch is shuffled by the checkpointed RNG.
pub fn train(mut ckpt: Checkpoint, examples: &[Example], mut hooks: TrainHooks<'_>) -> Result<Checkpoint> {
    if examples.is_empty() {
        return Err(LasError::EmptyInput("training set"));
    }
    ckpt.train.validate()?;
    let cfg = ckpt.train.clone();
    let interval = cfg.interval_for(examples.len());
    let buckets = make_buckets(examples, cfg.batch_size);
    let batches = buckets
        .iter()
        .map(|b| Batch::new(&b.iter().map(|&i| &examples[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<Batch<f32>>>>()?;
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| LasError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let start = Instant::now();
    let mut rng = ckpt.rng.restore();
    let budget_left = |c: &Checkpoint| cfg.max_steps.is_none_or(|m| c.step < m);
    while (ckpt.epoch as usize) < cfg.epochs && budget_left(&ckpt) {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        for &bi in &order {
            if !budget_left(&ckpt) {
                break;
            }
            let batch = &batches[bi];
            let diverged = |step| LasError::Diverged {
                step,
                utterances: batch.ids.join(","),
            };
            let mut g = match batch_grad(
                &ckpt.params,
                &ckpt.model,
                batch,
                cfg.sampling_rate,
                cfg.seed,
                ckpt.epoch,
                pool.as_ref(),
            ) {
                Err(LasError::NonFinite { .. }) => return Err(diverged(ckpt.step)),
                other => other?,
            };
            if !g.loss.is_finite() {
                return Err(diverged(ckpt.step));
            }
            clip_global_norm(&mut g.grads, cfg.clip_norm);
            let lr = cfg.learning_rate_at(ckpt.examples_seen, interval);
            ckpt.params.sgd_step(&g.grads, lr)?;
            if !ckpt.params.is_finite() {
                return Err(diverged(ckpt.step));
            }
            ckpt.step += 1;
            ckpt.examples_seen += batch.len() as u64;
            let log = StepLog {
                step: ckpt.step,
                loss: g.loss,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(f) = hooks.on_step.as_mut() {
                f(&log);
            }
            if let Some(dir) = &hooks.checkpoint_dir {
                if cfg.checkpoint_every > 0 && ckpt.step % cfg.checkpoint_every == 0 {
                    ckpt.rng = RngState::capture(&rng);
                    ckpt.save(&dir.join(format!("step{:08}.ckpt", ckpt.step)))?;
                }
            }
        }
        if budget_left(&ckpt) {
            ckpt.epoch += 1;
        }
    }
    ckpt.rng = RngState::capture(&rng);
    if let Some(dir) = &hooks.checkpoint_dir {
        ckpt.save(&dir.join("final.ckpt"))?;
    }
    Ok(ckpt)
}
