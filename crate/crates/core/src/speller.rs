//! The speller: content-based attention over the listener output, a two-layer
//! LSTM decoder state and an MLP character distribution.
//!
//! Per output step `i` the order of computation is
//! `s_i = RNN(s_{i-1}, y_{i-1}, c_{i-1})`, then `c_i = AttentionContext(s_i, h)`,
//! then `P(y_i) = CharacterDistribution(s_i, c_i)`.

use std::sync::Arc;

use crate::error::{LasError, Result};
use crate::listener::{lstm_step, EncoderOutput, LstmCell};
use crate::model::ModelConfig;
use crate::numerics::{LazyParams, ParamSource, ParamStore, Scalar, Tape, Tensor, Var};
use crate::vocab::{output_index, TokenSequence, VOCAB_SIZE};

/// One-hidden-layer tanh MLP: `tanh(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Copy)]
pub struct Mlp<'t, T: Scalar> {
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

impl<'t, T: Scalar> Mlp<'t, T> {
    pub fn bind(params: &impl ParamSource<'t, T>, prefix: &str) -> Result<Self> {
        Ok(Mlp {
            w1: params.var(&format!("{prefix}.w1"))?,
            b1: params.var(&format!("{prefix}.b1"))?,
            w2: params.var(&format!("{prefix}.w2"))?,
            b2: params.var(&format!("{prefix}.b2"))?,
        })
    }

    /// Applies the MLP to every row of `x`.
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.w1)?
            .add_row(self.b1)?
            .tanh()?
            .matmul(self.w2)?
            .add_row(self.b2)
    }
}

/// Speller weights registered on a tape.
pub struct Speller<'t, T: Scalar> {
    pub embed: Var<'t, T>,
    pub lstm: [LstmCell<'t, T>; 2],
    pub phi: Mlp<'t, T>,
    pub psi: Mlp<'t, T>,
    pub out: Mlp<'t, T>,
}

impl<'t, T: Scalar> Speller<'t, T> {
    pub fn bind(params: &impl ParamSource<'t, T>) -> Result<Self> {
        Ok(Speller {
            embed: params.var("speller.embed")?,
            lstm: [
                LstmCell::bind(params, "speller.lstm0")?,
                LstmCell::bind(params, "speller.lstm1")?,
            ],
            phi: Mlp::bind(params, "speller.phi")?,
            psi: Mlp::bind(params, "speller.psi")?,
            out: Mlp::bind(params, "speller.out")?,
        })
    }
}

/// Encoder output prepared for attention: `h` and the transposed keys `ψ(h)ᵀ`.
#[derive(Clone, Copy)]
pub struct Attendable<'t, T: Scalar> {
    pub h: Var<'t, T>,
    pub keys_t: Var<'t, T>,
}

impl<'t, T: Scalar> Attendable<'t, T> {
    pub fn new(speller: &Speller<'t, T>, h: Var<'t, T>) -> Result<Self> {
        if h.value().rows() == 0 {
            return Err(LasError::EmptyInput("attention over empty encoder output"));
        }
        let keys_t = speller.psi.forward(h)?.transpose()?;
        Ok(Attendable { h, keys_t })
    }
}

/// Decoder state on a tape: both LSTM layers and the previous context.
#[derive(Clone, Copy)]
pub struct StateVars<'t, T: Scalar> {
    pub h: [Var<'t, T>; 2],
    pub c: [Var<'t, T>; 2],
    pub context: Var<'t, T>,
}

impl<'t, T: Scalar> StateVars<'t, T> {
    /// `s_0 = 0`, `c_0 = 0`.
    pub fn zeros(tape: &'t Tape<T>, cfg: &ModelConfig) -> Result<Self> {
        let z = || tape.constant(Tensor::zeros(&[1, cfg.speller_hidden]));
        Ok(StateVars {
            h: [z()?, z()?],
            c: [z()?, z()?],
            context: tape.constant(Tensor::zeros(&[1, cfg.encoder_width()]))?,
        })
    }
}

pub struct StepVars<'t, T: Scalar> {
    pub state: StateVars<'t, T>,
    /// `[1, OUTPUT_SIZE]` log probabilities.
    pub log_probs: Var<'t, T>,
    /// `[1, U]` attention weights.
    pub alpha: Var<'t, T>,
}

/// `c_i = Σ_u α_{i,u} h_u` with `α_i = softmax_u(⟨φ(s_i), ψ(h_u)⟩)`.
pub fn attention_context<'t, T: Scalar>(
    speller: &Speller<'t, T>,
    s: Var<'t, T>,
    enc: &Attendable<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let query = speller.phi.forward(s)?;
    let alpha = query.matmul(enc.keys_t)?.softmax()?;
    let context = alpha.matmul(enc.h)?;
    Ok((context, alpha))
}

/// One decoder step on a tape.
pub fn decoder_step_vars<'t, T: Scalar>(
    speller: &Speller<'t, T>,
    state: &StateVars<'t, T>,
    y_prev: usize,
    enc: &Attendable<'t, T>,
) -> Result<StepVars<'t, T>> {
    if y_prev >= VOCAB_SIZE {
        return Err(LasError::Token(y_prev));
    }
    let tape = enc.h.tape();
    let emb = speller.embed.row(y_prev)?;
    let input = tape.concat_cols(&[emb, state.context])?;
    let (h0, c0) = lstm_step(&speller.lstm[0], input, (state.h[0], state.c[0]))?;
    let (h1, c1) = lstm_step(&speller.lstm[1], h0, (state.h[1], state.c[1]))?;
    let (context, alpha) = attention_context(speller, h1, enc)?;
    let features = tape.concat_cols(&[h1, context])?;
    let log_probs = speller.out.forward(features)?.log_softmax()?;
    Ok(StepVars {
        state: StateVars {
            h: [h0, h1],
            c: [c0, c1],
            context,
        },
        log_probs,
        alpha,
    })
}

/// Chooses the decoder input for step `i` (1-based over targets) given the
/// ground-truth previous token and the previous step's log probabilities.
pub trait InputPolicy<T: Scalar> {
    fn choose(&mut self, step: usize, ground_truth: usize, prev_log_probs: &Tensor<T>) -> usize;
}

/// Always feed the ground truth.
pub struct TeacherForcing;

impl<T: Scalar> InputPolicy<T> for TeacherForcing {
    fn choose(&mut self, _step: usize, ground_truth: usize, _prev: &Tensor<T>) -> usize {
        ground_truth
    }
}

/// Teacher-forced pass over a framed target sequence.
pub struct SequenceVars<'t, T: Scalar> {
    /// `Σ_i log P(y_i | x, ỹ_{<i})` including the `<eos>` term.
    pub log_prob: Var<'t, T>,
    /// The inputs actually fed at each step (starting with `<sos>`).
    pub inputs: Vec<usize>,
    pub step_log_probs: Vec<Var<'t, T>>,
}

/// Scores `tokens` (`<sos> ... <eos>`) against encoder output `h`.
pub fn sequence_log_prob_vars<'t, T: Scalar>(
    speller: &Speller<'t, T>,
    cfg: &ModelConfig,
    h: Var<'t, T>,
    tokens: &[usize],
    policy: &mut impl InputPolicy<T>,
) -> Result<SequenceVars<'t, T>> {
    let seq = TokenSequence::from_ids(tokens.to_vec())?;
    let tape = h.tape();
    let enc = Attendable::new(speller, h)?;
    let mut state = StateVars::zeros(tape, cfg)?;
    let mut picked = Vec::with_capacity(seq.steps());
    let mut inputs = Vec::with_capacity(seq.steps());
    let mut step_log_probs = Vec::with_capacity(seq.steps());
    let mut prev: Option<Arc<Tensor<T>>> = None;
    for i in 1..tokens.len() {
        let input = match &prev {
            None => tokens[0],
            Some(lp) => policy.choose(i, tokens[i - 1], lp),
        };
        inputs.push(input);
        let step = decoder_step_vars(speller, &state, input, &enc)?;
        picked.push(step.log_probs.pick(output_index(tokens[i])?)?);
        prev = Some(step.log_probs.value());
        step_log_probs.push(step.log_probs);
        state = step.state;
    }
    Ok(SequenceVars {
        log_prob: tape.add_n(&picked)?,
        inputs,
        step_log_probs,
    })
}

/// Decoder state outside of any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T: Scalar> {
    pub h: [Tensor<T>; 2],
    pub c: [Tensor<T>; 2],
    pub context: Tensor<T>,
    pub step: usize,
}

impl<T: Scalar> DecoderState<T> {
    pub fn initial(cfg: &ModelConfig) -> Self {
        let z = Tensor::zeros(&[1, cfg.speller_hidden]);
        DecoderState {
            h: [z.clone(), z.clone()],
            c: [z.clone(), z],
            context: Tensor::zeros(&[1, cfg.encoder_width()]),
            step: 0,
        }
    }

    /// Top-layer hidden state `s_i`.
    pub fn s(&self) -> &Tensor<T> {
        &self.h[1]
    }
}

/// Encoder output with precomputed attention keys, reused across decoder steps.
#[derive(Debug, Clone)]
pub struct AttendCache<T: Scalar> {
    h: Arc<Tensor<T>>,
    keys_t: Arc<Tensor<T>>,
}

impl<T: Scalar> AttendCache<T> {
    pub fn new(store: &ParamStore<T>, enc: &EncoderOutput<T>) -> Result<Self> {
        let tape = Tape::new();
        let speller = Speller::bind(&LazyParams { tape: &tape, store })?;
        let h = tape.constant(enc.h.clone())?;
        let a = Attendable::new(&speller, h)?;
        Ok(AttendCache {
            h: h.value(),
            keys_t: a.keys_t.value(),
        })
    }

    pub fn encoder_len(&self) -> usize {
        self.h.rows()
    }

    fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<Attendable<'t, T>> {
        Ok(Attendable {
            h: tape.leaf(Arc::clone(&self.h), false)?,
            keys_t: tape.leaf(Arc::clone(&self.keys_t), false)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T: Scalar> {
    pub state: DecoderState<T>,
    /// Log probabilities over the `OUTPUT_SIZE` output symbols.
    pub log_probs: Vec<T>,
    pub alpha: Vec<T>,
}

/// Attention weights and context for a decoder state `s` (`[1, speller_hidden]`).
pub fn attend<T: Scalar>(store: &ParamStore<T>, s: &Tensor<T>, cache: &AttendCache<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let speller = Speller::bind(&LazyParams { tape: &tape, store })?;
    let enc = cache.bind(&tape)?;
    let s = tape.constant(s.clone())?;
    let (c, a) = attention_context(&speller, s, &enc)?;
    Ok(((*c.value()).clone(), (*a.value()).clone()))
}

/// One inference decoder step.
pub fn decoder_step<T: Scalar>(
    store: &ParamStore<T>,
    state: &DecoderState<T>,
    y_prev: usize,
    cache: &AttendCache<T>,
) -> Result<StepOutput<T>> {
    let tape = Tape::new();
    let speller = Speller::bind(&LazyParams { tape: &tape, store })?;
    let enc = cache.bind(&tape)?;
    let sv = StateVars {
        h: [tape.constant(state.h[0].clone())?, tape.constant(state.h[1].clone())?],
        c: [tape.constant(state.c[0].clone())?, tape.constant(state.c[1].clone())?],
        context: tape.constant(state.context.clone())?,
    };
    let step = decoder_step_vars(&speller, &sv, y_prev, &enc)?;
    let take = |v: Var<'_, T>| (*v.value()).clone();
    Ok(StepOutput {
        state: DecoderState {
            h: [take(step.state.h[0]), take(step.state.h[1])],
            c: [take(step.state.c[0]), take(step.state.c[1])],
            context: take(step.state.context),
            step: state.step + 1,
        },
        log_probs: step.log_probs.value().data().to_vec(),
        alpha: step.alpha.value().data().to_vec(),
    })
}

/// Teacher-forced `log P(y | x)` for a framed token sequence.
pub fn sequence_log_prob<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    enc: &EncoderOutput<T>,
    tokens: &[usize],
) -> Result<f64> {
    let tape = Tape::new();
    let speller = Speller::bind(&LazyParams { tape: &tape, store })?;
    let h = tape.constant(enc.h.clone())?;
    let seq = sequence_log_prob_vars(&speller, cfg, h, tokens, &mut TeacherForcing)?;
    Ok(seq.log_prob.value().data()[0].as_f64())
}
