//! Shared fixtures and an independent plain-loop forward pass used as an
//! oracle for the tape-based model.
#![allow(dead_code)]

use las::numerics::{ParamStore, Tensor};
use las::training::{train, Checkpoint, Example, TrainConfig, TrainHooks};
use las::vocab::Vocabulary;
use las::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        listener_hidden: 3,
        pyramid_layers: 2,
        speller_hidden: 4,
        embed_dim: 3,
        attention_dim: 4,
        output_hidden: 5,
        ..ModelConfig::default()
    }
}

pub fn random_features(frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[frames, dim], -1.0, 1.0, &mut rng)
}

pub fn tokens(text: &str) -> Vec<usize> {
    Vocabulary::standard().encode(text).unwrap().ids().to_vec()
}

pub struct Reference<'a> {
    pub store: &'a ParamStore<f64>,
    pub cfg: &'a ModelConfig,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Reference<'_> {
    fn mat(&self, name: &str) -> (&[f64], usize) {
        let t = self.store.get(name).unwrap();
        (t.data(), t.cols())
    }

    /// `x · W` for a row vector `x`.
    fn vec_mat(&self, x: &[f64], name: &str) -> Vec<f64> {
        let (w, cols) = self.mat(name);
        assert_eq!(w.len(), x.len() * cols, "{name}");
        let mut out = vec![0.0; cols];
        for (i, xi) in x.iter().enumerate() {
            for j in 0..cols {
                out[j] += xi * w[i * cols + j];
            }
        }
        out
    }

    fn add(&self, mut x: Vec<f64>, name: &str) -> Vec<f64> {
        for (a, b) in x.iter_mut().zip(self.mat(name).0) {
            *a += b;
        }
        x
    }

    pub fn lstm(&self, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = h.len();
        let zx = self.vec_mat(x, &format!("{prefix}.w_x"));
        let zh = self.vec_mat(h, &format!("{prefix}.w_h"));
        let z: Vec<f64> = zx.iter().zip(&zh).map(|(a, b)| a + b).collect();
        let z = self.add(z, &format!("{prefix}.b"));
        let mut h2 = vec![0.0; n];
        let mut c2 = vec![0.0; n];
        for k in 0..n {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[n + k]);
            let g = z[2 * n + k].tanh();
            let o = sigmoid(z[3 * n + k]);
            c2[k] = f * c[k] + i * g;
            h2[k] = o * c2[k].tanh();
        }
        (h2, c2)
    }

    fn blstm(&self, prefix: &str, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.cfg.listener_hidden;
        let run = |dir: &str, order: Vec<usize>| {
            let mut h = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut out = vec![Vec::new(); xs.len()];
            for t in order {
                let (h2, c2) = self.lstm(&format!("{prefix}.{dir}"), &xs[t], &h, &c);
                out[t] = h2.clone();
                h = h2;
                c = c2;
            }
            out
        };
        let f = run("fwd", (0..xs.len()).collect());
        let b = run("bwd", (0..xs.len()).rev().collect());
        f.into_iter().zip(b).map(|(mut a, b)| {
            a.extend(b);
            a
        }).collect()
    }

    pub fn listen(&self, x: &Tensor<f64>) -> Vec<Vec<f64>> {
        let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|t| x.row(t).to_vec()).collect();
        h = self.blstm("listener.blstm", &h);
        for layer in 1..=self.cfg.pyramid_layers {
            let width = h[0].len();
            let paired: Vec<Vec<f64>> = h
                .chunks(2)
                .map(|p| {
                    let mut v = p[0].clone();
                    v.extend(p.get(1).cloned().unwrap_or_else(|| vec![0.0; width]));
                    v
                })
                .collect();
            h = self.blstm(&format!("listener.pblstm{layer}"), &paired);
        }
        h
    }

    fn mlp(&self, prefix: &str, x: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = self.add(self.vec_mat(x, &format!("{prefix}.w1")), &format!("{prefix}.b1"))
            .into_iter()
            .map(f64::tanh)
            .collect();
        self.add(self.vec_mat(&a, &format!("{prefix}.w2")), &format!("{prefix}.b2"))
    }

    /// Per step: attention weights and log probabilities, teacher forced.
    pub fn spell(&self, h: &[Vec<f64>], tokens: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let hs = self.cfg.speller_hidden;
        let keys: Vec<Vec<f64>> = h.iter().map(|hu| self.mlp("speller.psi", hu)).collect();
        let (embed, e_dim) = self.mat("speller.embed");
        let mut st = [vec![0.0; hs], vec![0.0; hs]];
        let mut cell = [vec![0.0; hs], vec![0.0; hs]];
        let mut ctx = vec![0.0; h[0].len()];
        let mut out = Vec::new();
        for w in tokens.windows(2) {
            let mut input = embed[w[0] * e_dim..(w[0] + 1) * e_dim].to_vec();
            input.extend(&ctx);
            let (h0, c0) = self.lstm("speller.lstm0", &input, &st[0], &cell[0]);
            let (h1, c1) = self.lstm("speller.lstm1", &h0, &st[1], &cell[1]);
            let q = self.mlp("speller.phi", &h1);
            let e: Vec<f64> = keys.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
            let alpha: Vec<f64> = e.iter().map(|v| (v - m).exp() / z).collect();
            ctx = vec![0.0; h[0].len()];
            for (a, hu) in alpha.iter().zip(h) {
                for (c, v) in ctx.iter_mut().zip(hu) {
                    *c += a * v;
                }
            }
            let mut feat = h1.clone();
            feat.extend(&ctx);
            let logits = self.mlp("speller.out", &feat);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.push((alpha, logits.iter().map(|v| v - lse).collect()));
            st = [h0, h1];
            cell = [c0, c1];
        }
        out
    }

    /// `log P(y | x)` summed over every target including `<eos>`.
    pub fn log_prob(&self, x: &Tensor<f64>, tokens: &[usize]) -> f64 {
        let h = self.listen(x);
        self.spell(&h, tokens)
            .iter()
            .zip(&tokens[1..])
            .map(|((_, lp), &y)| lp[las::vocab::output_index(y).unwrap()])
            .sum()
    }
}

pub const TOY_TEXTS: [&str; 10] = ["ab", "ba", "abc", "cab", "a", "b", "c", "bb", "ca", "acb"];

/// Three two-hot frames per character, plus optional uniform noise.
pub fn toy_features(text: &str, noise: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for ch in text.chars() {
        let k = (ch as usize - 'a' as usize) % 6;
        for _ in 0..3 {
            let mut r: Vec<f32> = (0..6).map(|_| noise * rng.random_range(-1.0..1.0)).collect();
            r[k] += 1.0;
            r[(k + 1) % 6] += 0.5;
            rows.push(r);
        }
    }
    Tensor::from_rows(&rows).unwrap()
}

pub fn toy_examples() -> Vec<Example> {
    TOY_TEXTS
        .iter()
        .enumerate()
        .map(|(i, t)| Example {
            id: format!("u{i}"),
            features: toy_features(t, 0.0, 0),
            tokens: tokens(t),
        })
        .collect()
}

pub fn toy_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 5,
        epochs,
        learning_rate: 0.5,
        decay_interval: Some(10_000),
        seed: 5,
        ..TrainConfig::default()
    }
}

/// The tiny model trained on [`toy_examples`].
pub fn toy_model(epochs: usize) -> Checkpoint {
    let start = Checkpoint::fresh(tiny_config(6), toy_train_config(epochs)).unwrap();
    train(start, &toy_examples(), TrainHooks::default()).unwrap()
}
