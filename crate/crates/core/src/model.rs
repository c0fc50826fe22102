//! Model configuration, parameter layout and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LasError, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};
use crate::vocab::{OUTPUT_SIZE, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension D of each input frame.
    pub input_dim: usize,
    /// Hidden units per direction in every listener layer.
    pub listener_hidden: usize,
    /// Number of pyramidal layers stacked on the bottom BLSTM.
    pub pyramid_layers: usize,
    /// Units in each of the two speller LSTM layers.
    pub speller_hidden: usize,
    /// Width of the previous-character embedding.
    pub embed_dim: usize,
    /// Hidden and output width of the attention MLPs φ and ψ.
    pub attention_dim: usize,
    /// Hidden width of the character distribution MLP.
    pub output_hidden: usize,
    /// Weights start in `U(-init_range, init_range)`.
    pub init_range: f64,
    /// Initial forget-gate bias; 0 keeps the plain uniform init.
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 40,
            listener_hidden: 256,
            pyramid_layers: 3,
            speller_hidden: 512,
            embed_dim: 64,
            attention_dim: 128,
            output_hidden: 256,
            init_range: 0.1,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    /// Width H of the listener output.
    pub fn encoder_width(&self) -> usize {
        2 * self.listener_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("listener_hidden", self.listener_hidden),
            ("speller_hidden", self.speller_hidden),
            ("embed_dim", self.embed_dim),
            ("attention_dim", self.attention_dim),
            ("output_hidden", self.output_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(LasError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.init_range > 0.0) {
            return Err(LasError::Config("init_range must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter tensor with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let lstm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, hidden: usize| {
            out.push((format!("{prefix}.w_x"), vec![input, 4 * hidden]));
            out.push((format!("{prefix}.w_h"), vec![hidden, 4 * hidden]));
            out.push((format!("{prefix}.b"), vec![1, 4 * hidden]));
        };
        let mlp = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, hidden: usize, output: usize| {
            out.push((format!("{prefix}.w1"), vec![input, hidden]));
            out.push((format!("{prefix}.b1"), vec![1, hidden]));
            out.push((format!("{prefix}.w2"), vec![hidden, output]));
            out.push((format!("{prefix}.b2"), vec![1, output]));
        };

        let hl = self.listener_hidden;
        let mut input = self.input_dim;
        for layer in 0..=self.pyramid_layers {
            for dir in ["fwd", "bwd"] {
                lstm(&mut out, &format!("{}.{dir}", listener_layer_name(layer)), input, hl);
            }
            input = 2 * (2 * hl);
        }

        let hs = self.speller_hidden;
        let he = self.encoder_width();
        out.push(("speller.embed".into(), vec![VOCAB_SIZE, self.embed_dim]));
        lstm(&mut out, "speller.lstm0", self.embed_dim + he, hs);
        lstm(&mut out, "speller.lstm1", hs, hs);
        mlp(&mut out, "speller.phi", hs, self.attention_dim, self.attention_dim);
        mlp(&mut out, "speller.psi", he, self.attention_dim, self.attention_dim);
        mlp(&mut out, "speller.out", hs + he, self.output_hidden, OUTPUT_SIZE);
        out
    }

    /// Fresh parameters: uniform weights, forget-gate biases set to `forget_bias`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let mut t = Tensor::<T>::uniform(&shape, -self.init_range, self.init_range, &mut rng);
            if self.forget_bias != 0.0 && is_lstm_bias(&name) {
                let h = shape[1] / 4;
                for v in &mut t.data_mut()[h..2 * h] {
                    *v = T::cast(self.forget_bias);
                }
            }
            store.insert(name, t);
        }
        store
    }

    /// Checks that `store` holds exactly the tensors this configuration expects.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != store.len() {
            return Err(LasError::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                store.len()
            )));
        }
        for (name, shape) in shapes {
            let t = store.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(LasError::Dimension {
                    op: "check_params",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn listener_layer_name(layer: usize) -> String {
    if layer == 0 {
        "listener.blstm".to_string()
    } else {
        format!("listener.pblstm{layer}")
    }
}

fn is_lstm_bias(name: &str) -> bool {
    name.ends_with(".b") && (name.starts_with("listener.") || name.starts_with("speller.lstm"))
}

/// Encoder length after `layers` halvings of `frames`.
pub fn encoded_len(frames: usize, layers: usize) -> usize {
    (0..layers).fold(frames, |t, _| t.div_ceil(2))
}
