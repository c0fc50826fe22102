//! The listener: a bottom BLSTM followed by pyramidal BLSTM layers that halve
//! the time resolution by concatenating consecutive frame pairs.

use crate::error::{LasError, Result};
use crate::model::{listener_layer_name, ModelConfig};
use crate::numerics::{LazyParams, ParamSource, ParamStore, Scalar, Tape, Tensor, Var};

/// LSTM weights for one direction of one layer. Gate order in the `4H`
/// dimension is input, forget, cell candidate, output.
#[derive(Clone, Copy)]
pub struct LstmCell<'t, T: Scalar> {
    pub w_x: Var<'t, T>,
    pub w_h: Var<'t, T>,
    pub b: Var<'t, T>,
    pub hidden: usize,
}

impl<'t, T: Scalar> LstmCell<'t, T> {
    pub fn bind(params: &impl ParamSource<'t, T>, prefix: &str) -> Result<Self> {
        let w_x = params.var(&format!("{prefix}.w_x"))?;
        let w_h = params.var(&format!("{prefix}.w_h"))?;
        let b = params.var(&format!("{prefix}.b"))?;
        let hidden = w_h.value().rows();
        let (wx, wh, bv) = (w_x.value(), w_h.value(), b.value());
        if wx.cols() != 4 * hidden || wh.cols() != 4 * hidden || bv.len() != 4 * hidden {
            return Err(LasError::Dimension {
                op: "lstm_cell",
                lhs: wx.shape().to_vec(),
                rhs: wh.shape().to_vec(),
            });
        }
        Ok(LstmCell { w_x, w_h, b, hidden })
    }

    pub fn input_size(&self) -> usize {
        self.w_x.value().rows()
    }

    /// Zero `(h, c)` state.
    pub fn zero_state(&self) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = self.w_x.tape();
        let z = Tensor::zeros(&[1, self.hidden]);
        Ok((tape.constant(z.clone())?, tape.constant(z)?))
    }
}

/// One LSTM step on a `[1, Din]` input.
pub fn lstm_step<'t, T: Scalar>(
    cell: &LstmCell<'t, T>,
    x_t: Var<'t, T>,
    state: (Var<'t, T>, Var<'t, T>),
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let projected = x_t.matmul(cell.w_x)?.add(cell.b)?;
    lstm_step_projected(cell, projected, state)
}

/// One LSTM step whose input projection `x_t·W_x + b` is already computed.
pub fn lstm_step_projected<'t, T: Scalar>(
    cell: &LstmCell<'t, T>,
    projected: Var<'t, T>,
    (h, c): (Var<'t, T>, Var<'t, T>),
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let n = cell.hidden;
    let gates = projected.add(h.matmul(cell.w_h)?)?;
    let i = gates.slice_cols(0, n)?.sigmoid()?;
    let f = gates.slice_cols(n, 2 * n)?.sigmoid()?;
    let g = gates.slice_cols(2 * n, 3 * n)?.tanh()?;
    let o = gates.slice_cols(3 * n, 4 * n)?.sigmoid()?;
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh()?)?;
    Ok((h_next, c_next))
}

/// Runs one direction over a `[T, Din]` sequence; returns per-step hidden rows
/// in time order.
fn run_direction<'t, T: Scalar>(
    cell: &LstmCell<'t, T>,
    inputs: Var<'t, T>,
    reverse: bool,
) -> Result<Vec<Var<'t, T>>> {
    let steps = inputs.value().rows();
    let projected = inputs.matmul(cell.w_x)?.add_row(cell.b)?;
    let mut state = cell.zero_state()?;
    let mut outputs = Vec::with_capacity(steps);
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        state = lstm_step_projected(cell, projected.row(t)?, state)?;
        outputs.push(state.0);
    }
    if reverse {
        outputs.reverse();
    }
    Ok(outputs)
}

/// Bidirectional layer: `[T, Din] -> [T, 2H]`, forward half first.
pub fn blstm_layer<'t, T: Scalar>(
    fwd: &LstmCell<'t, T>,
    bwd: &LstmCell<'t, T>,
    inputs: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let value = inputs.value();
    if value.is_empty() || value.rows() == 0 {
        return Err(LasError::EmptyInput("blstm_layer"));
    }
    if value.cols() != fwd.input_size() || value.cols() != bwd.input_size() {
        return Err(LasError::Dimension {
            op: "blstm_layer",
            lhs: value.shape().to_vec(),
            rhs: vec![fwd.input_size()],
        });
    }
    let tape = inputs.tape();
    let f = run_direction(fwd, inputs, false)?;
    let b = run_direction(bwd, inputs, true)?;
    tape.concat_cols(&[tape.stack_rows(&f)?, tape.stack_rows(&b)?])
}

/// Concatenates frames `(2i, 2i+1)`; an odd final frame is paired with zeros.
pub fn pair_frames<'t, T: Scalar>(inputs: Var<'t, T>) -> Result<Var<'t, T>> {
    let (rows, cols) = inputs.value().dims2();
    if rows == 0 {
        return Err(LasError::EmptyInput("pair_frames"));
    }
    let even = rows.div_ceil(2) * 2;
    let padded = if even == rows { inputs } else { inputs.pad_rows(even)? };
    padded.reshape(vec![even / 2, 2 * cols])
}

/// Pyramidal layer: `[T, Din] -> [ceil(T/2), 2H]`.
pub fn pblstm_layer<'t, T: Scalar>(
    fwd: &LstmCell<'t, T>,
    bwd: &LstmCell<'t, T>,
    inputs: Var<'t, T>,
) -> Result<Var<'t, T>> {
    blstm_layer(fwd, bwd, pair_frames(inputs)?)
}

/// Listen: `[T, D]` features to the `[U, H]` encoder output.
pub fn listen<'t, T: Scalar>(
    params: &impl ParamSource<'t, T>,
    cfg: &ModelConfig,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let value = x.value();
    if value.rows() == 0 || value.is_empty() {
        return Err(LasError::EmptyInput("listen"));
    }
    if value.cols() != cfg.input_dim {
        return Err(LasError::Dimension {
            op: "listen",
            lhs: value.shape().to_vec(),
            rhs: vec![cfg.input_dim],
        });
    }
    let mut h = x;
    for layer in 0..=cfg.pyramid_layers {
        let name = listener_layer_name(layer);
        let fwd = LstmCell::bind(params, &format!("{name}.fwd"))?;
        let bwd = LstmCell::bind(params, &format!("{name}.bwd"))?;
        h = if layer == 0 {
            blstm_layer(&fwd, &bwd, h)?
        } else {
            pblstm_layer(&fwd, &bwd, h)?
        };
    }
    Ok(h)
}

/// High-level representation `h` of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T: Scalar> {
    pub h: Tensor<T>,
}

impl<T: Scalar> EncoderOutput<T> {
    /// Reduced length U.
    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.h.cols()
    }
}

/// Inference-only [`listen`] on plain tensors.
pub fn encode<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, x: &Tensor<T>) -> Result<EncoderOutput<T>> {
    let tape = Tape::new();
    let params = LazyParams { tape: &tape, store };
    let input = tape.constant(x.clone())?;
    let h = listen(&params, cfg, input)?;
    Ok(EncoderOutput { h: (*h.value()).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell_params(prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(format!("{prefix}.w_x"), Tensor::uniform(&[input, 4 * hidden], -0.5, 0.5, rng));
        s.insert(format!("{prefix}.w_h"), Tensor::uniform(&[hidden, 4 * hidden], -0.5, 0.5, rng));
        s.insert(format!("{prefix}.b"), Tensor::uniform(&[1, 4 * hidden], -0.5, 0.5, rng));
        s
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let tape = Tape::<f64>::new();
        let mut s = ParamStore::new();
        s.insert("c.w_x", Tensor::zeros(&[3, 8]));
        s.insert("c.w_h", Tensor::zeros(&[2, 8]));
        s.insert("c.b", Tensor::zeros(&[1, 8]));
        let p = s.bind(&tape, false).unwrap();
        let cell = LstmCell::bind(&p, "c").unwrap();
        let x = tape.constant(Tensor::row_vector(vec![0.3, -2.0, 5.0])).unwrap();
        let (h, _) = lstm_step(&cell, x, cell.zero_state().unwrap()).unwrap();
        assert!(h.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_gates_carry_the_cell() {
        let tape = Tape::<f64>::new();
        let hidden = 3;
        let mut b = vec![0.0; 4 * hidden];
        for v in &mut b[..hidden] {
            *v = -10.0;
        }
        for v in &mut b[hidden..2 * hidden] {
            *v = 10.0;
        }
        let mut s = ParamStore::new();
        s.insert("c.w_x", Tensor::zeros(&[2, 4 * hidden]));
        s.insert("c.w_h", Tensor::zeros(&[hidden, 4 * hidden]));
        s.insert("c.b", Tensor::row_vector(b));
        let p = s.bind(&tape, false).unwrap();
        let cell = LstmCell::bind(&p, "c").unwrap();
        let c0 = vec![0.7, -0.4, 1.3];
        let state = (
            tape.constant(Tensor::row_vector(vec![0.1, 0.2, 0.3])).unwrap(),
            tape.constant(Tensor::row_vector(c0.clone())).unwrap(),
        );
        let x = tape.constant(Tensor::row_vector(vec![1.0, -1.0])).unwrap();
        let (_, c) = lstm_step(&cell, x, state).unwrap();
        for (a, b) in c.value().data().iter().zip(&c0) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn lstm_step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = cell_params("c", 4, 3, &mut rng);
        let mut inputs: Vec<Tensor<f64>> = s.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng));
        inputs.push(Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng));
        inputs.push(Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng));
        let r = grad_check(
            |tape, v| {
                let cell = LstmCell { w_x: v[0], w_h: v[1], b: v[2], hidden: 3 };
                let (h, c) = lstm_step(&cell, v[3], (v[4], v[5]))?;
                let w = tape.constant(Tensor::row_vector(vec![0.3, -0.8, 1.1]))?;
                h.mul(w)?.sum()?.add(c.tanh()?.sum()?)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn single_frame_blstm_is_concat_of_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = cell_params("f", 3, 2, &mut rng);
        for (n, t) in cell_params("b", 3, 2, &mut rng).iter() {
            s.insert(n, t.clone());
        }
        let tape = Tape::<f64>::new();
        let p = s.bind(&tape, false).unwrap();
        let f = LstmCell::bind(&p, "f").unwrap();
        let b = LstmCell::bind(&p, "b").unwrap();
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.5, -0.1, 0.9]).unwrap()).unwrap();
        let out = blstm_layer(&f, &b, x).unwrap().value();
        let (hf, _) = lstm_step(&f, x, f.zero_state().unwrap()).unwrap();
        let (hb, _) = lstm_step(&b, x, b.zero_state().unwrap()).unwrap();
        let expect: Vec<f64> = hf.value().data().iter().chain(hb.value().data()).copied().collect();
        for (a, e) in out.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cell_params("a", 3, 2, &mut rng);
        let b = cell_params("b", 3, 2, &mut rng);
        let mut s = a.clone();
        for (n, t) in b.iter() {
            s.insert(n, t.clone());
        }
        let x = Tensor::<f64>::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let mut rev_rows: Vec<Vec<f64>> = (0..5).map(|t| x.row(t).to_vec()).collect();
        rev_rows.reverse();
        let xr = Tensor::from_rows(&rev_rows).unwrap();

        let tape = Tape::<f64>::new();
        let p = s.bind(&tape, false).unwrap();
        let ca = LstmCell::bind(&p, "a").unwrap();
        let cb = LstmCell::bind(&p, "b").unwrap();
        let y = blstm_layer(&ca, &cb, tape.constant(x).unwrap()).unwrap().value();
        // swapped direction parameters on the reversed input
        let yr = blstm_layer(&cb, &ca, tape.constant(xr).unwrap()).unwrap().value();
        for t in 0..5 {
            let row = y.row(t);
            let mirrored = yr.row(4 - t);
            assert!((row[0] - mirrored[2]).abs() < 1e-12);
            assert!((row[1] - mirrored[3]).abs() < 1e-12);
            assert!((row[2] - mirrored[0]).abs() < 1e-12);
            assert!((row[3] - mirrored[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = cell_params("c", 3, 2, &mut rng);
        let p = s.bind(&tape, false).unwrap();
        let c = LstmCell::bind(&p, "c").unwrap();
        let x = tape.constant(Tensor::zeros(&[0, 3])).unwrap();
        assert!(matches!(blstm_layer(&c, &c, x), Err(LasError::EmptyInput(_))));
    }

    #[test]
    fn pyramid_halves_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = cell_params("f", 4, 2, &mut rng);
        for (n, t) in cell_params("b", 4, 2, &mut rng).iter() {
            s.insert(n, t.clone());
        }
        let tape = Tape::<f64>::new();
        let p = s.bind(&tape, false).unwrap();
        let f = LstmCell::bind(&p, "f").unwrap();
        let b = LstmCell::bind(&p, "b").unwrap();
        let x4 = tape.constant(Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng)).unwrap();
        assert_eq!(pblstm_layer(&f, &b, x4).unwrap().shape(), vec![2, 4]);
        let x5 = Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng);
        let paired = pair_frames(tape.constant(x5.clone()).unwrap()).unwrap().value();
        assert_eq!(paired.shape(), &[3, 4]);
        assert_eq!(&paired.row(2)[..2], x5.row(4));
        assert_eq!(&paired.row(2)[2..], &[0.0, 0.0]);
        assert_eq!(&paired.row(0)[..2], x5.row(0));
        assert_eq!(&paired.row(0)[2..], x5.row(1));
    }

    #[test]
    fn pblstm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = cell_params("f", 4, 2, &mut rng);
        let b = cell_params("b", 4, 2, &mut rng);
        let mut inputs: Vec<Tensor<f64>> = f.iter().chain(b.iter()).map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng));
        let r = grad_check(
            |tape, v| {
                let f = LstmCell { w_x: v[0], w_h: v[1], b: v[2], hidden: 2 };
                let b = LstmCell { w_x: v[3], w_h: v[4], b: v[5], hidden: 2 };
                let y = pblstm_layer(&f, &b, v[6])?;
                let w = tape.constant(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9)))?;
                y.mul(w)?.sum()
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn blstm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = cell_params("f", 4, 3, &mut rng);
        let b = cell_params("b", 4, 3, &mut rng);
        let mut inputs: Vec<Tensor<f64>> = f.iter().chain(b.iter()).map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let r = grad_check(
            |_, v| {
                let f = LstmCell { w_x: v[0], w_h: v[1], b: v[2], hidden: 3 };
                let b = LstmCell { w_x: v[3], w_h: v[4], b: v[5], hidden: 3 };
                blstm_layer(&f, &b, v[6])?.tanh()?.sum()
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
