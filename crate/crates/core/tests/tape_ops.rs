//! Every primitive op against central finite differences on random inputs.

use las::numerics::{grad_check, Tape, Tensor, Var};
use las::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 100;

/// Runs `op` on 100 random instances; `shapes` draws the input shapes and the
/// output is contracted with fixed random weights to a scalar.
fn check_op<S, F>(name: &str, shapes: S, op: F)
where
    S: Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes(&mut rng).iter().map(|s| Tensor::uniform(s, -1.5, 1.5, &mut rng)).collect();
        let weights_seed = rng.random();
        let r = grad_check(
            |tape, v| {
                let out = op(tape, v)?;
                let w = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(weights_seed));
                out.mul(tape.constant(w)?)?.sum()
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        worst = worst.max(r.worst());
    }
    assert!(worst <= 1e-6, "{name}: {worst:e}");
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

#[test]
fn matmul() {
    check_op(
        "matmul",
        |r| {
            let (a, b, c) = (dim(r), dim(r), dim(r));
            vec![vec![a, b], vec![b, c]]
        },
        |_, v| v[0].matmul(v[1]),
    );
}

#[test]
fn transpose() {
    check_op("transpose", |r| vec![vec![dim(r), dim(r)]], |_, v| v[0].transpose());
}

#[test]
fn elementwise() {
    let same = |r: &mut ChaCha8Rng| {
        let s = vec![dim(r), dim(r)];
        vec![s.clone(), s]
    };
    check_op("add", same, |_, v| v[0].add(v[1]));
    check_op("mul", same, |_, v| v[0].mul(v[1]));
    check_op("scale", |r| vec![vec![dim(r), dim(r)]], |_, v| v[0].scale(-2.5));
    check_op("tanh", |r| vec![vec![dim(r), dim(r)]], |_, v| v[0].tanh());
    check_op("sigmoid", |r| vec![vec![dim(r), dim(r)]], |_, v| v[0].sigmoid());
}

#[test]
fn add_row() {
    check_op(
        "add_row",
        |r| {
            let (a, b) = (dim(r), dim(r));
            vec![vec![a, b], vec![1, b]]
        },
        |_, v| v[0].add_row(v[1]),
    );
}

#[test]
fn softmaxes() {
    check_op("softmax", |r| vec![vec![1, dim(r) + 1]], |_, v| v[0].softmax());
    check_op("log_softmax", |r| vec![vec![1, dim(r) + 1]], |_, v| v[0].log_softmax());
}

#[test]
fn slicing_and_shaping() {
    check_op("slice_cols", |_| vec![vec![3, 5]], |_, v| v[0].slice_cols(1, 4));
    check_op("rows", |_| vec![vec![4, 3]], |_, v| v[0].rows(1, 3));
    check_op("row", |_| vec![vec![4, 3]], |_, v| v[0].row(2));
    check_op("reshape", |_| vec![vec![4, 3]], |_, v| v[0].reshape(vec![2, 6]));
    check_op("pad_rows", |_| vec![vec![3, 2]], |_, v| v[0].pad_rows(4));
    check_op("pick", |_| vec![vec![1, 6]], |_, v| v[0].pick(4));
    check_op("sum", |r| vec![vec![dim(r), dim(r)]], |_, v| v[0].sum());
}

#[test]
fn joins() {
    check_op(
        "concat_cols",
        |r| {
            let n = dim(r);
            vec![vec![n, dim(r)], vec![n, dim(r)]]
        },
        |t, v| t.concat_cols(v),
    );
    check_op(
        "stack_rows",
        |r| {
            let n = dim(r);
            vec![vec![1, n], vec![1, n], vec![1, n]]
        },
        |t, v| t.stack_rows(v),
    );
    check_op(
        "add_n",
        |r| {
            let s = vec![dim(r), dim(r)];
            vec![s.clone(), s.clone(), s]
        },
        |t, v| t.add_n(v),
    );
}
