mod common;

use common::{central_difference, max_rel_err, rng, uniform, FD_TOLERANCE};
use proptest::prelude::*;
use rand::Rng;
use ttl_core::tensor::{AttentionLayout, Tape, Tensor};

type Build = dyn Fn(&Tape, &[Tensor]) -> ttl_core::Result<Tensor>;

/// Max relative error between backward and central differences of
/// `sum(op(inputs) ∘ R)` for a fixed random `R`.
fn op_gradient_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let out = build(&tape, &watched).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let proj = Tensor::from_vec(out.shape().to_vec(), uniform(&mut r, out.len(), -1.0, 1.0)).unwrap();
    let loss = tape.sum(&tape.mul(&out, &proj).unwrap()).unwrap();
    let grads = tape.backward(&loss).unwrap();

    let value = |xs: &[Tensor]| -> f64 {
        let t = Tape::new();
        let o = build(&t, xs).unwrap();
        o.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (i, w) in watched.iter().enumerate() {
        let analytic = grads.get_or_zeros(w);
        let numeric = central_difference(inputs[i].data(), |x| {
            let mut xs = inputs.to_vec();
            xs[i] = Tensor::from_vec(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            value(&xs)
        });
        worst = worst.max(max_rel_err(analytic.data(), &numeric));
    }
    worst
}

fn rand_tensor(r: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..=8, 1usize..=8, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_linear_gradients((seed, m, k, n) in dims()) {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, vec![m, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, vec![k, n], -1.0, 1.0);
        prop_assert!(op_gradient_error(&[a, b], &|t, x| t.matmul(&x[0], &x[1]), seed) <= FD_TOLERANCE);
        let x = rand_tensor(&mut r, vec![m, k], -1.0, 1.0);
        let w = rand_tensor(&mut r, vec![n, k], -1.0, 1.0);
        let bias = rand_tensor(&mut r, vec![n], -1.0, 1.0);
        prop_assert!(op_gradient_error(&[x, w, bias], &|t, x| t.linear(&x[0], &x[1], Some(&x[2])), seed) <= FD_TOLERANCE);
    }

    #[test]
    fn elementwise_gradients((seed, m, n, _) in dims()) {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, vec![m, n], -2.0, 2.0);
        let b = rand_tensor(&mut r, vec![m, n], -2.0, 2.0);
        let pos = rand_tensor(&mut r, vec![m, n], 0.5, 3.0);
        let f: f64 = r.gen_range(-3.0..3.0);
        let ab = [a.clone(), b];
        prop_assert!(op_gradient_error(&ab, &|t, x| t.add(&x[0], &x[1]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&ab, &|t, x| t.mul(&x[0], &x[1]), seed) <= FD_TOLERANCE);
        let one = [a];
        prop_assert!(op_gradient_error(&one, &move |t, x| t.scale(&x[0], f), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &move |t, x| t.add_scalar(&x[0], f), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &|t, x| t.exp(&x[0]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &|t, x| t.gelu(&x[0]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&[pos], &|t, x| t.log(&x[0]), seed) <= FD_TOLERANCE);
    }

    #[test]
    fn normalization_gradients((seed, m, n, _) in dims()) {
        let n = n.max(2);
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, vec![m, n], -2.0, 2.0);
        let g = rand_tensor(&mut r, vec![n], 0.5, 1.5);
        let b = rand_tensor(&mut r, vec![n], -0.5, 0.5);
        let e = op_gradient_error(&[x.clone(), g, b], &|t, x| t.layer_norm(&x[0], &x[1], &x[2], 1e-5), seed);
        prop_assert!(e <= FD_TOLERANCE, "layer_norm {e}");
        let temp: f64 = r.gen_range(0.5..5.0);
        prop_assert!(op_gradient_error(&[x.clone()], &move |t, x| t.softmax(&x[0], temp), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&[x], &|t, x| t.normalize_rows(&x[0]), seed) <= FD_TOLERANCE);
        let p = rand_tensor(&mut r, vec![m, n], 0.05, 1.0);
        prop_assert!(op_gradient_error(&[p], &|t, x| t.entropy_rows(&x[0]), seed) <= FD_TOLERANCE);
    }

    #[test]
    fn reduction_and_layout_gradients((seed, m, n, k) in dims()) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, vec![m, n], -2.0, 2.0);
        let y = rand_tensor(&mut r, vec![k, n], -2.0, 2.0);
        let one = [x.clone()];
        prop_assert!(op_gradient_error(&one, &|t, x| t.sum(&x[0]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &|t, x| t.mean(&x[0]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &|t, x| t.sum_last(&x[0]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &|t, x| t.mean_rows(&x[0]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &|t, x| t.transpose(&x[0]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&one, &move |t, x| t.reshape(&x[0], vec![n * m]), seed) <= FD_TOLERANCE);
        prop_assert!(op_gradient_error(&[x, y], &|t, x| t.concat_rows(&[&x[0], &x[1]]), seed) <= FD_TOLERANCE);
        let index: Vec<usize> = (0..k + 1).map(|_| r.gen_range(0..m)).collect();
        let xs = [rand_tensor(&mut r, vec![m, n], -2.0, 2.0)];
        prop_assert!(op_gradient_error(&xs, &move |t, x| t.gather_rows(&x[0], &index), seed) <= FD_TOLERANCE);
    }

    #[test]
    fn attention_and_token_gradients(seed in any::<u64>(), batch in 1usize..=2, seq in 1usize..=4, heads in 1usize..=2, hd in 1usize..=4) {
        let mut r = rng(seed);
        let layout = AttentionLayout { batch, seq, heads, head_dim: hd };
        let shape = vec![batch * seq, heads * hd];
        let qkv: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, shape.clone(), -1.5, 1.5)).collect();
        prop_assert!(op_gradient_error(&qkv, &move |t, x| t.attention(&x[0], &x[1], &x[2], layout), seed) <= FD_TOLERANCE);
        let d = heads * hd;
        let patches = rand_tensor(&mut r, vec![batch * seq, d], -1.0, 1.0);
        let cls = rand_tensor(&mut r, vec![d], -1.0, 1.0);
        let pos = rand_tensor(&mut r, vec![seq + 1, d], -1.0, 1.0);
        prop_assert!(op_gradient_error(&[patches, cls, pos], &move |t, x| t.embed_tokens(&x[0], &x[1], &x[2], batch), seed) <= FD_TOLERANCE);
    }

    #[test]
    fn softmax_is_a_probability_vector(seed in any::<u64>(), m in 1usize..=8, c in 1usize..=8, temp in 0.01f64..200.0) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, vec![m, c], -5.0, 5.0);
        let p = Tape::new().softmax(&x, temp).unwrap();
        for row in p.data().chunks_exact(c) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop((seed, m, k, n) in dims()) {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, vec![m, k], -1e3, 1e3);
        let b = rand_tensor(&mut r, vec![k, n], -1e3, 1e3);
        let c = Tape::new().matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                let got = c.data()[i * n + j];
                // Entries are products of magnitude ≤ 1e3, so sums reach 8e6;
                // the bound is relative to that scale.
                prop_assert!((got - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn untracked_forward_records_nothing((seed, m, n, _) in dims()) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, vec![m, n], -1.0, 1.0);
        let w = rand_tensor(&mut r, vec![n, n], -1.0, 1.0);
        let tape = Tape::new();
        let y = tape.linear(&x, &w, None).unwrap();
        let y = tape.gelu(&y).unwrap();
        let y = tape.softmax(&y, 2.0).unwrap();
        let _ = tape.sum(&tape.entropy_rows(&y).unwrap()).unwrap();
        prop_assert_eq!(tape.len(), 0);
        prop_assert!(!y.requires_grad());
    }
}

#[test]
fn matmul_examples() {
    let t = Tape::new();
    let id = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let col = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(t.matmul(&id, &col).unwrap().data(), &[3.0, 4.0]);
    let row = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
    assert_eq!(t.matmul(&row, &col).unwrap().data(), &[11.0]);

    let mut r = rng(7);
    let a = rand_tensor(&mut r, vec![3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, vec![4, 2], -1.0, 1.0);
    let c = t.matmul(&a, &b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let s: f64 = (0..4).map(|l| a.data()[i * 4 + l] * b.data()[l * 2 + j]).sum();
            assert!((c.data()[i * 2 + j] - s).abs() <= 1e-12);
        }
    }
}

#[test]
fn softmax_direct_formula() {
    let x = Tensor::from_vec(vec![3], vec![0.2, -0.1, 0.05]).unwrap();
    let p = Tape::new().softmax(&x, 100.0).unwrap();
    let e: Vec<f64> = [0.2f64, -0.1, 0.05].iter().map(|v| (100.0 * v).exp()).collect();
    let z: f64 = e.iter().sum();
    for (got, want) in p.data().iter().zip(e.iter().map(|v| v / z)) {
        assert!((got - want).abs() <= 1e-12 * want.abs());
    }
}

#[test]
fn attention_degenerate_cases() {
    let t = Tape::new();
    let layout = AttentionLayout {
        batch: 1,
        seq: 3,
        heads: 1,
        head_dim: 2,
    };
    let zeros = Tensor::zeros(vec![3, 2]);
    let v = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
    let out = t.attention(&zeros, &zeros, &v, layout).unwrap();
    for row in out.data().chunks_exact(2) {
        assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 5.0).abs() < 1e-12);
    }

    let one = AttentionLayout { seq: 1, ..layout };
    let mut r = rng(3);
    let q = rand_tensor(&mut r, vec![1, 2], -5.0, 5.0);
    let k = rand_tensor(&mut r, vec![1, 2], -5.0, 5.0);
    let v = rand_tensor(&mut r, vec![1, 2], -5.0, 5.0);
    assert_eq!(t.attention(&q, &k, &v, one).unwrap().data(), v.data());
}

