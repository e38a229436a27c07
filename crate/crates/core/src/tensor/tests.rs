use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::window_out;
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.numel())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Checks d(sum(op(x) ⊙ w))/dx against finite differences for a random `w`.
fn check_op_grad(x: Tensor<f64>, op: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let eval = |t: &Tensor<f64>, weights: Option<&[f64]>| -> (f64, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(Mode::Train);
        let v = g.leaf(t.clone().with_grad());
        let y = op(&mut g, v);
        let n = g.value(y).numel();
        let w: Vec<f64> = match weights {
            Some(w) => w.to_vec(),
            None => {
                let mut r = rng(99);
                (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
            }
        };
        let wv = g.input(Tensor::from_vec(g.shape(y), w.clone()).unwrap());
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        g.backward(loss).unwrap();
        (value, g.grad(v).unwrap().to_vec(), w)
    };
    let (_, analytic, w) = eval(&x, None);
    let numeric = numeric_grad(&x, |t| eval(t, Some(&w)).0);
    for (a, n) in analytic.iter().zip(&numeric) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        assert!(rel < 1e-5 || (a - n).abs() < 1e-8, "analytic {a} numeric {n}");
    }
}

#[test]
fn tensor_rejects_bad_buffers() {
    assert!(matches!(
        Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(
        Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]),
        Err(Error::NonFinite(_))
    ));
    assert!(Tensor::<f32>::from_vec(&[0, 3], vec![]).is_err());
}

#[test]
fn matmul_identity_and_zero() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let a = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let z = g.input(Tensor::zeros(&[2, 2]));
    let ai = g.matmul(a, i).unwrap();
    let az = g.matmul(a, z).unwrap();
    assert_eq!(g.data(ai), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(g.data(az), &[0.0; 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let (a, b) = (rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 2]));
    let mut oracle = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for p in 0..4 {
                oracle[i * 2 + j] += a.data()[i * 4 + p] * b.data()[p * 2 + j];
            }
        }
    }
    let mut g = Graph::new(Mode::Eval);
    let (av, bv) = (g.input(a), g.input(b));
    let c = g.matmul(av, bv).unwrap();
    assert_eq!(g.shape(c), &[3, 2]);
    assert!(max_abs_diff(g.data(c), &oracle) < 1e-12);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradients() {
    let mut r = rng(2);
    let b = rand_tensor(&mut r, &[4, 3]);
    check_op_grad(rand_tensor(&mut r, &[2, 4]), |g, x| {
        let bv = g.input(b.clone());
        g.matmul(x, bv).unwrap()
    });
    let a = rand_tensor(&mut r, &[2, 4]);
    check_op_grad(rand_tensor(&mut r, &[4, 3]), |g, x| {
        let av = g.input(a.clone());
        g.matmul(av, x).unwrap()
    });
}

#[test]
fn conv2d_identity_and_zero_kernels() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[1, 4, 5]);
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x.clone());
    let one = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let zero = g.input(Tensor::zeros(&[2, 1, 3, 3]));
    let y = g.conv2d(xv, one, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 5]);
    assert_eq!(g.data(y), x.data());
    let yz = g.conv2d(xv, zero, 1, 1).unwrap();
    assert_eq!(g.shape(yz), &[2, 4, 5]);
    assert!(g.data(yz).iter().all(|&v| v == 0.0));
}

fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            s += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                * k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = s;
            }
        }
    }
    (vec![o, ho, wo], out)
}

#[test]
fn conv2d_matches_sliding_window() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[2, 5, 5]);
    let k = rand_tensor(&mut r, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let (shape, oracle) = conv_oracle(&x, &k, stride, pad);
        let mut g = Graph::new(Mode::Eval);
        let (xv, kv) = (g.input(x.clone()), g.input(k.clone()));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        assert_eq!(g.shape(y), shape.as_slice());
        assert!(max_abs_diff(g.data(y), &oracle) < 1e-12);
    }
}

#[test]
fn conv2d_kernel_too_large() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let k = g.input(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(g.conv2d(x, k, 1, 1), Err(Error::Dimension(_))));
    assert!(g.conv2d(x, k, 1, 2).is_ok());
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(5);
    let k = rand_tensor(&mut r, &[3, 2, 3, 3]);
    check_op_grad(rand_tensor(&mut r, &[2, 2, 4, 5]), |g, x| {
        let kv = g.input(k.clone());
        g.conv2d(x, kv, 1, 1).unwrap()
    });
    let x = rand_tensor(&mut r, &[2, 2, 5, 4]);
    check_op_grad(rand_tensor(&mut r, &[3, 2, 3, 3]), |g, k| {
        let xv = g.input(x.clone());
        g.conv2d(xv, k, 2, 1).unwrap()
    });
}

#[test]
fn maxpool_basics() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let c = g.input(Tensor::full(&[2, 4, 4], 3.5));
    let y = g.maxpool2d(c, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 2]);
    assert!(g.data(y).iter().all(|&v| v == 3.5));
    let x = g.input(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.data(y), &[4.0]);
    let small = g.input(Tensor::zeros(&[1, 1, 3]));
    assert!(matches!(g.maxpool2d(small, 2, 2), Err(Error::Dimension(_))));
}

#[test]
fn maxpool_matches_window_scan() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[4, 8, 8]);
    let mut oracle = Vec::new();
    for c in 0..4 {
        for oy in 0..4 {
            for ox in 0..4 {
                let window = [
                    x.data()[(c * 8 + 2 * oy) * 8 + 2 * ox],
                    x.data()[(c * 8 + 2 * oy) * 8 + 2 * ox + 1],
                    x.data()[(c * 8 + 2 * oy + 1) * 8 + 2 * ox],
                    x.data()[(c * 8 + 2 * oy + 1) * 8 + 2 * ox + 1],
                ];
                oracle.push(window.iter().copied().fold(f64::MIN, f64::max));
            }
        }
    }
    let mut g = Graph::new(Mode::Eval);
    let xv = g.input(x);
    let y = g.maxpool2d(xv, 2, 2).unwrap();
    assert_eq!(g.data(y), oracle.as_slice());
}

#[test]
fn maxpool_tie_routes_gradient_to_first() {
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.leaf(Tensor::full(&[1, 2, 2], 1.0).with_grad());
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_gradients() {
    let mut r = rng(7);
    check_op_grad(rand_tensor(&mut r, &[2, 3, 6, 6]), |g, x| {
        g.maxpool2d(x, 2, 2).unwrap()
    });
    check_op_grad(rand_tensor(&mut r, &[2, 3, 3, 2]), |g, x| {
        g.global_maxpool2d(x).unwrap()
    });
}

fn bn_graph(
    g: &mut Graph<f64>,
    x: Var,
    c: usize,
    gamma: f64,
    beta: f64,
) -> crate::Result<Var> {
    let gv = g.input(Tensor::full(&[c], gamma));
    let bv = g.input(Tensor::full(&[c], beta));
    let rm = vec![0.0; c];
    let rv = vec![1.0; c];
    g.batch_norm(x, gv, bv, Some((&rm, &rv)), None)
}

#[test]
fn batchnorm_already_normalized() {
    let data = vec![-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(Tensor::from_vec(&[4, 2], data.clone()).unwrap());
    let y = bn_graph(&mut g, x, 2, 1.0, 0.0).unwrap();
    // (1 + eps)^(-1/2) shrink only
    assert!(max_abs_diff(g.data(y), &data) < 1e-5);
}

#[test]
fn batchnorm_zero_gamma_gives_beta() {
    let mut r = rng(8);
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(rand_tensor(&mut r, &[6, 3]));
    let y = bn_graph(&mut g, x, 3, 0.0, 5.0).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 5.0));
}

#[test]
fn batchnorm_moments() {
    let mut r = rng(9);
    let (b, c, h, w) = (3, 4, 5, 5);
    let data: Vec<f64> = (0..b * c * h * w)
        .map(|_| r.random_range(-30.0..30.0) + 7.0)
        .collect();
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(Tensor::from_vec(&[b, c, h, w], data).unwrap());
    let y = bn_graph(&mut g, x, c, 1.0, 0.0).unwrap();
    let yd = g.data(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|s| (0..h * w).map(move |i| (s * c + ch) * h * w + i))
            .map(|e| yd[e])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batchnorm_degenerate_batch() {
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.input(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    assert!(matches!(
        bn_graph(&mut g, x, 3, 1.0, 0.0),
        Err(Error::DegenerateVariance(_))
    ));
    let mut e = Graph::<f64>::new(Mode::Eval);
    let x = e.input(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = bn_graph(&mut e, x, 3, 1.0, 0.0).unwrap();
    let expect: Vec<f64> = [1.0, 2.0, 3.0]
        .iter()
        .map(|v| v / (1.0 + crate::BN_EPS).sqrt())
        .collect();
    assert!(max_abs_diff(e.data(y), &expect) < 1e-15);
}

#[test]
fn batchnorm_running_stats_update() {
    let mut store = ParamStore::<f64>::new();
    let rm = store.add_buffer("rm", Tensor::zeros(&[1]));
    let rv = store.add_buffer("rv", Tensor::full(&[1], 1.0));
    let count = store.add_buffer("n", Tensor::zeros(&[1]));
    let bufs = BnBuffers { mean: rm, var: rv, count };
    let step = |store: &mut ParamStore<f64>, data: Vec<f64>| {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(Tensor::from_vec(&[4, 1], data).unwrap());
        let gv = g.input(Tensor::full(&[1], 1.0));
        let bv = g.input(Tensor::zeros(&[1]));
        g.batch_norm(x, gv, bv, None, Some(bufs)).unwrap();
        g.commit_bn_stats(store, 0.9);
    };
    // first batch: mean 3, unbiased variance 14/3, copied outright
    step(&mut store, vec![1.0, 2.0, 3.0, 6.0]);
    assert_eq!(store.get(rm).item(), 3.0);
    assert!((store.get(rv).item() - 14.0 / 3.0).abs() < 1e-15);
    assert_eq!(store.get(count).item(), 1.0);
    // then exponential averaging: mean 1, unbiased variance 2/3
    step(&mut store, vec![0.0, 1.0, 1.0, 2.0]);
    assert!((store.get(rm).item() - (0.9 * 3.0 + 0.1 * 1.0)).abs() < 1e-15);
    assert!((store.get(rv).item() - (0.9 * 14.0 / 3.0 + 0.1 * 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(store.get(count).item(), 2.0);
}

#[test]
fn batchnorm_gradients() {
    let mut r = rng(10);
    check_op_grad(rand_tensor(&mut r, &[5, 3]), |g, x| {
        let gv = g.input(Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap());
        let bv = g.input(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        g.batch_norm(x, gv, bv, None, None).unwrap()
    });
    check_op_grad(rand_tensor(&mut r, &[2, 2, 3, 3]), |g, x| {
        let gv = g.input(Tensor::from_vec(&[2], vec![0.7, 1.3]).unwrap());
        let bv = g.input(Tensor::zeros(&[2]));
        g.batch_norm(x, gv, bv, None, None).unwrap()
    });
}

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let x = g.input(Tensor::from_vec(&[3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = g.relu(x);
    let s = g.sigmoid(x);
    let t = g.tanh(x);
    assert_eq!(g.data(r), &[0.0, 2.0, 0.0]);
    assert_eq!(g.data(s)[2], 0.5);
    assert_eq!(g.data(t)[2], 0.0);
}

#[test]
fn sigmoid_symmetry() {
    let mut r = rng(11);
    let xs: Vec<f64> = (0..100).map(|_| r.random_range(-40.0..40.0)).collect();
    let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
    let mut g = Graph::<f64>::new(Mode::Eval);
    let a = g.input(Tensor::from_vec(&[100], xs).unwrap());
    let b = g.input(Tensor::from_vec(&[100], neg).unwrap());
    let (sa, sb) = (g.sigmoid(a), g.sigmoid(b));
    for (p, q) in g.data(sa).iter().zip(g.data(sb)) {
        assert!((p + q - 1.0).abs() < 1e-12);
    }
}

#[test]
fn activation_gradients() {
    let mut r = rng(12);
    for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
        check_op_grad(rand_tensor(&mut r, &[3, 4]), move |g, x| g.activation(x, kind));
    }
}

#[test]
fn cross_entropy_uniform_and_confident() {
    let mut g = Graph::<f64>::new(Mode::Eval);
    let u = g.input(Tensor::full(&[1, 4], 0.3));
    let l = g.softmax_cross_entropy(u, &[2]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
    let c = g.input(Tensor::from_vec(&[1, 4], vec![0.0, 50.0, 0.0, 0.0]).unwrap());
    let l = g.softmax_cross_entropy(c, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-20);
    assert!(matches!(
        g.softmax_cross_entropy(c, &[4]),
        Err(Error::Index(_))
    ));
}

#[test]
fn cross_entropy_matches_naive() {
    let mut r = rng(13);
    let logits = rand_tensor(&mut r, &[3, 5]);
    let targets = [4, 0, 2];
    let mut oracle = 0.0;
    for (row, &t) in targets.iter().enumerate() {
        let l = &logits.data()[row * 5..row * 5 + 5];
        let z: f64 = l.iter().map(|v| v.exp()).sum();
        oracle -= (l[t].exp() / z).ln();
    }
    oracle /= 3.0;
    let mut g = Graph::new(Mode::Eval);
    let lv = g.input(logits.clone());
    let loss = g.softmax_cross_entropy(lv, &targets).unwrap();
    assert!((g.value(loss).item() - oracle).abs() < 1e-12);

    let numeric = numeric_grad(&logits, |t| {
        let mut g = Graph::new(Mode::Eval);
        let lv = g.input(t.clone());
        let loss = g.softmax_cross_entropy(lv, &targets).unwrap();
        g.value(loss).item()
    });
    let mut g = Graph::new(Mode::Train);
    let lv = g.leaf(logits.with_grad());
    let loss = g.softmax_cross_entropy(lv, &targets).unwrap();
    g.backward(loss).unwrap();
    assert!(max_abs_diff(g.grad(lv).unwrap(), &numeric) < 1e-8);
}

#[test]
fn backward_simple_sums() {
    let mut r = rng(14);
    let x = rand_tensor(&mut r, &[2, 3]);
    let mut g = Graph::new(Mode::Train);
    let xv = g.leaf(x.clone().with_grad());
    let s = g.sum(xv);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[1.0; 6]);

    let mut g = Graph::new(Mode::Train);
    let xv = g.leaf(x.clone().with_grad());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let twice: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.grad(xv).unwrap(), twice.as_slice());
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new(Mode::Train);
    let x = g.leaf(Tensor::full(&[2], 1.0).with_grad());
    assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphReused)));
}

#[test]
fn unreached_parameters_get_zero_grad() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add_param("used", Tensor::full(&[2], 3.0));
    let unused = store.add_param("unused", Tensor::full(&[3], 1.0));
    let mut g = Graph::new(Mode::Train);
    let u = g.param(&store, used);
    let s = g.sum(u);
    g.backward(s).unwrap();
    g.write_param_grads(&mut store);
    assert_eq!(store.get(used).grad.as_deref(), Some(&[1.0, 1.0][..]));
    assert_eq!(store.get(unused).grad.as_deref(), Some(&[0.0; 3][..]));
}

#[test]
fn structural_op_gradients() {
    let mut r = rng(15);
    check_op_grad(rand_tensor(&mut r, &[5, 3]), |g, x| {
        g.gather_rows(x, &[4, 0, 4, 2]).unwrap()
    });
    check_op_grad(rand_tensor(&mut r, &[6, 2]), |g, x| {
        g.segment_max(x, &[0, 2, 3, 6]).unwrap()
    });
    check_op_grad(rand_tensor(&mut r, &[4, 2]), |g, x| {
        let a = g.slice_rows(x, 0, 3).unwrap();
        let b = g.slice_rows(x, 1, 4).unwrap();
        let c = g.concat_cols(&[a, b, a]).unwrap();
        let d = g.slice_rows(x, 2, 4).unwrap();
        let e = g.concat_cols(&[d, d, d]).unwrap();
        g.concat_rows(c, e).unwrap()
    });
    check_op_grad(rand_tensor(&mut r, &[2, 3]), |g, x| {
        g.scatter(x, &[7, 0, 3, 5, 1, 9], &[2, 5]).unwrap()
    });
    let t = rand_tensor(&mut r, &[2, 9]);
    check_op_grad(rand_tensor(&mut r, &[5, 3]), |g, x| {
        let tv = g.input(t.clone());
        g.transform_points(x, tv, &[0, 2, 5]).unwrap()
    });
    let p = rand_tensor(&mut r, &[5, 3]);
    check_op_grad(rand_tensor(&mut r, &[2, 9]), |g, t| {
        let pv = g.input(p.clone());
        g.transform_points(pv, t, &[0, 3, 5]).unwrap()
    });
    check_op_grad(rand_tensor(&mut r, &[3, 4]), |g, x| {
        let b = g.input(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.add_bias(x, b).unwrap();
        let z = g.one_minus(y);
        let w = g.sub(z, x).unwrap();
        let v = g.add(w, y).unwrap();
        g.scale(v, -1.5)
    });
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(16);
    let x = rand_tensor(&mut r, &[2, 3, 6, 6]);
    let k = rand_tensor(&mut r, &[4, 3, 3, 3]);
    let run = || {
        let mut g = Graph::new(Mode::Train);
        let (xv, kv) = (g.input(x.clone()), g.input(k.clone()));
        let c = g.conv2d(xv, kv, 1, 1).unwrap();
        let gv = g.input(Tensor::full(&[4], 1.0));
        let bv = g.input(Tensor::zeros(&[4]));
        let n = g.batch_norm(c, gv, bv, None, None).unwrap();
        let p = g.maxpool2d(n, 2, 2).unwrap();
        g.data(p).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(17);
    let logits = rand_tensor(&mut r, &[20, 7]);
    let mut out = vec![0.0; 7];
    for row in logits.data().chunks(7) {
        let scaled: Vec<f64> = row.iter().map(|v| v * 30.0).collect();
        kernels::softmax_row(&scaled, &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn pooled_and_convolved_shapes_follow_floor_formula(
        h in 1usize..12, w in 1usize..12, k in 1usize..5, stride in 1usize..4, pad in 0usize..3,
    ) {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let x = g.input(Tensor::zeros(&[1, 2, h, w]));
        let kern = g.input(Tensor::zeros(&[3, 2, k, k]));
        match (window_out(h, k, stride, pad), window_out(w, k, stride, pad)) {
            (Some(ho), Some(wo)) => {
                prop_assert_eq!(ho, (h + 2 * pad - k) / stride + 1);
                let y = g.conv2d(x, kern, stride, pad).unwrap();
                prop_assert_eq!(g.shape(y), &[1, 3, ho, wo][..]);
            }
            _ => prop_assert!(g.conv2d(x, kern, stride, pad).is_err()),
        }
        if k <= h && k <= w {
            let y = g.maxpool2d(x, k, stride).unwrap();
            prop_assert_eq!(g.shape(y), &[1, 2, (h - k) / stride + 1, (w - k) / stride + 1][..]);
        } else {
            prop_assert!(g.maxpool2d(x, k, stride).is_err());
        }
    }
}
