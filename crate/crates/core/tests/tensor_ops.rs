//! Tensor primitives against naive loop oracles and finite differences.

use proptest::prelude::*;
use ptl_core::tensor::{Graph, NodeId, Pointwise, Tensor};
use ptl_core::training::GradCheck;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng).unwrap()
}

/// Quadruple-loop cross-correlation in f64.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

/// Vector-Jacobian product of the loop convolution with respect to its input:
/// scatters `u` (shaped like the conv output) back through the same loops.
/// Weight is read as `[C_in(=conv out), C_out(=conv in), kH, kW]`.
fn conv_vjp_oracle(
    u: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [n, ci, uh, uw] = [u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]];
    let [_, co, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let h = (uh - 1) * stride + kh - 2 * pad;
    let wd = (uw - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * co * h * wd];
    for s in 0..n {
        for a in 0..ci {
            for oy in 0..uh {
                for ox in 0..uw {
                    let g = u.data()[((s * ci + a) * uh + oy) * uw + ox];
                    for b in 0..co {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wv = w.data()[((a * co + b) * kh + ki) * kw + kj];
                                out[((s * co + b) * h + iy as usize) * wd + ix as usize] += g * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![n, co, h, wd], out)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(x, w, Some(b), stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv2d_sum_of_nine_ones() {
    let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let b = Tensor::<f64>::zeros(&[1]).unwrap();
    let y = run_conv(&x, &w, &b, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let x = rand_tensor(&[2, 1, 4, 5], 1);
    let w = Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap();
    let b = Tensor::<f64>::zeros(&[1]).unwrap();
    assert!(run_conv(&x, &w, &b, 1, 0).bit_eq(&x));
}

#[test]
fn conv2d_matches_loop_oracle() {
    let x = rand_tensor(&[2, 3, 5, 5], 2);
    let w = rand_tensor(&[4, 3, 3, 3], 3);
    let b = rand_tensor(&[4], 4);
    let y = run_conv(&x, &w, &b, 1, 1);
    let (shape, expect) = conv_oracle(&x, &w, b.data(), 1, 1);
    assert_eq!(y.shape(), &shape[..]);
    assert!(max_diff(y.data(), &expect) < 1e-10);
}

#[test]
fn conv2d_shape_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
    let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]).unwrap());
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 5, 3, 3]"), "{err}");

    let w = g.constant(Tensor::zeros(&[3, 2, 5, 5]).unwrap());
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]).unwrap());
    let bad_bias = g.constant(Tensor::zeros(&[2]).unwrap());
    assert!(g.conv2d(x, w, Some(bad_bias), 1, 1).is_err());
    assert!(g.conv2d(x, w, None, 0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_agrees_with_loop_oracle_on_small_shapes(
        n in 1usize..=3, c in 1usize..=4, o in 1usize..=4,
        h in 1usize..=6, w in 1usize..=6, k in 1usize..=3,
        stride in 1usize..=2, pad in 0usize..=2, seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = rand_tensor(&[n, c, h, w], seed);
        let wt = rand_tensor(&[o, c, k, k], seed + 1);
        let b = rand_tensor(&[o], seed + 2);
        let y = run_conv(&x, &wt, &b, stride, pad);
        let (shape, expect) = conv_oracle(&x, &wt, b.data(), stride, pad);
        prop_assert_eq!(y.shape(), &shape[..]);
        prop_assert!(max_diff(y.data(), &expect) < 1e-10);
    }

    #[test]
    fn concat_slice_round_trip_is_bit_exact(
        n in 1usize..=3, ca in 1usize..=4, cb in 1usize..=4, h in 1usize..=5, w in 1usize..=5, seed in 0u64..1000,
    ) {
        let mut g = Graph::<f32>::new();
        let a = rand_tensor(&[n, ca, h, w], seed).cast::<f32>();
        let b = rand_tensor(&[n, cb, h, w], seed + 7).cast::<f32>();
        let (ia, ib) = (g.constant(a.clone()), g.constant(b.clone()));
        let cat = g.concat_channels(ia, ib).unwrap();
        let sa = g.slice_channels(cat, 0, ca).unwrap();
        let sb = g.slice_channels(cat, ca, cb).unwrap();
        prop_assert!(g.value(sa).bit_eq(&a));
        prop_assert!(g.value(sb).bit_eq(&b));
    }
}

fn run_conv_t(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, w) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv_transpose2d(x, w, None, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_transpose_stamps_kernel_once() {
    let x = Tensor::<f64>::full(&[1, 1, 1, 1], 2.0).unwrap();
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let y = run_conv_t(&x, &w, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_transpose_of_zero_is_zero() {
    let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]).unwrap();
    let w = rand_tensor(&[3, 2, 3, 3], 9);
    assert!(run_conv_t(&x, &w, 2, 1).is_all_zero());
}

#[test]
fn conv_transpose_matches_conv_vjp_oracle() {
    for (stride, pad, shape) in [(1, 1, [2, 3, 4, 5]), (2, 1, [1, 2, 3, 3]), (2, 0, [2, 2, 2, 3])] {
        let x = rand_tensor(&shape, 11 + stride as u64);
        let w = rand_tensor(&[shape[1], 4, 3, 3], 12);
        let y = run_conv_t(&x, &w, stride, pad);
        let (eshape, expect) = conv_vjp_oracle(&x, &w, stride, pad);
        assert_eq!(y.shape(), &eshape[..]);
        assert!(max_diff(y.data(), &expect) < 1e-10);
    }
}

#[test]
fn conv_transpose_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]).unwrap());
    assert!(g.conv_transpose2d(x, w, None, 1, 1).is_err());
}

fn run_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(x, w, Some(b)).unwrap();
    g.value(y).clone()
}

#[test]
fn linear_identity_and_bias_only() {
    let x = rand_tensor(&[3, 4], 20);
    let eye = Tensor::<f64>::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).unwrap();
    let zero_b = Tensor::<f64>::zeros(&[4]).unwrap();
    assert!(run_linear(&x, &eye, &zero_b).bit_eq(&x));

    let b = rand_tensor(&[4], 21);
    let zero_w = Tensor::<f64>::zeros(&[4, 4]).unwrap();
    let y = run_linear(&x, &zero_w, &b);
    for row in y.data().chunks(4) {
        assert_eq!(row, b.data());
    }
}

#[test]
fn linear_matches_loop_matmul() {
    let x = rand_tensor(&[3, 4], 22);
    let w = rand_tensor(&[5, 4], 23);
    let b = rand_tensor(&[5], 24);
    let y = run_linear(&x, &w, &b);
    let mut expect = vec![0.0; 15];
    for n in 0..3 {
        for o in 0..5 {
            let mut acc = b.data()[o];
            for f in 0..4 {
                acc += x.data()[n * 4 + f] * w.data()[o * 4 + f];
            }
            expect[n * 5 + o] = acc;
        }
    }
    assert_eq!(y.shape(), &[3, 5]);
    assert!(max_diff(y.data(), &expect) < 1e-12);
}

#[test]
fn linear_feature_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 4]).unwrap());
    let w = g.constant(Tensor::zeros(&[5, 3]).unwrap());
    assert!(g.linear(x, w, None).is_err());
}

#[test]
fn pointwise_values() {
    let mut g = Graph::<f64>::new();
    let zero = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let s = g.sigmoid(zero).unwrap();
    let t = g.tanh(zero).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    assert!(g.value(t).data().iter().all(|&v| v == 0.0));

    let one = g.constant(Tensor::ones(&[1]).unwrap());
    let s1 = g.sigmoid(one).unwrap();
    let t1 = g.tanh(one).unwrap();
    // 1/(1+e^-1) and (e^2-1)/(e^2+1) from their closed forms.
    let e = std::f64::consts::E;
    assert!((g.value(s1).data()[0] - 1.0 / (1.0 + 1.0 / e)).abs() < 1e-12);
    assert!((g.value(s1).data()[0] - 0.7310585786).abs() < 1e-9);
    assert!((g.value(t1).data()[0] - (e * e - 1.0) / (e * e + 1.0)).abs() < 1e-12);
    assert!((g.value(t1).data()[0] - 0.7615941560).abs() < 1e-9);

    let x = g.constant(rand_tensor(&[2, 3], 30));
    let ones = g.constant(Tensor::ones(&[2, 3]).unwrap());
    let h = g.hadamard(x, ones).unwrap();
    assert!(g.value(h).bit_eq(g.value(x)));
}

#[test]
fn pointwise_shape_and_arity_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[3, 2]).unwrap());
    assert!(g.add(a, b).is_err());
    assert!(g.hadamard(a, b).is_err());
    assert!(g.pointwise(Pointwise::Add, a, None).is_err());
    assert!(g.pointwise(Pointwise::Sigmoid, a, Some(a)).is_err());
}

#[test]
fn concat_doubles_channels() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_tensor(&[2, 3, 2, 2], 31));
    let c = g.concat_channels(x, x).unwrap();
    assert_eq!(g.shape(c), &[2, 6, 2, 2]);
    let first = g.slice_channels(c, 0, 3).unwrap();
    assert!(g.value(first).bit_eq(g.value(x)));

    let y = g.constant(Tensor::zeros(&[2, 3, 3, 2]).unwrap());
    assert!(g.concat_channels(x, y).is_err());
}

#[test]
fn concat_sum_gradient_is_ones() {
    let mut g = Graph::<f64>::new();
    let a = g.param(rand_tensor(&[2, 2, 3, 3], 32));
    let b = g.param(rand_tensor(&[2, 1, 3, 3], 33));
    let c = g.concat_channels(a, b).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
    let report = GradCheck::default()
        .run("concat", &[rand_tensor(&[2, 2, 3, 3], 32), rand_tensor(&[2, 1, 3, 3], 33)], |g, ids| {
            let c = g.concat_channels(ids[0], ids[1])?;
            g.sum(c)
        })
        .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn concat_rows_stacks_and_splits_gradients() {
    let mut g = Graph::<f64>::new();
    let a = g.param(rand_tensor(&[2, 3, 1, 1], 34));
    let b = g.param(rand_tensor(&[1, 3, 1, 1], 35));
    let c = g.concat_rows(&[a, b, a]).unwrap();
    assert_eq!(g.shape(c), &[5, 3, 1, 1]);
    let expect: Vec<f64> = [a, b, a].iter().flat_map(|&id| g.value(id).data().to_vec()).collect();
    assert_eq!(g.value(c).data(), expect.as_slice());

    // A part used twice collects both row blocks.
    let w = g.constant(rand_tensor(&[5, 3, 1, 1], 36));
    let p = g.hadamard(c, w).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    let wd = g.value(w).data();
    let ga: Vec<f64> = (0..6).map(|i| wd[i] + wd[9 + i]).collect();
    assert_eq!(grads.get(a).unwrap().data(), ga.as_slice());
    assert_eq!(grads.get(b).unwrap().data(), &wd[6..9]);

    let d = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
    assert!(g.concat_rows(&[a, d]).is_err());
    assert!(g.concat_rows(&[]).is_err());
}

#[test]
fn global_avg_pool_cases() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2, 3, 4, 5], 1.25).unwrap());
    let p = g.global_avg_pool(c).unwrap();
    assert_eq!(g.shape(p), &[2, 3]);
    assert!(g.value(p).data().iter().all(|&v| v == 1.25));

    let x1 = rand_tensor(&[2, 3, 1, 1], 34);
    let i = g.constant(x1.clone());
    let p = g.global_avg_pool(i).unwrap();
    assert_eq!(g.value(p).data(), x1.data());

    let x = rand_tensor(&[2, 3, 4, 5], 35);
    let i = g.constant(x.clone());
    let p = g.global_avg_pool(i).unwrap();
    for (k, &v) in g.value(p).data().iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..20 {
            acc += x.data()[k * 20 + j];
        }
        assert!((v - acc / 20.0).abs() < 1e-14);
    }
}

fn ce(logits: Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = g.softmax_cross_entropy(l, labels).unwrap();
    g.value(loss).item().unwrap()
}

#[test]
fn cross_entropy_cases() {
    let uniform = Tensor::<f64>::full(&[3, 10], 0.3).unwrap();
    assert!((ce(uniform, &[0, 4, 9]) - 10f64.ln()).abs() < 1e-12);

    let mut sat = vec![0.0; 5];
    sat[2] = 1000.0;
    assert!(ce(Tensor::new(&[1, 5], sat).unwrap(), &[2]).abs() < 1e-12);

    // Direct log-sum-exp without stabilisation is exact enough for |logits| <= 1.
    let logits = rand_tensor(&[4, 5], 40);
    let labels = [0, 3, 4, 1];
    let mut expect = 0.0;
    for (row, &l) in logits.data().chunks(5).zip(&labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect += -(row[l].exp() / z).ln();
    }
    expect /= 4.0;
    assert!((ce(logits, &labels) - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    assert!(matches!(
        g.softmax_cross_entropy(l, &[0, 3]),
        Err(ptl_core::Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn l1_cases() {
    let mut g = Graph::<f64>::new();
    let a = rand_tensor(&[3, 4], 50);
    let ia = g.constant(a.clone());
    let same = g.l1_loss(ia, ia).unwrap();
    assert_eq!(g.value(same).item(), Some(0.0));

    let ib = g.constant(a.map(|v| v - 1.0));
    let one = g.l1_loss(ia, ib).unwrap();
    assert!((g.value(one).item().unwrap() - 1.0).abs() < 1e-12);

    let b = rand_tensor(&[3, 4], 51);
    let ib = g.constant(b.clone());
    let l = g.l1_loss(ia, ib).unwrap();
    let expect: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 12.0;
    assert!((g.value(l).item().unwrap() - expect).abs() < 1e-14);

    let bad = g.constant(Tensor::zeros(&[4, 3]).unwrap());
    assert!(g.l1_loss(ia, bad).is_err());
}

#[test]
fn l1_subgradient_is_zero_at_ties() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let b = g.param(Tensor::new(&[3], vec![1.0, 1.0, 4.0]).unwrap());
    let l = g.l1_loss(a, b).unwrap();
    let grads = g.backward(l).unwrap();
    let third = 1.0 / 3.0;
    assert_eq!(grads.get(a).unwrap().data(), &[0.0, third, -third]);
    assert_eq!(grads.get(b).unwrap().data(), &[0.0, -third, third]);
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.param(rand_tensor(&[2, 3], 60));
    let unused = g.param(rand_tensor(&[4], 61));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(unused).unwrap().is_all_zero());

    assert!(matches!(
        g.backward(x),
        Err(ptl_core::Error::NonScalarRoot(shape)) if shape == vec![2, 3]
    ));
}

#[test]
fn shared_consumer_gradients_accumulate() {
    // y = sum(tanh(x)) + sum(x * x): dy/dx = 1 - tanh^2 + 2x.
    let x0 = rand_tensor(&[3, 2], 62);
    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let t = g.tanh(x).unwrap();
    let sq = g.hadamard(x, x).unwrap();
    let st = g.sum(t).unwrap();
    let ss = g.sum(sq).unwrap();
    let y = g.add(st, ss).unwrap();
    let grads = g.backward(y).unwrap();
    for (&gv, &xv) in grads.get(x).unwrap().data().iter().zip(x0.data()) {
        let expect = 1.0 - xv.tanh().powi(2) + 2.0 * xv;
        assert!((gv - expect).abs() < 1e-14);
    }
}

// ---- finite-difference checks of every differentiable primitive ----

fn check(label: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[NodeId]) -> ptl_core::Result<NodeId>) {
    let report = GradCheck::default().run(label, inputs, build).unwrap();
    assert!(report.passed(), "{label}: {report:?}");
    assert!(report.probes >= inputs.iter().map(|t| t.len().min(10)).sum::<usize>());
}

/// Weighted sum so that every output coordinate carries a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> ptl_core::Result<NodeId> {
    let w = g.constant(rand_tensor(g.shape(y), seed));
    let p = g.hadamard(y, w)?;
    g.sum(p)
}

#[test]
fn fd_conv2d() {
    let inputs = [rand_tensor(&[2, 3, 5, 5], 70), rand_tensor(&[4, 3, 3, 3], 71), rand_tensor(&[4], 72)];
    check("conv2d", &inputs, |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
        weighted_sum(g, y, 73)
    });
    check("conv2d_1x1", &inputs[..1].iter().cloned().chain([rand_tensor(&[2, 3, 1, 1], 74)]).collect::<Vec<_>>(), |g, ids| {
        let y = g.conv2d(ids[0], ids[1], None, 1, 0)?;
        weighted_sum(g, y, 75)
    });
}

#[test]
fn fd_conv_transpose2d() {
    let inputs = [rand_tensor(&[2, 3, 3, 4], 80), rand_tensor(&[3, 2, 3, 3], 81), rand_tensor(&[2], 82)];
    check("conv_transpose2d", &inputs, |g, ids| {
        let y = g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
        weighted_sum(g, y, 83)
    });
}

#[test]
fn fd_linear() {
    let inputs = [rand_tensor(&[3, 4], 90), rand_tensor(&[5, 4], 91), rand_tensor(&[5], 92)];
    check("linear", &inputs, |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
        weighted_sum(g, y, 93)
    });
}

#[test]
fn fd_pointwise() {
    let inputs = [rand_tensor(&[2, 3, 2, 2], 100), rand_tensor(&[2, 3, 2, 2], 101)];
    for op in [Pointwise::Sigmoid, Pointwise::Tanh, Pointwise::Relu] {
        check(&format!("{op:?}"), &inputs[..1], |g, ids| {
            let y = g.pointwise(op, ids[0], None)?;
            weighted_sum(g, y, 102)
        });
    }
    for op in [Pointwise::Add, Pointwise::Hadamard] {
        check(&format!("{op:?}"), &inputs, |g, ids| {
            let y = g.pointwise(op, ids[0], Some(ids[1]))?;
            weighted_sum(g, y, 103)
        });
    }
}

#[test]
fn fd_shape_ops() {
    let x = rand_tensor(&[2, 3, 5, 4], 110);
    check("slice", std::slice::from_ref(&x), |g, ids| {
        let y = g.slice_channels(ids[0], 1, 2)?;
        weighted_sum(g, y, 111)
    });
    check("global_avg_pool", std::slice::from_ref(&x), |g, ids| {
        let y = g.global_avg_pool(ids[0])?;
        weighted_sum(g, y, 112)
    });
    check("avg_pool2d", std::slice::from_ref(&x), |g, ids| {
        let y = g.avg_pool2d(ids[0], 2)?;
        weighted_sum(g, y, 113)
    });
    check("batch_mean", std::slice::from_ref(&x), |g, ids| {
        let y = g.batch_mean(ids[0])?;
        weighted_sum(g, y, 114)
    });
    check("batch_broadcast", &[rand_tensor(&[1, 2, 3, 3], 115)], |g, ids| {
        let y = g.batch_broadcast(ids[0], 3)?;
        weighted_sum(g, y, 116)
    });
    check("scale", &[x], |g, ids| {
        let y = g.scale(ids[0], -0.7)?;
        weighted_sum(g, y, 117)
    });
}

#[test]
fn fd_losses() {
    check("cross_entropy", &[rand_tensor(&[4, 5], 120)], |g, ids| {
        g.softmax_cross_entropy(ids[0], &[1, 0, 4, 2])
    });
    check("l1", &[rand_tensor(&[3, 6], 121), rand_tensor(&[3, 6], 122)], |g, ids| g.l1_loss(ids[0], ids[1]));
}

#[test]
fn avg_pool_uses_ceil_extents() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64).unwrap());
    let p = g.avg_pool2d(x, 2).unwrap();
    assert_eq!(g.shape(p), &[1, 1, 2, 2]);
    // windows: {0,1,3,4}, {2,5}, {6,7}, {8}
    assert_eq!(g.value(p).data(), &[2.0, 3.5, 6.5, 8.0]);
}
