use chroma_core::tensor::{conv_transpose2d_output_extent, BatchNormMode, Graph, RunningStats, Tensor};
use chroma_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Six nested loops, straight from the definition of a zero-padded
/// cross-correlation.
fn direct_conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0f64; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((oc * c + ic) * ks + ky) * ks + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor, Error> {
    let mut g = Graph::new();
    let (x, k, b) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(x, k, b, stride, pad)?;
    Ok(g.value(y).clone())
}

fn conv_t(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor, Error> {
    let mut g = Graph::new();
    let (x, k, b) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv_transpose2d(x, k, b, stride, pad)?;
    Ok(g.value(y).clone())
}

#[test]
fn conv2d_sum_of_ones() {
    let y = conv2d(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0).unwrap();
    assert_eq!(y.shape(), [1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[2, 1, 5, 6]);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let k = random(&mut rng, &[4, 3, 3, 3]);
    let b = random(&mut rng, &[4]);
    let fast = conv2d(&x, &k, &b, 2, 1).unwrap();
    let slow = direct_conv2d(&x, &k, &b, 2, 1);
    assert_eq!(fast.shape(), [2, 4, 4, 4]);
    assert!(fast.max_abs_diff(&slow) <= 1e-5);
}

#[test]
fn conv2d_shape_errors_name_both_shapes() {
    let err = conv2d(&Tensor::zeros(&[1, 2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 0)
        .unwrap_err()
        .to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    assert!(conv2d(&Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 0).is_err());
    assert!(conv2d(&Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 1).is_ok());
    assert!(conv2d(&Tensor::zeros(&[1, 1, 4, 4]), &Tensor::zeros(&[1, 1, 3, 3]), &Tensor::zeros(&[2]), 1, 0).is_err());
}

#[test]
fn conv_transpose_single_tap_broadcast() {
    let v = 1.5;
    let w = Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let y = conv_t(&Tensor::full(&[1, 1, 1, 1], v), &w, &Tensor::zeros(&[1]), 2, 0).unwrap();
    assert_eq!(y.shape(), [1, 1, 2, 2]);
    let expected: Vec<f32> = w.data().iter().map(|k| k * v).collect();
    assert_eq!(y.data(), &expected[..]);
}

#[test]
fn conv_transpose_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 1, 4, 3]);
    let y = conv_t(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_transpose_is_adjoint_of_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // (h + 2p - k) divisible by s, so the transposed output covers the input.
    for &(h, k, s, p) in &[(9, 3, 2, 1), (8, 4, 2, 1), (5, 3, 1, 0), (5, 2, 3, 0)] {
        let x = random(&mut rng, &[2, 3, h, h]);
        let kern = random(&mut rng, &[4, 3, k, k]);
        let y = conv2d(&x, &kern, &Tensor::zeros(&[4]), s, p).unwrap();
        let r = random(&mut rng, y.shape());
        let back = conv_t(&r, &kern, &Tensor::zeros(&[3]), s, p).unwrap();
        assert_eq!(back.shape(), x.shape());
        let (lhs, rhs) = (y.dot(&r), x.dot(&back));
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1e-6), "{lhs} vs {rhs}");
    }
}

#[test]
fn batchnorm_constant_input_is_near_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 3, 2, 2], 4.2));
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let mut st = RunningStats::uninitialized(3);
    let y = g.batchnorm2d(x, gamma, beta, &mut st, BatchNormMode::Train, 1e-5, 0.1).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() <= 1e-3));
}

#[test]
fn batchnorm_zero_gamma_outputs_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[2, 2, 3, 3]));
    let gamma = g.constant(Tensor::zeros(&[2]));
    let beta = g.constant(Tensor::new(&[2], vec![0.25, -1.5]).unwrap());
    let mut st = RunningStats::uninitialized(2);
    let y = g.batchnorm2d(x, gamma, beta, &mut st, BatchNormMode::Train, 1e-5, 0.1).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let ch = (i / 9) % 2;
        assert_eq!(*v, [0.25, -1.5][ch]);
    }
}

#[test]
fn batchnorm_plus_minus_one() {
    // (x - μ)/√(σ² + eps) with μ = 0, σ² = 1, eps = 1e-5.
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 1, 1, 1], vec![-1.0, 1.0]).unwrap());
    let gamma = g.constant(Tensor::ones(&[1]));
    let beta = g.constant(Tensor::zeros(&[1]));
    let mut st = RunningStats::uninitialized(1);
    let y = g.batchnorm2d(x, gamma, beta, &mut st, BatchNormMode::Train, 1e-5, 0.1).unwrap();
    let out = g.value(y).data();
    assert!((out[0] as f64 + expected).abs() < 1e-6);
    assert!((out[1] as f64 - expected).abs() < 1e-6);
    // Running stats move 10% of the way toward the batch: mean 0, unbiased var 2.
    assert!(st.initialized);
    assert_eq!(st.mean, [0.0]);
    assert!((st.var[0] - (0.9 + 0.2)).abs() < 1e-6);
}

#[test]
fn batchnorm_eval_requires_initialized_stats() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 2, 2, 2]));
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let mut st = RunningStats::uninitialized(2);
    let err = g.batchnorm2d(x, gamma, beta, &mut st, BatchNormMode::Eval, 1e-5, 0.1).unwrap_err();
    assert!(matches!(err, Error::UninitializedStats));
    assert!(g.batchnorm2d(x, gamma, beta, &mut st, BatchNormMode::Train, 0.0, 0.1).is_err());
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[3], vec![2.0, -1.0, 0.0]).unwrap());
    let l = g.leaky_relu(x, 0.2).unwrap();
    assert_eq!(g.value(l).data(), [2.0, -0.2, 0.0]);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), [2.0, 0.0, 0.0]);
    let t = g.tanh(x).unwrap();
    assert_eq!(g.value(t).data()[2], 0.0);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[2], 0.5);
}

fn bce(logit: f32, target: f32) -> f32 {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(logit));
    let l = g.bce_with_logits(z, &Tensor::scalar(target)).unwrap();
    g.value(l).item()
}

#[test]
fn bce_reference_values() {
    let ln2 = std::f32::consts::LN_2;
    assert!((bce(0.0, 1.0) - ln2).abs() < 1e-6);
    assert!((bce(0.0, 0.9) - ln2).abs() < 1e-6);
    assert!(bce(30.0, 1.0) <= 1e-9);
    assert!(bce(1e4, 1.0).is_finite() && bce(-1e4, 0.0).is_finite());
    assert!((bce(1e4, 0.0) - 1e4).abs() < 1.0);
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2]));
    assert!(g.bce_with_logits(z, &Tensor::zeros(&[3])).is_err());
    assert!(g.bce_with_logits(z, &Tensor::full(&[2], 1.5)).is_err());
}

#[test]
fn l1_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[3, 7]);
    let b = random(&mut rng, &[3, 7]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let same = g.l1_loss(va, va).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    let shifted = g.constant(Tensor::from_fn(&[3, 7], |i| a.data()[i] + 0.5));
    let off = g.l1_loss(shifted, va).unwrap();
    assert!((g.value(off).item() - 0.5).abs() < 1e-6);
    let l = g.l1_loss(va, vb).unwrap();
    let mut oracle = 0.0f64;
    for i in 0..a.len() {
        oracle += (a.data()[i] as f64 - b.data()[i] as f64).abs();
    }
    oracle /= a.len() as f64;
    assert!((g.value(l).item() as f64 - oracle).abs() < 1e-6);
    let wrong = g.constant(Tensor::zeros(&[21]));
    assert!(g.l1_loss(va, wrong).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f32));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
}

#[test]
fn backward_of_l1_against_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_fn(&[4, 5], |i| 0.1 + i as f32));
    let zero = g.constant(Tensor::zeros(&[4, 5]));
    let l = g.l1_loss(x, zero).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0 / 20.0));
    assert!(grads.get(zero).is_none());
}

#[test]
fn backward_accumulates_over_fan_out() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[3], 2.0));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap();
    // d/dx (x² + x) = 2x + 1
    assert_eq!(grads.get(x).unwrap().data(), [5.0, 5.0, 5.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(s)) if s == [2]));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], f32::MAX));
    assert!(matches!(g.add(x, x), Err(Error::NonFinite { op: "add" })));
}

#[test]
fn conv_backward_is_thread_count_independent() {
    // Batch larger than one chunk, so the reduction crosses chunk boundaries.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[19, 2, 6, 6]);
    let k = random(&mut rng, &[3, 2, 4, 4]);
    let run = || {
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.param(x.clone()), g.param(k.clone()), g.param(Tensor::zeros(&[3])));
        let y = g.conv2d(xv, kv, bv, 2, 1).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        (grads.get(xv).unwrap().clone(), grads.get(kv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity_holds(seed in any::<u64>(), h in 3usize..9, k in 1usize..4, s in 1usize..3, p in 0usize..2, c in 1usize..3, o in 1usize..3) {
        prop_assume!(h + 2 * p >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Choose h so the transposed output restores the full extent.
        let h = ((h + 2 * p - k) / s) * s + k - 2 * p;
        prop_assume!(h >= 1);
        let x = random(&mut rng, &[1, c, h, h]);
        let kern = random(&mut rng, &[o, c, k, k]);
        let y = conv2d(&x, &kern, &Tensor::zeros(&[o]), s, p).unwrap();
        let r = random(&mut rng, y.shape());
        let back = conv_t(&r, &kern, &Tensor::zeros(&[c]), s, p).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let (lhs, rhs) = (y.dot(&r), x.dot(&back));
        prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1e-3));
    }

    #[test]
    fn conv_then_transpose_restores_extent(h in 1usize..20, k in 1usize..5, s in 1usize..4, p in 0usize..3) {
        prop_assume!(h + 2 * p >= k && (h + 2 * p - k) % s == 0);
        let out = (h + 2 * p - k) / s + 1;
        prop_assert_eq!(conv_transpose2d_output_extent(out, k, s, p), Some(h));
    }
}
