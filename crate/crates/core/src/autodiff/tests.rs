use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-nested-loop convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[o];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (vec![n, co, oh, ow], out)
}

fn naive_pool(x: &Tensor<f64>, k: usize, s: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::new();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x.data()[p * h * w + (y * s + ky) * w + xx * s + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_of_ones() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
    let k = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0)).unwrap();
    let b = t.constant(Tensor::zeros(vec![1])).unwrap();
    let y = t.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
    assert!(t.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = rand_tensor(&mut rng, &[2, 1, 4, 5]);
    let mut t = Tape::<f64>::new();
    let x = t.constant(input.clone()).unwrap();
    let k = t.constant(Tensor::full(vec![1, 1, 1, 1], 1.0)).unwrap();
    let y = t.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(t.value(y).data(), input.data());
}

#[test]
fn conv_strided_padded_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let (shape, expected) = naive_conv(&x, &w, b.data(), 2, 1);
    let mut t = Tape::<f64>::new();
    let (xv, wv, bv) = (t.constant(x).unwrap(), t.constant(w).unwrap(), t.constant(b).unwrap());
    let y = t.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
    assert_eq!(t.shape(y), &shape[..]);
    assert_eq!(shape, vec![1, 3, 3, 3]);
    assert!(max_abs_diff(&t.value(y).to_f64_vec(), &expected) < 1e-6);
}

#[test]
fn conv_shape_errors_name_dimension() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(vec![1, 3, 4, 4])).unwrap();
    let k = t.constant(Tensor::zeros(vec![2, 2, 3, 3])).unwrap();
    let err = t.conv2d(x, k, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
    let k = t.constant(Tensor::zeros(vec![2, 3, 7, 3])).unwrap();
    let err = t.conv2d(x, k, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
    let k = t.constant(Tensor::zeros(vec![2, 3, 3, 3])).unwrap();
    assert!(t.conv2d(x, k, None, 0, 0).is_err());
}

#[test]
fn max_pool_of_four() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let y = t.max_pool2d(x, 2, 2, 0).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::full(vec![1, 1, 4, 4], 0.5)).unwrap();
    let y = t.max_pool2d(x, 2, 2, 0).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.5));
    let l = t.sum_all(y).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap();
    let mut expected = vec![0.0; 16];
    for idx in [0, 2, 8, 10] {
        expected[idx] = 1.0;
    }
    assert_eq!(g, &expected[..]);
}

#[test]
fn max_pool_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 1, 6, 6]);
    let expected = naive_pool(&x, 2, 2);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x).unwrap();
    let y = t.max_pool2d(xv, 2, 2, 0).unwrap();
    assert_eq!(t.value(y).to_f64_vec(), expected);
}

#[test]
fn leaky_relu_values_and_grads() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let y = t.leaky_relu(x, 0.2).unwrap();
    assert_eq!(t.value(y).data(), &[-0.2, 0.0, 2.0]);
    let y1 = t.leaky_relu(x, 1.0).unwrap();
    assert_eq!(t.value(y1).data(), t.value(x).data());
    assert!(t.leaky_relu(x, 0.0).is_err());

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap()).unwrap();
    let y = t.leaky_relu(x, 0.2).unwrap();
    let l = t.sum_all(y).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.2, 1.0]);

    // derivative at exactly zero is 1
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
    let y = t.leaky_relu(x, 0.2).unwrap();
    let l = t.sum_all(y).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0]);
}

#[test]
fn linear_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    let w = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let b = t.constant(Tensor::new(vec![2], vec![10.0, 10.0]).unwrap()).unwrap();
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[11.0, 12.0]);
    let y = t.linear(x, w, None).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0]);
    let bad = t.constant(Tensor::zeros(vec![3, 2])).unwrap();
    assert!(t.linear(x, bad, None).is_err());
}

#[test]
fn reductions() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let m = t.mean_all(x).unwrap();
    assert_eq!(t.value(m).item().unwrap(), 2.0);
    let same = t.mean(x, &[]).unwrap();
    assert_eq!(t.value(same).data(), t.value(x).data());

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
    let m = t.mean_all(x).unwrap();
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.25; 4]);

    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
    let rows = t.sum(x, &[1]).unwrap();
    assert_eq!(t.value(rows).data(), &[6.0, 15.0]);
    let cols = t.mean(x, &[0]).unwrap();
    assert_eq!(t.value(cols).data(), &[2.5, 3.5, 4.5]);
    assert!(t.sum(x, &[2]).is_err());
}

#[test]
fn softmax_ce_is_stable() {
    let mut t = Tape::<f32>::new();
    let z = t.param(Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap()).unwrap();
    let l = t.softmax_cross_entropy(z, &[0]).unwrap();
    assert!(t.value(l).item().unwrap().abs() < 1e-6);
    t.backward(l).unwrap();
    assert!(t.grad(z).unwrap().iter().all(|v| v.is_finite()));
    assert!(t.softmax_cross_entropy(z, &[2]).is_err());
}

#[test]
fn sigmoid_bce_at_zero_is_ln2() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
    let l = t.sigmoid_bce(z, &[0.5]).unwrap();
    assert!((t.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn smooth_l1_continuous_across_boundary() {
    let beta = 0.5;
    let eval = |x: f64| -> (f64, f64) {
        let mut t = Tape::<f64>::new();
        let p = t.param(Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
        let q = t.constant(Tensor::zeros(vec![1])).unwrap();
        let l = t.smooth_l1(p, q, beta).unwrap();
        t.backward(l).unwrap();
        (t.value(l).item().unwrap(), t.grad(p).unwrap()[0])
    };
    let h = 1e-7;
    let (below, gb) = eval(beta - h);
    let (above, ga) = eval(beta + h);
    let (at, _) = eval(beta);
    assert!((at - 0.25).abs() < 1e-12);
    assert!((below - at).abs() < 1e-6 && (above - at).abs() < 1e-6);
    assert!((gb - ga).abs() < 1e-6);
    // finite-difference slope on either side agrees with the analytic one
    let fd_below = (eval(beta - h).0 - eval(beta - 3.0 * h).0) / (2.0 * h);
    let fd_above = (eval(beta + 3.0 * h).0 - eval(beta + h).0) / (2.0 * h);
    assert!((fd_below - 1.0).abs() < 1e-5 && (fd_above - 1.0).abs() < 1e-5);
}

#[test]
fn grl_reverses_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
    let y = t.grl(x).unwrap();
    assert_eq!(t.value(y).data(), &[1.5, -2.0]);
    let up = t.constant(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap()).unwrap();
    let p = t.mul(y, up).unwrap();
    let l = t.sum_all(p).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[-0.5, 1.0]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
    let y = t.grl(x).unwrap();
    let y = t.grl(y).unwrap();
    let up = t.constant(Tensor::new(vec![2], vec![0.5, -1.0]).unwrap()).unwrap();
    let p = t.mul(y, up).unwrap();
    let l = t.sum_all(p).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.5, -1.0]);
}

#[test]
fn backward_requires_scalar_and_nonempty_tape() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::zeros(vec![2])).unwrap();
    assert!(t.backward(x).is_err());
    let mut empty = Tape::<f32>::new();
    let mut other = Tape::<f32>::new();
    let v = other.param(Tensor::scalar(1.0)).unwrap();
    assert!(empty.backward(v).is_err());
}

#[test]
fn poisoned_input_is_rejected() {
    let mut t = Tape::<f32>::new();
    assert!(matches!(
        t.constant(Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap()),
        Err(Error::NonFinite { .. })
    ));
    let x = t.constant(Tensor::new(vec![1], vec![f32::MAX]).unwrap()).unwrap();
    assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn accumulation_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let kernel = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let build = |t: &mut Tape<f64>| {
        let x = t.constant(input.clone()).unwrap();
        let k = t.param(kernel.clone()).unwrap();
        let y = t.conv2d(x, k, None, 1, 1).unwrap();
        let a = t.leaky_relu(y, 0.2).unwrap();
        let l1 = t.mean_all(a).unwrap();
        let sq = t.mul(y, y).unwrap();
        let l2 = t.sum_all(sq).unwrap();
        (k, l1, l2)
    };
    let mut t = Tape::new();
    let (k, l1, l2) = build(&mut t);
    t.backward(l1).unwrap();
    t.backward(l2).unwrap();
    let separate = t.grad(k).unwrap().to_vec();

    let mut t = Tape::new();
    let (k, l1, l2) = build(&mut t);
    let total = t.add(l1, l2).unwrap();
    t.backward(total).unwrap();
    let joint = t.grad(k).unwrap();
    assert!(max_abs_diff(&separate, joint) < 1e-9);
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum_all(sq)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

const EPS: f64 = 1e-6;

#[test]
fn grad_check_conv_input_kernel_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    // weighted sum so every output position matters differently
    let head = |t: &mut Tape<f64>, y: Var| -> Result<Var> {
        let wv = t.constant(w.clone())?;
        let p = t.mul(y, wv)?;
        t.sum_all(p)
    };
    let e_x = grad_check(
        |t, xv| {
            let kv = t.constant(k.clone())?;
            let bv = t.constant(b.clone())?;
            let y = t.conv2d(xv, kv, Some(bv), 2, 1)?;
            head(t, y)
        },
        &x,
        EPS,
    )
    .unwrap();
    let e_k = grad_check(
        |t, kv| {
            let xv = t.constant(x.clone())?;
            let bv = t.constant(b.clone())?;
            let y = t.conv2d(xv, kv, Some(bv), 2, 1)?;
            head(t, y)
        },
        &k,
        EPS,
    )
    .unwrap();
    let e_b = grad_check(
        |t, bv| {
            let xv = t.constant(x.clone())?;
            let kv = t.constant(k.clone())?;
            let y = t.conv2d(xv, kv, Some(bv), 2, 1)?;
            head(t, y)
        },
        &b,
        EPS,
    )
    .unwrap();
    assert!(e_x < 1e-4 && e_k < 1e-4 && e_b < 1e-4, "{e_x} {e_k} {e_b}");
}

#[test]
fn grad_check_linear_and_activation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let w = rand_tensor(&mut rng, &[6, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let f = |t: &mut Tape<f64>, xv: Var, wv: Var, bv: Var| -> Result<Var> {
        let y = t.linear(xv, wv, Some(bv))?;
        let a = t.leaky_relu(y, 0.2)?;
        let sq = t.mul(a, a)?;
        t.mean_all(sq)
    };
    let ex = grad_check(
        |t, xv| {
            let (wv, bv) = (t.constant(w.clone())?, t.constant(b.clone())?);
            f(t, xv, wv, bv)
        },
        &x,
        EPS,
    )
    .unwrap();
    let ew = grad_check(
        |t, wv| {
            let (xv, bv) = (t.constant(x.clone())?, t.constant(b.clone())?);
            f(t, xv, wv, bv)
        },
        &w,
        EPS,
    )
    .unwrap();
    let eb = grad_check(
        |t, bv| {
            let (xv, wv) = (t.constant(x.clone())?, t.constant(w.clone())?);
            f(t, xv, wv, bv)
        },
        &b,
        EPS,
    )
    .unwrap();
    assert!(ex < 1e-4 && ew < 1e-4 && eb < 1e-4, "{ex} {ew} {eb}");
}

#[test]
fn grad_check_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = rand_tensor(&mut rng, &[5, 4]);
    let e = grad_check(|t, v| t.softmax_cross_entropy(v, &[0, 3, 1, 1, 2]), &z, EPS).unwrap();
    assert!(e < 1e-4, "ce {e}");
    let targets: Vec<f64> = (0..20).map(|i| (i % 3) as f64 / 2.0).collect();
    let e = grad_check(|t, v| t.sigmoid_bce(v, &targets), &z, EPS).unwrap();
    assert!(e < 1e-4, "bce {e}");
    let target = rand_tensor(&mut rng, &[5, 4]);
    let weights: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
    let e = grad_check(
        |t, v| {
            let q = t.constant(target.clone())?;
            t.smooth_l1_weighted(v, q, &weights, 1.0 / 9.0, 3.0)
        },
        &z,
        EPS,
    )
    .unwrap();
    assert!(e < 1e-4, "smooth_l1 {e}");
}

#[test]
fn grad_check_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 5, 3]);
    let w = rand_tensor(&mut rng, &[2, 2, 3]);
    let e = grad_check(
        |t, v| {
            let a = t.narrow(v, 1, 1, 2)?;
            let b = t.narrow(v, 1, 3, 2)?;
            let c = t.concat(&[a, b])?;
            let wv = t.constant(w.clone())?;
            let wv = t.concat(&[wv, wv])?;
            let p = t.mul(c, wv)?;
            let r = t.reshape(p, &[4, 6])?;
            let s = t.sum(r, &[0])?;
            let g = t.grl(s)?;
            let d = t.sub(g, s)?;
            let d = t.scale(d, 0.7)?;
            let sq = t.mul(d, d)?;
            t.mean_all(sq)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(e < 1e-4, "{e}");
}

#[test]
fn grad_check_max_pool_with_jitter() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = rand_tensor(&mut rng, &[1, 2, 3, 3]);
    let f = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
        let y = t.max_pool2d(v, 2, 2, 0)?;
        let wv = t.constant(w.clone())?;
        let p = t.mul(y, wv)?;
        t.sum_all(p)
    };
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6]);
        let e = grad_check(f, &x, EPS).unwrap();
        best = best.min(e);
        if e < 1e-3 {
            break;
        }
    }
    assert!(best < 1e-3, "{best}");
}

#[test]
fn grad_check_roi_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rois = [
        RoiRegion { batch: 0, y0: 0, y1: 4, x0: 1, x1: 6 },
        RoiRegion { batch: 1, y0: 2, y1: 3, x0: 2, x1: 3 },
        RoiRegion { batch: 1, y0: 0, y1: 6, x0: 0, x1: 6 },
    ];
    let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    let e = grad_check(
        |t, v| {
            let y = t.roi_pool(v, &rois, 2, 2)?;
            let wv = t.constant(w.clone())?;
            let p = t.mul(y, wv)?;
            t.sum_all(p)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(e < 1e-3, "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv_matches_naive_oracle(
        seed in any::<u64>(),
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, cin, h, w]);
        let kern = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        let (shape, expected) = naive_conv(&x, &kern, b.data(), stride, pad);
        let mut t = Tape::<f64>::new();
        let (xv, kv, bv) = (t.constant(x).unwrap(), t.constant(kern).unwrap(), t.constant(b).unwrap());
        let y = t.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        prop_assert_eq!(t.shape(y), &shape[..]);
        prop_assert!(max_abs_diff(&t.value(y).to_f64_vec(), &expected) < 1e-6);
    }

    #[test]
    fn linear_matches_naive_oracle(seed in any::<u64>(), n in 1usize..6, d in 1usize..9, k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, d]);
        let w = rand_tensor(&mut rng, &[d, k]);
        let b = rand_tensor(&mut rng, &[k]);
        let mut expected = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut s = b.data()[j];
                for l in 0..d {
                    s += x.data()[i * d + l] * w.data()[l * k + j];
                }
                expected[i * k + j] = s;
            }
        }
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.constant(x).unwrap(), t.constant(w).unwrap(), t.constant(b).unwrap());
        let y = t.linear(xv, wv, Some(bv)).unwrap();
        prop_assert!(max_abs_diff(&t.value(y).to_f64_vec(), &expected) < 1e-6);
    }

    #[test]
    fn random_ops_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let e = grad_check(|t, v| {
            let kv = t.constant(k.clone())?;
            let y = t.conv2d(v, kv, None, 1, 1)?;
            let a = t.leaky_relu(y, 0.2)?;
            let f = t.flatten(a)?;
            let sq = t.mul(f, f)?;
            t.mean_all(sq)
        }, &x, EPS).unwrap();
        prop_assert!(e < 1e-4, "{}", e);
    }
}
