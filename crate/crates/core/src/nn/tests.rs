use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::tensor::Tensor;

/// Largest singular value by power iteration on `W W^T`, run to a 1e-10
/// eigen-residual from several random starts; the best start wins.
fn restart_oracle(w: &[f64], rows: usize, cols: usize, seed: u64) -> f64 {
    let mut gram = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            gram[i * rows + j] = (0..cols).map(|k| w[i * cols + k] * w[j * cols + k]).sum();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..10 {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..200_000 {
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= n);
            let gu: Vec<f64> = (0..rows)
                .map(|i| (0..rows).map(|j| gram[i * rows + j] * u[j]).sum())
                .collect();
            lambda = u.iter().zip(&gu).map(|(a, b)| a * b).sum::<f64>();
            let resid = gu
                .iter()
                .zip(&u)
                .map(|(g, x)| (g - lambda * x).powi(2))
                .sum::<f64>()
                .sqrt();
            u = gu;
            if resid < 1e-10 * lambda.max(1.0) {
                break;
            }
        }
        best = best.max(lambda);
    }
    best.sqrt()
}

fn random_weight(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let fan_in = n / shape[0];
    let scale = (2.0 / fan_in as f64).sqrt();
    let data = (0..n).map(|_| (rng.gen_range(-1.0..1.0) * scale) as f32).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn as_rows(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

#[test]
fn sigma_matches_restart_oracle_on_wide_matrix() {
    let w = random_weight(&[128, 512], 3);
    let mut st = SpectralNormState::new(128, 50);
    let (_, sigma) = spectral_normalize(&w, false, &mut st);
    let oracle = restart_oracle(&as_rows(&w), 128, 512, 99);
    assert!((sigma - oracle).abs() < 1e-3, "power iteration {sigma} vs oracle {oracle}");
}

#[test]
fn normalized_weight_has_unit_top_singular_value() {
    for (i, shape) in [vec![16, 8, 3, 3], vec![64, 32, 2, 2], vec![1, 32, 3, 3], vec![40, 7, 1, 1]]
        .into_iter()
        .enumerate()
    {
        let w = random_weight(&shape, 10 + i as u64);
        let mut st = SpectralNormState::new(shape[0], 20);
        let (n, _) = spectral_normalize(&w, false, &mut st);
        let cols = n.numel() / shape[0];
        let top = restart_oracle(&as_rows(&n), shape[0], cols, 5);
        assert!((top - 1.0).abs() <= 1e-2, "shape {shape:?}: top singular value {top}");
    }
}

#[test]
fn persistent_u_stays_unit_length() {
    let w = random_weight(&[8, 4, 3, 3], 1);
    let mut st = SpectralNormState::new(8, 1);
    for _ in 0..5 {
        spectral_normalize(&w, false, &mut st);
        let n: f64 = st.u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

#[test]
fn grl_reverses_sign_exactly() {
    let x = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
    assert_eq!(grl_forward(&x).data(), &[1.5, -2.0]);
    let g = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
    assert_eq!(grl_backward(&g).data(), &[-0.5, 1.0]);
    assert_eq!(grl_backward(&grl_backward(&g)), g);
}

fn small_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(2, 4, 3, 1, 1),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::max_pool(2, 2, 0),
        LayerSpec::conv(4, 3, 3, 2, 1).spectral(),
        LayerSpec::flatten(),
        LayerSpec::linear(12, 5),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::linear(5, 1).spectral().without_bias(),
    ]
}

fn input(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn run(net: &Network, x: &Tensor) -> Tensor {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(x.clone()).unwrap();
    let y = net.eval(&mut tape, v).unwrap();
    tape.value(y).clone()
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = build_network("n", &small_specs(), 7).unwrap();
    let b = build_network("n", &small_specs(), 7).unwrap();
    assert_eq!(a, b);
    let c = build_network("n", &small_specs(), 8).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn he_init_scale_and_zero_bias() {
    let net = build_network("n", &[LayerSpec::conv(16, 64, 3, 1, 1)], 1).unwrap();
    let p = net.params();
    let w = p[0].data();
    let var = w.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / w.len() as f64;
    let expected = 2.0 / (16.0 * 9.0);
    assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    assert!(p[1].data().iter().all(|&b| b == 0.0));
}

#[test]
fn inconsistent_channels_are_rejected() {
    let err = build_network("n", &[LayerSpec::conv(3, 8, 3, 1, 1), LayerSpec::conv(4, 8, 3, 1, 1)], 0).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
    assert!(build_network("n", &[LayerSpec::leaky_relu(0.2).spectral()], 0).is_err());
}

#[test]
fn output_shape_matches_forward() {
    let net = build_network("n", &small_specs(), 2).unwrap();
    let x = input(1, &[3, 2, 8, 8]);
    assert_eq!(net.output_shape(x.shape()).unwrap(), vec![3, 1]);
    assert_eq!(run(&net, &x).shape(), &[3, 1]);
    assert!(net.output_shape(&[3, 5, 8, 8]).is_err());
}

#[test]
fn clone_is_deep() {
    let src = build_network("n", &small_specs(), 3).unwrap();
    let before = src.fingerprint();
    let mut copy = clone_network(&src);
    for p in copy.params_mut() {
        p.data_mut()[0] += 1.0;
    }
    assert_eq!(src.fingerprint(), before);
    assert_ne!(copy.fingerprint(), before);
    assert_eq!(clone_network(&clone_network(&src)), src);
    let x = input(4, &[2, 2, 8, 8]);
    assert_eq!(run(&clone_network(&src), &x), run(&src, &x));
}

#[test]
fn frozen_layers_receive_no_gradient() {
    let mut net = build_network("n", &small_specs(), 5).unwrap();
    net.freeze_leading(1);
    let x = input(6, &[2, 2, 8, 8]);
    let mut tape = Tape::<f32>::new();
    let b = net.bind(&mut tape, true).unwrap();
    let v = tape.constant(x).unwrap();
    let y = net.forward(&mut tape, &b, v).unwrap();
    let loss = tape.mean_all(y).unwrap();
    tape.backward(loss).unwrap();
    net.accumulate_grads(&tape, &b).unwrap();
    let p = net.params();
    assert!(p[0].grad().is_none() && p[1].grad().is_none());
    assert!(p[2].grad().unwrap().iter().any(|&g| g != 0.0));
    assert_eq!(net.frozen_layers(), vec![0]);
}

#[test]
fn sigma_is_constant_in_backward() {
    // y = x W / sigma with sigma held fixed: dy/dW = x^T / sigma
    let net = build_network("n", &[LayerSpec::linear(3, 1).spectral().without_bias()], 9).unwrap();
    let sigma = net.spectral_sigmas()[0].1;
    let mut tape = Tape::<f64>::new();
    let b = net.bind(&mut tape, true).unwrap();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let y = net.forward(&mut tape, &b, x).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    let leaf = b.tracked_leaves()[0];
    let g = tape.grad(leaf).unwrap();
    for (gi, xi) in g.iter().zip([1.0, -2.0, 0.5]) {
        assert!((gi - xi / sigma).abs() < 1e-6);
    }
}

fn lipschitz_ratio(net: &Network, a: &Tensor, b: &Tensor) -> f64 {
    let (ya, yb) = (run(net, a), run(net, b));
    let dy: f64 = ya.data().iter().zip(yb.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt();
    let dx: f64 = a.data().iter().zip(b.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt();
    dy / dx
}

#[test]
fn spectral_mlp_critic_is_one_lipschitz() {
    let specs = [
        LayerSpec::linear(6, 32).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::linear(32, 32).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::linear(32, 1).spectral().without_bias(),
    ];
    let mut net = build_network("d", &specs, 11).unwrap();
    net.set_power_iterations(50);
    net.refresh_spectral_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = input(rng.gen(), &[1, 6]);
        let scale = rng.gen_range(1e-3f32..2.0);
        let b = Tensor::new(vec![1, 6], input(rng.gen(), &[1, 6]).data().iter().zip(a.data()).map(|(d, x)| x + scale * d).collect()).unwrap();
        worst = worst.max(lipschitz_ratio(&net, &a, &b));
    }
    assert!(worst <= 1.0 + 1e-3, "worst ratio {worst}");
}

#[test]
fn spectral_conv_critic_respects_reshaped_bound() {
    // With reshaped-kernel normalization each k x k conv is at most
    // sqrt(k*k)-Lipschitz as an operator; max pooling is 1-Lipschitz.
    let specs = [
        LayerSpec::max_pool(2, 2, 0),
        LayerSpec::conv(4, 8, 3, 1, 1).spectral(),
        LayerSpec::leaky_relu(DEFAULT_SLOPE),
        LayerSpec::conv(8, 1, 3, 1, 1).spectral().without_bias(),
    ];
    let mut net = build_network("d", &specs, 13).unwrap();
    net.set_power_iterations(50);
    net.refresh_spectral_norm();
    let bound = 3.0 * 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let a = input(rng.gen(), &[1, 4, 8, 8]);
        let b = input(rng.gen(), &[1, 4, 8, 8]);
        assert!(lipschitz_ratio(&net, &a, &b) <= bound * (1.0 + 1e-3));
    }
}

#[test]
fn named_tensors_round_trip() {
    let src = build_network("crit", &small_specs(), 21).unwrap();
    let names: Vec<String> = src.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert!(names.iter().any(|n| n.ends_with("sn_u")));
    let table = src.named_tensors();
    let mut dst = build_network("crit", &small_specs(), 22).unwrap();
    dst.load_named(&|k| table.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone())).unwrap();
    assert_eq!(dst.fingerprint(), src.fingerprint());
    assert!(dst.load_named(&|_| None).is_err());
}
