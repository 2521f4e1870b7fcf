//! Shared fixtures for the benchmarks.

use wdda::data::gen_gaussian_pair;
use wdda::Tensor;

/// Standard-normal tensor of the given shape, fixed by `seed`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let (x, _) = gen_gaussian_pair(1, &[0.0], n, seed).expect("valid pair");
    x.reshape(shape.to_vec()).expect("matching size")
}
