//! Layer stacks, spectral normalization, gradient reversal and optimizers.

mod network;
mod optim;
mod spectral;

pub use network::{build_network, clone_network, clone_network_as, Bound, LayerKind, LayerSpec, Network, DEFAULT_SLOPE};
pub use optim::{clip_grad_norm, Adam, AdamMeta};
pub use spectral::{power_iteration, spectral_normalize, SpectralNormState, WeightMatrix};

use crate::tensor::Tensor;

/// Gradient reversal, forward half: the identity.
pub fn grl_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.clear_grad();
    y
}

/// Gradient reversal, backward half: negates the upstream gradient.
pub fn grl_backward(upstream: &Tensor) -> Tensor {
    let data = upstream.data().iter().map(|&g| -g).collect();
    Tensor::new(upstream.shape().to_vec(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests;
