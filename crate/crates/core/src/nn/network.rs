//! Declarative layer stacks with owned parameters.

use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::spectral::{estimate_sigma, SpectralNormState};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Grl,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub spectral_norm: bool,
}

impl LayerSpec {
    fn plain(kind: LayerKind) -> Self {
        Self {
            kind,
            spectral_norm: false,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::plain(LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            bias: true,
        })
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self::plain(LayerKind::Linear {
            in_features,
            out_features,
            bias: true,
        })
    }

    pub fn max_pool(kernel: usize, stride: usize, pad: usize) -> Self {
        Self::plain(LayerKind::MaxPool { kernel, stride, pad })
    }

    pub fn leaky_relu(slope: f64) -> Self {
        Self::plain(LayerKind::LeakyRelu { slope })
    }

    pub fn grl() -> Self {
        Self::plain(LayerKind::Grl)
    }

    pub fn flatten() -> Self {
        Self::plain(LayerKind::Flatten)
    }

    pub fn spectral(mut self) -> Self {
        self.spectral_norm = true;
        self
    }

    pub fn without_bias(mut self) -> Self {
        match &mut self.kind {
            LayerKind::Conv { bias, .. } | LayerKind::Linear { bias, .. } => *bias = false,
            _ => {}
        }
        self
    }

    fn has_weight(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    spec: LayerSpec,
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    sn: Option<SpectralNormState>,
    frozen: bool,
}

/// An ordered stack of layers and the parameters they own.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    name: String,
    layers: Vec<Layer>,
}

/// Tape handles for one binding of a network's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    layers: Vec<Option<BoundLayer>>,
}

#[derive(Clone, Copy, Debug)]
struct BoundLayer {
    weight_leaf: Var,
    weight: Var,
    bias: Option<Var>,
    tracked: bool,
}

impl Bound {
    /// Leaf handles of every tracked parameter, in parameter order.
    pub fn tracked_leaves(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flatten()
            .filter(|l| l.tracked)
            .flat_map(|l| std::iter::once(l.weight_leaf).chain(l.bias))
            .collect()
    }
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    let mut channels: Option<usize> = None;
    let mut features: Option<usize> = None;
    for (i, s) in specs.iter().enumerate() {
        match s.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if let Some(c) = channels {
                    if c != in_channels {
                        return Err(Error::shape(
                            "build_network",
                            format!("layer {i} expects {in_channels} channels but receives {c}"),
                        ));
                    }
                }
                if kernel == 0 || stride == 0 || out_channels == 0 || in_channels == 0 {
                    return Err(Error::InvalidArgument(format!("layer {i}: zero-sized conv")));
                }
                channels = Some(out_channels);
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => {
                if let Some(f) = features {
                    if f != in_features {
                        return Err(Error::shape(
                            "build_network",
                            format!("layer {i} expects {in_features} features but receives {f}"),
                        ));
                    }
                }
                features = Some(out_features);
            }
            LayerKind::Flatten => {
                channels = None;
                features = None;
            }
            LayerKind::MaxPool { kernel, stride, .. } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidArgument(format!("layer {i}: zero-sized pool")));
                }
            }
            LayerKind::LeakyRelu { slope } => {
                if !(slope > 0.0 && slope <= 1.0) {
                    return Err(Error::InvalidArgument(format!("layer {i}: slope {slope} outside (0, 1]")));
                }
            }
            LayerKind::Grl => {}
        }
        if s.spectral_norm && !s.has_weight() {
            return Err(Error::InvalidArgument(format!(
                "layer {i}: spectral norm needs a weighted layer"
            )));
        }
    }
    Ok(())
}

/// Builds a network with He-normal weights (std `sqrt(2 / fan_in)`) and
/// zero biases. Identical `(specs, seed)` give bitwise-identical networks.
pub fn build_network(name: &str, specs: &[LayerSpec], seed: u64) -> Result<Network> {
    check_chain(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let (shape, fan_in, outputs, bias) = match spec.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => (
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                out_channels,
                bias,
            ),
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => (vec![in_features, out_features], in_features, out_features, bias),
            _ => {
                layers.push(Layer {
                    spec: spec.clone(),
                    weight: None,
                    bias: None,
                    sn: None,
                    frozen: false,
                });
                continue;
            }
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
            .collect();
        let weight = Tensor::new(shape, data)?.with_requires_grad();
        let bias = bias.then(|| Tensor::zeros(vec![outputs]).with_requires_grad());
        let sn = spec.spectral_norm.then(|| {
            let u = (0..outputs)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect();
            SpectralNormState::from_vector(u, 1)
        });
        layers.push(Layer {
            spec: spec.clone(),
            weight: Some(weight),
            bias,
            sn,
            frozen: false,
        });
    }
    Ok(Network {
        name: name.to_string(),
        layers,
    })
}

impl Network {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Channel count the first conv layer expects, if it starts with one.
    pub fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l.spec.kind {
            LayerKind::Conv { in_channels, .. } => Some(in_channels),
            LayerKind::Linear { in_features, .. } => Some(in_features),
            _ => None,
        })
    }

    /// Sets the power-iteration count used by [`Network::refresh_spectral_norm`].
    pub fn set_power_iterations(&mut self, n: usize) {
        for l in &mut self.layers {
            if let Some(sn) = &mut l.sn {
                sn.n_power_iter = n.max(1);
            }
        }
    }

    /// Advances every spectral-norm layer's persistent power iteration.
    pub fn refresh_spectral_norm(&mut self) {
        for l in &mut self.layers {
            if let (Some(w), Some(sn)) = (&l.weight, &mut l.sn) {
                let transposed = matches!(l.spec.kind, LayerKind::Linear { .. });
                estimate_sigma(w, transposed, sn, true);
            }
        }
    }

    /// Current sigma estimate of each spectral-norm layer (without advancing
    /// the iteration), paired with the layer index.
    pub fn spectral_sigmas(&self) -> Vec<(usize, f64)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let (w, sn) = (l.weight.as_ref()?, l.sn.as_ref()?);
                let transposed = matches!(l.spec.kind, LayerKind::Linear { .. });
                Some((i, estimate_sigma(w, transposed, &mut sn.clone(), false)))
            })
            .collect()
    }

    /// Effective (normalized) weight of layer `i`, as used in the forward pass.
    pub fn effective_weight(&self, i: usize) -> Option<Tensor> {
        let l = self.layers.get(i)?;
        let w = l.weight.as_ref()?;
        match &l.sn {
            None => Some(w.clone()),
            Some(sn) => {
                let transposed = matches!(l.spec.kind, LayerKind::Linear { .. });
                let sigma = estimate_sigma(w, transposed, &mut sn.clone(), false);
                if sigma > 0.0 {
                    let data = w.data().iter().map(|&x| (x as f64 / sigma) as f32).collect();
                    Tensor::new(w.shape().to_vec(), data).ok()
                } else {
                    Some(w.clone())
                }
            }
        }
    }

    /// Freezes the first `n` weighted layers: they keep their values and
    /// never receive gradients.
    pub fn freeze_leading(&mut self, n: usize) {
        for l in self.layers.iter_mut().filter(|l| l.weight.is_some()).take(n) {
            l.frozen = true;
            for p in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                p.set_requires_grad(false);
            }
        }
    }

    pub fn frozen_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.frozen)
            .map(|(i, _)| i)
            .collect()
    }

    /// Records the parameters on `tape`. With `track` set, unfrozen
    /// parameters become gradient-tracked leaves; otherwise all are
    /// constants. Spectral-norm layers divide by the current sigma, which
    /// the tape treats as a constant.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, track: bool) -> Result<Bound> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let Some(w) = &l.weight else {
                layers.push(None);
                continue;
            };
            let tracked = track && !l.frozen;
            let leaf = |tape: &mut Tape<T>, t: &Tensor| {
                if tracked {
                    tape.param(t.cast())
                } else {
                    tape.constant(t.cast())
                }
            };
            let weight_leaf = leaf(tape, w)?;
            let weight = match &l.sn {
                Some(sn) => {
                    let transposed = matches!(l.spec.kind, LayerKind::Linear { .. });
                    let sigma = estimate_sigma(w, transposed, &mut sn.clone(), false);
                    if sigma > 0.0 {
                        tape.scale(weight_leaf, 1.0 / sigma)?
                    } else {
                        weight_leaf
                    }
                }
                None => weight_leaf,
            };
            let bias = match &l.bias {
                Some(b) => Some(leaf(tape, b)?),
                None => None,
            };
            layers.push(Some(BoundLayer {
                weight_leaf,
                weight,
                bias,
                tracked,
            }));
        }
        Ok(Bound { layers })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<Var> {
        if bound.layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "binding has {} layers, network {} has {}",
                bound.layers.len(),
                self.name,
                self.layers.len()
            )));
        }
        let mut x = input;
        for (l, b) in self.layers.iter().zip(&bound.layers) {
            x = match (&l.spec.kind, b) {
                (LayerKind::Conv { stride, pad, .. }, Some(b)) => tape.conv2d(x, b.weight, b.bias, *stride, *pad)?,
                (LayerKind::Linear { .. }, Some(b)) => tape.linear(x, b.weight, b.bias)?,
                (LayerKind::MaxPool { kernel, stride, pad }, _) => tape.max_pool2d(x, *kernel, *stride, *pad)?,
                (LayerKind::LeakyRelu { slope }, _) => tape.leaky_relu(x, *slope)?,
                (LayerKind::Grl, _) => tape.grl(x)?,
                (LayerKind::Flatten, _) => tape.flatten(x)?,
                _ => return Err(Error::InvalidArgument("binding does not match layer".into())),
            };
        }
        Ok(x)
    }

    /// Convenience: bind untracked and run forward.
    pub fn eval<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let b = self.bind(tape, false)?;
        self.forward(tape, &b, input)
    }

    /// Output shape for a given input shape, by layer arithmetic alone.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            s = match l.spec.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if s.len() != 4 || s[1] != in_channels {
                        return Err(Error::shape(
                            "output_shape",
                            format!("layer {i} expects [N,{in_channels},H,W], got {s:?}"),
                        ));
                    }
                    let oh = crate::autodiff::window_out(s[2], kernel, stride, pad);
                    let ow = crate::autodiff::window_out(s[3], kernel, stride, pad);
                    match (oh, ow) {
                        (Some(h), Some(w)) => vec![s[0], out_channels, h, w],
                        _ => return Err(Error::shape("output_shape", format!("layer {i}: kernel exceeds {s:?}"))),
                    }
                }
                LayerKind::MaxPool { kernel, stride, pad } => {
                    if s.len() != 4 {
                        return Err(Error::shape("output_shape", format!("layer {i}: pool needs 4-D input")));
                    }
                    let oh = crate::autodiff::window_out(s[2], kernel, stride, pad);
                    let ow = crate::autodiff::window_out(s[3], kernel, stride, pad);
                    match (oh, ow) {
                        (Some(h), Some(w)) => vec![s[0], s[1], h, w],
                        _ => return Err(Error::shape("output_shape", format!("layer {i}: kernel exceeds {s:?}"))),
                    }
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if s.len() != 2 || s[1] != in_features {
                        return Err(Error::shape(
                            "output_shape",
                            format!("layer {i} expects [N,{in_features}], got {s:?}"),
                        ));
                    }
                    vec![s[0], out_features]
                }
                LayerKind::Flatten => vec![s[0], s[1..].iter().product()],
                LayerKind::LeakyRelu { .. } | LayerKind::Grl => s,
            };
        }
        Ok(s)
    }

    /// Adds the tape gradients of tracked parameters into their `grad` buffers.
    pub fn accumulate_grads<T: Real>(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (l, b) in self.layers.iter_mut().zip(&bound.layers) {
            let Some(b) = b.filter(|b| b.tracked) else { continue };
            let pairs = [(l.weight.as_mut(), Some(b.weight_leaf)), (l.bias.as_mut(), b.bias)];
            for (p, v) in pairs {
                if let (Some(p), Some(v)) = (p, v) {
                    if let Some(g) = tape.grad(v) {
                        let g: Vec<f32> = g.iter().map(|x| x.as_f64() as f32).collect();
                        p.accumulate_grad(&g)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// `(name, tensor)` for every parameter and spectral-norm vector.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(w) = &l.weight {
                out.push((format!("{}.{i}.weight", self.name), w.clone()));
            }
            if let Some(b) = &l.bias {
                out.push((format!("{}.{i}.bias", self.name), b.clone()));
            }
            if let Some(sn) = &l.sn {
                let u = Tensor::new(vec![sn.u.len()], sn.u.clone()).expect("vector shape");
                out.push((format!("{}.{i}.sn_u", self.name), u));
            }
        }
        out
    }

    /// Replaces parameter values (and spectral-norm vectors) by name. Every
    /// tensor the network owns must be supplied with a matching shape.
    pub fn load_named(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let name = self.name.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fetch = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                let key = format!("{name}.{i}.{suffix}");
                let t = lookup(&key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
                if t.shape() != shape {
                    return Err(Error::Format(format!(
                        "tensor {key} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            };
            if let Some(w) = &mut l.weight {
                let rg = w.requires_grad();
                *w = fetch("weight", w.shape())?;
                w.set_requires_grad(rg);
            }
            if let Some(b) = &mut l.bias {
                let rg = b.requires_grad();
                *b = fetch("bias", b.shape())?;
                b.set_requires_grad(rg);
            }
            if let Some(sn) = &mut l.sn {
                let u = fetch("sn_u", &[sn.u.len()])?;
                sn.u = u.into_data();
            }
        }
        Ok(())
    }

    /// Stable hash of every parameter value and spectral-norm vector.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.named_tensors() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// True when no parameter carries a non-zero gradient.
    pub fn grads_are_zero(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.grad().map_or(true, |g| g.iter().all(|&x| x == 0.0)))
    }

    /// Global L2 norm of all parameter gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params()
            .iter()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter().map(|&x| (x as f64).powi(2)))
            .sum::<f64>()
            .sqrt()
    }
}

/// Deep copy; later updates to either network never affect the other.
pub fn clone_network(src: &Network) -> Network {
    src.clone()
}

/// A copy carrying a different parameter-name prefix.
pub fn clone_network_as(src: &Network, name: &str) -> Network {
    let mut n = src.clone();
    n.name = name.to_string();
    n
}
