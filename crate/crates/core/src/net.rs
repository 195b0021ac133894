//! A small multilayer perceptron with hand-written reverse-mode gradients.
//!
//! Hidden layers use `tanh`. The output head is either the identity or a
//! bounded head `scale · tanh(z) / √d`, which keeps `‖y‖₂ ≤ scale` for any
//! parameters. Parameters are one flat vector laid out layer by layer as
//! `[W (out × in, row-major), b (out)]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMap};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    Identity,
    /// `scale · tanh(z) / √d`.
    Bounded { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub head: Head,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, head: Head) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidDimension(format!(
                "network {input_dim} -> {hidden:?} -> {output_dim}"
            )));
        }
        if let Head::Bounded { scale } = head {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::InvalidConfig(format!("head scale {scale}")));
            }
        }
        Ok(Self { input_dim, hidden, output_dim, head })
    }

    /// Feature network over one-hot `(s, a)` inputs with a unit-norm head.
    pub fn feature_net(num_states: usize, num_actions: usize, hidden: Vec<usize>, dim: usize) -> Result<Self> {
        Self::new(num_states + num_actions, hidden, dim, Head::Bounded { scale: 1.0 })
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// One-line text descriptor, used by checkpoints to reject mismatched
    /// parameter files.
    pub fn descriptor(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| format!("{h}")).collect();
        let head = match self.head {
            Head::Identity => String::from("identity"),
            Head::Bounded { scale } => format!("bounded-tanh:{scale:?}"),
        };
        format!(
            "mlp input={} hidden={} output={} head={}",
            self.input_dim,
            if hidden.is_empty() { String::from("-") } else { hidden.join(",") },
            self.output_dim,
            head
        )
    }
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `layers[0]` is the input; `layers[l]` the post-activation output of
    /// hidden layer `l`.
    layers: Vec<Vec<f64>>,
    /// Pre-head output `z`.
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableNet {
    arch: Architecture,
    params: Vec<f64>,
    grad: Vec<f64>,
}

impl TrainableNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(arch: Architecture, seed: u64, stream: u64) -> Self {
        let mut r = rng::split(seed, stream);
        let mut params = Vec::with_capacity(arch.num_params());
        for (fan_in, fan_out) in arch.layer_dims() {
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            for _ in 0..fan_in * fan_out {
                params.push(limit * (2.0 * r.random::<f64>() - 1.0));
            }
            params.extend(core::iter::repeat_n(0.0, fan_out));
        }
        let grad = vec![0.0; params.len()];
        Self { arch, params, grad }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.num_params();
        Self { arch, params: vec![0.0; n], grad: vec![0.0; n] }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", arch.num_params()),
                found: format!("{}", params.len()),
            });
        }
        let grad = vec![0.0; params.len()];
        Ok(Self { arch, params, grad })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Accumulated gradient.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// `self ← τ·online + (1 − τ)·self`, parameter-wise.
    pub fn ema_update(&mut self, online: &TrainableNet, tau: f64) {
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("input of length {}", self.arch.input_dim),
                found: format!("{}", input.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let dims = self.arch.layer_dims();
        let last = dims.len() - 1;
        let mut layers = Vec::with_capacity(dims.len());
        layers.push(input.to_vec());
        let mut offset = 0;
        let mut logits = Vec::new();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let x = &layers[l];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (wi, xi) in row.iter().zip(x) {
                    if *xi != 0.0 {
                        *zo += wi * xi;
                    }
                }
            }
            if l == last {
                logits = z;
            } else {
                layers.push(z.iter().map(|&v| libm::tanh(v)).collect());
            }
        }
        let output = match self.arch.head {
            Head::Identity => logits.clone(),
            Head::Bounded { scale } => {
                let k = scale / libm::sqrt(self.arch.output_dim as f64);
                logits.iter().map(|&v| k * libm::tanh(v)).collect()
            }
        };
        Ok(ForwardTrace { layers, logits, output })
    }

    /// Adds `(∂y/∂θ)ᵀ upstream` into `grad`.
    pub fn backward_into(&self, trace: &ForwardTrace, upstream: &[f64], grad: &mut [f64]) {
        let dims = self.arch.layer_dims();
        let mut delta: Vec<f64> = match self.arch.head {
            Head::Identity => upstream.to_vec(),
            Head::Bounded { scale } => {
                let k = scale / libm::sqrt(self.arch.output_dim as f64);
                upstream
                    .iter()
                    .zip(&trace.logits)
                    .map(|(u, &z)| {
                        let t = libm::tanh(z);
                        u * k * (1.0 - t * t)
                    })
                    .collect()
            }
        };
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &dims {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let off = offsets[l];
            let x = &trace.layers[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += d * wi;
                }
            }
            // tanh'(a) = 1 - tanh(a)^2, and x holds tanh(a).
            for (p, xi) in prev.iter_mut().zip(x) {
                *p *= 1.0 - xi * xi;
            }
            delta = prev;
        }
    }

    /// Accumulates into the net's own gradient buffer.
    pub fn accumulate_gradient(&mut self, trace: &ForwardTrace, upstream: &[f64]) {
        let mut grad = core::mem::take(&mut self.grad);
        self.backward_into(trace, upstream, &mut grad);
        self.grad = grad;
    }

    /// Parameter gradient of `upstreamᵀ y(input)`.
    pub fn gradient(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        if upstream.len() != self.arch.output_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("upstream of length {}", self.arch.output_dim),
                found: format!("{}", upstream.len()),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(&trace, upstream, &mut grad);
        Ok(grad)
    }
}

/// `one-hot(s) ⊕ one-hot(a)`.
pub fn encode_pair(s: usize, a: usize, num_states: usize, num_actions: usize) -> Vec<f64> {
    let mut x = vec![0.0; num_states + num_actions];
    x[s] = 1.0;
    x[num_states + a] = 1.0;
    x
}

/// A network evaluated on one-hot `(s, a)` encodings, viewed as a feature
/// map.
#[derive(Debug, Clone, PartialEq)]
pub struct NetFeatures {
    pub net: TrainableNet,
    pub num_states: usize,
    pub num_actions: usize,
}

impl NetFeatures {
    pub fn new(net: TrainableNet, num_states: usize, num_actions: usize) -> Result<Self> {
        if net.architecture().input_dim != num_states + num_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("network input {}", num_states + num_actions),
                found: format!("{}", net.architecture().input_dim),
            });
        }
        Ok(Self { net, num_states, num_actions })
    }

    /// Forward traces for every pair, indexed by pair.
    pub fn traces(&self) -> Vec<ForwardTrace> {
        let mut out = Vec::with_capacity(self.num_states * self.num_actions);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let x = encode_pair(s, a, self.num_states, self.num_actions);
                out.push(self.net.forward_trace(&x).expect("input width checked at construction"));
            }
        }
        out
    }
}

impl FeatureMap for NetFeatures {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn dim(&self) -> usize {
        self.net.architecture().output_dim
    }

    fn kind(&self) -> FeatureKind {
        FeatureKind::Trainable
    }

    fn write_features(&self, s: usize, a: usize, out: &mut [f64]) {
        let x = encode_pair(s, a, self.num_states, self.num_actions);
        let y = self.net.forward(&x).expect("input width checked at construction");
        out.copy_from_slice(&y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(net: &TrainableNet, input: &[f64], upstream: &[f64], k: usize, h: f64) -> f64 {
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let fp: f64 = plus.forward(input).unwrap().iter().zip(upstream).map(|(y, u)| y * u).sum();
        let fm: f64 = minus.forward(input).unwrap().iter().zip(upstream).map(|(y, u)| y * u).sum();
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn zero_net_outputs_head_of_zero() {
        let arch = Architecture::new(3, vec![4, 4], 2, Head::Bounded { scale: 1.0 }).unwrap();
        let net = TrainableNet::zeros(arch);
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let arch = Architecture::new(3, vec![], 2, Head::Identity).unwrap();
        let net = TrainableNet::zeros(arch);
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let arch = Architecture::new(3, vec![], 2, Head::Identity).unwrap();
        let net = TrainableNet::new(arch, 1, 0);
        let x = [0.5, -1.0, 2.0];
        let u = [3.0, -0.5];
        let g = net.gradient(&x, &u).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g[o * 3 + i], u[o] * x[i]);
            }
            assert_eq!(g[6 + o], u[o]);
        }
    }

    #[test]
    fn two_hidden_layers_match_finite_differences() {
        let arch = Architecture::new(5, vec![7, 6], 4, Head::Bounded { scale: 0.9 }).unwrap();
        let net = TrainableNet::new(arch, 3, 0);
        let x = [0.2, -0.7, 1.0, 0.0, 0.4];
        let u = [1.0, -2.0, 0.5, 0.3];
        let g = net.gradient(&x, &u).unwrap();
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let k = r.random_range(0..net.num_params());
            let fd = central_difference(&net, &x, &u, k, 1e-5);
            assert!((g[k] - fd).abs() <= 1e-6 * g[k].abs().max(1.0), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn bounded_head_caps_norm() {
        let arch = Architecture::new(4, vec![8], 6, Head::Bounded { scale: 1.0 }).unwrap();
        let mut net = TrainableNet::new(arch, 5, 0);
        net.params_mut().iter_mut().for_each(|p| *p *= 50.0);
        let y = net.forward(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        let norm = libm::sqrt(y.iter().map(|v| v * v).sum::<f64>());
        assert!(norm <= 1.0 + 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let arch = Architecture::new(4, vec![8], 6, Head::Identity).unwrap();
        let net = TrainableNet::new(arch, 5, 0);
        assert!(matches!(net.forward(&[1.0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn ema_endpoint() {
        let arch = Architecture::new(2, vec![3], 2, Head::Identity).unwrap();
        let a = TrainableNet::new(arch.clone(), 1, 0);
        let mut b = TrainableNet::new(arch, 2, 0);
        b.ema_update(&a, 1.0);
        assert_eq!(a.params(), b.params());
    }
}
