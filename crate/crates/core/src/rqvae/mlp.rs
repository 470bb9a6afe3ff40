use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::util::Rng;

/// Fully connected network with ReLU on hidden layers and identity output.
///
/// Parameters live in one flat buffer, layer by layer: an `in x out`
/// row-major weight followed by an `out` bias, so `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a batched forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    n: usize,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "network needs at least two positive layer sizes, got {sizes:?}"
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn random(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[off..off + w[0] * w[1] + w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::Schema(format!(
                "network {sizes:?} needs {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// `(weight, bias)` slices of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.params[off..].split_at(fan_in * fan_out);
        (w, &rest[..fan_out])
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.params[off..].split_at_mut(fan_in * fan_out);
        (w, &mut rest[..fan_out])
    }

    /// Single-vector forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Schema(format!(
                "network expects input of dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(self.forward_batch(x, 1).0)
    }

    /// Forward pass over `n` row-major inputs.
    pub fn forward_batch(&self, x: &[f64], n: usize) -> (Vec<f64>, MlpTrace) {
        assert_eq!(x.len(), n * self.input_dim());
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut cur = x.to_vec();
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer(l);
            let mut out = vec![0.0; n * fan_out];
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(b);
            }
            gemm(Op::N, Op::N, n, fan_in, fan_out, &cur, w, 1.0, &mut out);
            let act = if l + 1 < layers {
                out.iter().map(|&v| v.max(0.0)).collect()
            } else {
                out.clone()
            };
            inputs.push(std::mem::replace(&mut cur, act));
            pre.push(out);
        }
        (cur, MlpTrace { n, inputs, pre })
    }

    /// Accumulate parameter gradients into `grads` and return the input gradient.
    pub fn backward(&self, trace: &MlpTrace, dout: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        let n = trace.n;
        let layers = self.num_layers();
        let mut delta = dout.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                for (d, &p) in delta.iter_mut().zip(&trace.pre[l]) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let off = self.layer_offset(l);
            let (gw, rest) = grads[off..].split_at_mut(fan_in * fan_out);
            gemm(Op::T, Op::N, fan_in, n, fan_out, &trace.inputs[l], &delta, 1.0, gw);
            let gb = &mut rest[..fan_out];
            for row in delta.chunks_exact(fan_out) {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            let (w, _) = self.layer(l);
            let mut dx = vec![0.0; n * fan_in];
            gemm(Op::N, Op::T, n, fan_out, fan_in, &delta, w, 0.0, &mut dx);
            delta = dx;
        }
        delta
    }
}
