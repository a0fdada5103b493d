//! Dense ReLU networks with exact reverse-mode gradients.
//!
//! Weights are row-major `(out_dim, in_dim)`. Hidden layers use ReLU,
//! the output layer is the identity. The ReLU subgradient at 0 is 0.
//!
//! Two API levels:
//! - single-sample [`Mlp::forward`] / [`Mlp::backward`], shape-checked, used at
//!   deployment and in tests;
//! - batched [`Mlp::forward_cached`] / [`Mlp::backward_batch`] over flat
//!   row-major buffers, used by the training loops. These assert on shape
//!   misuse.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::linalg;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidSpec("hidden layer list is empty".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidSpec(format!(
                "all dims must be >= 1 (input {}, hidden {:?}, output {})",
                self.input_dim, self.hidden, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(in_dim, out_dim)` per layer in declaration order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }
}

/// A stack of dense layers. The same shape also carries gradients and Adam
/// moments, see [`Gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub type Gradients = Mlp;

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f32>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f32] {
        self.acts.last().expect("cache always holds the input")
    }
}

impl Mlp {
    pub fn zeros(spec: &LayerSpec) -> Self {
        Self {
            layers: spec
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        }
    }

    /// He-uniform initialization: `W ~ U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// zero biases. The final layer is scaled down by [`OUTPUT_INIT_SCALE`] so
    /// fresh networks start near zero output.
    pub fn he_uniform<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let mut limit = (6.0 / layer.in_dim as f32).sqrt();
            if l == last {
                limit *= OUTPUT_INIT_SCALE;
            }
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut layer.weights {
                *w = dist.sample(rng);
            }
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    /// Iterates every scalar parameter, weights before biases, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = &f32> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: input.len(),
                context: "mlp input",
            });
        }
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn forward_unchecked(&self, input: &[f32]) -> Vec<f32> {
        let last = self.layers.len() - 1;
        let mut cur = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(layer.out_dim);
            for o in 0..layer.out_dim {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let z = linalg::dot(row, &cur) + layer.biases[o];
                next.push(if l < last { z.max(0.0) } else { z });
            }
            cur = next;
        }
        cur
    }

    /// Batched forward pass without caching; `input` is `batch × input_dim`.
    pub fn forward_batch(&self, input: &[f32], batch: usize) -> Vec<f32> {
        let cache = self.forward_cached(input, batch);
        cache.acts.into_iter().last().expect("non-empty")
    }

    pub fn forward_cached(&self, input: &[f32], batch: usize) -> ForwardCache {
        assert_eq!(
            input.len(),
            batch * self.input_dim(),
            "batched input has wrong length"
        );
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = &acts[l];
            let mut out = vec![0.0f32; batch * layer.out_dim];
            linalg::matmul_a_bt(prev, &layer.weights, &mut out, batch, layer.in_dim, layer.out_dim);
            for row in out.chunks_exact_mut(layer.out_dim) {
                for (v, b) in row.iter_mut().zip(&layer.biases) {
                    *v += b;
                }
                if l < last {
                    for v in row.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            acts.push(out);
        }
        ForwardCache { batch, acts }
    }

    /// Gradients of `Σ_rows upstreamᵀ · output` with respect to every parameter
    /// (summed over the batch) and to the input (per row).
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &[f32]) -> (Gradients, Vec<f32>) {
        let mut grads = self.zeros_like();
        let input_grad = self.backprop(cache, upstream, Some(&mut grads), true);
        (grads, input_grad)
    }

    /// Parameter gradients only; skips the input-gradient product of layer 0.
    pub fn param_grads_batch(&self, cache: &ForwardCache, upstream: &[f32]) -> Gradients {
        let mut grads = self.zeros_like();
        self.backprop(cache, upstream, Some(&mut grads), false);
        grads
    }

    /// Input gradient only, for frozen networks queried through their input.
    pub fn input_grad_batch(&self, cache: &ForwardCache, upstream: &[f32]) -> Vec<f32> {
        self.backprop(cache, upstream, None, true)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        upstream: &[f32],
        mut grads: Option<&mut Gradients>,
        want_input: bool,
    ) -> Vec<f32> {
        let batch = cache.batch;
        assert_eq!(
            upstream.len(),
            batch * self.output_dim(),
            "upstream gradient has wrong length"
        );
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_prev = &cache.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[l];
                linalg::matmul_at_b_acc(&delta, a_prev, &mut gl.weights, batch, layer.out_dim, layer.in_dim);
                for row in delta.chunks_exact(layer.out_dim) {
                    for (gb, d) in gl.biases.iter_mut().zip(row) {
                        *gb += d;
                    }
                }
            }
            if l == 0 && !want_input {
                return Vec::new();
            }
            let mut prev = vec![0.0f32; batch * layer.in_dim];
            linalg::matmul(&delta, &layer.weights, &mut prev, batch, layer.out_dim, layer.in_dim);
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(a_prev) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Single-sample reverse pass: gradients of `upstreamᵀ · f(input)`.
    pub fn backward(&self, input: &[f32], upstream: &[f32]) -> Result<(Gradients, Vec<f32>)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: input.len(),
                context: "mlp input",
            });
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: upstream.len(),
                context: "mlp upstream gradient",
            });
        }
        let cache = self.forward_cached(input, 1);
        Ok(self.backward_batch(&cache, upstream))
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f32) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }
}

/// Scale applied to the He limit of the output layer.
pub const OUTPUT_INIT_SCALE: f32 = 0.1;
