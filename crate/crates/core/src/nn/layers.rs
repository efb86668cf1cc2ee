//! Building blocks assembled from [`Graph`] primitives.

use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;

/// `x · W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), group, fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, fan_out));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }
}

/// Row-wise layer normalization with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), group, Tensor::full(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(1, dim)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, self.eps);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let scaled = g.mul(n, gain);
        g.add(scaled, bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Stack of affine layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        h
    }

    /// Runs every layer but the last, returning the final hidden activation.
    pub fn forward_body(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.forward(g, store, h);
            h = self.activation.apply(g, h);
        }
        h
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }
}

/// Scaled dot-product self-attention over the rows of a `K x d` input,
/// split into `heads` heads of width `d / heads`. No masking, no positions.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), group, dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), group, dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), group, dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), group, dim, dim, rng),
            heads,
        }
    }

    /// Returns the projected output and the per-head `K x K` attention weights.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> (Var, Vec<Var>) {
        let dim = g.value(x).cols();
        assert!(g.value(x).rows() > 0, "attention over zero rows");
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(g, store, x);
        let k = self.key.forward(g, store, x);
        let v = self.value.forward(g, store, x);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            weights.push(attn);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.output.forward(g, store, joined), weights)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.forward_with_weights(g, store, x).0
    }
}

/// Position-wise `d -> hidden -> d` network with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), group, dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), group, hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.inner.forward(g, store, x);
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}
