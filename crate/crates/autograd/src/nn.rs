//! Parameterized layers. Each layer owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and are bound to a [`Graph`] on every forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::uniform(&[out_dim], bound, rng), false));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let y = g.matmul(x, g.param(store, self.weight));
        match self.bias {
            Some(b) => g.add_suffix(y, g.param(store, b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        g.layer_norm(x, g.param(store, self.gamma), g.param(store, self.beta), NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0, "{name}: {groups} groups do not divide {channels} channels");
        Self {
            groups,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        g.group_norm(x, self.groups, g.param(store, self.gamma), g.param(store, self.beta), NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin / groups * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[cout, cin / groups, kernel], bound, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng), false),
            stride,
            pad,
            groups,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        g.conv1d(x, g.param(store, self.weight), Some(g.param(store, self.bias)), self.stride, self.pad, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64 / stride as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[cin, cout, kernel], bound, rng), true),
            bias: store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng), false),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        g.conv_transpose1d(
            x,
            g.param(store, self.weight),
            Some(g.param(store, self.bias)),
            self.stride,
            self.pad,
            self.out_pad,
        )
    }
}

/// Shape of a transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "{name}: {heads} heads do not divide width {dim}");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    /// `x: [S, N, d]` (S independent sequences of length N). Returns the output
    /// and the attention probabilities `[S * heads, N, N]`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let sh = g.shape(x);
        let (s, n, d) = (sh[0], sh[1], sh[2]);
        let h = self.heads;
        let dh = d / h;
        let split = |t: Var| {
            let t = g.reshape(t, &[s, n, h, dh]);
            let t = g.permute(t, &[0, 2, 1, 3]);
            g.reshape(t, &[s * h, n, dh])
        };
        let q = split(self.q.forward(g, store, x));
        let k = split(self.k.forward(g, store, x));
        let v = split(self.v.forward(g, store, x));
        let scores = g.scale(g.bmm(q, k, true), 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores);
        let ctx = g.bmm(probs, v, false);
        let ctx = g.reshape(ctx, &[s, h, n, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[s, n, d]);
        (self.o.forward(g, store, ctx), probs)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.dim, cfg.ffn_dim, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_dim, cfg.dim, true, rng),
        }
    }

    /// Pre-norm residual block.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let (a, probs) = self.attn.forward(g, store, self.ln1.forward(g, store, x));
        let x = g.add(x, a);
        let h = self.ff1.forward(g, store, self.ln2.forward(g, store, x));
        let h = self.ff2.forward(g, store, g.gelu(h));
        (g.add(x, h), probs)
    }
}

/// Stack of pre-norm transformer layers followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub config: TransformerConfig,
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: TransformerConfig, rng: &mut R) -> Self {
        let layers = (0..config.layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), &config, rng))
            .collect();
        Self { config, layers, final_ln: LayerNorm::new(store, &format!("{name}.ln_f"), config.dim) }
    }

    /// `x: [S, N, d]`. Returns the output and per-layer attention
    /// probabilities (`[S * heads, N, N]` each).
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> (Var, Vec<Var>) {
        let mut x = x;
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, p) = layer.forward(g, store, x);
            x = y;
            attn.push(p);
        }
        (self.final_ln.forward(g, store, x), attn)
    }
}

/// Fixed sinusoidal position table `[n, dim]`.
pub fn sinusoidal_table(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for pos in 0..n {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::new(&[n, dim], data)
}
