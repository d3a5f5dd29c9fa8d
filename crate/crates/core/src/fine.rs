//! Fine neural encoder: a channel-mixing projection, a strided convolutional
//! tokenizer producing one embedding per 0.1 s, and a temporal transformer.
//!
//! Parameters live under [`ENCODER_PREFIX`] inside the owning model's
//! [`ParamStore`], so encoder weights move between the VQ-VAE, mask
//! modeling and fine-tuning models with [`ParamStore::copy_prefix_from`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use strata_autograd::nn::{sinusoidal_table, Conv1d, LayerNorm, TransformerConfig, TransformerEncoder};
use strata_autograd::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::{Error, Result};

pub const KERNELS: [usize; 4] = [9, 3, 3, 3];
pub const STRIDES: [usize; 4] = [5, 2, 2, 2];
pub const PADS: [usize; 4] = [4, 1, 1, 1];

/// Samples per fine patch (product of the tokenizer strides).
pub const PATCH_STRIDE: usize = 40;

/// Name prefix of encoder parameters in every fine-stage model.
pub const ENCODER_PREFIX: &str = "fine.enc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineConfig {
    pub transformer: TransformerConfig,
    /// Upper bound on patches per window.
    pub max_patches: usize,
}

impl Default for FineConfig {
    fn default() -> Self {
        Self { transformer: TransformerConfig { layers: 8, dim: 256, heads: 8, ffn_dim: 1024 }, max_patches: 512 }
    }
}

impl FineConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.transformer;
        if t.dim == 0 || t.heads == 0 || !t.dim.is_multiple_of(t.heads) {
            return Err(Error::InvalidConfig(format!("bad transformer shape {t:?}")));
        }
        if self.max_patches == 0 {
            return Err(Error::InvalidConfig("max_patches must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.transformer.dim
    }
}

/// Patches produced for `t` samples.
pub fn n_patches(t: usize) -> usize {
    t / PATCH_STRIDE
}

#[derive(Debug, Clone)]
pub struct FineEncoder {
    pub config: FineConfig,
    n_channels: usize,
    mixer: Conv1d,
    convs: Vec<Conv1d>,
    norms: Vec<LayerNorm>,
    mask_token: ParamId,
    transformer: TransformerEncoder,
}

impl FineEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: FineConfig,
        n_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if n_channels == 0 {
            return Err(Error::InvalidConfig("no channels".into()));
        }
        let p = ENCODER_PREFIX;
        let d = config.dim();
        let mixer = Conv1d::new(store, &format!("{p}.mixer"), n_channels, n_channels, 1, 1, 0, 1, rng);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            let cin = if i == 0 { n_channels } else { d };
            convs.push(Conv1d::new(store, &format!("{p}.conv{i}"), cin, d, KERNELS[i], STRIDES[i], PADS[i], 1, rng));
            norms.push(LayerNorm::new(store, &format!("{p}.norm{i}"), d));
        }
        let mask_token = store.add(format!("{p}.mask_token"), Tensor::randn(&[d], 0.02, rng), false);
        let transformer = TransformerEncoder::new(store, &format!("{p}.temporal"), config.transformer, rng);
        Ok(Self { config, n_channels, mixer, convs, norms, mask_token, transformer })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Patch embeddings `[B, N_f, d]` from signals `[B, C, T]`, with
    /// `N_f = floor(T / 40)`. The signal is cut to `40 N_f` samples; the
    /// convolution padding supplies the zeros past the end. Each output
    /// step depends only on input samples before the end of its patch.
    pub fn tokenize(&self, g: &Graph, store: &ParamStore, x: &Tensor) -> Result<Var> {
        let sh = x.shape();
        if sh.len() != 3 {
            return Err(Error::Shape(format!("expected [B, C, T], got {sh:?}")));
        }
        let (c, t) = (sh[1], sh[2]);
        if c != self.n_channels {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.n_channels)));
        }
        let n = n_patches(t);
        if n == 0 {
            return Err(Error::Shape(format!("{t} samples is shorter than one {PATCH_STRIDE}-sample patch")));
        }
        if n > self.config.max_patches {
            return Err(Error::Shape(format!("{n} patches exceeds the limit of {}", self.config.max_patches)));
        }
        let mut v = g.constant(x.clone());
        if n * PATCH_STRIDE != t {
            v = g.narrow(v, 2, 0, n * PATCH_STRIDE);
        }
        v = self.mixer.forward(g, store, v);
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let y = g.permute(conv.forward(g, store, v), &[0, 2, 1]);
            let y = g.gelu(norm.forward(g, store, y));
            v = g.permute(y, &[0, 2, 1]);
        }
        Ok(g.permute(v, &[0, 2, 1]))
    }

    /// Temporal transformer over `[B, N, d]`. Rows flagged in `mask`
    /// (length `B * N`) are replaced by the shared mask token before the
    /// positions are added.
    pub fn encode(&self, g: &Graph, store: &ParamStore, tokens: Var, mask: Option<&[bool]>) -> Result<Var> {
        let sh = g.shape(tokens);
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let mut x = tokens;
        if let Some(m) = mask {
            if m.len() != b * n {
                return Err(Error::Shape(format!("mask of {} for {b} x {n} patches", m.len())));
            }
            x = g.replace_rows(x, m, g.param(store, self.mask_token));
        }
        let x = g.add_suffix(x, g.constant(sinusoidal_table(n, d)));
        Ok(self.transformer.forward(g, store, x).0)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let tokens = self.tokenize(g, store, x)?;
        self.encode(g, store, tokens, mask)
    }
}
