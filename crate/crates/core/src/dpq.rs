//! Decoupled product quantization and the VQ-VAE built on the fine encoder.
//!
//! Each of the G groups projects an embedding into its own codex space,
//! looks up the nearest code by cosine (l2-normalized Euclidean) distance,
//! and maps the code back to the embedding width. The quantized embedding is
//! the sum of the group contributions. Codes are updated by exponential
//! moving averages of the normalized projections assigned to them; only the
//! commitment side of the codebook loss produces gradients.

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use strata_autograd::nn::{
    sinusoidal_table, ConvTranspose1d, LayerNorm, Linear, TransformerConfig, TransformerEncoder,
};
use strata_autograd::optim::{AdamW, OptimizerConfig};
use strata_autograd::{Graph, ParamStore, Tensor, Var};

use crate::augment::{pretrain_windows, AugmentConfig};
use crate::fine::{n_patches, FineConfig, FineEncoder, PATCH_STRIDE};
use crate::recording::Recording;
use crate::train::{ensure_finite, mean, optimizer_step, rng_for, stack_windows, MetricRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcMode {
    /// Signed dot products.
    Raw,
    /// Absolute dot products (bounded below by zero).
    Abs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpqConfig {
    pub groups: usize,
    pub codex_size: usize,
    pub codex_dim: usize,
    /// Commitment weight.
    pub beta: f64,
    /// EMA decay.
    pub gamma: f64,
    /// Laplace smoothing of EMA cluster sizes.
    pub epsilon: f64,
    pub pc_mode: PcMode,
}

impl Default for DpqConfig {
    fn default() -> Self {
        Self { groups: 4, codex_size: 256, codex_dim: 64, beta: 1.0, gamma: 0.99, epsilon: 1e-5, pc_mode: PcMode::Raw }
    }
}

impl DpqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.codex_size == 0 || self.codex_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "groups {}, codex size {} and codex dim {} must be positive",
                self.groups, self.codex_size, self.codex_dim
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) || self.epsilon <= 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma {} must lie in [0, 1), epsilon {} > 0, beta {} >= 0",
                self.gamma, self.epsilon, self.beta
            )));
        }
        Ok(())
    }
}

/// One codebook with its EMA statistics, all row-major `[n, dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codex {
    pub n: usize,
    pub dim: usize,
    pub codes: Vec<f64>,
    pub sizes: Vec<f64>,
    pub sums: Vec<f64>,
}

impl Codex {
    /// Random unit codes with unit EMA sizes, so the invariant
    /// `codes = sums / smoothed sizes` holds from the start.
    pub fn random<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Self {
        let mut codes = Tensor::randn(&[n, dim], 1.0, rng).into_data();
        for row in codes.chunks_mut(dim) {
            normalize(row);
        }
        Self { n, dim, sums: codes.clone(), codes, sizes: vec![1.0; n] }
    }

    pub fn code(&self, j: usize) -> &[f64] {
        &self.codes[j * self.dim..(j + 1) * self.dim]
    }

    fn smoothed_sizes(&self, eps: f64) -> Vec<f64> {
        let total: f64 = self.sizes.iter().sum();
        let denom = total + self.n as f64 * eps;
        self.sizes.iter().map(|&s| (s + eps) / denom * total).collect()
    }

    /// Largest deviation from `codes = sums / smoothed sizes`.
    pub fn invariant_error(&self, eps: f64) -> f64 {
        let sm = self.smoothed_sizes(eps);
        let mut worst = 0.0f64;
        for j in 0..self.n {
            for t in 0..self.dim {
                let i = j * self.dim + t;
                worst = worst.max((self.codes[i] - self.sums[i] / sm[j]).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodexState {
    pub gamma: f64,
    pub epsilon: f64,
    pub groups: Vec<Codex>,
}

impl CodexState {
    pub fn random<R: Rng + ?Sized>(cfg: &DpqConfig, rng: &mut R) -> Self {
        Self {
            gamma: cfg.gamma,
            epsilon: cfg.epsilon,
            groups: (0..cfg.groups).map(|_| Codex::random(cfg.codex_size, cfg.codex_dim, rng)).collect(),
        }
    }

    pub fn invariant_error(&self) -> f64 {
        self.groups.iter().map(|c| c.invariant_error(self.epsilon)).fold(0.0, f64::max)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest normalized code to the normalized query; ties go to
/// the smaller index.
pub fn nearest_code(normalized_codes: &[f64], dim: usize, query: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, code) in normalized_codes.chunks(dim).enumerate() {
        let d = sq_dist(code, query);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Codes of a codex, each scaled to unit length.
pub fn normalized_codes(codex: &Codex) -> Vec<f64> {
    let mut out = codex.codes.clone();
    for row in out.chunks_mut(codex.dim) {
        normalize(row);
    }
    out
}

/// Per-group embedding-to-codex (`d -> d`, tanh, `-> d_codex`) and
/// codex-to-embedding (`d_codex -> d`) maps.
#[derive(Debug, Clone)]
pub struct DpqProjections {
    pub to_codex: Vec<(Linear, Linear)>,
    pub from_codex: Vec<Linear>,
}

impl DpqProjections {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, cfg: &DpqConfig, rng: &mut R) -> Self {
        let mut to_codex = Vec::new();
        let mut from_codex = Vec::new();
        for g in 0..cfg.groups {
            let p = format!("dpq.g{g}");
            to_codex.push((
                Linear::new(store, &format!("{p}.in1"), dim, dim, true, rng),
                Linear::new(store, &format!("{p}.in2"), dim, cfg.codex_dim, true, rng),
            ));
            from_codex.push(Linear::new(store, &format!("{p}.out"), cfg.codex_dim, dim, true, rng));
        }
        Self { to_codex, from_codex }
    }

    pub fn project(&self, g: &Graph, store: &ParamStore, group: usize, e: Var) -> Var {
        let (a, b) = &self.to_codex[group];
        b.forward(g, store, g.tanh(a.forward(g, store, e)))
    }
}

/// Output of [`quantize`] over `rows` embeddings.
pub struct QuantizeResult {
    pub rows: usize,
    pub groups: usize,
    /// Code ids, row-major `[rows, groups]`.
    pub indices: Vec<usize>,
    /// Pre-quantization projections per group, `[rows, d_codex]`.
    pub projections: Vec<Var>,
    /// Straight-through codes per group, `[rows, d_codex]`.
    pub codes: Vec<Var>,
    /// Embedded codes per group, `[rows, d]`.
    pub embedded: Vec<Var>,
    /// Sum of the embedded codes, `[rows, d]`.
    pub z: Var,
    /// l2-normalized projections per group, row-major `[rows, d_codex]`.
    pub normalized: Vec<Vec<f64>>,
}

impl QuantizeResult {
    pub fn index(&self, row: usize, group: usize) -> usize {
        self.indices[row * self.groups + group]
    }
}

/// Quantizes embeddings `e: [rows, d]`.
pub fn quantize(g: &Graph, store: &ParamStore, e: Var, codex: &CodexState, proj: &DpqProjections) -> QuantizeResult {
    let rows = g.shape(e)[0];
    let groups = codex.groups.len();
    let mut indices = vec![0usize; rows * groups];
    let (mut projections, mut codes, mut embedded, mut normalized) = (vec![], vec![], vec![], vec![]);
    for (gi, cx) in codex.groups.iter().enumerate() {
        let zc = proj.project(g, store, gi, e);
        let unit_codes = normalized_codes(cx);
        let mut q = g.value(zc).clone().into_data();
        for row in q.chunks_mut(cx.dim) {
            normalize(row);
        }
        let mut chosen = Vec::with_capacity(rows * cx.dim);
        for (r, query) in q.chunks(cx.dim).enumerate() {
            let j = nearest_code(&unit_codes, cx.dim, query);
            indices[r * groups + gi] = j;
            chosen.extend_from_slice(cx.code(j));
        }
        let zq = g.straight_through(zc, &Tensor::new(&[rows, cx.dim], chosen));
        embedded.push(proj.from_codex[gi].forward(g, store, zq));
        projections.push(zc);
        codes.push(zq);
        normalized.push(q);
    }
    let mut z = embedded[0];
    for &v in &embedded[1..] {
        z = g.add(z, v);
    }
    QuantizeResult { rows, groups, indices, projections, codes, embedded, z, normalized }
}

/// Element-wise absolute value.
fn abs(g: &Graph, a: Var) -> Var {
    let value = g.value(a).map(f64::abs);
    g.custom(&[a], value, Box::new(|ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |gr, x| gr * x.signum()))]))
}

pub struct VqLosses {
    pub rgs: Var,
    pub vq: Var,
    pub pc: Var,
    pub total: Var,
}

/// Reconstruction (`sum` over patches, mean over the batch), commitment
/// (`beta * ||z_c - sg(c)||^2`, same reduction) and partial-correlation
/// losses.
pub fn vq_losses(
    g: &Graph,
    q: &QuantizeResult,
    codex: &CodexState,
    recon: Var,
    target: &Tensor,
    batch: usize,
    beta: f64,
    pc_mode: PcMode,
) -> Result<VqLosses> {
    if g.shape(recon) != target.shape() {
        return Err(Error::Shape(format!("reconstruction {:?} vs target {:?}", g.shape(recon), target.shape())));
    }
    let per = 1.0 / batch.max(1) as f64;
    let rgs = g.scale(g.sum_all(g.square(g.sub(recon, g.constant(target.clone())))), per);
    let mut vq = g.constant(Tensor::scalar(0.0));
    for (gi, cx) in codex.groups.iter().enumerate() {
        let chosen: Vec<f64> = (0..q.rows).flat_map(|r| cx.code(q.index(r, gi)).to_vec()).collect();
        let diff = g.sub(q.projections[gi], g.constant(Tensor::new(&[q.rows, cx.dim], chosen)));
        vq = g.add(vq, g.sum_all(g.square(diff)));
    }
    let vq = g.scale(vq, beta * per);
    let mut pc = g.constant(Tensor::scalar(0.0));
    for j in 0..q.groups {
        for k in j + 1..q.groups {
            let dots = g.sum_axis(g.mul(q.embedded[j], q.embedded[k]), 1);
            let dots = match pc_mode {
                PcMode::Raw => dots,
                PcMode::Abs => abs(g, dots),
            };
            pc = g.add(pc, g.sum_all(dots));
        }
    }
    let pc = g.scale(pc, per);
    let total = g.add(g.add(rgs, vq), pc);
    Ok(VqLosses { rgs, vq, pc, total })
}

/// EMA update from one batch's assignments and normalized projections.
pub fn ema_update(codex: &mut CodexState, indices: &[usize], normalized: &[Vec<f64>]) {
    let groups = codex.groups.len();
    let (gamma, eps) = (codex.gamma, codex.epsilon);
    for (gi, cx) in codex.groups.iter_mut().enumerate() {
        let mut counts = vec![0.0; cx.n];
        let mut sums = vec![0.0; cx.n * cx.dim];
        for (r, q) in normalized[gi].chunks(cx.dim).enumerate() {
            let j = indices[r * groups + gi];
            counts[j] += 1.0;
            for (s, v) in sums[j * cx.dim..(j + 1) * cx.dim].iter_mut().zip(q) {
                *s += v;
            }
        }
        for (s, c) in cx.sizes.iter_mut().zip(&counts) {
            *s = gamma * *s + (1.0 - gamma) * c;
        }
        for (s, v) in cx.sums.iter_mut().zip(&sums) {
            *s = gamma * *s + (1.0 - gamma) * v;
        }
        let sm = cx.smoothed_sizes(eps);
        for j in 0..cx.n {
            for t in 0..cx.dim {
                let i = j * cx.dim + t;
                cx.codes[i] = cx.sums[i] / sm[j];
            }
        }
    }
}

/// Perplexity `exp(H)` of a code-usage histogram.
pub fn perplexity(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

pub const DECONV_KERNELS: [usize; 4] = [3, 3, 3, 9];
pub const DECONV_STRIDES: [usize; 4] = [2, 2, 2, 5];
const DECONV_PADS: [usize; 4] = [1, 1, 1, 2];
const DECONV_OUT_PADS: [usize; 4] = [1, 1, 1, 0];

/// Temporal transformer plus transposed-convolution upsampler back to `C`
/// channels at the input sample rate.
#[derive(Debug, Clone)]
pub struct Decoder {
    transformer: TransformerEncoder,
    deconvs: Vec<ConvTranspose1d>,
    norms: Vec<LayerNorm>,
    out: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: TransformerConfig,
        n_channels: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let transformer = TransformerEncoder::new(store, "dpq.dec.temporal", config, rng);
        let mut deconvs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            deconvs.push(ConvTranspose1d::new(
                store,
                &format!("dpq.dec.deconv{i}"),
                d,
                d,
                DECONV_KERNELS[i],
                DECONV_STRIDES[i],
                DECONV_PADS[i],
                DECONV_OUT_PADS[i],
                rng,
            ));
            norms.push(LayerNorm::new(store, &format!("dpq.dec.norm{i}"), d));
        }
        let out = Linear::new(store, "dpq.dec.out", d, n_channels, true, rng);
        Self { transformer, deconvs, norms, out }
    }

    /// `[B, N, d]` quantized embeddings to `[B, C, 40 N]` signals.
    pub fn decode(&self, g: &Graph, store: &ParamStore, z: Var) -> Var {
        let sh = g.shape(z);
        let (n, d) = (sh[1], sh[2]);
        let x = g.add_suffix(z, g.constant(sinusoidal_table(n, d)));
        let (x, _) = self.transformer.forward(g, store, x);
        let mut v = g.permute(x, &[0, 2, 1]);
        for (i, (dc, norm)) in self.deconvs.iter().zip(&self.norms).enumerate() {
            v = dc.forward(g, store, v);
            if i + 1 < self.deconvs.len() {
                let y = g.gelu(norm.forward(g, store, g.permute(v, &[0, 2, 1])));
                v = g.permute(y, &[0, 2, 1]);
            }
        }
        let y = self.out.forward(g, store, g.permute(v, &[0, 2, 1]));
        g.permute(y, &[0, 2, 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqVaeConfig {
    pub encoder: FineConfig,
    pub dpq: DpqConfig,
    pub decoder: TransformerConfig,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            encoder: FineConfig::default(),
            dpq: DpqConfig::default(),
            decoder: TransformerConfig { layers: 4, dim: 256, heads: 8, ffn_dim: 1024 },
        }
    }
}

impl VqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.dpq.validate()?;
        if self.decoder.dim != self.encoder.dim() {
            return Err(Error::InvalidConfig("decoder width differs from encoder width".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VqVae {
    pub config: VqVaeConfig,
    pub params: ParamStore,
    pub encoder: FineEncoder,
    pub proj: DpqProjections,
    pub codex: CodexState,
    pub decoder: Decoder,
}

/// Values of one forward pass.
pub struct VqStep {
    pub quant: QuantizeResult,
    pub losses: VqLosses,
    pub recon: Var,
}

impl VqVae {
    pub fn new<R: Rng + ?Sized>(config: VqVaeConfig, n_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = FineEncoder::new(&mut params, config.encoder.clone(), n_channels, rng)?;
        let proj = DpqProjections::new(&mut params, config.encoder.dim(), &config.dpq, rng);
        let codex = CodexState::random(&config.dpq, rng);
        let decoder = Decoder::new(&mut params, config.decoder, n_channels, rng);
        Ok(Self { config, params, encoder, proj, codex, decoder })
    }

    pub fn n_channels(&self) -> usize {
        self.encoder.n_channels()
    }

    /// Full forward pass with losses for signals `[B, C, T]`.
    pub fn step(&self, g: &Graph, x: &Tensor) -> Result<VqStep> {
        let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let e = self.encoder.forward(g, &self.params, x, None)?;
        let n = n_patches(t);
        let d = self.encoder.dim();
        let quant = quantize(g, &self.params, g.reshape(e, &[b * n, d]), &self.codex, &self.proj);
        let recon = self.decoder.decode(g, &self.params, g.reshape(quant.z, &[b, n, d]));
        let target = crop_target(x, n * PATCH_STRIDE);
        debug_assert_eq!(target.shape(), [b, c, n * PATCH_STRIDE]);
        let dpq = &self.config.dpq;
        let losses = vq_losses(g, &quant, &self.codex, recon, &target, b, dpq.beta, dpq.pc_mode)?;
        Ok(VqStep { quant, losses, recon })
    }

    /// Code ids `[B * N_f, G]` for signals `[B, C, T]`, without gradients.
    pub fn code_indices(&self, x: &Tensor) -> Result<Vec<usize>> {
        let g = Graph::inference();
        let (b, t) = (x.shape()[0], x.shape()[2]);
        let e = self.encoder.forward(&g, &self.params, x, None)?;
        let n = n_patches(t);
        let e = g.reshape(e, &[b * n, self.encoder.dim()]);
        Ok(quantize(&g, &self.params, e, &self.codex, &self.proj).indices)
    }

    /// Writes parameters and codex state to `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        self.params.save(dir)?;
        let codex = serde_json::to_string(&self.codex)?;
        std::fs::write(dir.join("codex.json"), codex).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn load(&mut self, dir: &std::path::Path) -> Result<()> {
        self.params.load(dir, "")?;
        let text = std::fs::read_to_string(dir.join("codex.json")).map_err(|e| Error::Io(e.to_string()))?;
        let codex: CodexState = serde_json::from_str(&text)?;
        if codex.groups.len() != self.codex.groups.len() {
            return Err(Error::Format("codex group count differs from configuration".into()));
        }
        self.codex = codex;
        Ok(())
    }
}

fn crop_target(x: &Tensor, len: usize) -> Tensor {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if len == t {
        return x.clone();
    }
    let mut out = Vec::with_capacity(b * c * len);
    for row in x.data().chunks(t) {
        out.extend_from_slice(&row[..len]);
    }
    Tensor::new(&[b, c, len], out)
}

/// Shared schedule for the fine-stage pretraining loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTrainConfig {
    pub optimizer: OptimizerConfig,
    /// Crops per epoch; 0 means one crop per segment.
    pub samples_per_epoch: usize,
    pub seed: u64,
}

impl FineTrainConfig {
    /// VQ-VAE optimizer defaults.
    pub fn vqvae() -> Self {
        Self {
            optimizer: OptimizerConfig {
                batch_size: 64,
                max_lr: 3e-4,
                min_lr: 5e-5,
                beta1: 0.9,
                beta2: 0.99,
                weight_decay: 0.01,
                epochs: 400,
                warmup_epochs: 40,
                grad_clip: None,
            },
            samples_per_epoch: 0,
            seed: 0,
        }
    }

    /// Mask-modeling optimizer defaults.
    pub fn mae() -> Self {
        let mut cfg = Self::vqvae();
        cfg.optimizer.weight_decay = 0.05;
        cfg
    }
}

/// Draws the crops of one epoch as batches of `[C, T]` views.
pub(crate) fn epoch_batches<'a>(
    rec: &'a Recording,
    augment: &AugmentConfig,
    cfg: &FineTrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<ArrayView2<'a, f32>>>> {
    let layout = pretrain_windows(rec, augment)?;
    let per_epoch = if cfg.samples_per_epoch == 0 { layout.len() } else { cfg.samples_per_epoch };
    let mut rng = rng_for(cfg.seed, &[3, epoch as u64]);
    let crops: Vec<ArrayView2<'a, f32>> = (0..per_epoch)
        .map(|i| {
            let seg = rng.random_range(0..layout.len());
            layout.crop(rec, seg, epoch * per_epoch + i)
        })
        .collect();
    Ok(crops.chunks(cfg.optimizer.batch_size.max(1)).map(<[_]>::to_vec).collect())
}

/// VQ-VAE pretraining on 4 s crops of `rec` (already restricted to the
/// selected channels). The log starts with an evaluation of the untrained
/// model on the first epoch's crops (epoch 0), followed by per-epoch
/// training means (epochs 1..): `rgs`, `vq`, `pc`, `total`,
/// `perplexity_g{i}`, `ema_invariant`, `lr`.
pub fn train_vqvae(
    model: &mut VqVae,
    rec: &Recording,
    augment: &AugmentConfig,
    cfg: &FineTrainConfig,
) -> Result<Vec<MetricRecord>> {
    if rec.n_channels() != model.n_channels() {
        return Err(Error::Shape(format!(
            "recording has {} channels, model expects {}",
            rec.n_channels(),
            model.n_channels()
        )));
    }
    let opt_cfg = &cfg.optimizer;
    let mut opt = AdamW::new(&model.params, opt_cfg);
    let groups = model.config.dpq.groups;
    let mut log = Vec::new();

    let first = epoch_batches(rec, augment, cfg, 0)?;
    let mut init = [Vec::new(), Vec::new(), Vec::new()];
    for batch in &first {
        let g = Graph::inference();
        let s = model.step(&g, &stack_windows(batch))?;
        for (acc, v) in init.iter_mut().zip([s.losses.rgs, s.losses.vq, s.losses.pc]) {
            acc.push(g.value(v).item());
        }
    }
    log.push(
        MetricRecord::new("vqvae", 0)
            .with("rgs", mean(&init[0]))
            .with("vq", mean(&init[1]))
            .with("pc", mean(&init[2]))
            .with("total", mean(&init[0]) + mean(&init[1]) + mean(&init[2])),
    );

    for epoch in 0..opt_cfg.epochs {
        let batches = epoch_batches(rec, augment, cfg, epoch)?;
        let steps = batches.len();
        let mut sums = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        let mut usage = vec![vec![0usize; model.config.dpq.codex_size]; groups];
        let mut invariant = 0.0f64;
        let mut lr = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let g = Graph::new();
            let s = model.step(&g, &stack_windows(batch))?;
            let vals: Vec<f64> =
                [s.losses.rgs, s.losses.vq, s.losses.pc, s.losses.total].iter().map(|&v| g.value(v).item()).collect();
            ensure_finite("vqvae", epoch + 1, "total loss", vals[3])?;
            for (acc, v) in sums.iter_mut().zip(&vals) {
                acc.push(*v);
            }
            for chunk in s.quant.indices.chunks(groups) {
                for (gi, &j) in chunk.iter().enumerate() {
                    usage[gi][j] += 1;
                }
            }
            let pos = epoch as f64 + step as f64 / steps as f64;
            lr = opt_cfg.lr_at(pos);
            optimizer_step(&g, s.losses.total, &mut model.params, &mut opt, opt_cfg, pos);
            ema_update(&mut model.codex, &s.quant.indices, &s.quant.normalized);
            invariant = invariant.max(model.codex.invariant_error());
        }
        let mut rec = MetricRecord::new("vqvae", epoch + 1)
            .with("rgs", mean(&sums[0]))
            .with("vq", mean(&sums[1]))
            .with("pc", mean(&sums[2]))
            .with("total", mean(&sums[3]))
            .with("ema_invariant", invariant)
            .with("lr", lr);
        for (gi, u) in usage.iter().enumerate() {
            rec = rec.with(&format!("perplexity_g{gi}"), perplexity(u));
        }
        log::info!("vqvae epoch {}: rgs {:.3} total {:.3}", epoch + 1, mean(&sums[0]), mean(&sums[3]));
        log.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use strata_autograd::gradcheck::{compare, numeric_gradient};

    #[test]
    fn nearest_axis_and_ties() {
        let codes = [1.0, 0.0, 0.0, 1.0];
        let mut q = [0.9, 0.1];
        normalize(&mut q);
        assert_eq!(nearest_code(&codes, 2, &q), 0);
        // codes 3 and 7 both at 45 degrees from the query
        let mut cs = vec![0.0; 8 * 2];
        for j in 0..8 {
            cs[2 * j] = -1.0;
        }
        cs[6] = 1.0;
        cs[7] = 0.0;
        cs[14] = 0.0;
        cs[15] = 1.0;
        let mut q = [1.0, 1.0];
        normalize(&mut q);
        assert_eq!(nearest_code(&cs, 2, &q), 3);
    }

    fn brute_force(codex: &Codex, query: &[f64]) -> usize {
        let mut q = query.to_vec();
        normalize(&mut q);
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for j in 0..codex.n {
            let c = codex.code(j);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = c.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / norm;
            if cos > best_cos {
                best_cos = cos;
                best = j;
            }
        }
        best
    }

    #[test]
    fn lookup_matches_cosine_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut codex = Codex::random(64, 8, &mut rng);
        codex.codes.iter_mut().for_each(|v| *v *= 1.0 + rng.random::<f64>());
        let unit = normalized_codes(&codex);
        for _ in 0..1000 {
            let q = Tensor::randn(&[8], 1.0, &mut rng).into_data();
            let mut qn = q.clone();
            normalize(&mut qn);
            assert_eq!(nearest_code(&unit, 8, &qn), brute_force(&codex, &q));
        }
    }

    fn small_dpq(groups: usize) -> DpqConfig {
        DpqConfig { groups, codex_size: 16, codex_dim: 4, ..Default::default() }
    }

    #[test]
    fn quantized_embedding_is_group_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_dpq(3);
        let mut ps = ParamStore::new();
        let proj = DpqProjections::new(&mut ps, 6, &cfg, &mut rng);
        let codex = CodexState::random(&cfg, &mut rng);
        let g = Graph::inference();
        let e = g.constant(Tensor::randn(&[5, 6], 1.0, &mut rng));
        let q = quantize(&g, &ps, e, &codex, &proj);
        let mut sum = vec![0.0; 30];
        for v in &q.embedded {
            for (s, x) in sum.iter_mut().zip(g.value(*v).data()) {
                *s += x;
            }
        }
        assert_eq!(g.value(q.z).data(), sum.as_slice());
        assert!(q.indices.iter().all(|&i| i < 16));
        for gi in 0..3 {
            let zc = g.value(q.projections[gi]).clone();
            for r in 0..5 {
                assert_eq!(q.index(r, gi), brute_force(&codex.groups[gi], zc.row(r)));
                assert_eq!(g.value(q.codes[gi]).row(r), codex.groups[gi].code(q.index(r, gi)));
            }
        }
    }

    fn loss_oracle(
        q: &QuantizeResult,
        g: &Graph,
        codex: &CodexState,
        recon: &Tensor,
        target: &Tensor,
        b: usize,
        beta: f64,
    ) -> [f64; 3] {
        let rgs: f64 = recon.data().iter().zip(target.data()).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / b as f64;
        let mut vq = 0.0;
        for (gi, cx) in codex.groups.iter().enumerate() {
            let zc = g.value(q.projections[gi]).clone();
            for r in 0..q.rows {
                vq += sq_dist(zc.row(r), cx.code(q.index(r, gi)));
            }
        }
        let mut pc = 0.0;
        for r in 0..q.rows {
            for j in 0..q.groups {
                for k in j + 1..q.groups {
                    let a = g.value(q.embedded[j]).row(r).to_vec();
                    let c = g.value(q.embedded[k]).row(r).to_vec();
                    pc += a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        [rgs, beta * vq / b as f64, pc / b as f64]
    }

    #[test]
    fn losses_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let groups = 1 + trial % 3;
            let cfg = small_dpq(groups);
            let mut ps = ParamStore::new();
            let proj = DpqProjections::new(&mut ps, 6, &cfg, &mut rng);
            let codex = CodexState::random(&cfg, &mut rng);
            let g = Graph::new();
            let e = g.constant(Tensor::randn(&[6, 6], 1.0, &mut rng));
            let q = quantize(&g, &ps, e, &codex, &proj);
            let recon = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
            let target = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
            let l = vq_losses(&g, &q, &codex, g.constant(recon.clone()), &target, 2, 0.7, PcMode::Raw).unwrap();
            let want = loss_oracle(&q, &g, &codex, &recon, &target, 2, 0.7);
            for (v, w) in [l.rgs, l.vq, l.pc].iter().zip(want) {
                assert!((g.value(*v).item() - w).abs() < 1e-10);
            }
            let total = g.value(l.total).item();
            assert!((total - want.iter().sum::<f64>()).abs() < 1e-10);
            assert!(vq_losses(&g, &q, &codex, g.constant(recon), &Tensor::zeros(&[1]), 2, 1.0, PcMode::Raw).is_err());
        }
    }

    fn two_group_result(g: &Graph, a: &[f64], b: &[f64]) -> QuantizeResult {
        let n = a.len() / 2;
        let ea = g.constant(Tensor::new(&[n, 2], a.to_vec()));
        let eb = g.constant(Tensor::new(&[n, 2], b.to_vec()));
        QuantizeResult {
            rows: n,
            groups: 2,
            indices: vec![0; 2 * n],
            projections: vec![ea, eb],
            codes: vec![ea, eb],
            embedded: vec![ea, eb],
            z: g.add(ea, eb),
            normalized: vec![a.to_vec(), b.to_vec()],
        }
    }

    #[test]
    fn partial_correlation_cases() {
        let g = Graph::inference();
        let codex = CodexState { gamma: 0.99, epsilon: 1e-5, groups: vec![] };
        let target = Tensor::zeros(&[1, 1, 1]);
        let recon = g.constant(target.clone());
        let orth = two_group_result(&g, &[1.0, 0.0, 0.0, 2.0], &[0.0, 3.0, -1.0, 0.0]);
        let l = vq_losses(&g, &orth, &codex, recon, &target, 1, 1.0, PcMode::Raw).unwrap();
        assert_eq!(g.value(l.pc).item(), 0.0);
        assert_eq!(g.value(l.rgs).item(), 0.0);
        let same = two_group_result(&g, &[0.6, 0.8], &[0.6, 0.8]);
        let l = vq_losses(&g, &same, &codex, recon, &target, 1, 1.0, PcMode::Raw).unwrap();
        assert!((g.value(l.pc).item() - 1.0).abs() < 1e-12);
        let opposite = two_group_result(&g, &[0.6, 0.8], &[-0.6, -0.8]);
        let raw = vq_losses(&g, &opposite, &codex, recon, &target, 1, 1.0, PcMode::Raw).unwrap();
        let abs = vq_losses(&g, &opposite, &codex, recon, &target, 1, 1.0, PcMode::Abs).unwrap();
        assert!((g.value(raw.pc).item() + 1.0).abs() < 1e-12);
        assert!((g.value(abs.pc).item() - 1.0).abs() < 1e-12);
    }

    /// Commitment + partial correlation rebuilt without the straight-through
    /// op: each code enters as `z_c + (c - z_c(x0))`, which has the code's
    /// value at `x0` and the identity derivative the straight-through
    /// contract prescribes.
    fn st_oracle(
        g: &Graph,
        v: Var,
        ps: &ParamStore,
        proj: &DpqProjections,
        codex: &CodexState,
        x0: &Tensor,
        beta: f64,
        b: f64,
        mode: PcMode,
    ) -> Var {
        let g0 = Graph::inference();
        let mut loss = g.constant(Tensor::scalar(0.0));
        let mut emb = Vec::new();
        for (gi, cx) in codex.groups.iter().enumerate() {
            let zc0 = g0.value(proj.project(&g0, ps, gi, g0.constant(x0.clone()))).clone();
            let rows = zc0.shape()[0];
            let mut offset = Vec::new();
            let mut chosen = Vec::new();
            for r in 0..rows {
                let mut q = zc0.row(r).to_vec();
                normalize(&mut q);
                let c = cx.code(brute_force(cx, &q));
                chosen.extend_from_slice(c);
                offset.extend(c.iter().zip(zc0.row(r)).map(|(a, z)| a - z));
            }
            let zc = proj.project(g, ps, gi, v);
            let commit = g.sub(zc, g.constant(Tensor::new(&[rows, cx.dim], chosen)));
            loss = g.add(loss, g.scale(g.sum_all(g.square(commit)), beta / b));
            let zq = g.add(zc, g.constant(Tensor::new(&[rows, cx.dim], offset)));
            emb.push(proj.from_codex[gi].forward(g, ps, zq));
        }
        for j in 0..emb.len() {
            for k in j + 1..emb.len() {
                let dots = g.sum_axis(g.mul(emb[j], emb[k]), 1);
                let dots = if mode == PcMode::Abs { abs(g, dots) } else { dots };
                loss = g.add(loss, g.scale(g.sum_all(dots), 1.0 / b));
            }
        }
        loss
    }

    #[test]
    fn commitment_and_pc_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let cfg = small_dpq(2 + trial % 2);
            let mut ps = ParamStore::new();
            let proj = DpqProjections::new(&mut ps, 5, &cfg, &mut rng);
            let codex = CodexState::random(&cfg, &mut rng);
            let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let mode = if trial % 4 == 0 { PcMode::Abs } else { PcMode::Raw };
            let analytic = {
                let g = Graph::new();
                let leaf = g.leaf(x.clone());
                let q = quantize(&g, &ps, leaf, &codex, &proj);
                let z = g.constant(Tensor::zeros(&[1]));
                let l = vq_losses(&g, &q, &codex, z, &Tensor::zeros(&[1]), 2, 0.8, mode).unwrap();
                let grads = g.backward(g.add(l.vq, l.pc));
                grads.get(leaf).unwrap().clone()
            };
            let numeric = numeric_gradient(&x, 1e-6, |p| {
                let g = Graph::inference();
                let v = st_oracle(&g, g.constant(p.clone()), &ps, &proj, &codex, &x, 0.8, 2.0, mode);
                let out = g.value(v).item();
                out
            });
            let r = compare(&analytic, &numeric);
            assert!(r.rel_error <= 1e-4, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_dpq(1);
        let mut ps = ParamStore::new();
        let proj = DpqProjections::new(&mut ps, 4, &cfg, &mut rng);
        let codex = CodexState::random(&cfg, &mut rng);
        let g = Graph::new();
        let e = g.leaf(Tensor::randn(&[2, 4], 1.0, &mut rng));
        let q = quantize(&g, &ps, e, &codex, &proj);
        let loss = g.sum_all(q.codes[0]);
        let grads = g.backward(loss);
        let ge = grads.get(e).expect("embedding gradient");
        assert!(ge.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ema_full_replacement_and_idle_codes() {
        let mut codex = CodexState {
            gamma: 0.0,
            epsilon: 1e-5,
            groups: vec![Codex::random(3, 2, &mut ChaCha8Rng::seed_from_u64(7))],
        };
        let q = vec![0.6, 0.8, 0.8, 0.6];
        ema_update(&mut codex, &[0, 0], &[q]);
        let c0 = codex.groups[0].code(0);
        assert!((c0[0] - 0.7).abs() < 1e-4 && (c0[1] - 0.7).abs() < 1e-4);
        assert!(codex.invariant_error() < 1e-6);

        let mut codex = CodexState { gamma: 0.99, ..codex };
        codex.groups[0] = Codex::random(3, 2, &mut ChaCha8Rng::seed_from_u64(8));
        let before = codex.groups[0].code(2).to_vec();
        ema_update(&mut codex, &[0, 1], &[vec![1.0, 0.0, 0.0, 1.0]]);
        let after = codex.groups[0].code(2);
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b).abs() < 1e-3 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ema_converges_to_assignment_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut codex = CodexState { gamma: 0.9, epsilon: 1e-5, groups: vec![Codex::random(2, 2, &mut rng)] };
        let means = [[0.8, 0.6], [-0.6, 0.8]];
        for _ in 0..400 {
            let q = vec![means[0][0], means[0][1], means[1][0], means[1][1]];
            ema_update(&mut codex, &[0, 1], &[q]);
            assert!(codex.invariant_error() < 1e-6);
        }
        for (j, m) in means.iter().enumerate() {
            let c = codex.groups[0].code(j);
            assert!((c[0] - m[0]).abs() < 1e-3 && (c[1] - m[1]).abs() < 1e-3);
        }
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(&[5, 0, 0]), 1.0);
        assert!((perplexity(&[3, 3, 3, 3]) - 4.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0, 0]), 0.0);
    }

    fn tiny_vqvae(c: usize, groups: usize, seed: u64) -> VqVae {
        let t = TransformerConfig { layers: 1, dim: 16, heads: 2, ffn_dim: 32 };
        let cfg = VqVaeConfig {
            encoder: FineConfig { transformer: t, max_patches: 64 },
            dpq: DpqConfig { groups, codex_size: 8, codex_dim: 4, ..Default::default() },
            decoder: t,
        };
        VqVae::new(cfg, c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn decoder_inverts_the_tokenizer_stride() {
        assert_eq!(DECONV_STRIDES.iter().product::<usize>(), PATCH_STRIDE);
        let m = tiny_vqvae(3, 2, 0);
        let g = Graph::inference();
        let x = Tensor::randn(&[2, 3, 1210], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let s = m.step(&g, &x).unwrap();
        assert_eq!(g.shape(s.recon), vec![2, 3, 1200]);
        assert_eq!(s.quant.rows, 60);
        let zero = m.decoder.decode(&g, &m.params, g.constant(Tensor::zeros(&[1, 30, 16])));
        assert!(g.value(zero).all_finite());
    }

    #[test]
    fn short_run_halves_reconstruction_error() {
        let mut m = tiny_vqvae(2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = {
            let mut v = Vec::new();
            for b in 0..2 {
                for c in 0..2 {
                    for t in 0..160 {
                        v.push(((t as f64) * 0.1 * (c + 1) as f64 + b as f64).sin() + 0.1 * rng.random::<f64>());
                    }
                }
            }
            Tensor::new(&[2, 2, 160], v)
        };
        let cfg = OptimizerConfig {
            max_lr: 3e-3,
            min_lr: 3e-3,
            warmup_epochs: 0,
            epochs: 1,
            ..FineTrainConfig::vqvae().optimizer
        };
        let mut opt = AdamW::new(&m.params, &cfg);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let g = Graph::new();
            let s = m.step(&g, &x).unwrap();
            last = g.value(s.losses.rgs).item();
            first.get_or_insert(last);
            optimizer_step(&g, s.losses.total, &mut m.params, &mut opt, &cfg, 0.5);
            ema_update(&mut m.codex, &s.quant.indices, &s.quant.normalized);
        }
        assert!(last <= 0.5 * first.unwrap(), "{last} vs {first:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny_vqvae(2, 2, 3);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let mut other = tiny_vqvae(2, 2, 4);
        other.load(dir.path()).unwrap();
        let x = Tensor::randn(&[1, 2, 400], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(m.code_indices(&x).unwrap(), other.code_indices(&x).unwrap());
        assert_eq!(m.codex, other.codex);
    }

    proptest! {
        #[test]
        fn ema_invariant_after_random_updates(seed in any::<u64>(), gamma in 0.0f64..0.999) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = DpqConfig { groups: 2, codex_size: 5, codex_dim: 3, gamma, ..Default::default() };
            let mut codex = CodexState::random(&cfg, &mut rng);
            for _ in 0..5 {
                let rows = 7;
                let idx: Vec<usize> = (0..rows * 2).map(|_| rng.random_range(0..5)).collect();
                let normalized: Vec<Vec<f64>> = (0..2).map(|_| {
                    let mut v = Tensor::randn(&[rows, 3], 1.0, &mut rng).into_data();
                    v.chunks_mut(3).for_each(normalize);
                    v
                }).collect();
                ema_update(&mut codex, &idx, &normalized);
                prop_assert!(codex.invariant_error() < 1e-6);
                prop_assert!(codex.groups.iter().all(|c| c.sizes.iter().all(|&s| s >= 0.0)));
            }
        }
    }
}
