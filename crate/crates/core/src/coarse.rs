//! Channel-level model: per-channel convolutional patch tokenizers, a temporal
//! transformer within each channel, a spatial transformer across channels,
//! and the spatial-context pretraining objective (detect channels whose
//! activity was swapped in from an unrelated time window).

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use strata_autograd::nn::{sinusoidal_table, Conv1d, GroupNorm, Linear, TransformerConfig, TransformerEncoder};
use strata_autograd::optim::{AdamW, OptimizerConfig};
use strata_autograd::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::augment::{pretrain_windows, AugmentConfig, PretrainWindows};
use crate::recording::Recording;
use crate::train::{ensure_finite, mean, optimizer_step, rng_for, stack_windows, MetricRecord};
use crate::{Error, Result};

const KERNELS: [usize; 3] = [9, 9, 3];
const STRIDES: [usize; 3] = [5, 5, 2];
const PADS: [usize; 3] = [4, 4, 1];
const FLATTEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseConfig {
    /// Samples per patch (0.25 s at 400 Hz).
    pub patch_len: usize,
    /// Feature maps per channel inside the tokenizer.
    pub tokenizer_width: usize,
    pub temporal: TransformerConfig,
    pub spatial: TransformerConfig,
    /// Reduce the squared difference to a scalar before the context head.
    pub scalar_distance: bool,
    /// Fraction of channels replaced per sample.
    pub replace_ratio: f64,
    /// Start every channel's tokenizer from the same random draw. The
    /// weights remain separate and diverge during training.
    pub shared_tokenizer_init: bool,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        let t = TransformerConfig { layers: 4, dim: 256, heads: 8, ffn_dim: 1024 };
        Self {
            patch_len: 100,
            tokenizer_width: 128,
            temporal: t,
            spatial: t,
            scalar_distance: false,
            replace_ratio: 0.1,
            shared_tokenizer_init: true,
        }
    }
}

impl CoarseConfig {
    pub fn validate(&self) -> Result<()> {
        let total: usize = STRIDES.iter().product::<usize>() * FLATTEN;
        if self.patch_len != total {
            return Err(Error::InvalidConfig(format!(
                "patch length {} must equal the tokenizer downsampling {total}",
                self.patch_len
            )));
        }
        if self.temporal.dim != self.spatial.dim {
            return Err(Error::InvalidConfig("temporal and spatial widths differ".into()));
        }
        for t in [&self.temporal, &self.spatial] {
            if t.dim == 0 || t.heads == 0 || t.dim % t.heads != 0 {
                return Err(Error::InvalidConfig(format!("bad transformer shape {t:?}")));
            }
        }
        if !(self.replace_ratio > 0.0 && self.replace_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!("replace ratio {}", self.replace_ratio)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.temporal.dim
    }
}

/// Forward-pass products for a batch `[B, C, T]`.
pub struct CoarseOutput {
    /// Patch embeddings `[B, C, N_c, d]`.
    pub e_p: Var,
    /// Temporal-transformed embeddings `[B, C, N_c, d]`.
    pub e_t: Var,
    /// Spatial-transformed embeddings `[B, C, N_c, d]`.
    pub e_s: Var,
    /// Spatial attention per layer, `[B * N_c * heads, C, C]`.
    pub spatial_attn: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct CoarseModel {
    pub config: CoarseConfig,
    pub params: ParamStore,
    n_channels: usize,
    convs: Vec<Conv1d>,
    norms: Vec<GroupNorm>,
    proj_w: ParamId,
    proj_b: ParamId,
    temporal: TransformerEncoder,
    spatial: TransformerEncoder,
    spatial_embed: SpatialEmbedding,
    head: Linear,
}

#[derive(Debug, Clone)]
enum SpatialEmbedding {
    Learned(ParamId),
    Coords { map: Linear, coords: Tensor },
}

impl CoarseModel {
    /// Builds a model for `n_channels`. With `coords`, spatial embeddings are
    /// a linear map of the coordinates; otherwise one learnable vector per
    /// channel.
    pub fn new<R: Rng + ?Sized>(
        config: CoarseConfig,
        n_channels: usize,
        coords: Option<&[[f64; 3]]>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if n_channels == 0 {
            return Err(Error::InvalidConfig("no channels".into()));
        }
        if coords.is_some_and(|c| c.len() != n_channels) {
            return Err(Error::InvalidConfig("coordinate count differs from channel count".into()));
        }
        let mut ps = ParamStore::new();
        let (c, h, d) = (n_channels, config.tokenizer_width, config.dim());
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..3 {
            let cin = if i == 0 { c } else { c * h };
            let name = format!("coarse.tok.conv{i}");
            convs.push(Conv1d::new(&mut ps, &name, cin, c * h, KERNELS[i], STRIDES[i], PADS[i], c, rng));
            norms.push(GroupNorm::new(&mut ps, &format!("coarse.tok.norm{i}"), c, c * h));
        }
        let bound = 1.0 / ((FLATTEN * h) as f64).sqrt();
        let proj_w = ps.add("coarse.tok.proj.weight", Tensor::uniform(&[c, FLATTEN * h, d], bound, rng), true);
        let proj_b = ps.add("coarse.tok.proj.bias", Tensor::uniform(&[c, d], bound, rng), false);
        if config.shared_tokenizer_init {
            let ids: Vec<ParamId> = ps.ids().filter(|&id| ps.name(id).starts_with("coarse.tok.")).collect();
            for id in ids {
                let t = ps.get_mut(id);
                let block = t.numel() / c;
                let (first, rest) = t.data_mut().split_at_mut(block);
                for chunk in rest.chunks_mut(block) {
                    chunk.copy_from_slice(first);
                }
            }
        }
        let temporal = TransformerEncoder::new(&mut ps, "coarse.temporal", config.temporal, rng);
        let spatial = TransformerEncoder::new(&mut ps, "coarse.spatial", config.spatial, rng);
        let spatial_embed = match coords {
            Some(co) => SpatialEmbedding::Coords {
                map: Linear::new(&mut ps, "coarse.spatial_embed", 3, d, true, rng),
                coords: Tensor::new(&[c, 3], co.iter().flatten().copied().collect()),
            },
            None => SpatialEmbedding::Learned(ps.add("coarse.spatial_embed", Tensor::randn(&[c, d], 0.5, rng), false)),
        };
        let head_in = if config.scalar_distance { 1 } else { d };
        let head = Linear::new(&mut ps, "coarse.head", head_in, 1, true, rng);
        Ok(Self {
            config,
            params: ps,
            n_channels,
            convs,
            norms,
            proj_w,
            proj_b,
            temporal,
            spatial,
            spatial_embed,
            head,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    /// Number of patches for `t` samples; trailing samples are dropped.
    pub fn n_patches(&self, t: usize) -> usize {
        t / self.config.patch_len
    }

    /// Patch embeddings `[B, C, N_c, d]` from signals `[B, C, T]`. Each
    /// channel goes through its own tokenizer (grouped convolutions).
    pub fn tokenize(&self, g: &Graph, x: &Tensor) -> Result<Var> {
        let sh = x.shape();
        let (b, c, t) = (sh[0], sh[1], sh[2]);
        if c != self.n_channels {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.n_channels)));
        }
        let n = self.n_patches(t);
        if n == 0 {
            return Err(Error::Shape(format!("{t} samples is shorter than one patch")));
        }
        let (h, d) = (self.config.tokenizer_width, self.config.dim());
        let mut v = g.constant(x.clone());
        if n * self.config.patch_len != t {
            v = g.narrow(v, 2, 0, n * self.config.patch_len);
        }
        let ps = &self.params;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            v = g.gelu(norm.forward(g, ps, conv.forward(g, ps, v)));
        }
        // [B, C*h, N*2] -> [C, B*N, 2h]
        let v = g.reshape(v, &[b, c, h, n, FLATTEN]);
        let v = g.permute(v, &[1, 0, 3, 2, 4]);
        let v = g.reshape(v, &[c, b * n, h * FLATTEN]);
        let v = g.bmm(v, g.param(ps, self.proj_w), false);
        let v = g.reshape(v, &[c, b, n, d]);
        let v = g.permute(v, &[1, 2, 0, 3]);
        let v = g.add_suffix(v, g.param(ps, self.proj_b));
        Ok(g.permute(v, &[0, 2, 1, 3]))
    }

    /// Spatial embedding table `[C, d]`.
    pub fn spatial_embedding(&self, g: &Graph) -> Var {
        match &self.spatial_embed {
            SpatialEmbedding::Learned(id) => g.param(&self.params, *id),
            SpatialEmbedding::Coords { map, coords } => map.forward(g, &self.params, g.constant(coords.clone())),
        }
    }

    /// Temporal transformer over the patches of each channel.
    pub fn temporal_stage(&self, g: &Graph, e_p: Var) -> Var {
        let sh = g.shape(e_p);
        let (b, c, n, d) = (sh[0], sh[1], sh[2], sh[3]);
        let x = g.reshape(e_p, &[b * c, n, d]);
        let x = g.add_suffix(x, g.constant(sinusoidal_table(n, d)));
        let (y, _) = self.temporal.forward(g, &self.params, x);
        g.reshape(y, &[b, c, n, d])
    }

    /// Spatial transformer across channels at each temporal index, with the
    /// given spatial embedding table `[C, d]`.
    pub fn spatial_stage(&self, g: &Graph, e_t: Var, embed: Var) -> (Var, Vec<Var>) {
        let sh = g.shape(e_t);
        let (b, c, n, d) = (sh[0], sh[1], sh[2], sh[3]);
        let x = g.reshape(g.permute(e_t, &[0, 2, 1, 3]), &[b * n, c, d]);
        let x = g.add_suffix(x, embed);
        let (y, attn) = self.spatial.forward(g, &self.params, x);
        let y = g.permute(g.reshape(y, &[b, n, c, d]), &[0, 2, 1, 3]);
        (y, attn)
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<CoarseOutput> {
        let e_p = self.tokenize(g, x)?;
        let e_t = self.temporal_stage(g, e_p);
        let (e_s, spatial_attn) = self.spatial_stage(g, e_t, self.spatial_embedding(g));
        Ok(CoarseOutput { e_p, e_t, e_s, spatial_attn })
    }

    /// Context loss and accuracy for the scored channels of a batch.
    pub fn context_loss(&self, g: &Graph, out: &CoarseOutput, scored: &[ScoredChannel]) -> Result<(Var, f64)> {
        let w = g.param(&self.params, self.head.weight);
        let b = g.param(&self.params, self.head.bias.expect("context head has a bias"));
        spatial_context_loss(g, out.e_s, out.e_t, scored, w, b, self.config.scalar_distance)
    }

    /// Spatial attention of one forward pass, averaged over temporal
    /// positions: `attn[b][layer][head]` is a `C x C` row-stochastic matrix.
    pub fn attention_maps(&self, g: &Graph, out: &CoarseOutput) -> Vec<Vec<Vec<Array2<f64>>>> {
        let sh = g.shape(out.e_t);
        let (b, c, n) = (sh[0], sh[1], sh[2]);
        let heads = self.config.spatial.heads;
        let mut maps = vec![vec![vec![Array2::zeros((c, c)); heads]; out.spatial_attn.len()]; b];
        for (l, probs) in out.spatial_attn.iter().enumerate() {
            let p = g.value(*probs);
            for bi in 0..b {
                for ni in 0..n {
                    for hi in 0..heads {
                        let s = (bi * n + ni) * heads + hi;
                        let block = &p.data()[s * c * c..(s + 1) * c * c];
                        let m = &mut maps[bi][l][hi];
                        for (dst, &v) in m.iter_mut().zip(block) {
                            *dst += v / n as f64;
                        }
                    }
                }
            }
        }
        maps
    }
}

/// One channel scored by the context head. `label` is true when the
/// channel kept its own activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoredChannel {
    pub sample: usize,
    pub channel: usize,
    pub label: bool,
}

/// Binary cross-entropy of a linear head on the patch-averaged squared
/// difference between spatial and temporal embeddings (`[B, C, N, d]`).
/// A channel counts as predicted "kept" when its logit is >= 0.
pub fn spatial_context_loss(
    g: &Graph,
    e_s: Var,
    e_t: Var,
    scored: &[ScoredChannel],
    head_w: Var,
    head_b: Var,
    scalar: bool,
) -> Result<(Var, f64)> {
    if scored.is_empty() {
        return Err(Error::Empty("no scored channels".into()));
    }
    let sh = g.shape(e_s);
    let (b, c, d) = (sh[0], sh[1], sh[3]);
    let diff = g.square(g.sub(e_s, e_t));
    let feat = g.reshape(g.mean_axis(diff, 2), &[b * c, d]);
    let rows: Vec<usize> = scored.iter().map(|s| s.sample * c + s.channel).collect();
    let mut feat = g.index_select(feat, 0, &rows);
    if scalar {
        let k = rows.len();
        feat = g.reshape(g.sum_axis(feat, 1), &[k, 1]);
    }
    let logits = g.add_suffix(g.matmul(feat, head_w), head_b);
    let logits = g.reshape(logits, &[rows.len()]);
    let labels: Vec<f64> = scored.iter().map(|s| if s.label { 1.0 } else { 0.0 }).collect();
    let loss = g.bce_with_logits(logits, &labels);
    let correct = g.value(logits).data().iter().zip(scored).filter(|(&z, s)| (z >= 0.0) == s.label).count();
    Ok((loss, correct as f64 / scored.len() as f64))
}

/// A window with some channels' activity replaced by donor activity.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialContextBatch {
    pub corrupted: Array2<f32>,
    pub replaced: Vec<bool>,
    /// Scored channel indices and their labels (true = kept).
    pub scored: Vec<(usize, bool)>,
}

/// Number of channels replaced for `c` channels at `ratio`.
pub fn replaced_count(c: usize, ratio: f64) -> usize {
    ((ratio * c as f64).round() as usize).clamp(1, c.max(1))
}

/// Replaces `max(1, round(ratio * C))` channels, each by the same channel's
/// activity from a randomly chosen donor window, then scores the replaced
/// channels plus an equal number of kept ones.
pub fn make_context_batch(
    window: ArrayView2<'_, f32>,
    donors: &[ArrayView2<'_, f32>],
    ratio: f64,
    seed: u64,
) -> Result<SpatialContextBatch> {
    if donors.is_empty() {
        return Err(Error::Empty("donor pool".into()));
    }
    if let Some(bad) = donors.iter().find(|d| d.dim() != window.dim()) {
        return Err(Error::Shape(format!("donor {:?} vs window {:?}", bad.dim(), window.dim())));
    }
    let c = window.nrows();
    let mut rng = rng_for(seed, &[]);
    let k = replaced_count(c, ratio);
    let mut replaced = vec![false; c];
    let mut corrupted = window.to_owned();
    let mut chosen: Vec<usize> = sample(&mut rng, c, k).into_vec();
    chosen.sort_unstable();
    for &ch in &chosen {
        replaced[ch] = true;
        let donor = &donors[rng.random_range(0..donors.len())];
        corrupted.row_mut(ch).assign(&donor.row(ch));
    }
    let kept: Vec<usize> = (0..c).filter(|&i| !replaced[i]).collect();
    let n_pos = k.min(kept.len());
    let mut pos: Vec<usize> = sample(&mut rng, kept.len(), n_pos).into_iter().map(|i| kept[i]).collect();
    pos.sort_unstable();
    let mut scored: Vec<(usize, bool)> = chosen.iter().map(|&ch| (ch, false)).collect();
    scored.extend(pos.iter().map(|&ch| (ch, true)));
    Ok(SpatialContextBatch { corrupted, replaced, scored })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseTrainConfig {
    pub optimizer: OptimizerConfig,
    /// Crops per epoch; 0 means one crop per segment.
    pub samples_per_epoch: usize,
    pub seed: u64,
}

impl Default for CoarseTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig {
                batch_size: 32,
                max_lr: 3e-4,
                min_lr: 5e-6,
                beta1: 0.9,
                beta2: 0.99,
                weight_decay: 0.05,
                epochs: 100,
                warmup_epochs: 10,
                grad_clip: None,
            },
            samples_per_epoch: 0,
            seed: 0,
        }
    }
}

/// Picks donor windows for a crop: crops from segments whose time span does
/// not overlap the crop.
fn donor_windows<'a>(
    rec: &'a Recording,
    layout: &PretrainWindows,
    crop_start: usize,
    epoch: usize,
    rng: &mut impl Rng,
    count: usize,
) -> Vec<ArrayView2<'a, f32>> {
    let crop_end = crop_start + layout.crop_len;
    let candidates: Vec<usize> = (0..layout.len())
        .filter(|&s| {
            let (a, b) = (layout.segment_starts[s], layout.segment_starts[s] + layout.segment_len);
            b <= crop_start || a >= crop_end
        })
        .collect();
    (0..count.min(candidates.len()))
        .map(|_| {
            let seg = candidates[rng.random_range(0..candidates.len())];
            layout.crop(rec, seg, epoch + 1_000_000)
        })
        .collect()
}

/// Spatial-context pretraining on one recording. Returns the per-epoch log
/// (`loss`, `accuracy`, `lr`).
pub fn train_coarse(
    model: &mut CoarseModel,
    rec: &Recording,
    augment: &AugmentConfig,
    cfg: &CoarseTrainConfig,
) -> Result<Vec<MetricRecord>> {
    let layout = pretrain_windows(rec, augment)?;
    let opt_cfg = &cfg.optimizer;
    let mut opt = AdamW::new(&model.params, opt_cfg);
    let per_epoch = if cfg.samples_per_epoch == 0 { layout.len() } else { cfg.samples_per_epoch };
    let steps = per_epoch.div_ceil(opt_cfg.batch_size.max(1));
    let mut log = Vec::new();
    for epoch in 0..opt_cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[1, epoch as u64]);
        let (mut losses, mut accs) = (Vec::new(), Vec::new());
        let mut lr = 0.0;
        for step in 0..steps {
            let bsz = opt_cfg.batch_size.min(per_epoch - step * opt_cfg.batch_size);
            let mut windows = Vec::with_capacity(bsz);
            let mut scored = Vec::new();
            for bi in 0..bsz {
                let seg = rng.random_range(0..layout.len());
                let start = layout.crop_start(seg, epoch * per_epoch + step * opt_cfg.batch_size + bi);
                let window = rec.signal().slice_move(ndarray::s![.., start..start + layout.crop_len]);
                let donors = donor_windows(rec, &layout, start, epoch, &mut rng, 4);
                let batch = make_context_batch(window, &donors, model.config.replace_ratio, rng.random())?;
                scored.extend(batch.scored.iter().map(|&(channel, label)| ScoredChannel {
                    sample: bi,
                    channel,
                    label,
                }));
                windows.push(batch.corrupted);
            }
            let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
            let x = stack_windows(&views);
            let g = Graph::new();
            let out = model.forward(&g, &x)?;
            let (loss, acc) = model.context_loss(&g, &out, &scored)?;
            let lv = g.value(loss).item();
            ensure_finite("coarse", epoch, "loss", lv)?;
            let pos = epoch as f64 + step as f64 / steps as f64;
            lr = opt_cfg.lr_at(pos);
            optimizer_step(&g, loss, &mut model.params, &mut opt, opt_cfg, pos);
            losses.push(lv);
            accs.push(acc);
        }
        let rec =
            MetricRecord::new("coarse", epoch).with("loss", mean(&losses)).with("accuracy", mean(&accs)).with("lr", lr);
        log::info!("coarse epoch {epoch}: loss {:.4} acc {:.3}", mean(&losses), mean(&accs));
        log.push(rec);
    }
    Ok(log)
}

/// Context accuracy on fresh corrupted crops, without updating the model.
pub fn evaluate_context(
    model: &CoarseModel,
    rec: &Recording,
    augment: &AugmentConfig,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let layout = pretrain_windows(rec, augment)?;
    let mut rng = rng_for(seed, &[2]);
    let mut correct = 0.0;
    let mut total = 0usize;
    for i in 0..n_samples {
        let seg = rng.random_range(0..layout.len());
        let start = layout.crop_start(seg, 5_000_000 + i);
        let window = rec.signal().slice_move(ndarray::s![.., start..start + layout.crop_len]);
        let donors = donor_windows(rec, &layout, start, 5_000_000, &mut rng, 4);
        let batch = make_context_batch(window, &donors, model.config.replace_ratio, rng.random())?;
        let scored: Vec<ScoredChannel> =
            batch.scored.iter().map(|&(channel, label)| ScoredChannel { sample: 0, channel, label }).collect();
        let g = Graph::inference();
        let x = stack_windows(&[batch.corrupted.view()]);
        let out = model.forward(&g, &x)?;
        let (_, acc) = model.context_loss(&g, &out, &scored)?;
        correct += acc * scored.len() as f64;
        total += scored.len();
    }
    Ok(correct / total.max(1) as f64)
}
