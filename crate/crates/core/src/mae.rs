//! Code-index mask modeling: about half of the patch embeddings are swapped
//! for a shared mask token, and per-group heads predict the frozen
//! quantizer's code ids at the masked positions.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use strata_autograd::nn::Linear;
use strata_autograd::optim::AdamW;
use strata_autograd::{Graph, ParamStore, Var};

use crate::augment::AugmentConfig;
use crate::dpq::{epoch_batches, FineTrainConfig, VqVae};
use crate::fine::{n_patches, FineConfig, FineEncoder};
use crate::recording::Recording;
use crate::train::{derive_seed, ensure_finite, mean, optimizer_step, rng_for, stack_windows, MetricRecord};
use crate::{Error, Result};

/// Masked positions of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    /// Sorted masked positions.
    pub positions: Vec<usize>,
}

/// Uniformly chooses `round(ratio * n)` of `n` positions without
/// replacement.
pub fn make_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 patches to mask, got {n}")));
    }
    let k = (ratio * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::InvalidConfig(format!("ratio {ratio} masks {k} of {n} patches")));
    }
    let mut rng = rng_for(seed, &[]);
    let mut positions = sample(&mut rng, n, k).into_vec();
    positions.sort_unstable();
    let mut mask = vec![false; n];
    for &p in &positions {
        mask[p] = true;
    }
    Ok(MaskPlan { mask, positions })
}

pub struct MaeLoss {
    /// Cross-entropy summed over groups, averaged over masked positions.
    pub loss: Var,
    /// The same summed over masked positions.
    pub loss_sum: f64,
    pub group_accuracy: Vec<f64>,
}

/// Masked code-prediction loss for encoder outputs `[rows, d]`. `targets`
/// is row-major `[rows, groups]`; only rows flagged in `mask` count.
pub fn mae_loss(
    g: &Graph,
    store: &ParamStore,
    heads: &[Linear],
    out: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<MaeLoss> {
    let rows = g.shape(out)[0];
    let groups = heads.len();
    if mask.len() != rows || targets.len() != rows * groups {
        return Err(Error::Shape(format!(
            "{rows} rows with {} mask flags and {} targets for {groups} groups",
            mask.len(),
            targets.len()
        )));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Err(Error::Empty("no masked positions".into()));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / masked as f64 } else { 0.0 }).collect();
    let mut loss: Option<Var> = None;
    let mut group_accuracy = Vec::with_capacity(groups);
    for (gi, head) in heads.iter().enumerate() {
        let logits = head.forward(g, store, out);
        let tgt: Vec<usize> = (0..rows).map(|r| targets[r * groups + gi]).collect();
        if let Some(&bad) = tgt.iter().find(|&&t| t >= head.out_dim) {
            return Err(Error::OutOfRange(format!("target code {bad} for a codex of {}", head.out_dim)));
        }
        let term = g.cross_entropy_weighted(logits, &tgt, &weights);
        loss = Some(loss.map_or(term, |acc| g.add(acc, term)));
        let lv = g.value(logits);
        let k = head.out_dim;
        let correct = (0..rows)
            .filter(|&r| mask[r])
            .filter(|&r| {
                let row = &lv.data()[r * k..(r + 1) * k];
                let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                arg == tgt[r]
            })
            .count();
        group_accuracy.push(correct as f64 / masked as f64);
    }
    let loss = loss.ok_or_else(|| Error::InvalidConfig("no prediction heads".into()))?;
    let loss_sum = g.value(loss).item() * masked as f64;
    Ok(MaeLoss { loss, loss_sum, group_accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub encoder: FineConfig,
    pub groups: usize,
    pub codex_size: usize,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct MaeModel {
    pub config: MaeConfig,
    pub params: ParamStore,
    pub encoder: FineEncoder,
    pub heads: Vec<Linear>,
}

impl MaeModel {
    /// A freshly initialized encoder with one prediction head per codex
    /// group.
    pub fn new<R: Rng + ?Sized>(config: MaeConfig, n_channels: usize, rng: &mut R) -> Result<Self> {
        if config.groups == 0 || config.codex_size == 0 {
            return Err(Error::InvalidConfig("mask modeling needs at least one codex group".into()));
        }
        let mut params = ParamStore::new();
        let encoder = FineEncoder::new(&mut params, config.encoder.clone(), n_channels, rng)?;
        let d = encoder.dim();
        let heads = (0..config.groups)
            .map(|gi| Linear::new(&mut params, &format!("mae.head{gi}"), d, config.codex_size, true, rng))
            .collect();
        Ok(Self { config, params, encoder, heads })
    }

    /// Configuration matching a trained VQ-VAE's codex.
    pub fn for_vqvae<R: Rng + ?Sized>(vq: &VqVae, mask_ratio: f64, rng: &mut R) -> Result<Self> {
        let cfg = MaeConfig {
            encoder: vq.config.encoder.clone(),
            groups: vq.config.dpq.groups,
            codex_size: vq.config.dpq.codex_size,
            mask_ratio,
        };
        Self::new(cfg, vq.n_channels(), rng)
    }
}

/// Mask-modeling pretraining against a frozen VQ-VAE. Logs per epoch:
/// `loss` (mean over masked positions), `loss_sum`, `accuracy` (mean over
/// groups), `accuracy_g{i}`, `lr`.
pub fn train_mae(
    model: &mut MaeModel,
    frozen: &VqVae,
    rec: &Recording,
    augment: &AugmentConfig,
    cfg: &FineTrainConfig,
) -> Result<Vec<MetricRecord>> {
    if frozen.config.dpq.groups != model.config.groups || frozen.config.dpq.codex_size != model.config.codex_size {
        return Err(Error::InvalidConfig("mask-modeling heads do not match the VQ-VAE codex".into()));
    }
    if rec.n_channels() != model.encoder.n_channels() {
        return Err(Error::Shape(format!(
            "recording has {} channels, model expects {}",
            rec.n_channels(),
            model.encoder.n_channels()
        )));
    }
    let opt_cfg = &cfg.optimizer;
    let mut opt = AdamW::new(&model.params, opt_cfg);
    let groups = model.config.groups;
    let mut log = Vec::new();
    for epoch in 0..opt_cfg.epochs {
        let batches = epoch_batches(rec, augment, cfg, epoch)?;
        let steps = batches.len();
        let (mut losses, mut sums) = (Vec::new(), Vec::new());
        let mut accs = vec![Vec::new(); groups];
        let mut lr = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let x = stack_windows(batch);
            let targets = frozen.code_indices(&x)?;
            let (b, t) = (x.shape()[0], x.shape()[2]);
            let n = n_patches(t);
            let mut mask = Vec::with_capacity(b * n);
            for bi in 0..b {
                let seed = derive_seed(cfg.seed, &[4, epoch as u64, step as u64, bi as u64]);
                mask.extend(make_mask(n, model.config.mask_ratio, seed)?.mask);
            }
            let g = Graph::new();
            let out = model.encoder.forward(&g, &model.params, &x, Some(&mask))?;
            let out = g.reshape(out, &[b * n, model.encoder.dim()]);
            let l = mae_loss(&g, &model.params, &model.heads, out, &targets, &mask)?;
            let lv = g.value(l.loss).item();
            ensure_finite("mae", epoch, "loss", lv)?;
            losses.push(lv);
            sums.push(l.loss_sum);
            for (acc, a) in accs.iter_mut().zip(&l.group_accuracy) {
                acc.push(*a);
            }
            let pos = epoch as f64 + step as f64 / steps as f64;
            lr = opt_cfg.lr_at(pos);
            optimizer_step(&g, l.loss, &mut model.params, &mut opt, opt_cfg, pos);
        }
        let group_means: Vec<f64> = accs.iter().map(|a| mean(a)).collect();
        let mut rec = MetricRecord::new("mae", epoch)
            .with("loss", mean(&losses))
            .with("loss_sum", mean(&sums))
            .with("accuracy", mean(&group_means))
            .with("lr", lr);
        for (gi, a) in group_means.iter().enumerate() {
            rec = rec.with(&format!("accuracy_g{gi}"), *a);
        }
        log::info!("mae epoch {epoch}: loss {:.4} acc {:.3}", mean(&losses), mean(&group_means));
        log.push(rec);
    }
    Ok(log)
}
