//! Fine-tuning heads and evaluation metrics.

pub mod ctc;
pub mod metrics;
pub mod vocab;

use ndarray::{ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use strata_autograd::nn::Linear;
use strata_autograd::optim::{AdamW, OptimizerConfig};
use strata_autograd::{Graph, ParamStore, Tensor, Var};

pub use ctc::{ctc_loss, greedy_decode, min_frames};
pub use metrics::{accuracy, levenshtein, roc_auc, syllable_error_rate};

use crate::augment::shift_trial;
use crate::fine::{n_patches, FineConfig, FineEncoder, ENCODER_PREFIX};
use crate::recording::{TrialBatch, TrialLabels};
use crate::train::{derive_seed, ensure_finite, mean, optimizer_step, rng_for, shuffled_batches, MetricRecord};
use crate::{Error, Result};

/// Width of the hidden layer in both heads.
pub const HEAD_HIDDEN: usize = 128;
/// Embeddings flattened into one CTC frame.
pub const CTC_WINDOW: usize = 3;

/// Where the fine encoder's weights come from.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInit<'a> {
    Random,
    /// Copy every `fine.enc` tensor from a VQ-VAE or mask-modeling store.
    Pretrained(&'a ParamStore),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub encoder: FineConfig,
    pub optimizer: OptimizerConfig,
    /// Largest random trial shift applied to training windows, in seconds.
    pub shift_max_secs: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            encoder: FineConfig::default(),
            optimizer: OptimizerConfig {
                batch_size: 32,
                max_lr: 2e-4,
                min_lr: 5e-6,
                beta1: 0.9,
                beta2: 0.99,
                weight_decay: 0.05,
                epochs: 200,
                warmup_epochs: 20,
                grad_clip: None,
            },
            shift_max_secs: 0.2,
            seed: 0,
        }
    }
}

/// Train, validation and test trials of one task.
#[derive(Debug, Clone)]
pub struct TrialSplits {
    pub train: TrialBatch,
    pub val: TrialBatch,
    pub test: TrialBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls,
    Ctc,
}

/// Test-split results of the checkpoint with the best validation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub seed: u64,
    pub best_epoch: usize,
    /// Validation accuracy (classification) or 1 - SER (sequences) at `best_epoch`.
    pub val_score: f64,
    pub accuracy: Option<f64>,
    pub roc_auc: Option<f64>,
    pub ser: Option<f64>,
    pub one_minus_ser: Option<f64>,
    pub n_test: usize,
    /// Trials dropped because their targets need more frames than exist.
    pub excluded: usize,
    /// Fewer than two classes: accuracy is trivially perfect.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Evaluation {
    score: f64,
    accuracy: Option<f64>,
    roc_auc: Option<f64>,
    ser: Option<f64>,
}

/// Shared plumbing for the two heads.
trait Head {
    const TASK: Task;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, g: &Graph, x: &Tensor, batch: &TrialBatch) -> Result<Var>;
    fn evaluate(&self, batch: &TrialBatch, batch_size: usize) -> Result<Evaluation>;
}

fn build_encoder(
    params: &mut ParamStore,
    cfg: &FinetuneConfig,
    n_channels: usize,
    init: EncoderInit<'_>,
    rng: &mut impl Rng,
) -> Result<FineEncoder> {
    let encoder = FineEncoder::new(params, cfg.encoder.clone(), n_channels, rng)?;
    if let EncoderInit::Pretrained(src) = init {
        params.copy_prefix_from(src, ENCODER_PREFIX)?;
    }
    Ok(encoder)
}

fn window_tensor(windows: ArrayView3<'_, f32>) -> Tensor {
    let (b, c, t) = windows.dim();
    Tensor::new(&[b, c, t], windows.iter().map(|&v| v as f64).collect())
}

/// Classification head: all patch embeddings flattened, one hidden layer.
#[derive(Debug, Clone)]
pub struct ClsModel {
    pub params: ParamStore,
    pub encoder: FineEncoder,
    pub hidden: Linear,
    pub out: Linear,
    pub n_patches: usize,
    pub n_classes: usize,
}

impl ClsModel {
    pub fn new(
        cfg: &FinetuneConfig,
        n_channels: usize,
        trial_len: usize,
        n_classes: usize,
        init: EncoderInit<'_>,
    ) -> Result<Self> {
        let n = n_patches(trial_len);
        if n == 0 || n_classes == 0 {
            return Err(Error::InvalidConfig(format!("{trial_len}-sample trials over {n_classes} classes")));
        }
        let mut rng = rng_for(cfg.seed, &[6]);
        let mut params = ParamStore::new();
        let encoder = build_encoder(&mut params, cfg, n_channels, init, &mut rng)?;
        let d = encoder.dim();
        let hidden = Linear::new(&mut params, "cls.hidden", n * d, HEAD_HIDDEN, true, &mut rng);
        let out = Linear::new(&mut params, "cls.out", HEAD_HIDDEN, n_classes, true, &mut rng);
        Ok(Self { params, encoder, hidden, out, n_patches: n, n_classes })
    }

    /// Logits `[B, classes]` for windows `[B, C, T]`.
    pub fn logits(&self, g: &Graph, x: &Tensor) -> Result<Var> {
        let b = x.shape()[0];
        let n = n_patches(x.shape()[2]);
        if n != self.n_patches {
            return Err(Error::Shape(format!("{n} patches, head expects {}", self.n_patches)));
        }
        let e = self.encoder.forward(g, &self.params, x, None)?;
        let flat = g.reshape(e, &[b, n * self.encoder.dim()]);
        let h = g.relu(self.hidden.forward(g, &self.params, flat));
        Ok(self.out.forward(g, &self.params, h))
    }

    fn predict(&self, windows: ArrayView3<'_, f32>, batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(windows.dim().0);
        for start in (0..windows.dim().0).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(windows.dim().0);
            let g = Graph::inference();
            let x = window_tensor(windows.slice_axis(Axis(0), (start..end).into()));
            let l = self.logits(&g, &x)?;
            let v = g.value(l);
            rows.extend(v.data().chunks(self.n_classes).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }
}

fn class_labels(batch: &TrialBatch) -> Result<&[usize]> {
    match batch.labels() {
        TrialLabels::Class(y) => Ok(y),
        TrialLabels::Sequence(_) => Err(Error::InvalidTrials("expected class labels".into())),
    }
}

fn sequence_labels(batch: &TrialBatch) -> Result<&[Vec<usize>]> {
    match batch.labels() {
        TrialLabels::Sequence(s) => Ok(s),
        TrialLabels::Class(_) => Err(Error::InvalidTrials("expected token sequences".into())),
    }
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

impl Head for ClsModel {
    const TASK: Task = Task::Cls;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss(&self, g: &Graph, x: &Tensor, batch: &TrialBatch) -> Result<Var> {
        let logits = self.logits(g, x)?;
        Ok(g.cross_entropy(logits, class_labels(batch)?))
    }

    fn evaluate(&self, batch: &TrialBatch, batch_size: usize) -> Result<Evaluation> {
        let y = class_labels(batch)?;
        let logits = self.predict(batch.windows().view(), batch_size)?;
        let pred: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
        let acc = accuracy(&pred, y);
        let auc = if self.n_classes == 2 {
            let scores: Vec<f64> = logits.iter().map(|r| r[1] - r[0]).collect();
            let positive: Vec<bool> = y.iter().map(|&c| c == 1).collect();
            roc_auc(&scores, &positive).ok()
        } else {
            None
        };
        Ok(Evaluation { score: acc, accuracy: Some(acc), roc_auc: auc, ser: None })
    }
}

/// Sequence head: windows of three consecutive embeddings, stride one,
/// each mapped to per-token logits.
#[derive(Debug, Clone)]
pub struct CtcModel {
    pub params: ParamStore,
    pub encoder: FineEncoder,
    pub hidden: Linear,
    pub out: Linear,
    pub n_frames: usize,
    pub n_tokens: usize,
}

impl CtcModel {
    pub fn new(
        cfg: &FinetuneConfig,
        n_channels: usize,
        trial_len: usize,
        n_tokens: usize,
        init: EncoderInit<'_>,
    ) -> Result<Self> {
        let n = n_patches(trial_len);
        if n < CTC_WINDOW {
            return Err(Error::InvalidConfig(format!("{trial_len}-sample trials give {n} patches")));
        }
        if n_tokens < 2 {
            return Err(Error::InvalidConfig("token vocabulary needs the blank plus one token".into()));
        }
        let mut rng = rng_for(cfg.seed, &[6]);
        let mut params = ParamStore::new();
        let encoder = build_encoder(&mut params, cfg, n_channels, init, &mut rng)?;
        let d = encoder.dim();
        let hidden = Linear::new(&mut params, "ctc.hidden", CTC_WINDOW * d, HEAD_HIDDEN, true, &mut rng);
        let out = Linear::new(&mut params, "ctc.out", HEAD_HIDDEN, n_tokens, true, &mut rng);
        Ok(Self { params, encoder, hidden, out, n_frames: n + 1 - CTC_WINDOW, n_tokens })
    }

    /// Per-frame logits `[B, frames, tokens]`.
    pub fn logits(&self, g: &Graph, x: &Tensor) -> Result<Var> {
        let n = n_patches(x.shape()[2]);
        if n + 1 != self.n_frames + CTC_WINDOW {
            return Err(Error::Shape(format!("{n} patches, head expects {}", self.n_frames + CTC_WINDOW - 1)));
        }
        let e = self.encoder.forward(g, &self.params, x, None)?;
        let parts: Vec<Var> = (0..CTC_WINDOW).map(|o| g.narrow(e, 1, o, self.n_frames)).collect();
        let framed = g.concat(&parts, 2);
        let h = g.relu(self.hidden.forward(g, &self.params, framed));
        Ok(self.out.forward(g, &self.params, h))
    }

    /// Greedy decodes of every window.
    pub fn decode(&self, windows: ArrayView3<'_, f32>, batch_size: usize) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(windows.dim().0);
        let per = self.n_frames * self.n_tokens;
        for start in (0..windows.dim().0).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(windows.dim().0);
            let g = Graph::inference();
            let x = window_tensor(windows.slice_axis(Axis(0), (start..end).into()));
            let l = self.logits(&g, &x)?;
            let v = g.value(l);
            out.extend(v.data().chunks(per).map(|s| greedy_decode(s, self.n_tokens)));
        }
        Ok(out)
    }
}

impl Head for CtcModel {
    const TASK: Task = Task::Ctc;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss(&self, g: &Graph, x: &Tensor, batch: &TrialBatch) -> Result<Var> {
        let logits = self.logits(g, x)?;
        ctc_loss(g, logits, sequence_labels(batch)?)
    }

    fn evaluate(&self, batch: &TrialBatch, batch_size: usize) -> Result<Evaluation> {
        let refs = sequence_labels(batch)?;
        let hyps = self.decode(batch.windows().view(), batch_size)?;
        let ser = syllable_error_rate(refs, &hyps)?;
        Ok(Evaluation { score: 1.0 - ser, accuracy: None, roc_auc: None, ser: Some(ser) })
    }
}

/// Training windows of one batch, each shifted by a random offset.
fn shifted_batch(batch: &TrialBatch, max_shift: usize, seed: u64, epoch: usize, idx: &[usize]) -> Tensor {
    let w = batch.windows();
    let (_, c, t) = w.dim();
    let mut data = Vec::with_capacity(idx.len() * c * t);
    for &i in idx {
        let trial = w.index_axis(Axis(0), i);
        if max_shift == 0 {
            data.extend(trial.iter().map(|&v| v as f64));
        } else {
            let s = shift_trial(trial, max_shift, derive_seed(seed, &[8, epoch as u64, i as u64]));
            data.extend(s.iter().map(|&v| v as f64));
        }
    }
    Tensor::new(&[idx.len(), c, t], data)
}

fn run<M: Head>(
    model: &mut M,
    splits: &TrialSplits,
    cfg: &FinetuneConfig,
    sample_rate: f64,
) -> Result<(MetricReport, Vec<MetricRecord>)> {
    let stage = match M::TASK {
        Task::Cls => "cls",
        Task::Ctc => "ctc",
    };
    let opt_cfg = &cfg.optimizer;
    if opt_cfg.epochs == 0 || opt_cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("fine-tuning needs at least one epoch and a positive batch".into()));
    }
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::Empty("train, validation and test splits must be non-empty".into()));
    }
    let max_shift = (cfg.shift_max_secs * sample_rate).round() as usize;
    let mut opt = AdamW::new(model.params(), opt_cfg);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 0..opt_cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[7, epoch as u64]);
        let batches = shuffled_batches(splits.train.len(), opt_cfg.batch_size, &mut rng);
        let steps = batches.len();
        let mut losses = Vec::with_capacity(steps);
        let mut lr = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let x = shifted_batch(&splits.train, max_shift, cfg.seed, epoch, idx);
            let sub = splits.train.subset(idx)?;
            let g = Graph::new();
            let loss = model.loss(&g, &x, &sub)?;
            let lv = g.value(loss).item();
            ensure_finite(stage, epoch, "loss", lv)?;
            losses.push(lv);
            let pos = epoch as f64 + step as f64 / steps as f64;
            lr = opt_cfg.lr_at(pos);
            optimizer_step(&g, loss, model.params_mut(), &mut opt, opt_cfg, pos);
        }
        let val = model.evaluate(&splits.val, opt_cfg.batch_size)?;
        log::info!("{stage} epoch {epoch}: loss {:.4} val {:.3}", mean(&losses), val.score);
        log.push(
            MetricRecord::new(stage, epoch).with("loss", mean(&losses)).with("val_score", val.score).with("lr", lr),
        );
        if best.as_ref().is_none_or(|(_, s, _)| val.score > *s) {
            best = Some((epoch, val.score, model.params().clone()));
        }
    }
    let (best_epoch, val_score, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    let test = model.evaluate(&splits.test, opt_cfg.batch_size)?;
    let mut record = MetricRecord::new(&format!("{stage}_test"), best_epoch)
        .with("best_epoch", best_epoch as f64)
        .with("val_score", val_score)
        .with("test_score", test.score);
    for (key, value) in [("accuracy", test.accuracy), ("roc_auc", test.roc_auc), ("ser", test.ser)] {
        if let Some(v) = value {
            record = record.with(key, v);
        }
    }
    log.push(record);
    let report = MetricReport {
        task: M::TASK,
        seed: cfg.seed,
        best_epoch,
        val_score,
        accuracy: test.accuracy,
        roc_auc: test.roc_auc,
        ser: test.ser,
        one_minus_ser: test.ser.map(|s| 1.0 - s),
        n_test: splits.test.len(),
        excluded: 0,
        degenerate: false,
    };
    Ok((report, log))
}

fn check_splits(splits: &TrialSplits) -> Result<(usize, usize)> {
    let dims = [&splits.train, &splits.val, &splits.test].map(|b| {
        let (_, c, t) = b.windows().dim();
        (c, t)
    });
    if dims[1] != dims[0] || dims[2] != dims[0] {
        return Err(Error::Shape(format!("splits disagree on window shape: {dims:?}")));
    }
    if splits.val.label_space() != splits.train.label_space() || splits.test.label_space() != splits.train.label_space()
    {
        return Err(Error::InvalidTrials("splits use different label spaces".into()));
    }
    Ok(dims[0])
}

/// Fine-tunes a classifier; the returned model holds the weights of the
/// epoch with the highest validation accuracy.
pub fn finetune_cls(
    init: EncoderInit<'_>,
    splits: &TrialSplits,
    cfg: &FinetuneConfig,
    sample_rate: f64,
) -> Result<(ClsModel, MetricReport, Vec<MetricRecord>)> {
    let (c, t) = check_splits(splits)?;
    for b in [&splits.train, &splits.val, &splits.test] {
        class_labels(b)?;
    }
    let n_classes = splits.train.label_space().len();
    let mut model = ClsModel::new(cfg, c, t, n_classes, init)?;
    let (mut report, log) = run(&mut model, splits, cfg, sample_rate)?;
    let mut seen = class_labels(&splits.train)?.to_vec();
    seen.sort_unstable();
    seen.dedup();
    report.degenerate = n_classes < 2 || seen.len() < 2;
    if report.degenerate {
        log::warn!("classification task has fewer than two classes; accuracy is trivial");
    }
    Ok((model, report, log))
}

/// Drops trials whose targets need more frames than the head produces.
fn feasible(batch: &TrialBatch, frames: usize) -> Result<(TrialBatch, usize)> {
    let seqs = sequence_labels(batch)?;
    let keep: Vec<usize> = (0..seqs.len()).filter(|&i| min_frames(&seqs[i]) <= frames).collect();
    let dropped = seqs.len() - keep.len();
    if dropped > 0 {
        log::warn!("excluding {dropped} trials whose targets exceed {frames} frames");
    }
    Ok((batch.subset(&keep)?, dropped))
}

/// Fine-tunes a CTC transcriber; selection is by validation 1 - SER.
pub fn finetune_ctc(
    init: EncoderInit<'_>,
    splits: &TrialSplits,
    cfg: &FinetuneConfig,
    sample_rate: f64,
) -> Result<(CtcModel, MetricReport, Vec<MetricRecord>)> {
    let (c, t) = check_splits(splits)?;
    let n_tokens = splits.train.label_space().len();
    let mut model = CtcModel::new(cfg, c, t, n_tokens, init)?;
    let mut excluded = 0;
    let mut kept = Vec::with_capacity(3);
    for b in [&splits.train, &splits.val, &splits.test] {
        let (k, d) = feasible(b, model.n_frames)?;
        excluded += d;
        kept.push(k);
    }
    let [train, val, test]: [TrialBatch; 3] = kept.try_into().expect("three splits");
    let filtered = TrialSplits { train, val, test };
    let (mut report, log) = run(&mut model, &filtered, cfg, sample_rate)?;
    report.excluded = excluded;
    Ok((model, report, log))
}

/// Validation accuracy of a nearest-class-mean classifier on block-averaged
/// windows: a cheap score for comparing channel subsets.
pub fn centroid_probe(train: &TrialBatch, val: &TrialBatch, block: usize) -> Result<f64> {
    let (ytr, yva) = (class_labels(train)?, class_labels(val)?);
    if train.is_empty() || val.is_empty() || block == 0 {
        return Err(Error::Empty("probe needs trials and a positive block".into()));
    }
    let features = |b: &TrialBatch| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(b.len());
        for w in b.windows().outer_iter() {
            let mut f = Vec::new();
            for row in w.rows() {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                f.extend(row.chunks(block).map(|c| c.iter().sum::<f64>() / c.len() as f64));
            }
            out.push(f);
        }
        out
    };
    let (ftr, fva) = (features(train), features(val));
    let k = train.label_space().len();
    let dim = ftr[0].len();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &y) in ftr.iter().zip(ytr) {
        counts[y] += 1;
        for (c, v) in centroids[y].iter_mut().zip(f) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let pred: Vec<usize> = fva
        .iter()
        .map(|f| {
            let dist = |c: &[f64]| c.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..k)
                .filter(|&j| counts[j] > 0)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap_or(0)
        })
        .collect();
    Ok(accuracy(&pred, yva))
}
