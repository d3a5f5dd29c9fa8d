//! Pieces shared by the training loops: metric records, batching, seed
//! derivation and array/tensor conversion.

use std::collections::BTreeMap;

use ndarray::{ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use strata_autograd::optim::{AdamW, OptimizerConfig};
use strata_autograd::{Graph, ParamStore, Tensor, Var};

use crate::{Error, Result};

/// One line of a metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn new(stage: &str, epoch: usize) -> Self {
        Self { stage: stage.to_string(), epoch, values: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.values.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

/// Serializes a log as newline-delimited JSON.
pub fn to_jsonl(log: &[MetricRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).expect("metric records serialize")).collect::<Vec<_>>().join("\n")
        + "\n"
}

/// SplitMix64 finalizer over a base seed and a path of indices, so that every
/// (stage, epoch, sample) gets an independent, reproducible stream.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15 ^ p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Shuffled mini-batches of `0..n`; the last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stacks equally shaped `[C, T]` windows into a `[B, C, T]` tensor.
pub fn stack_windows(windows: &[ArrayView2<'_, f32>]) -> Tensor {
    let (c, t) = windows.first().map(|w| w.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(windows.len() * c * t);
    for w in windows {
        assert_eq!(w.dim(), (c, t), "windows must share a shape");
        data.extend(w.iter().map(|&v| v as f64));
    }
    Tensor::new(&[windows.len(), c, t], data)
}

/// Selected items of a `[B, C, T]` array as a tensor.
pub fn gather_windows(windows: ArrayView3<'_, f32>, idx: &[usize]) -> Tensor {
    let views: Vec<_> = idx.iter().map(|&i| windows.index_axis(ndarray::Axis(0), i)).collect();
    stack_windows(&views)
}

pub fn ensure_finite(stage: &str, epoch: usize, name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{stage}: {name} became {value} in epoch {epoch}")))
    }
}

/// Backward pass plus one AdamW update at the scheduled learning rate.
pub fn optimizer_step(
    g: &Graph,
    loss: Var,
    store: &mut ParamStore,
    opt: &mut AdamW,
    cfg: &OptimizerConfig,
    epoch_pos: f64,
) {
    let grads = g.backward(loss);
    opt.step(store, &grads.params(), cfg.lr_at(epoch_pos));
}

/// Mean of a slice; zero for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
