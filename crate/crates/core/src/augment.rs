//! Window extraction and augmentation: jittered crops from overlapping
//! pretraining segments, and zero-padded time shifts of trial windows.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::recording::Recording;
use crate::train::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub segment_secs: f64,
    pub overlap_secs: f64,
    pub crop_secs: f64,
    /// Largest crop offset inside a segment.
    pub jitter_secs: f64,
    /// Largest trial shift, either direction.
    pub shift_max_secs: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { segment_secs: 8.0, overlap_secs: 4.0, crop_secs: 4.0, jitter_secs: 4.0, shift_max_secs: 0.2, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_secs > 0.0 && self.segment_secs > 0.0) {
            return Err(Error::InvalidConfig("segment and crop lengths must be positive".into()));
        }
        if self.overlap_secs < 0.0 || self.overlap_secs >= self.segment_secs {
            return Err(Error::InvalidConfig(format!("overlap {} s must lie in [0, segment)", self.overlap_secs)));
        }
        if self.jitter_secs < 0.0 || self.crop_secs + self.jitter_secs > self.segment_secs + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "crop {} s + jitter {} s exceeds segment {} s",
                self.crop_secs, self.jitter_secs, self.segment_secs
            )));
        }
        if self.shift_max_secs < 0.0 {
            return Err(Error::InvalidConfig("negative shift".into()));
        }
        Ok(())
    }
}

/// Segment layout of one recording for pretraining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainWindows {
    pub segment_starts: Vec<usize>,
    pub segment_len: usize,
    pub crop_len: usize,
    pub max_jitter: usize,
    seed: u64,
}

fn secs_to_samples(secs: f64, rate: f64) -> usize {
    (secs * rate).round() as usize
}

pub fn pretrain_windows(rec: &Recording, cfg: &AugmentConfig) -> Result<PretrainWindows> {
    cfg.validate()?;
    let rate = rec.sample_rate();
    let segment_len = secs_to_samples(cfg.segment_secs, rate);
    let hop = segment_len - secs_to_samples(cfg.overlap_secs, rate);
    let crop_len = secs_to_samples(cfg.crop_secs, rate);
    let max_jitter = secs_to_samples(cfg.jitter_secs, rate).min(segment_len - crop_len);
    if rec.n_samples() < segment_len {
        return Err(Error::InvalidRecording(format!(
            "recording of {} samples is shorter than one {segment_len}-sample segment",
            rec.n_samples()
        )));
    }
    let segment_starts = (0..).map(|i| i * hop).take_while(|s| s + segment_len <= rec.n_samples()).collect();
    Ok(PretrainWindows { segment_starts, segment_len, crop_len, max_jitter, seed: cfg.seed })
}

impl PretrainWindows {
    pub fn len(&self) -> usize {
        self.segment_starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_starts.is_empty()
    }

    /// Absolute start sample of the crop drawn for `segment` in `epoch`.
    pub fn crop_start(&self, segment: usize, epoch: usize) -> usize {
        let mut rng = rng_for(self.seed, &[segment as u64, epoch as u64]);
        self.segment_starts[segment] + rng.random_range(0..=self.max_jitter)
    }

    pub fn crop<'a>(&self, rec: &'a Recording, segment: usize, epoch: usize) -> ArrayView2<'a, f32> {
        let start = self.crop_start(segment, epoch);
        rec_window(rec, start, self.crop_len)
    }
}

fn rec_window(rec: &Recording, start: usize, len: usize) -> ArrayView2<'_, f32> {
    rec.signal().slice_move(s![.., start..start + len])
}

/// Shifts every channel by `shift` samples (positive = right), filling the
/// vacated samples with zeros.
pub fn shift_by(window: ArrayView2<'_, f32>, shift: isize) -> Array2<f32> {
    let (_, t) = window.dim();
    let mut out = Array2::zeros(window.dim());
    let k = shift.unsigned_abs().min(t);
    if shift >= 0 {
        out.slice_mut(s![.., k..]).assign(&window.slice(s![.., ..t - k]));
    } else {
        out.slice_mut(s![.., ..t - k]).assign(&window.slice(s![.., k..]));
    }
    out
}

/// Random shift of up to `max_shift` samples in a random direction.
pub fn shift_trial(window: ArrayView2<'_, f32>, max_shift: usize, seed: u64) -> Array2<f32> {
    let mut rng = rng_for(seed, &[]);
    let k = rng.random_range(0..=max_shift) as isize;
    let shift = if rng.random_bool(0.5) { k } else { -k };
    shift_by(window, shift)
}
