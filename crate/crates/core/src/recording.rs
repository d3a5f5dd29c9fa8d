//! Recording and trial data model, the on-disk recording format, and
//! train/validation/test splits.
//!
//! A recording on disk is a pair of files: a UTF-8 JSON manifest and a flat
//! little-endian `f32` payload in channel-major order (all samples of channel
//! 0, then channel 1, ...).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceScheme {
    #[default]
    Raw,
    Bipolar,
    Laplacian,
}

/// Multichannel signal `[C, T]` with channel metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    signal: Array2<f32>,
    sample_rate: f64,
    channel_ids: Vec<String>,
    channel_coords: Option<Vec<[f64; 3]>>,
    reference_scheme: ReferenceScheme,
}

impl Recording {
    pub fn new(
        signal: Array2<f32>,
        sample_rate: f64,
        channel_ids: Vec<String>,
        channel_coords: Option<Vec<[f64; 3]>>,
        reference_scheme: ReferenceScheme,
    ) -> Result<Self> {
        let (c, t) = signal.dim();
        if c == 0 || t == 0 {
            return Err(Error::InvalidRecording(format!("empty signal {c}x{t}")));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidRecording(format!("bad sample rate {sample_rate}")));
        }
        if channel_ids.len() != c {
            return Err(Error::InvalidRecording(format!("{} channel ids for {c} channels", channel_ids.len())));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = channel_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidRecording(format!("duplicate channel id {dup}")));
        }
        if let Some(coords) = &channel_coords {
            if coords.len() != c {
                return Err(Error::InvalidRecording(format!("{} coordinates for {c} channels", coords.len())));
            }
        }
        if signal.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("recording signal".into()));
        }
        Ok(Self { signal, sample_rate, channel_ids, channel_coords, reference_scheme })
    }

    /// Raw recording with ids `ch0..ch{C-1}` and no coordinates.
    pub fn from_signal(signal: Array2<f32>, sample_rate: f64) -> Result<Self> {
        let ids = (0..signal.nrows()).map(|i| format!("ch{i}")).collect();
        Self::new(signal, sample_rate, ids, None, ReferenceScheme::Raw)
    }

    pub fn signal(&self) -> ArrayView2<'_, f32> {
        self.signal.view()
    }

    pub fn n_channels(&self) -> usize {
        self.signal.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.signal.ncols()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate
    }

    pub fn channel_ids(&self) -> &[String] {
        &self.channel_ids
    }

    pub fn channel_coords(&self) -> Option<&[[f64; 3]]> {
        self.channel_coords.as_deref()
    }

    pub fn reference_scheme(&self) -> ReferenceScheme {
        self.reference_scheme
    }

    /// Same metadata, new samples (channel count must match unless `ids` change).
    pub fn with_signal(&self, signal: Array2<f32>, sample_rate: f64) -> Result<Self> {
        Self::new(signal, sample_rate, self.channel_ids.clone(), self.channel_coords.clone(), self.reference_scheme)
    }

    pub(crate) fn with_parts(
        signal: Array2<f32>,
        sample_rate: f64,
        channel_ids: Vec<String>,
        channel_coords: Option<Vec<[f64; 3]>>,
        reference_scheme: ReferenceScheme,
    ) -> Result<Self> {
        Self::new(signal, sample_rate, channel_ids, channel_coords, reference_scheme)
    }

    /// Samples `[start, start + len)` of every channel.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.n_samples() {
            return Err(Error::OutOfRange(format!(
                "time slice {start}..{} of {} samples",
                start + len,
                self.n_samples()
            )));
        }
        let sig = self.signal.slice(ndarray::s![.., start..start + len]).to_owned();
        self.with_signal(sig, self.sample_rate)
    }

    /// Keeps the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.n_channels()) {
            return Err(Error::OutOfRange(format!("channel {bad} of {}", self.n_channels())));
        }
        let sig = self.signal.select(Axis(0), channels);
        Self::new(
            sig,
            self.sample_rate,
            channels.iter().map(|&c| self.channel_ids[c].clone()).collect(),
            self.channel_coords.as_ref().map(|co| channels.iter().map(|&c| co[c]).collect()),
            self.reference_scheme,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordingManifest {
    channel_ids: Vec<String>,
    sample_rate_hz: f64,
    reference_scheme: ReferenceScheme,
    shape: [usize; 2],
    dtype: String,
    byte_order: String,
    data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<[f64; 3]>>,
}

/// Payload path for a manifest path (`rec.json` -> `rec.f32`).
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f32")
}

/// Writes the manifest to `path` and the samples next to it (see [`payload_path`]).
pub fn write_recording(rec: &Recording, path: &Path) -> Result<()> {
    if rec.signal.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("recording signal".into()));
    }
    let data_path = payload_path(path);
    let manifest = RecordingManifest {
        channel_ids: rec.channel_ids.clone(),
        sample_rate_hz: rec.sample_rate,
        reference_scheme: rec.reference_scheme,
        shape: [rec.n_channels(), rec.n_samples()],
        dtype: "f32le".into(),
        byte_order: "little".into(),
        data_file: data_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        coords: rec.channel_coords.clone(),
    };
    let mut bytes = Vec::with_capacity(rec.signal.len() * 4);
    for row in rec.signal.rows() {
        for &x in row {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let io = |e: std::io::Error, p: &Path| Error::Io(format!("{}: {e}", p.display()));
    fs::File::create(&data_path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| io(e, &data_path))?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| io(e, path))?;
    Ok(())
}

pub fn read_recording(path: &Path) -> Result<Recording> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let m: RecordingManifest = serde_json::from_str(&text)?;
    if m.dtype != "f32le" || m.byte_order != "little" {
        return Err(Error::Format(format!("unsupported dtype {} / {}", m.dtype, m.byte_order)));
    }
    let data_path = path.with_file_name(&m.data_file);
    let bytes = fs::read(&data_path).map_err(|e| Error::Io(format!("{}: {e}", data_path.display())))?;
    let [c, t] = m.shape;
    if bytes.len() != c * t * 4 {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", bytes.len(), c * t * 4)));
    }
    let samples: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let signal = Array2::from_shape_vec((c, t), samples).map_err(|e| Error::Format(e.to_string()))?;
    Recording::new(signal, m.sample_rate_hz, m.channel_ids, m.coords, m.reference_scheme)
}

/// Labels attached to a batch of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialLabels {
    /// One class index per window.
    Class(Vec<usize>),
    /// One token sequence per window (CTC targets).
    Sequence(Vec<Vec<usize>>),
}

/// Windows `[B, C, T_w]` paired with labels over an ordered vocabulary.
#[derive(Debug, Clone)]
pub struct TrialBatch {
    windows: Array3<f32>,
    labels: TrialLabels,
    label_space: Vec<String>,
}

impl TrialBatch {
    pub fn new(windows: Array3<f32>, labels: TrialLabels, label_space: Vec<String>) -> Result<Self> {
        let b = windows.dim().0;
        let k = label_space.len();
        match &labels {
            TrialLabels::Class(y) => {
                if y.len() != b {
                    return Err(Error::InvalidTrials(format!("{} labels for {b} windows", y.len())));
                }
                if let Some(bad) = y.iter().find(|&&c| c >= k) {
                    return Err(Error::InvalidTrials(format!("class {bad} outside vocabulary of {k}")));
                }
            }
            TrialLabels::Sequence(seqs) => {
                if seqs.len() != b {
                    return Err(Error::InvalidTrials(format!("{} sequences for {b} windows", seqs.len())));
                }
                for s in seqs {
                    if s.is_empty() {
                        return Err(Error::InvalidTrials("empty label sequence".into()));
                    }
                    if let Some(bad) = s.iter().find(|&&c| c >= k) {
                        return Err(Error::InvalidTrials(format!("token {bad} outside vocabulary of {k}")));
                    }
                }
            }
        }
        Ok(Self { windows, labels, label_space })
    }

    pub fn windows(&self) -> &Array3<f32> {
        &self.windows
    }

    pub fn labels(&self) -> &TrialLabels {
        &self.labels
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn len(&self) -> usize {
        self.windows.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequence labels right-padded with `pad` to the longest length, plus lengths.
    pub fn padded_sequences(&self, pad: usize) -> Option<(Array2<usize>, Vec<usize>)> {
        let TrialLabels::Sequence(seqs) = &self.labels else {
            return None;
        };
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Array2::from_elem((seqs.len(), width), pad);
        for (i, s) in seqs.iter().enumerate() {
            for (j, &t) in s.iter().enumerate() {
                out[[i, j]] = t;
            }
        }
        Some((out, seqs.iter().map(Vec::len).collect()))
    }

    /// Sub-batch with the given trial indices.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let windows = self.windows.select(Axis(0), idx);
        let labels = match &self.labels {
            TrialLabels::Class(y) => TrialLabels::Class(idx.iter().map(|&i| y[i]).collect()),
            TrialLabels::Sequence(s) => TrialLabels::Sequence(idx.iter().map(|&i| s[i].clone()).collect()),
        };
        Self::new(windows, labels, self.label_space.clone())
    }
}

/// Trial events within a recording: onsets (in samples), a common length,
/// class labels and optional token sequences over a separate vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTable {
    pub onsets: Vec<usize>,
    pub trial_len: usize,
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequences: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_names: Option<Vec<String>>,
}

impl TrialTable {
    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }

    fn windows(&self, rec: &Recording, channels: &[usize], idx: &[usize]) -> Result<Array3<f32>> {
        let mut out = Array3::zeros((idx.len(), channels.len(), self.trial_len));
        for (k, &i) in idx.iter().enumerate() {
            let on = self.onsets[i];
            if on + self.trial_len > rec.n_samples() {
                return Err(Error::OutOfRange(format!("trial {i} ends past the recording")));
            }
            for (j, &c) in channels.iter().enumerate() {
                if c >= rec.n_channels() {
                    return Err(Error::OutOfRange(format!("channel {c}")));
                }
                out.slice_mut(ndarray::s![k, j, ..]).assign(&rec.signal.slice(ndarray::s![c, on..on + self.trial_len]));
            }
        }
        Ok(out)
    }

    /// Class-labelled windows of the given trials over the given channels.
    pub fn class_batch(&self, rec: &Recording, channels: &[usize], idx: &[usize]) -> Result<TrialBatch> {
        let labels = TrialLabels::Class(idx.iter().map(|&i| self.classes[i]).collect());
        TrialBatch::new(self.windows(rec, channels, idx)?, labels, self.class_names.clone())
    }

    /// Sequence-labelled windows; errors when the table has no sequences.
    pub fn sequence_batch(&self, rec: &Recording, channels: &[usize], idx: &[usize]) -> Result<TrialBatch> {
        let (Some(seqs), Some(names)) = (&self.sequences, &self.token_names) else {
            return Err(Error::InvalidTrials("trial table has no token sequences".into()));
        };
        let labels = TrialLabels::Sequence(idx.iter().map(|&i| seqs[i].clone()).collect());
        TrialBatch::new(self.windows(rec, channels, idx)?, labels, names.clone())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let t: Self = serde_json::from_str(&text)?;
        if t.classes.len() != t.onsets.len() {
            return Err(Error::InvalidTrials("class count differs from onset count".into()));
        }
        Ok(t)
    }
}

/// Trial index lists for training, validation and testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n_trials` and cuts it into train/val/test. Train and val
/// sizes are floored; the remainder goes to test.
pub fn split_trials(n_trials: usize, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (tr, va, te) = ratios;
    if n_trials < 10 {
        return Err(Error::InvalidSplit(format!("need at least 10 trials, got {n_trials}")));
    }
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!("ratios {ratios:?} do not sum to 1")));
    }
    let mut order: Vec<usize> = (0..n_trials).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // small epsilon so that e.g. 0.8 * 100 floors to 80, not 79
    let n_train = (tr * n_trials as f64 + 1e-9).floor() as usize;
    let n_val = (va * n_trials as f64 + 1e-9).floor() as usize;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(DatasetSplit { train: order, val, test, seed })
}
