//! Signal conditioning: zero-phase band-pass and notch filtering, FFT
//! resampling, bipolar/Laplacian re-referencing and per-channel z-scoring.
//!
//! The chain order is fixed: filter, resample, re-reference, z-score.

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::recording::{Recording, ReferenceScheme};
use crate::{Error, Result};

const BUTTERWORTH_Q: f64 = std::f64::consts::FRAC_1_SQRT_2;
const NOTCH_Q: f64 = 30.0;
const FLAT_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    /// Mains frequency, 50 or 60 Hz.
    pub notch_hz: f64,
    pub target_rate_hz: f64,
    pub reference: ReferenceScheme,
    pub zscore: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low_hz: 0.5,
            band_high_hz: 200.0,
            notch_hz: 50.0,
            target_rate_hz: 400.0,
            reference: ReferenceScheme::Raw,
            zscore: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.band_low_hz > 0.0 && self.band_low_hz < self.band_high_hz) {
            return bad(format!("band {}..{} Hz", self.band_low_hz, self.band_high_hz));
        }
        if self.band_high_hz > self.target_rate_hz / 2.0 {
            return bad(format!(
                "band edge {} Hz above the Nyquist frequency of {} Hz",
                self.band_high_hz, self.target_rate_hz
            ));
        }
        if self.notch_hz != 50.0 && self.notch_hz != 60.0 {
            return bad(format!("notch must be 50 or 60 Hz, got {}", self.notch_hz));
        }
        Ok(())
    }
}

/// Second-order section with `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn from_rbj(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [a1 / a0, a2 / a0] }
    }

    fn omega(f: f64, fs: f64, q: f64) -> (f64, f64) {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        (w.cos(), w.sin() / (2.0 * q))
    }

    pub fn highpass(f: f64, fs: f64) -> Self {
        let (c, al) = Self::omega(f, fs, BUTTERWORTH_Q);
        let k = (1.0 + c) / 2.0;
        Self::from_rbj([k, -2.0 * k, k], 1.0 + al, -2.0 * c, 1.0 - al)
    }

    pub fn lowpass(f: f64, fs: f64) -> Self {
        let (c, al) = Self::omega(f, fs, BUTTERWORTH_Q);
        let k = (1.0 - c) / 2.0;
        Self::from_rbj([k, 2.0 * k, k], 1.0 + al, -2.0 * c, 1.0 - al)
    }

    pub fn notch(f: f64, fs: f64) -> Self {
        let (c, al) = Self::omega(f, fs, NOTCH_Q);
        Self::from_rbj([1.0, -2.0 * c, 1.0], 1.0 + al, -2.0 * c, 1.0 - al)
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form II state for a unit-step steady state.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[1] * g]
    }

    /// Magnitude response at frequency `f`.
    pub fn gain_at(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = z1 * self.b[1] + z2 * self.b[2] + self.b[0];
        let den = z1 * self.a[0] + z2 * self.a[1] + 1.0;
        (num / den).norm()
    }
}

/// Filters `x` in place through the cascade, starting from the steady state
/// of a constant input equal to `x[0]`.
fn sos_filter(sections: &[Biquad], x: &mut [f64]) {
    let Some(&x0) = x.first() else { return };
    let mut level = x0;
    for s in sections {
        let [u1, u2] = s.step_state();
        let (mut z1, mut z2) = (u1 * level, u2 * level);
        level *= s.dc_gain();
        for v in x.iter_mut() {
            let inp = *v;
            let y = s.b[0] * inp + z1;
            z1 = s.b[1] * inp - s.a[0] * y + z2;
            z2 = s.b[2] * inp - s.a[1] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd extension at both ends.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    sos_filter(sections, &mut ext);
    ext.reverse();
    sos_filter(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn map_channels(rec: &Recording, out_len: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((rec.n_channels(), out_len));
    for (i, row) in rec.signal().axis_iter(Axis(0)).enumerate() {
        let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        for (o, v) in out.row_mut(i).iter_mut().zip(f(&x)) {
            *o = v as f32;
        }
    }
    out
}

/// High-pass + low-pass (second order each) and a notch, applied forward and
/// backward so the result has zero phase.
pub fn bandpass_notch(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    let fs = rec.sample_rate();
    if fs <= 2.0 * cfg.band_high_hz {
        return Err(Error::InvalidConfig(format!(
            "sample rate {fs} Hz too low for a {} Hz band edge",
            cfg.band_high_hz
        )));
    }
    if cfg.notch_hz >= fs / 2.0 {
        return Err(Error::InvalidConfig(format!("notch {} Hz above Nyquist", cfg.notch_hz)));
    }
    let sections =
        [Biquad::highpass(cfg.band_low_hz, fs), Biquad::lowpass(cfg.band_high_hz, fs), Biquad::notch(cfg.notch_hz, fs)];
    let out = map_channels(rec, rec.n_samples(), |x| filtfilt(&sections, x));
    rec.with_signal(out, fs)
}

/// Band-limited resampling by truncating the spectrum. Only downsampling is
/// supported; `T_out = round(T * target / rate)`.
pub fn resample(rec: &Recording, target_rate: f64) -> Result<Recording> {
    let fs = rec.sample_rate();
    if !(target_rate > 0.0) || target_rate > fs {
        return Err(Error::InvalidConfig(format!(
            "cannot resample {fs} Hz to {target_rate} Hz (upsampling unsupported)"
        )));
    }
    let n_in = rec.n_samples();
    let n_out = ((n_in as f64 * target_rate / fs).round() as usize).max(1);
    if n_out == n_in {
        return rec.with_signal(rec.signal().to_owned(), target_rate);
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_in);
    let inv = planner.plan_fft_inverse(n_out);
    let out = map_channels(rec, n_out, |x| {
        let mut spec: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fwd.process(&mut spec);
        let mut y = vec![Complex::new(0.0, 0.0); n_out];
        let nyq = n_out / 2 + 1;
        y[..nyq].copy_from_slice(&spec[..nyq]);
        for k in nyq..n_out {
            y[k] = spec[n_in - (n_out - k)];
        }
        if n_out.is_multiple_of(2) {
            // fold both halves of the new Nyquist bin into one real bin
            let h = n_out / 2;
            y[h] = spec[h] + spec[n_in - h];
        }
        inv.process(&mut y);
        let scale = 1.0 / n_in as f64;
        y.iter().map(|c| c.re * scale).collect()
    });
    rec.with_signal(out, target_rate)
}

/// Ordered contacts of each electrode shaft. Every channel must appear in
/// exactly one shaft.
pub type ShaftMap = Vec<Vec<usize>>;

fn check_shafts(c: usize, shafts: &ShaftMap) -> Result<()> {
    let mut seen = vec![false; c];
    for &ch in shafts.iter().flatten() {
        if ch >= c || std::mem::replace(&mut seen[ch], true) {
            return Err(Error::InvalidConfig(format!("shaft map repeats or exceeds channel {ch}")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidConfig("shaft map does not cover every channel".into()));
    }
    Ok(())
}

pub fn rereference(rec: &Recording, scheme: ReferenceScheme, shafts: &ShaftMap) -> Result<Recording> {
    if scheme == ReferenceScheme::Raw {
        return Ok(rec.clone());
    }
    check_shafts(rec.n_channels(), shafts)?;
    let sig = rec.signal();
    let ids = rec.channel_ids();
    let coords = rec.channel_coords();
    let t = rec.n_samples();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut new_ids = Vec::new();
    let mut new_coords = Vec::new();
    match scheme {
        ReferenceScheme::Bipolar => {
            for shaft in shafts {
                if shaft.len() < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "bipolar reference needs at least 2 contacts per shaft, got {}",
                        shaft.len()
                    )));
                }
                for pair in shaft.windows(2) {
                    let (lo, hi) = (pair[0], pair[1]);
                    rows.push((0..t).map(|i| sig[[hi, i]] - sig[[lo, i]]).collect());
                    new_ids.push(format!("{}-{}", ids[hi], ids[lo]));
                    if let Some(co) = coords {
                        new_coords.push([0, 1, 2].map(|k| 0.5 * (co[hi][k] + co[lo][k])));
                    }
                }
            }
        }
        ReferenceScheme::Laplacian => {
            let mut order = Vec::new();
            for shaft in shafts {
                for (pos, &ch) in shaft.iter().enumerate() {
                    let nbrs: Vec<usize> = [pos.checked_sub(1), Some(pos + 1)]
                        .into_iter()
                        .flatten()
                        .filter_map(|p| shaft.get(p).copied())
                        .collect();
                    let row: Vec<f32> = (0..t)
                        .map(|i| {
                            if nbrs.is_empty() {
                                return sig[[ch, i]];
                            }
                            let m = nbrs.iter().map(|&n| sig[[n, i]] as f64).sum::<f64>() / nbrs.len() as f64;
                            (sig[[ch, i]] as f64 - m) as f32
                        })
                        .collect();
                    order.push((ch, row));
                }
            }
            // keep the original channel order
            order.sort_by_key(|(ch, _)| *ch);
            for (ch, row) in order {
                rows.push(row);
                new_ids.push(ids[ch].clone());
                if let Some(co) = coords {
                    new_coords.push(co[ch]);
                }
            }
        }
        ReferenceScheme::Raw => unreachable!(),
    }
    let signal = Array2::from_shape_vec((rows.len(), t), rows.concat()).map_err(|e| Error::Shape(e.to_string()))?;
    Recording::with_parts(signal, rec.sample_rate(), new_ids, coords.map(|_| new_coords), scheme)
}

/// Per-channel z-score with population std. Channels whose std is below
/// 1e-8 are set to zero; their indices are returned.
pub fn zscore(rec: &Recording) -> Result<(Recording, Vec<usize>)> {
    if rec.n_samples() < 2 {
        return Err(Error::InvalidRecording("z-score needs at least 2 samples".into()));
    }
    let mut flat = Vec::new();
    let mut out = Array2::<f32>::zeros(rec.signal().dim());
    for (i, row) in rec.signal().axis_iter(Axis(0)).enumerate() {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < FLAT_STD {
            flat.push(i);
            continue;
        }
        for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
            *o = ((v as f64 - mean) / std) as f32;
        }
    }
    Ok((rec.with_signal(out, rec.sample_rate())?, flat))
}

/// Runs the whole chain. Returns the conditioned recording and the channels
/// flagged as flat by the z-score step.
pub fn preprocess(rec: &Recording, cfg: &PreprocessConfig, shafts: &ShaftMap) -> Result<(Recording, Vec<usize>)> {
    cfg.validate()?;
    let filtered = bandpass_notch(rec, cfg)?;
    let resampled = resample(&filtered, cfg.target_rate_hz)?;
    let referenced = rereference(&resampled, cfg.reference, shafts)?;
    if cfg.zscore {
        zscore(&referenced)
    } else {
        Ok((referenced, Vec::new()))
    }
}
