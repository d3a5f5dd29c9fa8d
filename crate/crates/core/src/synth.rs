//! Synthetic recordings with planted functional channel groups and
//! class-conditioned activity in one "task" group, plus the adjusted Rand
//! index used to score recovered groupings.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::downstream::vocab;
use crate::preprocess::{filtfilt, Biquad};
use crate::recording::{write_recording, Recording, TrialTable};
use crate::train::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_channels: usize,
    pub n_groups: usize,
    /// Independent smooth latent signals per group.
    pub latent_dim: usize,
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub sample_rate: f64,
    pub trial_secs: f64,
    /// Rest between consecutive trials.
    pub gap_secs: f64,
    /// Low-pass cutoff of the latent signals.
    pub latent_cutoff_hz: f64,
    /// Spread of per-channel mixing directions around the group direction.
    pub mixing_spread: f64,
    /// Amplitude of the background latent in the task group, relative to the
    /// class templates.
    pub task_background: f64,
    /// Noise std relative to the unit-variance clean channel signal
    /// (1.0 gives 0 dB per-channel SNR).
    pub noise_std: f64,
    pub task_group: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_channels: 40,
            n_groups: 4,
            latent_dim: 2,
            n_classes: 10,
            trials_per_class: 20,
            sample_rate: 400.0,
            trial_secs: 1.6,
            gap_secs: 0.8,
            latent_cutoff_hz: 6.0,
            mixing_spread: 0.4,
            task_background: 0.5,
            noise_std: 1.0,
            task_group: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.n_groups == 0 || self.n_channels < self.n_groups {
            return bad("need at least one channel per group");
        }
        if self.latent_dim == 0 || self.n_classes == 0 || self.trials_per_class == 0 {
            return bad("latent_dim, n_classes and trials_per_class must be positive");
        }
        if self.task_group >= self.n_groups {
            return bad("task group out of range");
        }
        if !(self.sample_rate > 0.0 && self.trial_secs > 0.0 && self.gap_secs >= 0.0) {
            return bad("timing must be positive");
        }
        if !(self.latent_cutoff_hz > 0.0 && self.latent_cutoff_hz < self.sample_rate / 2.0) {
            return bad("latent cutoff outside (0, Nyquist)");
        }
        if self.noise_std < 0.0 || self.mixing_spread < 0.0 || self.task_background < 0.0 {
            return bad("negative noise, spread or background");
        }
        if self.trial_len() < 7 * 2 {
            return bad("trials too short for their token segments");
        }
        Ok(())
    }

    pub fn trial_len(&self) -> usize {
        (self.trial_secs * self.sample_rate).round() as usize
    }

    fn gap_len(&self) -> usize {
        (self.gap_secs * self.sample_rate).round() as usize
    }
}

/// Everything the generator planted.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Group of each channel.
    pub groups: Vec<usize>,
    pub task_group: usize,
    /// Clean latent signals per group, `[latent_dim, T]`.
    pub latents: Vec<Array2<f64>>,
    /// Class templates `[latent_dim, trial_len]`.
    pub templates: Vec<Array2<f64>>,
}

impl GroundTruth {
    pub fn task_channels(&self) -> Vec<usize> {
        self.channels_of(self.task_group)
    }

    pub fn channels_of(&self, group: usize) -> Vec<usize> {
        (0..self.groups.len()).filter(|&c| self.groups[c] == group).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub recording: Recording,
    pub trials: TrialTable,
    pub truth: GroundTruth,
}

impl SyntheticDataset {
    /// Writes `recording.json`/`recording.f32` and `trials.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        write_recording(&self.recording, &dir.join("recording.json"))?;
        self.trials.write(&dir.join("trials.json"))
    }
}

/// Unit-variance low-pass noise of length `n`.
fn smooth_noise(n: usize, cutoff: f64, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let lp = Biquad::lowpass(cutoff, rate);
    let mut x = filtfilt(&[lp, lp], &white);
    let m = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    for v in &mut x {
        *v = (*v - m) / sd;
    }
    x
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Token sequence of class `y`: a two-syllable word `| I F | I F |` whose
/// initials and finals are distinct across classes while the vocabulary
/// allows.
pub fn class_tokens(y: usize) -> Vec<usize> {
    vec![
        vocab::SILENCE,
        vocab::initial(2 * y),
        vocab::final_(2 * y),
        vocab::SILENCE,
        vocab::initial(2 * y + 1),
        vocab::final_(2 * y + 1),
        vocab::SILENCE,
    ]
}

/// Pearson correlation of two flattened arrays.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt().max(1e-300)
}

/// Class templates built from per-token waveforms; silence tokens are flat.
/// Token waveforms are redrawn until every pair of class templates has
/// correlation below 0.5.
fn make_templates(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Array2<f64>> {
    let t = spec.trial_len();
    let k = spec.latent_dim;
    let segs = class_tokens(0).len();
    for _ in 0..100 {
        let mut wave: Vec<Option<Array2<f64>>> = vec![None; vocab::VOCAB_SIZE];
        let mut templates = Vec::with_capacity(spec.n_classes);
        for y in 0..spec.n_classes {
            let mut tpl = Array2::zeros((k, t));
            for (s, &tok) in class_tokens(y).iter().enumerate() {
                if tok == vocab::SILENCE {
                    continue;
                }
                let (a, b) = (s * t / segs, (s + 1) * t / segs);
                let w = wave[tok].get_or_insert_with(|| {
                    let mut w = Array2::zeros((k, b - a));
                    for mut row in w.rows_mut() {
                        let x = smooth_noise(b - a, spec.latent_cutoff_hz.max(4.0) * 2.0, spec.sample_rate, rng);
                        // taper the token edges
                        let n = x.len();
                        for (i, (dst, v)) in row.iter_mut().zip(x).enumerate() {
                            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos();
                            *dst = 1.6 * v * hann.sqrt();
                        }
                    }
                    w
                });
                let len = (b - a).min(w.ncols());
                tpl.slice_mut(ndarray::s![.., a..a + len]).assign(&w.slice(ndarray::s![.., ..len]));
            }
            templates.push(tpl);
        }
        let ok = (0..templates.len()).all(|i| {
            (i + 1..templates.len())
                .all(|j| correlation(templates[i].as_slice().unwrap(), templates[j].as_slice().unwrap()) < 0.5)
        });
        if ok {
            return templates;
        }
    }
    panic!("could not draw distinct class templates")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[0x5e]);
    let (c, k) = (spec.n_channels, spec.latent_dim);

    // balanced membership, randomly placed
    let mut groups: Vec<usize> = (0..c).map(|i| i * spec.n_groups / c).collect();
    groups.shuffle(&mut rng);

    // trial schedule: every class `trials_per_class` times, shuffled
    let mut classes: Vec<usize> =
        (0..spec.n_classes).flat_map(|y| std::iter::repeat_n(y, spec.trials_per_class)).collect();
    classes.shuffle(&mut rng);
    let (tl, gl) = (spec.trial_len(), spec.gap_len());
    let onsets: Vec<usize> = (0..classes.len()).map(|i| gl + i * (tl + gl)).collect();
    let total = gl + classes.len() * (tl + gl);

    let templates = make_templates(spec, &mut rng);
    let mut latents = Vec::with_capacity(spec.n_groups);
    for g in 0..spec.n_groups {
        let mut lat = Array2::zeros((k, total));
        for j in 0..k {
            let x = smooth_noise(total, spec.latent_cutoff_hz, spec.sample_rate, &mut rng);
            lat.row_mut(j).assign(&ndarray::Array1::from(x));
        }
        if g == spec.task_group {
            lat *= spec.task_background;
            for (&on, &y) in onsets.iter().zip(&classes) {
                let mut view = lat.slice_mut(ndarray::s![.., on..on + tl]);
                view += &templates[y];
            }
        }
        latents.push(lat);
    }

    let group_dirs: Vec<Vec<f64>> = (0..spec.n_groups)
        .map(|_| {
            let mut v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            unit(&mut v);
            v
        })
        .collect();
    let mut signal = Array2::<f32>::zeros((c, total));
    for ch in 0..c {
        let g = groups[ch];
        let mut m: Vec<f64> = group_dirs[g]
            .iter()
            .map(|&u| {
                u + spec.mixing_spread * Distribution::<f64>::sample(&StandardNormal, &mut rng) / (k as f64).sqrt()
            })
            .collect();
        unit(&mut m);
        let clean: Vec<f64> = (0..total).map(|t| (0..k).map(|j| m[j] * latents[g][[j, t]]).sum()).collect();
        let mean = clean.iter().sum::<f64>() / total as f64;
        let sd = (clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total as f64).sqrt().max(1e-12);
        for (t, v) in clean.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            signal[[ch, t]] = ((v - mean) / sd + spec.noise_std * noise) as f32;
        }
    }
    let recording = Recording::from_signal(signal, spec.sample_rate)?;
    let trials = TrialTable {
        onsets,
        trial_len: tl,
        sequences: Some(classes.iter().map(|&y| class_tokens(y)).collect()),
        classes,
        class_names: (0..spec.n_classes).map(|y| format!("word{y}")).collect(),
        token_names: Some(vocab::tokens()),
    };
    Ok(SyntheticDataset {
        recording,
        trials,
        truth: GroundTruth { groups, task_group: spec.task_group, latents, templates },
    })
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as u64;
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        // both partitions trivial (all-in-one or all singletons)
        return if a == b { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}
