//! Loading the experiment's recording and trial table.

use std::path::Path;

use strata_core::preprocess::{preprocess, ShaftMap};
use strata_core::synth::generate;
use strata_core::{read_recording, Recording, TrialTable};

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Dataset {
    pub recording: Recording,
    pub trials: TrialTable,
    /// Planted channel groups, known only for synthetic data.
    pub truth_groups: Option<Vec<usize>>,
    /// Channels the z-score step found flat.
    pub flat_channels: Vec<usize>,
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

/// Maps trial onsets and length onto a new sample rate and drops trials that
/// no longer fit in the recording.
pub fn rescale_trials(trials: &TrialTable, from_rate: f64, to_rate: f64, n_samples: usize) -> TrialTable {
    if from_rate == to_rate {
        return trials.clone();
    }
    let ratio = to_rate / from_rate;
    let trial_len = ((trials.trial_len as f64 * ratio).round() as usize).max(1);
    let onsets: Vec<usize> = trials.onsets.iter().map(|&o| (o as f64 * ratio).round() as usize).collect();
    let keep: Vec<usize> = (0..onsets.len()).filter(|&i| onsets[i] + trial_len <= n_samples).collect();
    if keep.len() < onsets.len() {
        log::warn!("dropping {} trials that end past the resampled recording", onsets.len() - keep.len());
    }
    TrialTable {
        onsets: keep.iter().map(|&i| onsets[i]).collect(),
        trial_len,
        classes: keep.iter().map(|&i| trials.classes[i]).collect(),
        class_names: trials.class_names.clone(),
        sequences: trials.sequences.as_ref().map(|s| keep.iter().map(|&i| s[i].clone()).collect()),
        token_names: trials.token_names.clone(),
    }
}

/// Reads or generates the data. Missing or malformed inputs are
/// configuration errors.
pub fn load(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let (recording, trials, truth_groups) = match (&cfg.data.recording, &cfg.data.trials) {
        (Some(rp), Some(tp)) => {
            let rec = read_recording(rp).map_err(|e| config_err(rp, e))?;
            let trials = TrialTable::read(tp).map_err(|e| config_err(tp, e))?;
            (rec, trials, None)
        }
        _ => {
            let ds = generate(&cfg.data.synthetic).map_err(|e| CliError::Config(e.to_string()))?;
            (ds.recording, ds.trials, Some(ds.truth.groups))
        }
    };
    if cfg.stages.ctc && trials.sequences.is_none() {
        return Err(CliError::Config("the ctc stage needs token sequences in the trial table".into()));
    }
    Ok(Dataset { recording, trials, truth_groups, flat_channels: Vec::new() })
}

pub fn load_shafts(cfg: &ExperimentConfig) -> Result<ShaftMap, CliError> {
    match &cfg.data.shafts {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| config_err(p, e))
        }
        None => Ok(Vec::new()),
    }
}

/// Filters, resamples, re-references and standardizes the recording, moving
/// trial onsets onto the new sample grid.
pub fn apply_preprocess(cfg: &ExperimentConfig, ds: Dataset, shafts: &ShaftMap) -> strata_core::Result<Dataset> {
    let from_rate = ds.recording.sample_rate();
    let (rec, flat) = preprocess(&ds.recording, &cfg.preprocess, shafts)?;
    if !flat.is_empty() {
        log::warn!("flat channels after preprocessing: {flat:?}");
    }
    let trials = rescale_trials(&ds.trials, from_rate, rec.sample_rate(), rec.n_samples());
    Ok(Dataset { recording: rec, trials, truth_groups: ds.truth_groups, flat_channels: flat })
}
