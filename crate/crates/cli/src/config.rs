//! Experiment configuration. A TOML file only needs the keys it changes:
//! it is merged over the built-in defaults before deserialization, and any
//! key that does not exist in the resolved configuration is rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use strata_autograd::nn::TransformerConfig;
use strata_autograd::optim::OptimizerConfig;
use strata_core::augment::AugmentConfig;
use strata_core::channel_graph::SpectralConfig;
use strata_core::coarse::{CoarseConfig, CoarseTrainConfig};
use strata_core::dpq::{DpqConfig, FineTrainConfig, VqVaeConfig};
use strata_core::fine::FineConfig;
use strata_core::preprocess::PreprocessConfig;
use strata_core::synth::SyntheticSpec;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// One downstream repetition per seed (split and head initialization).
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub stages: Stages,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub coarse: CoarseSection,
    pub cluster: ClusterSection,
    pub fine: FineSection,
    pub vqvae: VqVaeSection,
    pub mae: MaeSection,
    pub cls: DownstreamSection,
    pub ctc: DownstreamSection,
}

/// Either a synthetic dataset or a recording with its trial table. Files win
/// when `recording` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<PathBuf>,
    /// JSON list of channel-index lists, one per shaft, for bipolar and
    /// Laplacian referencing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shafts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub preprocess: bool,
    /// Coarse pretraining, connectivity, clustering and channel selection.
    pub coarse: bool,
    pub vqvae: bool,
    pub mae: bool,
    pub cls: bool,
    pub ctc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseSection {
    pub model: CoarseConfig,
    pub train: CoarseTrainConfig,
    pub augment: AugmentConfig,
    /// Fresh corrupted crops scored after training.
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub spectral: SpectralConfig,
    /// Samples averaged into one probe feature.
    pub probe_block: usize,
    /// Largest number of selected channels; 0 means no limit.
    pub budget: usize,
    pub batch_size: usize,
    /// Channels used by the fine stages when the coarse stage is off; empty
    /// means all channels.
    pub channels: Vec<usize>,
}

/// Encoder and crop layout shared by the VQ-VAE, mask modeling and the
/// downstream heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineSection {
    pub encoder: FineConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqVaeSection {
    pub dpq: DpqConfig,
    pub decoder: TransformerConfig,
    pub train: FineTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeSection {
    pub mask_ratio: f64,
    pub train: FineTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Mae,
    Vqvae,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSection {
    pub init: Init,
    pub optimizer: OptimizerConfig,
    pub shift_max_secs: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fine_opt = OptimizerConfig {
            batch_size: 32,
            max_lr: 2e-4,
            min_lr: 5e-6,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.05,
            epochs: 200,
            warmup_epochs: 20,
            grad_clip: None,
        };
        let vq = VqVaeConfig::default();
        let downstream = DownstreamSection { init: Init::Mae, optimizer: fine_opt, shift_max_secs: 0.2 };
        Self {
            name: "experiment".into(),
            seeds: vec![0, 1, 2, 3, 4, 5],
            data: DataConfig { synthetic: SyntheticSpec::default(), recording: None, trials: None, shafts: None },
            stages: Stages { preprocess: false, coarse: true, vqvae: true, mae: true, cls: true, ctc: true },
            split: SplitConfig { train: 0.6, val: 0.2, test: 0.2 },
            preprocess: PreprocessConfig::default(),
            coarse: CoarseSection {
                model: CoarseConfig::default(),
                train: CoarseTrainConfig::default(),
                augment: AugmentConfig::default(),
                eval_samples: 100,
            },
            cluster: ClusterSection {
                spectral: SpectralConfig::default(),
                probe_block: 40,
                budget: 0,
                batch_size: 8,
                channels: Vec::new(),
            },
            fine: FineSection { encoder: vq.encoder, augment: AugmentConfig::default() },
            vqvae: VqVaeSection { dpq: vq.dpq, decoder: vq.decoder, train: FineTrainConfig::vqvae() },
            mae: MaeSection { mask_ratio: 0.5, train: FineTrainConfig::mae() },
            cls: downstream.clone(),
            ctc: downstream,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Dotted paths of `user` keys absent from `resolved`.
fn unknown_keys(user: &toml::Table, resolved: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (resolved.get(k), v) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(r)), toml::Value::Table(u)) => unknown_keys(u, r, &path, out),
            _ => {}
        }
    }
}

/// Folds one `dotted.path=value` override into `user`. Values are read as
/// TOML, falling back to a bare string.
fn apply_override(user: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override key {path:?}")));
    }
    let mut table = user;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?} descends into a non-table value")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a configuration text, filling unspecified keys from the
    /// defaults.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Self::from_toml_with(text, &[])
    }

    /// Like [`Self::from_toml`], with `dotted.path=value` overrides applied on
    /// top of the file.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, user.clone());
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let resolved = toml::Table::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&user, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with(&text, overrides)?;
        // Relative data paths are taken from the configuration's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.recording, &mut cfg.data.trials, &mut cfg.data.shafts].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if let Ok(abs) = std::fs::canonicalize(&*p) {
                *p = abs;
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn vqvae_config(&self) -> VqVaeConfig {
        VqVaeConfig { encoder: self.fine.encoder.clone(), dpq: self.vqvae.dpq.clone(), decoder: self.vqvae.decoder }
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |m: String| Err(CliError::Config(m));
        let core = |r: strata_core::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        if self.seeds.is_empty() {
            return cfg_err("seeds must not be empty".into());
        }
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|&r| r <= 0.0) || ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            return cfg_err(format!("split ratios {} / {} / {} must be positive and sum to 1", s.train, s.val, s.test));
        }
        if self.vqvae.dpq.groups == 0 {
            return cfg_err("codex groups must be at least 1; unquantized targets are not supported".into());
        }
        if self.stages.preprocess {
            core(self.preprocess.validate())?;
        }
        if self.data.recording.is_some() != self.data.trials.is_some() {
            return cfg_err("data.recording and data.trials must be given together".into());
        }
        if self.data.recording.is_none() {
            core(self.data.synthetic.validate())?;
        }
        if self.stages.coarse {
            core(self.coarse.model.validate())?;
            core(self.coarse.augment.validate())?;
            if self.cluster.spectral.k == 0 || self.cluster.probe_block == 0 || self.cluster.batch_size == 0 {
                return cfg_err("cluster k, probe_block and batch_size must be positive".into());
            }
        }
        let needs_fine = self.stages.vqvae || self.stages.mae || self.stages.cls || self.stages.ctc;
        if needs_fine {
            core(self.fine.encoder.validate())?;
            core(self.fine.augment.validate())?;
        }
        if self.stages.vqvae {
            core(self.vqvae_config().validate())?;
        }
        if self.stages.mae {
            if !self.stages.vqvae {
                return cfg_err("mask modeling needs the vqvae stage for its targets".into());
            }
            if !(self.mae.mask_ratio > 0.0 && self.mae.mask_ratio < 1.0) {
                return cfg_err(format!("mask ratio {} must lie in (0, 1)", self.mae.mask_ratio));
            }
        }
        let stage_opts = [
            ("coarse", self.stages.coarse, &self.coarse.train.optimizer),
            ("vqvae", self.stages.vqvae, &self.vqvae.train.optimizer),
            ("mae", self.stages.mae, &self.mae.train.optimizer),
            ("cls", self.stages.cls, &self.cls.optimizer),
            ("ctc", self.stages.ctc, &self.ctc.optimizer),
        ];
        for (name, on, opt) in stage_opts {
            if on && (opt.batch_size == 0 || opt.epochs == 0 || opt.max_lr <= 0.0 || opt.min_lr < 0.0) {
                return cfg_err(format!("{name}: batch size, epochs and max_lr must be positive"));
            }
        }
        for (name, on, section) in [("cls", self.stages.cls, &self.cls), ("ctc", self.stages.ctc, &self.ctc)] {
            if !on {
                continue;
            }
            match section.init {
                Init::Mae if !self.stages.mae => {
                    return cfg_err(format!("{name} starts from the mask-modeling encoder but the mae stage is off"))
                }
                Init::Vqvae if !self.stages.vqvae => {
                    return cfg_err(format!("{name} starts from the VQ-VAE encoder but the vqvae stage is off"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Output directory name: experiment name plus a short config hash.
    pub fn run_name(&self) -> String {
        format!("{}-{}", self.name, &self.hash()[..12])
    }
}
