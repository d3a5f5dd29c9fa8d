//! Staged experiment runs.
//!
//! A run lives in `<out>/<name>-<hash>/vNNN/` and holds the resolved
//! configuration, a `state.json` marker listing completed stages, and one
//! directory per stage. Every stage saves its checkpoint and later stages
//! read the saved weights back, so an interrupted run resumed with
//! [`resume`] finishes with the same outputs as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use strata_core::augment::pretrain_windows;
use strata_core::channel_graph::{
    accumulate_connectivity, normalize_per_channel, select_groups, spectral_cluster, ChannelClustering, GroupSelection,
};
use strata_core::coarse::{evaluate_context, train_coarse, CoarseModel};
use strata_core::downstream::{
    centroid_probe, finetune_cls, finetune_ctc, EncoderInit, FinetuneConfig, MetricReport, Task, TrialSplits,
};
use strata_core::dpq::{train_vqvae, VqVae};
use strata_core::mae::{train_mae, MaeModel};
use strata_core::synth::adjusted_rand_index;
use strata_core::train::{rng_for, to_jsonl, MetricRecord};
use strata_core::{split_trials, DatasetSplit, Recording, TrialBatch};

use crate::config::{ExperimentConfig, Init};
use crate::data::{self, Dataset};
use crate::plots::{heatmap, line_chart, Series};
use crate::{report, CliError};

pub const STATE_FILE: &str = "state.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

/// Progress marker of a run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub completed: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<StageFailure>,
    #[serde(default)]
    pub flat_channels: Vec<usize>,
    /// Wall-clock seconds per stage, kept out of the metric logs so those
    /// stay reproducible.
    #[serde(default)]
    pub stage_secs: BTreeMap<String, f64>,
}

impl RunState {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(path.display(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::io(path.display(), e))
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_text(&dir.join(STATE_FILE), &serde_json::to_string_pretty(self).expect("state serializes"))
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.completed.iter().any(|s| s == stage)
    }
}

/// Clustering outcome written by the cluster stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub n_windows: usize,
    pub labels: Vec<usize>,
    pub selection: GroupSelection,
    /// Agreement with the planted groups, for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path.display(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::io(path.display(), e)))
        .collect()
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path.display(), e))
}

/// Creates the next free `vNNN` directory under `parent`.
pub fn new_version_dir(parent: &Path) -> Result<PathBuf, CliError> {
    mkdir(parent)?;
    for v in 1.. {
        let dir = parent.join(format!("v{v:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(dir.display(), e)),
        }
    }
    unreachable!("version numbers exhausted")
}

/// Plots the named keys of a metric log against epoch.
fn plot_log(path: &Path, title: &str, log: &[MetricRecord], keys: &[&str]) -> Result<(), CliError> {
    let series: Vec<Series> = keys
        .iter()
        .map(|k| Series {
            label: k.to_string(),
            points: log.iter().filter_map(|r| r.get(k).map(|v| (r.epoch as f64, v))).collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if series.is_empty() {
        return Ok(());
    }
    line_chart(path, title, "epoch", "value", &series)
}

/// Rows and columns reordered so that channels of one cluster are adjacent.
fn cluster_ordered(p: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&c| (labels[c], c));
    Array2::from_shape_fn(p.dim(), |(r, c)| p[[order[r], order[c]]])
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    state: RunState,
    current: String,
}

impl Runner<'_> {
    fn stage_dir(&self, stage: &str) -> Result<PathBuf, CliError> {
        let d = self.dir.join(stage);
        mkdir(&d)?;
        Ok(d)
    }

    fn begin(&mut self, stage: &str) -> Instant {
        self.current = stage.to_string();
        log::info!("stage {stage}");
        Instant::now()
    }

    fn finish(&mut self, stage: &str, t0: Instant) -> Result<(), CliError> {
        self.state.completed.push(stage.to_string());
        self.state.stage_secs.insert(stage.to_string(), t0.elapsed().as_secs_f64());
        self.state.write(&self.dir)
    }

    fn fail<E: std::fmt::Display>(&self, e: E) -> CliError {
        CliError::stage(&self.current, e)
    }

    fn coarse_model(&self, rec: &Recording) -> Result<CoarseModel, CliError> {
        let mut rng = rng_for(self.cfg.coarse.train.seed, &[10]);
        CoarseModel::new(self.cfg.coarse.model.clone(), rec.n_channels(), rec.channel_coords(), &mut rng)
            .map_err(|e| self.fail(e))
    }

    fn coarse(&mut self, rec: &Recording) -> Result<(), CliError> {
        if self.state.is_done("coarse") {
            return Ok(());
        }
        let t0 = self.begin("coarse");
        let sd = self.stage_dir("coarse")?;
        let cfg = &self.cfg.coarse;
        let mut model = self.coarse_model(rec)?;
        let log = train_coarse(&mut model, rec, &cfg.augment, &cfg.train).map_err(|e| self.fail(e))?;
        let accuracy =
            evaluate_context(&model, rec, &cfg.augment, cfg.eval_samples, cfg.train.seed).map_err(|e| self.fail(e))?;
        model.params.save(&sd.join("checkpoint")).map_err(|e| self.fail(e))?;
        write_text(&sd.join("metrics.jsonl"), &to_jsonl(&log))?;
        write_json(&sd.join("eval.json"), &serde_json::json!({ "context_accuracy": accuracy }))?;
        plot_log(&sd.join("loss.svg"), "spatial-context loss", &log, &["loss"])?;
        plot_log(&sd.join("accuracy.svg"), "spatial-context accuracy", &log, &["accuracy"])?;
        self.finish("coarse", t0)
    }

    fn probe_split(&self, n_trials: usize, seed: u64) -> Result<DatasetSplit, CliError> {
        let s = &self.cfg.split;
        split_trials(n_trials, (s.train, s.val, s.test), seed).map_err(|e| self.fail(e))
    }

    fn cluster(&mut self, data: &Dataset) -> Result<Vec<usize>, CliError> {
        let sd = self.dir.join("cluster");
        if !self.state.is_done("cluster") {
            let t0 = self.begin("cluster");
            mkdir(&sd)?;
            let rec = &data.recording;
            let cfg = &self.cfg.cluster;
            let mut model = self.coarse_model(rec)?;
            model.params.load(&self.dir.join("coarse/checkpoint"), "").map_err(|e| self.fail(e))?;
            let layout = pretrain_windows(rec, &self.cfg.coarse.augment).map_err(|e| self.fail(e))?;
            let windows: Vec<ArrayView2<f32>> = (0..layout.len()).map(|s| layout.crop(rec, s, 0)).collect();
            let conn = accumulate_connectivity(&model, &windows, cfg.batch_size).map_err(|e| self.fail(e))?;
            conn.write(&sd.join("connectivity.json")).map_err(|e| self.fail(e))?;
            let clustering: ChannelClustering = spectral_cluster(&conn.p, &cfg.spectral).map_err(|e| self.fail(e))?;
            let split = self.probe_split(data.trials.len(), cfg.spectral.seed)?;
            let probe = |channels: &[usize]| {
                let train = data.trials.class_batch(rec, channels, &split.train)?;
                let val = data.trials.class_batch(rec, channels, &split.val)?;
                centroid_probe(&train, &val, cfg.probe_block)
            };
            let budget = if cfg.budget == 0 { rec.n_channels() } else { cfg.budget };
            let selection = select_groups(&clustering, probe, budget).map_err(|e| self.fail(e))?;
            let normalized = normalize_per_channel(&conn.p);
            heatmap(&sd.join("connectivity.svg"), "channel connectivity", &normalized)?;
            heatmap(
                &sd.join("connectivity_by_cluster.svg"),
                "channel connectivity, grouped by cluster",
                &cluster_ordered(&normalized, &clustering.labels),
            )?;
            let summary = ClusterSummary {
                k: clustering.k,
                n_windows: windows.len(),
                ari: data.truth_groups.as_ref().map(|t| adjusted_rand_index(&clustering.labels, t)),
                labels: clustering.labels,
                selection,
            };
            write_json(&sd.join("summary.json"), &summary)?;
            self.finish("cluster", t0)?;
        }
        let summary: ClusterSummary = read_json(&sd.join("summary.json"))?;
        Ok(summary.selection.channels)
    }

    fn vq_model(&self, n_channels: usize) -> Result<VqVae, CliError> {
        let mut rng = rng_for(self.cfg.vqvae.train.seed, &[11]);
        VqVae::new(self.cfg.vqvae_config(), n_channels, &mut rng).map_err(|e| self.fail(e))
    }

    fn vqvae(&mut self, rec: &Recording) -> Result<VqVae, CliError> {
        let ckpt = self.dir.join("vqvae/checkpoint");
        if !self.state.is_done("vqvae") {
            let t0 = self.begin("vqvae");
            let sd = self.stage_dir("vqvae")?;
            let mut model = self.vq_model(rec.n_channels())?;
            let log = train_vqvae(&mut model, rec, &self.cfg.fine.augment, &self.cfg.vqvae.train)
                .map_err(|e| self.fail(e))?;
            mkdir(&ckpt)?;
            model.save(&ckpt).map_err(|e| self.fail(e))?;
            write_text(&sd.join("metrics.jsonl"), &to_jsonl(&log))?;
            plot_log(&sd.join("loss.svg"), "VQ-VAE losses", &log, &["rgs", "vq", "pc"])?;
            let ppl: Vec<String> = (0..self.cfg.vqvae.dpq.groups).map(|g| format!("perplexity_g{g}")).collect();
            let keys: Vec<&str> = ppl.iter().map(String::as_str).collect();
            plot_log(&sd.join("perplexity.svg"), "codex perplexity", &log, &keys)?;
            self.finish("vqvae", t0)?;
        }
        self.current = "vqvae".into();
        let mut model = self.vq_model(rec.n_channels())?;
        model.load(&ckpt).map_err(|e| self.fail(e))?;
        Ok(model)
    }

    fn mae_model(&self, vq: &VqVae) -> Result<MaeModel, CliError> {
        let mut rng = rng_for(self.cfg.mae.train.seed, &[12]);
        MaeModel::for_vqvae(vq, self.cfg.mae.mask_ratio, &mut rng).map_err(|e| self.fail(e))
    }

    fn mae(&mut self, rec: &Recording, vq: &VqVae) -> Result<MaeModel, CliError> {
        let ckpt = self.dir.join("mae/checkpoint");
        if !self.state.is_done("mae") {
            let t0 = self.begin("mae");
            let sd = self.stage_dir("mae")?;
            let mut model = self.mae_model(vq)?;
            let log = train_mae(&mut model, vq, rec, &self.cfg.fine.augment, &self.cfg.mae.train)
                .map_err(|e| self.fail(e))?;
            model.params.save(&ckpt).map_err(|e| self.fail(e))?;
            write_text(&sd.join("metrics.jsonl"), &to_jsonl(&log))?;
            plot_log(&sd.join("loss.svg"), "mask-prediction loss", &log, &["loss"])?;
            plot_log(&sd.join("accuracy.svg"), "mask-prediction accuracy", &log, &["accuracy"])?;
            self.finish("mae", t0)?;
        }
        self.current = "mae".into();
        let mut model = self.mae_model(vq)?;
        model.params.load(&ckpt, "").map_err(|e| self.fail(e))?;
        Ok(model)
    }

    fn downstream(
        &mut self,
        task: Task,
        data: &Dataset,
        channels: &[usize],
        vq: Option<&VqVae>,
        mae: Option<&MaeModel>,
    ) -> Result<(), CliError> {
        let cfg = self.cfg;
        let (name, section) = match task {
            Task::Cls => ("cls", &cfg.cls),
            Task::Ctc => ("ctc", &cfg.ctc),
        };
        if self.state.is_done(name) {
            return Ok(());
        }
        let t0 = self.begin(name);
        let sd = self.stage_dir(name)?;
        let init = match section.init {
            Init::Mae => EncoderInit::Pretrained(&mae.expect("validated: mae stage enabled").params),
            Init::Vqvae => EncoderInit::Pretrained(&vq.expect("validated: vqvae stage enabled").params),
            Init::Random => EncoderInit::Random,
        };
        let rec = &data.recording;
        let mut reports = Vec::new();
        let mut curves = Vec::new();
        for &seed in &cfg.seeds {
            let seed_dir = sd.join(format!("seed{seed}"));
            let report_path = seed_dir.join("report.json");
            if !report_path.exists() {
                mkdir(&seed_dir)?;
                let split = self.probe_split(data.trials.len(), seed)?;
                let batch = |idx: &[usize]| -> strata_core::Result<TrialBatch> {
                    match task {
                        Task::Cls => data.trials.class_batch(rec, channels, idx),
                        Task::Ctc => data.trials.sequence_batch(rec, channels, idx),
                    }
                };
                let splits = TrialSplits {
                    train: batch(&split.train).map_err(|e| self.fail(e))?,
                    val: batch(&split.val).map_err(|e| self.fail(e))?,
                    test: batch(&split.test).map_err(|e| self.fail(e))?,
                };
                let fcfg = FinetuneConfig {
                    encoder: cfg.fine.encoder.clone(),
                    optimizer: section.optimizer.clone(),
                    shift_max_secs: section.shift_max_secs,
                    seed,
                };
                let rate = rec.sample_rate();
                let (params, report, log) = match task {
                    Task::Cls => finetune_cls(init, &splits, &fcfg, rate).map(|(m, r, l)| (m.params, r, l)),
                    Task::Ctc => finetune_ctc(init, &splits, &fcfg, rate).map(|(m, r, l)| (m.params, r, l)),
                }
                .map_err(|e| self.fail(e))?;
                params.save(&seed_dir.join("checkpoint")).map_err(|e| self.fail(e))?;
                write_text(&seed_dir.join("metrics.jsonl"), &to_jsonl(&log))?;
                write_json(&report_path, &report)?;
            }
            let log: Vec<MetricRecord> = read_jsonl(&seed_dir.join("metrics.jsonl"))?;
            curves.push(Series {
                label: format!("seed {seed}"),
                points: log
                    .iter()
                    .filter(|r| r.stage == name)
                    .filter_map(|r| r.get("val_score").map(|v| (r.epoch as f64, v)))
                    .collect(),
            });
            reports.push(read_json::<MetricReport>(&report_path)?);
        }
        let lines: Vec<String> = reports.iter().map(|r| serde_json::to_string(r).expect("report serializes")).collect();
        write_text(&sd.join("reports.jsonl"), &(lines.join("\n") + "\n"))?;
        let metric = if task == Task::Cls { "validation accuracy" } else { "validation 1 - SER" };
        line_chart(&sd.join("validation.svg"), &format!("{name}: {metric}"), "epoch", metric, &curves)?;
        self.finish(name, t0)
    }

    fn execute(&mut self, raw: Dataset) -> Result<(), CliError> {
        let cfg = self.cfg;
        let data = if cfg.stages.preprocess {
            self.begin("preprocess");
            let shafts = data::load_shafts(cfg)?;
            let ds = data::apply_preprocess(cfg, raw, &shafts).map_err(|e| self.fail(e))?;
            self.state.flat_channels = ds.flat_channels.clone();
            ds
        } else {
            raw
        };
        let channels: Vec<usize> = if cfg.stages.coarse {
            self.coarse(&data.recording)?;
            self.cluster(&data)?
        } else if cfg.cluster.channels.is_empty() {
            (0..data.recording.n_channels()).collect()
        } else {
            cfg.cluster.channels.clone()
        };
        if let Some(&c) = channels.iter().find(|&&c| c >= data.recording.n_channels()) {
            return Err(CliError::Config(format!(
                "channel {c} out of range for {} channels",
                data.recording.n_channels()
            )));
        }
        let needs_fine = cfg.stages.vqvae || cfg.stages.cls || cfg.stages.ctc;
        let selected =
            if needs_fine { Some(data.recording.select_channels(&channels).map_err(|e| self.fail(e))?) } else { None };
        let vq = match (&selected, cfg.stages.vqvae) {
            (Some(rec), true) => Some(self.vqvae(rec)?),
            _ => None,
        };
        let mae = match (&selected, &vq, cfg.stages.mae) {
            (Some(rec), Some(vq), true) => Some(self.mae(rec, vq)?),
            _ => None,
        };
        if cfg.stages.cls {
            self.downstream(Task::Cls, &data, &channels, vq.as_ref(), mae.as_ref())?;
        }
        if cfg.stages.ctc {
            self.downstream(Task::Ctc, &data, &channels, vq.as_ref(), mae.as_ref())?;
        }
        Ok(())
    }
}

fn drive(cfg: &ExperimentConfig, dir: PathBuf, mut state: RunState, raw: Dataset) -> Result<PathBuf, CliError> {
    state.failed = None;
    state.write(&dir)?;
    let mut runner = Runner { cfg, dir, state, current: "setup".into() };
    match runner.execute(raw) {
        Ok(()) => {
            runner.state.write(&runner.dir)?;
            report::write(&runner.dir)?;
            Ok(runner.dir)
        }
        Err(e) => {
            let stage = match &e {
                CliError::Stage { stage, .. } => stage.clone(),
                _ => runner.current.clone(),
            };
            runner.state.failed = Some(StageFailure { stage, error: e.to_string() });
            runner.state.write(&runner.dir)?;
            log::error!("run halted; continue with `strata run --resume {}`", runner.dir.display());
            Err(e)
        }
    }
}

/// Runs every enabled stage in a fresh versioned directory under
/// `out_root`. Configuration problems are reported before anything is
/// written.
pub fn run(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let raw = data::load(cfg)?;
    if cfg.stages.preprocess {
        data::load_shafts(cfg)?;
    }
    let dir = new_version_dir(&out_root.join(cfg.run_name()))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    log::info!("run directory {}", dir.display());
    drive(cfg, dir, RunState { config_hash: cfg.hash(), ..Default::default() }, raw)
}

/// Continues a run directory, skipping the stages its marker lists as
/// completed.
pub fn resume(dir: &Path) -> Result<PathBuf, CliError> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| CliError::Config(format!("{}: {e}", cfg_path.display())))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let state = RunState::read(dir).map_err(|e| CliError::Config(e.to_string()))?;
    if state.config_hash != cfg.hash() {
        return Err(CliError::Config(format!("{} was edited after the run started", cfg_path.display())));
    }
    cfg.validate()?;
    let raw = data::load(&cfg)?;
    drive(&cfg, dir.to_path_buf(), state, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_directories_count_up() {
        let tmp = tempfile::tempdir().unwrap();
        let a = new_version_dir(tmp.path()).unwrap();
        let b = new_version_dir(tmp.path()).unwrap();
        assert_eq!(a.file_name().unwrap(), "v001");
        assert_eq!(b.file_name().unwrap(), "v002");
    }

    #[test]
    fn cluster_ordering_groups_members() {
        let p = Array2::from_shape_fn((4, 4), |(r, c)| (10 * r + c) as f64);
        let o = cluster_ordered(&p, &[1, 0, 1, 0]);
        assert_eq!(o[[0, 0]], p[[1, 1]]);
        assert_eq!(o[[0, 1]], p[[1, 3]]);
        assert_eq!(o[[2, 3]], p[[0, 2]]);
    }
}
