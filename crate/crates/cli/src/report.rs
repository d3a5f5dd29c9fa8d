//! Run reports, rebuilt entirely from the files in a run directory so that
//! `strata report` can regenerate them at any time.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use strata_core::downstream::MetricReport;
use strata_core::train::MetricRecord;

use crate::config::ExperimentConfig;
use crate::pipeline::{read_json, read_jsonl, write_json, write_text, ClusterSummary, RunState, CONFIG_FILE};
use crate::CliError;

/// Mean and standard error of the mean over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub se: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, se, n })
    }
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.se, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub context_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqSummary {
    pub initial_rgs: f64,
    pub final_rgs: f64,
    pub perplexity: Vec<f64>,
    pub max_ema_invariant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeSummary {
    pub final_loss: f64,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    /// Test accuracy (classification) or 1 - SER (sequences).
    pub score: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<Aggregate>,
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub coarse: Option<CoarseSummary>,
    pub cluster: Option<ClusterSummary>,
    pub vqvae: Option<VqSummary>,
    pub mae: Option<MaeSummary>,
    pub cls: Option<TaskSummary>,
    pub ctc: Option<TaskSummary>,
}

fn last_value(log: &[MetricRecord], key: &str) -> f64 {
    log.iter().rev().find_map(|r| r.get(key)).unwrap_or(f64::NAN)
}

fn task_summary(path: &Path) -> Result<TaskSummary, CliError> {
    let reports: Vec<MetricReport> = read_jsonl(path)?;
    let scores: Vec<f64> = reports.iter().filter_map(|r| r.accuracy.or(r.one_minus_ser)).collect();
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.roc_auc).collect();
    let score = Aggregate::of(&scores).ok_or_else(|| CliError::Io(format!("{}: no reports", path.display())))?;
    let roc_auc = if aucs.len() == reports.len() { Aggregate::of(&aucs) } else { None };
    Ok(TaskSummary { score, roc_auc, reports })
}

/// Collects the outputs of every completed stage.
pub fn build(dir: &Path) -> Result<Summary, CliError> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::io(cfg_path.display(), e))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let state = RunState::read(dir)?;
    let coarse = if state.is_done("coarse") {
        let log: Vec<MetricRecord> = read_jsonl(&dir.join("coarse/metrics.jsonl"))?;
        let eval: serde_json::Value = read_json(&dir.join("coarse/eval.json"))?;
        Some(CoarseSummary {
            epochs: log.len(),
            final_loss: last_value(&log, "loss"),
            final_accuracy: last_value(&log, "accuracy"),
            context_accuracy: eval["context_accuracy"].as_f64().unwrap_or(f64::NAN),
        })
    } else {
        None
    };
    let cluster = if state.is_done("cluster") { Some(read_json(&dir.join("cluster/summary.json"))?) } else { None };
    let vqvae = if state.is_done("vqvae") {
        let log: Vec<MetricRecord> = read_jsonl(&dir.join("vqvae/metrics.jsonl"))?;
        Some(VqSummary {
            initial_rgs: log.first().and_then(|r| r.get("rgs")).unwrap_or(f64::NAN),
            final_rgs: last_value(&log, "rgs"),
            perplexity: (0..cfg.vqvae.dpq.groups).map(|g| last_value(&log, &format!("perplexity_g{g}"))).collect(),
            max_ema_invariant: log.iter().filter_map(|r| r.get("ema_invariant")).fold(0.0, f64::max),
        })
    } else {
        None
    };
    let mae = if state.is_done("mae") {
        let log: Vec<MetricRecord> = read_jsonl(&dir.join("mae/metrics.jsonl"))?;
        Some(MaeSummary {
            final_loss: last_value(&log, "loss"),
            accuracy: last_value(&log, "accuracy"),
            chance: 1.0 / cfg.vqvae.dpq.codex_size as f64,
        })
    } else {
        None
    };
    let cls = if state.is_done("cls") { Some(task_summary(&dir.join("cls/reports.jsonl"))?) } else { None };
    let ctc = if state.is_done("ctc") { Some(task_summary(&dir.join("ctc/reports.jsonl"))?) } else { None };
    Ok(Summary { name: cfg.name.clone(), config_hash: state.config_hash, coarse, cluster, vqvae, mae, cls, ctc })
}

fn not_run(out: &mut String) {
    out.push_str("Not run.\n\n");
}

fn per_seed_table(out: &mut String, t: &TaskSummary) {
    out.push_str("| seed | best epoch | val | test accuracy | ROC-AUC | 1 - SER | n test | excluded |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in &t.reports {
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} | {} | {} | {} | {} | {} |",
            r.seed,
            r.best_epoch,
            r.val_score,
            cell(r.accuracy),
            cell(r.roc_auc),
            cell(r.one_minus_ser),
            r.n_test,
            r.excluded
        );
    }
    out.push('\n');
}

/// Markdown rendering with one section per stage.
pub fn render(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run report: {}\n\nConfiguration hash: `{}`\n", s.name, s.config_hash);
    out.push_str("## Coarse pretraining\n\n");
    match &s.coarse {
        Some(c) => {
            let _ = writeln!(
                out,
                "- epochs: {}\n- final training loss: {:.4}\n- final training accuracy: {:.4}\n- held-out spatial-context accuracy: {:.4}\n",
                c.epochs, c.final_loss, c.final_accuracy, c.context_accuracy
            );
        }
        None => not_run(&mut out),
    }
    out.push_str("## Channel clustering\n\n");
    match &s.cluster {
        Some(c) => {
            let _ = writeln!(out, "- clusters: {} (from {} windows)", c.k, c.n_windows);
            let _ = writeln!(out, "- labels: {:?}", c.labels);
            if let Some(ari) = c.ari {
                let _ = writeln!(out, "- adjusted Rand index against the planted groups: {ari:.4}");
            }
            let _ = writeln!(
                out,
                "- selected clusters {:?}: {} channels, probe accuracy {:.4}\n- selected channels: {:?}\n",
                c.selection.clusters,
                c.selection.channels.len(),
                c.selection.score,
                c.selection.channels
            );
        }
        None => not_run(&mut out),
    }
    out.push_str("## VQ-VAE\n\n");
    match &s.vqvae {
        Some(v) => {
            let ppl: Vec<String> = v.perplexity.iter().map(|p| format!("{p:.2}")).collect();
            let _ = writeln!(
                out,
                "- reconstruction loss: {:.4} before training, {:.4} after ({:.3} of initial)\n- final perplexity per group: {}\n- largest EMA invariant error: {:.2e}\n",
                v.initial_rgs,
                v.final_rgs,
                v.final_rgs / v.initial_rgs,
                ppl.join(", "),
                v.max_ema_invariant
            );
        }
        None => not_run(&mut out),
    }
    out.push_str("## Mask modeling\n\n");
    match &s.mae {
        Some(m) => {
            let _ = writeln!(
                out,
                "- final loss: {:.4}\n- mask-prediction accuracy: {:.4} ({:.1} x chance of {:.4})\n",
                m.final_loss,
                m.accuracy,
                m.accuracy / m.chance,
                m.chance
            );
        }
        None => not_run(&mut out),
    }
    out.push_str("## Fine-tuning\n\n");
    if s.cls.is_none() && s.ctc.is_none() {
        not_run(&mut out);
    }
    if let Some(t) = &s.cls {
        let _ = writeln!(out, "### Classification\n\n- test accuracy: {}", t.score);
        if let Some(auc) = &t.roc_auc {
            let _ = writeln!(out, "- test ROC-AUC: {auc}");
        }
        out.push('\n');
        per_seed_table(&mut out, t);
    }
    if let Some(t) = &s.ctc {
        let _ = writeln!(out, "### Sequence transcription (CTC)\n\n- test 1 - SER: {}\n", t.score);
        per_seed_table(&mut out, t);
    }
    out
}

/// Writes `report.json` and `report.md` into the run directory.
pub fn write(dir: &Path) -> Result<Summary, CliError> {
    let summary = build(dir)?;
    write_json(&dir.join("report.json"), &summary)?;
    write_text(&dir.join("report.md"), &render(&summary))?;
    Ok(summary)
}
