//! Sweeps over one product-quantizer knob, one full run per value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::{new_version_dir, run, write_json, write_text};
use crate::plots::{line_chart, Series};
use crate::report::{Aggregate, Summary};
use crate::CliError;

/// Codex size used whenever a single group is requested.
pub const SINGLE_GROUP_CODEX_SIZE: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Groups,
    #[value(name = "codex_size")]
    CodexSize,
    #[value(name = "codex_dim")]
    CodexDim,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Groups => "groups",
            Self::CodexSize => "codex_size",
            Self::CodexDim => "codex_dim",
        }
    }

    /// The base configuration with this knob set to `value`. A single group
    /// gets the enlarged codex.
    pub fn apply(self, base: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut cfg = base.clone();
        let dpq = &mut cfg.vqvae.dpq;
        match self {
            Self::Groups => {
                dpq.groups = value;
                if value == 1 {
                    dpq.codex_size = SINGLE_GROUP_CODEX_SIZE;
                }
            }
            Self::CodexSize => dpq.codex_size = value,
            Self::CodexDim => dpq.codex_dim = value,
        }
        cfg.name = format!("{}-{}{}", base.name, self.name(), value);
        cfg
    }
}

/// First occurrence of each value, in order.
pub fn dedup_values(values: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(values.len());
    for &v in values {
        if out.contains(&v) {
            log::warn!("ignoring repeated ablation value {v}");
        } else {
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub groups: usize,
    pub codex_size: usize,
    pub codex_dim: usize,
    pub run_dir: PathBuf,
    pub rgs_ratio: Option<f64>,
    pub mae_accuracy: Option<f64>,
    pub cls: Option<Aggregate>,
    pub ctc: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

fn row(value: usize, cfg: &ExperimentConfig, run_dir: PathBuf, s: &Summary) -> AblationRow {
    AblationRow {
        value,
        groups: cfg.vqvae.dpq.groups,
        codex_size: cfg.vqvae.dpq.codex_size,
        codex_dim: cfg.vqvae.dpq.codex_dim,
        run_dir,
        rgs_ratio: s.vqvae.as_ref().map(|v| v.final_rgs / v.initial_rgs),
        mae_accuracy: s.mae.as_ref().map(|m| m.accuracy),
        cls: s.cls.as_ref().map(|t| t.score),
        ctc: s.ctc.as_ref().map(|t| t.score),
    }
}

pub fn render(t: &AblationTable) -> String {
    let mut out = format!("# Ablation over {}\n\n", t.axis.name());
    out.push_str(
        "| value | groups | codex size | codex dim | final/initial rgs | mask accuracy | classification | 1 - SER |\n",
    );
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    let num = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let agg = |v: &Option<Aggregate>| v.map(|a| format!("{:.4} ± {:.4}", a.mean, a.se)).unwrap_or_else(|| "-".into());
    for r in &t.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.value,
            r.groups,
            r.codex_size,
            r.codex_dim,
            num(r.rgs_ratio),
            num(r.mae_accuracy),
            agg(&r.cls),
            agg(&r.ctc)
        );
    }
    out
}

fn plot(path: &Path, t: &AblationTable) -> Result<(), CliError> {
    let pick = |f: &dyn Fn(&AblationRow) -> Option<f64>| -> Vec<(f64, f64)> {
        t.rows.iter().filter_map(|r| f(r).map(|y| (r.value as f64, y))).collect()
    };
    let series: Vec<Series> = [
        ("mask accuracy", pick(&|r| r.mae_accuracy)),
        ("classification accuracy", pick(&|r| r.cls.map(|a| a.mean))),
        ("1 - SER", pick(&|r| r.ctc.map(|a| a.mean))),
    ]
    .into_iter()
    .filter(|(_, p)| !p.is_empty())
    .map(|(label, points)| Series { label: label.into(), points })
    .collect();
    if series.is_empty() {
        return Ok(());
    }
    line_chart(path, &format!("ablation over {}", t.axis.name()), t.axis.name(), "score", &series)
}

/// Runs the base configuration once per distinct value and writes
/// `ablation.md`, `ablation.json` and `ablation.svg` into a new versioned
/// directory. Every configuration is validated before the first run starts.
pub fn ablate(base: &ExperimentConfig, axis: Axis, values: &[usize], out_root: &Path) -> Result<PathBuf, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("ablation needs at least one value".into()));
    }
    let values = dedup_values(values);
    let configs: Vec<ExperimentConfig> = values.iter().map(|&v| axis.apply(base, v)).collect();
    for (cfg, v) in configs.iter().zip(&values) {
        cfg.validate().map_err(|e| CliError::Config(format!("{} = {v}: {e}", axis.name())))?;
    }
    let dir = new_version_dir(&out_root.join(format!("ablate-{}-{}", axis.name(), base.run_name())))?;
    let runs = dir.join("runs");
    let mut rows = Vec::new();
    for (cfg, &v) in configs.iter().zip(&values) {
        log::info!("ablation {} = {v}", axis.name());
        let run_dir = run(cfg, &runs)?;
        let summary: Summary = crate::pipeline::read_json(&run_dir.join("report.json"))?;
        rows.push(row(v, cfg, run_dir, &summary));
    }
    let table = AblationTable { axis, rows };
    write_json(&dir.join("ablation.json"), &table)?;
    write_text(&dir.join("ablation.md"), &render(&table))?;
    plot(&dir.join("ablation.svg"), &table)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_expands_the_codex() {
        let base = ExperimentConfig::default();
        let one = Axis::Groups.apply(&base, 1);
        assert_eq!((one.vqvae.dpq.groups, one.vqvae.dpq.codex_size), (1, SINGLE_GROUP_CODEX_SIZE));
        let four = Axis::Groups.apply(&base, 4);
        assert_eq!((four.vqvae.dpq.groups, four.vqvae.dpq.codex_size), (4, base.vqvae.dpq.codex_size));
        assert_eq!(Axis::CodexDim.apply(&base, 16).vqvae.dpq.codex_dim, 16);
        assert_eq!(Axis::CodexSize.apply(&base, 64).vqvae.dpq.codex_size, 64);
        assert_ne!(one.hash(), four.hash());
    }

    #[test]
    fn repeated_values_collapse() {
        assert_eq!(dedup_values(&[4, 1, 4, 2, 1]), vec![4, 1, 2]);
    }

    #[test]
    fn empty_and_zero_group_sweeps_are_configuration_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let base = ExperimentConfig::default();
        assert!(matches!(ablate(&base, Axis::Groups, &[], tmp.path()), Err(CliError::Config(_))));
        assert!(matches!(ablate(&base, Axis::Groups, &[2, 0], tmp.path()), Err(CliError::Config(_))));
        assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
    }
}
