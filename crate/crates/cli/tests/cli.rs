use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn strata(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strata")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn smoke_run(out_root: &Path, extra: &[&str]) -> PathBuf {
    let cfg = smoke_config();
    let mut args = vec!["run", cfg.to_str().unwrap(), "--out", out_root.to_str().unwrap()];
    args.extend_from_slice(extra);
    run_dir(&strata(&args))
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn state(dir: &Path) -> Value {
    serde_json::from_str(&read(dir.join("state.json"))).unwrap()
}

const METRIC_FILES: [&str; 7] = [
    "coarse/metrics.jsonl",
    "vqvae/metrics.jsonl",
    "mae/metrics.jsonl",
    "cls/seed0/metrics.jsonl",
    "cls/seed1/metrics.jsonl",
    "ctc/seed0/metrics.jsonl",
    "ctc/seed1/metrics.jsonl",
];

#[test]
fn smoke_run_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = smoke_run(tmp.path(), &[]);
    assert_eq!(dir.file_name().unwrap(), "v001");
    let st = state(&dir);
    let done: Vec<&str> = st["completed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(done, ["coarse", "cluster", "vqvae", "mae", "cls", "ctc"]);
    assert!(st.get("failed").is_none());
    let md = read(dir.join("report.md"));
    for h in ["## Coarse pretraining", "## Channel clustering", "## VQ-VAE", "## Mask modeling", "## Fine-tuning"] {
        assert!(md.contains(h), "missing {h}");
    }
    assert!(!md.contains("Not run."));
    for f in METRIC_FILES {
        assert!(!read(dir.join(f)).is_empty(), "{f}");
    }
    for f in [
        "coarse/loss.svg",
        "cluster/connectivity.svg",
        "cluster/connectivity_by_cluster.svg",
        "vqvae/perplexity.svg",
        "mae/accuracy.svg",
        "cls/validation.svg",
        "ctc/validation.svg",
    ] {
        assert!(read(dir.join(f)).starts_with("<svg"), "{f}");
    }
    assert!(dir.join("vqvae/checkpoint/codex.json").is_file());

    // A second run of the same configuration gets the next version.
    let again = smoke_run(tmp.path(), &[]);
    assert_eq!(again.parent(), dir.parent());
    assert_eq!(again.file_name().unwrap(), "v002");
}

#[test]
fn identical_configs_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = smoke_run(a.path(), &[]);
    let db = smoke_run(b.path(), &[]);
    for f in METRIC_FILES.iter().copied().chain(["report.md", "report.json", "config.toml", "cluster/summary.json"]) {
        assert_eq!(read(da.join(f)), read(db.join(f)), "{f} differs");
    }
    assert_eq!(
        fs::read(da.join("vqvae/checkpoint/params.f32")).unwrap(),
        fs::read(db.join("vqvae/checkpoint/params.f32")).unwrap()
    );
}

#[test]
fn overrides_change_the_run_name() {
    let tmp = tempfile::tempdir().unwrap();
    let base = smoke_run(tmp.path(), &["--set", "stages.cls=false", "--set", "stages.ctc=false"]);
    let other = smoke_run(
        tmp.path(),
        &["--set", "stages.cls=false", "--set", "stages.ctc=false", "--set", "vqvae.dpq.codex_size=8"],
    );
    assert_ne!(base.parent(), other.parent());
    assert!(read(other.join("config.toml")).contains("codex_size = 8"));
    assert!(read(base.join("report.md")).contains("## Fine-tuning\n\nNot run."));
}

#[test]
fn configuration_errors_exit_2_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let out_s = out.to_str().unwrap();
    let bad_key = tmp.path().join("bad.toml");
    fs::write(&bad_key, read(smoke_config()) + "\n[extra]\nvalue = 1\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        // The classifier starts from the mask-modeling encoder.
        vec!["run", cfg, "--out", out_s, "--set", "stages.mae=false"],
        vec!["run", cfg, "--out", out_s, "--set", "vqvae.dpq.groups=0"],
        vec!["run", cfg, "--out", out_s, "--set", "no_such_key=1"],
        vec!["run", cfg, "--out", out_s, "--set", "missing-equals"],
        vec!["run", bad_key.to_str().unwrap(), "--out", out_s],
        vec!["run", "/nonexistent/config.toml", "--out", out_s],
        vec!["ablate", cfg, "--axis", "groups", "--values", "2,0", "--out", out_s],
    ];
    for args in cases {
        let o = strata(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    }
    assert!(!out.exists());
}

#[test]
fn failed_stage_is_recorded_and_resume_finishes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let reference = smoke_run(&tmp.path().join("reference"), &[]);
    let dir = smoke_run(&tmp.path().join("broken"), &[]);

    // Roll the marker back to just after clustering and put a plain file
    // where the VQ-VAE stage wants its directory.
    let mut st = state(&dir);
    st["completed"] = serde_json::json!(["coarse", "cluster"]);
    fs::write(dir.join("state.json"), serde_json::to_string(&st).unwrap()).unwrap();
    for d in ["vqvae", "mae", "cls", "ctc"] {
        fs::remove_dir_all(dir.join(d)).unwrap();
    }
    fs::write(dir.join("vqvae"), "in the way").unwrap();

    let dir_s = dir.to_str().unwrap();
    let o = strata(&["run", "--resume", dir_s]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let st = state(&dir);
    assert_eq!(st["failed"]["stage"], "vqvae");
    assert_eq!(st["completed"], serde_json::json!(["coarse", "cluster"]));

    fs::remove_file(dir.join("vqvae")).unwrap();
    assert_eq!(run_dir(&strata(&["run", "--resume", dir_s])), dir);
    let st = state(&dir);
    assert!(st.get("failed").is_none());
    assert_eq!(st["completed"].as_array().unwrap().len(), 6);
    for f in METRIC_FILES.iter().copied().chain(["report.md"]) {
        assert_eq!(read(reference.join(f)), read(dir.join(f)), "{f} differs after resume");
    }
}

#[test]
fn resume_refuses_an_edited_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = smoke_run(tmp.path(), &["--set", "stages.cls=false", "--set", "stages.ctc=false"]);
    let cfg = read(dir.join("config.toml")).replace("codex_size = 16", "codex_size = 8");
    fs::write(dir.join("config.toml"), cfg).unwrap();
    let o = strata(&["run", "--resume", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = strata(&["run", "--resume", tmp.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cluster_verb_reclusters_a_saved_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = smoke_run(
        tmp.path(),
        &[
            "--set",
            "stages.vqvae=false",
            "--set",
            "stages.mae=false",
            "--set",
            "stages.cls=false",
            "--set",
            "stages.ctc=false",
        ],
    );
    let conn = dir.join("cluster/connectivity.json");
    let json = tmp.path().join("clusters.json");
    let svg = tmp.path().join("heat.svg");
    let o = strata(&[
        "cluster",
        conn.to_str().unwrap(),
        "--k",
        "2",
        "--restarts",
        "3",
        "--out",
        json.to_str().unwrap(),
        "--heatmap",
        svg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let c: Value = serde_json::from_str(&read(&json)).unwrap();
    let labels = c["labels"].as_array().unwrap();
    assert_eq!(labels.len(), 8);
    assert!(labels.iter().all(|l| l.as_u64().unwrap() < 2));
    assert!(read(&svg).starts_with("<svg"));

    // Same seed, same answer, printed to stdout this time.
    let o = strata(&["cluster", conn.to_str().unwrap(), "--k", "2", "--restarts", "3"]);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, c);

    let o = strata(&["cluster", conn.to_str().unwrap(), "--k", "9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_verb_rebuilds_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = smoke_run(tmp.path(), &[]);
    let md = read(dir.join("report.md"));
    let json = read(dir.join("report.json"));
    fs::remove_file(dir.join("report.md")).unwrap();
    fs::remove_file(dir.join("report.json")).unwrap();
    let o = strata(&["report", dir.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), md);
    assert_eq!(read(dir.join("report.md")), md);
    assert_eq!(read(dir.join("report.json")), json);
    assert_eq!(strata(&["report", tmp.path().join("nowhere").to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn group_ablation_skips_repeats_and_widens_the_single_group_codex() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = strata(&[
        "ablate",
        cfg.to_str().unwrap(),
        "--axis",
        "groups",
        "--values",
        "1,2,2",
        "--out",
        tmp.path().to_str().unwrap(),
        "--set",
        "seeds=[0]",
    ]);
    let dir = run_dir(&o);
    let table: Value = serde_json::from_str(&read(dir.join("ablation.json"))).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0]["groups"].as_u64(), rows[0]["codex_size"].as_u64()), (Some(1), Some(2048)));
    assert_eq!((rows[1]["groups"].as_u64(), rows[1]["codex_size"].as_u64()), (Some(2), Some(16)));
    for r in rows {
        let run = PathBuf::from(r["run_dir"].as_str().unwrap());
        assert!(run.join("report.md").is_file());
        assert!(r["cls"]["n"].as_u64() == Some(1));
    }
    let md = read(dir.join("ablation.md"));
    assert_eq!(md.lines().filter(|l| l.starts_with("| 1 ") || l.starts_with("| 2 ")).count(), 2);
    assert!(read(dir.join("ablation.svg")).starts_with("<svg"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = strata_cli::config::ExperimentConfig::load(&path, &[])
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}
