//! End-to-end runs of the `zeus` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;
use zeus::config::RunConfig;
use zeus::dataset::{Source, Split};
use zeus::features::{collect, target};
use zeus::pgm;
use zeus_core::loss::{dsc, miou};

fn zeus(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zeus")).args(args).current_dir(cwd).output().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "dims": {"img_size": 32, "patch": 16, "mask_size": 8, "vlm_size": 16},
        "epochs": 3,
        "batch_size": 4,
        "data": {"subjects": 4, "modalities": 2, "volume": {"depth": 2, "height": 32, "width": 32}},
        "paths": {"runs_dir": dir.join("runs")},
    });
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn early_fusion_is_rejected_for_zeus() {
    let dir = tempfile::tempdir().unwrap();
    let o = zeus(&["train", "--fusion", "early"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not applicable for early fusion"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = zeus(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn bad_values_exit_one_and_missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(zeus(&["--backend", "cloud", "gradcheck"], dir.path()).status.code(), Some(1));
    assert_eq!(zeus(&["--fusion", "middle", "train"], dir.path()).status.code(), Some(1));
    assert_eq!(zeus(&["--config", "missing.json", "train"], dir.path()).status.code(), Some(2));
    let cfg = tiny_config(dir.path());
    let o = zeus(&["--config", cfg.to_str().unwrap(), "train", "--data", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_and_offline_mask_recount() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let cfg_arg = cfg_path.to_str().unwrap();
    let o = zeus(&["--config", cfg_arg, "gen-data", "--out", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("data/manifest.json").exists());

    let o = zeus(&["--config", cfg_arg, "--fusion", "late", "train", "--data", "data", "--quiet"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    for f in ["config.json", "metrics.csv", "checkpoint.zt", "log.txt", "masks"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(saved.epochs, 3);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,lr,loss,val_dsc,val_miou"));

    let o = zeus(&["eval", "--run", run.to_str().unwrap(), "--data", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let reported: Vec<f64> = stdout(&o).split_whitespace().filter_map(|t| t.parse().ok()).collect();

    // Recompute both metrics from the exported PGM masks alone.
    let source = Source::open(&dir.path().join("data")).unwrap();
    let names = saved.modalities();
    let (labels, keys) = collect(&source, Split::Test, &names, |s| target(s, saved.dims.mask_size)).unwrap();
    let (mut d, mut m) = (0.0, 0.0);
    for (label, key) in labels.iter().zip(&keys) {
        let pred = pgm::read(&run.join("masks").join(format!("{}_pred.pgm", key.file_stem()))).unwrap();
        let stored = pgm::read(&run.join("masks").join(format!("{}_label.pgm", key.file_stem()))).unwrap();
        assert_eq!(&stored.map(|v| v / 255.0), label);
        d += dsc(&pred, label).unwrap();
        m += miou(&pred, label).unwrap();
    }
    let n = labels.len() as f64;
    assert!((reported[0] - d / n).abs() < 1e-6 && (reported[1] - m / n).abs() < 1e-6, "{reported:?}");

    let o = zeus(&["export-masks", "--run", run.to_str().unwrap(), "--data", "data", "--split", "val", "--out", "val-masks"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_dir(dir.path().join("val-masks")).unwrap().count() > 0);
}

#[test]
fn baseline_early_fusion_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = zeus(
        &["--config", cfg.to_str().unwrap(), "--network", "baseline", "--fusion", "early", "train", "--quiet", "--run-dir", "r"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test dsc"));
}

#[test]
fn ablate_prints_checkmark_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = zeus(
        &["--config", cfg.to_str().unwrap(), "ablate", "--epochs", "1", "--subsets", "T1;T1,T1-Gd", "--out", "ab", "--quiet"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains('✓'));
    let o = zeus(&["--config", cfg.to_str().unwrap(), "ablate", "--subsets", "T1,CT", "--out", "ab2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_marks_zeus_early_as_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = zeus(&["--config", cfg.to_str().unwrap(), "bench", "--epochs", "1", "--out", "b", "--quiet"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "network,fusion,dsc,miou,params");
    assert!(csv.contains("zeus,early,,,"));
    assert_eq!(csv.lines().count(), 7);
}
