//! Checkpoint save/resume and run reproducibility through the library API.

use std::path::Path;

use zeus::config::{DataConfig, Network, RunConfig};
use zeus::dataset::Source;
use zeus::run::{train, TrainOptions, CHECKPOINT_FILE, METRICS_FILE};
use zeus::zt;
use zeus_core::fusion::FusionMode;
use zeus_core::synth::VolumeDims;
use zeus_core::DimConfig;

fn tiny(network: Network, fusion: FusionMode) -> RunConfig {
    RunConfig {
        network,
        fusion,
        dims: DimConfig::for_image(32, 16),
        epochs: 4,
        batch_size: 4,
        data: DataConfig { subjects: 4, modalities: 2, volume: VolumeDims { depth: 2, height: 32, width: 32 }, ..Default::default() },
        ..Default::default()
    }
}

fn metrics(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join(METRICS_FILE)).unwrap()
}

fn resume_matches_uninterrupted(cfg: RunConfig) {
    let tmp = tempfile::tempdir().unwrap();
    let source = Source::Synthetic(cfg.data);
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    let a = train(&cfg, &source, &full, &TrainOptions::default()).unwrap();
    let paused = TrainOptions { stop_after: Some(2), ..Default::default() };
    let b1 = train(&cfg, &source, &split, &paused).unwrap();
    assert_eq!(b1.history.len(), 2);
    let resume = TrainOptions { resume: Some(split.join(CHECKPOINT_FILE)), ..Default::default() };
    let b2 = train(&cfg, &source, &split, &resume).unwrap();
    assert_eq!(b2.history.len(), 2);
    assert_eq!(b2.history[0].loss.to_bits(), a.history[2].loss.to_bits());
    assert_eq!(metrics(&full), metrics(&split));
    assert_eq!(a.test, b2.test);
}

#[test]
fn zeus_resume_is_bit_identical() {
    resume_matches_uninterrupted(tiny(Network::Zeus, FusionMode::Late));
}

#[test]
fn baseline_resume_is_bit_identical() {
    resume_matches_uninterrupted(tiny(Network::Baseline, FusionMode::Hybrid));
}

#[test]
fn checkpoint_header_records_state() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Network::Zeus, FusionMode::Hybrid);
    let r = train(&cfg, &Source::Synthetic(cfg.data), tmp.path(), &TrainOptions::default()).unwrap();
    let (_, header) = zt::read_with_header(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(header.extra["kind"], "checkpoint");
    assert_eq!(header.extra["epoch"], 4);
    assert_eq!(header.extra["frozen_checksums"].as_array().unwrap().len(), 3);
    let names: Vec<&str> =
        header.extra["entries"].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names, r.trainable_names);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(Network::Zeus, FusionMode::Late);
    let source = Source::Synthetic(cfg.data);
    train(&cfg, &source, &tmp.path().join("a"), &TrainOptions::default()).unwrap();
    let other = tiny(Network::Baseline, FusionMode::Late);
    let resume = TrainOptions { resume: Some(tmp.path().join("a").join(CHECKPOINT_FILE)), ..Default::default() };
    let err = train(&other, &source, &tmp.path().join("b"), &resume).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
