//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if any fails.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zeus::config::{DataConfig, Network, RunConfig};
use zeus::dataset::Source;
use zeus::run::{default_subsets, frozen_checksums, train, RunReport, TrainOptions, METRICS_FILE};
use zeus_core::decoder::decode_mask;
use zeus_core::encoders::EncoderSet;
use zeus_core::fusion::FusionMode;
use zeus_core::gradsuite::{run_suite, SuiteConfig};
use zeus_core::loss::{dsc, miou};
use zeus_core::model::{ZeusModel, TRAINABLE_PREFIXES};
use zeus_core::optim::lr_at;
use zeus_core::synth::VolumeDims;
use zeus_core::{DimConfig, Tensor};

/// Epoch budget of the default-dataset convergence runs.
const CONVERGENCE_EPOCHS: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Reduced setting for the multi-seed trend criteria: 64 px slices, 4×4 grid, 16 px masks.
fn small(network: Network, fusion: FusionMode, seed: u64) -> RunConfig {
    RunConfig {
        network,
        fusion,
        seed,
        dims: DimConfig::for_image(64, 16),
        epochs: 20,
        early_stop_patience: 20,
        data: DataConfig { subjects: 20, volume: VolumeDims { depth: 8, height: 64, width: 64 }, ..Default::default() },
        ..Default::default()
    }
}

fn run(cfg: &RunConfig, dir: &Path) -> RunReport {
    train(cfg, &Source::Synthetic(cfg.data), dir, &TrainOptions::default()).expect("training run failed")
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let cfg = SuiteConfig::default();
    let checks = run_suite(&cfg).expect("gradient suite errored");
    let elapsed = t.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let has_model = checks.iter().any(|c| c.name.contains("model"));
    let pass = failed.is_empty()
        && has_model
        && worst < 1e-4
        && checks.iter().all(|c| c.seeds >= 10)
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!("{} ops, max rel err {worst:.2e}, failed {failed:?}, {:.1}s", checks.len(), elapsed.as_secs_f64()),
    )
}

fn metric_oracle() -> Outcome {
    fn set(m: &Tensor, fg: bool) -> HashSet<usize> {
        m.data().iter().enumerate().filter(|(_, &v)| (v > 0.5) == fg).map(|(i, _)| i).collect()
    }
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let p_fg = rng.random_range(0.0..1.0);
        let mut mask = || Tensor::from_fn(&[h, w], |_| f64::from(u8::from(rng.random_bool(p_fg))));
        let (p, g) = (mask(), mask());
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let (p1, g1, p0, g0) = (set(&p, true), set(&g, true), set(&p, false), set(&g, false));
        let inter = p1.intersection(&g1).count();
        let d = ratio(2 * inter, p1.len() + g1.len());
        let m = 0.5 * (ratio(inter, p1.union(&g1).count()) + ratio(p0.intersection(&g0).count(), p0.union(&g0).count()));
        if dsc(&p, &g).unwrap() != d || miou(&p, &g).unwrap() != m {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("1000 pairs, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn shape_contract() -> Outcome {
    let t = Instant::now();
    let mut ok = true;
    let mut seen = Vec::new();
    for img in [64, 128, 256] {
        let dims = DimConfig::for_image(img, 16);
        let enc = EncoderSet::new(&dims, 0).unwrap();
        let model = ZeusModel::new(RunConfig { dims, ..Default::default() }.zeus_config()).unwrap();
        let emb = enc.image.encode(&Tensor::full(&[img, img], 0.5)).unwrap();
        let prompt = Tensor::zeros(&[1, dims.prompt_dim]);
        let mask = decode_mask(&model.heads[0].decoder, &model.store, &emb, &prompt).unwrap();
        let grid = img / 16;
        ok &= emb.shape()[1..] == [grid, grid] && mask.shape() == [4 * grid, 4 * grid];
        seen.push(format!("{img}->{}->{}", emb.shape()[1], mask.shape()[0]));
    }
    let elapsed = t.elapsed();
    outcome(ok && elapsed < Duration::from_secs(1), format!("{} in {:.2}s", seen.join(", "), elapsed.as_secs_f64()))
}

fn frozen_audit(tmp: &Path) -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig { epochs: 50, early_stop_patience: 50, ..small(Network::Zeus, FusionMode::Late, 0) };
    let independent = frozen_checksums(&EncoderSet::new(&cfg.dims, cfg.encoder_seed).unwrap());
    let r = run(&cfg, &tmp.join("audit"));
    let modules: BTreeSet<&str> = r
        .trainable_names
        .iter()
        .map(|n| TRAINABLE_PREFIXES.iter().find(|p| n.starts_with(*p)).copied().unwrap_or(n.as_str()))
        .collect();
    let expected: BTreeSet<&str> = TRAINABLE_PREFIXES.into_iter().collect();
    let elapsed = t.elapsed();
    let pass = r.history.len() == 50
        && r.frozen_before == r.frozen_after
        && r.frozen_before == independent
        && modules == expected
        && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "{} epochs, checksums unchanged: {}, optimizer modules {modules:?}, {:.0}s",
            r.history.len(),
            r.frozen_before == r.frozen_after,
            elapsed.as_secs_f64()
        ),
    )
}

fn convergence(tmp: &Path) -> Outcome {
    let t = Instant::now();
    let base_cfg = RunConfig {
        network: Network::Baseline,
        epochs: CONVERGENCE_EPOCHS,
        early_stop_patience: CONVERGENCE_EPOCHS,
        ..Default::default()
    };
    let zeus_cfg = RunConfig { network: Network::Zeus, ..base_cfg.clone() };
    let base = run(&base_cfg, &tmp.join("conv-baseline"));
    let zeus = run(&zeus_cfg, &tmp.join("conv-zeus"));
    let elapsed = t.elapsed();
    let (b, z) = (base.test.dsc, zeus.test.dsc);
    let pass = b >= 0.95 && z >= 0.80 && b - z <= 0.15 && CONVERGENCE_EPOCHS <= 300 && elapsed < Duration::from_secs(1800);
    outcome(
        pass,
        format!("baseline late {b:.4}, zeus late {z:.4} after {CONVERGENCE_EPOCHS} epochs, {:.0}s", elapsed.as_secs_f64()),
    )
}

fn fusion_trend(tmp: &Path) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..3 {
        let late = run(&small(Network::Zeus, FusionMode::Late, seed), &tmp.join(format!("trend-late-{seed}")));
        let hybrid = run(&small(Network::Zeus, FusionMode::Hybrid, seed), &tmp.join(format!("trend-hybrid-{seed}")));
        wins += usize::from(late.test.dsc >= hybrid.test.dsc);
        pairs.push(format!("{:.3}/{:.3}", late.test.dsc, hybrid.test.dsc));
    }
    outcome(wins >= 2, format!("late/hybrid DSC per seed {pairs:?}, late wins {wins}/3"))
}

fn ablation_trend(tmp: &Path) -> Outcome {
    let all = small(Network::Zeus, FusionMode::Late, 0).available_modalities();
    let pairs: Vec<Vec<String>> = default_subsets(&all).into_iter().filter(|s| s.len() == 2).collect();
    let mut votes = vec![0usize; pairs.len()];
    let mut full_scores = Vec::new();
    for seed in 0..3 {
        let full = run(&small(Network::Zeus, FusionMode::Late, seed), &tmp.join(format!("abl-full-{seed}"))).test.dsc;
        full_scores.push(format!("{full:.3}"));
        for (k, subset) in pairs.iter().enumerate() {
            let cfg = RunConfig { modality_subset: subset.clone(), ..small(Network::Zeus, FusionMode::Late, seed) };
            let d = run(&cfg, &tmp.join(format!("abl-{}-{seed}", subset.join("+")))).test.dsc;
            votes[k] += usize::from(full >= d);
        }
    }
    let losing: Vec<String> = pairs.iter().zip(&votes).filter(|(_, &v)| v < 2).map(|(p, v)| format!("{}({v}/3)", p.join("+"))).collect();
    outcome(losing.is_empty(), format!("full-set DSC {full_scores:?}; pairs not dominated by majority: {losing:?}"))
}

fn schedule(tmp: &Path) -> Outcome {
    let at = |e| lr_at(e, 300, 1e-3, 0.9).unwrap();
    let values_ok = at(0) == 1e-3 && at(300) == 0.0 && (at(150) - 5.3589e-4).abs() <= 1e-8;
    let patience = 5;
    let cfg = RunConfig { lr0: 0.0, epochs: 50, early_stop_patience: patience, ..small(Network::Zeus, FusionMode::Late, 0) };
    let r = run(&cfg, &tmp.join("frozen-lr"));
    let stop_ok = r.stopped_early && r.history.len() == patience + 1;
    outcome(
        values_ok && stop_ok,
        format!(
            "lr(0)={:e} lr(300)={:e} lr(150)={:.6e}; lr0=0 run stopped after {} epochs (patience {patience})",
            at(0),
            at(300),
            at(150),
            r.history.len()
        ),
    )
}

fn reproducibility(tmp: &Path) -> Outcome {
    let mut same = true;
    let mut sizes = Vec::new();
    for network in [Network::Zeus, Network::Baseline] {
        let cfg = RunConfig { epochs: 3, ..small(network, FusionMode::Late, 11) };
        let (a, b) = (tmp.join(format!("repro-{network}-a")), tmp.join(format!("repro-{network}-b")));
        run(&cfg, &a);
        run(&cfg, &b);
        let (x, y) = (std::fs::read(a.join(METRICS_FILE)).unwrap(), std::fs::read(b.join(METRICS_FILE)).unwrap());
        same &= x == y;
        sizes.push(x.len());
    }
    outcome(same, format!("metrics CSVs byte-identical: {same} ({sizes:?} bytes)"))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let criteria: [(&str, Box<dyn Fn() -> Outcome + '_>); 9] = [
        ("gradient suite", Box::new(gradients)),
        ("metric oracle", Box::new(metric_oracle)),
        ("shape contract", Box::new(shape_contract)),
        ("frozen-module audit", Box::new(|| frozen_audit(dir))),
        ("convergence", Box::new(|| convergence(dir))),
        ("fusion trend", Box::new(|| fusion_trend(dir))),
        ("modality ablation trend", Box::new(|| ablation_trend(dir))),
        ("schedule exactness", Box::new(|| schedule(dir))),
        ("reproducibility", Box::new(|| reproducibility(dir))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failures += usize::from(!o.pass);
        println!("criterion {}: {} [{name}] {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
