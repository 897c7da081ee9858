//! Training runs, evaluation, benchmarks and modality ablations.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use zeus_core::encoders::EncoderSet;
use zeus_core::fusion::FusionMode;
use zeus_core::instruct::{BackendKind, LlmBackend, StubBackend};
use zeus_core::model::{BaselineModel, SegModel, ZeusModel, TRAINABLE_PREFIXES};
use zeus_core::params::{hex_digest, ParamStore};
use zeus_core::train::{evaluate, mean_scores, predict_all, train_epoch, Scores, TrainState};
use zeus_core::{Error, Tensor};

use crate::checkpoint;
use crate::config::{Network, RunConfig};
use crate::dataset::{Source, Split};
use crate::error::{write_file, Result, ZeusError};
use crate::features::{baseline_sample, collect, FeatureExtractor, SampleKey};
use crate::pgm;
use crate::remote::RemoteBackend;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.zt";
pub const LOG_FILE: &str = "log.txt";
pub const MASKS_DIR: &str = "masks";

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_dsc: f64,
    pub val_miou: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of from scratch.
    pub resume: Option<PathBuf>,
    /// Write test-split masks to `masks/` at the end.
    pub export_masks: bool,
    /// Echo log lines to stderr.
    pub verbose: bool,
    /// Pause after this many epochs in this invocation; the schedule is unaffected.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub network: Network,
    pub fusion: FusionMode,
    pub modalities: Vec<String>,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
    pub test: Scores,
    pub trainable_params: usize,
    /// Names of every tensor the optimizer updates.
    pub trainable_names: Vec<String>,
    pub frozen_before: Vec<String>,
    pub frozen_after: Vec<String>,
}

/// Creates `runs_dir/<timestamp>`, adding a suffix if that already exists.
pub fn new_run_dir(runs_dir: &Path) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut dir = runs_dir.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = runs_dir.join(format!("{stamp}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|e| ZeusError::io(&dir, e))?;
    Ok(dir)
}

pub fn source_for(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Source> {
    match data_dir {
        Some(root) => Source::open(root),
        None => Ok(Source::Synthetic(cfg.data)),
    }
}

pub fn make_backend(cfg: &RunConfig) -> Box<dyn LlmBackend> {
    match cfg.backend.kind {
        BackendKind::Stub => Box::new(StubBackend::new(cfg.seed)),
        BackendKind::Remote => Box::new(RemoteBackend::from_config(&cfg.backend)),
    }
}

/// Every trainable tensor must belong to one of the trainable modules, and each module must be present.
pub fn audit_optimizer_set(store: &ParamStore) -> Result<()> {
    let names = store.trainable_names();
    if let Some(bad) = names.iter().find(|n| !TRAINABLE_PREFIXES.iter().any(|p| n.starts_with(p))) {
        return Err(ZeusError::Audit(format!("unexpected trainable tensor {bad}")));
    }
    for prefix in TRAINABLE_PREFIXES {
        if !names.iter().any(|n| n.starts_with(prefix)) {
            return Err(ZeusError::Audit(format!("no trainable tensor under {prefix}")));
        }
    }
    Ok(())
}

pub fn frozen_checksums(enc: &EncoderSet) -> Vec<String> {
    enc.checksums().iter().map(hex_digest).collect()
}

struct Logger {
    file: File,
    verbose: bool,
}

impl Logger {
    fn open(path: &Path, append: bool, verbose: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| ZeusError::io(path, e))?;
        Ok(Self { file, verbose })
    }

    fn line(&mut self, msg: &str) {
        let stamp = chrono::Local::now().format("%H:%M:%S");
        // Logging is best effort; a full disk surfaces on the next real write.
        let _ = writeln!(self.file, "[{stamp}] {msg}");
        if self.verbose {
            eprintln!("{msg}");
        }
    }
}

struct Datasets<I> {
    train: Vec<(I, Tensor)>,
    val: Vec<(I, Tensor)>,
    test: Vec<(I, Tensor)>,
    test_keys: Vec<SampleKey>,
}

fn load_splits<I>(
    source: &Source,
    modalities: &[String],
    mut f: impl FnMut(&zeus_core::synth::ModalityStack) -> Result<(I, Tensor)>,
) -> Result<Datasets<I>> {
    let (train, _) = collect(source, Split::Train, modalities, &mut f)?;
    let (val, _) = collect(source, Split::Val, modalities, &mut f)?;
    let (test, test_keys) = collect(source, Split::Test, modalities, &mut f)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("train and test splits must be non-empty".into()).into());
    }
    Ok(Datasets { train, val, test, test_keys })
}

/// Trains one configuration into `dir` and evaluates it on the test split.
pub fn train(cfg: &RunConfig, source: &Source, dir: &Path, opts: &TrainOptions) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| ZeusError::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
    let mut log = Logger::open(&dir.join(LOG_FILE), opts.resume.is_some(), opts.verbose)?;
    let modalities = cfg.modalities();
    log.line(&format!("{} / {} on {:?}", cfg.network, cfg.fusion, modalities));
    match cfg.network {
        Network::Baseline => {
            let mut model = BaselineModel::new(cfg.fusion, modalities.len(), cfg.seed)?;
            let ms = cfg.dims.mask_size;
            let data = load_splits(source, &modalities, |s| baseline_sample(s, ms))?;
            drive(cfg, &mut model, &data, dir, opts, &mut log, None)
        }
        Network::Zeus => {
            let encoders = EncoderSet::new(&cfg.dims, cfg.encoder_seed)?;
            let mut model = ZeusModel::new(cfg.zeus_config())?;
            audit_optimizer_set(&model.store)?;
            let backend = make_backend(cfg);
            let data = {
                let fx = FeatureExtractor { encoders: &encoders, model: &model, backend: backend.as_ref() };
                load_splits(source, &modalities, |s| fx.sample(s))?
            };
            log.line(&format!("features ready: {} train, {} val, {} test", data.train.len(), data.val.len(), data.test.len()));
            drive(cfg, &mut model, &data, dir, opts, &mut log, Some(&encoders))
        }
    }
}

fn drive<M: SegModel>(
    cfg: &RunConfig,
    model: &mut M,
    data: &Datasets<M::Input>,
    dir: &Path,
    opts: &TrainOptions,
    log: &mut Logger,
    encoders: Option<&EncoderSet>,
) -> Result<RunReport> {
    let tc = cfg.train_config();
    let frozen_before = encoders.map(frozen_checksums).unwrap_or_default();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let mut state = match &opts.resume {
        Some(path) => {
            let (state, meta) = checkpoint::load(path, model.store_mut(), &tc)?;
            if meta.frozen_checksums != frozen_before {
                return Err(ZeusError::Audit("checkpoint was trained against different frozen encoders".into()));
            }
            log.line(&format!("resumed at epoch {}", state.epoch));
            state
        }
        None => TrainState::new(model, &tc),
    };
    let mut writer = if opts.resume.is_some() && metrics_path.exists() {
        let file = std::fs::OpenOptions::new().append(true).open(&metrics_path).map_err(|e| ZeusError::io(&metrics_path, e))?;
        csv::WriterBuilder::new().has_headers(false).from_writer(file)
    } else {
        csv::Writer::from_path(&metrics_path)?
    };
    let mut history = Vec::new();
    let mut ran = 0;
    while !state.finished(&tc) && opts.stop_after.is_none_or(|n| ran < n) {
        let rec = train_epoch(model, &data.train, &mut state, &tc)?;
        let val = if data.val.is_empty() {
            Scores { dsc: f64::NAN, miou: f64::NAN }
        } else {
            evaluate(model, &data.val, tc.loss.threshold)?
        };
        let row = EpochLog { epoch: rec.epoch, lr: rec.lr, loss: rec.loss, val_dsc: val.dsc, val_miou: val.miou };
        writer.serialize(row)?;
        writer.flush().map_err(|e| ZeusError::io(&metrics_path, e))?;
        checkpoint::save(&ckpt_path, model.store(), &state, tc.seed, frozen_before.clone())?;
        log.line(&format!(
            "epoch {:>3} lr {:.4e} loss {:.5} val dsc {:.4} miou {:.4}",
            rec.epoch, rec.lr, rec.loss, val.dsc, val.miou
        ));
        history.push(row);
        ran += 1;
    }
    if state.stopped_early {
        log.line(&format!("early stop after epoch {}", state.epoch - 1));
    }
    let frozen_after = encoders.map(frozen_checksums).unwrap_or_default();
    if frozen_after != frozen_before {
        return Err(ZeusError::Audit("frozen encoder weights changed during training".into()));
    }
    let preds = predict_all(model, &data.test, tc.loss.threshold)?;
    let pairs: Vec<(Tensor, Tensor)> = preds.iter().cloned().zip(data.test.iter().map(|(_, l)| l.clone())).collect();
    let test = mean_scores(&pairs)?;
    if opts.export_masks {
        write_masks(&dir.join(MASKS_DIR), &pairs, &data.test_keys)?;
    }
    log.line(&format!("test dsc {:.4} miou {:.4}", test.dsc, test.miou));
    Ok(RunReport {
        dir: dir.to_path_buf(),
        network: cfg.network,
        fusion: cfg.fusion,
        modalities: cfg.modalities(),
        history,
        stopped_early: state.stopped_early,
        test,
        trainable_params: model.store().count_trainable(),
        trainable_names: model.store().trainable_names().into_iter().map(String::from).collect(),
        frozen_before,
        frozen_after,
    })
}

/// Writes `<stem>_pred.pgm` and `<stem>_label.pgm` per sample.
pub fn write_masks(dir: &Path, pairs: &[(Tensor, Tensor)], keys: &[SampleKey]) -> Result<()> {
    for ((pred, label), key) in pairs.iter().zip(keys) {
        pgm::write_mask(&dir.join(format!("{}_pred.pgm", key.file_stem())), pred)?;
        pgm::write_mask(&dir.join(format!("{}_label.pgm", key.file_stem())), label)?;
    }
    Ok(())
}

/// Reloads a run directory and scores its checkpoint on `split`,
/// optionally writing masks to `masks_dir`.
pub fn evaluate_run(dir: &Path, source: &Source, split: Split, masks_dir: Option<&Path>) -> Result<Scores> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    cfg.validate()?;
    let modalities = cfg.modalities();
    let tc = cfg.train_config();
    let ckpt = dir.join(CHECKPOINT_FILE);
    match cfg.network {
        Network::Baseline => {
            let mut model = BaselineModel::new(cfg.fusion, modalities.len(), cfg.seed)?;
            checkpoint::load(&ckpt, &mut model.store, &tc)?;
            let (data, keys) = collect(source, split, &modalities, |s| baseline_sample(s, cfg.dims.mask_size))?;
            score(&model, &data, &keys, tc.loss.threshold, masks_dir)
        }
        Network::Zeus => {
            let encoders = EncoderSet::new(&cfg.dims, cfg.encoder_seed)?;
            let fresh = ZeusModel::new(cfg.zeus_config())?;
            // Instructions are generated once from the untrained projection, as during training.
            let backend = make_backend(&cfg);
            let fx = FeatureExtractor { encoders: &encoders, model: &fresh, backend: backend.as_ref() };
            let (data, keys) = collect(source, split, &modalities, |s| fx.sample(s))?;
            let mut model = fresh.clone();
            let (_, meta) = checkpoint::load(&ckpt, &mut model.store, &tc)?;
            if meta.frozen_checksums != frozen_checksums(&encoders) {
                return Err(ZeusError::Audit("checkpoint was trained against different frozen encoders".into()));
            }
            score(&model, &data, &keys, tc.loss.threshold, masks_dir)
        }
    }
}

fn score<M: SegModel>(
    model: &M,
    data: &[(M::Input, Tensor)],
    keys: &[SampleKey],
    threshold: f64,
    masks_dir: Option<&Path>,
) -> Result<Scores> {
    let preds = predict_all(model, data, threshold)?;
    let pairs: Vec<(Tensor, Tensor)> = preds.into_iter().zip(data.iter().map(|(_, l)| l.clone())).collect();
    if let Some(d) = masks_dir {
        write_masks(d, &pairs, keys)?;
    }
    Ok(mean_scores(&pairs)?)
}

/// One line of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub network: Network,
    pub fusion: FusionMode,
    /// `None` when the combination does not exist.
    pub dsc: Option<f64>,
    pub miou: Option<f64>,
    pub params: Option<usize>,
}

/// Trains every (network, fusion) pair under `root`, one run directory each.
pub fn bench(cfg: &RunConfig, source: &Source, root: &Path, opts: &TrainOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for network in [Network::Baseline, Network::Zeus] {
        for fusion in FusionMode::ALL {
            if network == Network::Zeus && fusion == FusionMode::Early {
                rows.push(BenchRow { network, fusion, dsc: None, miou: None, params: None });
                continue;
            }
            let run_cfg = RunConfig { network, fusion, ..cfg.clone() };
            let r = train(&run_cfg, source, &root.join(format!("{network}-{fusion}")), opts)?;
            rows.push(BenchRow {
                network,
                fusion,
                dsc: Some(r.test.dsc),
                miou: Some(r.test.miou),
                params: Some(r.trainable_params),
            });
        }
    }
    let mut w = csv::Writer::from_path(root.join("bench.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| ZeusError::io(root.join("bench.csv"), e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub subset: Vec<String>,
    pub test: Scores,
}

/// Every 2-modality subset followed by the full set.
pub fn default_subsets(all: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            out.push(vec![all[i].clone(), all[j].clone()]);
        }
    }
    if all.len() > 2 {
        out.push(all.to_vec());
    }
    out
}

/// Trains one run per modality subset.
pub fn ablate(cfg: &RunConfig, source: &Source, subsets: &[Vec<String>], root: &Path, opts: &TrainOptions) -> Result<Vec<AblationRow>> {
    let available = cfg.available_modalities();
    for s in subsets {
        if s.is_empty() {
            return Err(Error::Config("empty modality subset".into()).into());
        }
        // Validate every subset before spending time on training.
        RunConfig { modality_subset: s.clone(), ..cfg.clone() }.validate()?;
    }
    let mut rows = Vec::new();
    for s in subsets {
        let ordered: Vec<String> = available.iter().filter(|m| s.contains(m)).cloned().collect();
        let run_cfg = RunConfig { modality_subset: ordered.clone(), ..cfg.clone() };
        let r = train(&run_cfg, source, &root.join(ordered.join("+")), opts)?;
        rows.push(AblationRow { subset: ordered, test: r.test });
    }
    Ok(rows)
}

/// Checkmark grid: one column per modality, then DSC and mIoU in percent.
pub fn ablation_table(all: &[String], rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for m in all {
        out.push_str(&format!("{m:^7}"));
    }
    out.push_str("    DSC   mIoU\n");
    for r in rows {
        for m in all {
            out.push_str(&format!("{:^7}", if r.subset.contains(m) { "✓" } else { "" }));
        }
        out.push_str(&format!("{:>7.2}{:>7.2}\n", 100.0 * r.test.dsc, 100.0 * r.test.miou));
    }
    out
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{:<10}{:<8}{:>8}{:>8}{:>10}\n", "network", "fusion", "DSC", "mIoU", "params");
    for r in rows {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        let params = r.params.map_or("n/a".to_string(), |p| p.to_string());
        out.push_str(&format!("{:<10}{:<8}{:>8}{:>8}{:>10}\n", r.network, r.fusion, pct(r.dsc), pct(r.miou), params));
    }
    out
}
