//! `zeus` command line. Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use zeus_core::gradsuite::{run_suite, SuiteConfig};
use zeus_core::instruct::BackendKind;
use zeus_core::Error;

use crate::config::RunConfig;
use crate::dataset::{write_dataset, Split};
use crate::error::{Result, ZeusError};
use crate::run::{
    ablate, ablation_table, bench, bench_table, default_subsets, evaluate_run, new_run_dir, source_for, train,
    TrainOptions, MASKS_DIR,
};

#[derive(Debug, Parser)]
#[command(name = "zeus", version, about = "Text-instructed multi-modality segmentation on synthetic volumes")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// early, hybrid or late.
    #[arg(long, global = true)]
    fusion: Option<String>,
    /// stub or remote.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// zeus or baseline.
    #[arg(long, global = true)]
    network: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset directory written by `gen-data`; synthesized in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArg,
    /// Override the configured epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Only echo the final result.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset to disk.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one model into a fresh run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Exact run directory instead of `<runs_dir>/<timestamp>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip writing test masks.
        #[arg(long)]
        no_masks: bool,
        /// Pause after this many epochs; continue later with `--resume`.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a finished run on a split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        data: DataArg,
    },
    /// Train every network × fusion combination.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per modality subset.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Subsets as `T1,T2;T2,FLAIR`; defaults to all pairs plus the full set.
        #[arg(long)]
        subsets: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Write predicted and reference masks of a run as PGM files.
    ExportMasks {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(f) = &cli.fusion {
        cfg.fusion = f.parse()?;
    }
    if let Some(n) = &cli.network {
        cfg.network = n.parse()?;
    }
    if let Some(b) = &cli.backend {
        cfg.backend.kind = match b.as_str() {
            "stub" => BackendKind::Stub,
            "remote" => BackendKind::Remote,
            _ => return Err(Error::Config(format!("unknown backend {b:?} (expected stub or remote)")).into()),
        };
    }
    Ok(cfg)
}

fn apply_run_args(cfg: &mut RunConfig, run: &RunArgs) -> Result<()> {
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(())
}

fn parse_subsets(list: &str) -> Vec<Vec<String>> {
    list.split(';')
        .map(|s| s.split(',').map(str::trim).filter(|m| !m.is_empty()).map(String::from).collect())
        .collect()
}

fn out_dir(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    match explicit {
        Some(d) => Ok(d),
        None => new_run_dir(&cfg.paths.runs_dir),
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = resolve_config(&cli)?;
    let w = |out: &mut dyn Write, s: String| out.write_all(s.as_bytes()).map_err(|e| ZeusError::io("<stdout>", e));
    match cli.command {
        Command::GenData { out: dir } => {
            cfg.validate()?;
            let m = write_dataset(&dir, &cfg.data)?;
            let slices: usize = m.subjects.iter().map(|s| s.slices).sum();
            w(out, format!("wrote {} subjects ({slices} slices) to {}\n", m.subjects.len(), dir.display()))?;
        }
        Command::Train { run, run_dir, resume, no_masks, stop_after } => {
            apply_run_args(&mut cfg, &run)?;
            let source = source_for(&cfg, run.data.data.as_deref())?;
            let dir = out_dir(&cfg, run_dir)?;
            let opts = TrainOptions { resume, export_masks: !no_masks, verbose: !run.quiet, stop_after };
            let r = train(&cfg, &source, &dir, &opts)?;
            w(
                out,
                format!(
                    "run {}\nepochs {}{}\ntest dsc {:.4} miou {:.4}\n",
                    dir.display(),
                    r.history.len(),
                    if r.stopped_early { " (early stop)" } else { "" },
                    r.test.dsc,
                    r.test.miou
                ),
            )?;
        }
        Command::Eval { run, split, data } => {
            let split: Split = split.parse()?;
            let cfg = RunConfig::load(&run.join(crate::run::CONFIG_FILE))?;
            let source = source_for(&cfg, data.data.as_deref())?;
            let s = evaluate_run(&run, &source, split, None)?;
            w(out, format!("dsc {:.6} miou {:.6}\n", s.dsc, s.miou))?;
        }
        Command::ExportMasks { run, split, out: dest, data } => {
            let split: Split = split.parse()?;
            let cfg = RunConfig::load(&run.join(crate::run::CONFIG_FILE))?;
            let source = source_for(&cfg, data.data.as_deref())?;
            let dest = dest.unwrap_or_else(|| run.join(MASKS_DIR));
            let s = evaluate_run(&run, &source, split, Some(&dest))?;
            w(out, format!("masks in {}\ndsc {:.6} miou {:.6}\n", dest.display(), s.dsc, s.miou))?;
        }
        Command::Bench { run, out: dest } => {
            apply_run_args(&mut cfg, &run)?;
            let source = source_for(&cfg, run.data.data.as_deref())?;
            let dir = out_dir(&cfg, dest)?;
            let rows = bench(&cfg, &source, &dir, &TrainOptions { verbose: !run.quiet, ..Default::default() })?;
            w(out, bench_table(&rows))?;
        }
        Command::Ablate { run, subsets, out: dest } => {
            apply_run_args(&mut cfg, &run)?;
            let all = cfg.available_modalities();
            let subsets = match subsets {
                Some(s) => parse_subsets(&s),
                None => default_subsets(&all),
            };
            let source = source_for(&cfg, run.data.data.as_deref())?;
            let dir = out_dir(&cfg, dest)?;
            let rows = ablate(&cfg, &source, &subsets, &dir, &TrainOptions { verbose: !run.quiet, ..Default::default() })?;
            w(out, ablation_table(&all, &rows))?;
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be positive".into()).into());
            }
            let checks = run_suite(&SuiteConfig { seeds, ..Default::default() })?;
            let mut table = format!("{:<32}{:>6}{:>14}  result\n", "op", "seeds", "max rel err");
            for c in &checks {
                let verdict = if c.passed { "pass" } else { "FAIL" };
                table.push_str(&format!("{:<32}{:>6}{:>14.3e}  {verdict}\n", c.name, c.seeds, c.max_rel_error));
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            table.push_str(&format!("{} ops, {failed} failed\n", checks.len()));
            w(out, table)?;
            if failed > 0 {
                return Ok(2);
            }
        }
    }
    Ok(0)
}
