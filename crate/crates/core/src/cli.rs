//! The `stec` command line: data generation, training, probing, analysis,
//! feature export, and verification.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{accuracy_report, centroid_separation, export_features, FeatureDump, DEFAULT_MAGNITUDE_THRESHOLD};
use crate::datasets::{gen_synthetic, load, save};
use crate::error::{Error, IoContext, Result};
use crate::harness::{
    dataset_for, load_metrics, train_probe, train_ssl, AugmentPreset, ExperimentCfg, ProbeCfg, TrainOptions,
};
use crate::imaging::AugmentPolicy;
use crate::models::Checkpoint;
use crate::verify::{self, Suite};

/// Writes a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_NON_FINITE: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

/// Name of the configuration copy written next to a run's outputs.
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "stec", version, about = "Self-supervised learning with augmentation actions and efference copies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset on disk.
    GenData {
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run self-supervised training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps, writing a checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train a linear probe on a checkpoint's frozen encoder.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Probe settings are read from this experiment config when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize exported features and, optionally, a metrics stream.
    Analyze {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAGNITUDE_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the derivation and algebra checks.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write encoder features of unaugmented and augmented views as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Cifar)]
        augment: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Cifar,
    Full,
    Geometric,
    Identity,
}

impl From<Preset> for AugmentPreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Cifar => AugmentPreset::Cifar,
            Preset::Full => AugmentPreset::Full,
            Preset::Geometric => AugmentPreset::Geometric,
            Preset::Identity => AugmentPreset::Identity,
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NON_FINITE,
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

/// Caps rayon's worker count from `STEC_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("STEC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("STEC_THREADS={v} is not a thread count")))?;
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match init_threads().and_then(|_| execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    say!("{text}");
    if let Some(p) = out {
        fs::write(p, text + "\n").at(p)?;
    }
    Ok(())
}

fn check_resolution(ckpt: &Checkpoint, res: usize) -> Result<()> {
    if ckpt.model.encoder.resolution != res {
        return Err(Error::InvalidArgument(format!(
            "dataset resolution {res} does not match the checkpoint's {}",
            ckpt.model.encoder.resolution
        )));
    }
    Ok(())
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::GenData {
            n,
            classes,
            res,
            seed,
            out,
        } => {
            let ds = gen_synthetic(n, classes, res, seed)?;
            save(&ds, &out)?;
            say!("wrote {n} images ({classes} classes, {res}x{res}) to {}", out.display());
        }
        Command::Train {
            config,
            seed,
            out,
            resume,
            stop_after,
        } => {
            let mut cfg = ExperimentCfg::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o.to_string_lossy().into_owned();
            }
            cfg.validate()?;
            let ds = dataset_for(&cfg)?;
            let dir = cfg.out_path();
            fs::create_dir_all(&dir).at(&dir)?;
            fs::write(dir.join(CONFIG_COPY), cfg.to_toml()).at(dir.join(CONFIG_COPY))?;
            let outcome = train_ssl(
                &cfg,
                &ds,
                &TrainOptions {
                    out_dir: Some(dir.clone()),
                    resume,
                    stop_after,
                },
            )?;
            if let Some(last) = outcome.records.last() {
                say!(
                    "step {}/{} total {:.4} id_accuracy {:.3} manip_accuracy {:.3}",
                    outcome.steps_done, outcome.total_steps, last.loss.total, last.loss.id_accuracy, last.loss.manip_accuracy
                );
            }
            say!("outputs in {}", dir.display());
        }
        Command::Probe {
            checkpoint,
            data,
            config,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load(&data)?;
            check_resolution(&ckpt, ds.height())?;
            let pcfg = match config {
                Some(p) => ExperimentCfg::load(&p)?.probe_cfg(),
                None => ProbeCfg::default(),
            };
            let report = train_probe(&ckpt.store, &ckpt.model, &ds, &pcfg)?;
            write_json(&report, out.as_deref())?;
        }
        Command::Analyze {
            features,
            threshold,
            metrics,
            window,
            out,
        } => {
            let dump = FeatureDump::read_csv(&features)?;
            let separation = centroid_separation(&dump, threshold)?;
            let summary = match metrics {
                Some(p) => Some(accuracy_report(&load_metrics(&p)?, window)),
                None => None,
            };
            write_json(
                &serde_json::json!({ "separation": separation, "accuracy": summary }),
                out.as_deref(),
            )?;
        }
        Command::Verify { suite, trials, seed } => {
            let reports = verify::run(suite, trials, seed)?;
            let mut ok = true;
            for r in &reports {
                say!("{r}");
                ok &= r.passed;
            }
            return Ok(if ok { EXIT_OK } else { EXIT_FAILED });
        }
        Command::ExportFeatures {
            checkpoint,
            data,
            out,
            augment,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load(&data)?;
            check_resolution(&ckpt, ds.height())?;
            let policy = policy_for(augment.into(), ds.height());
            let dump = export_features(&ckpt.store, &ckpt.model, &ds, &policy, seed)?;
            dump.write_csv(&out)?;
            say!("wrote {} rows to {}", dump.rows.len(), out.display());
        }
    }
    Ok(EXIT_OK)
}

fn policy_for(preset: AugmentPreset, resolution: usize) -> AugmentPolicy {
    ExperimentCfg {
        augment: preset,
        resolution,
        ..Default::default()
    }
    .policy()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["stec", "verify", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["stec"]), EXIT_USAGE);
    }

    #[test]
    fn missing_config_is_usage_error() {
        assert_eq!(run(["stec", "train", "--config", "/nonexistent/missing.cfg"]), EXIT_USAGE);
    }

    #[test]
    fn exit_codes_by_error() {
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NON_FINITE);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    }
}
