use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use posediff_cli::config::{Ablation, RunConfig};
use posediff_cli::pipeline;
use posediff_cli::plot;
use posediff_core::io::container::Container;
use posediff_core::metrics::Alignment;
use posediff_core::sampler::JpmaMode;

#[derive(Parser)]
#[command(name = "posediff", version, about = "Diffusion-based 2D-to-3D human pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; keys it omits come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config is given or the config names none.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Switch off denoiser components.
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Procrustes alignment without scale.
    #[arg(long)]
    rigid_only: bool,
    /// Choose hypotheses per joint and frame instead of per joint.
    #[arg(long)]
    per_frame_jpma: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training, validation and multi-person scene datasets.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a denoiser; writes checkpoints and a step log into `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.ptc`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Lift every sequence of a dataset to 3D.
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prediction file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for the report CSVs.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw predicted and true skeletons of one sequence.
    Plot {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sequence: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration and its hash.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

impl ConfigArgs {
    /// Config from `--config`/`--preset`, or from `fallback` when neither
    /// is given, with the remaining flags applied on top.
    fn resolve(&self, fallback: Option<RunConfig>) -> Result<RunConfig> {
        let preset = self.preset.as_deref().unwrap_or("tiny");
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => RunConfig::load(path, preset)?,
            (None, Some(f)) if self.preset.is_none() => f,
            (None, _) => RunConfig::preset(preset)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.ablation {
            a.apply(&mut cfg.denoiser);
        }
        if let Some(h) = self.hypotheses {
            cfg.sampler.hypotheses = h;
        }
        if let Some(m) = self.iterations {
            cfg.sampler.iterations = m;
        }
        if self.rigid_only {
            cfg.eval.alignment = Alignment::Rigid;
        }
        if self.per_frame_jpma {
            cfg.sampler.jpma = JpmaMode::PerFrame;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn stored_run_config(path: &Path) -> Result<Option<RunConfig>> {
    let c = Container::read(path).with_context(|| format!("reading {}", path.display()))?;
    match c.metadata().get("run_config") {
        Some(v) => Ok(Some(serde_json::from_value(v.clone()).context("stored run_config")?)),
        None => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, cfg } => {
            let cfg = cfg.resolve(None)?;
            for p in pipeline::synth(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train { data, out, resume, cfg } => {
            let cfg = cfg.resolve(None)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let s = pipeline::train(&cfg, &data, &out, resume, |line| eprintln!("{line}"))?;
            println!(
                "trained {} epochs ({} steps), final loss {:.6}, checkpoint {}",
                s.epochs,
                s.steps,
                s.final_loss,
                s.checkpoint.display()
            );
        }
        Command::Estimate { checkpoint, data, out, cfg } => {
            let ckpt = pipeline::load_checkpoint(&checkpoint)?;
            let cfg = cfg.resolve(ckpt.config.clone())?;
            let ds = pipeline::read_dataset(&data)?;
            let preds = pipeline::estimate(&cfg, &ckpt, &ds)?;
            preds.write(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} predictions to {}", ds.records.len(), out.display());
        }
        Command::Eval { predictions, data, out, cfg } => {
            let cfg = cfg.resolve(stored_run_config(&predictions)?)?;
            let (preds, hash) = pipeline::read_predictions(&predictions)?;
            let ds = pipeline::read_dataset(&data)?;
            let report = pipeline::evaluate(&preds, &ds, &cfg)?;
            pipeline::write_report(&report, &hash, &out)?;
            println!(
                "MPJPE {:.2} mm  P-MPJPE {:.2} mm  PCK {:.2}%  AUC {:.2}%  ({} sequences)",
                report.mpjpe_mm,
                report.p_mpjpe_mm,
                report.pck_percent,
                report.auc_percent,
                report.sequences.len()
            );
        }
        Command::Plot { predictions, data, sequence, out } => {
            let (preds, _) = pipeline::read_predictions(&predictions)?;
            let ds = pipeline::read_dataset(&data)?;
            let pred = preds
                .get(&sequence)
                .with_context(|| format!("sequence {sequence:?} has no prediction in {}", predictions.display()))?;
            for p in plot::plot_sequence(pred, &ds, &sequence, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Config { cfg } => {
            let cfg = cfg.resolve(None)?;
            print!("{}", cfg.to_toml()?);
            println!("# hash = {}", cfg.hash());
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POSEDIFF_THREADS") {
        let n: usize = v.parse().with_context(|| format!("POSEDIFF_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = std::panic::catch_unwind(|| init_threads().and_then(|_| run(cli)));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(posediff_cli::exit_code(&e))
        }
        Err(_) => ExitCode::from(2),
    }
}
