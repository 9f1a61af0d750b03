use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use plabel_cli::{
    cmd_eval, cmd_losses_check, cmd_refine, cmd_synth, cmd_upg, exit_code, finish_losses_check, load_config,
    RefineMode,
};
use plabel_core::losses::gradcheck::Kernel;
use plabel_core::synth::SceneSpec;

/// Refined LiDAR pseudo-labels from 2D detections.
#[derive(Debug, Parser)]
#[command(name = "plabel", version)]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, env = "ALISE_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for frame-level parallelism.
    #[arg(long, global = true, env = "ALISE_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate pseudo-labels from frames and detections.
    Upg {
        #[arg(long, env = "ALISE_FRAMES")]
        frames: PathBuf,
        #[arg(long, env = "ALISE_DETECTIONS")]
        detections: PathBuf,
        #[arg(long, env = "ALISE_OUT")]
        out: PathBuf,
    },
    /// Refine labels by voxel voting over adjacent frames.
    Refine {
        #[arg(long, env = "ALISE_LABELS")]
        labels: PathBuf,
        #[arg(long, env = "ALISE_FRAMES")]
        frames: PathBuf,
        #[arg(long, value_enum, env = "ALISE_MODE", default_value = "offline")]
        mode: RefineMode,
        /// Teacher scores per frame, required in online mode.
        #[arg(long, env = "ALISE_SCORES")]
        scores: Option<PathBuf>,
        #[arg(long, env = "ALISE_OUT")]
        out: PathBuf,
    },
    /// Score predicted labels against ground truth.
    Eval {
        #[arg(long, env = "ALISE_PRED")]
        pred: PathBuf,
        #[arg(long, env = "ALISE_GT")]
        gt: PathBuf,
        /// Directory for report.json, report.txt and the manifest.
        #[arg(long, env = "ALISE_OUT")]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        /// Scene spec (JSON). Defaults apply when omitted.
        #[arg(long, env = "ALISE_SPEC")]
        spec: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long, env = "ALISE_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "ALISE_OUT")]
        out: PathBuf,
    },
    /// Finite-difference check of every loss gradient.
    LossesCheck {
        #[arg(long, env = "ALISE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "ALISE_TRIALS", default_value_t = 50)]
        trials: usize,
        #[arg(long, env = "ALISE_OUT")]
        out: Option<PathBuf>,
        /// Negate one kernel's gradient, for testing the checker.
        #[arg(long, hide = true, value_parser = parse_kernel)]
        inject_sign_flip: Option<Kernel>,
    },
}

fn parse_kernel(name: &str) -> std::result::Result<Kernel, String> {
    Kernel::from_name(name).ok_or_else(|| {
        let names: Vec<&str> = Kernel::ALL.iter().map(|k| k.name()).collect();
        format!("unknown kernel `{name}`, expected one of {}", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Upg { frames, detections, out } => {
            let cfg = load_config(cli.config.as_deref())?;
            let m = cmd_upg(&frames, &detections, &cfg, &out, workers)?;
            println!("wrote {} label files to {}", m.outputs.len(), out.join("labels").display());
        }
        Command::Refine {
            labels,
            frames,
            mode,
            scores,
            out,
        } => {
            let cfg = load_config(cli.config.as_deref())?;
            let m = cmd_refine(&labels, &frames, &cfg, mode, scores.as_deref(), &out, workers)?;
            println!("wrote {} label files to {}", m.outputs.len(), out.join("labels").display());
        }
        Command::Eval { pred, gt, out } => {
            let cfg = load_config(cli.config.as_deref())?;
            let (report, _) = cmd_eval(&pred, &gt, &cfg, out.as_deref(), workers)?;
            print!("{}", report.to_table());
        }
        Command::Synth { spec, seed, out } => {
            let mut scene = match &spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
                    SceneSpec::from_json(&text).with_context(|| format!("parsing spec {}", p.display()))?
                }
                None => SceneSpec::default(),
            };
            if let Some(s) = seed {
                scene.seed = s;
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers.max(1))
                .build()?
                .install(|| cmd_synth(&scene, &out))?;
            println!("wrote {} frames to {}", scene.num_frames, out.display());
        }
        Command::LossesCheck {
            seed,
            trials,
            out,
            inject_sign_flip,
        } => {
            let report = cmd_losses_check(seed, trials, inject_sign_flip)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            finish_losses_check(&report, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ALISE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
