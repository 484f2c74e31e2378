use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mim_core::checks::{full_gradient_suite, DEFAULT_TOLERANCE};
use mim_core::hierarchy::build_plan_seeded;
use mim_core::probe::{append_probe_csv, compare_probes, export_recon_slices, probe_gain, ProbeConfig};
use mim_core::trainer::{load_dataset, run_training};
use mim_core::volume::{generate_synthetic, read_volume, write_volume, SyntheticSpec};
use mim_core::{Checkpoint, MimError, TrainConfig};

/// Hierarchical masked-autoencoder pre-training for 3D volumes.
#[derive(Parser, Debug)]
#[command(name = "mim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write labelled synthetic volumes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Edge length of the cubic volumes.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// Build the masking hierarchy of one volume and dump it as JSON.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        dump: PathBuf,
    },
    /// Pre-train on a directory of volumes.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive, loss and the network.
    GradCheck {
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear-probe segmentation with pretrained and random encoders.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Directory receiving probe.csv; defaults to the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Export mid-slice images of a masked reconstruction.
    Recon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> mim_core::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::desk()),
    }
}

fn run(cmd: Command) -> mim_core::Result<bool> {
    match cmd {
        Command::GenData {
            out,
            count,
            size,
            seed,
            channels,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| MimError::io(&out, e))?;
            let spec = SyntheticSpec::default();
            for i in 0..count {
                let v = generate_synthetic(seed + i as u64, [channels, size, size, size], &spec)?;
                write_volume(out.join(format!("vol_{i:04}")), &v)?;
            }
            println!("wrote {count} volumes to {}", out.display());
        }
        Command::Plan {
            config,
            volume,
            dump,
        } => {
            let cfg = load_config(config.as_deref())?;
            let v = read_volume(&volume)?;
            let h = build_plan_seeded(&v, &cfg.hierarchy)?;
            std::fs::write(&dump, h.plan.to_json()).map_err(|e| MimError::io(&dump, e))?;
            let per_level: Vec<usize> = h.plan.levels.iter().map(Vec::len).collect();
            println!("volumes per level {per_level:?}; plan written to {}", dump.display());
        }
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = match (&config, &resume) {
                (None, Some(ck)) => Checkpoint::load(ck)?.config,
                _ => load_config(config.as_deref())?,
            };
            let summary = run_training(&cfg, &data, &out, resume.as_deref())?;
            if let Some(last) = summary.reports.last() {
                println!("step {} total {:.6}", last.step, last.loss.total);
            }
            println!("checkpoint {}", summary.final_checkpoint.display());
        }
        Command::GradCheck { tol, seed } => {
            let reports = full_gradient_suite(tol, seed);
            for r in &reports {
                println!("{}", r.line());
            }
            return Ok(reports.iter().all(|r| r.passed));
        }
        Command::Probe {
            ckpt,
            data,
            seeds,
            out,
            steps,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let volumes = load_dataset(&data)?;
            let mut pcfg = ProbeConfig::default();
            if let Some(s) = steps {
                pcfg.probe_steps = s;
            }
            let rows = compare_probes(&ck.state.params, &ck.config, &volumes, &pcfg, &seeds)?;
            for r in &rows {
                println!("seed {} {} dsc {:.4}", r.seed, r.init.name(), r.report.foreground());
            }
            println!("mean gain {:+.4}", probe_gain(&rows));
            let dir = out.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
            std::fs::create_dir_all(&dir).map_err(|e| MimError::io(&dir, e))?;
            append_probe_csv(&dir.join("probe.csv"), &rows)?;
        }
        Command::Recon { ckpt, volume, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let v = read_volume(&volume)?;
            for p in export_recon_slices(&ck.state.params, &ck.config, &v, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(true)
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("MIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("MIM_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                MimError::Config(_) | MimError::InvalidSpec(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
