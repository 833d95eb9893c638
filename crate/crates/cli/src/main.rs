use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use procres_cli::commands::{cmd_figratio, cmd_linexp, cmd_project, cmd_spectrum, cmd_train};
use procres_cli::config::{load_json, FigRatioConfig, LinExpConfig, RunConfig};

#[derive(Parser)]
#[command(name = "procres", version, about = "Convolution spectra, Procrustes projection and gradient-norm probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Singular values of the circular convolution defined by a kernel file.
    Spectrum {
        kernel: PathBuf,
        /// Spatial size of the (n x n) input.
        #[arg(long)]
        n: usize,
        /// Where to write the full spectrum as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Project a kernel onto the flat-spectrum set and truncate it back to k x k.
    Project {
        kernel: PathBuf,
        #[arg(long)]
        n: usize,
        /// Use the ReLU-corrected target sigma.
        #[arg(long)]
        relu: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train plain / resnet / procresnet models on synthetic data.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_lr_decay: bool,
        #[arg(long)]
        projection_period: Option<usize>,
    },
    /// Deep linear residual network experiment.
    Linexp {
        #[command(flatten)]
        common: Common,
    },
    /// Channel sweep of the probed layer's gradient-norm ratio.
    Figratio {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        projection_period: Option<usize>,
    },
}

fn load<T: Default + serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => load_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(T::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Spectrum { kernel, n, json } => {
            let out = cmd_spectrum(&kernel, n, json.as_deref())?;
            println!("{}", out.summary);
        }
        Command::Project { kernel, n, relu, out } => {
            let summary = cmd_project(&kernel, n, relu, &out)?;
            println!("{}", summary.render());
            println!("wrote {}", out.display());
        }
        Command::Train {
            common,
            no_lr_decay,
            projection_period,
        } => {
            let mut cfg: RunConfig = load(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
                cfg.seeds.clear();
            }
            if let Some(dir) = common.out_dir {
                cfg.output_dir = dir;
            }
            if no_lr_decay {
                cfg.lr_decay = false;
            }
            if let Some(p) = projection_period {
                cfg.projection_period = p;
            }
            let out = cmd_train(&cfg)?;
            for (id, total, proj) in &out.timings {
                println!("{id}: {total:.1}s ({proj:.1}s projecting)");
            }
            let mut ok = true;
            for r in &out.summary.runs {
                match &r.failure {
                    Some(f) => {
                        ok = false;
                        eprintln!("{}: numerically unstable at epoch {} step {}: {}", r.run_id, f.epoch, f.step, f.message);
                    }
                    None => println!(
                        "{}: final train loss {:.4}, test err {:.4}",
                        r.run_id,
                        r.final_train_loss.unwrap_or(f64::NAN),
                        r.final_test_err.unwrap_or(f64::NAN)
                    ),
                }
            }
            if let Some(g) = &out.summary.gap {
                println!(
                    "gap over first {} epochs: median mean {:.4}, median max {:.4}",
                    g.epochs, g.median_mean_gap, g.median_max_gap
                );
            }
            println!("wrote {}", cfg.output_dir.display());
            return Ok(ok);
        }
        Command::Linexp { common } => {
            let mut cfg: LinExpConfig = load(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            if let Some(dir) = common.out_dir {
                cfg.output_dir = dir;
            }
            let out = cmd_linexp(&cfg)?;
            println!("gamma = {:.6}", out.gamma);
            for (b, (l, dev)) in out.bounds.iter().zip(&out.median_max_deviation) {
                println!("L = {l:3}: median max |ratio - 1| = {dev:.6}, delta = {:.6}", b.delta);
            }
            println!("|ratio - 1| > sigma_max(W) violations: {}", out.total_lemma1_violations);
        }
        Command::Figratio {
            common,
            projection_period,
        } => {
            let mut cfg: FigRatioConfig = load(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(dir) = common.out_dir {
                cfg.output_dir = dir;
            }
            if let Some(p) = projection_period {
                cfg.projection_period = p;
            }
            let cells = cmd_figratio(&cfg)?;
            for c in &cells {
                println!(
                    "c={:3} d={:3} {:9} mean ratio {:.4} (std {:.4}){}",
                    c.c,
                    c.d,
                    if c.projected { "projected" } else { "plain" },
                    c.mean_ratio,
                    c.std_ratio,
                    if c.failure_case { " [expected failure]" } else { "" }
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
