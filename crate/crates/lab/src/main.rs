use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sild::par::Exec;
use sild_lab::commands;
use sild_lab::config::RunConfig;
use sild_lab::LabError;

#[derive(Parser)]
#[command(name = "sild", version, about = "Two-stage score learning on low-dimensional manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (TOML, or JSON with a .json extension).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Named preset; replaces the preset named in the file.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training on the fixed-noise toy with plots and a checkpoint.
    ReproduceToy(Common),
    /// Early collapse rate of the alignment risk over a grid of h1.
    RateSweep(Common),
    /// Held-out Stage-2 error over grids of sample size and h1.
    Stage2Sweep(Common),
    /// Samples from the gated score and compares with held-out data.
    SampleEval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint with all three heads; trains them when absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Retrain per training-set size and report the W2 trend.
        #[arg(long, conflicts_with = "checkpoint")]
        n_train_sweep: bool,
    },
    /// Stage 1 only.
    TrainStage1(Common),
    /// Stage-2 head on a Stage-1 checkpoint, or on a fresh Stage 1.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// High-noise head on a checkpoint holding Stage 1 and Stage 2.
    FitHn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

fn config(c: &Common, default_preset: &str) -> Result<RunConfig, LabError> {
    let mut cfg = RunConfig::resolve(c.config.as_deref(), c.preset.as_deref(), default_preset)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.sequential {
        cfg.exec = Exec::Sequential;
    }
    Ok(cfg)
}

fn verdict(name: &str, v: Option<bool>) -> Result<(), LabError> {
    match v {
        Some(false) => Err(LabError::Verdict(name.into())),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::ReproduceToy(c) => {
            let cfg = config(&c, "toy-mog")?;
            let dir = commands::out_dir(&cfg, c.out.as_deref(), "reproduce-toy");
            let o = commands::reproduce_toy(&cfg, &dir)?;
            let m = &o.metrics;
            println!("stage 1: {} steps, orthogonal error {:.3e} -> {:.3e} ({:.1}x)", m.stage1_steps, m.orthogonal_err_initial, m.orthogonal_err_final, m.orthogonal_drop);
            println!("stage 2: kkt {:.2e}, manifold-component MSE drop {:.2}x", m.stage2_kkt, m.manifold_mse_drop);
            println!("wrote {} in {:.1}s", o.dir.display(), m.runtime_s);
        }
        Command::RateSweep(c) => {
            let cfg = config(&c, "toy-mog")?;
            let dir = commands::out_dir(&cfg, c.out.as_deref(), "rate-sweep");
            let s = commands::rate_sweep(&cfg, &dir)?;
            for (h1, r) in &s.medians {
                println!("h1 {h1:<8} median rate {r:.4e}");
            }
            for c in s.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("h1 {} seed {}: {}", c.h1, c.seed, c.error.as_deref().unwrap_or(""));
            }
            println!("verdict: {:?}", s.verdict);
            verdict("median rate is not strictly increasing as h1 decreases", s.verdict)?;
        }
        Command::Stage2Sweep(c) => {
            let cfg = config(&c, "toy-mog")?;
            let dir = commands::out_dir(&cfg, c.out.as_deref(), "stage2-sweep");
            let s = commands::stage2_sweep(&cfg, &dir)?;
            for (n, m) in &s.n_medians {
                println!("n {n:<8} median MSE {m:.4e}");
            }
            for (h1, m) in &s.h1_medians {
                println!("h1 {h1:<8} median MSE {m:.4e}");
            }
            println!("verdicts: n {:?}, h1 {:?}", s.n_verdict, s.h1_verdict);
            verdict("MSE is not strictly decreasing in n", s.n_verdict)?;
            verdict("MSE is not strictly increasing in h1", s.h1_verdict)?;
        }
        Command::SampleEval { common, checkpoint, n_train_sweep } => {
            let cfg = config(&common, "toy-mog-vp")?;
            let dir = commands::out_dir(&cfg, common.out.as_deref(), "sample-eval");
            if n_train_sweep {
                let s = commands::sampling_sweep(&cfg, &dir)?;
                for c in &s.cells {
                    println!("n_train {:<6} median W2 {:.4}", c.n_train, c.median_w2);
                }
                println!("verdict: {:?}", s.verdict);
                verdict("median W2 increases with n_train", s.verdict)?;
            } else {
                let m = commands::sample_eval(&cfg, checkpoint.as_deref(), &dir)?;
                let r = &m.report;
                println!("W2 {:.4} (baseline {:.4}), modes {}/{} {:?}", r.w2, r.w2_baseline, r.mode_count, r.mode_frequencies.len(), r.mode_frequencies);
                println!("mean manifold distance {:.4}, gate jump {:.4}", r.mean_manifold_distance, r.gate_jump);
            }
        }
        Command::TrainStage1(c) => {
            let cfg = config(&c, "toy-mog")?;
            let dir = commands::out_dir(&cfg, c.out.as_deref(), "train-stage1");
            let m = commands::train_stage1(&cfg, &dir)?;
            println!("stage 1: {} steps, plateaued {}", m.stage1_steps, m.stage1_plateaued);
        }
        Command::TrainStage2 { common, checkpoint } => {
            let cfg = config(&common, "toy-mog")?;
            let dir = commands::out_dir(&cfg, common.out.as_deref(), "train-stage2");
            let m = commands::train_stage2(&cfg, checkpoint.as_deref(), &dir)?;
            for e in &m.stage2 {
                println!("h {:<8} MSE {:.4e} -> {:.4e}", e.h2, e.before.total, e.after.total);
            }
        }
        Command::FitHn { common, checkpoint } => {
            let cfg = config(&common, "toy-mog-vp")?;
            let dir = commands::out_dir(&cfg, common.out.as_deref(), "fit-hn");
            let kkt = commands::fit_hn(&cfg, &checkpoint, &dir)?;
            println!("high-noise head: kkt {kkt:.2e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
