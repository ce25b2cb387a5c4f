use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use kdqat_core::{Exec, Preset};
use kdqat_harness::commands;
use kdqat_harness::config::apply_preset;
use kdqat_harness::{ExperimentConfig, Result, RunCtx};

#[derive(Debug, Parser)]
#[command(name = "kdqat", version, about = "Attention distillation for ternary-weight transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the full-precision teacher.
    TrainTeacher(Common),
    /// Quantization-aware training of the ternary student by distillation.
    Qat(Common),
    /// Attention diagnostics of a student (or the quantized teacher) against its teacher.
    Diagnose(Common),
    /// Check every analytic gradient against finite differences.
    Gradcheck(Common),
    /// Dominant Hessian eigenvalue of the training loss, one estimate per seed.
    Hessian(Common),
    /// QAT over the γ grid of the unified map/output objective.
    SweepGamma(Common),
    /// QAT with the map loss over several temperatures and the score-MSE endpoint.
    SweepTau(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(
        long,
        value_parser = PossibleValuesParser::new(["baseline", "map", "output", "map+output"])
            .map(|s| s.parse::<Preset>().expect("listed preset")),
    )]
    preset: Option<Preset>,
    /// Defaults to runs/<subcommand>.
    #[arg(long, env = "KDQAT_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Continue from the last completed epoch found in the output directory.
    #[arg(long)]
    resume: bool,
    /// Run every work item on the calling thread.
    #[arg(long)]
    sequential: bool,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn setup(name: &str, c: &Common) -> Result<(ExperimentConfig, RunCtx)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.preset {
        apply_preset(&mut cfg.kd, p);
    }
    cfg.resume |= c.resume;
    cfg.validate()?;
    let dir = c.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(name));
    let ctx = RunCtx::in_dir(&dir, cfg.resume, exec(c.sequential))?;
    commands::echo_config(&ctx, &cfg)?;
    Ok((cfg, ctx))
}

fn run(cli: Cli) -> Result<bool> {
    let (name, common) = match &cli.command {
        Command::TrainTeacher(c) => ("train-teacher", c),
        Command::Qat(c) => ("qat", c),
        Command::Diagnose(c) => ("diagnose", c),
        Command::Gradcheck(c) => ("gradcheck", c),
        Command::Hessian(c) => ("hessian", c),
        Command::SweepGamma(c) => ("sweep-gamma", c),
        Command::SweepTau(c) => ("sweep-tau", c),
    };
    let (cfg, mut ctx) = setup(name, common)?;
    let dir = ctx.dir.clone().unwrap_or_default();
    match cli.command {
        Command::TrainTeacher(_) => {
            let (_, dev) = commands::train_teacher(&cfg, &mut ctx)?;
            println!("teacher dev score {:.4}; checkpoint {}", dev.score(), dir.join("teacher.ckpt").display());
        }
        Command::Qat(_) => {
            let (_, dev) = commands::qat(&cfg, &mut ctx)?;
            println!("student dev score {:.4}; checkpoint {}", dev.score(), dir.join("student.ckpt").display());
        }
        Command::Diagnose(_) => {
            let s = commands::diagnose(&cfg, &mut ctx)?;
            println!(
                "{} examples: median ranking loss {:.4}, median cover ratio {:.4}, SA-GEN {:.4}, SA-PROP {:.4}",
                s.examples, s.median_ranking_loss, s.median_cover_length_ratio, s.mean_gen_dist, s.mean_prop_dist
            );
        }
        Command::Gradcheck(_) => {
            let lines = commands::gradcheck(&cfg, &mut ctx)?;
            for l in &lines {
                println!("{:<9} {:<22} {:<24} worst {:.3e}  median {:.3e}", l.kind, l.name, l.floor, l.worst_rel, l.median_rel);
            }
            let failures = commands::gradcheck_failures(&lines);
            if !failures.is_empty() {
                eprintln!("{} gradient checks exceed {:e}", failures.len(), commands::GRADCHECK_TOLERANCE);
                return Ok(false);
            }
        }
        Command::Hessian(_) => {
            for (seed, e) in cfg.hessian.seeds.iter().zip(commands::hessian(&cfg, &mut ctx)?) {
                println!("seed {seed}: λ {:.6e} after {} steps (converged: {})", e.eigenvalue, e.iterations, e.converged);
            }
        }
        Command::SweepGamma(_) | Command::SweepTau(_) => {
            let records = if name == "sweep-gamma" {
                commands::sweep_gamma(&cfg, &mut ctx)?
            } else {
                commands::sweep_tau(&cfg, &mut ctx)?
            };
            println!("{} runs; records in {}", records.len(), dir.join("metrics.jsonl").display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
