//! `fewstep`: run the teacher, distillation and reinforcement stages, the
//! verification suites and curve export from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! abort, 3 verification failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fewstep_core::pipeline::{self, EvalTarget, RunConfig};
use fewstep_core::verify::{self, Fault};

#[derive(Parser, Debug)]
#[command(
    name = "fewstep",
    version,
    about = "Few-step generator training runs on 2-D toy tasks"
)]
struct Cli {
    /// Log filter, e.g. `info` or `fewstep_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run config (see `print-config`).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long, env = "FEWSTEP_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, env = "FEWSTEP_SEED")]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Distilled,
    Trained,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    FlipDeltaKlSign,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the many-step teacher; writes `<out_dir>/teacher/`.
    PretrainTeacher(RunArgs),
    /// Distill the teacher into a few-step student; writes `<out_dir>/distill/`.
    Distill(RunArgs),
    /// Reinforce the distilled student; writes `<out_dir>/r1/`.
    TrainR1 {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from `<out_dir>/r1/checkpoint` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Score a saved student with fresh rollouts.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "trained")]
        target: Target,
        #[arg(long, default_value_t = 2048)]
        samples: usize,
    },
    /// Run the invariant suites and print a JSON report.
    Verify {
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Write long-format curve CSVs from one or more run directories.
    ExportPlots {
        /// Output directory for the CSVs.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the default run config as JSON.
    PrintConfig,
}

#[derive(Debug)]
struct VerificationFailed(Vec<String>);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "verification failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerificationFailed {}

/// Print a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn code_hash() -> String {
    std::env::current_exe()
        .and_then(std::fs::read)
        .map(|b| pipeline::content_hash(&b))
        .unwrap_or_else(|_| "unknown".into())
}

fn manifest(dir: &Path, stage: &str, cfg: &RunConfig) -> Result<()> {
    pipeline::write_manifest(dir, stage, cfg, &code_hash())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainTeacher(args) => {
            let cfg = args.load()?;
            let p = pipeline::run_pretrain(&cfg)?;
            manifest(&cfg.layout().teacher_dir(), "pretrain-teacher", &cfg)?;
            emit(&format!(
                "teacher: {} iterations, held-out loss {:.5} -> {}",
                p.metrics.len(),
                p.held_out_loss,
                cfg.layout().teacher_dir().display()
            ))?;
        }
        Command::Distill(args) => {
            let cfg = args.load()?;
            let d = pipeline::run_distill(&cfg)?;
            manifest(&cfg.layout().distill_dir(), "distill", &cfg)?;
            if let Some(last) = d.metrics.last() {
                emit(&format!(
                    "distilled: sector {:.3} sliced_w2 {:.4} -> {}",
                    last.sector_rate,
                    last.sliced_w2_to_teacher,
                    cfg.layout().distill_dir().display()
                ))?;
            }
        }
        Command::TrainR1 { run, resume } => {
            let cfg = run.load()?;
            manifest(&cfg.layout().r1_dir(), "train-r1", &cfg)?;
            let out = pipeline::run_train(&cfg, resume)?;
            if let (Some(a), Some(b)) = (out.initial(), out.last()) {
                emit(&format!(
                    "reward {:.3} -> {:.3}, sliced_w2 {:.4} -> {:.4} after {} iterations",
                    a.mean_reward, b.mean_reward, a.sliced_w2, b.sliced_w2, b.iteration
                ))?;
            }
        }
        Command::Evaluate {
            run,
            target,
            samples,
        } => {
            let cfg = run.load()?;
            let t = match target {
                Target::Distilled => EvalTarget::Distilled,
                Target::Trained => EvalTarget::Trained,
            };
            let r = pipeline::run_evaluate(&cfg, t, samples)?;
            emit(&serde_json::to_string_pretty(&r)?)?;
        }
        Command::Verify {
            report,
            seed,
            inject_fault,
        } => {
            let fault = match inject_fault {
                None => Fault::None,
                Some(FaultArg::FlipDeltaKlSign) => Fault::FlipDeltaKlSign,
            };
            let r = verify::run_all(fault, seed)?;
            let json = serde_json::to_string_pretty(&r)?;
            if let Some(p) = report {
                std::fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?;
            }
            emit(&json)?;
            if !r.passed {
                let failed = r
                    .suites
                    .iter()
                    .filter(|s| !s.passed)
                    .map(|s| s.name.clone())
                    .collect();
                return Err(VerificationFailed(failed).into());
            }
        }
        Command::ExportPlots { out, runs } => {
            let (train, evals) = pipeline::export_plots(&runs, &out)?;
            emit(&format!("{}\n{}", train.display(), evals.display()))?;
        }
        Command::PrintConfig => emit(&RunConfig::default().to_json_pretty())?,
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return 3;
    }
    match e.downcast_ref::<fewstep_core::Error>() {
        Some(err) if err.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
