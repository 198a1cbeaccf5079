use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlcal_core::certainty::Estimator;
use vlcal_core::cli::{self, RunConfig};
use vlcal_core::eval::EvalSummary;
use vlcal_core::parallel::Execution;
use vlcal_core::{Error, Result};

/// Calibrated visual and reasoning confidence on a synthetic grid task.
#[derive(Parser)]
#[command(name = "vlcal", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from the base policy and evaluate before and after.
    Train {
        /// TOML run configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every record of a trace file.
    Estimate {
        trace: PathBuf,
        #[arg(long, default_value = "combined")]
        method: Estimator,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare scores with the labels stored in a trace file.
    Validate {
        trace: PathBuf,
        #[arg(long, default_value = "combined")]
        method: Estimator,
    },
    /// Write reliability, gap, joint-confidence and training tables for a run.
    Report {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn show(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn print_summary(label: &str, s: &EvalSummary) {
    println!(
        "{label}: accuracy {} ece {} auroc {} brier {} gap {}",
        show(s.accuracy),
        show(s.ece),
        show(s.auroc),
        show(s.brier),
        show(s.gap.as_ref().map(|g| g.delta))
    );
}

fn train(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = match (config, seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::new(seed),
        (None, None) => return Err(Error::Config("either --config or --seed is required".into())),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    let every = (cfg.train.steps as u64 / 10).max(1);
    let outcome = cli::cmd_train(&cfg, Execution::default(), |s| {
        if (s.step + 1) % every == 0 {
            eprintln!(
                "step {:>6}  reward {:.4}  accuracy {:.4}  confidence {:.4}  ece {:.4}",
                s.step + 1,
                s.mean_reward,
                s.accuracy,
                s.mean_confidence,
                s.ece
            );
        }
    })?;
    print_summary("initial", &outcome.summary.initial);
    if let Some(trained) = &outcome.summary.trained {
        print_summary("final", trained);
    }
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

fn estimate(trace: &Path, method: Estimator, out: Option<&Path>) -> Result<()> {
    let output = cli::cmd_estimate(trace, method)?;
    for e in &output.skipped {
        eprintln!("skipped: {e}");
    }
    let table = output.to_tsv();
    match out {
        Some(path) => std::fs::write(path, table).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?,
        None => print!("{table}"),
    }
    eprintln!("{} records scored, {} skipped", output.rows.len(), output.skipped.len());
    Ok(())
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Train { config, seed, out } => train(config.as_deref(), seed, out),
        Command::Estimate { trace, method, out } => estimate(&trace, method, out.as_deref()),
        Command::Validate { trace, method } => {
            print!("{}", cli::cmd_validate(&trace, method)?.to_tsv());
            Ok(())
        }
        Command::Report { run_dir, bins } => {
            let report = cli::cmd_report(&run_dir, bins)?;
            print_summary("evaluation", &report.summary);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
