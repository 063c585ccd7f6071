use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use duality_core::harness::{compare, read_csv, run_batch, write_csv, Batch, Metric};
use duality_core::verify::{results_csv, run_suites, Suite};
use duality_core::{generate, GeneratorSpec};

const SEED_VAR: &str = "DUALITY_MASTER_SEED";

#[derive(Parser)]
#[command(name = "duality", version, about = "Tabular MDP solvers seen as optimizers: run, verify, compare")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated MDP as JSON.
    Generate {
        /// Generator spec (JSON file).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a batch of experiments and write the records as CSV.
    Solve {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the self-checks and print a pass/fail table. Fails if any check fails.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
    },
    /// Rank experiments of a records CSV on one metric.
    Compare {
        #[arg(long = "in")]
        input: PathBuf,
        /// final_residual, iterations, auc or final_dist.
        #[arg(long, default_value = "final_residual")]
        metric: String,
        /// Restrict to these experiment ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Equivalence,
    Theorems,
    All,
}

fn master_seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_VAR}={s:?} is not a u64"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_VAR}: {e}"),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: GeneratorSpec = serde_json::from_str(&text).context("parsing generator spec")?;
            generate(&spec)?.save(&out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Solve { batch, out, workers } => {
            if workers == 0 {
                bail!("--workers must be at least 1");
            }
            let mut b = Batch::load(&batch).with_context(|| format!("loading {}", batch.display()))?;
            if let Some(seed) = master_seed_override()? {
                b.master_seed = seed;
            }
            let outcomes = run_batch(&b, workers)?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_csv(&outcomes, BufWriter::new(file))?;
            let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see the error column", outcomes.len());
            }
        }
        Command::Verify { suite } => {
            let suites = match suite {
                SuiteArg::Equivalence => vec![Suite::Equivalence],
                SuiteArg::Theorems => vec![Suite::Theorems],
                SuiteArg::All => vec![Suite::Equivalence, Suite::Theorems],
            };
            let rows = run_suites(&suites);
            print!("{}", results_csv(&rows));
            let failed = rows.iter().filter(|r| !r.passed).count();
            eprintln!("{} checks, {failed} failed", rows.len());
            return Ok(failed == 0);
        }
        Command::Compare { input, metric, ids } => {
            let metric: Metric = metric.parse()?;
            let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let table = compare(&read_csv(file)?, &ids, metric)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "rank,experiment_id,value,seeds")?;
            for r in table {
                writeln!(out, "{},{},{:.16e},{}", r.rank, r.experiment_id, r.value, r.seeds)?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
