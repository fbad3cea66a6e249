//! `fdptl`: run simulations and sweeps, fit rate slopes, audit transcripts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config or parse error,
//! 3 ledger violation. `FDPTL_THREADS` sets the worker count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fdp_transfer::experiment::{fit_rate_slopes, read_rows, run_sweep, simulate, Axis, ErrorColumn, ExperimentConfig};
use fdp_transfer::federation::{audit_ledger, Transcript};
use fdp_transfer::Error;

const THREADS_ENV: &str = "FDPTL_THREADS";

#[derive(Parser)]
#[command(name = "fdptl", version, about = "Federated transfer learning under federated DP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One replication at the base point of a config.
    Simulate {
        config: PathBuf,
        /// Write the protocol transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Write the full estimator report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Dump the generated site data and ground truth into this directory.
        #[arg(long)]
        dump_data: Option<PathBuf>,
    },
    /// Every grid point × replication; writes the results CSV.
    Sweep {
        config: PathBuf,
        /// Overrides `output` from the config; `-` for stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Log-log slope of median error against one axis of a results CSV.
    Rates {
        csv: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_enum, default_value = "federated")]
        column: ColumnArg,
    },
    /// Audit a transcript file.
    ValidateTranscript { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    N,
    #[value(name = "K")]
    K,
    Epsilon,
    InvEpsilon,
    D,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColumnArg {
    Federated,
    TargetOnly,
}

enum Failure {
    Input(String),
    Runtime(String),
    Ledger(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::InvalidParameter(_) => Failure::Input(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Failure::Input(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn cmd_simulate(config: &Path, transcript: Option<&Path>, report: Option<&Path>, dump: Option<&Path>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let (cell, tr) = simulate(&cfg)?;
    if let Some(dir) = dump {
        cell.instance.dump(dir)?;
    }
    if let Some(p) = transcript {
        write(p, &tr.to_csv())?;
    }
    if let (Some(p), Some(r)) = (report, &cell.report) {
        let json = serde_json::to_string_pretty(r).map_err(|e| Failure::Runtime(e.to_string()))?;
        write(p, &json)?;
    }
    let row = &cell.row;
    let selected = cell.report.as_ref().map(|r| format!("{:?}", r.selected)).unwrap_or_default();
    println!(
        "family={} n={} K={} d={} epsilon={} err_target_only={} err_federated={} selected={selected} A_recovered={} branch={} ledger_ok={}",
        row.family, row.n, row.k, row.d, row.epsilon, row.err_target_only, row.err_federated, row.a_recovered, row.branch, row.ledger_ok
    );
    if row.ledger_ok == 0 {
        let verdict = audit_ledger(&tr, tr.declared);
        for v in &verdict.violations {
            eprintln!("violation: site {} round {} [{}] {}", v.site, v.round, v.rule, v.detail);
        }
        return Err(Failure::Ledger("transcript failed the audit".into()));
    }
    Ok(())
}

fn cmd_sweep(config: &Path, output: Option<&Path>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let result = run_sweep(&cfg)?;
    let csv = result.to_csv(&cfg)?;
    match output.map(Path::to_path_buf).or_else(|| cfg.output.clone()) {
        Some(p) if p.as_os_str() != "-" => {
            write(&p, &csv)?;
            eprintln!("wrote {} rows to {}", result.rows.len(), p.display());
        }
        _ => print!("{csv}"),
    }
    let bad = result.rows.iter().filter(|r| r.ledger_ok == 0).count();
    if bad > 0 {
        return Err(Failure::Ledger(format!("{bad} rows failed the ledger audit")));
    }
    Ok(())
}

fn cmd_rates(csv: &Path, axis: AxisArg, column: ColumnArg) -> Result<(), Failure> {
    let rows = read_rows(&read(csv)?)?;
    let axis = match axis {
        AxisArg::N => Axis::N,
        AxisArg::K => Axis::K,
        AxisArg::Epsilon => Axis::Epsilon,
        AxisArg::InvEpsilon => Axis::InvEpsilon,
        AxisArg::D => Axis::D,
    };
    let column = match column {
        ColumnArg::Federated => ErrorColumn::Federated,
        ColumnArg::TargetOnly => ErrorColumn::TargetOnly,
    };
    let fit = fit_rate_slopes(&rows, axis, column)?;
    for (x, m) in &fit.points {
        println!("x={x} median_error={m}");
    }
    println!("slope={} std_error={} intercept={}", fit.slope, fit.std_error, fit.intercept);
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let tr = Transcript::from_csv(&read(path)?)?;
    let verdict = audit_ledger(&tr, tr.declared);
    if verdict.ok {
        println!("ok: {} entries", tr.entries.len());
        return Ok(());
    }
    println!("FAILED: {} violations", verdict.violations.len());
    for v in &verdict.violations {
        println!("site={} round={} rule={} {}", v.site, v.round, v.rule, v.detail);
    }
    Err(Failure::Ledger("ledger violations".into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match &cli.command {
        Command::Simulate {
            config,
            transcript,
            report,
            dump_data,
        } => cmd_simulate(config, transcript.as_deref(), report.as_deref(), dump_data.as_deref()),
        Command::Sweep { config, output } => cmd_sweep(config, output.as_deref()),
        Command::Rates { csv, axis, column } => cmd_rates(csv, *axis, *column),
        Command::ValidateTranscript { path } => cmd_validate(path),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Ledger(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
