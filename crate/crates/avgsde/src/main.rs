//! Command-line front end.
//!
//! ```text
//! avgsde <subcommand> --config <file> [--seed N] [--threads N] [--out DIR]
//! ```
//!
//! Subcommands: rates, simulate, strong-study, weak-study, kbm-check,
//! fluct-check. Exit codes: 0 all gates pass, 1 gate failure,
//! 2 configuration/runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use avgsde::harness::{parse_config, run_experiment, write_report, ExperimentKind};

struct CliArgs {
    kind: ExperimentKind,
    config: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
}

const USAGE: &str = "usage: avgsde <rates|simulate|strong-study|weak-study|kbm-check|fluct-check> \
--config <file> [--seed N] [--threads N] [--out DIR]";

fn parse_args(args: &[String]) -> Result<CliArgs, String> {
    let mut it = args.iter();
    let sub = it.next().ok_or_else(|| USAGE.to_string())?;
    let kind = match sub.as_str() {
        "rates" => ExperimentKind::RatesTable,
        "simulate" => ExperimentKind::Simulate,
        "strong-study" => ExperimentKind::StrongStudy,
        "weak-study" => ExperimentKind::WeakStudy,
        "kbm-check" => ExperimentKind::KbmCheck,
        "fluct-check" => ExperimentKind::FluctCheck,
        other => return Err(format!("unknown subcommand '{other}'\n{USAGE}")),
    };
    let mut config = None;
    let mut seed = None;
    let mut threads = None;
    let mut out = None;
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| format!("flag {flag} needs a value"))
        };
        match flag.as_str() {
            "--config" => config = Some(PathBuf::from(value()?)),
            "--seed" => {
                seed = Some(
                    value()?
                        .parse::<u64>()
                        .map_err(|_| "--seed expects a u64".to_string())?,
                )
            }
            "--threads" => {
                threads = Some(
                    value()?
                        .parse::<usize>()
                        .map_err(|_| "--threads expects a positive integer".to_string())?,
                )
            }
            "--out" => out = Some(PathBuf::from(value()?)),
            other => return Err(format!("unknown flag '{other}'\n{USAGE}")),
        }
    }
    Ok(CliArgs {
        kind,
        config: config.ok_or_else(|| format!("--config is required\n{USAGE}"))?,
        seed,
        threads,
        out,
    })
}

fn run(cli: CliArgs) -> avgsde::Result<bool> {
    let mut spec = parse_config(&cli.config)?;
    if spec.kind != cli.kind {
        return Err(avgsde::Error::Config(format!(
            "config declares experiment.kind = {} but the subcommand asked for {}",
            spec.kind.as_str(),
            cli.kind.as_str()
        )));
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if let Some(out) = &cli.out {
        spec.output_dir = out.to_string_lossy().into_owned();
    }

    let report = match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| avgsde::Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| run_experiment(&spec))?
        }
        None => run_experiment(&spec)?,
    };

    let dir = PathBuf::from(&spec.output_dir);
    write_report(&report, &dir)?;
    println!("{}", report.text);
    println!(
        "wrote {} and summary.json to {}",
        report.csv_file,
        dir.display()
    );
    Ok(report.pass)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
