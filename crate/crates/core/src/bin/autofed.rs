use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use autofed::config::{RunConfig, SEED_ENV};
use autofed::data::{generate_synthetic, write_csv, SyntheticSpec};
use autofed::experiment;
use autofed::report::compare;

/// Personalized federated traffic prediction experiments.
#[derive(Parser)]
#[command(name = "autofed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a TOML run config; writes report.jsonl and checkpoints.
    Run { config: PathBuf },
    /// Print a metric table over finished reports, best values starred.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write synthetic client series as CSV files.
    GenData { spec: PathBuf, out: PathBuf },
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config } => run(&config),
        Command::Compare { reports, output } => {
            let table = match compare(&reports) {
                Ok(t) => t,
                Err(e) => return fail(CONFIG_ERROR, e),
            };
            println!("{table}");
            if let Some(path) = output {
                if let Err(e) = std::fs::write(&path, format!("{table}\n")) {
                    return fail(RUNTIME_ERROR, format_args!("{}: {e}", path.display()));
                }
            }
            ExitCode::SUCCESS
        }
        Command::GenData { spec, out } => gen_data(&spec, &out),
    }
}

fn run(path: &Path) -> ExitCode {
    let config = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    match experiment::run(&config) {
        Ok(outcome) => {
            println!("{}", outcome.report.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.exit_code() as u8, e),
    }
}

fn gen_data(spec_path: &Path, out: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(spec_path) {
        Ok(t) => t,
        Err(e) => return fail(CONFIG_ERROR, format_args!("cannot read {}: {e}", spec_path.display())),
    };
    let mut table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => return fail(CONFIG_ERROR, format_args!("{}: {e}", spec_path.display())),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        match raw.trim().parse::<i64>() {
            Ok(seed) if seed >= 0 => {
                table.entry("seed").or_insert(toml::Value::Integer(seed));
            }
            _ => {
                return fail(
                    CONFIG_ERROR,
                    format_args!("{SEED_ENV}={raw:?} is not a non-negative integer"),
                )
            }
        }
    }
    let spec: SyntheticSpec = match table.try_into() {
        Ok(s) => s,
        Err(e) => return fail(CONFIG_ERROR, format_args!("{}: {e}", spec_path.display())),
    };
    let series = match generate_synthetic(&spec) {
        Ok(s) => s,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        return fail(RUNTIME_ERROR, format_args!("{}: {e}", out.display()));
    }
    for s in &series {
        match write_csv(s, &out.join(format!("client_{}.csv", s.client))) {
            Ok(paths) => paths.iter().for_each(|p| println!("{}", p.display())),
            Err(e) => return fail(RUNTIME_ERROR, e),
        }
    }
    ExitCode::SUCCESS
}
