mod args;
mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde::de::DeserializeOwned;
use serde::Serialize;

use args::{Cli, Command, OUT_DIR_ENV};
use config::ConfigFile;
use run::{exit_code, usage, Run, EXIT_OK, EXIT_USAGE};

type Handler<T> = fn(&T, &mut Run) -> Result<Option<u64>>;

fn dispatch<T>(cfg: &ConfigFile, args: &T, sub: &ArgMatches, name: &'static str, out: PathBuf, f: Handler<T>) -> Result<()>
where
    T: Serialize + DeserializeOwned,
{
    let args = cfg.overlay(args, sub, Some(name))?;
    let params = serde_json::to_value(&args)?;
    let mut run = Run::new(name, out)?;
    let seed = f(&args, &mut run)?;
    run.finish(seed, &params)?;
    Ok(())
}

fn execute(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    let cfg = match &cli.global.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let globals = cfg.overlay(&cli.global, matches, None)?;
    match globals.jobs {
        Some(0) => return Err(usage("--jobs must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?,
        None => {}
    }
    let out = globals
        .out_dir
        .clone()
        .ok_or_else(|| usage(format!("missing output directory: pass --out-dir or set {OUT_DIR_ENV}")))?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    log::debug!("{name}: output in {}", out.display());
    match &cli.command {
        Command::Validate(a) => dispatch(&cfg, a, sub, "validate", out, commands::validate),
        Command::Partition(a) => dispatch(&cfg, a, sub, "partition", out, commands::partition),
        Command::Features(a) => dispatch(&cfg, a, sub, "features", out, commands::features),
        Command::Train(a) => dispatch(&cfg, a, sub, "train", out, commands::train),
        Command::Predict(a) => dispatch(&cfg, a, sub, "predict", out, commands::predict),
        Command::Fuse(a) => dispatch(&cfg, a, sub, "fuse", out, commands::fuse_cmd),
        Command::Evaluate(a) => dispatch(&cfg, a, sub, "evaluate", out, commands::evaluate),
        Command::Preprocess(a) => dispatch(&cfg, a, sub, "preprocess", out, commands::preprocess),
        Command::Simulate(a) => dispatch(&cfg, a, sub, "simulate", out, commands::simulate),
        Command::Synth(a) => dispatch(&cfg, a, sub, "synth", out, commands::synth),
    }
}

/// Error chain joined with ": ", skipping causes already quoted by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK } as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match execute(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {}", cli.command.name(), describe(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
