//! `lrsa-lab`: equivalence checks, op-count benchmarks, training runs, score
//! dumps and task generation for the LRSA toy model.

pub mod commands;
pub mod overrides;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use lrsa_core::{Precision, RunConfig};
use serde_json::Value;

use commands::{write_file, Outcome};

/// Top-level keys that already have a dedicated flag.
const DEDICATED: [&str; 4] = ["seed", "precision", "mode", "output"];

pub const SUBCOMMANDS: [(&str, &str); 5] = [
    ("equivalence", "Compare masked full-sequence logits with the compacted cache path"),
    ("bench", "Count attention score entries and time LRSA vs causal prefill"),
    ("train", "Train the toy model and write the loss curve"),
    ("score-dump", "Dump per-chunk token scores and retention sets"),
    ("gen-task", "Sample one synthetic task instance"),
];

pub fn command() -> Command {
    let mut cmd = Command::new("lrsa-lab")
        .about("Lag-relative sparse attention lab")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("PATH")
                .help("JSON run configuration; missing fields take defaults"),
        )
        .arg(Arg::new("seed").long("seed").global(true).value_parser(clap::value_parser!(u64)))
        .arg(
            Arg::new("precision")
                .long("precision")
                .global(true)
                .value_parser(["f32", "f64"]),
        )
        .arg(
            Arg::new("mode")
                .long("mode")
                .global(true)
                .value_parser(["vanilla", "lrsa"]),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .global(true)
                .value_name("DIR")
                .help("Directory for reports and artifacts"),
        );
    for key in overrides::dotted_keys() {
        if DEDICATED.contains(&key.as_str()) {
            continue;
        }
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key.clone())
                .global(true)
                .action(ArgAction::Set)
                .value_name("JSON")
                .hide(true),
        );
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd.after_help("Every config field can be set with a flag of its dotted name, e.g. --lagkv.retention_ratio 1.0")
}

/// Builds the run config from `--config`, dotted flags and dedicated flags,
/// in that order of precedence (last wins).
pub fn config_from_matches(m: &ArgMatches) -> Result<RunConfig> {
    let text = match m.get_one::<String>("config") {
        Some(path) => Some(std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?),
        None => None,
    };
    let mut sets: Vec<(String, Value)> = Vec::new();
    for key in overrides::dotted_keys() {
        if DEDICATED.contains(&key.as_str()) {
            continue;
        }
        if let Some(v) = m.get_one::<String>(&key) {
            sets.push((key, overrides::parse_value(v)));
        }
    }
    if let Some(&seed) = m.get_one::<u64>("seed") {
        sets.push(("seed".into(), Value::from(seed)));
    }
    for key in ["precision", "mode"] {
        if let Some(v) = m.get_one::<String>(key) {
            sets.push((key.into(), Value::String(v.clone())));
        }
    }
    if let Some(v) = m.get_one::<String>("out") {
        sets.push(("output".into(), Value::String(v.clone())));
    }
    overrides::resolve(text.as_deref(), &sets)
}

/// Runs one subcommand and writes its artifacts under `cfg.output`.
pub fn execute(name: &str, cfg: &RunConfig) -> Result<Outcome> {
    let out: &Path = &cfg.output;
    macro_rules! by_precision {
        ($($f:ident)::+ $(, $arg:expr)*) => {
            match cfg.precision {
                Precision::F64 => $($f)::+::<f64>(cfg $(, $arg)*),
                Precision::F32 => $($f)::+::<f32>(cfg $(, $arg)*),
            }
        };
    }
    let outcome = match name {
        "equivalence" => by_precision!(commands::equivalence::run)?,
        "bench" => {
            let (outcome, timings) = by_precision!(commands::bench::run)?;
            let mut t = serde_json::to_string_pretty(&timings)?;
            t.push('\n');
            write_file(out, "bench_timings.json", t.as_bytes())?;
            outcome
        }
        "train" => by_precision!(commands::train::run, Some(out))?,
        "score-dump" => by_precision!(commands::score_dump::run)?,
        "gen-task" => commands::gen_task::run(cfg)?,
        other => anyhow::bail!("unknown command {other}"),
    };
    outcome.write(out)?;
    Ok(outcome)
}

/// Parses arguments, runs the command and returns whether every check passed.
pub fn run_cli<I, S>(args: I) -> Result<bool>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = config_from_matches(sub)?;
    log::info!("{name}: writing to {}", PathBuf::from(&cfg.output).display());
    let outcome = execute(name, &cfg)?;
    print!("{}", outcome.to_json());
    eprintln!("{}: {}", name, if outcome.pass { "PASS" } else { "FAIL" });
    Ok(outcome.pass)
}
