//! `qstitch`: dataset generation, CVAE and policy training, labeling,
//! evaluation, oracle checks, ablation sweeps and reports.
//!
//! Every subcommand resolves a flat configuration (schema defaults, then
//! `--config FILE`, then `--key value` flags, then `--set key=value`),
//! writes it to `config.txt` in the output directory, runs, and records a
//! `manifest.json` with input and output hashes.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches};
use qstitch_core::hashing::hash_file;
use qstitch_core::{Error, Result};

use crate::commands::{Command, Outcome, COMMANDS, INPUT_KEYS};
use crate::config::Params;

const EXIT_CHECK_FAILED: u8 = 7;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::Config(_) => 2,
        Error::MissingFile(_) => 3,
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => 4,
        Error::Numerical { .. } | Error::Diverged(_) => 5,
        Error::InvalidInput(_) | Error::Shape(_) => 6,
    }
}

fn flag_name(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn cli() -> clap::Command {
    let mut app = clap::Command::new("qstitch")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Q-conditioned supervised learning for offline goal-conditioned RL")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for c in COMMANDS {
        let mut sub = clap::Command::new(c.name)
            .about(c.about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key = value file applied over the defaults"),
            )
            .arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("override one key; applied last, repeatable"),
            );
        for k in c.schema {
            let help = if k.default.is_empty() {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            };
            sub = sub.arg(Arg::new(k.name).long(flag_name(k.name)).value_name("VALUE").help(help));
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(c: &Command, m: &ArgMatches) -> Result<Params> {
    let mut p = Params::defaults(c.schema);
    if let Some(f) = m.get_one::<String>("config") {
        p.apply_file(Path::new(f))?;
    }
    for k in c.schema {
        if let Some(v) = m.get_one::<String>(k.name) {
            p.set(k.name, v)?;
        }
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        p.apply_assignment(kv)?;
    }
    Ok(p)
}

fn manifest(c: &Command, p: &Params, out: &Path, outcome: &Outcome) -> Result<serde_json::Value> {
    let mut inputs = serde_json::Map::new();
    for name in INPUT_KEYS {
        if !c.schema.iter().any(|k| k.name == name) {
            continue;
        }
        if let Some(path) = p.path(name) {
            inputs.insert(
                name.to_string(),
                serde_json::json!({ "path": path.display().to_string(), "sha256": hash_file(&path)? }),
            );
        }
    }
    let mut outputs = serde_json::Map::new();
    for f in &outcome.outputs {
        outputs.insert(f.clone(), hash_file(&out.join(f))?.into());
    }
    Ok(serde_json::json!({
        "command": c.name,
        "version": env!("CARGO_PKG_VERSION"),
        "config": p.as_json(),
        "inputs": inputs,
        "outputs": outputs,
    }))
}

fn run(c: &Command, m: &ArgMatches) -> Result<bool> {
    let p = resolve(c, m)?;
    let out = PathBuf::from(p.str("out"));
    if out.as_os_str().is_empty() {
        return Err(Error::Config("'out' is required".into()));
    }
    std::fs::create_dir_all(&out)?;
    for k in c.schema.iter().filter(|k| k.name.contains("seed")) {
        eprintln!("{}: {} = {}", c.name, k.name, p.str(k.name));
    }
    std::fs::write(out.join("config.txt"), p.render())?;
    let outcome = (c.run)(&p, &out)?;
    let mut bytes = serde_json::to_vec_pretty(&manifest(c, &p, &out, &outcome)?)?;
    bytes.push(b'\n');
    std::fs::write(out.join("manifest.json"), bytes)?;
    println!("{}: {}", c.name, outcome.summary);
    Ok(!outcome.check_failed)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let c = COMMANDS.iter().find(|c| c.name == name).expect("registered subcommand");
    match run(c, sub) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_schema_key_has_a_flag() {
        cli().debug_assert();
        let m = cli()
            .try_get_matches_from(["qstitch", "train-policy", "--batch-size", "8", "--set", "steps=3"])
            .unwrap();
        let (name, sub) = m.subcommand().unwrap();
        let c = COMMANDS.iter().find(|c| c.name == name).unwrap();
        let p = resolve(c, sub).unwrap();
        assert_eq!(p.str("batch_size"), "8");
        assert_eq!(p.str("steps"), "3");
    }

    #[test]
    fn error_categories_map_to_distinct_codes() {
        let codes = [
            exit_code(&Error::Config(String::new())),
            exit_code(&Error::MissingFile(PathBuf::new())),
            exit_code(&Error::Format {
                path: String::new(),
                detail: String::new(),
            }),
            exit_code(&Error::Diverged(String::new())),
            exit_code(&Error::invalid("")),
        ];
        let mut sorted = codes.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
        assert!(!codes.contains(&EXIT_CHECK_FAILED));
    }
}
