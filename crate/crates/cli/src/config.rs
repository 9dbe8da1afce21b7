//! Merging a `--config` file under the command line.
//!
//! File entries become `--key=value` arguments placed right after the
//! subcommand name, so anything given explicitly later on the command line
//! overrides them (`args_override_self`).

use clap::{CommandFactory, Parser};

use crate::Cli;

pub enum ParseFailure {
    Clap(clap::Error),
    File(String),
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

pub fn parse_with_config(argv: &[String]) -> Result<Cli, ParseFailure> {
    let Some(path) = config_path(argv) else {
        return Cli::try_parse_from(argv).map_err(ParseFailure::Clap);
    };
    let pairs = restt::kv::read_kv(&path).map_err(|e| ParseFailure::File(format!("config {path}: {e}")))?;
    let names: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let Some(at) = argv.iter().skip(1).position(|a| names.contains(a)).map(|p| p + 1) else {
        return Cli::try_parse_from(argv).map_err(ParseFailure::Clap);
    };
    let injected = pairs
        .into_iter()
        .filter(|(k, _)| k != "config")
        .map(|(k, v)| format!("--{}={v}", k.replace('_', "-")));
    let mut merged: Vec<String> = argv[..=at].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&argv[at + 1..]);
    Cli::try_parse_from(merged).map_err(ParseFailure::Clap)
}
