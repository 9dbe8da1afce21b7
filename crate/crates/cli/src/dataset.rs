//! Resolving `--dataset` specs into train/test splits.

use std::path::PathBuf;

use anyhow::{Context, Result};
use restt::data::{load_csv, load_idx_dir, load_node_csv, split, Dataset};

use crate::commands::ConfigError;

pub const DATA_DIR_ENV: &str = "RESTT_DATA_DIR";

/// `$RESTT_DATA_DIR`, or `data/` at the workspace root.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub target: String,
    pub delimiter: u8,
    pub split: f64,
    pub split_seed: u64,
}

/// Accepted forms:
/// - `mnist`, `fashion-mnist`: IDX files under the data directory
/// - `idx:DIR`: the four IDX files in `DIR`
/// - `synth:DIR`: `train.csv` / `test.csv` from `gen-synth`
/// - `csv:PATH`: one table, split by `csv.split`
pub fn resolve(spec: &str, csv: &CsvOptions) -> Result<(Dataset, Dataset)> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "mnist" | "fashion-mnist" => {
            let dir = data_dir().join(kind);
            load_idx_dir(&dir).with_context(|| format!("loading {kind} from {}", dir.display()))
        }
        "idx" => load_idx_dir(arg).with_context(|| format!("loading IDX files from {arg}")),
        "synth" => {
            let dir = PathBuf::from(arg);
            let train = load_node_csv(dir.join("train.csv"))?;
            let test = load_node_csv(dir.join("test.csv"))?;
            Ok((train, test))
        }
        "csv" => {
            let full = load_csv(arg, &csv.target, csv.delimiter).with_context(|| format!("loading {arg}"))?;
            Ok(split(&full, csv.split, csv.split_seed)?)
        }
        _ => Err(ConfigError(format!(
            "unknown dataset '{spec}' (expected mnist, fashion-mnist, idx:DIR, synth:DIR or csv:PATH)"
        ))
        .into()),
    }
}

pub fn parse_delimiter(s: &str) -> Result<u8, String> {
    match s {
        "tab" | "\\t" => Ok(b'\t'),
        _ if s.len() == 1 => Ok(s.as_bytes()[0]),
        _ => Err(format!("delimiter must be one byte, got '{s}'")),
    }
}
