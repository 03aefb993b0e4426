//! Run configs: loaded from an optional JSON document, overridden by flags and
//! written back next to the outputs as `config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{CliError, CliResult};

pub const RESOLVED: &str = "config.json";

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config document to start from; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read(path).map_err(|e| matdiff::Error::io(path, e))?;
    Ok(serde_json::from_slice(&text).map_err(|e| matdiff::Error::json(path, e))?)
}

/// Creates the output directory and writes the resolved config into it.
pub fn prepare_out<T: Serialize>(out: &Path, cfg: &T) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| matdiff::Error::io(out, e))?;
    let path = out.join(RESOLVED);
    let json = serde_json::to_vec_pretty(cfg).map_err(|e| matdiff::Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| matdiff::Error::io(&path, e))?;
    Ok(())
}

pub fn required<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("missing --{flag} (or its config entry)")))
}

/// Copies every `Some` flag value over the matching config field.
macro_rules! overlay {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
    };
}

/// As [`overlay`] for config fields that are themselves optional.
macro_rules! overlay_some {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = Some(v); } )*
    };
}

pub(crate) use {overlay, overlay_some};
