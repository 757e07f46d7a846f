//! Shared command plumbing: config loading, seed resolution, atomic file
//! writes, and resolved-config emission.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flowplan_core::Config;

/// Environment override for the master seed — the only setting configurable
/// through the environment. Precedence: `--seed` flag, then this variable,
/// then the config file.
pub const SEED_ENV: &str = "FLOWPLAN_SEED";

/// Load a config file, or fall back to defaults when none is given.
pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => {
            Config::load(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(Config::default()),
    }
}

/// Resolve the master seed: flag, then `FLOWPLAN_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var_os(SEED_ENV) {
        Some(raw) => {
            let text = raw
                .to_str()
                .with_context(|| format!("{SEED_ENV} is not valid UTF-8"))?;
            text.trim()
                .parse::<u64>()
                .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {text:?}"))
        }
        None => Ok(config_seed),
    }
}

/// Create the directory that will hold `path`, if it doesn't exist yet.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    Ok(())
}

/// Write text atomically: sibling `.tmp` file, then rename into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming into place at {}", path.display()))?;
    Ok(())
}

/// Sibling path carrying an extra suffix: `out.jsonl` + `.losses.csv` →
/// `out.jsonl.losses.csv`.
pub fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "run".into());
    name.push(suffix);
    path.with_file_name(name)
}

/// Record the fully resolved configuration next to a command's output, so
/// every artifact is reproducible from the files beside it.
pub fn write_resolved_config(out: &Path, config: &Config) -> Result<()> {
    let text =
        serde_json::to_string_pretty(config).context("serializing resolved config")?;
    write_atomic(&sibling_with_suffix(out, ".resolved.json"), &(text + "\n"))
}
