//! `flowplan gen-data` — deterministic synthetic dataset generation.

use std::path::PathBuf;

use anyhow::{Context, Result};
use flowplan_core::synthworld::{generate_dataset, save_dataset};

use crate::util;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Configuration file (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset path (JSON-lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed (overrides FLOWPLAN_SEED and the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of scenarios to generate.
    #[arg(long)]
    pub n_scenarios: Option<usize>,
}

pub fn run(args: &Args) -> Result<()> {
    let mut cfg = util::load_config(args.config.as_deref())?;
    cfg.seed = util::resolve_seed(args.seed, cfg.seed)?;
    if let Some(n) = args.n_scenarios {
        cfg.dataset.n_scenarios = n;
    }
    cfg.validate()?;

    let report = generate_dataset(&cfg.dataset, cfg.seed).context("generating dataset")?;
    util::ensure_parent(&args.out)?;
    save_dataset(&args.out, &report.scenarios).context("saving dataset")?;
    util::write_resolved_config(&args.out, &cfg)?;

    println!(
        "wrote {} scenarios to {} ({} invalid draws discarded)",
        report.scenarios.len(),
        args.out.display(),
        report.skipped
    );
    Ok(())
}
