//! `flowplan fit-gmn` — fit the Gaussian-mixture noise prior from a
//! dataset's expert trajectories.

use std::path::PathBuf;

use anyhow::{Context, Result};
use flowplan_core::gmnprior::{
    build_gmn, fit_dataset_normalization, save_gmn, GaussianMixtureNoise,
};
use flowplan_core::synthworld::load_dataset;

use crate::util;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Input dataset (JSON-lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output prior file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Configuration file (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of mixture components (overrides the config).
    #[arg(long)]
    pub k: Option<usize>,
    /// Master seed (overrides FLOWPLAN_SEED and the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit the standard-Gaussian ablation prior (zero means, unit sigma)
    /// with data-fitted normalization, instead of clustering.
    #[arg(long)]
    pub standard: bool,
}

pub fn run(args: &Args) -> Result<()> {
    let mut cfg = util::load_config(args.config.as_deref())?;
    cfg.seed = util::resolve_seed(args.seed, cfg.seed)?;
    if let Some(k) = args.k {
        cfg.model.k = k;
    }
    cfg.validate()?;

    let data = load_dataset(&args.dataset, cfg.dataset.t_f, cfg.dataset.dt)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let (gmn, norm) = if args.standard {
        let norm = fit_dataset_normalization(&data).context("fitting normalization")?;
        let gmn = GaussianMixtureNoise::standard(cfg.model.k, cfg.dataset.t_f * 2);
        (gmn, norm)
    } else {
        build_gmn(&data, cfg.model.k, cfg.seed).context("fitting mixture")?
    };

    util::ensure_parent(&args.out)?;
    save_gmn(&args.out, &gmn, &norm).context("saving prior")?;
    util::write_resolved_config(&args.out, &cfg)?;

    let kind = if args.standard { "standard" } else { "fitted" };
    println!(
        "wrote {kind} {}-component prior from {} scenarios to {}",
        gmn.k,
        data.len(),
        args.out.display()
    );
    Ok(())
}
