//! `flowplan train` — train the one-step planner or the flow-matching
//! baseline, write an atomic checkpoint plus a loss-curve file.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use flowplan_core::checkpoint::save_checkpoint;
use flowplan_core::gmnprior::{build_gmn, load_gmn};
use flowplan_core::meanflow::LossKind;
use flowplan_core::synthworld::load_dataset;
use flowplan_core::{ModelKind, PlannerModel};

use crate::util;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Configuration file (JSON); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset (JSON-lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output checkpoint path; the loss curve lands next to it as
    /// `<out>.losses.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Train the multi-step flow-matching baseline instead of the one-step
    /// model (same checkpoint format).
    #[arg(long)]
    pub baseline_fm: bool,
    /// Load a previously fitted prior file instead of fitting one from the
    /// dataset.
    #[arg(long)]
    pub gmn: Option<PathBuf>,
    /// Master seed (overrides FLOWPLAN_SEED and the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override the peak learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Override the flow-loss geometry: "l1" or "l2".
    #[arg(long)]
    pub loss: Option<String>,
}

pub fn run(args: &Args) -> Result<()> {
    let mut cfg = util::load_config(args.config.as_deref())?;
    cfg.seed = util::resolve_seed(args.seed, cfg.seed)?;
    if let Some(epochs) = args.epochs {
        cfg.training.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.training.batch_size = batch;
    }
    if let Some(lr) = args.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if let Some(loss) = &args.loss {
        cfg.training.loss = match loss.to_ascii_lowercase().as_str() {
            "l1" => LossKind::L1,
            "l2" => LossKind::L2,
            other => anyhow::bail!("unknown loss {other:?} (expected \"l1\" or \"l2\")"),
        };
    }
    cfg.validate()?;

    let data = load_dataset(&args.dataset, cfg.dataset.t_f, cfg.dataset.dt)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let (gmn, norm) = match &args.gmn {
        Some(path) => {
            let file =
                load_gmn(path).with_context(|| format!("loading prior {}", path.display()))?;
            (file.gmn, file.normalization)
        }
        None => build_gmn(&data, cfg.model.k, cfg.seed).context("fitting prior")?,
    };

    let kind = if args.baseline_fm {
        ModelKind::FmBaseline
    } else {
        ModelKind::MeanFlow
    };
    let mut model = PlannerModel::new(kind, cfg.clone(), gmn, norm)?;

    let total_epochs = cfg.training.epochs;
    let started = Instant::now();
    let stats = model.train_with(&data, |s| {
        println!(
            "epoch {:>4}/{}  flow {:.6}  fusion {:.6}  total {:.6}  lr {:.3e}",
            s.epoch + 1,
            total_epochs,
            s.flow_loss,
            s.fusion_loss,
            s.total_loss,
            s.learning_rate
        );
    })?;

    util::ensure_parent(&args.out)?;
    save_checkpoint(&args.out, &model).context("saving checkpoint")?;

    let mut csv = String::from("epoch,flow_loss,fusion_loss,total_loss,learning_rate\n");
    for s in &stats {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.epoch, s.flow_loss, s.fusion_loss, s.total_loss, s.learning_rate
        ));
    }
    let losses = util::sibling_with_suffix(&args.out, ".losses.csv");
    util::write_atomic(&losses, &csv)?;
    util::write_resolved_config(&args.out, &cfg)?;

    let label = if args.baseline_fm {
        "baseline"
    } else {
        "one-step"
    };
    println!(
        "saved {label} checkpoint to {} ({} epochs in {:.1} s; loss curve at {})",
        args.out.display(),
        stats.len(),
        started.elapsed().as_secs_f64(),
        losses.display()
    );
    Ok(())
}
