//! `flowplan bench` — one-step sampling versus multi-step ODE solving:
//! function evaluations, median wall-clock, and sample quality per method.

use std::path::PathBuf;

use anyhow::{Context, Result};
use flowplan_core::checkpoint::load_checkpoint;
use flowplan_core::flowbase::{SolverConfig, SolverMethod};
use flowplan_core::model::compare_nfe;
use flowplan_core::synthworld::load_dataset;
use flowplan_core::ModelKind;

use crate::util;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// One-step model checkpoint.
    #[arg(long)]
    pub meanflow: PathBuf,
    /// Flow-matching baseline checkpoint (ODE-solved).
    #[arg(long)]
    pub baseline: PathBuf,
    /// Dataset with the scenes to benchmark on (JSON-lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output table path (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Timing repetitions per method; the median is reported (minimum 5).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Number of scenes to run (defaults to min(32, dataset size)).
    #[arg(long)]
    pub n_scenes: Option<usize>,
    /// Master seed (overrides FLOWPLAN_SEED and the checkpoint's config).
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &Args) -> Result<()> {
    anyhow::ensure!(args.reps >= 5, "--reps must be at least 5 for a stable median");
    let one_step = load_checkpoint(&args.meanflow)
        .with_context(|| format!("loading checkpoint {}", args.meanflow.display()))?;
    let baseline = load_checkpoint(&args.baseline)
        .with_context(|| format!("loading checkpoint {}", args.baseline.display()))?;
    anyhow::ensure!(
        one_step.kind == ModelKind::MeanFlow,
        "--meanflow checkpoint is not a one-step model"
    );
    anyhow::ensure!(
        baseline.kind == ModelKind::FmBaseline,
        "--baseline checkpoint is not a flow-matching baseline"
    );

    let mut cfg = one_step.config.clone();
    cfg.seed = util::resolve_seed(args.seed, cfg.seed)?;
    let data = load_dataset(&args.dataset, cfg.dataset.t_f, cfg.dataset.dt)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    anyhow::ensure!(!data.is_empty(), "dataset has no scenes");
    let n = args.n_scenes.unwrap_or(32).min(data.len());
    anyhow::ensure!(n >= 1, "--n-scenes must be at least 1");

    let grid = [
        SolverConfig { method: SolverMethod::Euler, n_steps: 1 },
        SolverConfig { method: SolverMethod::Euler, n_steps: 5 },
        SolverConfig { method: SolverMethod::Heun, n_steps: 5 },
    ];
    let rows = compare_nfe(&one_step, &baseline, &data[..n], &grid, args.reps, cfg.seed)?;

    let mut csv = String::from("method,nfe,median_ms_per_scene,mean_min_l2,energy_distance\n");
    println!(
        "{:<12} {:>4} {:>18} {:>12} {:>16}",
        "method", "nfe", "median ms/scene", "min L2 (m)", "energy distance"
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.method, row.nfe, row.median_ms_per_scene, row.mean_min_l2, row.energy_distance
        ));
        println!(
            "{:<12} {:>4} {:>18.3} {:>12.4} {:>16.4}",
            row.method, row.nfe, row.median_ms_per_scene, row.mean_min_l2, row.energy_distance
        );
    }
    util::write_atomic(&args.out, &csv)?;
    util::write_resolved_config(&args.out, &cfg)?;
    println!("wrote {} ({} scenes, {} reps)", args.out.display(), n, args.reps);
    Ok(())
}
