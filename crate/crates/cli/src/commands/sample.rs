//! `flowplan sample` — draw per-component proposals (plus an optional fused
//! plan) from a trained checkpoint.

use std::path::PathBuf;

use anyhow::{Context, Result};
use flowplan_core::flowbase::{SolverConfig, SolverMethod};
use flowplan_core::checkpoint::load_checkpoint;
use flowplan_core::model::{ScenePlan, SAMPLE_STREAM};
use flowplan_core::rng::{derive_seed, rng_from};
use flowplan_core::synthworld::load_dataset;
use flowplan_core::{ModelKind, PlannerModel, Scenario, Trajectory};

use crate::samples::{save_samples, SampleRecord};
use crate::util;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trained checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset with the scenes to sample (JSON-lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output samples path (JSON-lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes to sample (defaults to the whole dataset).
    #[arg(long)]
    pub n_scenes: Option<usize>,
    /// ODE solver for baseline checkpoints: "euler" or "heun".
    #[arg(long)]
    pub solver: Option<String>,
    /// ODE step count for baseline checkpoints (default 5).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Skip the fusion head; emit proposals only.
    #[arg(long)]
    pub no_arm: bool,
    /// Draw every proposal from this single prior component.
    #[arg(long)]
    pub component: Option<usize>,
    /// Master seed (overrides FLOWPLAN_SEED and the checkpoint's config).
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &Args) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let mut cfg = model.config.clone();
    cfg.seed = util::resolve_seed(args.seed, cfg.seed)?;

    let data = load_dataset(&args.dataset, cfg.dataset.t_f, cfg.dataset.dt)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let n = args.n_scenes.unwrap_or(data.len()).min(data.len());
    let solver = solver_for(&model, args)?;
    let k = model.gmn.k;

    let mut records = Vec::with_capacity(n);
    for (i, scenario) in data.iter().take(n).enumerate() {
        // One derived stream per scene: records are independent of how many
        // scenes run, so truncated runs are prefixes of full ones.
        let mut rng = rng_from(derive_seed(derive_seed(cfg.seed, SAMPLE_STREAM), i as u64));
        let record = match (&solver, args.component) {
            (None, None) => {
                let plan = model.plan_scene(&scenario.scene, &mut rng, !args.no_arm)?;
                plan_record(scenario, plan, 1)
            }
            (None, Some(component)) => {
                let trajs = model.component_draws(&scenario.scene, component, k, &mut rng)?;
                trajectories_record(scenario, &trajs, 1)
            }
            (Some(sv), None) => {
                let (plan, nfe) = model.ode_plan_scene(&scenario.scene, sv, &mut rng)?;
                plan_record(scenario, plan, nfe)
            }
            (Some(sv), Some(component)) => {
                let mut trajs = Vec::with_capacity(k);
                let mut nfe = 0;
                for _ in 0..k {
                    let x0 = model.gmn.sample_component(component, &mut rng)?;
                    let (traj, n) = model.ode_from(&scenario.scene, &x0, sv)?;
                    nfe = n;
                    trajs.push(traj);
                }
                trajectories_record(scenario, &trajs, nfe)
            }
        };
        records.push(record);
    }

    save_samples(&args.out, &records)?;
    util::write_resolved_config(&args.out, &cfg)?;
    println!(
        "sampled {} scenes ({} proposals each) to {}",
        records.len(),
        k,
        args.out.display()
    );
    Ok(())
}

/// The one-step model never integrates an ODE, so solver flags on it are a
/// usage error; the baseline defaults to 5 Euler steps.
fn solver_for(model: &PlannerModel, args: &Args) -> Result<Option<SolverConfig>> {
    match model.kind {
        ModelKind::MeanFlow => {
            if args.solver.is_some() || args.steps.is_some() {
                anyhow::bail!(
                    "--solver/--steps apply to baseline checkpoints only; \
                     this checkpoint is a one-step model"
                );
            }
            Ok(None)
        }
        ModelKind::FmBaseline => {
            let method = match args.solver.as_deref().map(str::to_ascii_lowercase).as_deref() {
                None | Some("euler") => SolverMethod::Euler,
                Some("heun") => SolverMethod::Heun,
                Some(other) => {
                    anyhow::bail!("unknown solver {other:?} (expected \"euler\" or \"heun\")")
                }
            };
            let n_steps = args.steps.unwrap_or(5);
            anyhow::ensure!(n_steps >= 1, "--steps must be at least 1");
            Ok(Some(SolverConfig { method, n_steps }))
        }
    }
}

fn waypoints(trajs: &[Trajectory]) -> Vec<Vec<[f64; 2]>> {
    trajs.iter().map(|t| t.waypoints.clone()).collect()
}

fn plan_record(scenario: &Scenario, plan: ScenePlan, nfe: usize) -> SampleRecord {
    let (fused, attention) = match plan.fused {
        Some(f) => (Some(f.trajectory.waypoints), Some(f.attention)),
        None => (None, None),
    };
    SampleRecord {
        scenario_id: scenario.scenario_id.clone(),
        proposals: waypoints(&plan.proposals),
        fused,
        attention,
        nfe,
    }
}

fn trajectories_record(scenario: &Scenario, trajs: &[Trajectory], nfe: usize) -> SampleRecord {
    SampleRecord {
        scenario_id: scenario.scenario_id.clone(),
        proposals: waypoints(trajs),
        fused: None,
        attention: None,
        nfe,
    }
}
