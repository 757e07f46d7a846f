//! `flowplan eval` — score sampler output (or the experts themselves)
//! against a dataset: drive score, multimodality, composite product, mode
//! recall, and drivable-area failure counts.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use flowplan_core::evalkit::{drive_score, format_sig4, m_dp, mode_recall, multimodality_d};
use flowplan_core::synthworld::load_dataset;
use flowplan_core::Trajectory;
use serde::Serialize;

use crate::samples::load_samples;
use crate::util;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Samples file from `sample`; omit together with --experts to score
    /// each scenario's expert set instead.
    #[arg(long, required_unless_present = "experts", conflicts_with = "experts")]
    pub samples: Option<PathBuf>,
    /// Dataset the samples were drawn for (JSON-lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output prefix: writes `<out>.csv` (per scene) and `<out>.json`
    /// (aggregate summary).
    #[arg(long)]
    pub out: PathBuf,
    /// Configuration file (JSON); supplies evaluation geometry and the
    /// dataset's horizon/step when not default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Score each scenario's expert set as if it were sampler output.
    #[arg(long)]
    pub experts: bool,
}

/// Aggregate metrics over every evaluated scene.
#[derive(Debug, Serialize)]
struct Summary {
    n_scenes: usize,
    /// Mean scene score: the fused trajectory's drive score where one
    /// exists, otherwise the mean proposal drive score.
    mean_score: f64,
    /// Mean multimodality (non-overlap of the proposal set's swept area).
    mean_d: f64,
    /// `mean_d × mean_score` — quality-diversity product, with the drive
    /// score standing in for a closed-loop driving score.
    m_dp: f64,
    mean_recall_02: f64,
    mean_recall_05: f64,
    /// Scenes where every proposal violates drivable-area compliance.
    scenes_all_dac_zero: usize,
}

/// One scene's proposal set, ready to score.
struct Entry {
    scenario_id: String,
    proposals: Vec<Trajectory>,
    fused: Option<Trajectory>,
}

pub fn run(args: &Args) -> Result<()> {
    let cfg = util::load_config(args.config.as_deref())?;
    let data = load_dataset(&args.dataset, cfg.dataset.t_f, cfg.dataset.dt)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let by_id: HashMap<&str, &flowplan_core::Scenario> =
        data.iter().map(|s| (s.scenario_id.as_str(), s)).collect();

    let entries: Vec<Entry> = if args.experts {
        data.iter()
            .map(|s| Entry {
                scenario_id: s.scenario_id.clone(),
                proposals: s.experts.clone(),
                fused: None,
            })
            .collect()
    } else {
        let path = args.samples.as_ref().expect("clap enforces --samples");
        load_samples(path)?
            .iter()
            .map(|r| Entry {
                scenario_id: r.scenario_id.clone(),
                proposals: r.proposal_trajectories(cfg.dataset.dt),
                fused: r.fused_trajectory(cfg.dataset.dt),
            })
            .collect()
    };
    anyhow::ensure!(!entries.is_empty(), "no scenes to evaluate");

    let mut csv = String::from(
        "scenario_id,score,mean_proposal_score,fused_score,d,recall_02,recall_05,all_dac_zero\n",
    );
    let (mut score_sum, mut d_sum, mut r02_sum, mut r05_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut all_dac_zero_count = 0usize;
    for entry in &entries {
        let scenario = by_id
            .get(entry.scenario_id.as_str())
            .with_context(|| format!("scenario {:?} not in dataset", entry.scenario_id))?;
        anyhow::ensure!(
            !entry.proposals.is_empty(),
            "scenario {:?} has no proposals",
            entry.scenario_id
        );

        let breakdowns: Vec<_> = entry
            .proposals
            .iter()
            .map(|p| drive_score(p, scenario, &cfg.eval))
            .collect();
        let mean_proposal_score =
            breakdowns.iter().map(|b| b.score).sum::<f64>() / breakdowns.len() as f64;
        let fused_score = entry
            .fused
            .as_ref()
            .map(|f| drive_score(f, scenario, &cfg.eval).score);
        let score = fused_score.unwrap_or(mean_proposal_score);
        let d = if entry.proposals.len() >= 2 {
            multimodality_d(&entry.proposals, &cfg.eval)?
        } else {
            0.0
        };
        let r02 = mode_recall(&entry.proposals, &scenario.experts, 0.2);
        let r05 = mode_recall(&entry.proposals, &scenario.experts, 0.5);
        let all_dac_zero = breakdowns.iter().all(|b| !b.dac);

        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            entry.scenario_id,
            score,
            mean_proposal_score,
            fused_score.map_or(String::new(), |s| s.to_string()),
            d,
            r02,
            r05,
            all_dac_zero
        ));
        score_sum += score;
        d_sum += d;
        r02_sum += r02;
        r05_sum += r05;
        all_dac_zero_count += usize::from(all_dac_zero);
    }

    let n = entries.len() as f64;
    let summary = Summary {
        n_scenes: entries.len(),
        mean_score: score_sum / n,
        mean_d: d_sum / n,
        m_dp: m_dp(d_sum / n, score_sum / n),
        mean_recall_02: r02_sum / n,
        mean_recall_05: r05_sum / n,
        scenes_all_dac_zero: all_dac_zero_count,
    };

    let csv_path = util::sibling_with_suffix(&args.out, ".csv");
    let json_path = util::sibling_with_suffix(&args.out, ".json");
    util::write_atomic(&csv_path, &csv)?;
    let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    util::write_atomic(&json_path, &(json + "\n"))?;
    util::write_resolved_config(&args.out, &cfg)?;

    println!(
        "evaluated {} scenes ({} and {})",
        summary.n_scenes,
        csv_path.display(),
        json_path.display()
    );
    println!("  mean drive score   {}", format_sig4(summary.mean_score));
    println!("  mean D             {}", format_sig4(summary.mean_d));
    println!("  M_DP (D x score)   {}", format_sig4(summary.m_dp));
    println!("  mode recall@0.2    {}", format_sig4(summary.mean_recall_02));
    println!("  mode recall@0.5    {}", format_sig4(summary.mean_recall_05));
    println!(
        "  scenes with every proposal off the drivable area: {}",
        summary.scenes_all_dac_zero
    );
    Ok(())
}
