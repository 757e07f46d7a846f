//! On-disk sampler output: JSON-lines, one record per scene. `sample`
//! writes this format and `eval` reads it back.

use std::path::Path;

use anyhow::{Context, Result};
use flowplan_core::Trajectory;
use serde::{Deserialize, Serialize};

/// One scene's sampler output. Waypoints are ego-frame meters; `fused` and
/// `attention` are present only when the fusion head ran.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scenario_id: String,
    /// One waypoint sequence per proposal (index == prior component unless
    /// `--component` restricted the draw).
    pub proposals: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<Vec<[f64; 2]>>,
    /// Fusion attention over proposals; sums to 1 when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
    /// Velocity-field evaluations per trajectory: 1 for one-step, `n` for
    /// Euler-n, `2n` for Heun-n.
    pub nfe: usize,
}

impl SampleRecord {
    pub fn proposal_trajectories(&self, dt: f64) -> Vec<Trajectory> {
        self.proposals
            .iter()
            .map(|w| Trajectory::new(w.clone(), dt))
            .collect()
    }

    pub fn fused_trajectory(&self, dt: f64) -> Option<Trajectory> {
        self.fused.as_ref().map(|w| Trajectory::new(w.clone(), dt))
    }
}

/// Write records as JSON-lines, atomically.
pub fn save_samples(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut text = String::new();
    for record in records {
        text.push_str(&serde_json::to_string(record).context("serializing sample record")?);
        text.push('\n');
    }
    crate::util::write_atomic(path, &text)
}

/// Read a JSON-lines samples file; the first malformed line fails the load.
pub fn load_samples(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading samples {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("samples {} line {}", path.display(), i + 1))
        })
        .collect()
}
