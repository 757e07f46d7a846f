//! Synthetic multimodal driving scenarios.
//!
//! Each [`Scenario`] is a scene (ego state, obstacle discs, a convex
//! drivable corridor) plus one or more expert trajectories — one per feasible
//! driving mode. Scenario families:
//!
//! * `fork` — a central obstacle forces a left/right choice: two experts.
//! * `lane_change` — keep lane or change lane: two experts.
//! * `obstacle_slalom` — weave through staggered obstacles: one expert.
//! * `stop_go` — straight-line speed profile from the ego's visible speed
//!   and acceleration: one expert, fully determined by the scene.
//!
//! Everything is deterministic given a seed, and every emitted expert
//! passes the same geometric checks evaluation uses (inside corridor, clear
//! of obstacles).

mod dataset;
mod encode;
mod generate;

pub use dataset::{load_dataset, save_dataset};
pub use encode::{scene_features, ContextEncoder, EGO_FEATURES, OBSTACLE_FEATURES};
pub use generate::{generate_dataset, validate_scenario, FamilyMix, GenConfig, GenReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A planned or expert path: `t_f` planar waypoints in the ego frame,
/// `dt` seconds apart, starting after the first step of motion (the ego sits
/// at the origin at time zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>, dt: f64) -> Self {
        Self { waypoints, dt }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Waypoints with the ego origin prepended — the polyline actually
    /// driven, used for deltas, arc length, and headings.
    pub fn with_origin(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.waypoints.len() + 1);
        pts.push([0.0, 0.0]);
        pts.extend_from_slice(&self.waypoints);
        pts
    }
}

/// High-level routing hint given to the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Straight,
    Left,
    Right,
}

impl Command {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Command::Straight => [1.0, 0.0, 0.0],
            Command::Left => [0.0, 1.0, 0.0],
            Command::Right => [0.0, 0.0, 1.0],
        }
    }
}

/// A static circular obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Scene observation: what the planner sees. The ego starts at the origin
/// heading +x; the corridor is a convex CCW polygon containing the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    pub ego_speed: f64,
    pub ego_accel: f64,
    pub command: Command,
    pub obstacles: Vec<Obstacle>,
    pub corridor: Vec<[f64; 2]>,
}

/// A scene plus every feasible expert mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub scenario_id: String,
    pub scene: SceneContext,
    pub experts: Vec<Trajectory>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: field '{field}': {reason}")]
    Field {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("family mix needs at least one positive weight")]
    EmptyMix,
    #[error("n_scenarios must be positive")]
    EmptyRequest,
    #[error("scenario {id}: {reason}")]
    InvalidScenario { id: String, reason: String },
    #[error(transparent)]
    Diff(#[from] crate::diffkit::DiffError),
}
