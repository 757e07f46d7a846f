//! Evaluation kit: geometric primitives and the metric suite (drive score,
//! multimodality measure, mode recall, energy distance).

pub mod geom;
pub mod metrics;

pub use geom::EgoBox;
pub use metrics::{
    drive_score, energy_distance, flatten_waypoints, format_sig4, m_dp, mean_waypoint_l2,
    mode_recall, multimodality_d, EvalConfig, EvalError, ScoreBreakdown,
};
