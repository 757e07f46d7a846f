use thiserror::Error;

use super::geom::{
    derive_headings, disc_intersects_convex, point_in_convex, polyline_length, EgoBox, Point,
};
use crate::synthworld::{Scenario, Trajectory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("multimodality needs at least 2 proposals, got {got}")]
    TooFewProposals { got: usize },
    #[error("sample sets must be non-empty")]
    EmptySampleSet,
    #[error("trajectories must share a waypoint count: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
}

/// Evaluation parameters: ego footprint, grid resolution for the overlap
/// estimator, and the mode-recall radius.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub half_length: f64,
    pub half_width: f64,
    pub grid_resolution: usize,
    pub recall_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            half_length: 2.0,
            half_width: 0.9,
            grid_resolution: 400,
            recall_radius: 0.5,
        }
    }
}

/// Per-trajectory score decomposition. `score` is on a 0–100 scale and is 0
/// whenever a hard constraint (collision, corridor exit) fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    /// No collision with any obstacle disc at any timestep.
    pub nc: bool,
    /// Drivable-area compliance: every box corner inside the corridor.
    pub dac: bool,
    /// Progress: arc length relative to the nearest expert mode, clamped to
    /// `[0, 1]`.
    pub ep: f64,
    pub score: f64,
}

fn boxes_at(waypoints: &[Point], t: usize, cfg: &EvalConfig) -> EgoBox {
    // headings derived once per call site in hot paths; here per use for
    // clarity — trajectories are 8 points.
    let headings = derive_headings(waypoints);
    EgoBox::new(waypoints[t], headings[t], cfg.half_length, cfg.half_width)
}

/// Mean per-waypoint Euclidean distance between two equal-length
/// trajectories.
pub fn mean_waypoint_l2(a: &Trajectory, b: &Trajectory) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().max(1) as f64;
    a.waypoints
        .iter()
        .zip(&b.waypoints)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .sum::<f64>()
        / n
}

/// Multimodality of a proposal set: `1 − mean_t IoU` of the K oriented ego
/// boxes at each timestep.
///
/// Intersection-over-union of K rotated rectangles has no cheap exact form,
/// so both the ∩ and ∪ areas are estimated on the same fixed grid over the
/// boxes' bounding envelope; using one estimator for both makes the ratio
/// exact in the all-identical case (IoU = 1, D = 0) and cancels
/// discretization bias to first order elsewhere.
pub fn multimodality_d(proposals: &[Trajectory], cfg: &EvalConfig) -> Result<f64, EvalError> {
    if proposals.len() < 2 {
        return Err(EvalError::TooFewProposals {
            got: proposals.len(),
        });
    }
    let t_f = proposals[0].len();
    for p in proposals {
        if p.len() != t_f {
            return Err(EvalError::LengthMismatch {
                lhs: t_f,
                rhs: p.len(),
            });
        }
    }
    let res = cfg.grid_resolution.max(2);
    let corner_sets: Vec<Vec<[Point; 4]>> = proposals
        .iter()
        .map(|p| {
            let headings = derive_headings(&p.waypoints);
            (0..t_f)
                .map(|t| {
                    EgoBox::new(
                        p.waypoints[t],
                        headings[t],
                        cfg.half_length,
                        cfg.half_width,
                    )
                    .corners()
                })
                .collect()
        })
        .collect();

    let mut iou_sum = 0.0;
    for t in 0..t_f {
        let boxes: Vec<&[Point; 4]> = corner_sets.iter().map(|c| &c[t]).collect();
        let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for b in &boxes {
            for p in *b {
                x_lo = x_lo.min(p[0]);
                x_hi = x_hi.max(p[0]);
                y_lo = y_lo.min(p[1]);
                y_hi = y_hi.max(p[1]);
            }
        }
        let dx = (x_hi - x_lo) / res as f64;
        let dy = (y_hi - y_lo) / res as f64;
        let mut n_any = 0u64;
        let mut n_all = 0u64;
        for i in 0..res {
            let x = x_lo + (i as f64 + 0.5) * dx;
            for j in 0..res {
                let y = y_lo + (j as f64 + 0.5) * dy;
                let mut any = false;
                let mut all = true;
                for b in &boxes {
                    if point_in_convex([x, y], *b) {
                        any = true;
                    } else {
                        all = false;
                    }
                }
                n_any += any as u64;
                n_all += all as u64;
            }
        }
        // n_any = 0 only if every box degenerated below cell size; treat as
        // fully coincident.
        let iou = if n_any == 0 {
            1.0
        } else {
            n_all as f64 / n_any as f64
        };
        iou_sum += iou;
    }
    Ok((1.0 - iou_sum / t_f as f64).clamp(0.0, 1.0))
}

/// Composite multimodality × drive-score product. `score` is the 0–100
/// drive score (the PDMS analogue of this artifact — outputs that surface
/// this metric label the substitution).
pub fn m_dp(d: f64, score: f64) -> f64 {
    d * score
}

/// Format a metric to 4 significant digits for reporting (e.g. `22.07`,
/// `26.70`, `0.2500`).
pub fn format_sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.3}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (3 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Score one trajectory against its scenario: no-collision and
/// corridor-compliance gates, then progress along the nearest expert mode.
pub fn drive_score(traj: &Trajectory, scenario: &Scenario, cfg: &EvalConfig) -> ScoreBreakdown {
    let mut nc = true;
    let mut dac = true;
    for t in 0..traj.len() {
        let corners = boxes_at(&traj.waypoints, t, cfg).corners();
        if corners
            .iter()
            .any(|&c| !point_in_convex(c, &scenario.scene.corridor))
        {
            dac = false;
        }
        for obs in &scenario.scene.obstacles {
            if disc_intersects_convex(obs.center, obs.radius, &corners) {
                nc = false;
            }
        }
    }
    // progress against the nearest expert so alternative valid modes are not
    // penalized
    let nearest = scenario
        .experts
        .iter()
        .map(|e| mean_waypoint_l2(traj, e))
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
        .map(|(i, _)| &scenario.experts[i])
        .expect("scenarios carry at least one expert");
    let expert_len = polyline_length(&nearest.with_origin());
    let ep = if expert_len > 0.0 {
        (polyline_length(&traj.with_origin()) / expert_len).clamp(0.0, 1.0)
    } else {
        1.0 // stationary expert: any stationary plan is full progress
    };
    let score = if nc && dac { ep * 100.0 } else { 0.0 };
    ScoreBreakdown { nc, dac, ep, score }
}

/// Fraction of expert modes covered by at least one proposal within
/// `radius` (mean per-waypoint L2).
pub fn mode_recall(proposals: &[Trajectory], experts: &[Trajectory], radius: f64) -> f64 {
    assert!(radius > 0.0, "recall radius must be positive");
    if experts.is_empty() {
        return 1.0;
    }
    let covered = experts
        .iter()
        .filter(|e| {
            proposals
                .iter()
                .any(|p| mean_waypoint_l2(p, e) <= radius)
        })
        .count();
    covered as f64 / experts.len() as f64
}

/// Energy distance between two sample sets of flattened trajectory vectors:
/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` over all ordered pairs (V-statistic, so
/// identical multisets give exactly 0). Clamped at 0 against rounding.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptySampleSet);
    }
    let dim = a[0].len();
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(EvalError::LengthMismatch {
                lhs: dim,
                rhs: v.len(),
            });
        }
    }
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let mean_cross = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        let mut sum = 0.0;
        for x in xs {
            for y in ys {
                sum += dist(x, y);
            }
        }
        sum / (xs.len() * ys.len()) as f64
    };
    let ed = 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b);
    Ok(ed.max(0.0))
}

/// Flatten a trajectory to the vector form used by distributional metrics.
pub fn flatten_waypoints(t: &Trajectory) -> Vec<f64> {
    t.waypoints.iter().flatten().copied().collect()
}
