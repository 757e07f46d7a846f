use super::{Command, DataError, Obstacle, SceneContext, Scenario, Trajectory};
use crate::evalkit::geom::{
    disc_intersects_convex, is_convex_ccw, oriented_box, point_in_convex,
};
use crate::rng::{derive_seed, rng_from, uniform, Rng};
use rand::Rng as _;

/// Relative weights over scenario families. Zero removes a family.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FamilyMix {
    pub fork: f64,
    pub lane_change: f64,
    pub obstacle_slalom: f64,
    pub stop_go: f64,
}

impl Default for FamilyMix {
    fn default() -> Self {
        Self {
            fork: 1.0,
            lane_change: 1.0,
            obstacle_slalom: 1.0,
            stop_go: 1.0,
        }
    }
}

impl FamilyMix {
    pub fn only_fork() -> Self {
        Self {
            fork: 1.0,
            lane_change: 0.0,
            obstacle_slalom: 0.0,
            stop_go: 0.0,
        }
    }

    pub fn only_stop_go() -> Self {
        Self {
            fork: 0.0,
            lane_change: 0.0,
            obstacle_slalom: 0.0,
            stop_go: 1.0,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [self.fork, self.lane_change, self.obstacle_slalom, self.stop_go]
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_scenarios: usize,
    pub family_mix: FamilyMix,
    /// Waypoints per trajectory.
    pub t_f: usize,
    /// Seconds between waypoints.
    pub dt: f64,
    /// Obstacle slots in the encoded context; scenes never carry more.
    pub n_obs: usize,
    /// Expert speed range sampled per scenario.
    pub v_min: f64,
    pub v_max: f64,
    /// Physical cap used for the consecutive-waypoint distance check.
    pub v_cap: f64,
    /// Ego footprint used for validity checks (same as evaluation).
    pub half_length: f64,
    pub half_width: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 200,
            family_mix: FamilyMix::default(),
            t_f: 8,
            dt: 0.5,
            n_obs: 4,
            v_min: 4.0,
            v_max: 12.0,
            v_cap: 15.0,
            half_length: 2.0,
            half_width: 0.9,
        }
    }
}

/// Result of a generation run: the scenarios plus how many draws were
/// discarded after failing geometric validation.
#[derive(Debug)]
pub struct GenReport {
    pub scenarios: Vec<Scenario>,
    pub skipped: usize,
}

const MAX_RETRIES: usize = 16;

/// Generate `cfg.n_scenarios` scenarios deterministically from `seed`. Each
/// scenario draws from its own derived stream, so the result is a pure
/// function of `(seed, cfg)` regardless of evaluation order.
pub fn generate_dataset(cfg: &GenConfig, seed: u64) -> Result<GenReport, DataError> {
    if cfg.n_scenarios == 0 {
        return Err(DataError::EmptyRequest);
    }
    let w = cfg.family_mix.weights();
    if w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(DataError::EmptyMix);
    }
    let mut scenarios = Vec::with_capacity(cfg.n_scenarios);
    let mut skipped = 0;
    for i in 0..cfg.n_scenarios {
        let mut rng = rng_from(derive_seed(seed, i as u64));
        let family = pick_family(&mut rng, &w);
        let mut accepted = None;
        for _ in 0..MAX_RETRIES {
            let scenario = build_family(family, cfg, i, &mut rng);
            if validate_scenario(&scenario, cfg).is_ok() {
                accepted = Some(scenario);
                break;
            }
        }
        match accepted {
            Some(s) => scenarios.push(s),
            None => skipped += 1,
        }
    }
    Ok(GenReport { scenarios, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Fork,
    LaneChange,
    ObstacleSlalom,
    StopGo,
}

impl Family {
    fn name(self) -> &'static str {
        match self {
            Family::Fork => "fork",
            Family::LaneChange => "lane_change",
            Family::ObstacleSlalom => "obstacle_slalom",
            Family::StopGo => "stop_go",
        }
    }
}

fn pick_family(rng: &mut Rng, weights: &[f64; 4]) -> Family {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let families = [
        Family::Fork,
        Family::LaneChange,
        Family::ObstacleSlalom,
        Family::StopGo,
    ];
    for (f, &w) in families.iter().zip(weights) {
        if u < w {
            return *f;
        }
        u -= w;
    }
    Family::StopGo
}

fn build_family(family: Family, cfg: &GenConfig, index: usize, rng: &mut Rng) -> Scenario {
    let scenario_id = format!("{}-{index:05}", family.name());
    let (scene, experts) = match family {
        Family::Fork => build_fork(cfg, rng),
        Family::LaneChange => build_lane_change(cfg, rng),
        Family::ObstacleSlalom => build_slalom(cfg, rng),
        Family::StopGo => build_stop_go(cfg, rng),
    };
    Scenario {
        scenario_id,
        scene,
        experts,
    }
}

/// Constant-speed waypoints along a lateral profile `y(u)`, `u = x / length`.
fn profile_trajectory(
    cfg: &GenConfig,
    v0: f64,
    length: f64,
    y_of_u: impl Fn(f64) -> f64,
) -> Trajectory {
    let waypoints = (1..=cfg.t_f)
        .map(|i| {
            let x = v0 * cfg.dt * i as f64;
            [x, y_of_u((x / length).clamp(0.0, 1.0))]
        })
        .collect();
    Trajectory::new(waypoints, cfg.dt)
}

fn rect_corridor(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Vec<[f64; 2]> {
    vec![[x_lo, y_lo], [x_hi, y_lo], [x_hi, y_hi], [x_lo, y_hi]]
}

/// Central obstacle with four distinct expert lines around it: an early or a
/// late apex on either side. A two-parameter (side × timing) maneuver family
/// gives genuinely multimodal proposals rather than a single mirrored pair.
fn build_fork(cfg: &GenConfig, rng: &mut Rng) -> (SceneContext, Vec<Trajectory>) {
    let v0 = uniform(rng, (cfg.v_min + 2.0).min(cfg.v_max), cfg.v_max);
    let length = v0 * cfg.dt * cfg.t_f as f64;
    let radius = uniform(rng, 0.5, 0.7);
    let y_off = uniform(rng, 3.0, 3.5);
    let obstacle = Obstacle {
        center: [0.5 * length, 0.0],
        radius,
    };
    // sin² bumps over a 0.8-long window: the early apex peaks at u=0.4, the
    // late one at u=0.6. Both clear the mid-corridor obstacle while staying
    // a vehicle-width apart through the approach and exit phases.
    let bump = |u: f64| (std::f64::consts::PI * u.clamp(0.0, 1.0)).sin().powi(2);
    let early = move |u: f64| bump(u / 0.8);
    let late = move |u: f64| bump((u - 0.2) / 0.8);
    let experts = vec![
        profile_trajectory(cfg, v0, length, move |u| y_off * early(u)),
        profile_trajectory(cfg, v0, length, move |u| y_off * late(u)),
        profile_trajectory(cfg, v0, length, move |u| -y_off * early(u)),
        profile_trajectory(cfg, v0, length, move |u| -y_off * late(u)),
    ];
    let scene = SceneContext {
        ego_speed: v0,
        ego_accel: 0.0,
        command: Command::Straight,
        obstacles: vec![obstacle],
        corridor: rect_corridor(-4.0, length + 4.0, -(y_off + 2.8), y_off + 2.8),
    };
    (scene, experts)
}

/// Two modes sharing one scene: keep the lane, or change to the commanded
/// side.
fn build_lane_change(cfg: &GenConfig, rng: &mut Rng) -> (SceneContext, Vec<Trajectory>) {
    let v0 = uniform(rng, cfg.v_min, cfg.v_max);
    let length = v0 * cfg.dt * cfg.t_f as f64;
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let y_off = uniform(rng, 2.8, 3.6);
    let smooth = |u: f64| u * u * (3.0 - 2.0 * u);
    let keep = profile_trajectory(cfg, v0, length, |_| 0.0);
    let change = profile_trajectory(cfg, v0, length, move |u| side * y_off * smooth(u));
    let (y_lo, y_hi) = if side > 0.0 {
        (-2.8, y_off + 2.8)
    } else {
        (-(y_off + 2.8), 2.8)
    };
    let scene = SceneContext {
        ego_speed: v0,
        ego_accel: 0.0,
        command: if side > 0.0 { Command::Left } else { Command::Right },
        obstacles: Vec::new(),
        corridor: rect_corridor(-4.0, length + 4.0, y_lo, y_hi),
    };
    (scene, vec![keep, change])
}

/// Staggered obstacles on alternating sides; a single expert weaves through.
fn build_slalom(cfg: &GenConfig, rng: &mut Rng) -> (SceneContext, Vec<Trajectory>) {
    let v0 = uniform(rng, (cfg.v_min + 2.0).min(cfg.v_max), cfg.v_max);
    let length = v0 * cfg.dt * cfg.t_f as f64;
    let count = 2 + (rng.random::<u32>() % 2) as usize; // 2 or 3
    let first_side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let offset = uniform(rng, 1.3, 1.7);
    let swing = uniform(rng, 0.9, 1.3);

    let mut obstacles = Vec::with_capacity(count);
    // control points the expert passes through, opposite each obstacle
    let mut controls: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    for j in 0..count {
        let side = first_side * if j % 2 == 0 { 1.0 } else { -1.0 };
        let x = length * (0.30 + 0.50 * j as f64 / (count - 1) as f64);
        obstacles.push(Obstacle {
            center: [x, side * offset],
            radius: uniform(rng, 0.5, 0.7),
        });
        controls.push([x, -side * swing]);
    }
    controls.push([length, 0.0]);

    // C¹ path through the controls: cosine easing between consecutive knots
    // (zero slope at each knot).
    let path = move |x: f64| -> f64 {
        let i = match controls.iter().rposition(|c| c[0] <= x) {
            Some(i) if i + 1 < controls.len() => i,
            Some(_) => controls.len() - 2,
            None => 0,
        };
        let (a, b) = (controls[i], controls[i + 1]);
        let u = ((x - a[0]) / (b[0] - a[0])).clamp(0.0, 1.0);
        let ease = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
        a[1] + (b[1] - a[1]) * ease
    };
    let expert = profile_trajectory(cfg, v0, length, move |u| path(u * length));
    let scene = SceneContext {
        ego_speed: v0,
        ego_accel: 0.0,
        command: Command::Straight,
        obstacles,
        corridor: rect_corridor(-4.0, length + 4.0, -4.4, 4.4),
    };
    (scene, vec![expert])
}

/// Straight line whose speed profile is fully determined by the visible
/// `(ego_speed, ego_accel)` — a unimodal family where the context pins the
/// expert down exactly.
fn build_stop_go(cfg: &GenConfig, rng: &mut Rng) -> (SceneContext, Vec<Trajectory>) {
    let v0 = uniform(rng, cfg.v_min, cfg.v_max);
    let v_hi = 0.9 * cfg.v_cap;
    // Keep the end speed strictly inside (0.3, v_hi) so the profile never
    // saturates: every waypoint is then a smooth function of (v0, accel),
    // which keeps the family learnable at this scale while still spanning
    // hard decelerations down to near-stop.
    let horizon = cfg.dt * cfg.t_f as f64;
    let a_lo = -(v0 - 0.3) / horizon;
    let a_hi = (v_hi - 0.3 - v0) / horizon;
    let accel = uniform(rng, a_lo.max(-2.0), a_hi.min(2.0));
    let mut x = 0.0;
    let waypoints = (0..cfg.t_f)
        .map(|i| {
            let v = (v0 + accel * cfg.dt * (i + 1) as f64).clamp(0.0, v_hi);
            x += v * cfg.dt;
            [x, 0.0]
        })
        .collect();
    let scene = SceneContext {
        ego_speed: v0,
        ego_accel: accel,
        command: Command::Straight,
        obstacles: Vec::new(),
        corridor: rect_corridor(-4.0, x + 5.0, -3.5, 3.5),
    };
    (scene, vec![Trajectory::new(waypoints, cfg.dt)])
}

/// The full validity check applied to every emitted scenario — the same
/// geometric predicates evaluation uses. Returns the first failure reason.
pub fn validate_scenario(s: &Scenario, cfg: &GenConfig) -> Result<(), DataError> {
    let fail = |reason: String| {
        Err(DataError::InvalidScenario {
            id: s.scenario_id.clone(),
            reason,
        })
    };
    if s.experts.is_empty() {
        return fail("no expert trajectories".into());
    }
    if s.scene.obstacles.len() > cfg.n_obs {
        return fail(format!(
            "{} obstacles exceed the {} context slots",
            s.scene.obstacles.len(),
            cfg.n_obs
        ));
    }
    if s.scene.obstacles.iter().any(|o| o.radius <= 0.0) {
        return fail("non-positive obstacle radius".into());
    }
    if !is_convex_ccw(&s.scene.corridor) {
        return fail("corridor is not convex CCW".into());
    }
    if !point_in_convex([0.0, 0.0], &s.scene.corridor) {
        return fail("corridor does not contain the origin".into());
    }
    let step_cap = cfg.v_cap * cfg.dt;
    for (ei, expert) in s.experts.iter().enumerate() {
        if expert.len() != cfg.t_f {
            return fail(format!(
                "expert {ei} has {} waypoints, expected {}",
                expert.len(),
                cfg.t_f
            ));
        }
        let pts = expert.with_origin();
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return fail(format!("expert {ei} has non-finite coordinates"));
        }
        for w in pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if d > step_cap + 1e-9 {
                return fail(format!(
                    "expert {ei} step {d:.3} m exceeds cap {step_cap:.3} m"
                ));
            }
        }
        for t in 0..expert.len() {
            let ego = oriented_box(&expert.waypoints, t, cfg.half_length, cfg.half_width);
            let corners = ego.corners();
            if corners
                .iter()
                .any(|&c| !point_in_convex(c, &s.scene.corridor))
            {
                return fail(format!("expert {ei} exits the corridor at step {t}"));
            }
            for (oi, obs) in s.scene.obstacles.iter().enumerate() {
                if disc_intersects_convex(obs.center, obs.radius, &corners) {
                    return fail(format!(
                        "expert {ei} hits obstacle {oi} at step {t}"
                    ));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            n_scenarios: 10,
            ..GenConfig::default()
        };
        let a = generate_dataset(&cfg, 7).unwrap();
        let b = generate_dataset(&cfg, 7).unwrap();
        assert_eq!(a.scenarios, b.scenarios);
        assert_eq!(a.skipped, b.skipped);
        let c = generate_dataset(&cfg, 8).unwrap();
        assert_ne!(a.scenarios, c.scenarios, "different seeds should differ");
    }

    #[test]
    fn fork_only_mix_always_multimodal() {
        let cfg = GenConfig {
            n_scenarios: 40,
            family_mix: FamilyMix::only_fork(),
            ..GenConfig::default()
        };
        let report = generate_dataset(&cfg, 3).unwrap();
        assert!(!report.scenarios.is_empty());
        for s in &report.scenarios {
            assert!(
                s.experts.len() >= 2,
                "{} has {} expert(s)",
                s.scenario_id,
                s.experts.len()
            );
            assert!(s.scenario_id.starts_with("fork-"));
        }
    }

    #[test]
    fn stop_go_expert_is_a_function_of_the_scene() {
        let cfg = GenConfig {
            n_scenarios: 30,
            family_mix: FamilyMix::only_stop_go(),
            ..GenConfig::default()
        };
        let report = generate_dataset(&cfg, 11).unwrap();
        for s in &report.scenarios {
            assert_eq!(s.experts.len(), 1);
            // recompute the expert from (ego_speed, ego_accel) alone
            let v_hi = 0.9 * cfg.v_cap;
            let mut x = 0.0;
            for (i, wp) in s.experts[0].waypoints.iter().enumerate() {
                let v = (s.scene.ego_speed + s.scene.ego_accel * cfg.dt * (i + 1) as f64)
                    .clamp(0.0, v_hi);
                x += v * cfg.dt;
                assert!((wp[0] - x).abs() < 1e-12 && wp[1] == 0.0);
            }
        }
    }

    #[test]
    fn validation_rejects_tampered_scenarios() {
        let cfg = GenConfig {
            n_scenarios: 1,
            family_mix: FamilyMix::only_fork(),
            ..GenConfig::default()
        };
        let mut s = generate_dataset(&cfg, 5).unwrap().scenarios.remove(0);
        assert!(validate_scenario(&s, &cfg).is_ok());
        // park the obstacle on the expert path (leaves step lengths intact)
        let mid = s.experts[0].waypoints.len() / 2;
        s.scene.obstacles[0].center = s.experts[0].waypoints[mid];
        let err = validate_scenario(&s, &cfg).unwrap_err();
        assert!(err.to_string().contains("obstacle"), "got: {err}");
        // oversized teleport trips the per-step distance cap instead
        let mut s2 = generate_dataset(&cfg, 5).unwrap().scenarios.remove(0);
        s2.experts[0].waypoints[mid][1] += 50.0;
        let err2 = validate_scenario(&s2, &cfg).unwrap_err();
        assert!(err2.to_string().contains("exceeds cap"), "got: {err2}");
    }

    #[test]
    fn thousand_scenarios_all_valid_with_few_skips() {
        let cfg = GenConfig {
            n_scenarios: 1000,
            ..GenConfig::default()
        };
        let report = generate_dataset(&cfg, 42).unwrap();
        for s in &report.scenarios {
            validate_scenario(s, &cfg).unwrap_or_else(|e| panic!("{e}"));
        }
        assert!(
            report.skipped <= 10,
            "{} of 1000 scenarios skipped — families are mis-tuned",
            report.skipped
        );
        // all four families actually appear
        for family in ["fork-", "lane_change-", "obstacle_slalom-", "stop_go-"] {
            assert!(
                report
                    .scenarios
                    .iter()
                    .any(|s| s.scenario_id.starts_with(family)),
                "no {family} scenarios generated"
            );
        }
    }

    #[test]
    fn bad_requests_error() {
        let cfg = GenConfig {
            n_scenarios: 0,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg, 1),
            Err(DataError::EmptyRequest)
        ));
        let cfg = GenConfig {
            n_scenarios: 1,
            family_mix: FamilyMix {
                fork: 0.0,
                lane_change: 0.0,
                obstacle_slalom: 0.0,
                stop_go: 0.0,
            },
            ..GenConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg, 1), Err(DataError::EmptyMix)));
    }
}
