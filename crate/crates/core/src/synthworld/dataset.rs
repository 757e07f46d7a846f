use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Command, DataError, Obstacle, SceneContext, Scenario, Trajectory};

// Wire format: one JSON record per line. Field layout is part of the
// external interface — obstacles as [x, y, r] triples, corridor and
// waypoints as [x, y] pairs. serde_json emits f64 with full round-trip
// precision, so save → load is exact.

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    ego_speed: f64,
    ego_accel: f64,
    command: Command,
    obstacles: Vec<[f64; 3]>,
    corridor: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioRecord {
    scenario_id: String,
    scene: SceneRecord,
    experts: Vec<Vec<[f64; 2]>>,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        ScenarioRecord {
            scenario_id: s.scenario_id.clone(),
            scene: SceneRecord {
                ego_speed: s.scene.ego_speed,
                ego_accel: s.scene.ego_accel,
                command: s.scene.command,
                obstacles: s
                    .scene
                    .obstacles
                    .iter()
                    .map(|o| [o.center[0], o.center[1], o.radius])
                    .collect(),
                corridor: s.scene.corridor.clone(),
            },
            experts: s.experts.iter().map(|e| e.waypoints.clone()).collect(),
        }
    }
}

/// Write scenarios as JSON-lines, atomically (sibling temp file + rename).
/// An empty list produces a valid empty file.
pub fn save_dataset(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "dataset".into());
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for s in scenarios {
            let record = ScenarioRecord::from(s);
            serde_json::to_writer(&mut w, &record).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a JSON-lines dataset. `t_f` and `dt` come from configuration (the
/// wire format stores geometry only); every record is structurally
/// validated, and the first malformed line fails the whole load — no partial
/// datasets.
pub fn load_dataset(
    path: impl AsRef<Path>,
    t_f: usize,
    dt: f64,
) -> Result<Vec<Scenario>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut scenarios = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScenarioRecord =
            serde_json::from_str(&line).map_err(|source| DataError::Parse {
                line: line_no,
                source,
            })?;
        scenarios.push(record_to_scenario(record, line_no, t_f, dt)?);
    }
    Ok(scenarios)
}

fn record_to_scenario(
    record: ScenarioRecord,
    line: usize,
    t_f: usize,
    dt: f64,
) -> Result<Scenario, DataError> {
    let field_err = |field: &'static str, reason: String| DataError::Field {
        line,
        field,
        reason,
    };
    let finite2 = |p: &[f64; 2]| p.iter().all(|v| v.is_finite());

    for (field, value) in [
        ("ego_speed", record.scene.ego_speed),
        ("ego_accel", record.scene.ego_accel),
    ] {
        if !value.is_finite() {
            return Err(field_err(field, format!("non-finite value {value}")));
        }
    }
    let mut obstacles = Vec::with_capacity(record.scene.obstacles.len());
    for o in &record.scene.obstacles {
        if !o.iter().all(|v| v.is_finite()) {
            return Err(field_err("obstacles", "non-finite entry".into()));
        }
        if o[2] <= 0.0 {
            return Err(field_err(
                "obstacles",
                format!("radius {} must be positive", o[2]),
            ));
        }
        obstacles.push(Obstacle {
            center: [o[0], o[1]],
            radius: o[2],
        });
    }
    if record.scene.corridor.len() < 3 {
        return Err(field_err(
            "corridor",
            format!("{} vertices; a polygon needs 3", record.scene.corridor.len()),
        ));
    }
    if !record.scene.corridor.iter().all(finite2) {
        return Err(field_err("corridor", "non-finite vertex".into()));
    }
    if record.experts.is_empty() {
        return Err(field_err("experts", "no expert trajectories".into()));
    }
    let mut experts = Vec::with_capacity(record.experts.len());
    for (i, e) in record.experts.iter().enumerate() {
        if e.len() != t_f {
            return Err(field_err(
                "experts",
                format!("expert {i} has {} waypoints, expected {t_f}", e.len()),
            ));
        }
        if !e.iter().all(finite2) {
            return Err(field_err("experts", format!("expert {i} has non-finite waypoint")));
        }
        experts.push(Trajectory::new(e.clone(), dt));
    }
    Ok(Scenario {
        scenario_id: record.scenario_id,
        scene: SceneContext {
            ego_speed: record.scene.ego_speed,
            ego_accel: record.scene.ego_accel,
            command: record.scene.command,
            obstacles,
            corridor: record.scene.corridor,
        },
        experts,
    })
}
