//! Wire protocol for an out-of-process planner. The request carries the
//! occupancy grid, object position, goal and both agents' views; the response
//! is a bare anchor list which must pass the same feasibility and sequence
//! checks as the internal pipeline before it is accepted.

use super::{
    feasibility_filter, plan_for_state, AnchorSequence, CandidateProposal, CognitionConfig,
};
use crate::geometry::{Pose2, Vec2};
use crate::grid::{GridSpec, OccupancyGrid};
use crate::scenario::Scenario;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;
use thiserror::Error;

pub const PLANNER_SCHEMA: &str = "planner_v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("planner timed out after {0:?}")]
    Timeout(Duration),
    #[error("planner schema violation: {0}")]
    Schema(String),
    #[error("planner invariant violation: {0}")]
    Invariant(String),
    #[error("planner transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    #[serde(rename = "M")]
    pub m: usize,
    pub resolution: f64,
    pub origin: [f64; 2],
    /// Row-major occupancy, '1' = occupied.
    pub cells: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalPayload {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPayload {
    pub pos: [f64; 2],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRequest {
    pub schema: String,
    pub grid: GridPayload,
    pub object_pos: [f64; 2],
    pub goal: GoalPayload,
    pub views: Vec<ViewPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerResponse {
    pub anchors: Vec<[f64; 2]>,
}

impl PlannerRequest {
    pub fn new(scenario: &Scenario, grid: &OccupancyGrid, object_pos: Vec2, views: [Pose2; 2]) -> Self {
        Self {
            schema: PLANNER_SCHEMA.into(),
            grid: GridPayload {
                m: grid.spec.m,
                resolution: grid.spec.resolution,
                origin: [grid.spec.origin.x, grid.spec.origin.y],
                cells: grid.to_bitstring(),
            },
            object_pos: [object_pos.x, object_pos.y],
            goal: GoalPayload {
                center: [scenario.goal.center.x, scenario.goal.center.y],
                radius: scenario.goal.radius,
            },
            views: views
                .iter()
                .map(|v| ViewPayload {
                    pos: [v.x, v.y],
                    yaw: v.heading,
                })
                .collect(),
        }
    }

    pub fn decode_grid(&self) -> Option<OccupancyGrid> {
        let spec = GridSpec {
            origin: Vec2::new(self.grid.origin[0], self.grid.origin[1]),
            resolution: self.grid.resolution,
            m: self.grid.m,
        };
        OccupancyGrid::from_bitstring(spec, &self.grid.cells)
    }
}

/// Anything that can answer a planner request.
pub trait ExternalPlanner {
    fn plan(&self, request: &PlannerRequest) -> Result<PlannerResponse, AdapterError>;
}

/// Runs a program per request: the request JSON goes to stdin, the response
/// JSON is read from stdout.
#[derive(Debug, Clone)]
pub struct SubprocessPlanner {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl SubprocessPlanner {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            timeout: Duration::from_secs(10),
        }
    }
}

impl ExternalPlanner for SubprocessPlanner {
    fn plan(&self, request: &PlannerRequest) -> Result<PlannerResponse, AdapterError> {
        let body = serde_json::to_vec(request).map_err(|e| AdapterError::Schema(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| AdapterError::Transport(e.to_string()))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            // a planner that never reads stdin must not block us
            let _ = stdin.write_all(&body);
            drop(stdin);
            let mut out = Vec::new();
            let r = stdout.read_to_end(&mut out).map(|_| out);
            let _ = tx.send(r);
        });
        let out = match rx.recv_timeout(self.timeout) {
            Ok(r) => r.map_err(|e| AdapterError::Transport(e.to_string()))?,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(AdapterError::Timeout(self.timeout));
            }
        };
        let _ = child.wait();
        serde_json::from_slice(&out).map_err(|e| AdapterError::Schema(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PlanSource {
    Internal,
    External,
    Fallback { reason: String },
}

/// Checks an externally supplied anchor list with the same gates as the
/// internal pipeline. Filtering must leave the list untouched.
fn accept(
    response: &PlannerResponse,
    scenario: &Scenario,
    grid: &OccupancyGrid,
    object_pos: Vec2,
    cfg: &CognitionConfig,
) -> Result<AnchorSequence, AdapterError> {
    let anchors: Vec<Vec2> = response.anchors.iter().map(|a| Vec2::new(a[0], a[1])).collect();
    if anchors.is_empty() {
        return Err(AdapterError::Invariant("empty anchor list".into()));
    }
    if anchors.iter().any(|a| !a.is_finite()) {
        return Err(AdapterError::Schema("non-finite anchor".into()));
    }
    let proposal = CandidateProposal {
        agent_idx: 0,
        anchors: anchors.clone(),
        visibility_mask: vec![true; grid.spec.len()],
        scores: vec![0.0; anchors.len()],
        route: std::iter::once(object_pos).chain(anchors.iter().copied()).collect(),
    };
    let walls = scenario.segments();
    for emb in &scenario.embodiments {
        let f = feasibility_filter(&proposal, grid, &walls, scenario, emb, cfg)
            .map_err(|e| AdapterError::Invariant(e.to_string()))?;
        if f.anchors != proposal.anchors {
            return Err(AdapterError::Invariant("anchor violates clearance".into()));
        }
    }
    let seq = AnchorSequence {
        anchors,
        spacing: cfg.spacing,
    };
    seq.validate(grid, &scenario.goal)
        .map_err(|e| AdapterError::Invariant(e.to_string()))?;
    Ok(seq)
}

/// Asks the external planner first; any error falls back to the internal
/// propose + consensus pipeline with a logged warning.
pub fn plan_with_external(
    scenario: &Scenario,
    grid: &OccupancyGrid,
    object_pos: Vec2,
    views: [Pose2; 2],
    cfg: &CognitionConfig,
    planner: Option<&dyn ExternalPlanner>,
) -> Result<(AnchorSequence, PlanSource), super::CognitionError> {
    let Some(planner) = planner else {
        return plan_for_state(scenario, grid, object_pos, views, cfg).map(|s| (s, PlanSource::Internal));
    };
    let request = PlannerRequest::new(scenario, grid, object_pos, views);
    let reason = match planner
        .plan(&request)
        .and_then(|r| accept(&r, scenario, grid, object_pos, cfg))
    {
        Ok(seq) => return Ok((seq, PlanSource::External)),
        Err(e) => e.to_string(),
    };
    log::warn!("external planner rejected, using internal plan: {reason}");
    plan_for_state(scenario, grid, object_pos, views, cfg).map(|s| (s, PlanSource::Fallback { reason }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cognition::plan_scenario;
    use crate::grid::rasterize;
    use crate::scenario::builtin;

    struct Fixed(Vec<[f64; 2]>);

    impl ExternalPlanner for Fixed {
        fn plan(&self, r: &PlannerRequest) -> Result<PlannerResponse, AdapterError> {
            assert_eq!(r.schema, PLANNER_SCHEMA);
            assert!(r.decode_grid().is_some());
            Ok(PlannerResponse {
                anchors: self.0.clone(),
            })
        }
    }

    fn setup(id: &str) -> (Scenario, OccupancyGrid, [Pose2; 2], CognitionConfig) {
        let sc = builtin(id).unwrap();
        let cfg = CognitionConfig::default();
        let grid = rasterize(&sc, cfg.grid_cells);
        let views = [0, 1].map(|i| {
            let st = sc.stations[i];
            let p = sc.start_pose.apply(st.offset);
            Pose2::new(p.x, p.y, sc.start_pose.heading + st.yaw)
        });
        (sc, grid, views, cfg)
    }

    #[test]
    fn echo_planner_matches_internal() {
        for id in ["corridor", "S21", "S22", "S33"] {
            let (sc, grid, views, cfg) = setup(id);
            let internal = plan_scenario(&sc, &cfg).unwrap();
            let echo = Fixed(internal.anchors.iter().map(|a| [a.x, a.y]).collect());
            let (seq, src) =
                plan_with_external(&sc, &grid, sc.start_pose.position(), views, &cfg, Some(&echo)).unwrap();
            assert_eq!(src, PlanSource::External, "{id}");
            assert_eq!(seq, internal);
        }
    }

    #[test]
    fn anchor_in_wall_is_rejected() {
        let (sc, grid, views, cfg) = setup("S21");
        let internal = plan_scenario(&sc, &cfg).unwrap();
        let mut anchors: Vec<[f64; 2]> = internal.anchors.iter().map(|a| [a.x, a.y]).collect();
        // the gate post at x = 3 sits on the wall line
        anchors.insert(1, [3.0, 2.0]);
        let (seq, src) = plan_with_external(
            &sc,
            &grid,
            sc.start_pose.position(),
            views,
            &cfg,
            Some(&Fixed(anchors)),
        )
        .unwrap();
        assert!(matches!(src, PlanSource::Fallback { .. }));
        assert_eq!(seq, internal);
    }

    #[test]
    fn subprocess_timeout_falls_back() {
        let (sc, grid, views, cfg) = setup("corridor");
        let mut p = SubprocessPlanner::new("sleep", vec!["5".into()]);
        p.timeout = Duration::from_millis(200);
        let t0 = std::time::Instant::now();
        let (seq, src) = plan_with_external(&sc, &grid, sc.start_pose.position(), views, &cfg, Some(&p)).unwrap();
        assert!(t0.elapsed() < Duration::from_secs(3));
        match src {
            PlanSource::Fallback { reason } => assert!(reason.contains("timed out"), "{reason}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(seq, plan_scenario(&sc, &cfg).unwrap());
    }

    #[test]
    fn subprocess_round_trip() {
        let (sc, grid, views, cfg) = setup("corridor");
        let internal = plan_scenario(&sc, &cfg).unwrap();
        let body = serde_json::to_string(&PlannerResponse {
            anchors: internal.anchors.iter().map(|a| [a.x, a.y]).collect(),
        })
        .unwrap();
        let p = SubprocessPlanner::new("sh", vec!["-c".into(), format!("cat > /dev/null; echo '{body}'")]);
        let (seq, src) = plan_with_external(&sc, &grid, sc.start_pose.position(), views, &cfg, Some(&p)).unwrap();
        assert_eq!(src, PlanSource::External);
        assert_eq!(seq, internal);
        let bad = SubprocessPlanner::new("sh", vec!["-c".into(), "echo '{\"waypoints\": []}'".into()]);
        let (_, src) = plan_with_external(&sc, &grid, sc.start_pose.position(), views, &cfg, Some(&bad)).unwrap();
        assert!(matches!(src, PlanSource::Fallback { ref reason } if reason.contains("schema")), "{src:?}");
    }
}
