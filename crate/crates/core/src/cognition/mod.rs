//! Anchor generation: per-agent proposals from line-of-sight limited grid
//! views, embodiment feasibility filtering, and a consensus merge producing
//! the shared anchor sequence. An adapter lets an external planner process
//! (for instance one backed by a vision-language model) supply the anchors
//! instead, with the internal pipeline as fallback.

mod adapter;
mod consensus;
mod propose;

pub use adapter::{
    plan_with_external, AdapterError, ExternalPlanner, GridPayload, PlanSource, PlannerRequest,
    PlannerResponse, SubprocessPlanner, ViewPayload, PLANNER_SCHEMA,
};
pub use consensus::consensus;
pub use propose::{feasibility_filter, propose, shortest_path_length, visibility, CandidateProposal};

use crate::geometry::{Pose2, Vec2};
use crate::grid::{rasterize, rasterize_on, OccupancyGrid};
use crate::scenario::{GoalRegion, Scenario};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CognitionError {
    #[error("no visible path")]
    NoVisiblePath,
    #[error("no feasible anchors")]
    NoFeasibleAnchors,
    #[error("consensus failure: {0}")]
    ConsensusFailure(String),
    #[error("start or goal outside the grid")]
    OffGrid,
    #[error("anchor sequence invalid: {0}")]
    InvalidSequence(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitionConfig {
    pub grid_cells: usize,
    /// Nominal distance between consecutive anchors.
    pub spacing: f64,
    /// Paired anchors closer than this are averaged.
    pub merge_radius: f64,
    /// Treat cells in line of sight of the goal as already known.
    pub seed_goal_view: bool,
}

impl Default for CognitionConfig {
    fn default() -> Self {
        Self {
            grid_cells: crate::grid::DEFAULT_GRID_CELLS,
            spacing: 1.0,
            merge_radius: 0.5,
            seed_goal_view: true,
        }
    }
}

/// Shared waypoint sequence for the object CoM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSequence {
    pub anchors: Vec<Vec2>,
    pub spacing: f64,
}

impl AnchorSequence {
    /// Checks the sequence invariants against a grid and goal.
    pub fn validate(&self, grid: &OccupancyGrid, goal: &GoalRegion) -> Result<(), CognitionError> {
        let bad = |m: String| Err(CognitionError::InvalidSequence(m));
        let Some(last) = self.anchors.last() else {
            return bad("empty".into());
        };
        if !goal.contains(*last) {
            return bad("final anchor outside goal region".into());
        }
        for w in self.anchors.windows(2) {
            if w[0].dist(w[1]) > 2.0 * self.spacing + 1e-9 {
                return bad(format!("gap {:.3} m exceeds twice the spacing", w[0].dist(w[1])));
            }
        }
        if let Some(p) = self.anchors.iter().find(|p| !grid.free_at(**p)) {
            return bad(format!("anchor ({:.2}, {:.2}) not in free space", p.x, p.y));
        }
        Ok(())
    }

    /// Total polyline length from `from` through all anchors.
    pub fn path_length_from(&self, from: Vec2) -> f64 {
        let mut prev = from;
        let mut len = 0.0;
        for &a in &self.anchors {
            len += prev.dist(a);
            prev = a;
        }
        len
    }
}

/// Runs propose, feasibility filtering and consensus for both agents' current
/// views. When either agent cannot see a route, or consensus fails, the agents
/// exchange views and re-plan once on the union of their visibility masks.
pub fn plan_for_state(
    scenario: &Scenario,
    grid: &OccupancyGrid,
    object_pos: Vec2,
    views: [Pose2; 2],
    cfg: &CognitionConfig,
) -> Result<AnchorSequence, CognitionError> {
    let walls = scenario.segments();
    // sight lines are blocked by walls, not by the planning margin
    let sight = rasterize_on(grid.spec, &walls, 0.0);
    let goal_view = if cfg.seed_goal_view {
        grid.spec
            .cell_of(scenario.goal.center)
            .map(|c| visibility(&sight, grid.spec.cell_center(c)))
    } else {
        None
    };
    let masks: Vec<Vec<bool>> = views
        .iter()
        .map(|v| {
            let mut known = visibility(&sight, v.position());
            if let Some(g) = &goal_view {
                for (k, &gv) in known.iter_mut().zip(g) {
                    *k |= gv;
                }
            }
            known
        })
        .collect();
    let round = |known: [&[bool]; 2]| -> Result<AnchorSequence, CognitionError> {
        let mut proposals = Vec::with_capacity(2);
        for (i, view) in views.iter().enumerate() {
            let p = propose(grid, object_pos, &scenario.goal, *view, i, Some(known[i]), cfg)?;
            proposals.push(feasibility_filter(
                &p,
                grid,
                &walls,
                scenario,
                &scenario.embodiments[i],
                cfg,
            )?);
        }
        consensus(&proposals[0], &proposals[1], grid, &scenario.goal, cfg)
    };
    match round([&masks[0], &masks[1]]) {
        Err(CognitionError::ConsensusFailure(reason)) => {
            log::debug!("consensus failed ({reason}); re-planning on the shared view");
        }
        Err(CognitionError::NoVisiblePath) => {
            log::debug!("a single view has no route; re-planning on the shared view");
        }
        other => return other,
    }
    let shared: Vec<bool> = masks[0].iter().zip(&masks[1]).map(|(a, b)| *a || *b).collect();
    round([&shared, &shared])
}

/// Plans from a scenario's nominal start: rasterizes, then runs [`plan_for_state`]
/// with the agents at their stations.
pub fn plan_scenario(scenario: &Scenario, cfg: &CognitionConfig) -> Result<AnchorSequence, CognitionError> {
    let grid = rasterize(scenario, cfg.grid_cells);
    let start = scenario.start_pose;
    let views = [0, 1].map(|i| {
        let st = scenario.stations[i];
        let p = start.apply(st.offset);
        Pose2::new(p.x, p.y, start.heading + st.yaw)
    });
    plan_for_state(scenario, &grid, start.position(), views, cfg)
}
