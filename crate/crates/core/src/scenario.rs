//! Scenario definitions: maps, task modes, embodiments and the builtin
//! nine-scenario matrix plus a straight corridor used for smoke training.
//!
//! Builtin geometry (all values in meters):
//!
//! | id       | mode  | object (L x W) | layout                                             |
//! |----------|-------|----------------|----------------------------------------------------|
//! | corridor | carry | 1.2 x 0.6      | straight 3 m wide corridor, goal 5 m ahead         |
//! | S11      | push  | 1.0 x 0.8      | room with a 1.8 m docking alcove (alignment)        |
//! | S12      | push  | 1.0 x 0.8      | goal behind the pushers (turnaround)               |
//! | S13      | push  | 1.0 x 0.8      | 2.4 m L-corridor, left turn (corner entry)         |
//! | S21      | carry | 1.2 x 0.6      | single 1.2 m gate in a cross wall (narrow gate)    |
//! | S22      | carry | 1.2 x 0.6      | 2 m S-shaped corridor                              |
//! | S23      | carry | 1.2 x 0.6      | 2 m U-shaped corridor around a divider             |
//! | S31      | carry | 2.4 x 0.4      | 3 m straight corridor, agents facing (facing mode) |
//! | S32      | carry | 2.4 x 0.4      | 5 m corridor, object long axis across travel       |
//! | S33      | carry | 2.4 x 0.4      | 4 m L-corridor, object pivots 90 deg               |
//!
//! Episode horizons are time budgets sized so the nominal controller alone
//! finishes only part of the jittered starts on the harder maps.

use crate::geometry::{Pose2, Rect, Segment, Vec2, Vec3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SCENARIO_SCHEMA: &str = "scenario_v1";

pub const BUILTIN_IDS: [&str; 10] = [
    "corridor", "S11", "S12", "S13", "S21", "S22", "S23", "S31", "S32", "S33",
];

/// The nine matrix scenarios, in table order.
pub const MATRIX_IDS: [&str; 9] = ["S11", "S12", "S13", "S21", "S22", "S23", "S31", "S32", "S33"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("unsupported scenario schema version {0:?} (expected \"scenario_v1\")")]
    Version(String),
    #[error("invalid scenario: {0}")]
    Invariant(String),
    #[error("unknown scenario id {0:?}")]
    UnknownId(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Push,
    Carry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "OSP")]
    Osp,
    #[serde(rename = "SCT")]
    Sct,
    #[serde(rename = "SLH")]
    Slh,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::Osp => "OSP",
            Category::Sct => "SCT",
            Category::Slh => "SLH",
        }
    }

    pub fn of(id: &str) -> Option<Category> {
        match id {
            "S11" | "S12" | "S13" => Some(Category::Osp),
            "S21" | "S22" | "S23" => Some(Category::Sct),
            "S31" | "S32" | "S33" => Some(Category::Slh),
            _ => None,
        }
    }
}

/// Kinematic limits and body geometry of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embodiment {
    pub name: String,
    pub max_vx: f64,
    pub max_vy: f64,
    pub max_yaw_rate: f64,
    pub com_min: f64,
    pub com_max: f64,
    pub com_default: f64,
    pub max_torso_pitch: f64,
    /// Wrist reach measured from the shoulder.
    pub workspace_radius: f64,
    /// Shoulder height above the CoM.
    pub shoulder_height: f64,
    pub shoulder_half_width: f64,
    /// Pitching the torso by `a` moves the wrists forward by `l sin a` and down by `l (1 - cos a)`.
    pub torso_length: f64,
    /// Collision radius of the base.
    pub radius: f64,
    /// Lateral clearance the agent needs beyond the object footprint.
    pub side_margin: f64,
}

impl Embodiment {
    pub fn humanoid_robot() -> Self {
        Self {
            name: "robot".into(),
            max_vx: 0.7,
            max_vy: 0.4,
            max_yaw_rate: 1.0,
            com_min: 0.55,
            com_max: 0.80,
            com_default: 0.70,
            max_torso_pitch: 0.5,
            workspace_radius: 0.90,
            shoulder_height: 0.30,
            shoulder_half_width: 0.20,
            torso_length: 0.40,
            radius: 0.25,
            side_margin: 0.10,
        }
    }

    pub fn human() -> Self {
        Self {
            name: "human".into(),
            max_vx: 0.8,
            max_vy: 0.5,
            max_yaw_rate: 1.2,
            com_min: 0.80,
            com_max: 1.05,
            com_default: 0.95,
            max_torso_pitch: 0.6,
            workspace_radius: 1.00,
            shoulder_height: 0.35,
            shoulder_half_width: 0.20,
            torso_length: 0.50,
            radius: 0.25,
            side_margin: 0.10,
        }
    }

    /// Shoulder position in the body frame (x forward, y left, z relative to CoM height).
    pub fn shoulder(&self, wrist: usize) -> Vec3 {
        let side = if wrist == 0 { 1.0 } else { -1.0 };
        Vec3::new(0.0, side * self.shoulder_half_width, self.shoulder_height)
    }

    fn check(&self) -> Result<(), String> {
        let positive = [
            ("max_vx", self.max_vx),
            ("max_vy", self.max_vy),
            ("max_yaw_rate", self.max_yaw_rate),
            ("com_min", self.com_min),
            ("com_max", self.com_max),
            ("com_default", self.com_default),
            ("max_torso_pitch", self.max_torso_pitch),
            ("workspace_radius", self.workspace_radius),
            ("radius", self.radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("embodiment {}: limit {name} must be strictly positive", self.name));
            }
        }
        if !(self.com_min <= self.com_default && self.com_default <= self.com_max) {
            return Err(format!("embodiment {}: com_default outside CoM range", self.name));
        }
        if self.side_margin < 0.0 || self.torso_length < 0.0 {
            return Err(format!("embodiment {}: negative geometry", self.name));
        }
        Ok(())
    }
}

/// Rigid rectangular payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Half extent along the object's heading axis.
    pub half_x: f64,
    pub half_y: f64,
    /// Corner height of a resting (pushed) object.
    pub rest_height: f64,
    /// Grip height both agents hold a carried object at.
    pub carry_height: f64,
    /// Handle points in the object frame: agent0 left/right, agent1 left/right.
    pub handles: [Vec2; 4],
}

impl ObjectSpec {
    pub fn minor_extent(&self) -> f64 {
        2.0 * self.half_x.min(self.half_y)
    }

    pub fn rect(&self, pose: Pose2) -> Rect {
        Rect {
            pose,
            half_x: self.half_x,
            half_y: self.half_y,
        }
    }

    pub fn local_corners(&self) -> [Vec2; 4] {
        let (hx, hy) = (self.half_x, self.half_y);
        [
            Vec2::new(hx, hy),
            Vec2::new(-hx, hy),
            Vec2::new(-hx, -hy),
            Vec2::new(hx, -hy),
        ]
    }
}

/// Where an agent stands relative to the object at reset, in the object frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub offset: Vec2,
    /// Agent yaw relative to the object heading.
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: Vec2,
    pub radius: f64,
}

impl GoalRegion {
    /// Closed disc membership.
    pub fn contains(&self, p: Vec2) -> bool {
        p.dist(self.center) <= self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartJitter {
    pub position: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub version: String,
    pub id: String,
    pub task_mode: TaskMode,
    /// Wall polylines; each consecutive point pair is one segment.
    pub walls: Vec<Vec<Vec2>>,
    pub object: ObjectSpec,
    pub start_pose: Pose2,
    pub goal: GoalRegion,
    pub embodiments: Vec<Embodiment>,
    pub stations: [Station; 2],
    /// Desired object heading relative to the path tangent.
    #[serde(default)]
    pub travel_heading_offset: f64,
    /// Planner inflation; defaults to half the object's minor extent.
    #[serde(default)]
    pub plan_clearance: Option<f64>,
    pub episode_horizon: usize,
    pub start_jitter: StartJitter,
}

fn default_version() -> String {
    SCENARIO_SCHEMA.to_string()
}

impl Scenario {
    pub fn segments(&self) -> Vec<Segment> {
        self.walls
            .iter()
            .flat_map(|pl| pl.windows(2).map(|w| Segment::new(w[0], w[1])))
            .collect()
    }

    pub fn category(&self) -> Option<Category> {
        Category::of(&self.id)
    }

    pub fn plan_inflation(&self) -> f64 {
        self.plan_clearance.unwrap_or(0.5 * self.object.minor_extent())
    }

    /// Axis-aligned bounds (min, max) of walls, start and goal.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut take = |p: Vec2| {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        };
        for pl in &self.walls {
            for &p in pl {
                take(p);
            }
        }
        let r = self.object.half_x.hypot(self.object.half_y);
        let s = self.start_pose.position();
        take(s + Vec2::new(r, r));
        take(s - Vec2::new(r, r));
        let g = self.goal.center;
        take(g + Vec2::new(self.goal.radius, self.goal.radius));
        take(g - Vec2::new(self.goal.radius, self.goal.radius));
        (lo, hi)
    }

    /// Checks every type invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let inv = |m: &str| Err(ScenarioError::Invariant(m.to_string()));
        if self.version != SCENARIO_SCHEMA {
            return Err(ScenarioError::Version(self.version.clone()));
        }
        if self.embodiments.len() != 2 {
            return inv("exactly 2 embodiments required");
        }
        for e in &self.embodiments {
            e.check().map_err(ScenarioError::Invariant)?;
        }
        let o = &self.object;
        if !(o.half_x > 0.0 && o.half_y > 0.0 && o.rest_height > 0.0 && o.carry_height > 0.0) {
            return inv("object extents and heights must be strictly positive");
        }
        if !(self.goal.radius > 0.0) {
            return inv("goal radius must be strictly positive");
        }
        if self.episode_horizon == 0 {
            return inv("episode_horizon must be strictly positive");
        }
        if self.start_jitter.position < 0.0 || self.start_jitter.heading < 0.0 {
            return inv("start jitter must be non-negative");
        }
        if let Some(c) = self.plan_clearance {
            if c < 0.0 {
                return inv("plan_clearance must be non-negative");
            }
        }
        if self.walls.iter().any(|pl| pl.len() < 2) {
            return inv("wall polylines need at least 2 points");
        }
        let segs = self.segments();
        if segs
            .iter()
            .any(|s| s.distance_to_point(self.goal.center) <= self.goal.radius)
        {
            return inv("goal_region intersects walls");
        }
        let rect = o.rect(self.start_pose);
        if segs.iter().any(|s| rect.intersects_segment(s)) {
            return inv("object at start_pose collides with walls");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Loads a scenario by builtin id or from a JSON file path.
pub fn load_scenario(id_or_path: &str) -> Result<Scenario, ScenarioError> {
    if let Some(sc) = builtin(id_or_path) {
        return Ok(sc);
    }
    let path = Path::new(id_or_path);
    if !path.exists() {
        return Err(ScenarioError::UnknownId(id_or_path.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: id_or_path.to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}

fn v(x: f64, y: f64) -> Vec2 {
    Vec2::new(x, y)
}

fn push_box() -> ObjectSpec {
    ObjectSpec {
        half_x: 0.5,
        half_y: 0.4,
        rest_height: 0.4,
        carry_height: 0.8,
        handles: [v(-0.5, 0.4), v(-0.5, 0.16), v(-0.5, -0.16), v(-0.5, -0.4)],
    }
}

fn table() -> ObjectSpec {
    ObjectSpec {
        half_x: 0.6,
        half_y: 0.3,
        rest_height: 0.4,
        carry_height: 0.8,
        handles: [v(0.6, -0.2), v(0.6, 0.2), v(-0.6, 0.2), v(-0.6, -0.2)],
    }
}

fn long_board() -> ObjectSpec {
    ObjectSpec {
        half_x: 1.2,
        half_y: 0.2,
        rest_height: 0.4,
        carry_height: 0.8,
        handles: [v(1.2, -0.15), v(1.2, 0.15), v(-1.2, 0.15), v(-1.2, -0.15)],
    }
}

/// Pushers stand side by side behind the rear edge, facing along the heading.
fn push_stations(obj: &ObjectSpec) -> [Station; 2] {
    let x = -obj.half_x - 0.30;
    [
        Station { offset: v(x, 0.28), yaw: 0.0 },
        Station { offset: v(x, -0.28), yaw: 0.0 },
    ]
}

/// Carriers hold the two short ends, facing each other across the object.
fn carry_stations(obj: &ObjectSpec) -> [Station; 2] {
    let x = obj.half_x + 0.35;
    [
        Station { offset: v(x, 0.0), yaw: std::f64::consts::PI },
        Station { offset: v(-x, 0.0), yaw: 0.0 },
    ]
}

fn closed(points: &[(f64, f64)]) -> Vec<Vec2> {
    let mut pl: Vec<Vec2> = points.iter().map(|&(x, y)| v(x, y)).collect();
    pl.push(pl[0]);
    pl
}

fn open(points: &[(f64, f64)]) -> Vec<Vec2> {
    points.iter().map(|&(x, y)| v(x, y)).collect()
}

#[allow(clippy::too_many_arguments)]
fn make(
    id: &str,
    mode: TaskMode,
    object: ObjectSpec,
    walls: Vec<Vec<Vec2>>,
    start: Pose2,
    goal: (f64, f64, f64),
    horizon: usize,
    travel_heading_offset: f64,
    plan_clearance: Option<f64>,
) -> Scenario {
    let stations = match mode {
        TaskMode::Push => push_stations(&object),
        TaskMode::Carry => carry_stations(&object),
    };
    Scenario {
        version: SCENARIO_SCHEMA.into(),
        id: id.into(),
        task_mode: mode,
        walls,
        object,
        start_pose: start,
        goal: GoalRegion {
            center: v(goal.0, goal.1),
            radius: goal.2,
        },
        embodiments: vec![Embodiment::humanoid_robot(), Embodiment::human()],
        stations,
        travel_heading_offset,
        plan_clearance,
        episode_horizon: horizon,
        start_jitter: StartJitter {
            position: 0.2,
            heading: 0.05,
        },
    }
}

/// Returns the builtin scenario with the given id.
pub fn builtin(id: &str) -> Option<Scenario> {
    use std::f64::consts::FRAC_PI_2;
    use TaskMode::{Carry, Push};
    let sc = match id {
        "corridor" => make(
            "corridor",
            Carry,
            table(),
            vec![closed(&[(-2.0, -1.5), (7.0, -1.5), (7.0, 1.5), (-2.0, 1.5)])],
            Pose2::new(0.0, 0.0, 0.0),
            (5.0, 0.0, 0.5),
            60,
            0.0,
            None,
        ),
        "S11" => make(
            "S11",
            Push,
            push_box(),
            vec![
                open(&[(5.0, 0.9), (5.0, 3.0), (-2.0, 3.0), (-2.0, -3.0), (5.0, -3.0), (5.0, -0.9)]),
                open(&[(5.0, 0.9), (8.0, 0.9), (8.0, -0.9), (5.0, -0.9)]),
            ],
            Pose2::new(0.5, -1.0, 0.35),
            (6.8, 0.0, 0.5),
            70,
            0.0,
            None,
        ),
        "S12" => make(
            "S12",
            Push,
            push_box(),
            vec![closed(&[(-5.0, -3.5), (5.0, -3.5), (5.0, 3.5), (-5.0, 3.5)])],
            Pose2::new(1.0, -1.0, 0.0),
            (-2.0, 1.5, 0.6),
            120,
            0.0,
            Some(0.6),
        ),
        "S13" => make(
            "S13",
            Push,
            push_box(),
            vec![
                open(&[(-2.0, 1.2), (2.4, 1.2), (2.4, 7.5)]),
                open(&[(-2.0, -1.2), (4.8, -1.2), (4.8, 7.5)]),
                open(&[(-2.0, -1.2), (-2.0, 1.2)]),
                open(&[(2.4, 7.5), (4.8, 7.5)]),
            ],
            Pose2::new(0.0, 0.0, 0.0),
            (3.6, 5.5, 0.5),
            100,
            0.0,
            Some(0.6),
        ),
        "S21" => make(
            "S21",
            Carry,
            table(),
            vec![
                closed(&[(-2.0, -2.5), (8.0, -2.5), (8.0, 2.5), (-2.0, 2.5)]),
                open(&[(3.0, -2.5), (3.0, -0.6)]),
                open(&[(3.0, 0.6), (3.0, 2.5)]),
            ],
            Pose2::new(0.0, 0.0, 0.0),
            (6.0, 0.0, 0.5),
            34,
            0.0,
            None,
        ),
        "S22" => make(
            "S22",
            Carry,
            table(),
            vec![
                open(&[(-2.0, -1.0), (4.0, -1.0), (4.0, 2.0), (8.0, 2.0)]),
                open(&[(-2.0, 1.0), (2.0, 1.0), (2.0, 4.0), (8.0, 4.0)]),
                open(&[(-2.0, -1.0), (-2.0, 1.0)]),
                open(&[(8.0, 2.0), (8.0, 4.0)]),
            ],
            Pose2::new(0.0, 0.0, 0.0),
            (6.5, 3.0, 0.5),
            80,
            0.0,
            Some(0.5),
        ),
        "S23" => make(
            "S23",
            Carry,
            table(),
            vec![
                closed(&[(-2.0, -1.2), (6.0, -1.2), (6.0, 4.2), (-2.0, 4.2)]),
                open(&[(-2.0, 1.5), (2.5, 1.5)]),
            ],
            Pose2::new(0.0, 0.0, 0.0),
            (0.0, 3.0, 0.5),
            110,
            0.0,
            Some(0.5),
        ),
        "S31" => make(
            "S31",
            Carry,
            long_board(),
            vec![closed(&[(-3.0, -1.5), (10.0, -1.5), (10.0, 1.5), (-3.0, 1.5)])],
            Pose2::new(0.0, 0.0, 0.0),
            (7.0, 0.0, 0.5),
            44,
            0.0,
            None,
        ),
        "S32" => make(
            "S32",
            Carry,
            long_board(),
            vec![closed(&[(-2.0, -2.5), (9.0, -2.5), (9.0, 2.5), (-2.0, 2.5)])],
            Pose2::new(0.0, 0.0, FRAC_PI_2),
            (6.0, 0.0, 0.5),
            50,
            FRAC_PI_2,
            Some(0.4),
        ),
        "S33" => make(
            "S33",
            Carry,
            long_board(),
            vec![
                open(&[(-3.0, 2.0), (2.0, 2.0), (2.0, 8.0)]),
                open(&[(-3.0, -2.0), (6.0, -2.0), (6.0, 8.0)]),
                open(&[(-3.0, -2.0), (-3.0, 2.0)]),
                open(&[(2.0, 8.0), (6.0, 8.0)]),
            ],
            Pose2::new(0.0, 0.0, 0.0),
            (4.0, 6.0, 0.5),
            46,
            0.0,
            Some(1.2),
        ),
        _ => return None,
    };
    Some(sc)
}
