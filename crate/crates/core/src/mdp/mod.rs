//! Per-agent observations, the residual action map onto task-space commands,
//! and the shared team reward.
//!
//! Observation frame (94 values):
//!
//! | block     | dims | contents                                                        |
//! |-----------|------|-----------------------------------------------------------------|
//! | `task`    | 10   | next 5 anchors minus object position (world axes)               |
//! | `ego`     | 13   | own pose/velocity, CoM height, pitch, wrist offsets             |
//! | `partner` | 13   | partner pose/velocity/posture/wrists in the agent frame         |
//! | `object`  | 18   | 4 corners + CoM (xy in agent frame, z) and CoM velocity         |
//! | `contact` | 4    | grasp or push contact flags                                     |
//! | `env`     | 36   | range features `1 - min(d, d_max) / d_max`                       |
//!
//! History slots store the frame without `env` (58 values), so the stacked
//! input is `94 + 2 * 58 = 210`. The generated layout file lists every slot.

mod control;
mod observation;
mod reward;

pub use control::{nominal_controller, residual_map, ControlConfig, ScaleVector};
pub use observation::{
    build_frame, global_state, range_feature, stack, HistoryBuffer, ObservationFrame,
    StackedObservation,
};
pub use reward::{compute_reward, lateral_deviation, tilt_spread, AnchorTracker, RewardConfig, RewardOutcome};

use serde::Serialize;

pub const ANCHOR_WINDOW: usize = 5;
pub const TASK_DIM: usize = 2 * ANCHOR_WINDOW;
pub const EGO_DIM: usize = 13;
pub const PARTNER_DIM: usize = 13;
pub const OBJECT_DIM: usize = 18;
pub const CONTACT_DIM: usize = 4;
pub const N_RAYS: usize = 36;
pub const FRAME_DIM: usize = TASK_DIM + EGO_DIM + PARTNER_DIM + OBJECT_DIM + CONTACT_DIM + N_RAYS;
pub const COMPRESSED_DIM: usize = FRAME_DIM - N_RAYS;
pub const HISTORY_LEN: usize = 2;
pub const OBS_DIM: usize = FRAME_DIM + HISTORY_LEN * COMPRESSED_DIM;
pub const ACTION_DIM: usize = 11;
/// Both compressed frames plus the elapsed episode fraction.
pub const GLOBAL_STATE_DIM: usize = 2 * COMPRESSED_DIM + 1;
pub const CRITIC_INPUT_DIM: usize = GLOBAL_STATE_DIM + 2 * ACTION_DIM;

#[derive(Debug, Clone, Serialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub unit: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayoutSchema {
    pub schema: &'static str,
    pub observation_dim: usize,
    pub frame_dim: usize,
    pub compressed_dim: usize,
    pub observation: Vec<Slot>,
    pub action_dim: usize,
    pub action: Vec<Slot>,
    pub critic_input_dim: usize,
    pub critic_input: Vec<Slot>,
}

fn frame_slots(prefix: &str, with_env: bool) -> Vec<(String, &'static str)> {
    let mut v: Vec<(String, &'static str)> = Vec::new();
    for k in 0..ANCHOR_WINDOW {
        v.push((format!("{prefix}task.anchor{k}.dx"), "m"));
        v.push((format!("{prefix}task.anchor{k}.dy"), "m"));
    }
    let body = |p: &str, v: &mut Vec<(String, &'static str)>| {
        for (n, u) in [
            ("x", "m"),
            ("y", "m"),
            ("vx", "m/s"),
            ("vy", "m/s"),
            ("yaw", "rad"),
            ("com_height", "m"),
            ("torso_pitch", "rad"),
            ("wrist_l.x", "m"),
            ("wrist_l.y", "m"),
            ("wrist_l.z", "m"),
            ("wrist_r.x", "m"),
            ("wrist_r.y", "m"),
            ("wrist_r.z", "m"),
        ] {
            v.push((format!("{p}{n}"), u));
        }
    };
    body(&format!("{prefix}ego."), &mut v);
    body(&format!("{prefix}partner."), &mut v);
    for k in 0..4 {
        v.push((format!("{prefix}object.corner{k}.x"), "m"));
        v.push((format!("{prefix}object.corner{k}.y"), "m"));
        v.push((format!("{prefix}object.corner{k}.z"), "m"));
    }
    for (n, u) in [
        ("com.x", "m"),
        ("com.y", "m"),
        ("com.z", "m"),
        ("vel.x", "m/s"),
        ("vel.y", "m/s"),
        ("vel.yaw", "rad/s"),
    ] {
        v.push((format!("{prefix}object.{n}"), u));
    }
    for n in ["a0.wrist_l", "a0.wrist_r", "a1.wrist_l", "a1.wrist_r"] {
        v.push((format!("{prefix}contact.{n}"), "flag"));
    }
    if with_env {
        for k in 0..N_RAYS {
            v.push((format!("{prefix}env.ray{k}"), "1"));
        }
    }
    v
}

fn to_slots(items: Vec<(String, &'static str)>) -> Vec<Slot> {
    items
        .into_iter()
        .enumerate()
        .map(|(offset, (name, unit))| Slot { name, offset, unit })
        .collect()
}

pub const ACTION_NAMES: [&str; ACTION_DIM] = [
    "v_x", "v_y", "yaw_rate", "com_height", "torso_pitch", "wrist_l.x", "wrist_l.y", "wrist_l.z",
    "wrist_r.x", "wrist_r.y", "wrist_r.z",
];
const ACTION_UNITS: [&str; ACTION_DIM] = ["m/s", "m/s", "rad/s", "m", "rad", "m", "m", "m", "m", "m", "m"];

/// Names, offsets and units of every observation, action and critic input slot.
pub fn layout_schema() -> LayoutSchema {
    let mut obs = frame_slots("t0.", true);
    obs.extend(frame_slots("t-1.", false));
    obs.extend(frame_slots("t-2.", false));
    let action: Vec<(String, &'static str)> = ACTION_NAMES
        .iter()
        .zip(ACTION_UNITS)
        .map(|(n, u)| (format!("a.{n}"), u))
        .collect();
    let mut critic = frame_slots("agent0.", false);
    critic.extend(frame_slots("agent1.", false));
    critic.push(("time_fraction".into(), "1"));
    for a in 0..2 {
        for (n, u) in ACTION_NAMES.iter().zip(ACTION_UNITS) {
            critic.push((format!("agent{a}.a.{n}"), u));
        }
    }
    LayoutSchema {
        schema: "layout_v1",
        observation_dim: OBS_DIM,
        frame_dim: FRAME_DIM,
        compressed_dim: COMPRESSED_DIM,
        observation: to_slots(obs),
        action_dim: ACTION_DIM,
        action: to_slots(action),
        critic_input_dim: CRITIC_INPUT_DIM,
        critic_input: to_slots(critic),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions() {
        assert_eq!(FRAME_DIM, 94);
        assert_eq!(COMPRESSED_DIM, 58);
        assert_eq!(OBS_DIM, 210);
        // 10 + 13 + 13 + 18 + 40 + 116
        assert_eq!(TASK_DIM + EGO_DIM + PARTNER_DIM + OBJECT_DIM + (CONTACT_DIM + N_RAYS) + 2 * COMPRESSED_DIM, 210);
        let s = layout_schema();
        assert_eq!(s.observation.len(), OBS_DIM);
        assert_eq!(s.action.len(), ACTION_DIM);
        assert_eq!(s.critic_input.len(), CRITIC_INPUT_DIM);
    }
}
