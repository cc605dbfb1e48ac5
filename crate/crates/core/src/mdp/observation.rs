use super::{
    COMPRESSED_DIM, CONTACT_DIM, EGO_DIM, FRAME_DIM, GLOBAL_STATE_DIM, N_RAYS, OBJECT_DIM, OBS_DIM,
    PARTNER_DIM, TASK_DIM, ANCHOR_WINDOW,
};
use crate::cognition::AnchorSequence;
use crate::geometry::wrap_angle;
use crate::sim::{Sim, WorldState};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// `1 - min(d, d_max) / d_max`: 1 at contact, 0 at or beyond range.
pub fn range_feature(d: f64, d_max: f64) -> f64 {
    1.0 - d.min(d_max) / d_max
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    pub task: [f64; TASK_DIM],
    pub ego: [f64; EGO_DIM],
    pub partner: [f64; PARTNER_DIM],
    pub object: [f64; OBJECT_DIM],
    pub contact: [f64; CONTACT_DIM],
    pub env: [f64; N_RAYS],
}

impl ObservationFrame {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.compressed();
        v.extend_from_slice(&self.env);
        v
    }

    /// Frame without the range block.
    pub fn compressed(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FRAME_DIM);
        v.extend_from_slice(&self.task);
        v.extend_from_slice(&self.ego);
        v.extend_from_slice(&self.partner);
        v.extend_from_slice(&self.object);
        v.extend_from_slice(&self.contact);
        v
    }
}

/// Builds one agent's frame. `anchors` carries the sequence and the index of
/// the first unreached anchor; `None` zeroes the task block.
pub fn build_frame(
    sim: &Sim,
    state: &WorldState,
    agent: usize,
    anchors: Option<(&AnchorSequence, usize)>,
    d_max: f64,
) -> ObservationFrame {
    let me = &state.agents[agent];
    let other = &state.agents[1 - agent];
    let frame = me.pose();
    let obj = &state.object;
    let p_obj = obj.position();

    let mut task = [0.0; TASK_DIM];
    if let Some((seq, idx)) = anchors {
        let k = seq.anchors.len();
        for w in 0..ANCHOR_WINDOW {
            let a = seq.anchors[(idx + w).min(k - 1)];
            task[2 * w] = a.x - p_obj.x;
            task[2 * w + 1] = a.y - p_obj.y;
        }
    }

    let mut ego = [0.0; EGO_DIM];
    // own position in the object frame
    let rel = obj.pose.inverse_apply(me.position);
    let bv = me.body_velocity();
    ego[..7].copy_from_slice(&[
        rel.x,
        rel.y,
        bv.x,
        bv.y,
        wrap_angle(me.yaw - obj.pose.heading),
        me.com_height,
        me.torso_pitch,
    ]);
    for k in 0..2 {
        let w = me.wrist_body[k];
        ego[7 + 3 * k..10 + 3 * k].copy_from_slice(&[w.x, w.y, w.z]);
    }

    let mut partner = [0.0; PARTNER_DIM];
    let prel = frame.inverse_apply(other.position);
    let pv = other.velocity.rotate(-me.yaw);
    partner[..7].copy_from_slice(&[
        prel.x,
        prel.y,
        pv.x,
        pv.y,
        wrap_angle(other.yaw - me.yaw),
        other.com_height,
        other.torso_pitch,
    ]);
    for k in 0..2 {
        let w = other.wrist_pos[k];
        let l = frame.inverse_apply(w.xy());
        partner[7 + 3 * k..10 + 3 * k].copy_from_slice(&[l.x, l.y, w.z]);
    }

    let mut object = [0.0; OBJECT_DIM];
    let corners = sim.scenario.object.local_corners();
    for (j, c) in corners.iter().enumerate() {
        let l = frame.inverse_apply(obj.pose.apply(*c));
        object[3 * j..3 * j + 3].copy_from_slice(&[l.x, l.y, obj.corner_heights[j]]);
    }
    let com = frame.inverse_apply(p_obj);
    let ov = obj.planar_velocity.rotate(-me.yaw);
    object[12..18].copy_from_slice(&[com.x, com.y, obj.com_height, ov.x, ov.y, obj.heading_rate]);

    let mut contact = [0.0; CONTACT_DIM];
    for (c, &f) in contact.iter_mut().zip(&state.contacts) {
        *c = if f { 1.0 } else { 0.0 };
    }

    let mut env = [0.0; N_RAYS];
    for (e, d) in env.iter_mut().zip(sim.raycast(state, agent, N_RAYS, d_max)) {
        *e = range_feature(d, d_max);
    }

    ObservationFrame {
        task,
        ego,
        partner,
        object,
        contact,
        env,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedObservation {
    pub current: ObservationFrame,
    /// Most recent first.
    pub history: [Vec<f64>; 2],
}

impl StackedObservation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.current.to_vec();
        v.extend_from_slice(&self.history[0]);
        v.extend_from_slice(&self.history[1]);
        debug_assert_eq!(v.len(), OBS_DIM);
        v
    }
}

/// The two previous compressed frames of one agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryBuffer {
    frames: VecDeque<Vec<f64>>,
}

impl HistoryBuffer {
    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, compressed: Vec<f64>) {
        debug_assert_eq!(compressed.len(), COMPRESSED_DIM);
        self.frames.push_front(compressed);
        self.frames.truncate(2);
    }
}

/// Stacks the current frame with up to two prior compressed frames; missing
/// history is filled with the current compressed frame.
pub fn stack(current: &ObservationFrame, history: &HistoryBuffer) -> StackedObservation {
    let now = current.compressed();
    let slot = |k: usize| history.frames.get(k).cloned().unwrap_or_else(|| now.clone());
    StackedObservation {
        current: current.clone(),
        history: [slot(0), slot(1)],
    }
}

/// Critic state: both agents' compressed frames and the elapsed episode fraction.
pub fn global_state(frames: [&ObservationFrame; 2], time_fraction: f64) -> Vec<f64> {
    let mut v = frames[0].compressed();
    v.extend(frames[1].compressed());
    v.push(time_fraction);
    debug_assert_eq!(v.len(), GLOBAL_STATE_DIM);
    v
}
