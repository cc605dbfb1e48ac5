//! Planar two-rate transport world.
//!
//! Policy commands arrive at `f_low`; each policy interval is integrated as
//! `f_high / f_low` substeps in which a first-order tracking proxy drives each
//! agent toward its task-space command. Carried objects follow the least-squares
//! rigid fit of the grasped handles; pushed objects move with the normal
//! components of the contacting agents' velocities.

use crate::geometry::{fit_se2, wrap_angle, Pose2, Segment, Vec2, Vec3};
use crate::scenario::{Scenario, TaskMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite command for agent {agent}")]
    NonFiniteCommand { agent: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub f_low: f64,
    pub f_high: f64,
    /// Time constant of the tracking proxy.
    pub tau_track: f64,
    /// Grasp breakaway radius.
    pub r_break: f64,
    /// Object CoM height below which the object counts as dropped.
    pub z_min: f64,
    /// Wrist-to-edge distance that still counts as push contact.
    pub push_band: f64,
    /// Minimum distance kept between a pusher's base and the object.
    pub push_reach: f64,
    pub linear_damping: f64,
    pub angular_damping: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            f_low: 2.0,
            f_high: 50.0,
            tau_track: 0.15,
            r_break: 0.25,
            z_min: 0.2,
            push_band: 0.1,
            push_reach: 0.30,
            linear_damping: 2.0,
            angular_damping: 2.0,
        }
    }
}

impl SimConfig {
    pub fn dt_low(&self) -> f64 {
        1.0 / self.f_low
    }

    pub fn dt_high(&self) -> f64 {
        1.0 / self.f_high
    }

    pub fn substeps(&self) -> usize {
        (self.f_high / self.f_low).round() as usize
    }
}

/// Task-space command realized by the tracking proxy.
/// Base velocities are in the agent's body frame; wrist targets are body-frame
/// offsets with z measured relative to the CoM height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpaceCommand {
    pub v_base: [f64; 3],
    pub h_com: f64,
    pub alpha_ptc: f64,
    pub p_w: [Vec3; 2],
}

impl TaskSpaceCommand {
    pub const DOF: usize = 11;

    pub fn to_array(&self) -> [f64; 11] {
        let [l, r] = self.p_w;
        [
            self.v_base[0],
            self.v_base[1],
            self.v_base[2],
            self.h_com,
            self.alpha_ptc,
            l.x,
            l.y,
            l.z,
            r.x,
            r.y,
            r.z,
        ]
    }

    pub fn from_array(a: &[f64; 11]) -> Self {
        Self {
            v_base: [a[0], a[1], a[2]],
            h_com: a[3],
            alpha_ptc: a[4],
            p_w: [Vec3::new(a[5], a[6], a[7]), Vec3::new(a[8], a[9], a[10])],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    /// World-frame planar velocity.
    pub velocity: Vec2,
    pub yaw: f64,
    pub yaw_rate: f64,
    pub com_height: f64,
    pub torso_pitch: f64,
    /// Tracked wrist offsets in the body frame (the proxy's internal state).
    pub wrist_body: [Vec3; 2],
    /// World-frame wrist positions.
    pub wrist_pos: [Vec3; 2],
    pub embodiment_id: usize,
}

impl AgentState {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.position.x, self.position.y, self.yaw)
    }

    pub fn body_velocity(&self) -> Vec2 {
        self.velocity.rotate(-self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub pose: Pose2,
    pub planar_velocity: Vec2,
    pub heading_rate: f64,
    pub corner_heights: [f64; 4],
    pub com_height: f64,
}

impl ObjectState {
    pub fn position(&self) -> Vec2 {
        self.pose.position()
    }

    /// Angle between the suspension plane normal and vertical, radians.
    pub fn tilt_angle(&self, half_x: f64, half_y: f64) -> f64 {
        // corners: (+,+), (-,+), (-,-), (+,-)
        let z = self.corner_heights;
        let gx = ((z[0] + z[3]) - (z[1] + z[2])) / (4.0 * half_x);
        let gy = ((z[0] + z[1]) - (z[2] + z[3])) / (4.0 * half_y);
        gx.hypot(gy).atan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    pub agents: [AgentState; 2],
    pub object: ObjectState,
    /// agent0 wristL/R, agent1 wristL/R
    pub contacts: [bool; 4],
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub drop: bool,
    pub wall_hit: bool,
    pub goal_entry: bool,
}

impl StepEvents {
    pub fn merge(&mut self, o: StepEvents) {
        self.drop |= o.drop;
        self.wall_hit |= o.wall_hit;
        self.goal_entry |= o.goal_entry;
    }
}

/// A scenario bound to simulator settings. Immutable; cheap to share.
#[derive(Debug, Clone)]
pub struct Sim {
    pub scenario: Scenario,
    pub cfg: SimConfig,
    walls: Vec<Segment>,
}

impl Sim {
    pub fn new(scenario: Scenario, cfg: SimConfig) -> Self {
        let walls = scenario.segments();
        Self {
            scenario,
            cfg,
            walls,
        }
    }

    pub fn walls(&self) -> &[Segment] {
        &self.walls
    }

    /// Default body-frame wrist offsets: on the handles when carrying, on the
    /// rear edge when pushing.
    pub fn default_wrists(&self, agent: usize) -> [Vec3; 2] {
        let sc = &self.scenario;
        let emb = &sc.embodiments[agent];
        let st = sc.stations[agent];
        match sc.task_mode {
            TaskMode::Carry => {
                let z = sc.object.carry_height - emb.com_default;
                let h = |k: usize| {
                    let p = (sc.object.handles[2 * agent + k] - st.offset).rotate(-st.yaw);
                    Vec3::new(p.x, p.y, z)
                };
                [h(0), h(1)]
            }
            TaskMode::Push => {
                let z = sc.object.rest_height + 0.2 - emb.com_default;
                let x = self.cfg.push_reach;
                [Vec3::new(x, 0.12, z), Vec3::new(x, -0.12, z)]
            }
        }
    }

    pub fn default_command(&self, agent: usize) -> TaskSpaceCommand {
        TaskSpaceCommand {
            v_base: [0.0; 3],
            h_com: self.scenario.embodiments[agent].com_default,
            alpha_ptc: 0.0,
            p_w: self.default_wrists(agent),
        }
    }

    /// Clamps a command into the agent's embodiment bounds.
    pub fn clamp_command(&self, agent: usize, cmd: &TaskSpaceCommand) -> TaskSpaceCommand {
        let e = &self.scenario.embodiments[agent];
        let mut out = *cmd;
        out.v_base[0] = cmd.v_base[0].clamp(-e.max_vx, e.max_vx);
        out.v_base[1] = cmd.v_base[1].clamp(-e.max_vy, e.max_vy);
        out.v_base[2] = cmd.v_base[2].clamp(-e.max_yaw_rate, e.max_yaw_rate);
        out.h_com = cmd.h_com.clamp(e.com_min, e.com_max);
        out.alpha_ptc = cmd.alpha_ptc.clamp(-e.max_torso_pitch, e.max_torso_pitch);
        for (k, w) in out.p_w.iter_mut().enumerate() {
            let sh = e.shoulder(k);
            let d = w.sub(sh);
            let n = d.norm();
            if n > e.workspace_radius {
                *w = sh.add(d.scale(e.workspace_radius / n));
            }
        }
        out
    }

    fn wrist_world(&self, a: &AgentState, k: usize) -> Vec3 {
        let e = &self.scenario.embodiments[a.embodiment_id];
        let wb = a.wrist_body[k];
        let (s, c) = a.torso_pitch.sin_cos();
        let planar = a.pose().apply(Vec2::new(wb.x + e.torso_length * s, wb.y));
        Vec3::new(
            planar.x,
            planar.y,
            a.com_height + wb.z - e.torso_length * (1.0 - c),
        )
    }

    pub fn reset(&self, seed: u64) -> WorldState {
        let sc = &self.scenario;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = sc.start_jitter;
        let mut pose = sc.start_pose;
        if j.position > 0.0 {
            pose.x += rng.random_range(-j.position..=j.position);
            pose.y += rng.random_range(-j.position..=j.position);
        }
        if j.heading > 0.0 {
            pose.heading += rng.random_range(-j.heading..=j.heading);
        }
        let agents = [0, 1].map(|i| {
            let st = sc.stations[i];
            let e = &sc.embodiments[i];
            let mut a = AgentState {
                position: pose.apply(st.offset),
                velocity: Vec2::ZERO,
                yaw: wrap_angle(pose.heading + st.yaw),
                yaw_rate: 0.0,
                com_height: e.com_default,
                torso_pitch: 0.0,
                wrist_body: self.default_wrists(i),
                wrist_pos: [Vec3::default(); 2],
                embodiment_id: i,
            };
            a.wrist_pos = [self.wrist_world(&a, 0), self.wrist_world(&a, 1)];
            a
        });
        let (corner_heights, com_height) = match sc.task_mode {
            TaskMode::Carry => ([sc.object.carry_height; 4], sc.object.carry_height),
            TaskMode::Push => ([sc.object.rest_height; 4], sc.object.rest_height),
        };
        let mut state = WorldState {
            time: 0.0,
            agents,
            object: ObjectState {
                pose,
                planar_velocity: Vec2::ZERO,
                heading_rate: 0.0,
                corner_heights,
                com_height,
            },
            contacts: [false; 4],
            dropped: false,
        };
        match sc.task_mode {
            TaskMode::Carry => {
                state.contacts = [true; 4];
                self.update_suspension(&mut state);
            }
            TaskMode::Push => state.contacts = self.push_contacts(&state),
        }
        state
    }

    /// Advances one policy interval.
    pub fn step(
        &self,
        state: &WorldState,
        commands: &[TaskSpaceCommand; 2],
    ) -> Result<(WorldState, StepEvents), SimError> {
        let cmds = self.prepare(commands)?;
        let mut next = state.clone();
        let mut events = StepEvents::default();
        for _ in 0..self.cfg.substeps() {
            events.merge(self.substep_clamped(&mut next, &cmds));
        }
        Ok((next, events))
    }

    /// Validates and clamps a command pair for use with [`Sim::substep`].
    pub fn prepare(
        &self,
        commands: &[TaskSpaceCommand; 2],
    ) -> Result<[TaskSpaceCommand; 2], SimError> {
        for (agent, c) in commands.iter().enumerate() {
            if !c.is_finite() {
                return Err(SimError::NonFiniteCommand { agent });
            }
        }
        Ok([
            self.clamp_command(0, &commands[0]),
            self.clamp_command(1, &commands[1]),
        ])
    }

    /// One high-rate substep with already prepared commands. `step` is exactly
    /// `substeps()` calls of this.
    pub fn substep(&self, state: &mut WorldState, cmds: &[TaskSpaceCommand; 2]) -> StepEvents {
        self.substep_clamped(state, cmds)
    }

    fn substep_clamped(&self, state: &mut WorldState, cmds: &[TaskSpaceCommand; 2]) -> StepEvents {
        let dt = self.cfg.dt_high();
        let k = 1.0 - (-dt / self.cfg.tau_track).exp();
        let mut events = StepEvents::default();
        let was_in_goal = self.detect_goal(state);
        for (a, cmd) in state.agents.iter_mut().zip(cmds) {
            self.track(a, cmd, k, dt);
            if self.resolve_walls(a) {
                events.wall_hit = true;
            }
            a.wrist_pos = [self.wrist_world(a, 0), self.wrist_world(a, 1)];
        }
        if !state.dropped {
            match self.scenario.task_mode {
                TaskMode::Carry => self.carry_update(state, dt, &mut events),
                TaskMode::Push => self.push_update(state, dt, &mut events),
            }
        }
        state.time += dt;
        if !was_in_goal && self.detect_goal(state) {
            events.goal_entry = true;
        }
        events
    }

    fn track(&self, a: &mut AgentState, cmd: &TaskSpaceCommand, k: f64, dt: f64) {
        let e = &self.scenario.embodiments[a.embodiment_id];
        let target = Vec2::new(cmd.v_base[0], cmd.v_base[1]).rotate(a.yaw);
        a.velocity = a.velocity + (target - a.velocity) * k;
        let body = a.velocity.rotate(-a.yaw);
        let body = Vec2::new(body.x.clamp(-e.max_vx, e.max_vx), body.y.clamp(-e.max_vy, e.max_vy));
        a.velocity = body.rotate(a.yaw);
        a.yaw_rate += (cmd.v_base[2] - a.yaw_rate) * k;
        a.yaw_rate = a.yaw_rate.clamp(-e.max_yaw_rate, e.max_yaw_rate);
        a.position = a.position + a.velocity * dt;
        a.yaw = wrap_angle(a.yaw + a.yaw_rate * dt);
        a.com_height += (cmd.h_com - a.com_height) * k;
        a.com_height = a.com_height.clamp(e.com_min, e.com_max);
        a.torso_pitch += (cmd.alpha_ptc - a.torso_pitch) * k;
        for (w, t) in a.wrist_body.iter_mut().zip(cmd.p_w) {
            *w = w.add(t.sub(*w).scale(k));
        }
    }

    /// Sliding projection of the agent disc out of walls. Returns whether any wall was touched.
    fn resolve_walls(&self, a: &mut AgentState) -> bool {
        let r = self.scenario.embodiments[a.embodiment_id].radius;
        let mut hit = false;
        for _ in 0..3 {
            let mut moved = false;
            for w in &self.walls {
                let c = w.closest_point(a.position);
                let d = c.dist(a.position);
                if d < r {
                    let n = if d > 1e-12 {
                        (a.position - c) * (1.0 / d)
                    } else {
                        (w.b - w.a).perp().normalized()
                    };
                    a.position = a.position + n * (r - d);
                    let vn = a.velocity.dot(n);
                    if vn < 0.0 {
                        a.velocity = a.velocity - n * vn;
                    }
                    hit = true;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        hit
    }

    fn object_collides(&self, pose: Pose2) -> bool {
        let rect = self.scenario.object.rect(pose);
        self.walls.iter().any(|w| rect.intersects_segment(w))
    }

    fn carry_update(&self, state: &mut WorldState, dt: f64, events: &mut StepEvents) {
        let obj = &self.scenario.object;
        let mut local = Vec::with_capacity(4);
        let mut world = Vec::with_capacity(4);
        for slot in 0..4 {
            if state.contacts[slot] {
                local.push(obj.handles[slot]);
                world.push(state.agents[slot / 2].wrist_pos[slot % 2].xy());
            }
        }
        let old = state.object.pose;
        if let Some(fit) = fit_se2(&local, &world) {
            let candidate = Pose2::new(fit.x, fit.y, old.heading + wrap_angle(fit.heading - old.heading));
            if self.object_collides(candidate) {
                events.wall_hit = true;
            } else {
                state.object.pose = candidate;
            }
        }
        let new = state.object.pose;
        state.object.planar_velocity = (new.position() - old.position()) * (1.0 / dt);
        state.object.heading_rate = wrap_angle(new.heading - old.heading) / dt;
        self.update_suspension(state);

        for slot in 0..4 {
            if !state.contacts[slot] {
                continue;
            }
            let handle = self.handle_world(state, slot);
            let wrist = state.agents[slot / 2].wrist_pos[slot % 2];
            if wrist.sub(handle).norm() > self.cfg.r_break {
                state.contacts[slot] = false;
            }
        }
        if state.contacts.iter().any(|c| !c) || state.object.com_height < self.cfg.z_min {
            state.dropped = true;
            events.drop = true;
        }
    }

    /// Realized 3D handle position on the object.
    pub fn handle_world(&self, state: &WorldState, slot: usize) -> Vec3 {
        let p = state.object.pose.apply(self.scenario.object.handles[slot]);
        Vec3::new(p.x, p.y, self.suspension_height(state, p))
    }

    fn grip_points(&self, state: &WorldState) -> [(Vec2, f64); 2] {
        let obj = &self.scenario.object;
        [0, 1].map(|agent| {
            let mut planar = Vec2::ZERO;
            let mut z = 0.0;
            let mut n = 0.0;
            for k in 0..2 {
                let slot = 2 * agent + k;
                if state.contacts[slot] {
                    planar = planar + state.object.pose.apply(obj.handles[slot]);
                    z += state.agents[agent].wrist_pos[k].z;
                    n += 1.0;
                }
            }
            if n == 0.0 {
                let mid = (obj.handles[2 * agent] + obj.handles[2 * agent + 1]) * 0.5;
                (state.object.pose.apply(mid), 0.0)
            } else {
                (planar * (1.0 / n), z / n)
            }
        })
    }

    /// Height of the suspension plane: through both grip points, level across the grip axis.
    fn suspension_height(&self, state: &WorldState, p: Vec2) -> f64 {
        let [(g0, z0), (g1, z1)] = self.grip_points(state);
        let axis = g1 - g0;
        let len = axis.norm();
        if len < 1e-9 {
            return 0.5 * (z0 + z1);
        }
        z0 + (z1 - z0) * (p - g0).dot(axis) / (len * len)
    }

    fn update_suspension(&self, state: &mut WorldState) {
        let obj = &self.scenario.object;
        let corners = obj.local_corners();
        let mut heights = [0.0; 4];
        for (h, c) in heights.iter_mut().zip(corners) {
            *h = self.suspension_height(state, state.object.pose.apply(c));
        }
        state.object.corner_heights = heights;
        state.object.com_height = self.suspension_height(state, state.object.position());
    }

    fn push_contacts(&self, state: &WorldState) -> [bool; 4] {
        let rect = self.scenario.object.rect(state.object.pose);
        let mut out = [false; 4];
        for slot in 0..4 {
            let w = state.agents[slot / 2].wrist_pos[slot % 2].xy();
            out[slot] = rect.distance_to_point(w) <= self.cfg.push_band;
        }
        out
    }

    /// Inward face normal and contact point (object frame) for a point outside the object.
    fn contact_face(&self, local: Vec2) -> (Vec2, Vec2) {
        let obj = &self.scenario.object;
        let ex = local.x.abs() - obj.half_x;
        let ey = local.y.abs() - obj.half_y;
        if ex >= ey {
            let s = local.x.signum();
            (
                Vec2::new(-s, 0.0),
                Vec2::new(s * obj.half_x, local.y.clamp(-obj.half_y, obj.half_y)),
            )
        } else {
            let s = local.y.signum();
            (
                Vec2::new(0.0, -s),
                Vec2::new(local.x.clamp(-obj.half_x, obj.half_x), s * obj.half_y),
            )
        }
    }

    fn push_update(&self, state: &mut WorldState, dt: f64, events: &mut StepEvents) {
        let obj = &self.scenario.object;
        let contacts = self.push_contacts(state);
        let pose = state.object.pose;
        let mut lin = Vec2::ZERO;
        let mut torque = 0.0;
        let mut inertia = (obj.half_x * obj.half_x + obj.half_y * obj.half_y) / 3.0;
        let mut n_contact = 0.0;
        for agent in 0..2 {
            if !(contacts[2 * agent] || contacts[2 * agent + 1]) {
                continue;
            }
            let a = &state.agents[agent];
            let mid = (a.wrist_pos[0].xy() + a.wrist_pos[1].xy()) * 0.5;
            let (n_local, c_local) = self.contact_face(pose.inverse_apply(mid));
            let n = n_local.rotate(pose.heading);
            let c = c_local.rotate(pose.heading);
            let s = a.velocity.dot(n).max(0.0);
            let f = n * s;
            lin = lin + f;
            torque += c.cross(f);
            let lever = c.cross(n);
            inertia += lever * lever;
            n_contact += 1.0;
        }
        if n_contact > 0.0 {
            state.object.planar_velocity = lin * (1.0 / n_contact);
            state.object.heading_rate = torque / inertia;
        } else {
            state.object.planar_velocity =
                state.object.planar_velocity * (-self.cfg.linear_damping * dt).exp();
            state.object.heading_rate *= (-self.cfg.angular_damping * dt).exp();
        }
        let v = state.object.planar_velocity;
        let candidate = Pose2::new(
            pose.x + v.x * dt,
            pose.y + v.y * dt,
            pose.heading + state.object.heading_rate * dt,
        );
        if self.object_collides(candidate) {
            events.wall_hit = true;
            state.object.planar_velocity = Vec2::ZERO;
            state.object.heading_rate = 0.0;
        } else {
            state.object.pose = candidate;
        }
        // keep pushers outside the object
        let rect = obj.rect(state.object.pose);
        for i in 0..2 {
            let a = &mut state.agents[i];
            let d = rect.distance_to_point(a.position);
            if d < self.cfg.push_reach {
                let local = state.object.pose.inverse_apply(a.position);
                let (n_local, c_local) = self.contact_face(local);
                let out = -n_local.rotate(state.object.pose.heading);
                let surface = state.object.pose.apply(c_local);
                let depth = if rect.contains(a.position) {
                    self.cfg.push_reach + (a.position - surface).norm()
                } else {
                    self.cfg.push_reach - d
                };
                a.position = a.position + out * depth;
                let w = [self.wrist_world(a, 0), self.wrist_world(a, 1)];
                a.wrist_pos = w;
            }
        }
        state.contacts = self.push_contacts(state);
        state.object.corner_heights = [obj.rest_height; 4];
        state.object.com_height = obj.rest_height;
        if state.object.com_height < self.cfg.z_min {
            state.dropped = true;
            events.drop = true;
        }
    }

    /// Rangefinder distances from the agent, at yaw-relative angles `2 pi k / n`.
    pub fn raycast(&self, state: &WorldState, agent: usize, n_rays: usize, d_max: f64) -> Vec<f64> {
        let a = &state.agents[agent];
        let rect = self.scenario.object.rect(state.object.pose);
        (0..n_rays)
            .map(|k| {
                let ang = a.yaw + std::f64::consts::TAU * k as f64 / n_rays as f64;
                let dir = Vec2::from_angle(ang);
                let mut best = d_max;
                for w in &self.walls {
                    if let Some(t) = w.ray_hit(a.position, dir) {
                        best = best.min(t);
                    }
                }
                if let Some(t) = rect.ray_hit(a.position, dir) {
                    best = best.min(t);
                }
                best.max(0.0)
            })
            .collect()
    }

    /// Object CoM inside the closed goal disc and not dropped.
    pub fn detect_goal(&self, state: &WorldState) -> bool {
        !state.dropped && self.scenario.goal.contains(state.object.position())
    }
}
