use super::reward::AnchorTracker;
use super::ACTION_DIM;
use crate::cognition::AnchorSequence;
use crate::geometry::{wrap_angle, Vec2};
use crate::scenario::TaskMode;
use crate::sim::{Sim, TaskSpaceCommand, WorldState};
use serde::{Deserialize, Serialize};

/// Diagonal of the residual scaling matrix, in command units per unit action.
pub type ScaleVector = [f64; ACTION_DIM];

/// Gains of the anchor-tracking base controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Proportional gain from anchor offset to object velocity (1/s).
    pub k_p: f64,
    /// Object speed clamp (m/s).
    pub v_max: f64,
    /// Heading gain (1/s).
    pub k_theta: f64,
    /// Object turn-rate clamp (rad/s).
    pub omega_max: f64,
    /// Tangential speed limit of the outermost station while turning (m/s).
    pub station_speed: f64,
    /// Station-keeping gain (1/s).
    pub k_station: f64,
    /// Yaw alignment gain (1/s).
    pub k_yaw: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            k_p: 0.5,
            v_max: 0.4,
            k_theta: 0.8,
            omega_max: 0.4,
            station_speed: 0.3,
            k_station: 1.0,
            k_yaw: 1.5,
        }
    }
}

/// Desired object twist toward the current anchor: planar velocity and turn rate.
fn object_twist(
    sim: &Sim,
    state: &WorldState,
    seq: &AnchorSequence,
    tracker: &AnchorTracker,
    cfg: &ControlConfig,
) -> (Vec2, f64) {
    let obj = &state.object;
    let p = obj.position();
    let idx = tracker.index.min(seq.anchors.len() - 1);
    let target = seq.anchors[idx];
    let push = sim.scenario.task_mode == TaskMode::Push;
    let tangent = if push {
        // pushed objects only move along their heading: steer toward the anchor
        target - p
    } else {
        let prev = if idx == 0 { tracker.origin } else { seq.anchors[idx - 1] };
        let t = target - prev;
        if t.norm() < 1e-9 {
            target - p
        } else {
            t
        }
    };
    let mut v = ((target - p) * cfg.k_p).clamp_norm(cfg.v_max);
    if push {
        let fwd = Vec2::from_angle(obj.pose.heading);
        v = fwd * v.dot(fwd).max(0.0);
    }
    let omega = if tangent.norm() < 1e-9 {
        0.0
    } else {
        let desired = tangent.angle() + sim.scenario.travel_heading_offset;
        let r_max = sim
            .scenario
            .stations
            .iter()
            .map(|s| s.offset.norm())
            .fold(0.0, f64::max);
        let lim = if r_max > 0.0 {
            cfg.omega_max.min(cfg.station_speed / r_max)
        } else {
            cfg.omega_max
        };
        (cfg.k_theta * wrap_angle(desired - obj.pose.heading)).clamp(-lim, lim)
    };
    (v, omega)
}

/// Base command for one agent: move the object toward the current anchor while
/// keeping the agent on its station, with default posture and wrists. Carried
/// objects translate freely and align with the path tangent; pushed objects
/// move along their heading and turn toward the anchor.
/// Without guidance the object is held in place.
pub fn nominal_controller(
    sim: &Sim,
    state: &WorldState,
    agent: usize,
    guidance: Option<(&AnchorSequence, &AnchorTracker)>,
    cfg: &ControlConfig,
) -> TaskSpaceCommand {
    let (v_obj, omega) = match guidance {
        Some((seq, tr)) if !seq.anchors.is_empty() => object_twist(sim, state, seq, tr, cfg),
        _ => (Vec2::ZERO, 0.0),
    };
    let obj = &state.object;
    let me = &state.agents[agent];
    let st = sim.scenario.stations[agent];
    let station = obj.pose.apply(st.offset);
    let r = station - obj.position();
    let v_world = v_obj + r.perp() * omega + (station - me.position) * cfg.k_station;
    let v_body = v_world.rotate(-me.yaw);
    let yaw_err = wrap_angle(obj.pose.heading + st.yaw - me.yaw);
    let mut cmd = sim.default_command(agent);
    cmd.v_base = [v_body.x, v_body.y, omega + cfg.k_yaw * yaw_err];
    cmd
}

/// `u = u_base + M a`, component-wise, then clamped to the agent's bounds.
pub fn residual_map(
    sim: &Sim,
    agent: usize,
    action: &[f64; ACTION_DIM],
    base: &TaskSpaceCommand,
    scaling: &ScaleVector,
) -> TaskSpaceCommand {
    let mut u = base.to_array();
    for ((u, a), m) in u.iter_mut().zip(action).zip(scaling) {
        *u += m * a;
    }
    sim.clamp_command(agent, &TaskSpaceCommand::from_array(&u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardConfig;
    use crate::scenario::builtin;
    use crate::sim::SimConfig;

    fn still(id: &str) -> Sim {
        let mut sc = builtin(id).unwrap();
        sc.start_jitter.position = 0.0;
        sc.start_jitter.heading = 0.0;
        Sim::new(sc, SimConfig::default())
    }

    fn seq(pts: &[(f64, f64)]) -> AnchorSequence {
        AnchorSequence {
            anchors: pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect(),
            spacing: 1.0,
        }
    }

    #[test]
    fn object_at_anchor_gives_zero_velocity() {
        let sim = still("corridor");
        let st = sim.reset(0);
        let p = st.object.position();
        let s = seq(&[(p.x, p.y)]);
        let tr = AnchorTracker::new(p);
        for a in 0..2 {
            let c = nominal_controller(&sim, &st, a, Some((&s, &tr)), &ControlConfig::default());
            assert_eq!(c.v_base, [0.0; 3]);
        }
    }

    #[test]
    fn anchor_ahead_saturates_forward_speed() {
        // push stations face +x, so body x is world x
        let sim = still("S11");
        let st = sim.reset(0);
        let p = st.object.position();
        let h = st.object.pose.heading;
        let ahead = p + Vec2::from_angle(h);
        let s = seq(&[(ahead.x, ahead.y)]);
        let tr = AnchorTracker::new(p);
        for a in 0..2 {
            let c = nominal_controller(&sim, &st, a, Some((&s, &tr)), &ControlConfig::default());
            assert!((c.v_base[0] - 0.4).abs() < 1e-12, "{:?}", c.v_base);
            assert!(c.v_base[1].abs() < 1e-12);
        }
    }

    #[test]
    fn carry_default_wrists_are_on_handles() {
        let sim = still("S21");
        let st = sim.reset(0);
        for a in 0..2 {
            let c = nominal_controller(&sim, &st, a, None, &ControlConfig::default());
            assert_eq!(c.p_w, st.agents[a].wrist_body);
            for k in 0..2 {
                let h = sim.handle_world(&st, 2 * a + k);
                assert!(st.agents[a].wrist_pos[k].sub(h).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn residual_examples() {
        let mut sc = builtin("corridor").unwrap();
        sc.embodiments[0].max_vx = 0.4;
        let sim = Sim::new(sc, SimConfig::default());
        let m = RewardConfig::default().scaling;
        let mut base = sim.default_command(0);
        base.v_base[0] = 0.2;
        assert_eq!(residual_map(&sim, 0, &[0.0; 11], &base, &m), base);
        let mut a = [0.0; 11];
        a[0] = 1.0;
        assert_eq!(residual_map(&sim, 0, &a, &base, &m).v_base[0], 0.4);
        let mut a = [0.0; 11];
        a[3] = -1.0;
        let u = residual_map(&sim, 0, &a, &base, &m);
        assert!((u.h_com - 0.6).abs() < 1e-12);
    }
}
