use super::control::ScaleVector;
use crate::cognition::AnchorSequence;
use crate::geometry::{Segment, Vec2};
use crate::scenario::TaskMode;
use crate::sim::WorldState;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_drop: f64,
    /// Lateral deviation from the anchor polyline beyond which progress is zeroed (m).
    pub delta: f64,
    /// Distance at which the current anchor counts as reached (m).
    pub capture_radius: f64,
    /// Residual action scaling: v_x, v_y, yaw rate, CoM height, pitch, wrists.
    pub scaling: ScaleVector,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma_drop: 10.0,
            delta: 1.0,
            capture_radius: 0.3,
            scaling: [0.3, 0.3, 0.5, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
        }
    }
}

/// Current anchor index and the object position the route starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTracker {
    pub index: usize,
    pub origin: Vec2,
}

impl AnchorTracker {
    pub fn new(origin: Vec2) -> Self {
        Self { index: 0, origin }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub reward: f64,
    /// Distance decrease toward the current anchor before gating.
    pub progress: f64,
    pub tilt: f64,
    pub gated: bool,
    pub terminal_drop: bool,
}

/// `sum_j |z_j - mean(z)|` over the corner heights.
pub fn tilt_spread(z: &[f64; 4]) -> f64 {
    let mean = z.iter().sum::<f64>() / 4.0;
    z.iter().map(|v| (v - mean).abs()).sum()
}

/// Distance from `p` to the polyline `origin, anchors...`.
pub fn lateral_deviation(p: Vec2, origin: Vec2, anchors: &[Vec2]) -> f64 {
    let mut prev = origin;
    let mut best = p.dist(origin);
    for &a in anchors {
        best = best.min(Segment::new(prev, a).distance_to_point(p));
        prev = a;
    }
    best
}

/// Shared team reward for one policy step; advances the tracker past any
/// anchor captured by `next`.
pub fn compute_reward(
    prev: &WorldState,
    next: &WorldState,
    anchors: &AnchorSequence,
    tracker: &mut AnchorTracker,
    cfg: &RewardConfig,
    mode: TaskMode,
) -> RewardOutcome {
    let p0 = prev.object.position();
    let p1 = next.object.position();
    let last = anchors.anchors.len().saturating_sub(1);
    let (progress, gated) = if anchors.anchors.is_empty() {
        (0.0, false)
    } else {
        let w = anchors.anchors[tracker.index.min(last)];
        let progress = p0.dist(w) - p1.dist(w);
        while tracker.index < last && p1.dist(anchors.anchors[tracker.index]) <= cfg.capture_radius {
            tracker.index += 1;
        }
        let gated = lateral_deviation(p1, tracker.origin, &anchors.anchors) > cfg.delta;
        (progress, gated)
    };
    let tilt = match mode {
        TaskMode::Carry => tilt_spread(&next.object.corner_heights),
        TaskMode::Push => 0.0,
    };
    let terminal_drop = next.dropped && !prev.dropped;
    let mut reward = -cfg.beta * tilt;
    if !gated {
        reward += cfg.alpha * progress;
    }
    if terminal_drop {
        reward -= cfg.gamma_drop;
    }
    RewardOutcome {
        reward,
        progress,
        tilt,
        gated,
        terminal_drop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::builtin;
    use crate::sim::{Sim, SimConfig};

    fn setup() -> (WorldState, AnchorSequence, AnchorTracker) {
        let sim = Sim::new(builtin("S11").unwrap(), SimConfig::default());
        let st = sim.reset(0);
        let p = st.object.position();
        let seq = AnchorSequence {
            anchors: vec![p + Vec2::new(1.0, 0.0), p + Vec2::new(2.0, 0.0)],
            spacing: 1.0,
        };
        (st, seq, AnchorTracker::new(p))
    }

    #[test]
    fn still_level_gives_zero() {
        let (st, seq, mut tr) = setup();
        let o = compute_reward(&st, &st, &seq, &mut tr, &RewardConfig::default(), TaskMode::Carry);
        assert_eq!(o.reward, 0.0);
        assert!(!o.gated && !o.terminal_drop);
    }

    #[test]
    fn progress_and_drop() {
        let (st, seq, mut tr) = setup();
        let mut next = st.clone();
        next.object.pose.x += 0.1;
        let cfg = RewardConfig::default();
        let o = compute_reward(&st, &next, &seq, &mut tr, &cfg, TaskMode::Push);
        assert!((o.reward - 0.1).abs() < 1e-12);
        next.dropped = true;
        let mut tr = AnchorTracker::new(st.object.position());
        let o = compute_reward(&st, &next, &seq, &mut tr, &cfg, TaskMode::Push);
        assert!(o.terminal_drop);
        assert!((o.reward - (0.1 - 10.0)).abs() < 1e-12);
    }

    #[test]
    fn capture_advances_and_deviation_gates() {
        let (st, seq, mut tr) = setup();
        let cfg = RewardConfig::default();
        let mut next = st.clone();
        next.object.pose.x += 0.8;
        compute_reward(&st, &next, &seq, &mut tr, &cfg, TaskMode::Push);
        assert_eq!(tr.index, 1);
        let mut far = next.clone();
        far.object.pose.y += 1.5;
        let o = compute_reward(&next, &far, &seq, &mut tr, &cfg, TaskMode::Push);
        assert!(o.gated);
        assert_eq!(o.reward, 0.0);
    }
}
