use super::{AnchorSequence, CandidateProposal, CognitionConfig, CognitionError};
use crate::geometry::{Segment, Vec2};
use crate::grid::OccupancyGrid;
use crate::scenario::GoalRegion;

/// Arc-length fraction of each anchor along the polyline that starts at the
/// proposal's route origin.
fn fractions(p: &CandidateProposal) -> Vec<f64> {
    let mut prev = p.route.first().copied().unwrap_or(p.anchors[0]);
    let mut acc = Vec::with_capacity(p.anchors.len());
    let mut total = 0.0;
    for &a in &p.anchors {
        total += prev.dist(a);
        acc.push(total);
        prev = a;
    }
    if total > 0.0 {
        acc.iter().map(|s| s / total).collect()
    } else {
        vec![1.0; acc.len()]
    }
}

fn nearest(fr: f64, other: &[f64]) -> usize {
    let mut best = 0;
    for (k, &f) in other.iter().enumerate() {
        if (f - fr).abs() < (other[best] - fr).abs() {
            best = k;
        }
    }
    best
}

fn on_route(route: &[Vec2], p: Vec2, tol: f64) -> bool {
    route
        .windows(2)
        .any(|w| Segment::new(w[0], w[1]).distance_to_point(p) <= tol)
}

fn visible(mask: &[bool], grid: &OccupancyGrid, p: Vec2) -> bool {
    grid.spec
        .cell_of(p)
        .is_some_and(|c| mask.get(grid.spec.index(c)).copied().unwrap_or(false))
}

/// Merges two agents' proposals into one anchor sequence.
///
/// Anchors are paired when each is the other's nearest by arc-length fraction.
/// Pairs within the merge radius are averaged; every other anchor survives only
/// if both agents see its cell or it lies on both routes. Survivors are ordered
/// by fraction (pairs use the mean fraction) and the result must satisfy the
/// sequence invariants, in particular the 2x spacing gap bound.
pub fn consensus(
    p0: &CandidateProposal,
    p1: &CandidateProposal,
    grid: &OccupancyGrid,
    goal: &GoalRegion,
    cfg: &CognitionConfig,
) -> Result<AnchorSequence, CognitionError> {
    if p0.anchors.is_empty() || p1.anchors.is_empty() {
        return Err(CognitionError::ConsensusFailure("empty proposal".into()));
    }
    let f0 = fractions(p0);
    let f1 = fractions(p1);
    let tol = 0.5 * grid.spec.resolution;
    let mut merged: Vec<(f64, Vec2)> = Vec::new();
    let mut used1 = vec![false; p1.anchors.len()];

    let keep_unpaired = |p: Vec2| {
        (visible(&p0.visibility_mask, grid, p) && visible(&p1.visibility_mask, grid, p))
            || (on_route(&p0.route, p, tol) && on_route(&p1.route, p, tol))
    };

    for (i, &a) in p0.anchors.iter().enumerate() {
        let j = nearest(f0[i], &f1);
        let mutual = nearest(f1[j], &f0) == i;
        let b = p1.anchors[j];
        if mutual && a.dist(b) <= cfg.merge_radius {
            used1[j] = true;
            merged.push(((f0[i] + f1[j]) * 0.5, (a + b) * 0.5));
        } else if keep_unpaired(a) {
            merged.push((f0[i], a));
        }
    }
    for (j, &b) in p1.anchors.iter().enumerate() {
        if !used1[j] && keep_unpaired(b) {
            merged.push((f1[j], b));
        }
    }
    merged.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.x.total_cmp(&b.1.x))
            .then(a.1.y.total_cmp(&b.1.y))
    });
    merged.dedup_by(|a, b| a.1 == b.1);

    let seq = AnchorSequence {
        anchors: merged.into_iter().map(|(_, p)| p).collect(),
        spacing: cfg.spacing,
    };
    seq.validate(grid, goal).map_err(|e| match e {
        CognitionError::InvalidSequence(m) => CognitionError::ConsensusFailure(m),
        other => other,
    })?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cognition::propose;
    use crate::geometry::Pose2;
    use crate::grid::{rasterize_on, GridSpec};

    fn open_grid() -> OccupancyGrid {
        rasterize_on(
            GridSpec {
                origin: Vec2::new(-2.0, -4.0),
                resolution: 0.25,
                m: 40,
            },
            &[],
            0.0,
        )
    }

    fn straight(dy: f64, idx: usize, grid: &OccupancyGrid) -> CandidateProposal {
        let anchors: Vec<Vec2> = (1..=5).map(|k| Vec2::new(k as f64, dy)).collect();
        CandidateProposal {
            agent_idx: idx,
            anchors: anchors.clone(),
            visibility_mask: vec![true; grid.spec.len()],
            scores: (1..=5).map(|k| -(5.0 - k as f64)).collect(),
            route: std::iter::once(Vec2::new(0.0, dy)).chain(anchors).collect(),
        }
    }

    fn goal() -> GoalRegion {
        GoalRegion {
            center: Vec2::new(5.0, 0.0),
            radius: 0.5,
        }
    }

    #[test]
    fn identical_proposals_are_idempotent() {
        let g = open_grid();
        let p = straight(0.0, 0, &g);
        let s = consensus(&p, &p, &g, &goal(), &CognitionConfig::default()).unwrap();
        assert_eq!(s.anchors, p.anchors);
    }

    #[test]
    fn lateral_offset_averages_to_midpoints() {
        let g = open_grid();
        let a = straight(0.1, 0, &g);
        let b = straight(-0.1, 1, &g);
        let s = consensus(&a, &b, &g, &goal(), &CognitionConfig::default()).unwrap();
        assert_eq!(s.anchors.len(), 5);
        for (k, p) in s.anchors.iter().enumerate() {
            assert_eq!(*p, Vec2::new((k + 1) as f64, 0.0));
        }
        let r = consensus(&b, &a, &g, &goal(), &CognitionConfig::default()).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn disjoint_routes_fail() {
        // a pillar between start and goal; agent 0 goes left, agent 1 right
        let spec = GridSpec {
            origin: Vec2::new(-2.0, -4.0),
            resolution: 0.25,
            m: 40,
        };
        let pillar = [
            Segment::new(Vec2::new(1.5, -1.5), Vec2::new(3.5, -1.5)),
            Segment::new(Vec2::new(3.5, -1.5), Vec2::new(3.5, 1.5)),
            Segment::new(Vec2::new(3.5, 1.5), Vec2::new(1.5, 1.5)),
            Segment::new(Vec2::new(1.5, 1.5), Vec2::new(1.5, -1.5)),
        ];
        let grid = rasterize_on(spec, &pillar, 0.2);
        let g = GoalRegion {
            center: Vec2::new(5.0, 0.0),
            radius: 0.5,
        };
        let cfg = CognitionConfig::default();
        let all = vec![true; spec.len()];
        // restrict each agent's view to its own side of the pillar
        let side = |up: bool| -> Vec<bool> {
            (0..spec.len())
                .map(|i| {
                    let c = spec.cell_center(spec.cell_at(i));
                    let inside_x = c.x > 1.0 && c.x < 4.0;
                    !inside_x || (up == (c.y > 0.0))
                })
                .collect()
        };
        // an off-grid eye sees nothing, so each route follows its known side
        let blind = Pose2::new(-100.0, 0.0, 0.0);
        let mut p0 = propose(&grid, Vec2::ZERO, &g, blind, 0, Some(&side(true)), &cfg).unwrap();
        let mut p1 = propose(&grid, Vec2::ZERO, &g, blind, 1, Some(&side(false)), &cfg).unwrap();
        assert!(p0.anchors.iter().any(|a| a.y > 1.5));
        assert!(p1.anchors.iter().any(|a| a.y < -1.5));
        p0.visibility_mask = all.clone();
        p1.visibility_mask = all;
        let err = consensus(&p0, &p1, &grid, &g, &cfg).unwrap_err();
        assert!(matches!(err, CognitionError::ConsensusFailure(_)), "{err}");
        assert!(err.to_string().starts_with("consensus failure"));
    }
}
