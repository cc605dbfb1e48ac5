use super::{CognitionConfig, CognitionError};
use crate::geometry::{Pose2, Segment, Vec2};
use crate::grid::{rasterize_on, Cell, OccupancyGrid};
use crate::scenario::{Embodiment, GoalRegion, Scenario};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProposal {
    pub agent_idx: usize,
    /// Ordered by intended traversal.
    pub anchors: Vec<Vec2>,
    /// Cells observed by the agent (plus shared known cells), row-major.
    pub visibility_mask: Vec<bool>,
    /// Negative remaining path length at each anchor.
    pub scores: Vec<f64>,
    /// Dense path the anchors were sampled from, starting at the object.
    pub route: Vec<Vec2>,
}

/// Cells in grid line of sight from `eye`: a cell counts as seen when its
/// center or any of four interior probe points is reachable by a ray that
/// crosses no occupied cell. Occupied cells are seen but block what is behind.
pub fn visibility(grid: &OccupancyGrid, eye: Vec2) -> Vec<bool> {
    let spec = grid.spec;
    let mut mask = vec![false; spec.len()];
    let Some(eye_cell) = spec.cell_of(eye) else {
        return mask;
    };
    let step = spec.resolution / 8.0;
    let q = 0.35 * spec.resolution;
    let probes = [
        Vec2::ZERO,
        Vec2::new(q, q),
        Vec2::new(-q, q),
        Vec2::new(q, -q),
        Vec2::new(-q, -q),
    ];
    let clear = |target: Cell, goal: Vec2| {
        let d = goal - eye;
        let n = (d.norm() / step).ceil() as usize;
        for s in 1..n {
            let p = eye + d * (s as f64 / n as f64);
            match spec.cell_of(p) {
                Some(c) if c == target => return true,
                Some(c) if c == eye_cell => {}
                Some(c) if grid.occupied(c) => return false,
                Some(_) => {}
                None => return false,
            }
        }
        true
    };
    for (idx, seen) in mask.iter_mut().enumerate() {
        let target = spec.cell_at(idx);
        let ctr = spec.cell_center(target);
        *seen = probes.iter().any(|&o| clear(target, ctr + o));
    }
    mask
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    f: f64,
    g: f64,
    idx: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f).then_with(|| o.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn octile(a: Cell, b: Cell) -> f64 {
    let dx = (a.i as f64 - b.i as f64).abs();
    let dy = (a.j as f64 - b.j as f64).abs();
    dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy)
}

/// A* over 8-connected free cells (unit / sqrt 2 costs, no corner cutting),
/// restricted to cells where `allowed` is true. Returns the cell path.
fn astar(grid: &OccupancyGrid, allowed: Option<&[bool]>, start: Cell, goal: Cell) -> Option<Vec<Cell>> {
    let spec = grid.spec;
    let ok = |c: Cell| grid.free(c) && allowed.is_none_or(|m| m[spec.index(c)]);
    if !ok(start) || !ok(goal) {
        return None;
    }
    let n = spec.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    let s = spec.index(start);
    g[s] = 0.0;
    heap.push(Frontier {
        f: octile(start, goal),
        g: 0.0,
        idx: s,
    });
    while let Some(Frontier { g: gc, idx, .. }) = heap.pop() {
        if closed[idx] {
            continue;
        }
        closed[idx] = true;
        let c = spec.cell_at(idx);
        if c == goal {
            let mut path = vec![c];
            let mut cur = idx;
            while parent[cur] != usize::MAX {
                cur = parent[cur];
                path.push(spec.cell_at(cur));
            }
            path.reverse();
            return Some(path);
        }
        for (nb, diag) in spec.neighbors8(c) {
            if !ok(nb) || (diag && !(ok(Cell { i: nb.i, j: c.j }) && ok(Cell { i: c.i, j: nb.j }))) {
                continue;
            }
            let ni = spec.index(nb);
            let cost = if diag { std::f64::consts::SQRT_2 } else { 1.0 };
            let ng = gc + cost;
            if ng < g[ni] {
                g[ni] = ng;
                parent[ni] = idx;
                heap.push(Frontier {
                    f: ng + octile(nb, goal),
                    g: ng,
                    idx: ni,
                });
            }
        }
    }
    None
}

/// Nearest free cell to `p` (breadth-first over rings), for starts that fall in
/// an inflated margin.
fn nearest_free(grid: &OccupancyGrid, p: Vec2) -> Option<Cell> {
    let c = grid.spec.cell_of(p)?;
    if grid.free(c) {
        return Some(c);
    }
    let m = grid.m() as i64;
    for r in 1..=2i64 {
        let mut best: Option<(f64, Cell)> = None;
        for dj in -r..=r {
            for di in -r..=r {
                let (i, j) = (c.i as i64 + di, c.j as i64 + dj);
                if i < 0 || j < 0 || i >= m || j >= m {
                    continue;
                }
                let n = Cell { i: i as usize, j: j as usize };
                if grid.free(n) {
                    let d = grid.spec.cell_center(n).dist(p);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, n));
                    }
                }
            }
        }
        if let Some((_, n)) = best {
            return Some(n);
        }
    }
    None
}

/// Length in meters of the unrestricted shortest grid path between two points.
pub fn shortest_path_length(grid: &OccupancyGrid, from: Vec2, to: Vec2) -> Option<f64> {
    let s = nearest_free(grid, from)?;
    let g = grid.spec.cell_of(to)?;
    let path = astar(grid, None, s, g)?;
    let mut len = 0.0;
    for w in path.windows(2) {
        len += grid.spec.cell_center(w[0]).dist(grid.spec.cell_center(w[1]));
    }
    Some(len)
}

/// Samples anchors every `spacing` meters along `route`; the route end is always
/// the final anchor.
fn sample_anchors(route: &[Vec2], spacing: f64) -> (Vec<Vec2>, Vec<f64>) {
    let total: f64 = route.windows(2).map(|w| w[0].dist(w[1])).sum();
    let mut anchors = Vec::new();
    let mut scores = Vec::new();
    let mut k = 1usize;
    let mut walked = 0.0;
    for w in route.windows(2) {
        let seg = w[0].dist(w[1]);
        while seg > 0.0 && (k as f64) * spacing <= walked + seg && (k as f64) * spacing < total - 0.5 * spacing {
            let s = k as f64 * spacing;
            anchors.push(w[0].lerp(w[1], (s - walked) / seg));
            scores.push(-(total - s));
            k += 1;
        }
        walked += seg;
    }
    anchors.push(*route.last().expect("route has an end"));
    scores.push(0.0);
    (anchors, scores)
}

fn route_from_cells(grid: &OccupancyGrid, from: Vec2, to: Vec2, cells: &[Cell]) -> Vec<Vec2> {
    let mut route = vec![from];
    if cells.len() > 2 {
        route.extend(cells[1..cells.len() - 1].iter().map(|&c| grid.spec.cell_center(c)));
    }
    route.push(to);
    route
}

/// Candidate anchors for the object CoM from one agent's line-of-sight view.
pub fn propose(
    grid: &OccupancyGrid,
    object_pos: Vec2,
    goal: &GoalRegion,
    agent_view: Pose2,
    agent_idx: usize,
    known: Option<&[bool]>,
    cfg: &CognitionConfig,
) -> Result<CandidateProposal, CognitionError> {
    let spec = grid.spec;
    let start = nearest_free(grid, object_pos).ok_or(CognitionError::OffGrid)?;
    let goal_cell = spec.cell_of(goal.center).ok_or(CognitionError::OffGrid)?;
    let mut mask = visibility(grid, agent_view.position());
    if let Some(k) = known {
        for (m, &kv) in mask.iter_mut().zip(k) {
            *m |= kv;
        }
    }
    // the object's own cell is always observed
    mask[spec.index(start)] = true;
    let cells = astar(grid, Some(&mask), start, goal_cell).ok_or(CognitionError::NoVisiblePath)?;
    let route = route_from_cells(grid, object_pos, goal.center, &cells);
    let (anchors, scores) = sample_anchors(&route, cfg.spacing);
    Ok(CandidateProposal {
        agent_idx,
        anchors,
        visibility_mask: mask,
        scores,
        route,
    })
}

fn clearance(walls: &[Segment], p: Vec2) -> f64 {
    walls
        .iter()
        .map(|w| w.distance_to_point(p))
        .fold(f64::INFINITY, f64::min)
}

/// Drops anchors without enough clearance for the object plus the agent's side
/// margin. Each run of dropped anchors is replaced by anchors sampled along a
/// path planned on a grid inflated by the required clearance, so order and the
/// spacing bound are preserved.
pub fn feasibility_filter(
    proposal: &CandidateProposal,
    grid: &OccupancyGrid,
    walls: &[Segment],
    scenario: &Scenario,
    embodiment: &Embodiment,
    cfg: &CognitionConfig,
) -> Result<CandidateProposal, CognitionError> {
    if proposal.anchors.is_empty() {
        return Err(CognitionError::NoFeasibleAnchors);
    }
    let required = 0.5 * scenario.object.minor_extent() + embodiment.side_margin;
    let keep: Vec<bool> = proposal
        .anchors
        .iter()
        .map(|&a| clearance(walls, a) >= required)
        .collect();
    if keep.iter().all(|&k| k) {
        return Ok(proposal.clone());
    }
    if !keep.last().copied().unwrap_or(false) {
        return Err(CognitionError::NoFeasibleAnchors);
    }
    let strict = rasterize_on(grid.spec, walls, required);
    let origin = proposal.route.first().copied().unwrap_or(proposal.anchors[0]);
    let mut anchors = Vec::with_capacity(proposal.anchors.len());
    let mut scores = Vec::with_capacity(proposal.anchors.len());
    let mut prev = (origin, proposal.scores[0] - origin.dist(proposal.anchors[0]));
    let mut gap = false;
    for (k, (&a, &s)) in proposal.anchors.iter().zip(&proposal.scores).enumerate() {
        if !keep[k] {
            gap = true;
            continue;
        }
        if gap {
            let from = nearest_free(&strict, prev.0).ok_or(CognitionError::NoFeasibleAnchors)?;
            let to = strict.spec.cell_of(a).ok_or(CognitionError::OffGrid)?;
            let cells = astar(&strict, None, from, to).ok_or(CognitionError::NoFeasibleAnchors)?;
            let detour = route_from_cells(&strict, prev.0, a, &cells);
            let (fill, _) = sample_anchors(&detour, cfg.spacing);
            let n = fill.len();
            for (i, p) in fill.into_iter().take(n - 1).enumerate() {
                anchors.push(p);
                scores.push(prev.1 + (s - prev.1) * (i + 1) as f64 / n as f64);
            }
            gap = false;
        }
        anchors.push(a);
        scores.push(s);
        prev = (a, s);
    }
    Ok(CandidateProposal {
        agent_idx: proposal.agent_idx,
        anchors,
        visibility_mask: proposal.visibility_mask.clone(),
        scores,
        route: proposal.route.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{rasterize, GridSpec};
    use crate::scenario::builtin;

    fn corridor_grid() -> (OccupancyGrid, Vec<Segment>) {
        let spec = GridSpec {
            origin: Vec2::new(-1.25, -3.25),
            resolution: 0.5,
            m: 16,
        };
        let walls = vec![
            Segment::new(Vec2::new(-1.0, -1.2), Vec2::new(6.5, -1.2)),
            Segment::new(Vec2::new(-1.0, 1.2), Vec2::new(6.5, 1.2)),
        ];
        (rasterize_on(spec, &walls, 0.3), walls)
    }

    #[test]
    fn straight_corridor_gives_collinear_anchors() {
        let (grid, _) = corridor_grid();
        let goal = GoalRegion {
            center: Vec2::new(5.0, 0.0),
            radius: 0.5,
        };
        let p = propose(
            &grid,
            Vec2::ZERO,
            &goal,
            Pose2::new(0.0, 0.0, 0.0),
            0,
            None,
            &CognitionConfig::default(),
        )
        .unwrap();
        assert_eq!(p.anchors.len(), 5);
        for (k, a) in p.anchors.iter().enumerate() {
            assert!((a.x - (k + 1) as f64).abs() < 1e-9 && a.y.abs() < 1e-9, "{a:?}");
        }
        assert!(goal.contains(*p.anchors.last().unwrap()));
        assert_eq!(p.scores.last(), Some(&0.0));
    }

    #[test]
    fn occluded_goal_has_no_visible_path() {
        // goal inside a closed box
        let spec = GridSpec {
            origin: Vec2::new(-1.25, -3.25),
            resolution: 0.5,
            m: 16,
        };
        let walls = vec![
            Segment::new(Vec2::new(3.0, -1.5), Vec2::new(6.0, -1.5)),
            Segment::new(Vec2::new(6.0, -1.5), Vec2::new(6.0, 1.5)),
            Segment::new(Vec2::new(6.0, 1.5), Vec2::new(3.0, 1.5)),
            Segment::new(Vec2::new(3.0, 1.5), Vec2::new(3.0, -1.5)),
        ];
        let grid = rasterize_on(spec, &walls, 0.0);
        let goal = GoalRegion {
            center: Vec2::new(4.5, 0.0),
            radius: 0.3,
        };
        let err = propose(
            &grid,
            Vec2::ZERO,
            &goal,
            Pose2::default(),
            0,
            None,
            &CognitionConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, CognitionError::NoVisiblePath);
        assert_eq!(err.to_string(), "no visible path");
    }

    #[test]
    fn wide_corridor_is_all_feasible_and_zero_margin_is_identity() {
        let sc = builtin("corridor").unwrap();
        let grid = rasterize(&sc, 32);
        let walls = sc.segments();
        let cfg = CognitionConfig::default();
        let p = propose(
            &grid,
            sc.start_pose.position(),
            &sc.goal,
            Pose2::default(),
            0,
            None,
            &cfg,
        )
        .unwrap();
        let f = feasibility_filter(&p, &grid, &walls, &sc, &sc.embodiments[0], &cfg).unwrap();
        assert_eq!(f, p);
        let mut emb = sc.embodiments[0].clone();
        emb.side_margin = 0.0;
        for id in ["S21", "S22", "S23", "S33"] {
            let sc = builtin(id).unwrap();
            let grid = rasterize(&sc, 32);
            let p = propose(
                &grid,
                sc.start_pose.position(),
                &sc.goal,
                sc.start_pose,
                0,
                Some(&vec![true; grid.spec.len()]),
                &cfg,
            )
            .unwrap();
            assert!(p.anchors.iter().all(|a| grid.free_at(*a)));
            let f = feasibility_filter(&p, &grid, &sc.segments(), &sc, &emb, &cfg).unwrap();
            assert_eq!(f, p, "{id}");
        }
    }
}
