//! Occupancy rasterization of scenario walls.

use crate::geometry::{Pose2, Rect, Segment, Vec2};
use crate::scenario::Scenario;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const DEFAULT_GRID_CELLS: usize = 32;
pub const MIN_GRID_CELLS: usize = 8;

/// Placement of an `m x m` grid in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// World coordinates of the lower-left corner of cell (0, 0).
    pub origin: Vec2,
    pub resolution: f64,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl GridSpec {
    /// Covers the scenario bounds plus a 1 m margin with square cells, shifted
    /// so the object start position sits at a cell center.
    pub fn covering(scenario: &Scenario, m: usize) -> GridSpec {
        assert!(m >= MIN_GRID_CELLS, "grid needs at least {MIN_GRID_CELLS} cells per side");
        let (lo, hi) = scenario.bounds();
        let lo = lo - Vec2::new(1.0, 1.0);
        let hi = hi + Vec2::new(1.0, 1.0);
        let extent = (hi.x - lo.x).max(hi.y - lo.y);
        let res = extent / (m - 1) as f64;
        let s = scenario.start_pose.position();
        let align = |start: f64, low: f64| {
            let k = ((start - low) / res - 0.5).ceil().max(0.0);
            start - (k + 0.5) * res
        };
        GridSpec {
            origin: Vec2::new(align(s.x, lo.x), align(s.y, lo.y)),
            resolution: res,
            m,
        }
    }

    pub fn cell_center(&self, c: Cell) -> Vec2 {
        self.origin
            + Vec2::new(
                (c.i as f64 + 0.5) * self.resolution,
                (c.j as f64 + 0.5) * self.resolution,
            )
    }

    pub fn cell_of(&self, p: Vec2) -> Option<Cell> {
        let fx = ((p.x - self.origin.x) / self.resolution).floor();
        let fy = ((p.y - self.origin.y) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.m as f64 || fy >= self.m as f64 {
            return None;
        }
        Some(Cell {
            i: fx as usize,
            j: fy as usize,
        })
    }

    pub fn cell_rect(&self, c: Cell) -> Rect {
        let h = 0.5 * self.resolution;
        let ctr = self.cell_center(c);
        Rect {
            pose: Pose2::new(ctr.x, ctr.y, 0.0),
            half_x: h,
            half_y: h,
        }
    }

    pub fn index(&self, c: Cell) -> usize {
        c.j * self.m + c.i
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        Cell {
            i: idx % self.m,
            j: idx / self.m,
        }
    }

    pub fn len(&self) -> usize {
        self.m * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn neighbors8(&self, c: Cell) -> impl Iterator<Item = (Cell, bool)> + '_ {
        const OFFS: [(i64, i64); 8] = [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ];
        let m = self.m as i64;
        OFFS.iter().filter_map(move |&(di, dj)| {
            let i = c.i as i64 + di;
            let j = c.j as i64 + dj;
            if i < 0 || j < 0 || i >= m || j >= m {
                None
            } else {
                Some((
                    Cell {
                        i: i as usize,
                        j: j as usize,
                    },
                    di != 0 && dj != 0,
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    /// Row-major, `cells[j * m + i]`, true = occupied.
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            cells: vec![false; spec.len()],
        }
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn occupied(&self, c: Cell) -> bool {
        self.cells[self.spec.index(c)]
    }

    pub fn free(&self, c: Cell) -> bool {
        !self.occupied(c)
    }

    /// Whether a world point falls in a free cell (points off-grid are not free).
    pub fn free_at(&self, p: Vec2) -> bool {
        self.spec.cell_of(p).is_some_and(|c| self.free(c))
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Row-major '0'/'1' string.
    pub fn to_bitstring(&self) -> String {
        self.cells.iter().map(|&c| if c { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(spec: GridSpec, bits: &str) -> Option<Self> {
        if bits.len() != spec.len() {
            return None;
        }
        let cells = bits
            .chars()
            .map(|ch| match ch {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { spec, cells })
    }

    /// 8-connected flood fill between two cells, with no corner cutting.
    pub fn connected(&self, a: Cell, b: Cell) -> bool {
        if self.occupied(a) || self.occupied(b) {
            return false;
        }
        let mut seen = vec![false; self.spec.len()];
        let mut q = VecDeque::new();
        seen[self.spec.index(a)] = true;
        q.push_back(a);
        while let Some(c) = q.pop_front() {
            if c == b {
                return true;
            }
            for (n, diag) in self.spec.neighbors8(c) {
                let idx = self.spec.index(n);
                if seen[idx] || self.occupied(n) {
                    continue;
                }
                if diag && !self.diagonal_clear(c, n) {
                    continue;
                }
                seen[idx] = true;
                q.push_back(n);
            }
        }
        false
    }

    /// A diagonal move is allowed only when both orthogonal neighbors are free.
    pub fn diagonal_clear(&self, a: Cell, b: Cell) -> bool {
        self.free(Cell { i: b.i, j: a.j }) && self.free(Cell { i: a.i, j: b.j })
    }
}

/// Rasterizes with the scenario's planning inflation onto the default covering grid.
pub fn rasterize(scenario: &Scenario, m: usize) -> OccupancyGrid {
    let spec = GridSpec::covering(scenario, m);
    rasterize_on(spec, &scenario.segments(), scenario.plan_inflation())
}

/// Marks a cell occupied iff its square comes within `inflation` of a wall.
/// With zero inflation the square is treated as half-open `[x0, x1) x [y0, y1)`,
/// so a wall lying on a shared cell boundary claims exactly one side.
pub fn rasterize_on(spec: GridSpec, walls: &[Segment], inflation: f64) -> OccupancyGrid {
    let mut grid = OccupancyGrid::empty(spec);
    for idx in 0..spec.len() {
        let cell = spec.cell_at(idx);
        let rect = spec.cell_rect(cell);
        grid.cells[idx] = walls.iter().any(|w| {
            if inflation > 0.0 {
                rect.distance_to_segment(w) < inflation
            } else {
                segment_hits_half_open_square(w, &spec, cell)
            }
        });
    }
    grid
}

fn segment_hits_half_open_square(s: &Segment, spec: &GridSpec, c: Cell) -> bool {
    let x0 = spec.origin.x + c.i as f64 * spec.resolution;
    let y0 = spec.origin.y + c.j as f64 * spec.resolution;
    let x1 = x0 + spec.resolution;
    let y1 = y0 + spec.resolution;
    let d = s.b - s.a;
    // Feasible parameter interval; closed bounds on the low side, open on the high side.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut lo_open = false;
    let mut hi_open = false;
    for (p, dp, min, max) in [(s.a.x, d.x, x0, x1), (s.a.y, d.y, y0, y1)] {
        if dp == 0.0 {
            if p < min || p >= max {
                return false;
            }
            continue;
        }
        let ta = (min - p) / dp;
        let tb = (max - p) / dp;
        // ta: boundary where coordinate == min (closed), tb: == max (open)
        let (enter, enter_open, exit, exit_open) = if dp > 0.0 {
            (ta, false, tb, true)
        } else {
            (tb, true, ta, false)
        };
        if enter > lo || (enter == lo && enter_open) {
            lo = enter;
            lo_open = enter_open;
        }
        if exit < hi || (exit == hi && exit_open) {
            hi = exit;
            hi_open = exit_open;
        }
    }
    lo < hi || (lo == hi && !lo_open && !hi_open)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::builtin;

    fn spec16() -> GridSpec {
        GridSpec {
            origin: Vec2::new(0.0, 0.0),
            resolution: 0.5,
            m: 16,
        }
    }

    #[test]
    fn no_walls_all_free() {
        let g = rasterize_on(spec16(), &[], 0.3);
        assert_eq!(g.occupied_count(), 0);
    }

    #[test]
    fn mid_height_wall_fills_one_row() {
        let spec = spec16();
        let y = spec.origin.y + 0.5 * spec.m as f64 * spec.resolution;
        let wall = Segment::new(Vec2::new(-1.0, y), Vec2::new(9.0, y));
        let g = rasterize_on(spec, &[wall], 0.0);
        assert_eq!(g.occupied_count(), spec.m);
        let rows: std::collections::BTreeSet<_> = (0..spec.len())
            .filter(|&i| g.cells[i])
            .map(|i| spec.cell_at(i).j)
            .collect();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn covering_grid_centers_start() {
        for id in crate::scenario::BUILTIN_IDS {
            let sc = builtin(id).unwrap();
            let spec = GridSpec::covering(&sc, DEFAULT_GRID_CELLS);
            let c = spec.cell_of(sc.start_pose.position()).unwrap();
            assert!(spec.cell_center(c).dist(sc.start_pose.position()) < 1e-9, "{id}");
            let (lo, hi) = sc.bounds();
            assert!(spec.origin.x <= lo.x && spec.origin.y <= lo.y);
            let top = spec.origin + Vec2::new(1.0, 1.0) * (spec.resolution * spec.m as f64);
            assert!(top.x >= hi.x && top.y >= hi.y, "{id}");
        }
    }

    #[test]
    fn bitstring_round_trip() {
        let sc = builtin("S21").unwrap();
        let g = rasterize(&sc, 32);
        let back = OccupancyGrid::from_bitstring(g.spec, &g.to_bitstring()).unwrap();
        assert_eq!(g, back);
    }
}
