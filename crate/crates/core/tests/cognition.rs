use cotransport::cognition::{
    consensus, feasibility_filter, plan_scenario, propose, shortest_path_length, CognitionConfig,
    CognitionError,
};
use cotransport::geometry::{Pose2, Segment, Vec2};
use cotransport::grid::{rasterize, rasterize_on, Cell, GridSpec};
use cotransport::scenario::{builtin, GoalRegion, BUILTIN_IDS};
use proptest::prelude::*;

fn polyline_len(from: Vec2, pts: &[Vec2]) -> f64 {
    let mut prev = from;
    let mut len = 0.0;
    for &p in pts {
        len += prev.dist(p);
        prev = p;
    }
    len
}

#[test]
fn s22_anchor_length_close_to_unrestricted_shortest_path() {
    let sc = builtin("S22").unwrap();
    let cfg = CognitionConfig::default();
    let grid = rasterize(&sc, cfg.grid_cells);
    let seq = plan_scenario(&sc, &cfg).unwrap();
    let start = sc.start_pose.position();
    let planned = polyline_len(start, &seq.anchors);
    let oracle = shortest_path_length(&grid, start, sc.goal.center).unwrap();
    let rel = (planned - oracle).abs() / oracle;
    assert!(rel <= 0.10, "anchors {planned:.3} m vs shortest {oracle:.3} m");
}

#[test]
fn s21_gate_is_free_and_posts_are_occupied() {
    let sc = builtin("S21").unwrap();
    let walls = sc.segments();
    // the gate opening measured directly from the post geometry
    let posts: Vec<&Segment> = walls
        .iter()
        .filter(|s| s.a.x == 3.0 && s.b.x == 3.0)
        .collect();
    assert_eq!(posts.len(), 2);
    let top_of_lower = posts.iter().map(|s| s.a.y.max(s.b.y)).filter(|y| *y < 0.0).fold(f64::MIN, f64::max);
    let bottom_of_upper = posts.iter().map(|s| s.a.y.min(s.b.y)).filter(|y| *y > 0.0).fold(f64::MAX, f64::min);
    assert!((bottom_of_upper - top_of_lower - 1.2).abs() < 1e-12);

    let grid = rasterize(&sc, 32);
    let infl = sc.plan_inflation();
    let spec = grid.spec;
    let half_diag = spec.resolution * std::f64::consts::FRAC_1_SQRT_2;
    for idx in 0..spec.len() {
        let c = spec.cell_at(idx);
        let ctr = spec.cell_center(c);
        let d = walls.iter().map(|w| w.distance_to_point(ctr)).fold(f64::INFINITY, f64::min);
        if d < infl {
            assert!(grid.occupied(c), "center in buffer but free: {c:?}");
        }
        if d >= infl + half_diag {
            assert!(grid.free(c), "square outside buffer but occupied: {c:?}");
        }
    }
    // the gate column: free cells only inside the opening, occupied at the posts
    let col = spec.cell_of(Vec2::new(3.0, 0.0)).unwrap().i;
    let free_rows: Vec<usize> = (0..spec.m)
        .filter(|&j| spec.cell_center(Cell { i: col, j }).y.abs() < 2.5 && grid.free(Cell { i: col, j }))
        .collect();
    assert!(!free_rows.is_empty());
    for &j in &free_rows {
        let y = spec.cell_center(Cell { i: col, j }).y;
        assert!(y.abs() < 0.6, "free cell at y={y} outside the gate");
    }
    assert!(grid.occupied(spec.cell_of(Vec2::new(3.0, 1.5)).unwrap()));
    assert!(grid.occupied(spec.cell_of(Vec2::new(3.0, -1.5)).unwrap()));
    // zero inflation: free extent of the gate column brackets the 1.2 m opening
    let raw = rasterize_on(spec, &walls, 0.0);
    let free = (0..spec.m)
        .filter(|&j| {
            let y = spec.cell_center(Cell { i: col, j }).y;
            y.abs() < 2.0 && raw.free(Cell { i: col, j })
        })
        .count() as f64
        * spec.resolution;
    assert!((free - 1.2).abs() <= 2.0 * spec.resolution, "free gate extent {free}");
}

#[test]
fn narrow_gate_anchor_removed_and_only_route_errors() {
    let mut sc = builtin("S21").unwrap();
    // a 0.7 m gate, narrower than minor extent 0.6 + 2 x 0.1 margin
    sc.walls[1] = vec![Vec2::new(3.0, -2.5), Vec2::new(3.0, -0.35)];
    sc.walls[2] = vec![Vec2::new(3.0, 0.35), Vec2::new(3.0, 2.5)];
    sc.plan_clearance = Some(0.05);
    let cfg = CognitionConfig::default();
    let grid = rasterize(&sc, 64);
    let walls = sc.segments();
    let p = propose(
        &grid,
        sc.start_pose.position(),
        &sc.goal,
        Pose2::default(),
        0,
        Some(&vec![true; grid.spec.len()]),
        &cfg,
    )
    .unwrap();
    let emb = &sc.embodiments[0];
    let required = 0.5 * sc.object.minor_extent() + emb.side_margin;
    // clearance oracle: brute-force distance from each anchor to every wall
    let blocked: Vec<bool> = p
        .anchors
        .iter()
        .map(|a| walls.iter().map(|w| w.distance_to_point(*a)).fold(f64::INFINITY, f64::min) < required)
        .collect();
    assert!(blocked.iter().any(|&b| b), "route should cross the gate");
    let err = feasibility_filter(&p, &grid, &walls, &sc, emb, &cfg).unwrap_err();
    assert_eq!(err, CognitionError::NoFeasibleAnchors);
    assert_eq!(err.to_string(), "no feasible anchors");

    // a second, wide opening elsewhere lets the filter re-route around the gate
    sc.walls[0] = vec![
        Vec2::new(-2.0, -2.5),
        Vec2::new(8.0, -2.5),
        Vec2::new(8.0, 2.5),
        Vec2::new(-2.0, 2.5),
        Vec2::new(-2.0, -2.5),
    ];
    sc.walls[2] = vec![Vec2::new(3.0, 0.35), Vec2::new(3.0, 1.0)];
    let grid = rasterize(&sc, 64);
    let walls = sc.segments();
    let p = propose(
        &grid,
        sc.start_pose.position(),
        &sc.goal,
        Pose2::default(),
        0,
        Some(&vec![true; grid.spec.len()]),
        &cfg,
    )
    .unwrap();
    let f = feasibility_filter(&p, &grid, &walls, &sc, emb, &cfg).unwrap();
    for a in &f.anchors {
        let d = walls.iter().map(|w| w.distance_to_point(*a)).fold(f64::INFINITY, f64::min);
        assert!(d >= required - 1e-12, "anchor {a:?} clearance {d}");
    }
    for w in f.anchors.windows(2) {
        assert!(w[0].dist(w[1]) <= 2.0 * cfg.spacing + 1e-9);
    }
}

#[test]
fn builtin_plans_are_deterministic_and_valid() {
    let cfg = CognitionConfig::default();
    for id in BUILTIN_IDS {
        let sc = builtin(id).unwrap();
        let a = plan_scenario(&sc, &cfg).unwrap();
        let b = plan_scenario(&sc, &cfg).unwrap();
        assert_eq!(a, b, "{id}");
        a.validate(&rasterize(&sc, cfg.grid_cells), &sc.goal).unwrap();
    }
}

fn random_walls(seed: &[(f64, f64, f64, bool)]) -> Vec<Segment> {
    seed.iter()
        .map(|&(x, y, len, horiz)| {
            let a = Vec2::new(x, y);
            let b = if horiz { Vec2::new(x + len, y) } else { Vec2::new(x, y + len) };
            Segment::new(a, b)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emitted_sequences_satisfy_invariants(
        blocks in prop::collection::vec((1.0f64..7.0, -3.0f64..3.0, 0.5f64..2.5, any::<bool>()), 0..6),
        ex in -1.0f64..1.0,
        ey in -1.0f64..1.0,
    ) {
        let spec = GridSpec { origin: Vec2::new(-2.0, -4.0), resolution: 0.35, m: 32 };
        let walls = random_walls(&blocks);
        let grid = rasterize_on(spec, &walls, 0.3);
        let goal = GoalRegion { center: spec.cell_center(spec.cell_of(Vec2::new(7.5, 0.0)).unwrap()), radius: 0.5 };
        let start = spec.cell_center(spec.cell_of(Vec2::new(-1.0, 0.0)).unwrap());
        prop_assume!(grid.free_at(start) && grid.free_at(goal.center));
        let cfg = CognitionConfig::default();
        let eye0 = start + Vec2::new(ex, ey);
        let eye1 = start - Vec2::new(ex, ey);
        let p0 = propose(&grid, start, &goal, Pose2::new(eye0.x, eye0.y, 0.0), 0, None, &cfg);
        let p1 = propose(&grid, start, &goal, Pose2::new(eye1.x, eye1.y, 0.0), 1, None, &cfg);
        if let (Ok(p0), Ok(p1)) = (p0, p1) {
            for p in [&p0, &p1] {
                for a in &p.anchors {
                    let c = spec.cell_of(*a).unwrap();
                    prop_assert!(grid.free(c));
                    prop_assert!(p.visibility_mask[spec.index(c)]);
                }
            }
            let fwd = consensus(&p0, &p1, &grid, &goal, &cfg);
            let back = consensus(&p1, &p0, &grid, &goal, &cfg);
            prop_assert_eq!(&fwd, &back);
            if let Ok(seq) = fwd {
                prop_assert!(seq.validate(&grid, &goal).is_ok());
            }
            let same = consensus(&p0, &p0, &grid, &goal, &cfg).unwrap();
            prop_assert_eq!(same.anchors, p0.anchors);
        }
    }

    #[test]
    fn rasterize_monotone_in_inflation(
        blocks in prop::collection::vec((1.0f64..7.0, -3.0f64..3.0, 0.5f64..2.5, any::<bool>()), 1..6),
        r in 0.0f64..0.6,
        dr in 0.0f64..0.6,
    ) {
        let spec = GridSpec { origin: Vec2::new(-2.0, -4.0), resolution: 0.35, m: 24 };
        let walls = random_walls(&blocks);
        let a = rasterize_on(spec, &walls, r);
        let b = rasterize_on(spec, &walls, r + dr);
        for i in 0..spec.len() {
            prop_assert!(!a.cells[i] || b.cells[i]);
        }
        prop_assert_eq!(a.to_bitstring(), rasterize_on(spec, &walls, r).to_bitstring());
        for w in &walls {
            let any = (0..spec.len()).any(|i| b.cells[i] && spec.cell_rect(spec.cell_at(i)).distance_to_segment(w) <= r + dr);
            let inside = spec.cell_of(w.a).is_some() || spec.cell_of(w.b).is_some();
            prop_assert!(!inside || any);
        }
    }
}

#[test]
fn every_builtin_start_connects_to_goal() {
    for id in BUILTIN_IDS {
        let sc = builtin(id).unwrap();
        let g = rasterize(&sc, 32);
        let s = g.spec.cell_of(sc.start_pose.position()).unwrap();
        let t = g.spec.cell_of(sc.goal.center).unwrap();
        assert!(g.connected(s, t), "{id}");
    }
}
