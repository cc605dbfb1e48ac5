use cotransport::env::{EnvConfig, TransportEnv};
use cotransport::mdp::{
    layout_schema, range_feature, residual_map, tilt_spread, ScaleVector, ACTION_DIM, OBS_DIM,
};
use cotransport::scenario::{builtin, BUILTIN_IDS};
use cotransport::sim::{Sim, SimConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn layout_schema_file_is_current() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/schema/layout_v1.json");
    let current = serde_json::to_string_pretty(&layout_schema()).unwrap() + "\n";
    if std::env::var_os("UPDATE_SCHEMA").is_some() {
        std::fs::create_dir_all(concat!(env!("CARGO_MANIFEST_DIR"), "/schema")).unwrap();
        std::fs::write(path, &current).unwrap();
    }
    let stored = std::fs::read_to_string(path).expect("schema file missing; run with UPDATE_SCHEMA=1");
    assert_eq!(stored, current, "layout changed; regenerate with UPDATE_SCHEMA=1");
}

#[test]
fn schema_offsets_cover_vectors_contiguously() {
    let s = layout_schema();
    assert_eq!(s.observation.len(), OBS_DIM);
    assert_eq!(s.action.len(), ACTION_DIM);
    for (i, slot) in s.observation.iter().chain(&s.action).enumerate() {
        let expect = if i < OBS_DIM { i } else { i - OBS_DIM };
        assert_eq!(slot.offset, expect, "{}", slot.name);
    }
}

fn random_actions(rng: &mut ChaCha8Rng) -> [[f64; ACTION_DIM]; 2] {
    [0, 1].map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn range_feature_in_unit_interval(d in 0.0f64..100.0, d_max in 0.1f64..20.0) {
        let f = range_feature(d, d_max);
        prop_assert!((0.0..=1.0).contains(&f));
        if d >= d_max {
            prop_assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn tilt_term_is_translation_invariant(
        z in prop::array::uniform4(-1.0f64..1.0),
        c in -5.0f64..5.0,
    ) {
        let shifted = z.map(|v| v + c);
        prop_assert!((tilt_spread(&shifted) - tilt_spread(&z)).abs() <= 1e-12);
    }

    #[test]
    fn zero_residual_is_clamped_base(idx in 0usize..BUILTIN_IDS.len(), seed in 0u64..1000, agent in 0usize..2) {
        let mut env = TransportEnv::new(builtin(BUILTIN_IDS[idx]).unwrap(), EnvConfig::default()).unwrap();
        env.reset(seed).unwrap();
        let base = env.base_commands()[agent];
        let u = residual_map(&env.sim, agent, &[0.0; ACTION_DIM], &base, &ScaleVector::default());
        prop_assert_eq!(u, env.sim.clamp_command(agent, &base));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episode_progress_bounded_by_path_length(idx in 0usize..BUILTIN_IDS.len(), seed in 0u64..10_000) {
        let mut env = TransportEnv::new(builtin(BUILTIN_IDS[idx]).unwrap(), EnvConfig::default()).unwrap();
        env.reset(seed).unwrap();
        let seq = env.anchors().unwrap().clone();
        let mut len = env.state().object.position().dist(seq.anchors[0]);
        for w in seq.anchors.windows(2) {
            len += w[0].dist(w[1]);
        }
        let bound = len + seq.anchors.len() as f64 * env.cfg.reward.capture_radius;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ungated = 0.0;
        while !env.is_done() {
            let o = env.step(&random_actions(&mut rng)).unwrap();
            if !o.reward.gated {
                ungated += o.reward.progress;
            }
        }
        prop_assert!(ungated <= bound + 1e-9, "{} > {}", ungated, bound);
    }
}

#[test]
fn observations_are_finite_and_sized_under_random_play() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for id in BUILTIN_IDS {
        let mut env = TransportEnv::new(builtin(id).unwrap(), EnvConfig::default()).unwrap();
        env.reset(rng.random()).unwrap();
        while !env.is_done() {
            let o = env.step(&random_actions(&mut rng)).unwrap();
            for obs in &o.obs {
                assert_eq!(obs.len(), OBS_DIM);
                assert!(obs.iter().all(|v| v.is_finite()), "{id}");
            }
        }
    }
}

#[test]
fn sim_clamp_is_idempotent_to_rounding() {
    let sim = Sim::new(builtin("S31").unwrap(), SimConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let a: [f64; ACTION_DIM] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let c = sim.clamp_command(1, &cotransport::sim::TaskSpaceCommand::from_array(&a));
        let again = sim.clamp_command(1, &c).to_array();
        for (x, y) in again.iter().zip(c.to_array()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}
