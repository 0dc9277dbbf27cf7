mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vbphys::kinetics::{
    build_preset_7level, build_preset_9level, build_rate_matrix, steady_state, thermal_state, NineLevelRates,
    SevenLevelRates,
};
use vbphys::propagation::{propagate_constant, propagate_profile, PowerProfile, ProfileSegment};

#[test]
fn expm_matches_rk4_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let times = [0.25, 1.0, 4.0, 12.0];
    for _ in 0..30 {
        let g = common::random_graph(&mut rng, 9, false, 1.0);
        let m = build_rate_matrix(&g, 0.0).unwrap();
        let p0 = common::random_distribution(&mut rng, g.len());
        let oracle = common::rk4(&m, &p0, 1e-3, &times);
        for (t, want) in times.iter().zip(oracle) {
            let got = propagate_constant(&m, &p0, *t).unwrap();
            assert!((got - want).amax() < 1e-8);
        }
    }
}

#[test]
fn step_profile_equals_chained_constant_propagation() {
    let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
    let profile = PowerProfile::new(
        vec![
            ProfileSegment::new(40.0, 13.6),
            ProfileSegment::new(20.0, 0.0),
            ProfileSegment::new(40.0, 5.0),
        ],
        0.0,
    );
    let p0 = thermal_state(&g).unwrap();
    let traj = propagate_profile(&g, &profile, &p0, 0.5).unwrap();
    let mut p = p0.clone();
    let mut t_prev = 0.0;
    let bounds = [(40.0, 13.6), (60.0, 0.0), (100.0, 5.0)];
    let mut seg = 0;
    for (t, got) in traj.times.iter().zip(&traj.populations).skip(1) {
        while *t > bounds[seg].0 + 1e-9 {
            seg += 1;
        }
        let m = build_rate_matrix(&g, bounds[seg].1).unwrap();
        p = propagate_constant(&m, &p, t - t_prev).unwrap();
        t_prev = *t;
        assert!((&p - got).amax() <= 1e-9, "t = {t}");
    }
}

#[test]
fn power_settles_within_five_rise_times() {
    let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
    let profile = PowerProfile::new(vec![ProfileSegment::new(50.0, 10.0)], 2.0);
    let traj = propagate_profile(&g, &profile, &thermal_state(&g).unwrap(), 0.5).unwrap();
    let k = traj.times.iter().position(|&t| (t - 10.0).abs() < 1e-9).unwrap();
    assert!((traj.powers[k] / 10.0 - 1.0).abs() < 0.01);
    assert!(traj.powers[2] < 5.0);
}

#[test]
fn steady_state_is_long_time_limit() {
    let g = build_preset_7level(&SevenLevelRates::reference()).unwrap();
    let m = build_rate_matrix(&g, 13.6).unwrap();
    let p0 = thermal_state(&g).unwrap();
    let late = propagate_constant(&m, &p0, 100_000.0).unwrap();
    let ss = steady_state(&m, &p0).unwrap();
    assert!((late - ss.populations).amax() <= 1e-8);
}

#[test]
fn decoupled_nine_level_reproduces_seven_level() {
    let base = SevenLevelRates::reference();
    let g7 = build_preset_7level(&base).unwrap();
    let g9 = build_preset_9level(&NineLevelRates::decoupled(base)).unwrap();
    let profile = PowerProfile::new(vec![ProfileSegment::new(300.0, 13.6), ProfileSegment::new(60.0, 0.0)], 2.5);
    let t7 = propagate_profile(&g7, &profile, &thermal_state(&g7).unwrap(), 0.5).unwrap();
    let t9 = propagate_profile(&g9, &profile, &thermal_state(&g9).unwrap(), 0.5).unwrap();
    let w7 = t7.emission_rates(&g7.emission_vector());
    let w9 = t9.emission_rates(&g9.emission_vector());
    for (a, b) in w7.iter().zip(&w9) {
        assert!((a - b).abs() <= 1e-14);
    }
    for p in &t9.populations {
        for label in ["aux_g", "aux_e"] {
            assert_eq!(p[g9.index_of(label).unwrap()], 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generator_columns_sum_to_zero(seed in any::<u64>(), power in 0.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, 9, true, 10.0);
        let m = build_rate_matrix(&g, power).unwrap();
        for j in 0..m.ncols() {
            let scale: f64 = m.column(j).iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            prop_assert!(m.column(j).sum().abs() <= 1e-12 * scale);
            for i in 0..m.nrows() {
                if i != j {
                    prop_assert!(m[(i, j)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn trajectories_conserve_probability(seed in any::<u64>(), rise in 0.0f64..3.0, power in 0.5f64..25.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, 9, true, 10.0);
        let p0 = common::random_distribution(&mut rng, g.len());
        let profile = PowerProfile::new(
            vec![ProfileSegment::new(25.0, power), ProfileSegment::new(10.0, 0.0), ProfileSegment::new(15.0, power / 2.0)],
            rise,
        );
        let traj = propagate_profile(&g, &profile, &p0, 0.5).unwrap();
        for p in &traj.populations {
            prop_assert!((p.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn propagation_is_a_semigroup(seed in any::<u64>(), s in 0.0f64..80.0, t in 0.0f64..80.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = common::random_graph(&mut rng, 9, false, 1.0);
        let m = build_rate_matrix(&g, 0.0).unwrap();
        let p0: DVector<f64> = common::random_distribution(&mut rng, g.len());
        let joint = propagate_constant(&m, &p0, s + t).unwrap();
        let split = propagate_constant(&m, &propagate_constant(&m, &p0, s).unwrap(), t).unwrap();
        prop_assert!((joint - split).amax() <= 1e-10);
    }
}
