mod common;

use mutualism::basin::{
    in_extinction_region, in_invariant_wedge, lyapunov, map_basins, map_basins_with, GridSpec,
};
use mutualism::model::nominal;
use mutualism::{
    classify_limit, integrate, AttractorLabel, BiomassState, Execution, IntegratorConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn saddle() -> BiomassState {
    BiomassState::new(common::A1, common::A1)
}

#[test]
fn analytic_region_is_sound_on_a_fine_grid() {
    let p = nominal::PARAMS;
    let grid = GridSpec::new((0.0, 0.004), (0.0, common::A1), 200, 200).unwrap();
    let map = map_basins(&p, &grid, &IntegratorConfig::for_classification()).unwrap();
    assert!(map.analytic_region_mask.iter().filter(|m| **m).count() > 1000);
    assert!(map.soundness_violations().is_empty());
    assert_eq!(map.count(AttractorLabel::Undecided), 0);
}

#[test]
fn both_attractors_meet_near_the_saddle() {
    let p = nominal::PARAMS;
    let s = saddle();
    let cfg = IntegratorConfig::for_classification();
    let mut seen = Vec::new();
    for (da, df) in [(-1e-3, -1e-3), (1e-3, 1e-3), (-1e-3, 1e-3), (1e-3, -1e-3)] {
        let x = BiomassState::new(s.ants + da * s.ants, s.fungus + df * s.fungus);
        seen.push(classify_limit(&p, x, &cfg).unwrap());
    }
    assert!(seen.contains(&AttractorLabel::Origin));
    assert!(seen.contains(&AttractorLabel::Interior));
}

#[test]
fn lyapunov_function_decreases_inside_the_region() {
    let p = nominal::PARAMS;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 20 {
        let a = rng.random_range(1e-5..common::A1);
        let f = rng.random_range(0.0..common::A1);
        let x = BiomassState::new(a, f);
        if !in_extinction_region(&p, x).unwrap() {
            continue;
        }
        checked += 1;
        let cfg = IntegratorConfig::new(0.0, 50.0).with_uniform_grid(100).with_tolerances(1e-11, 1e-14);
        let traj = integrate(&p, x, &cfg).unwrap();
        let v: Vec<f64> = traj.states.iter().map(|s| lyapunov(&p, *s)).collect();
        assert!(v.windows(2).all(|w| w[1] < w[0]), "{x:?}");
    }
}

#[test]
fn wedge_orbits_stay_in_the_wedge() {
    let p = nominal::PARAMS;
    let slope = p.ant_nullcline_slope();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..30 {
        let a = rng.random_range(2e-4..common::A1);
        let lo = p.fungus_nullcline(a).max(0.0);
        let f = lo + (slope * a - lo) * rng.random_range(0.05..0.95);
        let x = BiomassState::new(a, f);
        assert!(in_invariant_wedge(&p, x).unwrap());
        let cfg = IntegratorConfig::new(0.0, 500.0).with_uniform_grid(5000);
        for s in integrate(&p, x, &cfg).unwrap().states {
            assert!(s.fungus >= p.fungus_nullcline(s.ants) - 1e-9);
            assert!(s.fungus <= slope * s.ants + 1e-9);
        }
    }
}

#[test]
fn monotonicity_spot_check() {
    // reported rather than asserted: growth of both coordinates can cross the separatrix
    let p = nominal::PARAMS;
    let cfg = IntegratorConfig::for_classification();
    let mut flips = 0;
    for k in 1..40 {
        let base = BiomassState::new(1e-3 * k as f64 / 10.0, 2e-3);
        let bigger = BiomassState::new(base.ants * 2.0, base.fungus * 2.0);
        let a = classify_limit(&p, base, &cfg).unwrap();
        let b = classify_limit(&p, bigger, &cfg).unwrap();
        if a == AttractorLabel::Interior && b == AttractorLabel::Origin {
            flips += 1;
        }
    }
    println!("scaled-up starts that switched from interior to origin: {flips}/39");
}

#[test]
fn parallel_and_sequential_maps_agree() {
    let p = nominal::PARAMS;
    let grid = GridSpec::new((0.0, 0.02), (0.0, 0.02), 24, 24).unwrap();
    let cfg = IntegratorConfig::for_classification();
    let par = map_basins_with(&p, &grid, &cfg, Execution::Parallel).unwrap();
    let seq = map_basins_with(&p, &grid, &cfg, Execution::Sequential).unwrap();
    assert_eq!(par, seq);
    assert!(par.count(AttractorLabel::Origin) > 0);
    assert!(par.count(AttractorLabel::Interior) > 0);
}

#[test]
fn extinction_regime_is_rejected() {
    let p = nominal::PARAMS.with_a(6e-4).unwrap();
    let grid = GridSpec::new((0.0, 1.0), (0.0, 1.0), 4, 4).unwrap();
    let err = map_basins(&p, &grid, &IntegratorConfig::for_classification()).unwrap_err();
    assert!(err.is_precondition());
    assert!(err.to_string().contains("a*"));
}
