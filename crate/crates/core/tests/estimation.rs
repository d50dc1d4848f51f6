use mutualism::estimation::{
    fit, format_table, identifiability_report, multistart, Bounds, FitOptions, FitResult, FitVector,
    Identifiability, MultistartOptions, Observation, ObservationSeries,
};
use mutualism::model::nominal;
use mutualism::{integrate, BiomassState, Execution, IntegratorConfig, Target};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn weeks() -> Vec<f64> {
    (6..=29).map(f64::from).collect()
}

fn clean_states() -> Vec<BiomassState> {
    let cfg = IntegratorConfig::new(6.0, 29.0)
        .with_tolerances(1e-13, 1e-15)
        .with_grid(weeks());
    integrate(&nominal::PARAMS, nominal::INITIAL, &cfg).unwrap().states
}

fn clean_data() -> ObservationSeries {
    ObservationSeries::from_states(&weeks(), &clean_states()).unwrap()
}

fn noisy_data(seed: u64) -> ObservationSeries {
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<BiomassState> = clean_states()
        .iter()
        .map(|s| {
            BiomassState::new(
                s.ants * (1.0 + noise.sample(&mut rng)),
                s.fungus * (1.0 + noise.sample(&mut rng)),
            )
        })
        .collect();
    ObservationSeries::from_states(&weeks(), &states).unwrap()
}

fn truth() -> FitVector {
    FitVector::new(&nominal::PARAMS, nominal::INITIAL)
}

fn perturbed() -> FitVector {
    let mut g = truth();
    for (k, t) in Target::ALL[..7].iter().enumerate() {
        if *t != Target::HalfSaturation {
            g.set(*t, g.get(*t) * if k % 2 == 0 { 1.2 } else { 0.8 });
        }
    }
    g
}

fn assert_gradient_contract(r: &FitResult) {
    if r.converged {
        assert!(r.gradient_norm < 1e-8 * (1.0 + r.residual_norm));
    }
}

#[test]
fn recovers_noiseless_parameters_with_b_fixed() {
    let opts = FitOptions::default().fix(Target::HalfSaturation);
    let r = fit(&clean_data(), &perturbed(), &Bounds::default(), &opts).unwrap();
    assert!(r.converged, "{}", r.message);
    assert!(r.residual_norm < 1e-12);
    for t in &r.free {
        let rel = (r.estimates.get(*t) - truth().get(*t)).abs() / truth().get(*t);
        assert!(rel < 1e-6, "{} off by {rel}", t.name());
    }
    assert_gradient_contract(&r);
}

#[test]
fn starting_at_the_truth_needs_almost_no_iterations() {
    let opts = FitOptions::default().fix(Target::HalfSaturation);
    let r = fit(&clean_data(), &truth(), &Bounds::default(), &opts).unwrap();
    assert!(r.converged);
    assert!(r.iterations <= 2);
}

#[test]
fn row_order_does_not_matter() {
    let data = noisy_data(3);
    let mut rows: Vec<Observation> = data.rows().to_vec();
    rows.reverse();
    let shuffled = ObservationSeries::new(rows).unwrap();
    let opts = FitOptions::default().fix(Target::HalfSaturation);
    let a = fit(&data, &truth(), &Bounds::default(), &opts).unwrap();
    let b = fit(&shuffled, &truth(), &Bounds::default(), &opts).unwrap();
    assert_eq!(a.estimates, b.estimates);
    assert_eq!(a.residual_norm, b.residual_norm);
}

#[test]
fn objective_never_increases() {
    for seed in 0..4 {
        let opts = FitOptions::default().fix(Target::HalfSaturation);
        let r = fit(&noisy_data(seed), &perturbed(), &Bounds::default(), &opts).unwrap();
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.objective_history.last().unwrap(), r.residual_norm);
        assert_gradient_contract(&r);
    }
}

#[test]
fn a_and_b_together_are_not_estimable() {
    let r = fit(&clean_data(), &truth(), &Bounds::default(), &FitOptions::default()).unwrap();
    assert!(r.std_dev(Target::HalfSaturation).is_none());
    assert!(r.std_dev(Target::Labor).is_none());
    assert!(r.std_dev(Target::AntGrowth).is_some());
    let table = format_table(&r);
    assert!(table.contains("DNE"));
}

#[test]
fn too_few_rows_leave_everything_not_estimable() {
    let rows: Vec<Observation> = weeks()
        .iter()
        .zip(clean_states())
        .take(4)
        .map(|(w, s)| Observation::new(*w, s.ants, s.fungus))
        .collect();
    let data = ObservationSeries::new(rows).unwrap();
    let opts = FitOptions::default().free_initials(true);
    let r = fit(&data, &perturbed(), &Bounds::default(), &opts).unwrap();
    assert!(r.sigma2.is_none());
    assert!(r.std_devs.iter().all(Option::is_none));
}

#[test]
fn guess_outside_the_bounds_is_rejected() {
    let mut g = truth();
    g.set(Target::Labor, 0.3);
    let err = fit(&clean_data(), &g, &Bounds::default(), &FitOptions::default()).unwrap_err();
    assert!(err.is_precondition());
}

#[test]
fn exact_fit_flags_nothing() {
    let opts = FitOptions::default().fix(Target::HalfSaturation);
    let r = fit(&clean_data(), &truth(), &Bounds::default(), &opts).unwrap();
    let flags = identifiability_report(&r).unwrap();
    assert!(flags.iter().all(|(_, f)| *f == Identifiability::WellIdentified));
}

#[test]
fn table_has_five_columns() {
    let opts = FitOptions::default().fix(Target::HalfSaturation);
    let r = fit(&noisy_data(1), &truth(), &Bounds::default(), &opts).unwrap();
    let table = format_table(&r);
    let header = table.lines().next().unwrap();
    for col in ["Parameters", "Initial values", "Intervals", "Estimated values", "Standard Deviation"] {
        assert!(header.contains(col));
    }
    let body: Vec<&str> = table.lines().skip(2).take_while(|l| !l.is_empty()).collect();
    assert_eq!(body.len(), 9);
    for row in body {
        assert_eq!(row.split("  ").filter(|c| !c.trim().is_empty()).count(), 5, "{row}");
    }
}

#[test]
fn multistart_is_deterministic_and_schedule_independent() {
    let opts = FitOptions::default().fix(Target::HalfSaturation);
    let data = noisy_data(7);
    let run = |exec| {
        let ms = MultistartOptions {
            starts: 4,
            seed: 42,
            execution: exec,
            ..MultistartOptions::default()
        };
        multistart(&data, &truth(), &Bounds::default(), &opts, &ms).unwrap()
    };
    let a = run(Execution::Parallel);
    let b = run(Execution::Sequential);
    let c = run(Execution::Parallel);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(!a.minima.is_empty());
    let best = a.best().unwrap();
    for f in a.fits.iter().flatten() {
        assert!(best.residual_norm <= f.residual_norm);
    }
}
