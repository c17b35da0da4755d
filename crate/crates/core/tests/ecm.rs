use pace_core::dataset::{Cell, CycleRecord};
use pace_core::ecm::{
    extract_cycle_features, fit_ecm, simulate_thevenin, write_cycle_fits, CurrentProfile, EcmParams, ExtractOptions,
    FitOptions, FEATURE_TABLE_HEADER,
};
use pace_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn reference() -> EcmParams {
    EcmParams::new(3.1, 0.02, 0.05, 1000.0).unwrap()
}

fn constant(current: f64, n: usize, dt: f64) -> CurrentProfile {
    CurrentProfile::new((0..n).map(|k| k as f64 * dt).collect(), vec![current; n]).unwrap()
}

/// Rest, two current steps, rest: enough excitation to identify all four parameters.
fn step_profile() -> CurrentProfile {
    let t: Vec<f64> = (0..400).map(|k| k as f64).collect();
    let i = t
        .iter()
        .map(|&t| match t {
            t if t < 10.0 => 0.0,
            t if t < 130.0 => 1.0,
            t if t < 220.0 => 2.0,
            _ => 0.0,
        })
        .collect();
    CurrentProfile::new(t, i).unwrap()
}

/// Forward Euler on the continuous circuit with a tiny step.
fn euler_vout(p: &EcmParams, current: f64, t_end: f64, dt: f64) -> f64 {
    let steps = (t_end / dt).round() as usize;
    let mut v1 = 0.0;
    for _ in 0..steps {
        v1 += dt * (-v1 / (p.r1 * p.c1) + current / p.c1);
    }
    p.v0 - current * p.r0 - v1
}

#[test]
fn zero_current_holds_open_circuit_voltage() {
    let v = simulate_thevenin(&reference(), &constant(0.0, 50, 1.0), 0.0).unwrap();
    assert!(v.iter().all(|&x| x == 3.1));
}

#[test]
fn constant_current_settles_at_steady_state() {
    let v = simulate_thevenin(&reference(), &constant(1.0, 2001, 5.0), 0.0).unwrap();
    assert!((v.last().unwrap() - 3.03).abs() < 1e-12);
}

#[test]
fn one_time_constant_matches_closed_form_and_fine_euler() {
    let p = reference();
    let v = simulate_thevenin(&p, &constant(1.0, 51, 1.0), 0.0).unwrap();
    let closed = 3.1 - 0.02 - 0.05 * (1.0 - (-1.0f64).exp());
    let euler = euler_vout(&p, 1.0, 50.0, 1e-4);
    assert!((v[50] - closed).abs() < 1e-12, "{} vs {closed}", v[50]);
    assert!((v[50] - euler).abs() < 1e-6, "{} vs euler {euler}", v[50]);
    assert!((v[50] - 3.0484).abs() < 5e-5);
}

#[test]
fn simulation_rejects_bad_inputs() {
    assert!(matches!(CurrentProfile::new(vec![0.0, 1.0, 1.0], vec![0.0; 3]), Err(Error::Input(_))));
    assert!(matches!(CurrentProfile::new(vec![0.0, 2.0, 1.0], vec![0.0; 3]), Err(Error::Input(_))));
    let bad = EcmParams { v0: f64::NAN, ..reference() };
    assert!(matches!(simulate_thevenin(&bad, &constant(1.0, 5, 1.0), 0.0), Err(Error::Domain(_))));
    let negative = EcmParams { r1: -0.05, ..reference() };
    assert!(matches!(simulate_thevenin(&negative, &constant(1.0, 5, 1.0), 0.0), Err(Error::Domain(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rest_relaxation_is_exactly_exponential(
        gaps in prop::collection::vec(0.01f64..30.0, 1..60),
        v1_0 in -0.2f64..0.2,
    ) {
        let p = reference();
        let mut t = vec![0.0];
        for g in &gaps {
            t.push(t.last().unwrap() + g);
        }
        let n = t.len();
        let v = simulate_thevenin(&p, &CurrentProfile::new(t.clone(), vec![0.0; n]).unwrap(), v1_0).unwrap();
        for k in 0..n {
            let v1 = v1_0 * (-t[k] / p.tau()).exp();
            let expected = p.v0 - v1;
            prop_assert!(((v[k] - expected) / expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn noiseless_recovery_from_any_init_within_factor_two(
        f in prop::array::uniform4(0.5f64..2.0),
    ) {
        let truth = reference();
        let profile = step_profile();
        let v = simulate_thevenin(&truth, &profile, 0.0).unwrap();
        let init = EcmParams::new(truth.v0 * f[0], truth.r0 * f[1], truth.r1 * f[2], truth.c1 * f[3]).unwrap();
        let fit = fit_ecm(&v, &profile, &init, &FitOptions::default()).unwrap();
        prop_assert!(fit.params.max_rel_diff(&truth) < 0.01, "{:?} from {:?}", fit.params, init);
    }
}

#[test]
fn fit_from_truth_is_a_fixed_point() {
    let truth = reference();
    let profile = step_profile();
    let v = simulate_thevenin(&truth, &profile, 0.0).unwrap();
    let fit = fit_ecm(&v, &profile, &truth, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.iterations <= 1);
    assert!(fit.rmse < 1e-12);
    assert!(fit.params.max_rel_diff(&truth) < 1e-9);
}

#[test]
fn recovers_parameters_from_perturbed_init() {
    let truth = reference();
    let profile = step_profile();
    let v = simulate_thevenin(&truth, &profile, 0.0).unwrap();
    let a = truth.to_array().map(|x| x * 1.5);
    let init = EcmParams::new(a[0], a[1], a[2], a[3]).unwrap();
    let fit = fit_ecm(&v, &profile, &init, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.iterations <= 200);
    assert!(fit.params.max_rel_diff(&truth) < 0.01, "{:?}", fit.params);
}

#[test]
fn noisy_recovery_within_five_percent_and_costs_never_increase() {
    let truth = reference();
    let profile = step_profile();
    let clean = simulate_thevenin(&truth, &profile, 0.0).unwrap();
    let noise = Normal::new(0.0, 1e-3).unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = clean.iter().map(|x| x + noise.sample(&mut rng)).collect();
        let init = EcmParams::new(3.3, 0.03, 0.03, 700.0).unwrap();
        let fit = fit_ecm(&v, &profile, &init, &FitOptions::default()).unwrap();
        assert!(fit.params.max_rel_diff(&truth) < 0.05, "seed {seed}: {:?}", fit.params);
        assert!(fit.rmse > 0.0 && fit.rmse < 2e-3);
        assert!(fit.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(fit.cost_history.len() >= 2, true);
    }
}

#[test]
fn fits_from_different_starts_agree() {
    let truth = reference();
    let profile = step_profile();
    let v = simulate_thevenin(&truth, &profile, 0.0).unwrap();
    let a = fit_ecm(&v, &profile, &EcmParams::new(2.8, 0.01, 0.08, 1500.0).unwrap(), &FitOptions::default()).unwrap();
    let b = fit_ecm(&v, &profile, &EcmParams::new(3.5, 0.035, 0.03, 600.0).unwrap(), &FitOptions::default()).unwrap();
    assert!(a.params.max_rel_diff(&b.params) < 1e-3);
}

#[test]
fn too_few_samples_is_insufficient_data() {
    let profile = constant(1.0, 7, 1.0);
    let v = vec![3.0; 7];
    assert!(matches!(
        fit_ecm(&v, &profile, &reference(), &FitOptions::default()),
        Err(Error::InsufficientData { needed: 8, got: 7 })
    ));
}

#[test]
fn unexcited_profile_is_degenerate_and_carries_last_iterate() {
    let profile = constant(0.0, 20, 1.0);
    let v = vec![3.0; 20];
    match fit_ecm(&v, &profile, &reference(), &FitOptions::default()) {
        Err(Error::DegenerateFit { last, .. }) => assert!(last.validate().is_ok()),
        other => panic!("expected a degenerate fit, got {other:?}"),
    }
}

fn synthetic_cycle(index: u32, p: &EcmParams) -> CycleRecord {
    let profile = step_profile();
    let voltage = simulate_thevenin(p, &profile, 0.0).unwrap();
    CycleRecord {
        cell_id: "syn".into(),
        cycle_index: index,
        timestamps: profile.timestamps().to_vec(),
        current: profile.current().to_vec(),
        temperature: vec![25.0; voltage.len()],
        voltage,
        discharge_capacity: 1.1,
    }
}

#[test]
fn identical_cycles_give_identical_rows() {
    let p = reference();
    let cell = Cell { cell_id: "syn".into(), cycles: (0..3).map(|k| synthetic_cycle(k, &p)).collect() };
    let rows = extract_cycle_features(&cell, &ExtractOptions::default()).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(!r.carried_forward);
        assert!(r.params.max_rel_diff(&rows[0].params) < 1e-6);
        assert!(r.params.max_rel_diff(&p) < 1e-3);
    }
}

#[test]
fn growing_r1_is_tracked_monotonically() {
    let cycles: Vec<CycleRecord> = (0..12)
        .map(|k| {
            let p = EcmParams { r1: 0.05 * (1.0 + 0.02 * f64::from(k)), ..reference() };
            synthetic_cycle(k, &p)
        })
        .collect();
    let cell = Cell { cell_id: "syn".into(), cycles };
    let rows = extract_cycle_features(&cell, &ExtractOptions::default()).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].params.r1 > w[0].params.r1, "{} then {}", w[0].params.r1, w[1].params.r1);
    }
    let last = rows.last().unwrap().params.r1;
    assert!((last / (0.05 * 1.22) - 1.0).abs() < 1e-3);
}

#[test]
fn failed_cycle_is_carried_forward_and_flagged() {
    let p = reference();
    let mut short = synthetic_cycle(1, &p);
    for ch in [&mut short.timestamps, &mut short.voltage, &mut short.current, &mut short.temperature] {
        ch.truncate(14);
    }
    let cell = Cell { cell_id: "syn".into(), cycles: vec![synthetic_cycle(0, &p), short, synthetic_cycle(2, &p)] };
    let rows = extract_cycle_features(&cell, &ExtractOptions::default()).unwrap();
    assert!(rows[1].carried_forward && !rows[1].converged);
    assert_eq!(rows[1].params, rows[0].params);
    assert!(!rows[2].carried_forward);
}

#[test]
fn empty_cell_is_an_input_error() {
    let cell = Cell { cell_id: "none".into(), cycles: vec![] };
    assert!(matches!(extract_cycle_features(&cell, &ExtractOptions::default()), Err(Error::Input(_))));
}

#[test]
fn feature_table_has_fixed_header_and_nine_digit_floats() {
    let p = reference();
    let cell = Cell { cell_id: "syn".into(), cycles: vec![synthetic_cycle(0, &p)] };
    let rows = extract_cycle_features(&cell, &ExtractOptions::default()).unwrap();
    let mut buf = Vec::new();
    write_cycle_fits(&mut buf, "syn", &rows, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), FEATURE_TABLE_HEADER);
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields.len(), 8);
    assert_eq!(fields[..2], ["syn", "0"]);
    let v0: f64 = fields[2].parse().unwrap();
    assert!(((v0 - rows[0].params.v0) / v0).abs() < 5e-9);
    let digits = fields[2].chars().filter(char::is_ascii_digit).count();
    assert!(digits <= 9);
    assert_eq!(fields[7], "true");
}
