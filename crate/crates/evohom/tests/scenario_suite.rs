use std::sync::Arc;

use evohom::evo_solver::SteppingSolver;
use evohom::linalg::C64;
use evohom::operator_calculus::{fractional_power_op, EvolutionaryOp};
use evohom::scenario_suite::{
    build_scenario, dbf_operators, default_grid, dyadic, gap_criteria, non_increasing_tail, CurlSurrogate,
    DbfStepper, lattice_curl, ProblemOps, ScenarioConfig, SCENARIO_NAMES,
};
use evohom::weighted_space::{SpaceModel, TimeGrid, WeightedSignal};
use evohom::EvoError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn build(name: &str, params: serde_json::Value) -> evohom::Result<evohom::scenario_suite::Scenario> {
    build_scenario(&ScenarioConfig::named(name).with_params(params), None)
}

fn all_finite(u: &[WeightedSignal]) -> bool {
    u.iter().all(|x| x.values.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
}

#[test]
fn every_scenario_builds_and_solves() {
    for name in SCENARIO_NAMES {
        let sc = build(name, serde_json::Value::Null).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(sc.name, name);
        assert_eq!(sc.grid, default_grid(name).unwrap());
        let u = sc.solve(2).unwrap().u;
        assert_eq!(u.len(), sc.spaces.len());
        assert!(all_finite(&u), "{name}");
        assert!(sc.summary()["name"] == json!(name));
    }
}

#[test]
fn oscillation_off_reproduces_first_problem() {
    let sc = build("periodic_ode", json!({ "a": [1.0, 3.0], "oscillate": false })).unwrap();
    let one = sc.solve(1).unwrap().u;
    let many = sc.solve(64).unwrap().u;
    assert_eq!(one[0].values, many[0].values);
    let reference = sc.reference_solution().unwrap().unwrap();
    assert_eq!(reference[0].values, one[0].values);
}

#[test]
fn swapping_the_two_phases_keeps_the_kernel() {
    let a = build("tartar_memory", json!({ "lambda1": 0.0, "lambda2": 2.0 })).unwrap().kernel().unwrap();
    let b = build("tartar_memory", json!({ "lambda1": 2.0, "lambda2": 0.0 })).unwrap().kernel().unwrap();
    let worst = a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    assert!(worst <= 1e-12 * a.max_abs(), "{worst}");
    assert!(matches!(build("tartar_memory", json!({ "lambda1": 1.5, "lambda2": 1.5 })).unwrap().kernel(), Ok(k) if k.max_abs() <= 1e-9));
    assert!(matches!(build("periodic_ode", serde_json::Value::Null).unwrap().kernel(), Err(EvoError::NoKernelAvailable)));
}

#[test]
fn configuration_errors() {
    assert!(matches!(build("nope", serde_json::Value::Null), Err(EvoError::ScenarioUnknown(_))));
    assert!(matches!(build("fractional", json!({ "alpha": 1.5 })), Err(EvoError::AlphaOutOfRange(_))));
    assert!(matches!(build("fractional", json!({ "beta": 0.5 })), Err(EvoError::AlphaOutOfRange(_))));
    assert!(matches!(build("convolution", json!({ "gamma": 10.0 })), Err(EvoError::NotContractive { .. })));
    assert!(matches!(build("delay", json!({ "h": -0.1 })), Err(EvoError::NegativeDelay(_))));
    assert!(matches!(build("periodic_ode", json!({ "colour": 1 })), Err(EvoError::ConfigInvalid(_))));
    assert!(matches!(build("periodic_ode", json!({ "a": [-1.0, 2.0] })), Err(_)));
    let bad_schedule = ScenarioConfig::named("periodic_ode").with_schedule(vec![4, 2]);
    assert!(matches!(build_scenario(&bad_schedule, None), Err(EvoError::ConfigInvalid(_))));
    let zero = ScenarioConfig::named("periodic_ode").with_schedule(vec![0, 1]);
    assert!(matches!(build_scenario(&zero, None), Err(EvoError::ConfigInvalid(_))));

    let lam = CurlSurrogate::new(4, 0.0).unwrap().eigenvalues.into_iter().find(|l| l.abs() > 0.1).unwrap();
    assert!(matches!(CurlSurrogate::new(4, -1.0 / lam), Err(EvoError::EtaOnSpectrum(_))));
    assert!(matches!(build("dbf_surrogate", json!({ "q": 4, "eta": -1.0 / lam })), Err(EvoError::EtaOnSpectrum(_))));
}

#[test]
fn curl_surrogate_structure() {
    let s = CurlSurrogate::new(3, 0.1).unwrap();
    let n = 3 * 27;
    assert_eq!(s.k.shape(), (n, n));
    assert!((&s.k - s.k.transpose()).amax() <= 1e-12);
    let sum: f64 = s.eigenvalues.iter().sum();
    assert!(sum.abs() <= 1e-9);
    let id = nalgebra::DMatrix::<f64>::identity(n, n);
    let prod = &s.resolvent * (&id + lattice_curl(3) * 0.1);
    assert!((prod - id).amax() <= 1e-10);
    assert!(s.k_norm() > 0.0);
}

#[test]
fn dbf_stepper_matches_generic_stepping() {
    let g = TimeGrid::new(1.0 / 32.0, 32, 4.0).unwrap();
    let sur = Arc::new(CurlSurrogate::new(2, 0.1).unwrap());
    let space = SpaceModel::torus_grid(3, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..3.0)).collect();
    let mu: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..2.0)).collect();
    let f = WeightedSignal::from_fn(g, space, |t, k| C64::new((t * (1 + k % 5) as f64).sin(), 0.1 * (k % 3) as f64));
    let fast = DbfStepper::new(g, &sur, &eps, &mu).unwrap().solve(&f).unwrap();
    let ProblemOps::Single { m, n } = dbf_operators(g, &sur, &eps, &mu).unwrap() else {
        panic!("expected a single problem");
    };
    let slow = SteppingSolver::new(&m, &n).unwrap().solve(&f).unwrap();
    assert!(fast.rel_dist(&slow) <= 1e-10, "{}", fast.rel_dist(&slow));
}

/// `a₂D²u + a₁Du + a₀u = f` with backward differences, stepped directly.
fn oscillator_oracle(f: &WeightedSignal, a: [f64; 3]) -> WeightedSignal {
    let g = f.grid;
    let nd = f.ndof();
    let dt = g.dt;
    let mut u = WeightedSignal::zeros(g, f.space);
    let lead = a[2] / (dt * dt) + a[1] / dt + a[0];
    for k in 0..nd {
        let (mut u1, mut u2) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
        for i in 0..g.n_steps {
            let rhs = f.values[i * nd + k] + a[2] * (2.0 * u1 - u2) / (dt * dt) + a[1] * u1 / dt;
            let ui = rhs / lead;
            u.values[i * nd + k] = ui;
            u2 = u1;
            u1 = ui;
        }
    }
    u
}

#[test]
fn higher_order_matches_oscillator_oracle() {
    let a = [1.0, 0.5, 2.0];
    let sc = build("higher_order", json!({ "coeffs": a, "oscillate": false })).unwrap();
    let space = sc.spaces[0];
    let f = EvolutionaryOp::derivative(sc.grid, space).apply(&sc.rhs[0]).unwrap();
    let want = oscillator_oracle(&f, a);
    let got = sc.solve(1).unwrap().u.remove(0);
    assert!(got.rel_dist(&want) <= 1e-4, "{}", got.rel_dist(&want));
    let oscillating = build("higher_order", serde_json::Value::Null).unwrap();
    let near = oscillating.solve(64).unwrap().u.remove(0);
    let lim = oscillating.reference_solution().unwrap().unwrap().remove(0);
    assert!(near.rel_dist(&lim) <= 0.05);
}

#[test]
fn fractional_reduces_to_ode_at_alpha_one() {
    let sc = build("fractional", json!({ "alpha": 1.0, "beta": 0.0, "a": 2.0, "b": 1.0 })).unwrap();
    let (g, s) = (sc.grid, sc.spaces[0]);
    let got = sc.solve(1).unwrap().u.remove(0);
    let ode = SteppingSolver::new(
        &EvolutionaryOp::scale_re(2.0, &EvolutionaryOp::identity(g, s)),
        &EvolutionaryOp::identity(g, s),
    )
    .unwrap()
    .solve(&sc.rhs[0])
    .unwrap();
    assert!(got.rel_dist(&ode) <= 1e-8);
}

#[test]
fn fractional_solution_satisfies_equation() {
    let sc = build("fractional", json!({ "alpha": 0.5, "beta": -0.5, "a": 1.5, "b": 0.5 })).unwrap();
    let (g, s) = (sc.grid, sc.spaces[0]);
    let u = sc.solve(1).unwrap().u.remove(0);
    let mut back = fractional_power_op(0.5, g, s).unwrap().apply(&u).unwrap().scaled(C64::new(1.5, 0.0));
    back.axpy(C64::new(0.5, 0.0), &fractional_power_op(-0.5, g, s).unwrap().apply(&u).unwrap());
    assert!(back.rel_dist(&sc.rhs[0]) <= 1e-8, "{}", back.rel_dist(&sc.rhs[0]));
}

#[test]
fn zero_delay_is_the_plain_problem() {
    let params = json!({ "a": [1.0, 3.0], "b": [0.5, 1.0] });
    let plain = build("periodic_ode", params.clone()).unwrap();
    let mut delayed = params;
    delayed["h"] = json!(0.0);
    let delay = build("delay", delayed).unwrap();
    for k in [1, 8] {
        let (a, b) = (plain.solve(k).unwrap().u, delay.solve(k).unwrap().u);
        assert!(a[0].rel_dist(&b[0]) <= 1e-10);
    }
    let (a, b) = (plain.reference_solution().unwrap().unwrap(), delay.reference_solution().unwrap().unwrap());
    assert!(a[0].rel_dist(&b[0]) <= 1e-8);
}

#[test]
fn zero_memory_convolution_is_identity() {
    let sc = build("convolution", json!({ "gamma": 0.0 })).unwrap();
    let u = sc.solve(4).unwrap().u;
    assert!(u[1].rel_dist(&sc.rhs[1]) <= 1e-14);
    assert_eq!(u[0].ndof(), 0);
}

#[test]
fn scenario_extras_report_cell_averages() {
    let tp = build("time_periodic", serde_json::Value::Null).unwrap();
    assert!((tp.extras["m_eff"].as_f64().unwrap() - 1.5).abs() < 1e-12);
    assert!((tp.extras["n_eff"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let dae = build("dae_block", serde_json::Value::Null).unwrap();
    assert!((dae.extras["n11_mean_of_inverses"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((dae.extras["n11_inverse_of_mean"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let conv = build("convolution", serde_json::Value::Null).unwrap();
    assert!((conv.extras["contraction"].as_f64().unwrap() - 1.5 / 5.0).abs() < 1e-12);
}

#[test]
fn sweep_gap_rules() {
    assert!(non_increasing_tail(&[5.0, 1.0, 0.5, 0.25], 1.0));
    assert!(!non_increasing_tail(&[1.0, 0.5, 0.6], 1.0));
    assert!(non_increasing_tail(&[1.0, 0.5, 0.5 + 1e-7], 1.0));
    assert!(gap_criteria(&[0.1, 0.01, 0.001], 5e-3));
    assert!(!gap_criteria(&[0.1, 0.01, 0.008], 5e-3));
    assert!(!gap_criteria(&[], 5e-3));
    assert_eq!(dyadic(64), vec![1, 2, 4, 8, 16, 32, 64]);
}
