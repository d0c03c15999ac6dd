use std::sync::Arc;

use ensemble_control::dynamics::{
    double_integrator_problem, lq_toy_problem, sit_problem, FieldPair, ProblemSpec, SitParams, TerminalCost,
};
use ensemble_control::ensemble::{expectation, sample_ensemble, Ensemble, ParamDistribution, ParamSample};
use ensemble_control::integrate::{integrate_forward, ControlGrid, TimeGrid};
use ensemble_control::pmp::ArcLabel;
use ensemble_control::solver::{cost_evaluate, solve_fixed_ensemble, SolverOptions};
use proptest::prelude::*;

#[test]
fn sit_cost_matches_a_separate_pipeline_bit_for_bit() {
    let spec = sit_problem(SitParams::default(), None).unwrap();
    let ens = sample_ensemble(spec.distributions(), 26, 2024).unwrap();
    let grid = TimeGrid::for_problem(&spec, 900).unwrap();
    let u = ControlGrid::constant(grid, 0.0);
    let c2 = SitParams::default().c2;
    let terminal: Vec<f64> = ens
        .samples()
        .iter()
        .map(|s| {
            let x = integrate_forward(&spec, &u, s).unwrap();
            let x = x.terminal();
            x[4] + c2 * (x[1] + x[2])
        })
        .collect();
    let separate = expectation(&terminal, &ens).unwrap();
    assert_eq!(cost_evaluate(&spec, &ens, &u).unwrap().to_bits(), separate.to_bits());
}

struct Ramp;

impl FieldPair for Ramp {
    fn dim(&self) -> usize {
        1
    }
    fn param_names(&self) -> Vec<String> {
        vec![]
    }
    fn drift(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn control_field(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn drift_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn control_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 0.0;
    }
}

struct Constant(f64);

impl TerminalCost for Constant {
    fn value(&self, _: &[f64], _: &ParamSample) -> f64 {
        self.0
    }
    fn gradient(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 0.0;
    }
}

#[test]
fn constant_terminal_cost_ignores_the_control() {
    let spec = ProblemSpec::new(
        "ramp",
        Arc::new(Ramp),
        Arc::new(Constant(2.5)),
        (0.0, 1.0),
        vec![0.0],
        (-1.0, 1.0),
        vec![],
    )
    .unwrap();
    let ens = Ensemble::singleton(ParamSample::empty());
    let grid = TimeGrid::for_problem(&spec, 20).unwrap();
    for c in [-1.0, 0.0, 0.7] {
        assert_eq!(
            cost_evaluate(&spec, &ens, &ControlGrid::constant(grid, c)).unwrap(),
            2.5
        );
    }
    let sol = solve_fixed_ensemble(
        &spec,
        &ens,
        &SolverOptions {
            grid: 20,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    assert_eq!(sol.iterations, 1);
}

#[test]
fn sit_release_profile_starts_at_the_maximum_and_declines() {
    let spec = sit_problem(SitParams::default(), None).unwrap();
    let ens = sample_ensemble(spec.distributions(), 26, 1).unwrap();
    let sol = solve_fixed_ensemble(&spec, &ens, &SolverOptions::default(), None).unwrap();
    let u = sol.control.values();
    let grid = sol.control.grid();
    assert_eq!(u[0], spec.u_max());
    assert_eq!(*u.last().unwrap(), spec.u_min());
    // coarse ten-day averages are non-increasing
    let window = |a: f64, b: f64| {
        let v: Vec<f64> = (0..u.len())
            .filter(|&j| (a..b).contains(&grid.node(j)))
            .map(|j| u[j])
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let means: Vec<f64> = (0..9).map(|i| window(10.0 * i as f64, 10.0 * (i + 1) as f64)).collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
    assert!(sol.cost_history.windows(2).all(|w| w[1] <= w[0]));
    let s = sol.sweep.switching(&spec, &ens, 1e-3).unwrap();
    assert!(s.values()[0] > s.eps_sing());
    assert!(ensemble_control::pmp::label_of(*s.values().last().unwrap(), s.eps_sing()) == ArcLabel::Min);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn accepted_inner_steps_never_increase_the_cost(lo in -2.0..0.0f64, width in 0.1..3.0f64, seed in any::<u64>()) {
        let laws = vec![ParamDistribution::uniform("q", 0.2, 2.0).unwrap()];
        let spec = double_integrator_problem(Default::default(), Some(laws))
            .unwrap()
            .with_bounds(lo, lo + width)
            .unwrap();
        let ens = sample_ensemble(spec.distributions(), 3, seed).unwrap();
        let sol = solve_fixed_ensemble(&spec, &ens, &SolverOptions { grid: 60, max_inner_iters: 200, ..Default::default() }, None).unwrap();
        prop_assert!(sol.cost_history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(sol.control.values().iter().all(|v| (lo..=lo + width).contains(v)));
    }

    #[test]
    fn lq_toy_ends_on_the_lower_bound(a in -1.0..1.0f64, t in 0.2..3.0f64) {
        let laws = vec![ParamDistribution::point("a", a).unwrap()];
        let spec = lq_toy_problem(ensemble_control::dynamics::LqToyParams { horizon: t, x0: 0.0 }, Some(laws)).unwrap();
        let ens = sample_ensemble(spec.distributions(), 1, 0).unwrap();
        let sol = solve_fixed_ensemble(&spec, &ens, &SolverOptions { grid: 30, ..Default::default() }, None).unwrap();
        prop_assert!(sol.control.values().iter().all(|v| *v == -1.0));
    }
}
