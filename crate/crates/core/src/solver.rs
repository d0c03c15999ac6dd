//! Projected-gradient solver for a fixed ensemble and the sample average
//! approximation loop over growing ensembles.
//!
//! The L2 gradient of `J_k` with respect to the control is `−Ψ(t)`, assembled
//! from one forward and one backward sweep per sample. Iterates are projected
//! onto the box `[u_min, u_max]` and accepted under an Armijo test measured in
//! the trapezoidal L2 inner product.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::dynamics::ProblemSpec;
use crate::ensemble::{expectation, iteration_seed, sample_ensemble, Ensemble};
use crate::error::{Error, Result};
use crate::integrate::{
    discrete_control_gradient, integrate_adjoint, integrate_forward, AdjointPath, ControlGrid, StatePath, TimeGrid,
};
use crate::pmp::{
    classify_arcs_with, feedback_on_singular_nodes, switching_function, ArcClassification, SingularLaw,
    SwitchingProfile, DEFAULT_DELTA_DEN_REL, DEFAULT_EPS_SING_REL, DEFAULT_MIN_ARC_NODES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Number of grid steps N on `[t0, T]`. Not serialized: run configs carry
    /// it as a top-level key.
    #[serde(skip)]
    pub grid: usize,
    pub max_inner_iters: usize,
    /// First trial step; `None` uses `(u_max − u_min) / max|Ψ|`.
    pub initial_step: Option<f64>,
    /// Backtracking factor β.
    pub backtrack: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Stop once the relative cost decrease of an accepted step falls below this.
    pub tol_inner: f64,
    /// Dead-band ε_sing relative to max|Ψ|.
    pub eps_sing_rel: f64,
    /// Denominator threshold δ_den relative to |numerator| + 1.
    pub delta_den_rel: f64,
    pub min_arc_nodes: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grid: 900,
            max_inner_iters: 2000,
            initial_step: None,
            backtrack: 0.5,
            armijo: 1e-4,
            max_backtracks: 40,
            tol_inner: 1e-10,
            eps_sing_rel: DEFAULT_EPS_SING_REL,
            delta_den_rel: DEFAULT_DELTA_DEN_REL,
            min_arc_nodes: DEFAULT_MIN_ARC_NODES,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::validation("grid", "need at least one step"));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::validation("max_inner_iters", "must be positive"));
        }
        if let Some(s) = self.initial_step {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::validation("initial_step", "must be positive"));
            }
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::validation("backtrack", "must lie in (0, 1)"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::validation("armijo", "must lie in (0, 1)"));
        }
        if self.max_backtracks == 0 {
            return Err(Error::validation("max_backtracks", "must be positive"));
        }
        for (name, v) in [
            ("tol_inner", self.tol_inner),
            ("eps_sing_rel", self.eps_sing_rel),
            ("delta_den_rel", self.delta_den_rel),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if self.min_arc_nodes == 0 {
            return Err(Error::validation("min_arc_nodes", "must be positive"));
        }
        Ok(())
    }
}

/// Forward and backward sweeps of every sample at one control.
#[derive(Clone, Debug)]
pub struct Sweep {
    pub paths: Vec<StatePath>,
    pub adjoints: Vec<AdjointPath>,
    pub cost: f64,
}

fn forward_all(spec: &ProblemSpec, ensemble: &Ensemble, u: &ControlGrid) -> Result<Vec<StatePath>> {
    ensemble
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| integrate_forward(spec, u, s).map_err(|e| e.for_sample(i)))
        .collect()
}

fn terminal_cost(spec: &ProblemSpec, ensemble: &Ensemble, paths: &[StatePath]) -> Result<f64> {
    let values: Vec<f64> = paths
        .iter()
        .map(|p| spec.cost().value(p.terminal(), p.sample()))
        .collect();
    expectation(&values, ensemble)
}

/// J_k[u] = Σ_i w_i g(x_i(T), ω_i).
pub fn cost_evaluate(spec: &ProblemSpec, ensemble: &Ensemble, u: &ControlGrid) -> Result<f64> {
    let paths = forward_all(spec, ensemble, u)?;
    terminal_cost(spec, ensemble, &paths)
}

pub fn sweep(spec: &ProblemSpec, ensemble: &Ensemble, u: &ControlGrid) -> Result<Sweep> {
    let paths = forward_all(spec, ensemble, u)?;
    let cost = terminal_cost(spec, ensemble, &paths)?;
    backward_all(spec, ensemble, u, paths, cost)
}

fn backward_all(
    spec: &ProblemSpec,
    ensemble: &Ensemble,
    u: &ControlGrid,
    paths: Vec<StatePath>,
    cost: f64,
) -> Result<Sweep> {
    let adjoints = ensemble
        .samples()
        .iter()
        .zip(&paths)
        .enumerate()
        .map(|(i, (s, x))| integrate_adjoint(spec, u, x, s).map_err(|e| e.for_sample(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep { paths, adjoints, cost })
}

impl Sweep {
    pub fn switching(&self, spec: &ProblemSpec, ensemble: &Ensemble, eps_sing_rel: f64) -> Result<SwitchingProfile> {
        Ok(switching_function(spec, &self.paths, &self.adjoints, ensemble)?.with_relative_tolerance(eps_sing_rel))
    }
}

/// Gradient of `J_k` with respect to the nodal controls, from the discrete
/// adjoint of the RK4 scheme. It agrees with `−Ψ_j` times the trapezoidal
/// weight up to the discretization error; `solve_fixed_ensemble` uses the
/// latter as its L2 descent direction.
pub fn nodal_gradient(spec: &ProblemSpec, ensemble: &Ensemble, u: &ControlGrid) -> Result<Vec<f64>> {
    let paths = forward_all(spec, ensemble, u)?;
    let mut total = vec![0.0; u.grid().len()];
    for (i, (s, x)) in ensemble.samples().iter().zip(&paths).enumerate() {
        let g = discrete_control_gradient(spec, u, x, s).map_err(|e| e.for_sample(i))?;
        for (t, v) in total.iter_mut().zip(g) {
            *t += s.weight() * v;
        }
    }
    Ok(total)
}

/// Result of one fixed-ensemble solve.
#[derive(Clone, Debug)]
pub struct FixedSolution {
    pub control: ControlGrid,
    pub cost: f64,
    /// Accepted projected-gradient steps.
    pub iterations: usize,
    /// Backtracking exhausted without sufficient decrease.
    pub stalled: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Sweep at the returned control.
    pub sweep: Sweep,
}

/// Minimizes J_k for a fixed ensemble by projected gradient with Armijo backtracking.
///
/// Trial steps after the first use the Barzilai–Borwein quotient
/// `⟨s, s⟩ / ⟨s, y⟩` of the last accepted move.
pub fn solve_fixed_ensemble(
    spec: &ProblemSpec,
    ensemble: &Ensemble,
    options: &SolverOptions,
    warm_start: Option<&ControlGrid>,
) -> Result<FixedSolution> {
    options.validate()?;
    let grid = TimeGrid::for_problem(spec, options.grid)?;
    let mut u = match warm_start {
        Some(w) => w.resample(grid).projected(spec),
        None => ControlGrid::constant(grid, 0.5 * (spec.u_min() + spec.u_max())),
    };
    let mut current = sweep(spec, ensemble, &u)?;
    let mut psi = switching_function(spec, &current.paths, &current.adjoints, ensemble)?;
    let mut history = vec![current.cost];
    let mut iterations = 0;
    let mut stalled = false;

    let psi_max = psi.max_abs();
    if psi_max == 0.0 {
        return Ok(FixedSolution {
            control: u,
            cost: current.cost,
            iterations: 1,
            stalled,
            cost_history: history,
            sweep: current,
        });
    }
    let span = spec.u_max() - spec.u_min();
    let mut step = options.initial_step.unwrap_or(span / psi_max);
    let step_cap = 1e6 * span / psi_max;

    while iterations < options.max_inner_iters {
        let mut accepted = None;
        let mut trial_step = step;
        for _ in 0..options.max_backtracks {
            let candidate = ControlGrid::new(
                grid,
                u.values()
                    .iter()
                    .zip(psi.values())
                    .map(|(v, p)| spec.project(v + trial_step * p))
                    .collect(),
            )?;
            let moved: Vec<f64> = candidate.values().iter().zip(u.values()).map(|(a, b)| a - b).collect();
            // descent ⟨∇J, d⟩ = −⟨Ψ, d⟩
            let slope = grid.l2_dot(psi.values(), &moved);
            if slope <= 0.0 {
                break;
            }
            let paths = forward_all(spec, ensemble, &candidate)?;
            let cost = terminal_cost(spec, ensemble, &paths)?;
            if cost <= current.cost - options.armijo * slope {
                accepted = Some((candidate, moved, paths, cost));
                break;
            }
            trial_step *= options.backtrack;
        }
        let Some((candidate, moved, paths, cost)) = accepted else {
            // projection fixed point or no sufficient decrease
            stalled = psi.values().iter().zip(u.values()).any(|(p, v)| {
                let target = spec.project(v + step * p);
                (target - v).abs() > 0.0
            });
            break;
        };
        let next = backward_all(spec, ensemble, &candidate, paths, cost)?;
        let next_psi = switching_function(spec, &next.paths, &next.adjoints, ensemble)?;
        iterations += 1;
        let decrease = (current.cost - next.cost) / current.cost.abs().max(f64::MIN_POSITIVE);

        // y = ∇J_new − ∇J_old = −(Ψ_new − Ψ_old)
        let dpsi: Vec<f64> = psi.values().iter().zip(next_psi.values()).map(|(a, b)| a - b).collect();
        let sy = grid.l2_dot(&moved, &dpsi);
        let ss = grid.l2_dot(&moved, &moved);
        step = if sy > 0.0 {
            (ss / sy).min(step_cap)
        } else {
            (2.0 * trial_step).min(step_cap)
        };

        u = candidate;
        current = next;
        psi = next_psi;
        history.push(current.cost);
        if decrease < options.tol_inner {
            break;
        }
    }
    Ok(FixedSolution {
        control: u,
        cost: current.cost,
        iterations,
        stalled,
        cost_history: history,
        sweep: current,
    })
}

/// Ensemble sizes for the outer loop with a base seed and early-stop tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaaSchedule {
    sizes: Vec<usize>,
    base_seed: u64,
    tol_cost: f64,
    tol_control: f64,
}

impl SaaSchedule {
    pub fn new(sizes: Vec<usize>, base_seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::validation("schedule", "need at least one ensemble size"));
        }
        if sizes[0] == 0 {
            return Err(Error::validation("schedule", "ensemble sizes must be positive"));
        }
        if sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                "schedule",
                "ensemble sizes must be strictly increasing",
            ));
        }
        Ok(Self {
            sizes,
            base_seed,
            tol_cost: 0.0,
            tol_control: 0.0,
        })
    }

    /// `k_min, k_min + 1, …, k_max`.
    pub fn range(k_min: usize, k_max: usize, base_seed: u64) -> Result<Self> {
        if k_max < k_min {
            return Err(Error::validation("k_max", format!("must be at least k_min = {k_min}")));
        }
        Self::new((k_min..=k_max).collect(), base_seed)
    }

    /// Stops the loop once both relative changes fall strictly below these.
    /// Zero disables early stopping.
    pub fn with_tolerances(mut self, tol_cost: f64, tol_control: f64) -> Result<Self> {
        if !(tol_cost >= 0.0 && tol_control >= 0.0) {
            return Err(Error::validation("tolerances", "must be non-negative"));
        }
        self.tol_cost = tol_cost;
        self.tol_control = tol_control;
        Ok(self)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }
    pub fn tolerances(&self) -> (f64, f64) {
        (self.tol_cost, self.tol_control)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub k: usize,
    pub seed: u64,
    pub cost: f64,
    /// |J^{prev} − J^{k}| / |J^{prev}|, from the second iteration on.
    pub rel_cost: Option<f64>,
    /// ‖u^{prev} − u^{k}‖ / ‖u^{prev}‖ in the trapezoidal L2 norm.
    pub rel_control: Option<f64>,
    pub inner_iterations: usize,
    pub stalled: bool,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub records: Vec<OuterRecord>,
    pub control: ControlGrid,
    pub switching: SwitchingProfile,
    pub arcs: ArcClassification,
    /// Singular law on SINGULAR-labelled nodes of the final solve.
    pub singular: Vec<Option<SingularLaw>>,
    /// Final ensemble, paths and costates.
    pub ensemble: Ensemble,
    pub sweep: Sweep,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        self.sweep.cost
    }

    /// Clamped singular feedback per node, `None` off singular arcs or where undefined.
    pub fn singular_controls(&self) -> Vec<Option<f64>> {
        self.singular.iter().map(|s| s.and_then(|l| l.control)).collect()
    }
}

#[derive(Debug, ThisError)]
#[error("SAA iteration with k = {k} failed: {source}")]
pub struct SaaError {
    pub k: usize,
    #[source]
    pub source: Error,
    /// Records of the iterations completed before the failure.
    pub partial: Vec<OuterRecord>,
}

pub fn saa_solve(
    spec: &ProblemSpec,
    schedule: &SaaSchedule,
    options: &SolverOptions,
) -> std::result::Result<SolveReport, SaaError> {
    let started = Instant::now();
    let mut records: Vec<OuterRecord> = Vec::new();
    let mut last: Option<(Ensemble, FixedSolution)> = None;
    let mut stopped_early = false;
    let (tol_cost, tol_control) = schedule.tolerances();

    for &k in schedule.sizes() {
        let fail = |source: Error, partial: &[OuterRecord]| SaaError {
            k,
            source,
            partial: partial.to_vec(),
        };
        let seed = iteration_seed(schedule.base_seed(), k);
        let ensemble = sample_ensemble(spec.distributions(), k, seed).map_err(|e| fail(e, &records))?;
        let warm = last.as_ref().map(|(_, s)| &s.control);
        let solution = solve_fixed_ensemble(spec, &ensemble, options, warm).map_err(|e| fail(e, &records))?;

        let (rel_cost, rel_control) = match &last {
            Some((_, prev)) => {
                let grid = solution.control.grid();
                let prev_u = prev.control.resample(*grid);
                let diff: Vec<f64> = prev_u
                    .values()
                    .iter()
                    .zip(solution.control.values())
                    .map(|(a, b)| a - b)
                    .collect();
                let rel_j = (prev.cost - solution.cost).abs() / prev.cost.abs();
                let rel_u = grid.l2_norm(&diff) / grid.l2_norm(prev_u.values());
                (Some(rel_j), Some(rel_u))
            }
            None => (None, None),
        };
        records.push(OuterRecord {
            k,
            seed,
            cost: solution.cost,
            rel_cost,
            rel_control,
            inner_iterations: solution.iterations,
            stalled: solution.stalled,
        });
        last = Some((ensemble, solution));
        if let (Some(rj), Some(ru)) = (rel_cost, rel_control) {
            if rj < tol_cost && ru < tol_control {
                stopped_early = true;
                break;
            }
        }
    }

    let (ensemble, solution) = last.expect("schedule is non-empty");
    let k = ensemble.len();
    let fail = |source: Error, partial: &[OuterRecord]| SaaError {
        k,
        source,
        partial: partial.to_vec(),
    };
    let switching = solution
        .sweep
        .switching(spec, &ensemble, options.eps_sing_rel)
        .map_err(|e| fail(e, &records))?;
    let arcs = classify_arcs_with(&switching, options.min_arc_nodes);
    let singular = feedback_on_singular_nodes(
        spec,
        &solution.sweep.paths,
        &solution.sweep.adjoints,
        &ensemble,
        &arcs,
        options.delta_den_rel,
    )
    .map_err(|e| fail(e, &records))?;
    Ok(SolveReport {
        records,
        control: solution.control,
        switching,
        arcs,
        singular,
        ensemble,
        sweep: solution.sweep,
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
