//! Small models with hand-solvable optimality systems.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FieldPair, ProblemSpec, TerminalCost};
use crate::ensemble::{Law, ParamDistribution, ParamSample};
use crate::error::{Error, Result};

fn sup_abs(d: &ParamDistribution) -> f64 {
    match d.law() {
        Law::Uniform { lo, hi } => lo.abs().max(hi.abs()),
        Law::Point { value } => value.abs(),
    }
}

fn check_horizon(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::validation("T", format!("horizon must be positive, got {t}")))
    }
}

/// Scalar `ẋ = a·x + u` with terminal cost `g = x(T)`.
///
/// The costate is `p(t) = −e^{a(T−t)} < 0`, so every admissible `a` yields
/// `ū ≡ u_min` and `J = E[x0 e^{aT} + u_min (e^{aT} − 1)/a]`.
#[derive(Clone, Debug)]
pub struct LqToy {
    growth: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqToyParams {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x0: f64,
}

impl Default for LqToyParams {
    fn default() -> Self {
        Self { horizon: 1.0, x0: 0.0 }
    }
}

impl FieldPair for LqToy {
    fn dim(&self) -> usize {
        1
    }
    fn param_names(&self) -> Vec<String> {
        vec!["a".into()]
    }
    fn drift(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        out[0] = w.value(0) * x[0];
    }
    fn control_field(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn drift_jacobian(&self, _: &[f64], w: &ParamSample, out: &mut [f64]) {
        out[0] = w.value(0);
    }
    fn control_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_hessian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
    fn control_hessian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
    fn growth_constants(&self) -> Option<(f64, f64)> {
        self.growth
    }
}

/// `g(x) = x`.
#[derive(Clone, Copy, Debug)]
pub struct Identity;

impl TerminalCost for Identity {
    fn value(&self, x: &[f64], _: &ParamSample) -> f64 {
        x[0]
    }
    fn gradient(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// Drift rate `a` defaults to the point mass at 0, giving `ẋ = u`.
pub fn lq_toy_problem(params: LqToyParams, distributions: Option<Vec<ParamDistribution>>) -> Result<ProblemSpec> {
    check_horizon(params.horizon)?;
    let laws = match distributions {
        Some(d) => d,
        None => vec![ParamDistribution::point("a", 0.0)?],
    };
    let probe = ProblemSpec::new(
        "lq_toy",
        Arc::new(LqToy { growth: None }),
        Arc::new(Identity),
        (0.0, params.horizon),
        vec![params.x0],
        (-1.0, 1.0),
        laws,
    )?;
    let growth = Some((sup_abs(&probe.distributions()[0]), 1.0));
    ProblemSpec::new(
        "lq_toy",
        Arc::new(LqToy { growth }),
        Arc::new(Identity),
        (0.0, params.horizon),
        vec![params.x0],
        (-1.0, 1.0),
        probe.distributions().to_vec(),
    )
}

/// `ẋ1 = x2, ẋ2 = u` with `g = ½ (q x1² + x2²)`. The control field is
/// constant and [f1, [f0, f1]] ≡ 0, so no first-order singular law exists.
#[derive(Clone, Copy, Debug)]
pub struct DoubleIntegrator;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleIntegratorParams {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x0: [f64; 2],
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        Self {
            horizon: 2.0,
            x0: [1.0, 0.0],
        }
    }
}

impl FieldPair for DoubleIntegrator {
    fn dim(&self) -> usize {
        2
    }
    fn param_names(&self) -> Vec<String> {
        vec!["q".into()]
    }
    fn drift(&self, x: &[f64], _: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[x[1], 0.0]);
    }
    fn control_field(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0]);
    }
    fn drift_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    }
    fn control_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_hessian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
    fn control_hessian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
    fn growth_constants(&self) -> Option<(f64, f64)> {
        Some((1.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug)]
struct WeightedQuadratic;

impl TerminalCost for WeightedQuadratic {
    fn value(&self, x: &[f64], w: &ParamSample) -> f64 {
        0.5 * (w.value(0) * x[0] * x[0] + x[1] * x[1])
    }
    fn gradient(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[w.value(0) * x[0], x[1]]);
    }
}

/// Position weight `q` defaults to the point mass at 1.
pub fn double_integrator_problem(
    params: DoubleIntegratorParams,
    distributions: Option<Vec<ParamDistribution>>,
) -> Result<ProblemSpec> {
    check_horizon(params.horizon)?;
    let laws = match distributions {
        Some(d) => d,
        None => vec![ParamDistribution::point("q", 1.0)?],
    };
    ProblemSpec::new(
        "double_integrator",
        Arc::new(DoubleIntegrator),
        Arc::new(WeightedQuadratic),
        (0.0, params.horizon),
        params.x0.to_vec(),
        (-1.0, 1.0),
        laws,
    )
}

/// Mayer form of `min E[∫ ½ w x1² dt]` with `ẋ1 = u`, `|u| ≤ 1`, `x1(0) = 1`:
/// `f0 = (0, ½ w x1²)`, `f1 = (1, 0)`, `g = x2(T)`.
///
/// For any positive law on `w` the optimum is `u = −1` on `[0, 1)` followed by
/// the singular arc `u = 0`, where [f0,[f0,f1]] = 0 and
/// `⟨p, [f1,[f0,f1]]⟩ = w > 0`. Optimal cost `E[w]/6`.
#[derive(Clone, Copy, Debug)]
pub struct SingularToy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingularToyParams {
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl Default for SingularToyParams {
    fn default() -> Self {
        Self { horizon: 3.0 }
    }
}

impl FieldPair for SingularToy {
    fn dim(&self) -> usize {
        2
    }
    fn param_names(&self) -> Vec<String> {
        vec!["w".into()]
    }
    fn drift(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 0.5 * w.value(0) * x[0] * x[0]]);
    }
    fn control_field(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0]);
    }
    fn drift_jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 0.0, w.value(0) * x[0], 0.0]);
    }
    fn control_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_hessian(&self, _: &[f64], w: &ParamSample, out: &mut [f64]) -> bool {
        out.fill(0.0);
        // ∂²f0_2/∂x1²
        out[4] = w.value(0);
        true
    }
    fn control_hessian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
}

#[derive(Clone, Copy, Debug)]
struct SecondComponent;

impl TerminalCost for SecondComponent {
    fn value(&self, x: &[f64], _: &ParamSample) -> f64 {
        x[1]
    }
    fn gradient(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 1.0]);
    }
}

/// Cost weight `w` defaults to Uniform(0.5, 1.5).
pub fn singular_toy_problem(
    params: SingularToyParams,
    distributions: Option<Vec<ParamDistribution>>,
) -> Result<ProblemSpec> {
    check_horizon(params.horizon)?;
    let laws = match distributions {
        Some(d) => d,
        None => vec![ParamDistribution::uniform("w", 0.5, 1.5)?],
    };
    ProblemSpec::new(
        "singular_toy",
        Arc::new(SingularToy),
        Arc::new(SecondComponent),
        (0.0, params.horizon),
        vec![1.0, 0.0],
        (-1.0, 1.0),
        laws,
    )
}
