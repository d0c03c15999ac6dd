//! Sterile insect technique model in Mayer form.
//!
//! State `(A, F, M, M_s, z)`: aquatic stage, adult females, wild adult males,
//! sterile males, and the accumulated release cost `ż = c1·u`. The control is
//! the sterile-male release rate. Uncertain parameters, in sample order:
//! `nu, mu_A, mu_F, mu_M, mu_S`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FieldPair, ProblemSpec, TerminalCost};
use crate::ensemble::{Law, ParamDistribution, ParamSample};
use crate::error::{Error, Result};

const NU: usize = 0;
const MU_A: usize = 1;
const MU_F: usize = 2;
const MU_M: usize = 3;
const MU_S: usize = 4;

const A: usize = 0;
const F: usize = 1;
const M: usize = 2;
const MS: usize = 3;
const Z: usize = 4;

const DIM: usize = 5;

/// Below this mating denominator `M + γ M_s` the drift is reported non-finite.
const DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SitParams {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub r: f64,
    /// Carrying capacity of the aquatic stage.
    #[serde(rename = "k")]
    pub capacity: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SitParams {
    fn default() -> Self {
        Self {
            horizon: 90.0,
            alpha: 6.66,
            gamma: 0.91,
            r: 0.5,
            capacity: 20000.0,
            c1: 0.15,
            c2: 200.0,
        }
    }
}

impl SitParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [("k", self.capacity), ("gamma", self.gamma), ("T", self.horizon)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, format!("must be positive, got {v}")));
            }
        }
        let nonneg = [("alpha", self.alpha), ("c1", self.c1), ("c2", self.c2)];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, format!("must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::validation(
                "r",
                format!("sex ratio must lie in [0, 1], got {}", self.r),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SitModel {
    params: SitParams,
    growth: Option<(f64, f64)>,
}

impl SitModel {
    pub fn new(params: SitParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, growth: None })
    }

    /// Attaches the growth bound computed over the support of `distributions`.
    pub fn with_growth_bound(mut self, distributions: &[ParamDistribution]) -> Self {
        self.growth = Some(self.growth_constants_for(distributions));
        self
    }

    pub fn params(&self) -> &SitParams {
        &self.params
    }

    pub fn initial_state() -> Vec<f64> {
        vec![19941.0, 14956.0, 12962.0, 0.0, 0.0]
    }

    pub fn default_distributions() -> Vec<ParamDistribution> {
        [
            ("nu", 0.09, 0.11),
            ("mu_A", 0.009, 0.01),
            ("mu_F", 0.0625, 0.0714),
            ("mu_M", 0.0714, 0.083),
            ("mu_S", 0.111, 0.125),
        ]
        .into_iter()
        .map(|(n, lo, hi)| ParamDistribution::uniform(n, lo, hi).expect("valid default law"))
        .collect()
    }
}

impl FieldPair for SitModel {
    fn dim(&self) -> usize {
        DIM
    }

    fn param_names(&self) -> Vec<String> {
        ["nu", "mu_A", "mu_F", "mu_M", "mu_S"].map(String::from).to_vec()
    }

    fn drift(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        let p = &self.params;
        let (nu, mu_a, mu_f, mu_m, mu_s) = (w.value(NU), w.value(MU_A), w.value(MU_F), w.value(MU_M), w.value(MU_S));
        let den = x[M] + p.gamma * x[MS];
        let birth = if den.abs() > DENOMINATOR_FLOOR {
            p.alpha * x[M] * x[F] / den * (1.0 - x[A] / p.capacity)
        } else {
            f64::NAN
        };
        out[A] = birth - (mu_a + nu) * x[A];
        out[F] = p.r * nu * x[A] - mu_f * x[F];
        out[M] = (1.0 - p.r) * nu * x[A] - mu_m * x[M];
        out[MS] = -mu_s * x[MS];
        out[Z] = 0.0;
    }

    fn control_field(&self, _x: &[f64], _w: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 0.0, 0.0, 1.0, self.params.c1]);
    }

    fn drift_jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        let p = &self.params;
        let (nu, mu_a, mu_f, mu_m, mu_s) = (w.value(NU), w.value(MU_A), w.value(MU_F), w.value(MU_M), w.value(MU_S));
        out.fill(0.0);
        let den = x[M] + p.gamma * x[MS];
        let logistic = 1.0 - x[A] / p.capacity;
        let mating = p.alpha * x[M] * x[F] / den;
        let d2 = den * den;
        let row = |i: usize, j: usize| i * DIM + j;
        out[row(A, A)] = -mating / p.capacity - (mu_a + nu);
        out[row(A, F)] = logistic * p.alpha * x[M] / den;
        out[row(A, M)] = logistic * p.alpha * x[F] * p.gamma * x[MS] / d2;
        out[row(A, MS)] = -logistic * p.alpha * x[M] * x[F] * p.gamma / d2;
        out[row(F, A)] = p.r * nu;
        out[row(F, F)] = -mu_f;
        out[row(M, A)] = (1.0 - p.r) * nu;
        out[row(M, M)] = -mu_m;
        out[row(MS, MS)] = -mu_s;
    }

    fn control_jacobian(&self, _x: &[f64], _w: &ParamSample, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn drift_hessian(&self, x: &[f64], _w: &ParamSample, out: &mut [f64]) -> bool {
        let p = &self.params;
        out.fill(0.0);
        let den = x[M] + p.gamma * x[MS];
        let (d2, d3) = (den * den, den * den * den);
        let logistic = 1.0 - x[A] / p.capacity;
        let (f, m, ms) = (x[F], x[M], x[MS]);
        let (a, g) = (p.alpha, p.gamma);
        // partials of the mating term R = α M F / (M + γ M_s)
        let r_f = a * m / den;
        let r_m = a * f * g * ms / d2;
        let r_ms = -a * m * f * g / d2;
        let r_fm = a * g * ms / d2;
        let r_fms = -a * m * g / d2;
        let r_mm = -2.0 * a * f * g * ms / d3;
        let r_mms = a * f * g * (m - g * ms) / d3;
        let r_msms = 2.0 * a * m * f * g * g / d3;
        let mut set = |j: usize, k: usize, v: f64| {
            out[(A * DIM + j) * DIM + k] = v;
            out[(A * DIM + k) * DIM + j] = v;
        };
        let kc = p.capacity;
        set(A, F, -r_f / kc);
        set(A, M, -r_m / kc);
        set(A, MS, -r_ms / kc);
        set(F, M, logistic * r_fm);
        set(F, MS, logistic * r_fms);
        set(M, M, logistic * r_mm);
        set(M, MS, logistic * r_mms);
        set(MS, MS, logistic * r_msms);
        true
    }

    fn control_hessian(&self, _x: &[f64], _w: &ParamSample, out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }

    /// Valid on the invariant region `0 ≤ A ≤ k`, `M > 0`, `M_s ≥ 0`, where the
    /// mating term is bounded by `α F`.
    fn growth_constants(&self) -> Option<(f64, f64)> {
        self.growth
    }
}

impl SitModel {
    /// Growth constants `(c0, c1)` over the support of `distributions`, given
    /// in model order.
    pub fn growth_constants_for(&self, distributions: &[ParamDistribution]) -> (f64, f64) {
        let sup = |i: usize| match distributions[i].law() {
            Law::Uniform { lo, hi } => lo.abs().max(hi.abs()),
            Law::Point { value } => value.abs(),
        };
        let p = &self.params;
        let rows = [
            sup(MU_A) + sup(NU),
            p.alpha,
            p.r * sup(NU),
            sup(MU_F),
            (1.0 - p.r) * sup(NU),
            sup(MU_M),
            sup(MU_S),
        ];
        let c0 = rows.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c1 = (1.0 + p.c1 * p.c1).sqrt();
        (c0, c1)
    }
}

/// Terminal cost z(T) + c2 (F(T) + M(T)).
#[derive(Clone, Debug)]
pub struct SitCost {
    c2: f64,
}

impl TerminalCost for SitCost {
    fn value(&self, x: &[f64], _w: &ParamSample) -> f64 {
        x[Z] + self.c2 * (x[F] + x[M])
    }

    fn gradient(&self, _x: &[f64], _w: &ParamSample, out: &mut [f64]) {
        out.copy_from_slice(&[0.0, self.c2, self.c2, 0.0, 1.0]);
    }
}

/// The augmented five-state SIT problem with release bounds `[0, 2·10⁵]`.
///
/// `distributions` defaults to the model's uniform laws when `None`.
pub fn sit_problem(params: SitParams, distributions: Option<Vec<ParamDistribution>>) -> Result<ProblemSpec> {
    let model = SitModel::new(params)?;
    let laws = distributions.unwrap_or_else(SitModel::default_distributions);
    let probe = ProblemSpec::new(
        "sit",
        Arc::new(model.clone()),
        Arc::new(SitCost { c2: params.c2 }),
        (0.0, params.horizon),
        SitModel::initial_state(),
        (0.0, 2.0e5),
        laws,
    )?;
    // laws are now validated and in model order
    let model = model.with_growth_bound(probe.distributions());
    ProblemSpec::new(
        "sit",
        Arc::new(model),
        Arc::new(SitCost { c2: params.c2 }),
        (0.0, params.horizon),
        SitModel::initial_state(),
        (0.0, 2.0e5),
        probe.distributions().to_vec(),
    )
}
