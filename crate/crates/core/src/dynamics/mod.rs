//! Control-affine vector fields, Lie brackets and problem descriptions.
//!
//! Matrices are dense row-major slices: entry `(i, j)` of an `n × n` Jacobian
//! lives at `i * n + j`, and second-derivative tensors store
//! `∂²f_i/∂x_j∂x_k` at `(i * n + j) * n + k`.

mod sit;
mod toys;

use std::fmt;
use std::sync::Arc;

pub use sit::{sit_problem, SitModel, SitParams};
pub use toys::{
    double_integrator_problem, lq_toy_problem, singular_toy_problem, DoubleIntegrator, DoubleIntegratorParams, LqToy,
    LqToyParams, SingularToy, SingularToyParams,
};

use crate::ensemble::{ParamDistribution, ParamSample};
use crate::error::{Error, Result};

/// The pair (f0, f1) of ẋ = f0(x, ω) + f1(x, ω)·u with analytic Jacobians.
///
/// Implementations must be pure in `(x, ω)`: the integrators rely on
/// re-entrancy when sweeping samples.
pub trait FieldPair: Send + Sync {
    fn dim(&self) -> usize;

    /// Names of the uncertain parameters, in the order samples store them.
    fn param_names(&self) -> Vec<String>;

    fn drift(&self, x: &[f64], w: &ParamSample, out: &mut [f64]);

    fn control_field(&self, x: &[f64], w: &ParamSample, out: &mut [f64]);

    fn drift_jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]);

    fn control_jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]);

    /// Analytic second derivatives of f0. Returns `false` when not provided;
    /// bracket Jacobians then fall back to central differences.
    fn drift_hessian(&self, _x: &[f64], _w: &ParamSample, _out: &mut [f64]) -> bool {
        false
    }

    fn control_hessian(&self, _x: &[f64], _w: &ParamSample, _out: &mut [f64]) -> bool {
        false
    }

    /// Linear-growth constants `(c0, c1)` with `|f_i(x, ω)| ≤ c_i (1 + |x|)`
    /// over the region the model's trajectories stay in.
    fn growth_constants(&self) -> Option<(f64, f64)> {
        None
    }
}

pub trait TerminalCost: Send + Sync {
    fn value(&self, x: &[f64], w: &ParamSample) -> f64;

    fn gradient(&self, x: &[f64], w: &ParamSample, out: &mut [f64]);
}

/// A single smooth vector field with its Jacobian.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], w: &ParamSample, out: &mut [f64]);

    fn jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]);
}

/// f0 viewed as a standalone field.
pub struct Drift<'a>(pub &'a dyn FieldPair);

/// f1 viewed as a standalone field.
pub struct ControlField<'a>(pub &'a dyn FieldPair);

impl VectorField for Drift<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        self.0.drift(x, w, out)
    }
    fn jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        self.0.drift_jacobian(x, w, out)
    }
}

impl VectorField for ControlField<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        self.0.control_field(x, w, out)
    }
    fn jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        self.0.control_jacobian(x, w, out)
    }
}

/// `out = m · v` for a row-major square matrix.
pub(crate) fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `out = mᵀ · v` for a row-major square matrix.
pub(crate) fn mat_t_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, vi) in v.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&m[i * n..(i + 1) * n]) {
            *o += a * vi;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// f0(x, ω) + f1(x, ω)·u.
pub fn eval_rhs(fields: &dyn FieldPair, x: &[f64], u: f64, w: &ParamSample) -> Result<Vec<f64>> {
    let n = fields.dim();
    if x.len() != n {
        return Err(Error::LengthMismatch {
            what: "state",
            expected: n,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; n];
    let mut g = vec![0.0; n];
    fields.drift(x, w, &mut out);
    fields.control_field(x, w, &mut g);
    for (o, gi) in out.iter_mut().zip(&g) {
        *o += gi * u;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(
            "rhs",
            format!("non-finite vector field value at x = {x:?}"),
        ));
    }
    Ok(out)
}

/// [a, b](x) = b′(x)·a(x) − a′(x)·b(x).
pub fn lie_bracket(a: &dyn VectorField, b: &dyn VectorField, x: &[f64], w: &ParamSample) -> Result<Vec<f64>> {
    let n = a.dim();
    if b.dim() != n || x.len() != n {
        return Err(Error::LengthMismatch {
            what: "bracket dimensions",
            expected: n,
            got: if b.dim() != n { b.dim() } else { x.len() },
        });
    }
    let mut out = vec![0.0; n];
    bracket_into(a, b, x, w, &mut out);
    Ok(out)
}

fn bracket_into(a: &dyn VectorField, b: &dyn VectorField, x: &[f64], w: &ParamSample, out: &mut [f64]) {
    let n = x.len();
    let mut av = vec![0.0; n];
    let mut bv = vec![0.0; n];
    let mut ja = vec![0.0; n * n];
    let mut jb = vec![0.0; n * n];
    a.eval(x, w, &mut av);
    b.eval(x, w, &mut bv);
    a.jacobian(x, w, &mut ja);
    b.jacobian(x, w, &mut jb);
    let mut tmp = vec![0.0; n];
    mat_vec(&jb, &av, out);
    mat_vec(&ja, &bv, &mut tmp);
    for (o, t) in out.iter_mut().zip(&tmp) {
        *o -= t;
    }
}

/// Per-coordinate central-difference step for bracket Jacobians.
pub fn fd_step(xj: f64) -> f64 {
    (1e-6 * xj.abs()).max(1e-6)
}

/// The first bracket [f0, f1] as a vector field. Its Jacobian uses analytic
/// second derivatives when the model supplies both, otherwise central
/// differences of the analytic-Jacobian bracket expression.
pub struct FirstBracket<'a> {
    fields: &'a dyn FieldPair,
}

impl<'a> FirstBracket<'a> {
    pub fn new(fields: &'a dyn FieldPair) -> Self {
        Self { fields }
    }

    fn analytic_jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) -> bool {
        let n = x.len();
        let mut h0 = vec![0.0; n * n * n];
        let mut h1 = vec![0.0; n * n * n];
        if !(self.fields.drift_hessian(x, w, &mut h0) && self.fields.control_hessian(x, w, &mut h1)) {
            return false;
        }
        let mut f0 = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        let mut j0 = vec![0.0; n * n];
        let mut j1 = vec![0.0; n * n];
        self.fields.drift(x, w, &mut f0);
        self.fields.control_field(x, w, &mut f1);
        self.fields.drift_jacobian(x, w, &mut j0);
        self.fields.control_jacobian(x, w, &mut j1);
        // ∂/∂x_k (J1 f0 − J0 f1)_i
        for i in 0..n {
            for k in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    let t = (i * n + j) * n + k;
                    s += h1[t] * f0[j] + j1[i * n + j] * j0[j * n + k];
                    s -= h0[t] * f1[j] + j0[i * n + j] * j1[j * n + k];
                }
                out[i * n + k] = s;
            }
        }
        true
    }

    pub(crate) fn fd_jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        let n = x.len();
        let mut xp = x.to_vec();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for k in 0..n {
            let h = fd_step(x[k]);
            xp[k] = x[k] + h;
            self.eval(&xp, w, &mut plus);
            xp[k] = x[k] - h;
            self.eval(&xp, w, &mut minus);
            xp[k] = x[k];
            for i in 0..n {
                out[i * n + k] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
    }
}

impl VectorField for FirstBracket<'_> {
    fn dim(&self) -> usize {
        self.fields.dim()
    }

    fn eval(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        bracket_into(&Drift(self.fields), &ControlField(self.fields), x, w, out)
    }

    fn jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
        if !self.analytic_jacobian(x, w, out) {
            self.fd_jacobian(x, w, out);
        }
    }
}

/// Evaluators for the nested brackets entering the singular feedback law.
pub struct NestedBrackets<'a> {
    fields: &'a dyn FieldPair,
}

/// Builds the pair x ↦ [f0,[f0,f1]](x, ω) and x ↦ [f1,[f0,f1]](x, ω).
pub fn nested_bracket_fields(fields: &dyn FieldPair) -> NestedBrackets<'_> {
    NestedBrackets { fields }
}

impl NestedBrackets<'_> {
    /// [f0, [f0, f1]] at `x`.
    pub fn drift_outer(&self, x: &[f64], w: &ParamSample) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        bracket_into(&Drift(self.fields), &FirstBracket::new(self.fields), x, w, &mut out);
        out
    }

    /// [f1, [f0, f1]] at `x`.
    pub fn control_outer(&self, x: &[f64], w: &ParamSample) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        bracket_into(
            &ControlField(self.fields),
            &FirstBracket::new(self.fields),
            x,
            w,
            &mut out,
        );
        out
    }
}

/// Full description of an ensemble Mayer problem with a scalar box-bounded control.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    fields: Arc<dyn FieldPair>,
    cost: Arc<dyn TerminalCost>,
    t0: f64,
    t_end: f64,
    x0: Vec<f64>,
    u_min: f64,
    u_max: f64,
    distributions: Vec<ParamDistribution>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("horizon", &(self.t0, self.t_end))
            .field("x0", &self.x0)
            .field("bounds", &(self.u_min, self.u_max))
            .field("distributions", &self.distributions)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        fields: Arc<dyn FieldPair>,
        cost: Arc<dyn TerminalCost>,
        horizon: (f64, f64),
        x0: Vec<f64>,
        bounds: (f64, f64),
        distributions: Vec<ParamDistribution>,
    ) -> Result<Self> {
        let (t0, t_end) = horizon;
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(Error::validation(
                "T",
                format!("horizon end {t_end} must exceed start {t0}"),
            ));
        }
        if x0.len() != fields.dim() {
            return Err(Error::LengthMismatch {
                what: "initial state",
                expected: fields.dim(),
                got: x0.len(),
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("x0", "initial state must be finite"));
        }
        let spec = Self {
            name: name.into(),
            fields,
            cost,
            t0,
            t_end,
            x0,
            u_min: 0.0,
            u_max: 0.0,
            distributions: Vec::new(),
        };
        spec.with_bounds(bounds.0, bounds.1)?.with_distributions(distributions)
    }

    pub fn with_bounds(mut self, u_min: f64, u_max: f64) -> Result<Self> {
        if !u_min.is_finite() {
            return Err(Error::validation("u_min", "control bound must be finite"));
        }
        if !u_max.is_finite() || u_max <= u_min {
            return Err(Error::validation(
                "u_max",
                format!("need u_min < u_max, got [{u_min}, {u_max}]"),
            ));
        }
        self.u_min = u_min;
        self.u_max = u_max;
        Ok(self)
    }

    /// Replaces the parameter laws. They are matched to the model's parameters
    /// by name and stored in the model's order.
    pub fn with_distributions(mut self, distributions: Vec<ParamDistribution>) -> Result<Self> {
        let names = self.fields.param_names();
        if distributions.len() != names.len() {
            return Err(Error::validation(
                "distributions",
                format!("model `{}` expects parameters {names:?}", self.name),
            ));
        }
        let mut ordered = Vec::with_capacity(names.len());
        for name in &names {
            let mut matches = distributions.iter().filter(|d| d.name() == name);
            match (matches.next(), matches.next()) {
                (Some(d), None) => ordered.push(d.clone()),
                (None, _) => return Err(Error::validation(name.clone(), "missing parameter law")),
                (Some(_), Some(_)) => return Err(Error::validation(name.clone(), "parameter declared twice")),
            }
        }
        self.distributions = ordered;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn fields(&self) -> &dyn FieldPair {
        self.fields.as_ref()
    }
    pub fn cost(&self) -> &dyn TerminalCost {
        self.cost.as_ref()
    }
    pub fn dim(&self) -> usize {
        self.fields.dim()
    }
    pub fn t0(&self) -> f64 {
        self.t0
    }
    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn x0(&self) -> &[f64] {
        &self.x0
    }
    pub fn u_min(&self) -> f64 {
        self.u_min
    }
    pub fn u_max(&self) -> f64 {
        self.u_max
    }
    pub fn distributions(&self) -> &[ParamDistribution] {
        &self.distributions
    }

    pub fn project(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }

    /// Parameter sample at the distribution means.
    pub fn nominal_sample(&self) -> ParamSample {
        ParamSample::nominal(&self.distributions)
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    struct Affine {
        a: f64,
        b: f64,
    }

    impl FieldPair for Affine {
        fn dim(&self) -> usize {
            1
        }
        fn param_names(&self) -> Vec<String> {
            vec![]
        }
        fn drift(&self, x: &[f64], _: &ParamSample, out: &mut [f64]) {
            out[0] = self.a * x[0];
        }
        fn control_field(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
            out[0] = self.b;
        }
        fn drift_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
            out[0] = self.a;
        }
        fn control_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    struct Planar;

    // f0 = (x2, 0), f1 = (0, x1)
    impl FieldPair for Planar {
        fn dim(&self) -> usize {
            2
        }
        fn param_names(&self) -> Vec<String> {
            vec![]
        }
        fn drift(&self, x: &[f64], _: &ParamSample, out: &mut [f64]) {
            out.copy_from_slice(&[x[1], 0.0]);
        }
        fn control_field(&self, x: &[f64], _: &ParamSample, out: &mut [f64]) {
            out.copy_from_slice(&[0.0, x[0]]);
        }
        fn drift_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
            out.copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        }
        fn control_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
            out.copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        }
    }

    struct Constant(Vec<f64>);

    impl VectorField for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn eval(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
            out.copy_from_slice(&self.0);
        }
        fn jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Scales another field by a constant.
    struct Scaled<'a>(f64, &'a dyn VectorField);

    impl VectorField for Scaled<'_> {
        fn dim(&self) -> usize {
            self.1.dim()
        }
        fn eval(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
            self.1.eval(x, w, out);
            out.iter_mut().for_each(|v| *v *= self.0);
        }
        fn jacobian(&self, x: &[f64], w: &ParamSample, out: &mut [f64]) {
            self.1.jacobian(x, w, out);
            out.iter_mut().for_each(|v| *v *= self.0);
        }
    }

    #[test]
    fn rhs_examples() {
        let w = ParamSample::empty();
        let zero = Affine { a: 0.0, b: 0.0 };
        assert_eq!(eval_rhs(&zero, &[3.0], 5.0, &w).unwrap(), vec![0.0]);
        let f = Affine { a: 2.0, b: -3.0 };
        assert_eq!(eval_rhs(&f, &[1.5], 0.5, &w).unwrap(), vec![2.0 * 1.5 - 3.0 * 0.5]);
        assert!(eval_rhs(&f, &[1.0, 2.0], 0.0, &w).is_err());
    }

    #[test]
    fn bracket_with_itself_and_constants_vanish() {
        let w = ParamSample::empty();
        let p = Planar;
        let x = [0.3, -1.2];
        assert_eq!(lie_bracket(&Drift(&p), &Drift(&p), &x, &w).unwrap(), vec![0.0, 0.0]);
        let c1 = Constant(vec![1.0, 2.0]);
        let c2 = Constant(vec![-4.0, 0.5]);
        assert_eq!(lie_bracket(&c1, &c2, &x, &w).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn planar_bracket_matches_hand_value_and_fd() {
        let w = ParamSample::empty();
        let p = Planar;
        let x = [1.0, 2.0];
        // J1·f0 − J0·f1 = (0, x2) − (x1, 0)
        let b = lie_bracket(&Drift(&p), &ControlField(&p), &x, &w).unwrap();
        assert_eq!(b, vec![-1.0, 2.0]);
        let fd = fd_bracket(
            &|x, o| p.drift(x, &w, o),
            &|x, o| p.control_field(x, &w, o),
            &x,
            &|_| 1e-5,
        );
        assert!(rel_err(&b, &fd, 1e-12) < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let w = ParamSample::empty();
        let c1 = Constant(vec![1.0, 2.0]);
        let c2 = Constant(vec![1.0]);
        assert!(lie_bracket(&c1, &c2, &[0.0, 0.0], &w).is_err());
    }

    #[test]
    fn bracket_is_antisymmetric_and_bilinear() {
        let w = ParamSample::empty();
        let p = Planar;
        for x in [[0.1, 0.2], [-3.0, 4.0], [10.0, -0.5]] {
            let ab = lie_bracket(&Drift(&p), &ControlField(&p), &x, &w).unwrap();
            let ba = lie_bracket(&ControlField(&p), &Drift(&p), &x, &w).unwrap();
            for (u, v) in ab.iter().zip(&ba) {
                assert!((u + v).abs() <= 1e-12);
            }
            let drift = Drift(&p);
            let scaled = Scaled(2.5, &drift);
            let s = lie_bracket(&scaled, &ControlField(&p), &x, &w).unwrap();
            let ctrl = ControlField(&p);
            let s2 = lie_bracket(&Drift(&p), &Scaled(-0.75, &ctrl), &x, &w).unwrap();
            for i in 0..2 {
                assert!((s[i] - 2.5 * ab[i]).abs() <= 1e-12);
                assert!((s2[i] + 0.75 * ab[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_fields_give_zero_nested_brackets() {
        struct Const2;
        impl FieldPair for Const2 {
            fn dim(&self) -> usize {
                2
            }
            fn param_names(&self) -> Vec<String> {
                vec![]
            }
            fn drift(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
                out.copy_from_slice(&[1.0, -2.0]);
            }
            fn control_field(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
                out.copy_from_slice(&[0.5, 3.0]);
            }
            fn drift_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
                out.fill(0.0);
            }
            fn control_jacobian(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
                out.fill(0.0);
            }
        }
        let w = ParamSample::empty();
        let nb = nested_bracket_fields(&Const2);
        assert_eq!(nb.drift_outer(&[1.0, 1.0], &w), vec![0.0, 0.0]);
        assert_eq!(nb.control_outer(&[1.0, 1.0], &w), vec![0.0, 0.0]);
    }

    #[test]
    fn fd_fallback_nested_brackets_match_oracle_on_planar() {
        let w = ParamSample::empty();
        let p = Planar;
        let nb = nested_bracket_fields(&p);
        // [f0,f1] = (−x1, x2); [f0,[f0,f1]] = J_B f0 − J0 B = (−x2, 0) − (x2, 0)
        // [f1,[f0,f1]] = J_B f1 − J1 B = (0, x1) − (0, −x1)
        let x = [0.7, -1.3];
        let d = nb.drift_outer(&x, &w);
        let c = nb.control_outer(&x, &w);
        assert!(rel_err(&d, &[-2.0 * x[1], 0.0], 1.0) < 1e-8, "{d:?}");
        assert!(rel_err(&c, &[0.0, 2.0 * x[0]], 1.0) < 1e-8, "{c:?}");
    }

    #[test]
    fn spec_validation() {
        let f: Arc<dyn FieldPair> = Arc::new(Affine { a: 1.0, b: 1.0 });
        struct Lin;
        impl TerminalCost for Lin {
            fn value(&self, x: &[f64], _: &ParamSample) -> f64 {
                x[0]
            }
            fn gradient(&self, _: &[f64], _: &ParamSample, out: &mut [f64]) {
                out[0] = 1.0;
            }
        }
        let g: Arc<dyn TerminalCost> = Arc::new(Lin);
        let ok = ProblemSpec::new(
            "affine",
            f.clone(),
            g.clone(),
            (0.0, 1.0),
            vec![0.0],
            (-1.0, 1.0),
            vec![],
        );
        assert!(ok.is_ok());
        let bad_t = ProblemSpec::new(
            "affine",
            f.clone(),
            g.clone(),
            (1.0, 1.0),
            vec![0.0],
            (-1.0, 1.0),
            vec![],
        );
        assert!(bad_t.unwrap_err().to_string().contains("`T`"));
        let bad_u = ProblemSpec::new(
            "affine",
            f.clone(),
            g.clone(),
            (0.0, 1.0),
            vec![0.0],
            (1.0, -1.0),
            vec![],
        );
        assert!(bad_u.unwrap_err().to_string().contains("u_max"));
        let bad_x = ProblemSpec::new("affine", f, g, (0.0, 1.0), vec![0.0, 1.0], (-1.0, 1.0), vec![]);
        assert!(bad_x.is_err());
    }
}
