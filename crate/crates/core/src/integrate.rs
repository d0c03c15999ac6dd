//! Fixed-grid RK4 sweeps for the state ensemble (forward) and the costate
//! ensemble (backward).
//!
//! Inside a step the control is linear between its node values, so the
//! midpoint stages see `(u_j + u_{j+1}) / 2`. The backward sweep reads the
//! stored states and interpolates them linearly at the midpoint stages. That
//! interpolation is O(h²) and sets the accuracy floor of the costate.

use serde::{Deserialize, Serialize};

use crate::dynamics::{mat_t_vec, ProblemSpec};
use crate::ensemble::ParamSample;
use crate::error::{Error, Result};

/// Uniform grid `t_j = t0 + j (T − t0) / N`, `j = 0..=N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::validation("grid", "need at least one step"));
        }
        if !(t0.is_finite() && t_end.is_finite()) || t_end <= t0 {
            return Err(Error::validation(
                "T",
                format!("horizon end {t_end} must exceed start {t0}"),
            ));
        }
        Ok(Self { t0, t_end, steps })
    }

    pub fn for_problem(spec: &ProblemSpec, steps: usize) -> Result<Self> {
        Self::new(spec.t0(), spec.t_end(), steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }
    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    /// Number of nodes, `N + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn step(&self) -> f64 {
        (self.t_end - self.t0) / self.steps as f64
    }
    pub fn node(&self, j: usize) -> f64 {
        if j == self.steps {
            self.t_end
        } else {
            self.t0 + j as f64 * self.step()
        }
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.node(j)).collect()
    }

    /// Trapezoidal quadrature weights: `h/2` at the ends, `h` inside.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let h = self.step();
        let mut w = vec![h; self.len()];
        w[0] = 0.5 * h;
        w[self.steps] = 0.5 * h;
        w
    }

    /// Continuous L2 norm of nodal values under the trapezoidal rule.
    pub fn l2_norm(&self, values: &[f64]) -> f64 {
        self.trapezoid_weights()
            .iter()
            .zip(values)
            .map(|(w, v)| w * v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Trapezoidal L2 inner product.
    pub fn l2_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.trapezoid_weights()
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }
}

/// Nodal control values on a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl ControlGrid {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                what: "control nodes",
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("control", "control values must be finite"));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Clamps every node into `[u_min, u_max]` of `spec`.
    pub fn projected(mut self, spec: &ProblemSpec) -> Self {
        self.values.iter_mut().for_each(|v| *v = spec.project(*v));
        self
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Piecewise-linear value at time `t`, clamped to the grid's horizon.
    pub fn value_at(&self, t: f64) -> f64 {
        let h = self.grid.step();
        let s = ((t - self.grid.t0()) / h).clamp(0.0, self.grid.steps() as f64);
        let j = (s.floor() as usize).min(self.grid.steps() - 1);
        let theta = s - j as f64;
        (1.0 - theta) * self.values[j] + theta * self.values[j + 1]
    }

    /// Linear interpolation onto another grid.
    pub fn resample(&self, grid: TimeGrid) -> Self {
        if grid == self.grid {
            return self.clone();
        }
        let values = grid.nodes().into_iter().map(|t| self.value_at(t)).collect();
        Self { grid, values }
    }
}

/// Nodal states of one sample's trajectory, stored row by row.
#[derive(Clone, Debug)]
pub struct StatePath {
    grid: TimeGrid,
    dim: usize,
    states: Vec<f64>,
    sample: ParamSample,
}

impl StatePath {
    /// Wraps externally computed nodal states (`N + 1` rows of length `dim`).
    pub fn from_nodes(grid: TimeGrid, dim: usize, states: Vec<f64>, sample: ParamSample) -> Result<Self> {
        check_nodes(&grid, dim, &states)?;
        Ok(Self {
            grid,
            dim,
            states,
            sample,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }
    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.steps())
    }
    pub fn sample(&self) -> &ParamSample {
        &self.sample
    }
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
    /// `max_j |x_j|` in the Euclidean norm.
    pub fn sup_norm(&self) -> f64 {
        self.iter().map(euclid).fold(0.0, f64::max)
    }
}

/// Nodal costates of one sample, stored row by row.
#[derive(Clone, Debug)]
pub struct AdjointPath {
    grid: TimeGrid,
    dim: usize,
    costates: Vec<f64>,
    sample: ParamSample,
}

impl AdjointPath {
    pub fn from_nodes(grid: TimeGrid, dim: usize, costates: Vec<f64>, sample: ParamSample) -> Result<Self> {
        check_nodes(&grid, dim, &costates)?;
        Ok(Self {
            grid,
            dim,
            costates,
            sample,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn costate(&self, j: usize) -> &[f64] {
        &self.costates[j * self.dim..(j + 1) * self.dim]
    }
    pub fn sample(&self) -> &ParamSample {
        &self.sample
    }
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.costates.chunks_exact(self.dim)
    }
    pub fn sup_norm(&self) -> f64 {
        self.iter().map(euclid).fold(0.0, f64::max)
    }
}

fn check_nodes(grid: &TimeGrid, dim: usize, values: &[f64]) -> Result<()> {
    if values.len() != grid.len() * dim {
        return Err(Error::LengthMismatch {
            what: "nodal values",
            expected: grid.len() * dim,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("path", "nodal values must be finite"));
    }
    Ok(())
}

pub(crate) fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Rhs<'a> {
    spec: &'a ProblemSpec,
    w: &'a ParamSample,
    drift: Vec<f64>,
    ctrl: Vec<f64>,
}

impl Rhs<'_> {
    fn eval(&mut self, x: &[f64], u: f64, out: &mut [f64]) {
        let f = self.spec.fields();
        f.drift(x, self.w, &mut self.drift);
        f.control_field(x, self.w, &mut self.ctrl);
        for ((o, a), b) in out.iter_mut().zip(&self.drift).zip(&self.ctrl) {
            *o = a + b * u;
        }
    }
}

/// Classical RK4 on `ẋ = f0(x, ω) + f1(x, ω) u(t)` starting from the problem's `x0`.
pub fn integrate_forward(spec: &ProblemSpec, u: &ControlGrid, w: &ParamSample) -> Result<StatePath> {
    let grid = *u.grid();
    let n = spec.dim();
    let h = grid.step();
    let uv = u.values();
    let mut rhs = Rhs {
        spec,
        w,
        drift: vec![0.0; n],
        ctrl: vec![0.0; n],
    };
    let mut states = Vec::with_capacity(grid.len() * n);
    states.extend_from_slice(spec.x0());
    let mut x = spec.x0().to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..grid.steps() {
        let (u0, u1) = (uv[j], uv[j + 1]);
        let um = 0.5 * (u0 + u1);
        rhs.eval(&x, u0, &mut k1);
        axpy_into(&x, 0.5 * h, &k1, &mut tmp);
        rhs.eval(&tmp, um, &mut k2);
        axpy_into(&x, 0.5 * h, &k2, &mut tmp);
        rhs.eval(&tmp, um, &mut k3);
        axpy_into(&x, h, &k3, &mut tmp);
        rhs.eval(&tmp, u1, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationAbort {
                kind: "state",
                step: j + 1,
                t: grid.node(j + 1),
                sample: None,
            });
        }
        states.extend_from_slice(&x);
    }
    Ok(StatePath {
        grid,
        dim: n,
        states,
        sample: w.clone(),
    })
}

fn axpy_into(x: &[f64], a: f64, k: &[f64], out: &mut [f64]) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

/// Linearized dynamics `∇ₓf = J0 + u J1` at one point.
struct Linearization<'a> {
    spec: &'a ProblemSpec,
    w: &'a ParamSample,
    j1: Vec<f64>,
}

impl Linearization<'_> {
    fn at(&mut self, x: &[f64], u: f64, out: &mut [f64]) {
        let f = self.spec.fields();
        f.drift_jacobian(x, self.w, out);
        f.control_jacobian(x, self.w, &mut self.j1);
        for (o, b) in out.iter_mut().zip(&self.j1) {
            *o += u * b;
        }
    }
}

/// Backward RK4 on `−ṗ = [∇ₓf(x, u, ω)]ᵀ p` from `p(T) = −∇ₓg(x(T), ω)`.
pub fn integrate_adjoint(
    spec: &ProblemSpec,
    u: &ControlGrid,
    path: &StatePath,
    w: &ParamSample,
) -> Result<AdjointPath> {
    let grid = *u.grid();
    if *path.grid() != grid {
        return Err(Error::validation(
            "path",
            "state path and control live on different grids",
        ));
    }
    let n = spec.dim();
    if path.dim() != n {
        return Err(Error::LengthMismatch {
            what: "state path dimension",
            expected: n,
            got: path.dim(),
        });
    }
    let steps = grid.steps();
    let h = grid.step();
    let uv = u.values();
    let mut lin = Linearization {
        spec,
        w,
        j1: vec![0.0; n * n],
    };
    let mut costates = vec![0.0; grid.len() * n];
    let mut p = vec![0.0; n];
    spec.cost().gradient(path.terminal(), w, &mut p);
    p.iter_mut().for_each(|v| *v = -*v);
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationAbort {
            kind: "costate",
            step: steps,
            t: grid.t_end(),
            sample: None,
        });
    }
    costates[steps * n..].copy_from_slice(&p);

    let mut a_hi = vec![0.0; n * n];
    let mut a_mid = vec![0.0; n * n];
    let mut a_lo = vec![0.0; n * n];
    let mut x_mid = vec![0.0; n];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    lin.at(path.state(steps), uv[steps], &mut a_hi);
    for j in (0..steps).rev() {
        let (xl, xh) = (path.state(j), path.state(j + 1));
        for i in 0..n {
            x_mid[i] = 0.5 * (xl[i] + xh[i]);
        }
        lin.at(&x_mid, 0.5 * (uv[j] + uv[j + 1]), &mut a_mid);
        lin.at(xl, uv[j], &mut a_lo);
        // in reversed time s = T − t the costate obeys dp/ds = Aᵀ p
        mat_t_vec(&a_hi, &p, &mut k1);
        axpy_into(&p, 0.5 * h, &k1, &mut tmp);
        mat_t_vec(&a_mid, &tmp, &mut k2);
        axpy_into(&p, 0.5 * h, &k2, &mut tmp);
        mat_t_vec(&a_mid, &tmp, &mut k3);
        axpy_into(&p, h, &k3, &mut tmp);
        mat_t_vec(&a_lo, &tmp, &mut k4);
        for i in 0..n {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationAbort {
                kind: "costate",
                step: j,
                t: grid.node(j),
                sample: None,
            });
        }
        costates[j * n..(j + 1) * n].copy_from_slice(&p);
        std::mem::swap(&mut a_hi, &mut a_lo);
    }
    Ok(AdjointPath {
        grid,
        dim: n,
        costates,
        sample: w.clone(),
    })
}

/// Exact gradient of `g(x_N, ω)` with respect to the nodal controls `u_0..u_N`
/// for the RK4 scheme of [`integrate_forward`], by reverse differentiation of
/// each step. Stage states are recomputed from the stored nodes.
pub fn discrete_control_gradient(
    spec: &ProblemSpec,
    u: &ControlGrid,
    path: &StatePath,
    w: &ParamSample,
) -> Result<Vec<f64>> {
    let grid = *u.grid();
    if *path.grid() != grid {
        return Err(Error::validation(
            "path",
            "state path and control live on different grids",
        ));
    }
    let n = spec.dim();
    let h = grid.step();
    let uv = u.values();
    let f = spec.fields();
    let mut rhs = Rhs {
        spec,
        w,
        drift: vec![0.0; n],
        ctrl: vec![0.0; n],
    };
    let mut lin = Linearization {
        spec,
        w,
        j1: vec![0.0; n * n],
    };
    let mut grad = vec![0.0; grid.len()];
    let mut lam = vec![0.0; n];
    spec.cost().gradient(path.terminal(), w, &mut lam);

    let mut ys = vec![vec![0.0; n]; 4];
    let mut k = vec![0.0; n];
    let mut a = vec![0.0; n * n];
    let mut f1 = vec![0.0; n];
    let mut kbar = vec![0.0; n];
    let mut ybar = vec![0.0; n];
    for j in (0..grid.steps()).rev() {
        let x = path.state(j);
        let um = 0.5 * (uv[j] + uv[j + 1]);
        let us = [uv[j], um, um, uv[j + 1]];
        // forward stages: y1 = x, y2 = x + h/2 k1, y3 = x + h/2 k2, y4 = x + h k3
        ys[0].copy_from_slice(x);
        for s in 0..3 {
            let (done, rest) = ys.split_at_mut(s + 1);
            rhs.eval(&done[s], us[s], &mut k);
            let c = if s == 2 { h } else { 0.5 * h };
            for i in 0..n {
                rest[0][i] = x[i] + c * k[i];
            }
        }
        // reverse: x' = x + h/6 (k1 + 2k2 + 2k3 + k4)
        let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        let mut xbar = lam.clone();
        let mut carry = vec![0.0; n];
        for s in (0..4).rev() {
            for i in 0..n {
                kbar[i] = weights[s] * lam[i] + carry[i];
            }
            lin.at(&ys[s], us[s], &mut a);
            mat_t_vec(&a, &kbar, &mut ybar);
            f.control_field(&ys[s], w, &mut f1);
            let du: f64 = kbar.iter().zip(&f1).map(|(p, q)| p * q).sum();
            match s {
                0 => grad[j] += du,
                3 => grad[j + 1] += du,
                _ => {
                    grad[j] += 0.5 * du;
                    grad[j + 1] += 0.5 * du;
                }
            }
            let c = match s {
                3 => h,
                1 | 2 => 0.5 * h,
                _ => 0.0,
            };
            for i in 0..n {
                xbar[i] += ybar[i];
                carry[i] = c * ybar[i];
            }
        }
        if xbar.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationAbort {
                kind: "costate",
                step: j,
                t: grid.node(j),
                sample: None,
            });
        }
        lam = xbar;
    }
    Ok(grad)
}

/// `[|x0| + c (T − t0)] e^{c (T − t0)}`.
pub fn gronwall_ceiling(x0_norm: f64, c: f64, span: f64) -> f64 {
    (x0_norm + c * span) * (c * span).exp()
}

/// A priori bound on `sup_t |x(t, ω)|` for the control `u`, with
/// `c = c0 + ‖u‖∞ c1` from the model's growth constants. Infinite when the
/// model declares none.
pub fn gronwall_bound(spec: &ProblemSpec, u: &ControlGrid) -> f64 {
    match spec.fields().growth_constants() {
        Some((c0, c1)) => {
            let c = c0 + u.sup_norm() * c1;
            gronwall_ceiling(euclid(spec.x0()), c, spec.t_end() - spec.t0())
        }
        None => f64::INFINITY,
    }
}
