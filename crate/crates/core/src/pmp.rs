//! Ensemble maximum-principle quantities: Hamiltonian, switching function,
//! arc labels and the first-order singular feedback law.
//!
//! Sign convention: `p(T) = −∇g` and the optimal control maximizes the
//! ensemble Hamiltonian, so Ψ > 0 selects `u_max` and Ψ < 0 selects `u_min`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::{dot, nested_bracket_fields, FieldPair, ProblemSpec};
use crate::ensemble::{Ensemble, ParamSample};
use crate::error::{Error, Result};
use crate::integrate::{AdjointPath, StatePath, TimeGrid};

pub const DEFAULT_EPS_SING_REL: f64 = 1e-3;
pub const DEFAULT_DELTA_DEN_REL: f64 = 1e-8;
pub const DEFAULT_MIN_ARC_NODES: usize = 2;

/// ⟨p, f0(x, ω) + f1(x, ω) u⟩.
pub fn hamiltonian(fields: &dyn FieldPair, x: &[f64], p: &[f64], u: f64, w: &ParamSample) -> f64 {
    let n = fields.dim();
    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    fields.drift(x, w, &mut f0);
    fields.control_field(x, w, &mut f1);
    dot(p, &f0) + u * dot(p, &f1)
}

/// Σ_i w_i H(x_j⁽ⁱ⁾, p_j⁽ⁱ⁾, u, ω_i) at node `j`.
pub fn ensemble_hamiltonian(
    spec: &ProblemSpec,
    paths: &[StatePath],
    adjoints: &[AdjointPath],
    ensemble: &Ensemble,
    j: usize,
    u: f64,
) -> Result<f64> {
    check_counts(paths, adjoints, ensemble)?;
    Ok(ensemble
        .samples()
        .iter()
        .zip(paths.iter().zip(adjoints))
        .map(|(s, (x, p))| s.weight() * hamiltonian(spec.fields(), x.state(j), p.costate(j), u, s))
        .sum())
}

fn check_counts(paths: &[StatePath], adjoints: &[AdjointPath], ensemble: &Ensemble) -> Result<()> {
    for (what, got) in [("state paths", paths.len()), ("adjoint paths", adjoints.len())] {
        if got != ensemble.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: ensemble.len(),
                got,
            });
        }
    }
    if let Some(first) = paths.first() {
        let grid = first.grid();
        if paths.iter().any(|p| p.grid() != grid) || adjoints.iter().any(|p| p.grid() != grid) {
            return Err(Error::validation("paths", "all paths must share one grid"));
        }
    }
    Ok(())
}

/// Nodal values of Ψ(t) = ∫ ⟨p, f1⟩ dμ together with the singular dead-band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchingProfile {
    grid: TimeGrid,
    psi: Vec<f64>,
    eps_sing: f64,
}

impl SwitchingProfile {
    pub fn new(grid: TimeGrid, psi: Vec<f64>, eps_sing: f64) -> Result<Self> {
        if psi.len() != grid.len() {
            return Err(Error::LengthMismatch {
                what: "switching values",
                expected: grid.len(),
                got: psi.len(),
            });
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("psi", "switching function must be finite"));
        }
        if eps_sing.is_nan() || eps_sing < 0.0 {
            return Err(Error::validation("eps_sing", "dead-band must be non-negative"));
        }
        Ok(Self { grid, psi, eps_sing })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.psi
    }
    pub fn eps_sing(&self) -> f64 {
        self.eps_sing
    }
    pub fn max_abs(&self) -> f64 {
        self.psi.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sets the dead-band to `rel · max_j |Ψ_j|`, floored at the smallest positive double.
    pub fn with_relative_tolerance(mut self, rel: f64) -> Self {
        self.eps_sing = (rel * self.max_abs()).max(f64::MIN_POSITIVE);
        self
    }

    pub fn with_tolerance(mut self, eps_sing: f64) -> Self {
        self.eps_sing = eps_sing;
        self
    }
}

/// Ψ_j = Σ_i w_i ⟨p_j⁽ⁱ⁾, f1(x_j⁽ⁱ⁾, ω_i)⟩, with the default relative dead-band.
pub fn switching_function(
    spec: &ProblemSpec,
    paths: &[StatePath],
    adjoints: &[AdjointPath],
    ensemble: &Ensemble,
) -> Result<SwitchingProfile> {
    check_counts(paths, adjoints, ensemble)?;
    let first = paths
        .first()
        .ok_or_else(|| Error::validation("ensemble", "switching function needs at least one sample"))?;
    let grid = *first.grid();
    let n = spec.dim();
    let mut f1 = vec![0.0; n];
    let mut psi = vec![0.0; grid.len()];
    for (s, (x, p)) in ensemble.samples().iter().zip(paths.iter().zip(adjoints)) {
        for (j, acc) in psi.iter_mut().enumerate() {
            spec.fields().control_field(x.state(j), s, &mut f1);
            *acc += s.weight() * dot(p.costate(j), &f1);
        }
    }
    Ok(SwitchingProfile::new(grid, psi, 0.0)?.with_relative_tolerance(DEFAULT_EPS_SING_REL))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ArcLabel {
    Max,
    Min,
    Singular,
}

impl fmt::Display for ArcLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArcLabel::Max => "MAX",
            ArcLabel::Min => "MIN",
            ArcLabel::Singular => "SINGULAR",
        })
    }
}

/// A maximal run of nodes `start..=end` sharing one label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcInterval {
    pub label: ArcLabel,
    pub start: usize,
    pub end: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl ArcInterval {
    pub fn nodes(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Per-node labels (raw thresholding of Ψ) and the smoothed interval partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcClassification {
    pub labels: Vec<ArcLabel>,
    pub intervals: Vec<ArcInterval>,
}

impl ArcClassification {
    pub fn count(&self, label: ArcLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

pub fn label_of(psi: f64, eps_sing: f64) -> ArcLabel {
    if psi > eps_sing {
        ArcLabel::Max
    } else if psi < -eps_sing {
        ArcLabel::Min
    } else {
        ArcLabel::Singular
    }
}

pub fn classify_arcs(profile: &SwitchingProfile) -> ArcClassification {
    classify_arcs_with(profile, DEFAULT_MIN_ARC_NODES)
}

/// Labels each node by the sign of Ψ outside the dead-band, then merges runs
/// and absorbs runs shorter than `min_nodes` into their longer neighbour.
pub fn classify_arcs_with(profile: &SwitchingProfile, min_nodes: usize) -> ArcClassification {
    let labels: Vec<ArcLabel> = profile
        .values()
        .iter()
        .map(|v| label_of(*v, profile.eps_sing()))
        .collect();

    let mut runs: Vec<(ArcLabel, usize, usize)> = Vec::new();
    for (j, l) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some((label, _, end)) if label == l => *end = j,
            _ => runs.push((*l, j, j)),
        }
    }
    loop {
        let short = runs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.2 - r.1 + 1 < min_nodes)
            .min_by_key(|(i, r)| (r.2 - r.1, *i))
            .map(|(i, _)| i);
        let i = match short {
            Some(i) if runs.len() > 1 => i,
            _ => break,
        };
        let len = |r: &(ArcLabel, usize, usize)| r.2 - r.1 + 1;
        let into_left = match (i.checked_sub(1).map(|k| &runs[k]), runs.get(i + 1)) {
            (Some(l), Some(r)) => len(l) >= len(r),
            (Some(_), None) => true,
            _ => false,
        };
        let (_, start, end) = runs.remove(i);
        if into_left {
            runs[i - 1].2 = end;
        } else {
            runs[i].1 = start;
        }
        // neighbours may now share a label
        let mut merged: Vec<(ArcLabel, usize, usize)> = Vec::with_capacity(runs.len());
        for r in runs.drain(..) {
            match merged.last_mut() {
                Some(m) if m.0 == r.0 => m.2 = r.2,
                _ => merged.push(r),
            }
        }
        runs = merged;
    }
    let grid = profile.grid();
    let intervals = runs
        .into_iter()
        .map(|(label, start, end)| ArcInterval {
            label,
            start,
            end,
            t_start: grid.node(start),
            t_end: grid.node(end),
        })
        .collect();
    ArcClassification { labels, intervals }
}

/// Numerator and denominator of the singular law at one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularLaw {
    /// Σ_i w_i ⟨p, [f0, [f0, f1]]⟩
    pub numerator: f64,
    /// Σ_i w_i ⟨p, [f1, [f0, f1]]⟩
    pub denominator: f64,
    /// −numerator / denominator before clamping; `None` when the denominator
    /// is below the cancellation threshold (higher-order singular arc).
    pub unclamped: Option<f64>,
    /// The feedback clamped into `[u_min, u_max]`.
    pub control: Option<f64>,
}

pub fn singular_feedback(
    spec: &ProblemSpec,
    paths: &[StatePath],
    adjoints: &[AdjointPath],
    ensemble: &Ensemble,
    j: usize,
) -> Result<SingularLaw> {
    singular_feedback_with(spec, paths, adjoints, ensemble, j, DEFAULT_DELTA_DEN_REL)
}

/// Singular feedback with the denominator threshold `δ = delta_rel · (|numerator| + 1)`.
pub fn singular_feedback_with(
    spec: &ProblemSpec,
    paths: &[StatePath],
    adjoints: &[AdjointPath],
    ensemble: &Ensemble,
    j: usize,
    delta_rel: f64,
) -> Result<SingularLaw> {
    check_counts(paths, adjoints, ensemble)?;
    let brackets = nested_bracket_fields(spec.fields());
    let (mut numerator, mut denominator) = (0.0, 0.0);
    for (s, (x, p)) in ensemble.samples().iter().zip(paths.iter().zip(adjoints)) {
        let (xj, pj) = (x.state(j), p.costate(j));
        numerator += s.weight() * dot(pj, &brackets.drift_outer(xj, s));
        denominator += s.weight() * dot(pj, &brackets.control_outer(xj, s));
    }
    let threshold = delta_rel * (numerator.abs() + 1.0);
    let unclamped = (denominator.abs() > threshold).then(|| -numerator / denominator);
    Ok(SingularLaw {
        numerator,
        denominator,
        unclamped,
        control: unclamped.map(|v| spec.project(v)),
    })
}

/// Singular feedback at every node labelled SINGULAR; `None` elsewhere and
/// where the law is undefined.
pub fn feedback_on_singular_nodes(
    spec: &ProblemSpec,
    paths: &[StatePath],
    adjoints: &[AdjointPath],
    ensemble: &Ensemble,
    arcs: &ArcClassification,
    delta_rel: f64,
) -> Result<Vec<Option<SingularLaw>>> {
    arcs.labels
        .iter()
        .enumerate()
        .map(|(j, l)| match l {
            ArcLabel::Singular => singular_feedback_with(spec, paths, adjoints, ensemble, j, delta_rel).map(Some),
            _ => Ok(None),
        })
        .collect()
}
