//! Closed-form equilibria, their local stability, and the nullclines.
//!
//! Interior equilibria lie on the ant nullcline `F = (d_a / r_a) A` where
//! `A` solves
//!
//! ```text
//! A^2 - 2 R A + b / a = 0,    R = r_f r_a / (2 (r_c r_a + d_f d_a)).
//! ```
//!
//! There are none for `a < a*`, one double root `A = R` at `a = a*`, and two
//! roots `A1 < R < A2` above the threshold. The larger root is computed as
//! `R + sqrt(R^2 - b/a)` and the smaller from the product `A1 A2 = b / a`,
//! which avoids cancellation when `b / a` is small against `R^2`.

use std::io::Write;

use nalgebra::{Complex, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BiomassState, ModelParams};

/// `|a - a*| / a*` below which the parameter set counts as tangent.
pub const TANGENT_TOL: f64 = 1e-12;

/// Field norm (scaled by `max(1, |state|)`) an equilibrium must satisfy.
pub const EQUILIBRIUM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `a < a*`: the origin is the only equilibrium.
    ExtinctionOnly,
    /// `a = a*`: one interior double root.
    Tangent,
    /// `a > a*`: a saddle and a stable interior equilibrium.
    Bistable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityLabel {
    StableNodeOrFocus,
    Saddle,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityClass {
    pub label: StabilityLabel,
    pub trace: f64,
    pub det: f64,
    pub eigenvalues: [Complex<f64>; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub state: BiomassState,
    pub stability: StabilityClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub regime: Regime,
    /// Coexistence threshold `a*`.
    pub threshold: f64,
    pub origin: EquilibriumPoint,
    /// Interior equilibria in increasing `A`.
    pub interior: Vec<EquilibriumPoint>,
}

impl EquilibriumReport {
    pub fn saddle(&self) -> Option<&EquilibriumPoint> {
        match self.regime {
            Regime::Bistable => self.interior.first(),
            _ => None,
        }
    }

    pub fn stable_interior(&self) -> Option<&EquilibriumPoint> {
        match self.regime {
            Regime::Bistable => self.interior.get(1),
            _ => None,
        }
    }

    /// JSON document `{regime, threshold, points: [{A, F, label, trace, det, eigs}]}`
    /// with the origin first; `params` is echoed under `params`.
    pub fn to_json_value(&self, params: &ModelParams) -> serde_json::Value {
        let points: Vec<serde_json::Value> = std::iter::once(&self.origin)
            .chain(self.interior.iter())
            .map(|p| {
                let s = &p.stability;
                let mut v = serde_json::json!({
                    "A": p.state.ants,
                    "F": p.state.fungus,
                    "label": s.label,
                    "trace": s.trace,
                    "det": s.det,
                    "eigs": [[s.eigenvalues[0].re, s.eigenvalues[0].im],
                             [s.eigenvalues[1].re, s.eigenvalues[1].im]],
                });
                if let Some(note) = &s.note {
                    v["note"] = serde_json::Value::String(note.clone());
                }
                v
            })
            .collect();
        serde_json::json!({
            "params": params,
            "regime": self.regime,
            "threshold": self.threshold,
            "points": points,
        })
    }

    pub fn write_json<W: Write>(&self, params: &ModelParams, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.to_json_value(params))?;
        writeln!(w)?;
        Ok(())
    }
}

/// `R = r_f r_a / (2 (r_c r_a + d_f d_a))`, the midpoint of the interior roots.
pub fn root_midpoint(params: &ModelParams) -> f64 {
    params.r_f() * params.r_a()
        / (2.0 * (params.r_c() * params.r_a() + params.d_f() * params.d_a()))
}

/// Regime of `params` relative to the coexistence threshold.
pub fn regime(params: &ModelParams) -> Regime {
    let threshold = params.coexistence_threshold();
    let rel = (params.a() - threshold) / threshold;
    if rel.abs() < TANGENT_TOL {
        Regime::Tangent
    } else if rel < 0.0 {
        Regime::ExtinctionOnly
    } else {
        Regime::Bistable
    }
}

/// Eigenvalues of a real 2x2 matrix from its trace and determinant.
pub fn eigenvalues_2x2(trace: f64, det: f64) -> [Complex<f64>; 2] {
    let half = 0.5 * trace;
    let disc = half * half - det;
    if disc >= 0.0 {
        let root = disc.sqrt();
        // larger-magnitude root first, the other from the product
        let big = if half >= 0.0 { half + root } else { half - root };
        let small = if big != 0.0 { det / big } else { 0.0 };
        let (lo, hi) = if big < small { (big, small) } else { (small, big) };
        [Complex::new(lo, 0.0), Complex::new(hi, 0.0)]
    } else {
        let im = (-disc).sqrt();
        [Complex::new(half, -im), Complex::new(half, im)]
    }
}

fn classify_matrix(j: &Matrix2<f64>) -> StabilityClass {
    let trace = j.trace();
    let det = j.determinant();
    let scale = j.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let det_zero = det.abs() <= 1e-12 * scale * scale;
    let label = if scale == 0.0 || det_zero {
        StabilityLabel::Degenerate
    } else if det < 0.0 {
        StabilityLabel::Saddle
    } else if trace < 0.0 {
        StabilityLabel::StableNodeOrFocus
    } else {
        StabilityLabel::Degenerate
    };
    StabilityClass {
        label,
        trace,
        det,
        eigenvalues: eigenvalues_2x2(trace, det),
        note: None,
    }
}

fn origin_point(params: &ModelParams) -> EquilibriumPoint {
    let mut stability = classify_matrix(&params.jacobian_matrix(0.0, 0.0));
    stability.note = Some(
        "zero Jacobian: linearization is inconclusive; the origin is locally \
         asymptotically stable by a nonlinear (Lyapunov) argument whenever a != a*"
            .into(),
    );
    EquilibriumPoint {
        state: BiomassState::ORIGIN,
        stability,
    }
}

/// All equilibria of `params` with their local stability.
pub fn equilibria(params: &ModelParams) -> Result<EquilibriumReport> {
    crate::dynamics::check_params_finite(params)?;
    let threshold = params.coexistence_threshold();
    let regime = regime(params);
    let slope = params.ant_nullcline_slope();
    let mid = root_midpoint(params);
    let roots: Vec<f64> = match regime {
        Regime::ExtinctionOnly => Vec::new(),
        Regime::Tangent => vec![mid],
        Regime::Bistable => {
            let product = params.b() / params.a();
            let upper = mid + (mid * mid - product).max(0.0).sqrt();
            vec![product / upper, upper]
        }
    };
    let interior = roots
        .into_iter()
        .map(|a| {
            let state = BiomassState::new(a, slope * a);
            let stability = classify_matrix(&params.jacobian_matrix(a, state.fungus));
            let stability = if regime == Regime::Tangent {
                StabilityClass {
                    label: StabilityLabel::Degenerate,
                    note: Some("saddle-node: the two interior equilibria coincide".into()),
                    ..stability
                }
            } else {
                stability
            };
            EquilibriumPoint { state, stability }
        })
        .collect();
    Ok(EquilibriumReport {
        regime,
        threshold,
        origin: origin_point(params),
        interior,
    })
}

/// Local stability of the equilibrium `eq`.
///
/// Errors if the vector field at `eq` is not small (see [`EQUILIBRIUM_TOL`]).
pub fn classify(params: &ModelParams, eq: BiomassState) -> Result<StabilityClass> {
    crate::dynamics::check_params_finite(params)?;
    eq.check_nonnegative()?;
    let [fa, ff] = params.rate(eq.ants, eq.fungus);
    let residual = fa.hypot(ff) / eq.norm().max(1.0);
    if residual >= EQUILIBRIUM_TOL {
        return Err(Error::Precondition(format!(
            "({}, {}) is not an equilibrium: field norm {residual:e}",
            eq.ants, eq.fungus
        )));
    }
    if eq == BiomassState::ORIGIN {
        return Ok(origin_point(params).stability);
    }
    Ok(classify_matrix(&params.jacobian_matrix(eq.ants, eq.fungus)))
}

/// Both nontrivial nullclines on a grid of ant biomass values:
/// `(ant nullcline F = (d_a/r_a) A, fungus nullcline F = ...)`.
/// Fungus nullcline values may be negative and are returned as is.
pub fn nullclines(params: &ModelParams, ants_grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if ants_grid.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Precondition("ant grid must be nonnegative".into()));
    }
    let slope = params.ant_nullcline_slope();
    Ok((
        ants_grid.iter().map(|a| slope * a).collect(),
        ants_grid.iter().map(|a| params.fungus_nullcline(*a)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nominal;
    use approx::assert_relative_eq;

    // 40-digit evaluation of the closed form for the reference parameters
    const A1: f64 = 0.002_923_926_201_337_303_227;
    const A2: f64 = 3.420_058_958_884_237_269;
    const MID: f64 = 1.711_491_442_542_787_286;
    const TRACE2: f64 = -1.026_017_687_665_271_181;

    #[test]
    fn reference_equilibria() {
        let r = equilibria(&nominal::PARAMS).unwrap();
        assert_eq!(r.regime, Regime::Bistable);
        assert_eq!(r.interior.len(), 2);
        assert_relative_eq!(r.interior[0].state.ants, A1, max_relative = 1e-13);
        assert_relative_eq!(r.interior[1].state.ants, A2, max_relative = 1e-14);
        for p in &r.interior {
            assert_eq!(p.state.ants, p.state.fungus);
            let [fa, ff] = nominal::PARAMS.rate(p.state.ants, p.state.fungus);
            assert!(fa.hypot(ff) / p.state.norm().max(1.0) < 1e-10);
        }
        assert_eq!(r.interior[0].stability.label, StabilityLabel::Saddle);
        assert_eq!(r.interior[1].stability.label, StabilityLabel::StableNodeOrFocus);
        assert_relative_eq!(r.interior[1].stability.trace, TRACE2, max_relative = 1e-12);
        assert!(r.interior[1].stability.det > 0.0);
        assert!(r.interior[0].stability.det < 0.0);
    }

    #[test]
    fn below_threshold_has_no_interior_points() {
        let p = nominal::PARAMS.with_a(6e-4).unwrap();
        let r = equilibria(&p).unwrap();
        assert_eq!(r.regime, Regime::ExtinctionOnly);
        assert!(r.interior.is_empty());
        assert!(r.saddle().is_none());
    }

    #[test]
    fn tangent_case_has_double_root() {
        let threshold = nominal::PARAMS.coexistence_threshold();
        let p = nominal::PARAMS.with_a(threshold).unwrap();
        let r = equilibria(&p).unwrap();
        assert_eq!(r.regime, Regime::Tangent);
        assert_eq!(r.interior.len(), 1);
        assert_relative_eq!(r.interior[0].state.ants, MID, max_relative = 1e-14);
        assert_eq!(r.interior[0].stability.label, StabilityLabel::Degenerate);
    }

    #[test]
    fn origin_is_degenerate_with_note() {
        let c = classify(&nominal::PARAMS, BiomassState::ORIGIN).unwrap();
        assert_eq!(c.label, StabilityLabel::Degenerate);
        assert_eq!((c.trace, c.det), (0.0, 0.0));
        assert!(c.note.is_some());
    }

    #[test]
    fn classify_rejects_non_equilibria() {
        assert!(matches!(
            classify(&nominal::PARAMS, nominal::INITIAL),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn trace_on_ant_nullcline_matches_closed_form() {
        let p = nominal::PARAMS;
        for a in [0.01, 0.5, 1.0, 2.0, 3.4, 7.0] {
            let j = crate::model::jacobian(&p, BiomassState::new(a, p.ant_nullcline_slope() * a))
                .unwrap();
            let closed = -p.d_a() * a * (p.r_a() + p.d_f()) / p.r_a();
            // the closed form only holds where dF/dt = 0 as well
            let fungus_quiet = (p.fungus_nullcline(a) - p.ant_nullcline_slope() * a).abs() < 1e-12;
            if fungus_quiet {
                assert_relative_eq!(j.trace(), closed, max_relative = 1e-12);
            }
            // the ant row is nullcline-exact everywhere
            assert_relative_eq!(j[(0, 0)], -p.d_a() * a, max_relative = 1e-12);
        }
    }

    #[test]
    fn nullclines_at_zero_and_tangency() {
        let (ant, fungus) = nullclines(&nominal::PARAMS, &[0.0]).unwrap();
        assert_eq!((ant[0], fungus[0]), (0.0, 0.0));
        let tangent = nominal::PARAMS
            .with_a(nominal::PARAMS.coexistence_threshold())
            .unwrap();
        let (ant, fungus) = nullclines(&tangent, &[MID]).unwrap();
        assert!((ant[0] - fungus[0]).abs() < 1e-6);
        assert!(nullclines(&nominal::PARAMS, &[-1.0]).is_err());
    }

    #[test]
    fn eigenvalues_of_simple_matrices() {
        let e = eigenvalues_2x2(-3.0, 2.0);
        assert_eq!((e[0].re, e[1].re), (-2.0, -1.0));
        let e = eigenvalues_2x2(0.0, 1.0);
        assert_eq!((e[0].im, e[1].im), (-1.0, 1.0));
        let e = eigenvalues_2x2(0.0, -4.0);
        assert_eq!((e[0].re, e[1].re), (-2.0, 2.0));
    }
}
