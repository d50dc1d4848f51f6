//! Analytic extinction region and numerical basin maps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{check_params_finite, classify_limit, AttractorLabel, IntegratorConfig};
use crate::equilibria::{equilibria, EquilibriumReport, Regime};
use crate::error::{Error, Result};
use crate::model::{BiomassState, ModelParams};
use crate::parallel::{map_ordered, Execution};

fn bistable_report(params: &ModelParams) -> Result<EquilibriumReport> {
    let report = equilibria(params)?;
    if report.regime != Regime::Bistable {
        return Err(Error::Regime {
            a: params.a(),
            threshold: report.threshold,
        });
    }
    Ok(report)
}

/// Whether `state` lies in the region between the fungus nullcline and the
/// horizontal line through the saddle, `nullcline(A) <= F < F_saddle`.
///
/// Every orbit started there, except those on the saddle's stable manifold,
/// goes extinct.
pub fn in_extinction_region(params: &ModelParams, state: BiomassState) -> Result<bool> {
    let report = bistable_report(params)?;
    if !(state.ants > 0.0 && state.fungus > 0.0) {
        return Err(Error::Precondition(format!(
            "state ({}, {}) must be strictly positive",
            state.ants, state.fungus
        )));
    }
    let saddle = report.interior[0].state;
    Ok(params.fungus_nullcline(state.ants) <= state.fungus && state.fungus < saddle.fungus)
}

/// Whether `state` lies in the positively invariant wedge between the fungus
/// nullcline and the ant nullcline, `nullcline(A) <= F <= (d_a / r_a) A`.
pub fn in_invariant_wedge(params: &ModelParams, state: BiomassState) -> Result<bool> {
    bistable_report(params)?;
    state.check_nonnegative()?;
    Ok(params.fungus_nullcline(state.ants) <= state.fungus
        && state.fungus <= params.ant_nullcline_slope() * state.ants)
}

/// `V = A F^(r_a / d_f)`, which decreases along orbits in the extinction region.
pub fn lyapunov(params: &ModelParams, state: BiomassState) -> f64 {
    state.ants * state.fungus.powf(params.r_a() / params.d_f())
}

/// Rectangle `[ants.0, ants.1] x [fungus.0, fungus.1]` split into cells;
/// only cell centers are classified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ants_range: (f64, f64),
    pub fungus_range: (f64, f64),
    pub ants_cells: usize,
    pub fungus_cells: usize,
}

impl GridSpec {
    pub fn new(
        ants_range: (f64, f64),
        fungus_range: (f64, f64),
        ants_cells: usize,
        fungus_cells: usize,
    ) -> Result<Self> {
        let grid = Self {
            ants_range,
            fungus_range,
            ants_cells,
            fungus_cells,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("A", self.ants_range), ("F", self.fungus_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
                return Err(Error::Precondition(format!(
                    "{name} range [{lo}, {hi}] must be finite, nonnegative and nonempty"
                )));
            }
        }
        if self.ants_cells == 0 || self.fungus_cells == 0 {
            return Err(Error::Precondition("grid needs at least one cell per axis".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ants_cells * self.fungus_cells
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ants_center(&self, i: usize) -> f64 {
        let (lo, hi) = self.ants_range;
        lo + (hi - lo) * (i as f64 + 0.5) / self.ants_cells as f64
    }

    pub fn fungus_center(&self, j: usize) -> f64 {
        let (lo, hi) = self.fungus_range;
        lo + (hi - lo) * (j as f64 + 0.5) / self.fungus_cells as f64
    }

    /// Center of the cell in column `i` (ants) and row `j` (fungus).
    pub fn center(&self, i: usize, j: usize) -> BiomassState {
        BiomassState::new(self.ants_center(i), self.fungus_center(j))
    }

    /// Cell centers in row-major order (fungus row outer, ants column inner).
    pub fn centers(&self) -> Vec<BiomassState> {
        (0..self.fungus_cells)
            .flat_map(|j| (0..self.ants_cells).map(move |i| (i, j)))
            .map(|(i, j)| self.center(i, j))
            .collect()
    }

    /// Index of the cell whose center is nearest to `state`, if inside the grid.
    pub fn locate(&self, state: BiomassState) -> Option<(usize, usize)> {
        let pos = |x: f64, (lo, hi): (f64, f64), n: usize| {
            if x < lo || x > hi {
                return None;
            }
            Some((((x - lo) / (hi - lo) * n as f64) as usize).min(n - 1))
        };
        Some((
            pos(state.ants, self.ants_range, self.ants_cells)?,
            pos(state.fungus, self.fungus_range, self.fungus_cells)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinMap {
    pub grid: GridSpec,
    /// Row-major labels, see [`GridSpec::centers`].
    pub labels: Vec<AttractorLabel>,
    /// Membership of each cell center in the analytic extinction region.
    pub analytic_region_mask: Vec<bool>,
    pub threshold: f64,
    pub saddle: BiomassState,
    pub stable: BiomassState,
}

impl BasinMap {
    pub fn label(&self, i: usize, j: usize) -> AttractorLabel {
        self.labels[j * self.grid.ants_cells + i]
    }

    pub fn in_mask(&self, i: usize, j: usize) -> bool {
        self.analytic_region_mask[j * self.grid.ants_cells + i]
    }

    pub fn count(&self, label: AttractorLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Cells inside the analytic extinction region that were labeled interior.
    pub fn soundness_violations(&self) -> Vec<(usize, usize)> {
        let n = self.grid.ants_cells;
        self.labels
            .iter()
            .zip(&self.analytic_region_mask)
            .enumerate()
            .filter(|(_, (l, m))| **m && **l == AttractorLabel::Interior)
            .map(|(k, _)| (k % n, k / n))
            .collect()
    }

    /// Label matrix with one fungus row per line, lowest fungus first,
    /// using codes 0 = origin, 1 = interior, 2 = undecided.
    pub fn write_labels_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.labels.chunks(self.grid.ants_cells) {
            let line: Vec<String> = row.iter().map(|l| l.code().to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn write_mask_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.analytic_region_mask.chunks(self.grid.ants_cells) {
            let line: Vec<&str> = row.iter().map(|m| if *m { "1" } else { "0" }).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Sidecar describing the grid and the threshold.
    pub fn sidecar(&self, params: &ModelParams) -> serde_json::Value {
        serde_json::json!({
            "params": params,
            "threshold": self.threshold,
            "grid": {
                "A_range": [self.grid.ants_range.0, self.grid.ants_range.1],
                "F_range": [self.grid.fungus_range.0, self.grid.fungus_range.1],
                "A_cells": self.grid.ants_cells,
                "F_cells": self.grid.fungus_cells,
                "layout": "rows are F cells from low to high, columns are A cells from low to high; values are cell centers",
            },
            "codes": {"origin": 0, "interior": 1, "undecided": 2},
            "saddle": self.saddle,
            "stable": self.stable,
            "counts": {
                "origin": self.count(AttractorLabel::Origin),
                "interior": self.count(AttractorLabel::Interior),
                "undecided": self.count(AttractorLabel::Undecided),
            },
            "mask_cells": self.analytic_region_mask.iter().filter(|m| **m).count(),
            "soundness_violations": self.soundness_violations().len(),
        })
    }
}

/// Classifies every cell center of `grid` with [`classify_limit`].
pub fn map_basins(params: &ModelParams, grid: &GridSpec, cfg: &IntegratorConfig) -> Result<BasinMap> {
    map_basins_with(params, grid, cfg, Execution::default())
}

/// [`map_basins`] with explicit scheduling. Cells whose integration fails
/// are labeled undecided.
pub fn map_basins_with(
    params: &ModelParams,
    grid: &GridSpec,
    cfg: &IntegratorConfig,
    exec: Execution,
) -> Result<BasinMap> {
    check_params_finite(params)?;
    let report = bistable_report(params)?;
    grid.validate()?;
    cfg.validate()?;
    let saddle = report.interior[0].state;
    let stable = report.interior[1].state;
    let centers = grid.centers();
    let labels = map_ordered(exec, &centers, |s| {
        classify_limit(params, *s, cfg).unwrap_or(AttractorLabel::Undecided)
    });
    let analytic_region_mask = centers
        .iter()
        .map(|s| {
            s.ants > 0.0
                && s.fungus > 0.0
                && params.fungus_nullcline(s.ants) <= s.fungus
                && s.fungus < saddle.fungus
        })
        .collect();
    Ok(BasinMap {
        grid: *grid,
        labels,
        analytic_region_mask,
        threshold: report.threshold,
        saddle,
        stable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nominal;

    #[test]
    fn region_examples() {
        let p = nominal::PARAMS;
        assert!(in_extinction_region(&p, BiomassState::new(0.001, 0.002)).unwrap());
        assert!(!in_extinction_region(&p, BiomassState::new(0.05, 0.3)).unwrap());
        assert!(!in_extinction_region(&p, BiomassState::new(0.001, 0.003)).unwrap());
    }

    #[test]
    fn region_rejects_boundary_states() {
        let p = nominal::PARAMS;
        let err = in_extinction_region(&p, BiomassState::new(0.0, 0.001)).unwrap_err();
        assert!(err.is_precondition());
    }

    #[test]
    fn wedge_examples() {
        let p = nominal::PARAMS;
        for a in [1e-4, 1e-3, 2.5e-3] {
            assert!(in_invariant_wedge(&p, BiomassState::new(a, a)).unwrap());
            assert!(!in_invariant_wedge(&p, BiomassState::new(a, 1.01 * a)).unwrap());
        }
    }

    #[test]
    fn regime_guard() {
        let p = nominal::PARAMS.with_a(6e-4).unwrap();
        let s = BiomassState::new(0.001, 0.002);
        assert!(matches!(in_extinction_region(&p, s), Err(Error::Regime { .. })));
        assert!(matches!(in_invariant_wedge(&p, s), Err(Error::Regime { .. })));
        let grid = GridSpec::new((0.0, 1.0), (0.0, 1.0), 2, 2).unwrap();
        let cfg = IntegratorConfig::for_classification();
        assert!(matches!(map_basins(&p, &grid, &cfg), Err(Error::Regime { .. })));
    }

    #[test]
    fn grid_geometry() {
        let g = GridSpec::new((0.0, 1.0), (2.0, 4.0), 4, 2).unwrap();
        assert_eq!(g.center(0, 0), BiomassState::new(0.125, 2.5));
        assert_eq!(g.center(3, 1), BiomassState::new(0.875, 3.5));
        let c = g.centers();
        assert_eq!(c.len(), 8);
        assert_eq!(c[5], g.center(1, 1));
        assert_eq!(g.locate(BiomassState::new(0.3, 3.9)), Some((1, 1)));
        assert_eq!(g.locate(BiomassState::new(1.3, 3.9)), None);
        assert!(GridSpec::new((1.0, 1.0), (0.0, 1.0), 1, 1).is_err());
        assert!(GridSpec::new((0.0, 1.0), (0.0, 1.0), 0, 1).is_err());
    }

    #[test]
    fn coarse_map_has_both_attractors() {
        let p = nominal::PARAMS;
        let cfg = IntegratorConfig::for_classification();
        let small = GridSpec::new((0.0, 0.006), (0.0, 0.006), 3, 3).unwrap();
        let map = map_basins(&p, &small, &cfg).unwrap();
        assert!(map.in_mask(0, 0));
        assert_eq!(map.label(0, 0), AttractorLabel::Origin);
        assert!(map.soundness_violations().is_empty());

        let grid = GridSpec::new((1e-4, 4.0), (1e-4, 4.0), 6, 6).unwrap();
        let map = map_basins(&p, &grid, &cfg).unwrap();
        assert!(map.count(AttractorLabel::Interior) > 0);
        assert!(map.soundness_violations().is_empty());

        let mut csv = Vec::new();
        map.write_labels_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().all(|l| l.split(',').count() == 6));
    }
}
