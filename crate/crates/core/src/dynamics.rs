//! Time integration of the model and limit classification.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::equilibria::{equilibria, Regime};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{BiomassState, ModelParams, Param};
use crate::ode::{self, Flow, Method, OdeSystem, SolveError, SolverOptions};

/// Distance at which a trajectory counts as having reached an attractor.
pub const ATTRACTOR_RADIUS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Cap on the step size in weeks.
    pub max_step: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Output times; when absent every accepted step is recorded.
    pub output_grid: Option<Vec<f64>>,
    pub method: Method,
    /// Vector-field norm below which a step counts toward convergence.
    pub convergence_tol: f64,
    /// Consecutive accepted steps below `convergence_tol` that end the run.
    pub convergence_steps: usize,
    /// Both components below this value means extinction.
    pub extinction_tol: f64,
    /// End the run as soon as convergence or extinction is detected.
    pub stop_at_terminal: bool,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: f64::INFINITY,
            t_start: 0.0,
            t_end: 1e4,
            output_grid: None,
            method: Method::DormandPrince,
            convergence_tol: 1e-10,
            convergence_steps: 10,
            extinction_tol: 1e-12,
            stop_at_terminal: true,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn new(t_start: f64, t_end: f64) -> Self {
        Self {
            t_start,
            t_end,
            ..Self::default()
        }
    }

    /// Long horizon used to decide which attractor an orbit approaches.
    /// Orbits near the origin decay only like `1/t`, so reaching
    /// [`ATTRACTOR_RADIUS`] can take millions of weeks.
    pub fn for_classification() -> Self {
        Self::new(0.0, 1e10)
    }

    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.output_grid = Some(grid);
        self
    }

    /// Output grid of `n + 1` evenly spaced points over `[t_start, t_end]`.
    pub fn with_uniform_grid(self, n: usize) -> Self {
        let grid = uniform_grid(self.t_start, self.t_end, n);
        self.with_grid(grid)
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::Precondition("tolerances must be strictly positive".into()));
        }
        if !(self.t_start.is_finite() && self.t_end > self.t_start) {
            return Err(Error::Precondition(format!(
                "time window [{}, {}] is empty",
                self.t_start, self.t_end
            )));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::Precondition("max_step must be positive".into()));
        }
        if let Method::Trapezoidal { step } = self.method {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::Precondition("trapezoidal step must be positive".into()));
            }
        }
        if let Some(grid) = &self.output_grid {
            if grid.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Precondition("output grid must be strictly increasing".into()));
            }
            if grid
                .iter()
                .any(|&t| t < self.t_start || t > self.t_end || !t.is_finite())
            {
                return Err(Error::Precondition("output grid leaves the time window".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            max_step: self.max_step,
            initial_step: None,
            max_steps: self.max_steps,
            method: self.method,
        }
    }
}

/// `n + 1` evenly spaced times from `t0` to `t1` inclusive.
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n)
        .map(|k| {
            if k == n {
                t1
            } else {
                t0 + (t1 - t0) * k as f64 / n as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalFlag {
    ReachedHorizon,
    ConvergedToEquilibrium,
    Extinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<BiomassState>,
    pub terminal: TerminalFlag,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(f64, BiomassState)> {
        Some((*self.times.last()?, *self.states.last()?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, BiomassState)> + '_ {
        self.times.iter().copied().zip(self.states.iter().copied())
    }

    /// CSV with header `t,A,F` and 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,A,F")?;
        for (t, s) in self.iter() {
            writeln!(w, "{},{},{}", fmt_f64(t), fmt_f64(s.ants), fmt_f64(s.fungus))?;
        }
        Ok(())
    }
}

/// The model as an [`OdeSystem`]; clamps sub-tolerance negative excursions.
pub(crate) struct ModelSystem<'a> {
    pub params: &'a ModelParams,
    pub abs_tol: f64,
}

/// Clamps `y[i]` in `[-abs_tol, 0)` to zero; errors below that.
pub(crate) fn clamp_biomass(y: &mut [f64], abs_tol: f64) -> Result<bool, usize> {
    let mut changed = false;
    for (i, v) in y.iter_mut().enumerate().take(2) {
        if *v < 0.0 {
            if *v < -abs_tol {
                return Err(i);
            }
            *v = 0.0;
            changed = true;
        }
    }
    Ok(changed)
}

impl OdeSystem for ModelSystem<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
        let r = self.params.rate(y[0], y[1]);
        dydt[0] = r[0];
        dydt[1] = r[1];
    }

    fn project(&self, y: &mut [f64]) -> Result<bool, usize> {
        clamp_biomass(y, self.abs_tol)
    }
}

pub(crate) fn check_params_finite(params: &ModelParams) -> Result<()> {
    if Param::ALL.iter().all(|p| params.get(*p).is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("model parameters"))
    }
}

pub(crate) fn integration_error(err: SolveError, partial: Trajectory) -> Error {
    Error::Integration {
        t: err.time(),
        reason: err.to_string(),
        partial: Box::new(partial),
    }
}

/// Records solution samples either at every step or on a fixed grid.
pub(crate) struct Recorder<'g> {
    grid: Option<&'g [f64]>,
    next: usize,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl<'g> Recorder<'g> {
    pub fn new(grid: Option<&'g [f64]>, t0: f64, y0: &[f64]) -> Self {
        let mut rec = Self {
            grid,
            next: 0,
            times: Vec::new(),
            values: Vec::new(),
        };
        match grid {
            None => {
                rec.times.push(t0);
                rec.values.push(y0.to_vec());
            }
            Some(g) => {
                while rec.next < g.len() && g[rec.next] <= t0 {
                    rec.times.push(g[rec.next]);
                    rec.values.push(y0.to_vec());
                    rec.next += 1;
                }
            }
        }
        rec
    }

    pub fn record(&mut self, step: &ode::StepView<'_>, abs_tol: f64) {
        match self.grid {
            None => {
                self.times.push(step.t);
                self.values.push(step.y.to_vec());
            }
            Some(g) => {
                while self.next < g.len() && g[self.next] <= step.t {
                    let t = g[self.next];
                    let mut buf = vec![0.0; step.y.len()];
                    if t == step.t {
                        buf.copy_from_slice(step.y);
                    } else {
                        step.interpolate(t, &mut buf);
                        // interpolant may dip a hair below zero near the axes
                        for v in buf.iter_mut().take(2) {
                            if *v < 0.0 && *v >= -abs_tol {
                                *v = 0.0;
                            }
                        }
                    }
                    self.times.push(t);
                    self.values.push(buf);
                    self.next += 1;
                }
            }
        }
    }

    pub fn states(&self) -> Vec<BiomassState> {
        self.values
            .iter()
            .map(|v| BiomassState::new(v[0], v[1]))
            .collect()
    }
}

/// Integrates the model from `init` at `cfg.t_start` toward `cfg.t_end`.
///
/// The run ends early (when `cfg.stop_at_terminal`) once both components fall
/// below `cfg.extinction_tol`, or once the vector-field norm has stayed below
/// `cfg.convergence_tol` for `cfg.convergence_steps` consecutive steps.
pub fn integrate(
    params: &ModelParams,
    init: BiomassState,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    check_params_finite(params)?;
    init.check_nonnegative()?;
    cfg.validate()?;

    let sys = ModelSystem {
        params,
        abs_tol: cfg.abs_tol,
    };
    let y0 = init.as_array();
    let mut rec = Recorder::new(cfg.output_grid.as_deref(), cfg.t_start, &y0);
    let is_extinct = |a: f64, f: f64| a < cfg.extinction_tol && f < cfg.extinction_tol;

    if cfg.stop_at_terminal && is_extinct(init.ants, init.fungus) {
        if rec.times.is_empty() {
            rec.times.push(cfg.t_start);
            rec.values.push(y0.to_vec());
        }
        return Ok(Trajectory {
            times: rec.times.clone(),
            states: rec.states(),
            terminal: TerminalFlag::Extinct,
        });
    }

    let mut quiet_steps = 0usize;
    let mut flag = TerminalFlag::ReachedHorizon;
    let result = ode::solve(
        &sys,
        cfg.t_start,
        &y0,
        cfg.t_end,
        &cfg.solver_options(),
        |step| {
            rec.record(step, cfg.abs_tol);
            let (a, f) = (step.y[0], step.y[1]);
            let field = step.dydt[0].hypot(step.dydt[1]);
            quiet_steps = if field < cfg.convergence_tol {
                quiet_steps + 1
            } else {
                0
            };
            let detected = if is_extinct(a, f) {
                Some(TerminalFlag::Extinct)
            } else if quiet_steps >= cfg.convergence_steps {
                Some(TerminalFlag::ConvergedToEquilibrium)
            } else {
                None
            };
            match detected {
                Some(d) if cfg.stop_at_terminal => {
                    flag = d;
                    Flow::Stop
                }
                _ => Flow::Continue,
            }
        },
    );
    let trajectory = Trajectory {
        times: rec.times.clone(),
        states: rec.states(),
        terminal: flag,
    };
    match result {
        Ok(_) => Ok(trajectory),
        Err(e) => Err(integration_error(e, trajectory)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttractorLabel {
    Origin,
    Interior,
    Undecided,
}

impl AttractorLabel {
    /// Integer code used in basin label matrices.
    pub fn code(self) -> u8 {
        match self {
            AttractorLabel::Origin => 0,
            AttractorLabel::Interior => 1,
            AttractorLabel::Undecided => 2,
        }
    }
}

/// Which attractor the orbit through `init` approaches.
///
/// Integration stops once the state is within [`ATTRACTOR_RADIUS`] of the
/// origin or of a non-saddle interior equilibrium; reaching `cfg.t_end`
/// first gives [`AttractorLabel::Undecided`].
pub fn classify_limit(
    params: &ModelParams,
    init: BiomassState,
    cfg: &IntegratorConfig,
) -> Result<AttractorLabel> {
    check_params_finite(params)?;
    init.check_nonnegative()?;
    cfg.validate()?;

    let report = equilibria(params)?;
    let sinks: Vec<BiomassState> = match report.regime {
        Regime::ExtinctionOnly => Vec::new(),
        // the tangent point attracts from one side
        Regime::Tangent => report.interior.iter().map(|p| p.state).collect(),
        Regime::Bistable => report.interior.iter().skip(1).map(|p| p.state).collect(),
    };
    let label_of = |s: &BiomassState| {
        if s.norm() < ATTRACTOR_RADIUS {
            Some(AttractorLabel::Origin)
        } else if sinks.iter().any(|e| e.distance(s) < ATTRACTOR_RADIUS) {
            Some(AttractorLabel::Interior)
        } else {
            None
        }
    };
    if let Some(l) = label_of(&init) {
        return Ok(l);
    }

    let sys = ModelSystem {
        params,
        abs_tol: cfg.abs_tol,
    };
    let mut label = AttractorLabel::Undecided;
    let mut last = (cfg.t_start, init);
    let result = ode::solve(
        &sys,
        cfg.t_start,
        &init.as_array(),
        cfg.t_end,
        &cfg.solver_options(),
        |step| {
            let s = BiomassState::new(step.y[0], step.y[1]);
            last = (step.t, s);
            match label_of(&s) {
                Some(l) => {
                    label = l;
                    Flow::Stop
                }
                None => Flow::Continue,
            }
        },
    );
    match result {
        Ok(_) => Ok(label),
        Err(e) => Err(integration_error(
            e,
            Trajectory {
                times: vec![cfg.t_start, last.0],
                states: vec![init, last.1],
                terminal: TerminalFlag::ReachedHorizon,
            },
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nominal;

    fn window() -> IntegratorConfig {
        IntegratorConfig::new(nominal::T_START, nominal::T_END).with_uniform_grid(230)
    }

    #[test]
    fn zero_start_stays_zero() {
        let traj = integrate(&nominal::PARAMS, BiomassState::ORIGIN, &window()).unwrap();
        assert_eq!(traj.terminal, TerminalFlag::Extinct);
        assert!(traj.states.iter().all(|s| s.ants == 0.0 && s.fungus == 0.0));

        let mut cfg = window();
        cfg.stop_at_terminal = false;
        let traj = integrate(&nominal::PARAMS, BiomassState::ORIGIN, &cfg).unwrap();
        assert_eq!(traj.len(), 231);
        assert!(traj.states.iter().all(|s| s.ants == 0.0 && s.fungus == 0.0));
    }

    #[test]
    fn grid_is_respected() {
        let traj = integrate(&nominal::PARAMS, nominal::INITIAL, &window()).unwrap();
        assert_eq!(traj.times, uniform_grid(6.0, 29.0, 230));
        assert_eq!(traj.states[0], nominal::INITIAL);
        assert_eq!(traj.terminal, TerminalFlag::ReachedHorizon);
    }

    #[test]
    fn fungus_alone_decays_monotonically() {
        let cfg = IntegratorConfig::new(0.0, 500.0).with_uniform_grid(500);
        let traj = integrate(&nominal::PARAMS, BiomassState::new(0.0, 2.0), &cfg).unwrap();
        for w in traj.states.windows(2) {
            assert_eq!(w[1].ants, 0.0);
            assert!(w[1].fungus < w[0].fungus);
        }
        // on the axis dF/dt = -d_f F^2, so F(t) = F0 / (1 + d_f F0 t)
        let (t, s) = traj.last().unwrap();
        let exact = 2.0 / (1.0 + 0.2 * 2.0 * t);
        assert!((s.fungus - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = window();
        cfg.rel_tol = 0.0;
        assert!(integrate(&nominal::PARAMS, nominal::INITIAL, &cfg).is_err());
        let cfg = IntegratorConfig::new(5.0, 5.0);
        assert!(integrate(&nominal::PARAMS, nominal::INITIAL, &cfg).is_err());
        let cfg = IntegratorConfig::new(0.0, 1.0).with_grid(vec![0.5, 0.2]);
        assert!(integrate(&nominal::PARAMS, nominal::INITIAL, &cfg).is_err());
        assert!(integrate(&nominal::PARAMS, BiomassState::new(-1.0, 0.0), &window()).is_err());
    }

    #[test]
    fn step_budget_failure_carries_partial_trajectory() {
        let mut cfg = IntegratorConfig::new(0.0, 1e4);
        cfg.max_steps = 5;
        match integrate(&nominal::PARAMS, nominal::INITIAL, &cfg) {
            Err(Error::Integration { partial, .. }) => assert!(!partial.is_empty()),
            other => panic!("expected integration failure, got {other:?}"),
        }
    }

    #[test]
    fn trapezoidal_fallback_agrees_with_dopri() {
        let reference = integrate(&nominal::PARAMS, nominal::INITIAL, &window()).unwrap();
        let cfg = window().with_method(Method::Trapezoidal { step: 0.01 });
        let trap = integrate(&nominal::PARAMS, nominal::INITIAL, &cfg).unwrap();
        let (_, a) = reference.last().unwrap();
        let (_, b) = trap.last().unwrap();
        assert!(a.distance(&b) < 1e-4 * a.norm(), "{a:?} vs {b:?}");
    }

    #[test]
    fn classify_reference_and_tiny_starts() {
        let cfg = IntegratorConfig::for_classification();
        let p = nominal::PARAMS;
        assert_eq!(
            classify_limit(&p, nominal::INITIAL, &cfg).unwrap(),
            AttractorLabel::Interior
        );
        assert_eq!(
            classify_limit(&p, BiomassState::new(1e-4, 1e-4), &cfg).unwrap(),
            AttractorLabel::Origin
        );
    }

    #[test]
    fn short_horizon_is_undecided() {
        let cfg = IntegratorConfig::new(0.0, 1.0);
        assert_eq!(
            classify_limit(&nominal::PARAMS, nominal::INITIAL, &cfg).unwrap(),
            AttractorLabel::Undecided
        );
    }

    #[test]
    fn csv_has_header_and_full_precision() {
        let traj = integrate(&nominal::PARAMS, nominal::INITIAL, &window()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,A,F"));
        for (line, (t, s)) in lines.zip(traj.iter()) {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            assert_eq!(v, vec![t, s.ants, s.fungus]);
        }
    }
}
