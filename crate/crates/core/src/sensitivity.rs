//! Forward (variational) sensitivities of the biomass trajectory with respect
//! to the seven parameters and the two initial conditions.
//!
//! For a target `θ` the sensitivity `S = ∂(A, F)/∂θ` obeys
//!
//! ```text
//! dS/dt = J(A, F) S + ∂f/∂θ,    S(t0) = 0 for parameters, e_A or e_F for A0, F0
//! ```
//!
//! and is integrated jointly with the state.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    check_params_finite, clamp_biomass, integration_error, IntegratorConfig, Recorder,
    TerminalFlag, Trajectory,
};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{BiomassState, ModelParams, Param, Target};
use crate::ode::{self, Flow, OdeSystem};
use crate::parallel::{map_ordered, Execution};

/// Partial derivative of the vector field with respect to one parameter,
/// evaluated at `(ants, fungus)`. With `h(A) = a A^2 / (b + a A^2)`:
///
/// ```text
/// r_a : ( A F,                               0 )
/// r_f : ( 0,                                 h(A) F )
/// r_c : ( 0,                                 -A F )
/// d_a : ( -A^2,                              0 )
/// d_f : ( 0,                                 -F^2 )
/// b   : ( 0,                                 -r_f a A^2 / (b + a A^2)^2 F )
/// a   : ( 0,                                  r_f b A^2 / (b + a A^2)^2 F )
/// ```
pub fn param_rate(params: &ModelParams, p: Param, ants: f64, fungus: f64) -> [f64; 2] {
    let (a_, f_) = (ants, fungus);
    let sq = a_ * a_;
    let den = params.b() + params.a() * sq;
    match p {
        Param::AntGrowth => [a_ * f_, 0.0],
        Param::FungusGrowth => [0.0, params.a() * sq / den * f_],
        Param::Consumption => [0.0, -a_ * f_],
        Param::AntDeath => [-sq, 0.0],
        Param::FungusDeath => [0.0, -f_ * f_],
        Param::HalfSaturation => [0.0, -params.r_f() * params.a() * sq / (den * den) * f_],
        Param::Labor => [0.0, params.r_f() * params.b() * sq / (den * den) * f_],
    }
}

fn initial_sensitivity(target: Target) -> [f64; 2] {
    match target {
        Target::InitialAnts => [1.0, 0.0],
        Target::InitialFungus => [0.0, 1.0],
        _ => [0.0, 0.0],
    }
}

/// State plus one `(dA, dF)` pair per target.
struct AugmentedSystem<'a> {
    params: &'a ModelParams,
    targets: &'a [Target],
    abs_tol: f64,
}

impl OdeSystem for AugmentedSystem<'_> {
    fn dim(&self) -> usize {
        2 + 2 * self.targets.len()
    }

    fn rhs(&self, _t: f64, y: &[f64], dydt: &mut [f64]) {
        let (a_, f_) = (y[0], y[1]);
        let r = self.params.rate(a_, f_);
        dydt[0] = r[0];
        dydt[1] = r[1];
        let j = self.params.jacobian_raw(a_, f_);
        for (k, target) in self.targets.iter().enumerate() {
            let (sa, sf) = (y[2 + 2 * k], y[3 + 2 * k]);
            let forcing = match target.param() {
                Some(p) => param_rate(self.params, p, a_, f_),
                None => [0.0, 0.0],
            };
            dydt[2 + 2 * k] = j[0][0] * sa + j[0][1] * sf + forcing[0];
            dydt[3 + 2 * k] = j[1][0] * sa + j[1][1] * sf + forcing[1];
        }
    }

    fn project(&self, y: &mut [f64]) -> Result<bool, usize> {
        clamp_biomass(y, self.abs_tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTrajectory {
    pub target: Target,
    /// Value of the target at which the derivatives are taken.
    pub nominal: f64,
    pub times: Vec<f64>,
    pub d_ants: Vec<f64>,
    pub d_fungus: Vec<f64>,
}

impl SensitivityTrajectory {
    /// Largest `|dF/dθ|` and the time at which it occurs (earliest on ties).
    pub fn peak_fungus(&self) -> (f64, f64) {
        peak(&self.times, &self.d_fungus)
    }

    pub fn peak_ants(&self) -> (f64, f64) {
        peak(&self.times, &self.d_ants)
    }

    /// CSV with header `t,dA,dF`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,dA,dF")?;
        for ((t, da), df) in self.times.iter().zip(&self.d_ants).zip(&self.d_fungus) {
            writeln!(w, "{},{},{}", fmt_f64(*t), fmt_f64(*da), fmt_f64(*df))?;
        }
        Ok(())
    }
}

fn peak(times: &[f64], values: &[f64]) -> (f64, f64) {
    let mut best = (0.0, times.first().copied().unwrap_or(f64::NAN));
    for (t, v) in times.iter().zip(values) {
        if v.abs() > best.0 {
            best = (v.abs(), *t);
        }
    }
    best
}

fn target_value(params: &ModelParams, init: BiomassState, target: Target) -> f64 {
    match target {
        Target::InitialAnts => init.ants,
        Target::InitialFungus => init.fungus,
        _ => params.get(target.param().expect("parameter target")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRun {
    pub trajectory: Trajectory,
    pub sensitivities: Vec<SensitivityTrajectory>,
}

/// Integrates the state and the sensitivities to all `targets` as one
/// augmented system over `[cfg.t_start, cfg.t_end]`. Terminal detection in
/// `cfg` is ignored; the run always reaches the horizon.
pub fn forward_sensitivities(
    params: &ModelParams,
    init: BiomassState,
    targets: &[Target],
    cfg: &IntegratorConfig,
) -> Result<SensitivityRun> {
    check_params_finite(params)?;
    init.check_nonnegative()?;
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::Precondition("no sensitivity targets given".into()));
    }
    for (k, t) in targets.iter().enumerate() {
        if targets[..k].contains(t) {
            return Err(Error::Precondition(format!("target {} listed twice", t.name())));
        }
    }

    let sys = AugmentedSystem {
        params,
        targets,
        abs_tol: cfg.abs_tol,
    };
    let mut y0 = init.as_array().to_vec();
    for t in targets {
        y0.extend(initial_sensitivity(*t));
    }
    let mut rec = Recorder::new(cfg.output_grid.as_deref(), cfg.t_start, &y0);
    let result = ode::solve(
        &sys,
        cfg.t_start,
        &y0,
        cfg.t_end,
        &cfg.solver_options(),
        |step| {
            rec.record(step, cfg.abs_tol);
            Flow::Continue
        },
    );
    let trajectory = Trajectory {
        times: rec.times.clone(),
        states: rec.states(),
        terminal: TerminalFlag::ReachedHorizon,
    };
    if let Err(e) = result {
        return Err(integration_error(e, trajectory));
    }
    let sensitivities = targets
        .iter()
        .enumerate()
        .map(|(k, t)| SensitivityTrajectory {
            target: *t,
            nominal: target_value(params, init, *t),
            times: rec.times.clone(),
            d_ants: rec.values.iter().map(|v| v[2 + 2 * k]).collect(),
            d_fungus: rec.values.iter().map(|v| v[3 + 2 * k]).collect(),
        })
        .collect();
    Ok(SensitivityRun {
        trajectory,
        sensitivities,
    })
}

/// One augmented system per target, scheduled by `exec`. Agrees with
/// [`forward_sensitivities`] to within the integration tolerance; without an
/// output grid each target carries its own step times.
pub fn forward_sensitivities_per_target(
    params: &ModelParams,
    init: BiomassState,
    targets: &[Target],
    cfg: &IntegratorConfig,
    exec: Execution,
) -> Result<Vec<SensitivityTrajectory>> {
    if targets.is_empty() {
        return Err(Error::Precondition("no sensitivity targets given".into()));
    }
    map_ordered(exec, targets, |t| {
        forward_sensitivities(params, init, std::slice::from_ref(t), cfg)
            .map(|mut run| run.sensitivities.remove(0))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingScale {
    /// Peak `|dF/dθ|`.
    #[default]
    Raw,
    /// Peak `|dF/dθ| |θ|`.
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub target: Target,
    pub peak: f64,
    pub peak_time: f64,
}

/// Targets ordered by decreasing peak fungus sensitivity; ties go to the
/// alphabetically smaller target name.
pub fn sensitivity_ranking(
    results: &[SensitivityTrajectory],
    scale: RankingScale,
) -> Vec<RankEntry> {
    let mut entries: Vec<RankEntry> = results
        .iter()
        .map(|s| {
            let (value, time) = s.peak_fungus();
            let peak = match scale {
                RankingScale::Raw => value,
                RankingScale::Scaled => value * s.nominal.abs(),
            };
            RankEntry {
                target: s.target,
                peak,
                peak_time: time,
            }
        })
        .collect();
    entries.sort_by(|x, y| {
        y.peak
            .total_cmp(&x.peak)
            .then_with(|| x.target.name().cmp(y.target.name()))
    });
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: Target,
    pub nominal: f64,
    pub peak_abs_d_ants: f64,
    pub peak_time_d_ants: f64,
    pub peak_abs_d_fungus: f64,
    pub peak_time_d_fungus: f64,
    pub final_d_ants: f64,
    pub final_d_fungus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub targets: Vec<TargetSummary>,
    /// Scale used for [`SensitivitySummary::ranking`].
    pub ranking_scale: RankingScale,
    pub ranking: Vec<RankEntry>,
    /// Ranking under the other scale, for reference.
    pub alternate_ranking: Vec<RankEntry>,
}

pub fn summarize(results: &[SensitivityTrajectory], scale: RankingScale) -> SensitivitySummary {
    let other = match scale {
        RankingScale::Raw => RankingScale::Scaled,
        RankingScale::Scaled => RankingScale::Raw,
    };
    let targets = results
        .iter()
        .map(|s| {
            let (pa, ta) = s.peak_ants();
            let (pf, tf) = s.peak_fungus();
            TargetSummary {
                target: s.target,
                nominal: s.nominal,
                peak_abs_d_ants: pa,
                peak_time_d_ants: ta,
                peak_abs_d_fungus: pf,
                peak_time_d_fungus: tf,
                final_d_ants: s.d_ants.last().copied().unwrap_or(f64::NAN),
                final_d_fungus: s.d_fungus.last().copied().unwrap_or(f64::NAN),
            }
        })
        .collect();
    SensitivitySummary {
        targets,
        ranking_scale: scale,
        ranking: sensitivity_ranking(results, scale),
        alternate_ranking: sensitivity_ranking(results, other),
    }
}
