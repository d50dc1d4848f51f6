//! Box-constrained least-squares fitting of parameters and initial biomasses
//! to observed biomass time series.
//!
//! The objective is `Σ_k w_A,k (A(t_k) - A_k)^2 + w_F,k (F(t_k) - F_k)^2`,
//! minimized by Levenberg–Marquardt with the residual Jacobian taken from
//! forward sensitivities. Bounds are enforced by fitting in an unconstrained
//! coordinate `z`: `x = lo + e^z` for half-open intervals and a scaled
//! logistic `x = lo + (hi - lo) / (1 + e^-z)` for closed ones.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::IntegratorConfig;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{BiomassState, ModelParams, Param, Target, LABOR_MAX};
use crate::parallel::{map_ordered, Execution};
use crate::sensitivity::forward_sensitivities;

/// Smallest number of observation rows accepted.
pub const MIN_ROWS: usize = 4;

/// Eigenvalues of the scaled information matrix below this fraction of the
/// largest one span its numerical null space.
const NULL_SPACE_TOL: f64 = 1e-13;

/// Squared weight of a target in the null space above which it is not estimable.
const NULL_PARTICIPATION_TOL: f64 = 1e-8;

/// Relative objective decrease of the last accepted step below which a fit
/// that meets the gradient test is considered stalled.
const STALL_REDUCTION: f64 = 1e-4;

/// Largest change of any transformed coordinate in one step.
const MAX_Z_STEP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub week: f64,
    pub ants_mean: f64,
    pub ants_sd: Option<f64>,
    pub fungus_mean: f64,
    pub fungus_sd: Option<f64>,
}

impl Observation {
    pub fn new(week: f64, ants_mean: f64, fungus_mean: f64) -> Self {
        Self {
            week,
            ants_mean,
            ants_sd: None,
            fungus_mean,
            fungus_sd: None,
        }
    }
}

/// Rows of weekly means (and optional standard deviations), sorted by week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries {
    rows: Vec<Observation>,
}

impl ObservationSeries {
    /// Sorts `rows` by week and validates them.
    pub fn new(mut rows: Vec<Observation>) -> Result<Self> {
        if rows.len() < MIN_ROWS {
            return Err(Error::Precondition(format!(
                "need at least {MIN_ROWS} observation rows, got {}",
                rows.len()
            )));
        }
        for r in &rows {
            if !r.week.is_finite() {
                return Err(Error::NonFinite("observation week"));
            }
            for (name, v) in [("A_mean", r.ants_mean), ("F_mean", r.fungus_mean)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Precondition(format!(
                        "{name} = {v} at week {} must be finite and nonnegative",
                        r.week
                    )));
                }
            }
            for (name, v) in [("A_sd", r.ants_sd), ("F_sd", r.fungus_sd)] {
                if let Some(v) = v {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::Precondition(format!(
                            "{name} = {v} at week {} must be finite and nonnegative",
                            r.week
                        )));
                    }
                }
            }
        }
        rows.sort_by(|x, y| x.week.total_cmp(&y.week));
        if let Some(w) = rows.windows(2).find(|w| w[1].week <= w[0].week) {
            return Err(Error::Precondition(format!("week {} appears twice", w[0].week)));
        }
        Ok(Self { rows })
    }

    /// Means taken from `states` at `weeks`, without standard deviations.
    pub fn from_states(weeks: &[f64], states: &[BiomassState]) -> Result<Self> {
        if weeks.len() != states.len() {
            return Err(Error::Precondition("weeks and states differ in length".into()));
        }
        Self::new(
            weeks
                .iter()
                .zip(states)
                .map(|(w, s)| Observation::new(*w, s.ants, s.fungus))
                .collect(),
        )
    }

    /// Reads CSV with header `week,A_mean,A_sd,F_mean,F_sd`; the two sd
    /// columns may be omitted or left empty.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        for h in headers.iter() {
            if !["week", "A_mean", "A_sd", "F_mean", "F_sd"].contains(&h) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unknown column `{h}`"),
                });
            }
        }
        let required = |name: &str| {
            col(name).ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
        };
        let (week, am, fm) = (required("week")?, required("A_mean")?, required("F_mean")?);
        let (asd, fsd) = (col("A_sd"), col("F_sd"));

        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let num = |idx: usize| -> Result<Option<f64>> {
                let field = rec.get(idx).unwrap_or("");
                if field.is_empty() {
                    return Ok(None);
                }
                field.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                    line,
                    message: format!("`{field}` is not a number"),
                })
            };
            let need = |idx: usize, name: &str| -> Result<f64> {
                num(idx)?.ok_or_else(|| Error::Parse {
                    line,
                    message: format!("empty `{name}`"),
                })
            };
            rows.push(Observation {
                week: need(week, "week")?,
                ants_mean: need(am, "A_mean")?,
                ants_sd: match asd {
                    Some(i) => num(i)?,
                    None => None,
                },
                fungus_mean: need(fm, "F_mean")?,
                fungus_sd: match fsd {
                    Some(i) => num(i)?,
                    None => None,
                },
            });
        }
        Self::new(rows)
    }

    pub fn read_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "week,A_mean,A_sd,F_mean,F_sd")?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(r.week),
                fmt_f64(r.ants_mean),
                opt(r.ants_sd),
                fmt_f64(r.fungus_mean),
                opt(r.fungus_sd)
            )?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn weeks(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.week).collect()
    }

    /// Whether every row has strictly positive standard deviations.
    pub fn has_sd(&self) -> bool {
        self.rows.iter().all(|r| {
            matches!(r.ants_sd, Some(s) if s > 0.0) && matches!(r.fungus_sd, Some(s) if s > 0.0)
        })
    }
}

/// The seven parameters followed by `A0` and `F0`, indexed by [`Target::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitVector(pub [f64; 9]);

impl FitVector {
    pub fn new(params: &ModelParams, init: BiomassState) -> Self {
        let mut v = [0.0; 9];
        for p in Param::ALL {
            v[p.index()] = params.get(p);
        }
        v[Target::InitialAnts.index()] = init.ants;
        v[Target::InitialFungus.index()] = init.fungus;
        Self(v)
    }

    pub fn get(&self, t: Target) -> f64 {
        self.0[t.index()]
    }

    pub fn set(&mut self, t: Target, value: f64) {
        self.0[t.index()] = value;
    }

    /// Parameters without validation.
    pub fn params(&self) -> ModelParams {
        Param::ALL
            .iter()
            .fold(ModelParams::new_unchecked(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1), |p, k| {
                p.with_unchecked(*k, self.0[k.index()])
            })
    }

    pub fn init(&self) -> BiomassState {
        BiomassState::new(self.get(Target::InitialAnts), self.get(Target::InitialFungus))
    }
}

/// Open interval `(lower, upper)` per target; `upper` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: [f64; 9],
    pub upper: [f64; 9],
}

impl Default for Bounds {
    /// Everything positive and `a < 0.25`.
    fn default() -> Self {
        let mut upper = [f64::INFINITY; 9];
        upper[Target::Labor.index()] = LABOR_MAX;
        Self {
            lower: [0.0; 9],
            upper,
        }
    }
}

impl Bounds {
    pub fn interval(&self, t: Target) -> (f64, f64) {
        (self.lower[t.index()], self.upper[t.index()])
    }

    pub fn set(&mut self, t: Target, lower: f64, upper: f64) {
        self.lower[t.index()] = lower;
        self.upper[t.index()] = upper;
    }

    pub fn validate(&self) -> Result<()> {
        for t in Target::ALL {
            let (lo, hi) = self.interval(t);
            if !(lo.is_finite() && lo >= 0.0 && hi > lo) {
                return Err(Error::Precondition(format!(
                    "bounds for {t} must satisfy 0 <= lower < upper, got ({lo}, {hi})"
                )));
            }
        }
        let (_, hi) = self.interval(Target::Labor);
        if hi > LABOR_MAX {
            return Err(Error::Precondition(format!("upper bound for a exceeds {LABOR_MAX}")));
        }
        Ok(())
    }

    pub fn contains(&self, t: Target, x: f64) -> bool {
        let (lo, hi) = self.interval(t);
        x > lo && x < hi
    }

    fn transform(&self, t: Target, x: f64) -> f64 {
        let (lo, hi) = self.interval(t);
        if hi.is_finite() {
            ((x - lo) / (hi - x)).ln()
        } else {
            (x - lo).ln()
        }
    }

    fn untransform(&self, t: Target, z: f64) -> f64 {
        let (lo, hi) = self.interval(t);
        if hi.is_finite() {
            lo + (hi - lo) / (1.0 + (-z).exp())
        } else {
            lo + z.exp()
        }
    }

    /// `dx/dz` at `x`.
    fn slope(&self, t: Target, x: f64) -> f64 {
        let (lo, hi) = self.interval(t);
        if hi.is_finite() {
            (x - lo) * (hi - x) / (hi - lo)
        } else {
            x - lo
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Inverse variance when every row has positive standard deviations,
    /// unit weights otherwise.
    #[default]
    Auto,
    Unit,
    InverseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Raw,
    /// Residuals of `log10(x + 1)`.
    Log10p1,
}

impl Loss {
    fn value(self, x: f64) -> f64 {
        match self {
            Loss::Raw => x,
            Loss::Log10p1 => (x + 1.0).log10(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Loss::Raw => 1.0,
            Loss::Log10p1 => 1.0 / ((x + 1.0) * std::f64::consts::LN_10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Targets adjusted by the fit; the others stay at the initial guess.
    pub free: Vec<Target>,
    pub weighting: Weighting,
    pub loss: Loss,
    /// Time at which `A0`, `F0` apply; defaults to the first observed week.
    pub t0: Option<f64>,
    pub max_iterations: usize,
    /// Converged once `|grad SSE| <= gradient_tol (1 + SSE)` in `z`.
    pub gradient_tol: f64,
    /// Stop when a step changes `z` by less than this relative amount.
    pub step_tol: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            free: Param::ALL.iter().map(|p| Target::from(*p)).collect(),
            weighting: Weighting::Auto,
            loss: Loss::Raw,
            t0: None,
            max_iterations: 200,
            gradient_tol: 1e-8,
            step_tol: 1e-14,
            rel_tol: 1e-12,
            abs_tol: 1e-14,
        }
    }
}

impl FitOptions {
    /// Also fit (or stop fitting) the initial biomasses.
    pub fn free_initials(mut self, yes: bool) -> Self {
        self.free.retain(|t| t.param().is_some());
        if yes {
            self.free.extend([Target::InitialAnts, Target::InitialFungus]);
        }
        self
    }

    pub fn fix(mut self, t: Target) -> Self {
        self.free.retain(|x| *x != t);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.free.is_empty() {
            return Err(Error::Precondition("no free targets to fit".into()));
        }
        for (k, t) in self.free.iter().enumerate() {
            if self.free[..k].contains(t) {
                return Err(Error::Precondition(format!("target {t} listed twice")));
            }
        }
        if !(self.gradient_tol > 0.0 && self.step_tol > 0.0 && self.rel_tol > 0.0 && self.abs_tol > 0.0)
        {
            return Err(Error::Precondition("fit tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identifiability {
    WellIdentified,
    PoorlyIdentified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub initial_guess: FitVector,
    pub bounds: Bounds,
    pub free: Vec<Target>,
    pub estimates: FitVector,
    /// One entry per free target, `None` where not estimable.
    pub std_devs: Vec<Option<f64>>,
    /// Weighted sum of squared residuals.
    pub residual_norm: f64,
    /// Residual variance `SSE / (m - n)`, undefined when `m <= n`.
    pub sigma2: Option<f64>,
    pub observations: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the objective gradient in `z` at the estimate.
    pub gradient_norm: f64,
    /// Condition number of the column-scaled information matrix `J^T J`.
    pub covariance_condition_number: f64,
    /// Objective after the start and after every accepted step.
    pub objective_history: Vec<f64>,
    pub weighting: Weighting,
    pub loss: Loss,
    pub t0: f64,
    pub message: String,
}

impl FitResult {
    pub fn std_dev(&self, t: Target) -> Option<f64> {
        let k = self.free.iter().position(|x| *x == t)?;
        self.std_devs[k]
    }

    pub fn params(&self) -> ModelParams {
        self.estimates.params()
    }
}

/// Residuals and their Jacobian in `z`.
struct Evaluation {
    residuals: DVector<f64>,
    jacobian: DMatrix<f64>,
    sse: f64,
}

struct Problem<'a> {
    data: &'a ObservationSeries,
    bounds: &'a Bounds,
    opts: &'a FitOptions,
    base: FitVector,
    t0: f64,
    /// Square roots of the weights, `[A, F]` per row.
    sqrt_w: Vec<[f64; 2]>,
    grid: Vec<f64>,
}

impl Problem<'_> {
    fn vector(&self, z: &DVector<f64>) -> FitVector {
        let mut v = self.base;
        for (k, t) in self.opts.free.iter().enumerate() {
            v.set(*t, self.bounds.untransform(*t, z[k]));
        }
        v
    }

    fn z_of(&self, v: &FitVector) -> DVector<f64> {
        DVector::from_iterator(
            self.opts.free.len(),
            self.opts.free.iter().map(|t| self.bounds.transform(*t, v.get(*t))),
        )
    }

    fn evaluate(&self, v: &FitVector) -> Result<Evaluation> {
        let params = v.params();
        let init = v.init();
        let mut cfg = IntegratorConfig::new(self.t0, *self.grid.last().expect("rows"))
            .with_tolerances(self.opts.rel_tol, self.opts.abs_tol)
            .with_grid(self.grid.clone());
        cfg.stop_at_terminal = false;
        let run = forward_sensitivities(&params, init, &self.opts.free, &cfg)?;
        let offset = run.trajectory.len() - self.data.len();
        let m = 2 * self.data.len();
        let n = self.opts.free.len();
        let mut residuals = DVector::zeros(m);
        let mut jacobian = DMatrix::zeros(m, n);
        let slopes: Vec<f64> = self.opts.free.iter().map(|t| self.bounds.slope(*t, v.get(*t))).collect();
        let loss = self.opts.loss;
        for (k, row) in self.data.rows().iter().enumerate() {
            let s = run.trajectory.states[offset + k];
            let w = self.sqrt_w[k];
            residuals[2 * k] = w[0] * (loss.value(s.ants) - loss.value(row.ants_mean));
            residuals[2 * k + 1] = w[1] * (loss.value(s.fungus) - loss.value(row.fungus_mean));
            let (ga, gf) = (w[0] * loss.derivative(s.ants), w[1] * loss.derivative(s.fungus));
            for (j, sens) in run.sensitivities.iter().enumerate() {
                jacobian[(2 * k, j)] = ga * sens.d_ants[offset + k] * slopes[j];
                jacobian[(2 * k + 1, j)] = gf * sens.d_fungus[offset + k] * slopes[j];
            }
        }
        let sse = residuals.norm_squared();
        if !sse.is_finite() {
            return Err(Error::NonFinite("fit residuals"));
        }
        Ok(Evaluation {
            residuals,
            jacobian,
            sse,
        })
    }
}

fn weights(data: &ObservationSeries, weighting: Weighting, loss: Loss) -> Result<Vec<[f64; 2]>> {
    let inverse = match weighting {
        Weighting::Unit => false,
        Weighting::Auto => data.has_sd(),
        Weighting::InverseVariance => {
            if !data.has_sd() {
                return Err(Error::Precondition(
                    "inverse-variance weighting needs positive A_sd and F_sd on every row".into(),
                ));
            }
            true
        }
    };
    Ok(data
        .rows()
        .iter()
        .map(|r| {
            if !inverse {
                return [1.0, 1.0];
            }
            // sd carried through the loss transform to first order
            let a = r.ants_sd.unwrap() * loss.derivative(r.ants_mean);
            let f = r.fungus_sd.unwrap() * loss.derivative(r.fungus_mean);
            [1.0 / a, 1.0 / f]
        })
        .collect())
}

/// Fits the free targets of `initial_guess` to `data`.
pub fn fit(
    data: &ObservationSeries,
    initial_guess: &FitVector,
    bounds: &Bounds,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    bounds.validate()?;
    for t in &opts.free {
        let x = initial_guess.get(*t);
        if !bounds.contains(*t, x) {
            let (lo, hi) = bounds.interval(*t);
            return Err(Error::Precondition(format!(
                "initial guess {t} = {x} lies outside ({lo}, {hi})"
            )));
        }
    }
    initial_guess.params().validate()?;
    initial_guess.init().check_nonnegative()?;
    let first = data.rows()[0].week;
    let t0 = opts.t0.unwrap_or(first);
    if !(t0 <= first) {
        return Err(Error::Precondition(format!(
            "t0 = {t0} lies after the first observation at week {first}"
        )));
    }
    let mut grid = data.weeks();
    if t0 < first {
        grid.insert(0, t0);
    }

    let problem = Problem {
        data,
        bounds,
        opts,
        base: *initial_guess,
        t0,
        sqrt_w: weights(data, opts.weighting, opts.loss)?,
        grid,
    };
    let n = opts.free.len();
    let m = 2 * data.len();

    let mut z = problem.z_of(initial_guess);
    let mut current = problem.evaluate(initial_guess)?;
    let mut history = vec![current.sse];
    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");

    let gradient_ok = |e: &Evaluation| {
        let g = 2.0 * e.jacobian.tr_mul(&e.residuals).norm();
        (g, g <= opts.gradient_tol * (1.0 + e.sse))
    };

    let mut last_reduction = 0.0;
    'outer: loop {
        let (_, ok) = gradient_ok(&current);
        if ok && (iterations == 0 || last_reduction < STALL_REDUCTION || current.sse == 0.0) {
            converged = true;
            message = "gradient below tolerance".into();
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        let jtj = current.jacobian.tr_mul(&current.jacobian);
        let g = current.jacobian.tr_mul(&current.residuals);
        let max_diag = jtj.diagonal().max();
        let scale: DVector<f64> = jtj.diagonal().map(|d| d.max(1e-12 * max_diag).max(1e-300));

        loop {
            let mut damped = jtj.clone();
            for j in 0..n {
                damped[(j, j)] += lambda * scale[j];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > 1e20 {
                    message = "damped normal equations could not be factored".into();
                    break 'outer;
                }
                continue;
            };
            let delta = chol
                .solve(&(-&g))
                .map(|d| d.clamp(-MAX_Z_STEP, MAX_Z_STEP));
            if delta.norm() <= opts.step_tol * (z.norm() + opts.step_tol) {
                message = "step below tolerance".into();
                break 'outer;
            }
            let z_new = &z + &delta;
            let trial_vec = problem.vector(&z_new);
            let trial = trial_vec
                .params()
                .validate()
                .and_then(|_| problem.evaluate(&trial_vec));
            let predicted = -2.0 * g.dot(&delta) - (&jtj * &delta).dot(&delta);
            match trial {
                Ok(e) if e.sse < current.sse => {
                    let rho = (current.sse - e.sse) / predicted;
                    lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    nu = 2.0;
                    last_reduction = (current.sse - e.sse) / current.sse;
                    z = z_new;
                    current = e;
                    history.push(current.sse);
                    iterations += 1;
                    continue 'outer;
                }
                _ => {
                    lambda *= nu;
                    nu *= 2.0;
                    if lambda > 1e20 {
                        message = "no decrease found along damped steps".into();
                        break 'outer;
                    }
                }
            }
        }
    }
    let (gradient_norm, ok) = gradient_ok(&current);
    if !converged && ok {
        converged = true;
    }

    let estimates = problem.vector(&z);
    let sigma2 = (m > n).then(|| current.sse / (m - n) as f64);
    let (std_devs, condition) = standard_deviations(&current.jacobian, sigma2, |j| {
        bounds.slope(opts.free[j], estimates.get(opts.free[j]))
    });

    Ok(FitResult {
        initial_guess: *initial_guess,
        bounds: *bounds,
        free: opts.free.clone(),
        estimates,
        std_devs,
        residual_norm: current.sse,
        sigma2,
        observations: m,
        iterations,
        converged,
        gradient_norm,
        covariance_condition_number: condition,
        objective_history: history,
        weighting: opts.weighting,
        loss: opts.loss,
        t0,
        message,
    })
}

/// Delta-method standard deviations in the original coordinates together
/// with the condition number of the column-scaled information matrix.
fn standard_deviations(
    jacobian: &DMatrix<f64>,
    sigma2: Option<f64>,
    slope: impl Fn(usize) -> f64,
) -> (Vec<Option<f64>>, f64) {
    let n = jacobian.ncols();
    let info = jacobian.tr_mul(jacobian);
    let d: Vec<f64> = info.diagonal().iter().map(|x| x.sqrt()).collect();
    let degenerate: Vec<bool> = d.iter().map(|x| !(*x > 0.0)).collect();
    let mut scaled = info.clone();
    for i in 0..n {
        for j in 0..n {
            scaled[(i, j)] = if degenerate[i] || degenerate[j] {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            } else {
                info[(i, j)] / (d[i] * d[j])
            };
        }
    }
    let eig = SymmetricEigen::new(scaled);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let condition = if degenerate.iter().any(|x| *x) || !(lmin > 0.0) {
        f64::INFINITY
    } else {
        lmax / lmin
    };
    let null: Vec<bool> = eig
        .eigenvalues
        .iter()
        .map(|l| *l <= NULL_SPACE_TOL * lmax)
        .collect();

    let std_devs = (0..n)
        .map(|j| {
            if degenerate[j] {
                return None;
            }
            let participation: f64 = (0..n)
                .filter(|i| null[*i])
                .map(|i| eig.eigenvectors[(j, i)].powi(2))
                .sum();
            if participation > NULL_PARTICIPATION_TOL {
                return None;
            }
            let s2 = sigma2?;
            let var_scaled: f64 = (0..n)
                .filter(|i| !null[*i])
                .map(|i| eig.eigenvectors[(j, i)].powi(2) / eig.eigenvalues[i])
                .sum();
            let var_z = s2 * var_scaled / (d[j] * d[j]);
            Some(slope(j).abs() * var_z.sqrt())
        })
        .collect();
    (std_devs, condition)
}

/// Flags every free target whose relative standard deviation exceeds 10 or
/// which is not estimable.
pub fn identifiability_report(fit: &FitResult) -> Result<Vec<(Target, Identifiability)>> {
    if !fit.converged {
        return Err(Error::Precondition(
            "identifiability needs a converged fit".into(),
        ));
    }
    Ok(fit
        .free
        .iter()
        .zip(&fit.std_devs)
        .map(|(t, sd)| {
            let est = fit.estimates.get(*t);
            let flag = match sd {
                Some(s) if *s <= 10.0 * est.abs() => Identifiability::WellIdentified,
                _ => Identifiability::PoorlyIdentified,
            };
            (*t, flag)
        })
        .collect())
}

fn format_interval(lo: f64, hi: f64) -> String {
    let h = if hi.is_finite() { hi.to_string() } else { "inf".into() };
    format!("({lo}, {h})")
}

/// Plain-text table with the columns Parameters, Initial values, Intervals,
/// Estimated values and Standard Deviation; "DNE" marks free targets that
/// are not estimable and "fixed" the held ones.
pub fn format_table(fit: &FitResult) -> String {
    let header = ["Parameters", "Initial values", "Intervals", "Estimated values", "Standard Deviation"];
    let mut rows: Vec<[String; 5]> = Vec::new();
    for t in Target::ALL {
        let (lo, hi) = fit.bounds.interval(t);
        let sd = match fit.std_dev(t) {
            Some(s) => format!("{s:.6e}"),
            None if !fit.free.contains(&t) => "fixed".into(),
            None => "DNE".into(),
        };
        rows.push([
            t.name().to_string(),
            format!("{}", fit.initial_guess.get(t)),
            format_interval(lo, hi),
            format!("{:.6e}", fit.estimates.get(t)),
            sd,
        ]);
    }
    let widths: Vec<usize> = (0..5)
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let line = |cells: &[&str]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(out, "{}", line(&header)).unwrap();
    writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")).unwrap();
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        writeln!(out, "{}", line(&cells)).unwrap();
    }
    writeln!(
        out,
        "\nresidual_norm = {:.6e}, iterations = {}, converged = {}, condition = {:.3e}",
        fit.residual_norm, fit.iterations, fit.converged, fit.covariance_condition_number
    )
    .unwrap();
    out
}

/// JSON fit report with one row per target.
pub fn report_json(fit: &FitResult) -> serde_json::Value {
    let flags = identifiability_report(fit).ok();
    let rows: Vec<serde_json::Value> = Target::ALL
        .iter()
        .map(|t| {
            let (lo, hi) = fit.bounds.interval(*t);
            let free = fit.free.contains(t);
            let flag = flags
                .as_ref()
                .and_then(|f| f.iter().find(|(x, _)| x == t).map(|(_, f)| *f));
            serde_json::json!({
                "target": t,
                "initial": fit.initial_guess.get(*t),
                "lower": lo,
                "upper": if hi.is_finite() { serde_json::json!(hi) } else { serde_json::Value::Null },
                "estimate": fit.estimates.get(*t),
                "std_dev": fit.std_dev(*t),
                "free": free,
                "identifiability": flag,
            })
        })
        .collect();
    serde_json::json!({
        "rows": rows,
        "residual_norm": fit.residual_norm,
        "sigma2": fit.sigma2,
        "observations": fit.observations,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "gradient_norm": fit.gradient_norm,
        "covariance_condition_number": if fit.covariance_condition_number.is_finite() {
            serde_json::json!(fit.covariance_condition_number)
        } else {
            serde_json::Value::Null
        },
        "objective_history": fit.objective_history,
        "weighting": fit.weighting,
        "loss": fit.loss,
        "t0": fit.t0,
        "message": fit.message,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartOptions {
    pub starts: usize,
    pub seed: u64,
    /// Half-open intervals are sampled log-uniformly over
    /// `[guess / spread, guess * spread]`.
    pub spread: f64,
    /// Relative agreement under which two estimates count as the same minimum.
    pub distinct_tol: f64,
    pub execution: Execution,
}

impl Default for MultistartOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            seed: 0,
            spread: 10.0,
            distinct_tol: 1e-4,
            execution: Execution::default(),
        }
    }
}

/// Latin hypercube of starting vectors: each free target's range is cut into
/// `n` strata and every stratum is used exactly once.
pub fn latin_hypercube(
    guess: &FitVector,
    bounds: &Bounds,
    free: &[Target],
    n: usize,
    spread: f64,
    seed: u64,
) -> Vec<FitVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![*guess; n];
    for t in free {
        let (lo, hi) = bounds.interval(*t);
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (k, s) in strata.into_iter().enumerate() {
            let u = (s as f64 + rng.random::<f64>()) / n as f64;
            let u = u.clamp(1e-9, 1.0 - 1e-9);
            let x = if hi.is_finite() {
                lo + (hi - lo) * u
            } else {
                let g = guess.get(*t);
                let a = (g / spread).max(lo + 1e-12 * g).ln();
                let b = (g * spread).ln();
                (a + (b - a) * u).exp()
            };
            out[k].set(*t, x);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartResult {
    pub starts: Vec<FitVector>,
    /// Result of every start, in start order; `Err` holds the failure message.
    pub fits: Vec<std::result::Result<FitResult, String>>,
    /// Indices into `fits` of distinct minima, best first.
    pub minima: Vec<usize>,
}

impl MultistartResult {
    pub fn best(&self) -> Option<&FitResult> {
        self.minima.first().and_then(|k| self.fits[*k].as_ref().ok())
    }
}

/// Runs [`fit`] from `opts.starts` Latin-hypercube guesses around `guess`
/// and collects the distinct minima. Deterministic for a given seed.
pub fn multistart(
    data: &ObservationSeries,
    guess: &FitVector,
    bounds: &Bounds,
    fit_opts: &FitOptions,
    opts: &MultistartOptions,
) -> Result<MultistartResult> {
    fit_opts.validate()?;
    bounds.validate()?;
    if opts.starts == 0 || !(opts.spread > 1.0) {
        return Err(Error::Precondition("multistart needs starts >= 1 and spread > 1".into()));
    }
    let starts = latin_hypercube(guess, bounds, &fit_opts.free, opts.starts, opts.spread, opts.seed);
    let fits: Vec<_> = map_ordered(opts.execution, &starts, |s| {
        fit(data, s, bounds, fit_opts).map_err(|e| e.to_string())
    });

    let mut order: Vec<usize> = (0..fits.len()).filter(|k| fits[*k].is_ok()).collect();
    order.sort_by(|x, y| {
        let (a, b) = (fits[*x].as_ref().unwrap(), fits[*y].as_ref().unwrap());
        a.residual_norm.total_cmp(&b.residual_norm).then(x.cmp(y))
    });
    let mut minima: Vec<usize> = Vec::new();
    for k in order {
        let cand = fits[k].as_ref().unwrap();
        let same = minima.iter().any(|j| {
            let other = fits[*j].as_ref().unwrap();
            fit_opts.free.iter().all(|t| {
                let (x, y) = (cand.estimates.get(*t), other.estimates.get(*t));
                (x - y).abs() <= opts.distinct_tol * x.abs().max(y.abs())
            })
        });
        if !same {
            minima.push(k);
        }
    }
    Ok(MultistartResult {
        starts,
        fits,
        minima,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<Observation> {
        (0..n)
            .map(|k| Observation::new(6.0 + k as f64, 0.1 * (k + 1) as f64, 0.2))
            .collect()
    }

    #[test]
    fn series_is_sorted_and_checked() {
        let mut r = rows(5);
        r.reverse();
        let s = ObservationSeries::new(r).unwrap();
        assert_eq!(s.weeks(), vec![6.0, 7.0, 8.0, 9.0, 10.0]);
        assert!(ObservationSeries::new(rows(3)).is_err());
        let mut dup = rows(5);
        dup[1].week = 6.0;
        assert!(ObservationSeries::new(dup).is_err());
        let mut neg = rows(5);
        neg[2].fungus_mean = -1.0;
        assert!(ObservationSeries::new(neg).is_err());
    }

    #[test]
    fn csv_with_and_without_sd() {
        let text = "week,A_mean,A_sd,F_mean,F_sd\n6,0.05,0.01,0.3,0.02\n7,0.06,,0.4,\n8,0.07,0.01,0.5,0.03\n9,0.08,0.01,0.6,0.03\n";
        let s = ObservationSeries::read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.rows()[1].ants_sd, None);
        assert!(!s.has_sd());

        let text = "week,A_mean,F_mean\n9,0.08,0.6\n6,0.05,0.3\n7,0.06,0.4\n8,0.07,0.5\n";
        let s = ObservationSeries::read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.weeks(), vec![6.0, 7.0, 8.0, 9.0]);

        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        assert_eq!(ObservationSeries::read_csv(out.as_slice()).unwrap(), s);
    }

    #[test]
    fn csv_errors() {
        let bad = "week,A_mean,F_mean,X\n6,1,1,1\n";
        assert!(matches!(ObservationSeries::read_csv(bad.as_bytes()), Err(Error::Parse { .. })));
        let bad = "week,F_mean\n6,1\n";
        assert!(matches!(ObservationSeries::read_csv(bad.as_bytes()), Err(Error::Parse { .. })));
        let bad = "week,A_mean,F_mean\n6,abc,1\n7,1,1\n8,1,1\n9,1,1\n";
        match ObservationSeries::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transforms_roundtrip() {
        let b = Bounds::default();
        for (t, x) in [(Target::AntGrowth, 0.1), (Target::Labor, 0.2), (Target::Labor, 1e-5)] {
            let z = b.transform(t, x);
            assert!((b.untransform(t, z) - x).abs() < 1e-14 * x.max(1e-3));
            let h = 1e-6;
            let fd = (b.untransform(t, z + h) - b.untransform(t, z - h)) / (2.0 * h);
            assert!((fd - b.slope(t, x)).abs() < 1e-7 * b.slope(t, x).abs());
        }
    }

    #[test]
    fn bounds_validation() {
        let mut b = Bounds::default();
        assert!(b.validate().is_ok());
        b.set(Target::Labor, 0.0, 0.3);
        assert!(b.validate().is_err());
        let mut b = Bounds::default();
        b.set(Target::AntGrowth, 1.0, 0.5);
        assert!(b.validate().is_err());
    }

    #[test]
    fn options_free_initials() {
        let o = FitOptions::default().free_initials(true);
        assert_eq!(o.free.len(), 9);
        let o = o.free_initials(false).fix(Target::HalfSaturation);
        assert_eq!(o.free.len(), 6);
        assert!(!o.free.contains(&Target::HalfSaturation));
    }

    #[test]
    fn singular_information_gives_dne() {
        // second column is a multiple of the first
        let j = DMatrix::from_row_slice(4, 3, &[
            1.0, 2.0, 0.3, //
            2.0, 4.0, -1.0, //
            0.5, 1.0, 2.0, //
            1.5, 3.0, 0.1,
        ]);
        let (sd, cond) = standard_deviations(&j, Some(1.0), |_| 1.0);
        assert_eq!(sd[0], None);
        assert_eq!(sd[1], None);
        assert!(sd[2].is_some());
        assert!(cond > 1e12);
    }

    #[test]
    fn full_rank_standard_deviations() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
        let (sd, cond) = standard_deviations(&j, Some(0.5), |k| if k == 0 { 2.0 } else { 1.0 });
        let cov = (j.transpose() * &j).try_inverse().unwrap() * 0.5;
        assert!((sd[0].unwrap() - 2.0 * cov[(0, 0)].sqrt()).abs() < 1e-14);
        assert!((sd[1].unwrap() - cov[(1, 1)].sqrt()).abs() < 1e-14);
        assert!(cond.is_finite());
        let (sd, _) = standard_deviations(&j, Some(0.0), |_| 1.0);
        assert_eq!(sd, vec![Some(0.0), Some(0.0)]);
        let (sd, _) = standard_deviations(&j, None, |_| 1.0);
        assert_eq!(sd, vec![None, None]);
    }

    #[test]
    fn hypercube_covers_strata() {
        let guess = FitVector::new(&crate::model::nominal::PARAMS, crate::model::nominal::INITIAL);
        let free = [Target::AntGrowth, Target::Labor];
        let b = Bounds::default();
        let pts = latin_hypercube(&guess, &b, &free, 8, 10.0, 7);
        assert_eq!(pts, latin_hypercube(&guess, &b, &free, 8, 10.0, 7));
        let mut strata: Vec<usize> = pts
            .iter()
            .map(|p| (p.get(Target::Labor) / 0.25 * 8.0) as usize)
            .collect();
        strata.sort();
        assert_eq!(strata, (0..8).collect::<Vec<_>>());
        for p in &pts {
            let r = p.get(Target::AntGrowth);
            assert!((0.01..=1.0).contains(&r));
            assert_eq!(p.get(Target::FungusGrowth), 0.7);
        }
    }
}
