//! Small dense-state ODE solvers.
//!
//! Two methods are provided:
//!
//! - an adaptive Dormand–Prince 5(4) pair with step rejection and a
//!   fourth-order continuous extension for output between steps;
//! - a fixed-step implicit trapezoidal rule (Newton iterations on a
//!   finite-difference Jacobian) for stiff stretches, with cubic Hermite
//!   interpolation between steps.
//!
//! Both drive a caller-supplied observer once per accepted step, which may
//! stop the integration early.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A first-order system `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]);

    /// Repairs an accepted state in place.
    ///
    /// Returns `Ok(true)` if `y` was modified, or `Err(i)` when component `i`
    /// is outside what can be repaired.
    fn project(&self, _y: &mut [f64]) -> Result<bool, usize> {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// Adaptive explicit Runge–Kutta 5(4).
    #[default]
    DormandPrince,
    /// Implicit trapezoidal rule with a fixed step.
    Trapezoidal { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub initial_step: Option<f64>,
    pub max_steps: usize,
    pub method: Method,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: f64::INFINITY,
            initial_step: None,
            max_steps: 1_000_000,
            method: Method::DormandPrince,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveError {
    StepUnderflow { t: f64, y: Vec<f64> },
    TooManySteps { t: f64, y: Vec<f64> },
    NonFinite { t: f64, y: Vec<f64> },
    NewtonFailure { t: f64, y: Vec<f64> },
    Constraint { t: f64, y: Vec<f64>, component: usize },
}

impl SolveError {
    pub fn time(&self) -> f64 {
        match self {
            SolveError::StepUnderflow { t, .. }
            | SolveError::TooManySteps { t, .. }
            | SolveError::NonFinite { t, .. }
            | SolveError::NewtonFailure { t, .. }
            | SolveError::Constraint { t, .. } => *t,
        }
    }
}

impl std::fmt::Display for SolveError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveError::StepUnderflow { t, .. } => write!(f, "step size underflow at t = {t}"),
            SolveError::TooManySteps { t, .. } => write!(f, "step budget exhausted at t = {t}"),
            SolveError::NonFinite { t, .. } => write!(f, "non-finite state at t = {t}"),
            SolveError::NewtonFailure { t, .. } => {
                write!(f, "implicit step did not converge at t = {t}")
            }
            SolveError::Constraint { t, y, component } => write!(
                f,
                "component {component} = {} left the admissible set at t = {t}",
                y[*component]
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// What the observer sees after each accepted step.
pub struct StepView<'a> {
    pub t_prev: f64,
    pub t: f64,
    pub y_prev: &'a [f64],
    pub y: &'a [f64],
    pub dydt: &'a [f64],
    dense: Dense<'a>,
}

enum Dense<'a> {
    /// Dormand–Prince continuous extension coefficients, 5 blocks of `dim`.
    Dopri(&'a [f64]),
    /// Cubic Hermite on `(y_prev, f_prev, y, f)`.
    Hermite { f_prev: &'a [f64] },
}

impl StepView<'_> {
    /// State at `t` in `[t_prev, t]`.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let h = self.t - self.t_prev;
        let n = self.y.len();
        if h == 0.0 {
            out.copy_from_slice(self.y);
            return;
        }
        let theta = (t - self.t_prev) / h;
        let theta1 = 1.0 - theta;
        match self.dense {
            Dense::Dopri(rc) => {
                for i in 0..n {
                    out[i] = rc[i]
                        + theta
                            * (rc[n + i]
                                + theta1
                                    * (rc[2 * n + i]
                                        + theta * (rc[3 * n + i] + theta1 * rc[4 * n + i])));
                }
            }
            Dense::Hermite { f_prev } => {
                let t2 = theta * theta;
                let t3 = t2 * theta;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + theta;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                for i in 0..n {
                    out[i] = h00 * self.y_prev[i]
                        + h10 * h * f_prev[i]
                        + h01 * self.y[i]
                        + h11 * h * self.dydt[i];
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub t: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// The observer asked to stop before `t_end`.
    pub stopped: bool,
}

/// Integrates from `(t0, y0)` to `t_end` with the method in `opts`.
pub fn solve<S, O>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &SolverOptions,
    observer: O,
) -> Result<SolveReport, SolveError>
where
    S: OdeSystem + ?Sized,
    O: FnMut(&StepView<'_>) -> Flow,
{
    assert_eq!(y0.len(), sys.dim(), "initial state has wrong dimension");
    match opts.method {
        Method::DormandPrince => dopri5(sys, t0, y0, t_end, opts, observer),
        Method::Trapezoidal { step } => trapezoidal(sys, t0, y0, t_end, step, opts, observer),
    }
}

// Dormand–Prince 5(4) tableau.
const PI_BETA: f64 = 0.08;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn error_scale(opts: &SolverOptions, a: f64, b: f64) -> f64 {
    opts.abs_tol + opts.rel_tol * a.abs().max(b.abs())
}

/// Starting step from the local Lipschitz estimate (Hairer–Nørsett–Wanner).
fn initial_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    opts: &SolverOptions,
) -> f64 {
    let n = y0.len();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..n {
        let sc = error_scale(opts, y0[i], y0[i]);
        d0 += (y0[i] / sc).powi(2);
        d1 += (f0[i] / sc).powi(2);
    }
    d0 = (d0 / n as f64).sqrt();
    d1 = (d1 / n as f64).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span).min(opts.max_step);
    let y1: Vec<f64> = (0..n).map(|i| y0[i] + h0 * f0[i]).collect();
    let mut f1 = vec![0.0; n];
    sys.rhs(t0 + h0, &y1, &mut f1);
    let mut d2 = 0.0;
    for i in 0..n {
        let sc = error_scale(opts, y0[i], y0[i]);
        d2 += ((f1[i] - f0[i]) / sc).powi(2);
    }
    d2 = (d2 / n as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span).min(opts.max_step)
}

fn dopri5<S, O>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    opts: &SolverOptions,
    mut observer: O,
) -> Result<SolveReport, SolveError>
where
    S: OdeSystem + ?Sized,
    O: FnMut(&StepView<'_>) -> Flow,
{
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut report = SolveReport {
        t,
        y: y.clone(),
        accepted: 0,
        rejected: 0,
        rhs_evals: 0,
        stopped: false,
    };
    if t_end <= t0 {
        return Ok(report);
    }

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut rcont = vec![0.0; 5 * n];

    sys.rhs(t, &y, &mut k1);
    report.rhs_evals += 1;
    let mut h = match opts.initial_step {
        Some(h) => h.min(t_end - t),
        None => {
            report.rhs_evals += 1;
            initial_step(sys, t, &y, &k1, t_end - t, opts)
        }
    };
    let mut last_rejected = false;
    let mut err_old = 1e-4_f64;

    loop {
        if report.accepted + report.rejected >= opts.max_steps {
            return Err(SolveError::TooManySteps { t, y });
        }
        h = h.min(opts.max_step);
        let remaining = t_end - t;
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(SolveError::StepUnderflow { t, y });
        }

        for i in 0..n {
            stage[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(t + C2 * h, &stage, &mut k2);
        for i in 0..n {
            stage[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * h, &stage, &mut k3);
        for i in 0..n {
            stage[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * h, &stage, &mut k4);
        for i in 0..n {
            stage[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * h, &stage, &mut k5);
        for i in 0..n {
            stage[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t_end } else { t + h };
        sys.rhs(t_new, &stage, &mut k6);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(t_new, &y_new, &mut k7);
        report.rhs_evals += 6;

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = error_scale(opts, y[i], y_new[i]);
            err += (e / sc).powi(2);
        }
        err = (err / n as f64).sqrt();

        if !err.is_finite() {
            report.rejected += 1;
            last_rejected = true;
            h *= 0.1;
            continue;
        }

        if err <= 1.0 {
            for i in 0..n {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                rcont[i] = y[i];
                rcont[n + i] = ydiff;
                rcont[2 * n + i] = bspl;
                rcont[3 * n + i] = ydiff - h * k7[i] - bspl;
                rcont[4 * n + i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            match sys.project(&mut y_new) {
                Ok(true) => {
                    sys.rhs(t_new, &y_new, &mut k7);
                    report.rhs_evals += 1;
                }
                Ok(false) => {}
                Err(component) => {
                    return Err(SolveError::Constraint {
                        t: t_new,
                        y: y_new,
                        component,
                    })
                }
            }
            if y_new.iter().any(|v| !v.is_finite()) {
                return Err(SolveError::NonFinite { t: t_new, y: y_new });
            }
            report.accepted += 1;
            let flow = observer(&StepView {
                t_prev: t,
                t: t_new,
                y_prev: &y,
                y: &y_new,
                dydt: &k7,
                dense: Dense::Dopri(&rcont),
            });
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            if flow == Flow::Stop {
                report.stopped = true;
                break;
            }
            if last {
                break;
            }
            // PI control keeps the step from chattering at the stability boundary
            let mut fac = 0.9 * err.max(1e-10).powf(-(0.2 - 0.75 * PI_BETA)) * err_old.powf(PI_BETA);
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            err_old = err.max(1e-4);
            last_rejected = false;
        } else {
            report.rejected += 1;
            last_rejected = true;
            h *= (0.9 * err.powf(-0.2)).max(0.2);
        }
    }
    report.t = t;
    report.y = y;
    Ok(report)
}

/// One implicit trapezoidal step by Newton iteration; `None` if Newton stalls.
fn trapezoid_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    y: &[f64],
    f0: &[f64],
    h: f64,
    evals: &mut usize,
) -> Option<Vec<f64>> {
    let n = y.len();
    let t1 = t + h;
    // explicit Euler predictor
    let mut y1: Vec<f64> = (0..n).map(|i| y[i] + h * f0[i]).collect();
    let mut f1 = vec![0.0; n];
    let mut fp = vec![0.0; n];
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for _ in 0..25 {
        sys.rhs(t1, &y1, &mut f1);
        *evals += 1;
        let residual = DVector::from_iterator(
            n,
            (0..n).map(|i| y1[i] - y[i] - 0.5 * h * (f0[i] + f1[i])),
        );
        // I - h/2 * df/dy by forward differences
        for j in 0..n {
            let step = 1e-8 * y1[j].abs().max(1e-6);
            let saved = y1[j];
            y1[j] = saved + step;
            sys.rhs(t1, &y1, &mut fp);
            *evals += 1;
            y1[j] = saved;
            for i in 0..n {
                let d = (fp[i] - f1[i]) / step;
                jac[(i, j)] = if i == j { 1.0 } else { 0.0 } - 0.5 * h * d;
            }
        }
        let delta = jac.clone().lu().solve(&residual)?;
        let mut norm = 0.0f64;
        for i in 0..n {
            y1[i] -= delta[i];
            norm = norm.max(delta[i].abs() / (1e-12 + y1[i].abs()));
        }
        if !norm.is_finite() {
            return None;
        }
        if norm < 1e-12 {
            return Some(y1);
        }
    }
    None
}

fn trapezoidal<S, O>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    step: f64,
    opts: &SolverOptions,
    mut observer: O,
) -> Result<SolveReport, SolveError>
where
    S: OdeSystem + ?Sized,
    O: FnMut(&StepView<'_>) -> Flow,
{
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut report = SolveReport {
        t,
        y: y.clone(),
        accepted: 0,
        rejected: 0,
        rhs_evals: 0,
        stopped: false,
    };
    if t_end <= t0 {
        return Ok(report);
    }
    assert!(step > 0.0, "trapezoidal step must be positive");
    let mut f0 = vec![0.0; n];
    sys.rhs(t, &y, &mut f0);
    report.rhs_evals += 1;
    let mut f1 = vec![0.0; n];

    while t < t_end {
        if report.accepted >= opts.max_steps {
            return Err(SolveError::TooManySteps { t, y });
        }
        let mut h = step.min(opts.max_step).min(t_end - t);
        let mut attempt = None;
        for _ in 0..10 {
            if let Some(next) = trapezoid_step(sys, t, &y, &f0, h, &mut report.rhs_evals) {
                attempt = Some(next);
                break;
            }
            report.rejected += 1;
            h *= 0.5;
        }
        let Some(mut y_new) = attempt else {
            return Err(SolveError::NewtonFailure { t, y });
        };
        let t_new = if h == t_end - t { t_end } else { t + h };
        if let Err(component) = sys.project(&mut y_new) {
            return Err(SolveError::Constraint {
                t: t_new,
                y: y_new,
                component,
            });
        }
        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite { t: t_new, y: y_new });
        }
        sys.rhs(t_new, &y_new, &mut f1);
        report.rhs_evals += 1;
        report.accepted += 1;
        let flow = observer(&StepView {
            t_prev: t,
            t: t_new,
            y_prev: &y,
            y: &y_new,
            dydt: &f1,
            dense: Dense::Hermite { f_prev: &f0 },
        });
        t = t_new;
        y = y_new;
        std::mem::swap(&mut f0, &mut f1);
        if flow == Flow::Stop {
            report.stopped = true;
            break;
        }
    }
    report.t = t;
    report.y = y;
    Ok(report)
}
