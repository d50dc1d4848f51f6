//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's vector field, Jacobian or integrators.

#![allow(dead_code)]

/// `[r_a, r_f, r_c, d_a, d_f, b, a]`
pub type Raw = [f64; 7];

pub const REFERENCE: Raw = [0.1, 0.7, 0.0045, 0.1, 0.2, 0.002, 0.2];

// 30-digit evaluations of the closed-form roots for REFERENCE
pub const A1: f64 = 0.002923926201337303227;
pub const A2: f64 = 3.420058958884237269;
pub const THRESHOLD: f64 = 6.827795918367346939e-4;

pub fn field(p: &Raw, a: f64, f: f64) -> [f64; 2] {
    let [r_a, r_f, r_c, d_a, d_f, b, l] = *p;
    let growth = r_f * l * a * a / (b + l * a * a);
    [a * (r_a * f - d_a * a), f * (growth - d_f * f - r_c * a)]
}

/// 2-D Newton on the vector field with a forward-difference Jacobian.
pub fn newton(p: &Raw, mut x: [f64; 2]) -> Option<[f64; 2]> {
    for _ in 0..200 {
        let r = field(p, x[0], x[1]);
        let mut j = [[0.0; 2]; 2];
        for c in 0..2 {
            let h = 1e-7 * x[c].abs().max(1e-9);
            let mut y = x;
            y[c] += h;
            let ry = field(p, y[0], y[1]);
            j[0][c] = (ry[0] - r[0]) / h;
            j[1][c] = (ry[1] - r[1]) / h;
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let dx = [
            (j[1][1] * r[0] - j[0][1] * r[1]) / det,
            (j[0][0] * r[1] - j[1][0] * r[0]) / det,
        ];
        x = [x[0] - dx[0], x[1] - dx[1]];
        if !(x[0].is_finite() && x[1].is_finite()) {
            return None;
        }
        if dx[0].abs() <= 1e-15 * x[0].abs() && dx[1].abs() <= 1e-15 * x[1].abs() {
            return Some(x);
        }
    }
    let r = field(p, x[0], x[1]);
    (r[0].hypot(r[1]) < 1e-15).then_some(x)
}

/// Distinct interior roots found by Newton from log-spaced starts, sorted by A.
pub fn interior_roots(p: &Raw) -> Vec<[f64; 2]> {
    let mut roots: Vec<[f64; 2]> = Vec::new();
    for k in 0..60 {
        let s = 10f64.powf(-5.0 + 8.0 * k as f64 / 59.0);
        for ratio in [0.02, 0.1, 0.5, 1.0, 2.0, 10.0, 50.0] {
            if let Some(x) = newton(p, [s, ratio * s]) {
                if x[0] > 1e-8 && x[1] > 1e-8
                    && !roots.iter().any(|r| (r[0] - x[0]).abs() < 1e-6 * x[0])
                {
                    roots.push(x);
                }
            }
        }
    }
    roots.sort_by(|a, b| a[0].total_cmp(&b[0]));
    roots
}

/// Classical fourth-order Runge–Kutta with `steps` equal steps, returning
/// the state at every step end.
pub fn rk4_path(p: &Raw, y0: [f64; 2], t0: f64, t1: f64, steps: usize) -> Vec<[f64; 2]> {
    let h = (t1 - t0) / steps as f64;
    let mut y = y0;
    let mut out = vec![y];
    let add = |y: [f64; 2], k: [f64; 2], s: f64| [y[0] + s * k[0], y[1] + s * k[1]];
    for _ in 0..steps {
        let k1 = field(p, y[0], y[1]);
        let y2 = add(y, k1, h / 2.0);
        let k2 = field(p, y2[0], y2[1]);
        let y3 = add(y, k2, h / 2.0);
        let k3 = field(p, y3[0], y3[1]);
        let y4 = add(y, k3, h);
        let k4 = field(p, y4[0], y4[1]);
        y = [
            y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        out.push(y);
    }
    out
}

/// Central finite difference of the RK4 solution with respect to target
/// `k` (0..7 parameters, 7 = A0, 8 = F0) at every step end.
pub fn fd_sensitivity(
    p: &Raw,
    y0: [f64; 2],
    t0: f64,
    t1: f64,
    steps: usize,
    k: usize,
) -> Vec<[f64; 2]> {
    let theta = if k < 7 { p[k] } else { y0[k - 7] };
    let h = 1e-6 * theta.abs().max(1.0);
    let run = |delta: f64| {
        let mut q = *p;
        let mut y = y0;
        if k < 7 {
            q[k] += delta;
        } else {
            y[k - 7] += delta;
        }
        rk4_path(&q, y, t0, t1, steps)
    };
    let up = run(h);
    let dn = run(-h);
    up.iter()
        .zip(&dn)
        .map(|(u, d)| [(u[0] - d[0]) / (2.0 * h), (u[1] - d[1]) / (2.0 * h)])
        .collect()
}

pub fn threshold(p: &Raw) -> f64 {
    let [r_a, r_f, r_c, d_a, d_f, b, _] = *p;
    let q = (r_c * r_a + d_f * d_a) / (r_a * r_f);
    4.0 * b * q * q
}
