//! Structural checks: HJB residual, a direct optimal-control oracle and
//! convergence rates of the polynomial feedback.
//!
//! The HJB residual of `V_d` in reduced coordinates is
//!
//! ```text
//! r_d(y) = ∇V_d·Ẽ^{-1}(Ãy + H̃(y⊗y)) + ½|C̃y|² - (1/2α)|B̃^T Ẽ^{-T} ∇V_d|²
//! ∇V_2(y) = Ẽ^T Π Ẽ y,   ∇V_3(y) = ∇V_2(y) + ½ D³V(·, y, y).
//! ```
//!
//! `D³V` is the value tensor stored with the order-3 gain; its contraction
//! with `B̃^T Ẽ^{-T}` in the first slot is exactly `K̃`, so the same ½
//! appears in `u₃`.
//!
//! The oracle writes `u = u₂(y) + v(t)` with `v` piecewise linear on a
//! uniform grid, integrates state and running cost with classical RK4,
//! adds the terminal cost `½ y(T)^T Ẽ^T Π Ẽ y(T)`, and minimizes over the
//! nodal values of `v` by L-BFGS with gradients from the exact discrete
//! adjoint of the RK4 scheme. Gradients are measured in the discrete `L²`
//! metric of the trapezoid rule. The horizon is doubled until the
//! uncorrected closed loop satisfies `‖y(T)‖ ≤ 1e-6 ‖y(0)‖`.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::{linear_gain, GainSet};
use crate::leray::ReducedSystem;
use crate::linalg::{self, Mat, Vector};

pub const ORACLE_MAX_N: usize = 4;
pub const ORACLE_MAX_M: usize = 2;
pub const ORACLE_MAX_GRID: usize = 2000;
/// Horizon criterion `‖y(T)‖ ≤ HORIZON_DECAY ‖y(0)‖`.
pub const HORIZON_DECAY: f64 = 1e-6;
const HORIZON_DOUBLINGS: usize = 12;
const LBFGS_MEMORY: usize = 12;
const LBFGS_MAX_ITER: usize = 2000;
/// Iterations over which a cost decrease at rounding level counts as a stall.
const STALL_WINDOW: usize = 20;

/// `∇V_d(y)`; degree 3 needs the value tensor.
pub fn value_gradient(red: &ReducedSystem, g: &GainSet, y: &Vector) -> Result<Vector> {
    let n = red.n();
    if y.len() != n {
        return Err(Error::dim("state", n, y.len()));
    }
    let mut grad = red.e.transpose() * (&g.pi * (&red.e * y));
    if g.degree == 3 {
        let t = g
            .k3
            .as_ref()
            .and_then(|k| k.value.as_ref())
            .ok_or_else(|| Error::Invalid("degree-3 HJB residual needs the stored value tensor".into()))?;
        let tm = Mat::from_column_slice(n, n * n, t.as_slice());
        grad += tm * y.kronecker(y) * 0.5;
    }
    Ok(grad)
}

pub fn hjb_residual(red: &ReducedSystem, g: &GainSet, y: &Vector) -> Result<f64> {
    let e_lu = linalg::lu(&red.e, "reduced mass matrix")?;
    let sing = || Error::Singular { what: "reduced mass matrix".into(), cond: f64::INFINITY };
    let grad = value_gradient(red, g, y)?;
    let f = e_lu.solve(&(&red.a * y + red.h.eval_quadratic(y.as_slice())?)).ok_or_else(sing)?;
    let w = linalg::lu(&red.e.transpose(), "reduced mass matrix")?.solve(&grad).ok_or_else(sing)?;
    let bw = red.b.transpose() * w;
    Ok(grad.dot(&f) + 0.5 * (&red.c * y).norm_squared() - 0.5 / g.alpha * bw.norm_squared())
}

/// Least-squares slope of `ln e` against `ln s`.
pub fn fit_slope(scales: &[f64], errors: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = scales.iter().zip(errors).map(|(s, e)| (s.ln(), e.ln())).collect();
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in &pts {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RateReport {
    pub degree: usize,
    pub scales: Vec<f64>,
    pub errors: Vec<f64>,
    pub linf_errors: Vec<f64>,
    pub fitted_slope: f64,
    pub target_order: f64,
}

/// `|r_d(s y0)|` over the scales and the fitted slope.
pub fn hjb_scaling(red: &ReducedSystem, g: &GainSet, y0: &Vector, scales: &[f64]) -> Result<RateReport> {
    let errors = scales
        .iter()
        .map(|&s| hjb_residual(red, g, &(y0 * s)).map(f64::abs))
        .collect::<Result<Vec<f64>>>()?;
    Ok(RateReport {
        degree: g.degree,
        scales: scales.to_vec(),
        linf_errors: errors.clone(),
        fitted_slope: fit_slope(scales, &errors),
        errors,
        target_order: g.degree as f64 + 1.0,
    })
}

/// Discrete dynamics shared by the oracle and the comparison runs.
struct Discrete<'a> {
    red: &'a ReducedSystem,
    alpha: f64,
    /// `Ẽ^{-1} (Ã + B̃ L₂)`
    mpi: Mat,
    /// `Ẽ^{-1}`
    einv: Mat,
    bhat: Mat,
    l2: Mat,
    /// `Ẽ^T Π Ẽ`
    x: Mat,
    /// `Θ_r^T Θ_r`
    q: Mat,
}

impl<'a> Discrete<'a> {
    fn new(red: &'a ReducedSystem, alpha: f64, pi: &Mat) -> Result<Self> {
        let einv = linalg::inverse(&red.e, "reduced mass matrix")?;
        let l2 = linear_gain(red, alpha, pi);
        let mpi = &einv * (&red.a + &red.b * &l2);
        Ok(Discrete {
            red,
            alpha,
            bhat: &einv * &red.b,
            mpi,
            einv,
            l2,
            x: red.e.transpose() * pi * &red.e,
            q: red.theta_r.transpose() * &red.theta_r,
        })
    }

    fn quad(&self, y: &Vector) -> Vector {
        &self.einv * self.red.h.eval_quadratic(y.as_slice()).expect("state has the reduced dimension")
    }

    fn rhs(&self, y: &Vector, v: &Vector) -> Vector {
        &self.mpi * y + self.quad(y) + &self.bhat * v
    }

    fn jac_t_apply(&self, y: &Vector, w: &Vector) -> Vector {
        // (M_π + Ẽ^{-1} 2H̃(y, ·))^T w
        let n = y.len();
        let ew = self.einv.transpose() * w;
        let mut out = self.mpi.transpose() * w;
        let mut ej = vec![0.0; n];
        for j in 0..n {
            ej[j] = 1.0;
            let col = self.red.h.eval_linearized(y.as_slice(), &ej).expect("state has the reduced dimension");
            out[j] += col.dot(&ew);
            ej[j] = 0.0;
        }
        out
    }

    fn ell(&self, y: &Vector, v: &Vector) -> f64 {
        let u = &self.l2 * y + v;
        0.5 * y.dot(&(&self.q * y)) + 0.5 * self.alpha * u.norm_squared()
    }

    fn ell_grad(&self, y: &Vector, v: &Vector) -> (Vector, Vector) {
        let u = &self.l2 * y + v;
        let gu = &u * self.alpha;
        (&self.q * y + self.l2.transpose() * &gu, gu)
    }

    /// RK4 forward pass; returns node states and the total cost.
    fn forward(&self, y0: &Vector, v: &[Vector], h: f64) -> (Vec<Vector>, f64) {
        let mut ys = Vec::with_capacity(v.len());
        ys.push(y0.clone());
        let mut cost = 0.0;
        for i in 0..v.len() - 1 {
            let y = &ys[i];
            let vm = (&v[i] + &v[i + 1]) * 0.5;
            let k1 = self.rhs(y, &v[i]);
            let y2 = y + &k1 * (0.5 * h);
            let k2 = self.rhs(&y2, &vm);
            let y3 = y + &k2 * (0.5 * h);
            let k3 = self.rhs(&y3, &vm);
            let y4 = y + &k3 * h;
            let k4 = self.rhs(&y4, &v[i + 1]);
            cost += h / 6.0
                * (self.ell(y, &v[i]) + 2.0 * self.ell(&y2, &vm) + 2.0 * self.ell(&y3, &vm) + self.ell(&y4, &v[i + 1]));
            ys.push(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
        }
        let yt = ys.last().unwrap();
        cost += 0.5 * yt.dot(&(&self.x * yt));
        (ys, cost)
    }

    /// Cost and its gradient with respect to the nodal values of `v`.
    fn cost_and_grad(&self, y0: &Vector, v: &[Vector], h: f64) -> (f64, Vec<Vector>, Vec<Vector>) {
        let (ys, cost) = self.forward(y0, v, h);
        let m = v[0].len();
        let mut gv = vec![Vector::zeros(m); v.len()];
        let mut lam = &self.x * ys.last().unwrap();
        let b = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
        for i in (0..v.len() - 1).rev() {
            let y = &ys[i];
            let vm = (&v[i] + &v[i + 1]) * 0.5;
            let k1 = self.rhs(y, &v[i]);
            let y2 = y + &k1 * (0.5 * h);
            let k2 = self.rhs(&y2, &vm);
            let y3 = y + &k2 * (0.5 * h);
            let k3 = self.rhs(&y3, &vm);
            let y4 = y + &k3 * h;

            let kb4 = &lam * (h * b[3]);
            let (ly4, lv4) = self.ell_grad(&y4, &v[i + 1]);
            let yb4 = self.jac_t_apply(&y4, &kb4) + ly4 * (h * b[3]);
            let vb4 = self.bhat.transpose() * &kb4 + lv4 * (h * b[3]);

            let kb3 = &lam * (h * b[2]) + &yb4 * h;
            let (ly3, lv3) = self.ell_grad(&y3, &vm);
            let yb3 = self.jac_t_apply(&y3, &kb3) + ly3 * (h * b[2]);
            let vb3 = self.bhat.transpose() * &kb3 + lv3 * (h * b[2]);

            let kb2 = &lam * (h * b[1]) + &yb3 * (0.5 * h);
            let (ly2, lv2) = self.ell_grad(&y2, &vm);
            let yb2 = self.jac_t_apply(&y2, &kb2) + ly2 * (h * b[1]);
            let vb2 = self.bhat.transpose() * &kb2 + lv2 * (h * b[1]);

            let kb1 = &lam * (h * b[0]) + &yb2 * (0.5 * h);
            let (ly1, lv1) = self.ell_grad(y, &v[i]);
            let yb1 = self.jac_t_apply(y, &kb1) + ly1 * (h * b[0]);
            let vb1 = self.bhat.transpose() * &kb1 + lv1 * (h * b[0]);

            let mid = (&vb2 + &vb3) * 0.5;
            gv[i] += &vb1 + &mid;
            gv[i + 1] += &vb4 + &mid;
            lam = &lam + yb1 + yb2 + yb3 + yb4;
        }
        (cost, gv, ys)
    }

    /// RK4 closed loop under a state feedback; returns node states, node
    /// controls and the cost (with terminal term).
    fn closed_loop(&self, g: &GainSet, y0: &Vector, h: f64, steps: usize) -> Result<(Vec<Vector>, Vec<Vector>, f64)> {
        let full = |y: &Vector| -> Result<(Vector, Vector)> {
            let u = g.eval_u(y)?;
            let v = &u - &self.l2 * y;
            Ok((self.rhs(y, &v), v))
        };
        let mut ys = vec![y0.clone()];
        let mut us = Vec::with_capacity(steps + 1);
        let mut cost = 0.0;
        for i in 0..steps {
            let y = ys[i].clone();
            let (k1, v1) = full(&y)?;
            let y2 = &y + &k1 * (0.5 * h);
            let (k2, v2) = full(&y2)?;
            let y3 = &y + &k2 * (0.5 * h);
            let (k3, v3) = full(&y3)?;
            let y4 = &y + &k3 * h;
            let (k4, v4) = full(&y4)?;
            cost += h / 6.0 * (self.ell(&y, &v1) + 2.0 * self.ell(&y2, &v2) + 2.0 * self.ell(&y3, &v3) + self.ell(&y4, &v4));
            us.push(&self.l2 * &y + v1);
            let yn = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if yn.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("closed-loop RK4 state".into()));
            }
            ys.push(yn);
        }
        let yt = ys.last().unwrap();
        us.push(g.eval_u(yt)?);
        cost += 0.5 * yt.dot(&(&self.x * yt));
        Ok((ys, us, cost))
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub times: Vec<f64>,
    pub controls: Vec<Vector>,
    pub states: Vec<Vector>,
    pub j_star: f64,
    /// Cost of the uncorrected `u₂` closed loop on the same grid.
    pub j_u2: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub horizon: f64,
}

/// Starts from `ln(1/HORIZON_DECAY)/λ` (λ the closed-loop decay rate) and
/// doubles until a fine RK4 run of the `u₂` closed loop meets the decay.
fn select_horizon(disc: &Discrete, y0: &Vector, m: usize) -> Result<f64> {
    let y0n = y0.norm();
    if y0n == 0.0 {
        return Ok(1.0);
    }
    let lambda = -linalg::spectral_abscissa(&disc.mpi);
    if !(lambda > 0.0) {
        return Err(Error::Unstabilizable("u₂ closed loop is not stable".into()));
    }
    let mut t = (1.0 / HORIZON_DECAY).ln() / lambda;
    let rho = linalg::eigenvalues(&disc.mpi).iter().map(|z| z.norm()).fold(0.0, f64::max);
    for _ in 0..HORIZON_DOUBLINGS {
        let steps = ((t * rho / 0.5).ceil() as usize).max(200);
        let (ys, _) = disc.forward(y0, &vec![Vector::zeros(m); steps + 1], t / steps as f64);
        let last = ys.last().unwrap().norm();
        if last.is_finite() && last <= HORIZON_DECAY * y0n {
            return Ok(t);
        }
        if !last.is_finite() || last > 1e3 * y0n {
            return Err(Error::NotConverged { what: "oracle horizon selection (u₂ closed loop diverges)".into(), iterations: 0, residual: last });
        }
        t *= 2.0;
    }
    Err(Error::NotConverged { what: "oracle horizon selection".into(), iterations: HORIZON_DOUBLINGS, residual: t })
}

fn trapezoid_weights(k: usize, h: f64) -> Vec<f64> {
    (0..k).map(|i| if i == 0 || i == k - 1 { 0.5 * h } else { h }).collect()
}

/// Direct solution of the finite-horizon truncation of the optimal control
/// problem from `y0`. `tol` is relative to the initial gradient norm.
pub fn ocp_oracle(red: &ReducedSystem, alpha: f64, pi: &Mat, y0: &Vector, horizon: Option<f64>, grid_n: usize, tol: f64) -> Result<OcpSolution> {
    let (n, m) = (red.n(), red.m());
    if n > ORACLE_MAX_N || m > ORACLE_MAX_M || grid_n > ORACLE_MAX_GRID {
        return Err(Error::Guard { what: "OCP oracle size (N, m, grid)".into(), limit: ORACLE_MAX_GRID, got: n.max(m).max(grid_n) });
    }
    if grid_n < 2 || !(tol > 0.0) || !(alpha > 0.0) {
        return Err(Error::Invalid("oracle needs grid_n >= 2, tol > 0 and alpha > 0".into()));
    }
    if y0.len() != n {
        return Err(Error::dim("initial state", n, y0.len()));
    }
    let disc = Discrete::new(red, alpha, pi)?;
    let zero_v = vec![Vector::zeros(m); grid_n + 1];
    let y0n = y0.norm();

    let horizon = match horizon {
        Some(t) => t,
        None => select_horizon(&disc, y0, m)?,
    };
    let h = horizon / grid_n as f64;
    let times: Vec<f64> = (0..=grid_n).map(|i| i as f64 * h).collect();
    let (ys0, j_u2) = disc.forward(y0, &zero_v, h);
    if y0n == 0.0 {
        return Ok(OcpSolution {
            times,
            controls: zero_v,
            states: ys0,
            j_star: 0.0,
            j_u2,
            grad_norm: 0.0,
            iterations: 0,
            horizon,
        });
    }

    // optimize in x = sqrt(w) v so that Euclidean gradients are L² gradients
    let w = trapezoid_weights(grid_n + 1, h);
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let to_v = |x: &[f64]| -> Vec<Vector> {
        (0..=grid_n).map(|i| Vector::from_fn(m, |a, _| x[i * m + a] / sw[i])).collect()
    };
    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let v = to_v(x);
        let (c, gv, _) = disc.cost_and_grad(y0, &v, h);
        let mut g = vec![0.0; x.len()];
        for i in 0..=grid_n {
            for a in 0..m {
                g[i * m + a] = gv[i][a] / sw[i];
            }
        }
        (c, g)
    };
    let floor = 1e-8 * (alpha * j_u2.max(0.0)).sqrt();
    let (x, f, gnorm, iterations) = lbfgs(eval, vec![0.0; (grid_n + 1) * m], tol, floor)?;
    let v = to_v(&x);
    let (ys, _) = disc.forward(y0, &v, h);
    let controls = ys.iter().zip(&v).map(|(y, vi)| &disc.l2 * y + vi).collect();
    Ok(OcpSolution { times, controls, states: ys, j_star: f, j_u2, grad_norm: gnorm, iterations, horizon })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS with Armijo backtracking; stops when `‖g‖ ≤ max(tol ‖g₀‖, floor)`.
/// A failed line search, or a stall (cost change at rounding level over
/// `STALL_WINDOW` iterations), is accepted as convergence when `‖g‖` is
/// within a factor 100 of the rounding floor `floor`.
fn lbfgs<F: Fn(&[f64]) -> (f64, Vec<f64>)>(eval: F, mut x: Vec<f64>, tol: f64, floor: f64) -> Result<(Vec<f64>, f64, f64, usize)> {
    let (mut f, mut g) = eval(&x);
    let g0 = dot(&g, &g).sqrt();
    let target = (tol * g0).max(floor);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut recent: VecDeque<f64> = VecDeque::new();
    for it in 0..LBFGS_MAX_ITER {
        let gn = dot(&g, &g).sqrt();
        if gn <= target || gn == 0.0 {
            return Ok((x, f, gn, it));
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
        }
        let mut step = if hist.is_empty() { 1.0 / gn.max(1e-300) * (f.abs().max(1e-300)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (fnew, gnew) = eval(&xn);
            if fnew.is_finite() && fnew <= f + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if gn <= 100.0 * floor {
                return Ok((x, f, gn, it));
            }
            return Err(Error::Stagnation { grad: gn, tol: target });
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if hist.len() == LBFGS_MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        recent.push_back(f - fnew);
        if recent.len() > STALL_WINDOW {
            recent.pop_front();
        }
        x = xn;
        f = fnew;
        g = gnew;
        let gain: f64 = recent.iter().sum();
        if recent.len() == STALL_WINDOW && gain <= 64.0 * f64::EPSILON * f.abs() {
            let gn = dot(&g, &g).sqrt();
            if gn <= 100.0 * floor {
                return Ok((x, f, gn, it + 1));
            }
            return Err(Error::Stagnation { grad: gn, tol: target });
        }
    }
    Err(Error::NotConverged { what: "L-BFGS".into(), iterations: LBFGS_MAX_ITER, residual: dot(&g, &g).sqrt() })
}

/// Difference between the oracle control and a feedback closed loop on the
/// oracle grid: `(‖·‖_{L²}, ‖·‖_{L∞}, J_d)`.
pub fn feedback_gap(red: &ReducedSystem, g: &GainSet, sol: &OcpSolution) -> Result<(f64, f64, f64)> {
    let disc = Discrete::new(red, g.alpha, &g.pi)?;
    let steps = sol.times.len() - 1;
    let h = sol.horizon / steps as f64;
    let (_, us, cost) = disc.closed_loop(g, &sol.states[0], h, steps)?;
    let w = trapezoid_weights(steps + 1, h);
    let mut l2 = 0.0;
    let mut linf: f64 = 0.0;
    for ((a, b), wi) in sol.controls.iter().zip(&us).zip(&w) {
        let d = (a - b).norm();
        l2 += wi * d * d;
        linf = linf.max(d);
    }
    Ok((l2.sqrt(), linf, cost))
}

/// Settings for [`rate_check`].
#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub grid_n: usize,
    pub tol: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { grid_n: 2000, tol: 1e-8 }
    }
}

/// For each available degree, the largest `‖u* - u_d‖_{L²}` over the
/// directions at every scale and the fitted log-log slope.
pub fn rate_check(red: &ReducedSystem, gains: &GainSet, directions: &[Vector], scales: &[f64], opts: OracleOptions) -> Result<Vec<RateReport>> {
    if scales.len() < 2 || directions.is_empty() {
        return Err(Error::Invalid("rate check needs two scales and one direction".into()));
    }
    let cases: Vec<(usize, usize)> = (0..scales.len()).flat_map(|i| (0..directions.len()).map(move |j| (i, j))).collect();
    let sols: Vec<Result<OcpSolution>> = cases
        .par_iter()
        .map(|&(i, j)| ocp_oracle(red, gains.alpha, &gains.pi, &(&directions[j] * scales[i]), None, opts.grid_n, opts.tol))
        .collect();
    let sols = sols.into_iter().collect::<Result<Vec<_>>>()?;
    let mut degrees = vec![2];
    if gains.k3.is_some() {
        degrees.push(3);
    }
    let mut out = Vec::new();
    for d in degrees {
        let gd = gains.with_degree(d)?;
        let mut errors = vec![0.0f64; scales.len()];
        let mut linf = vec![0.0f64; scales.len()];
        for (&(i, _), sol) in cases.iter().zip(&sols) {
            let (e2, ei, _) = feedback_gap(red, &gd, sol)?;
            errors[i] = errors[i].max(e2);
            linf[i] = linf[i].max(ei);
        }
        out.push(RateReport {
            degree: d,
            scales: scales.to_vec(),
            fitted_slope: fit_slope(scales, &errors),
            errors,
            linf_errors: linf,
            target_order: d as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leray::reduce_system;
    use crate::model::{QuadraticSystem, SymQuadTensor};
    use crate::problems::make_random_quad;
    use crate::riccati::solve_are;
    use crate::tensor_lyap::{assemble_f, gain_k3_dense, solve_dense_k3};

    fn gains(red: &ReducedSystem, alpha: f64) -> GainSet {
        let ric = solve_are(red, alpha).unwrap();
        let f = assemble_f(red, &ric.pi).unwrap();
        let x = solve_dense_k3(red, &ric, &f).unwrap();
        let k3 = gain_k3_dense(red, alpha, &x).unwrap();
        GainSet::new(red, &ric, Some(k3), 3).unwrap()
    }

    #[test]
    fn hjb_zero_at_origin_and_exact_for_linear() {
        let red = reduce_system(&make_random_quad(3, 1, 1, false)).unwrap();
        let g = gains(&red, 1.0);
        assert_eq!(hjb_residual(&red, &g, &Vector::zeros(3)).unwrap(), 0.0);
        let lin = red.linearized();
        let ric = solve_are(&lin, 1.0).unwrap();
        let g2 = GainSet::new(&lin, &ric, None, 2).unwrap();
        for k in 0..5 {
            let y = Vector::from_fn(3, |i, _| ((i + 3 * k) as f64).sin());
            let r = hjb_residual(&lin, &g2, &y).unwrap();
            assert!(r.abs() <= 1e-10 * y.norm_squared(), "{r}");
        }
    }

    #[test]
    fn hjb_orders_on_random_system() {
        let red = reduce_system(&make_random_quad(4, 2, 2, false)).unwrap();
        let g = gains(&red, 1.0);
        let y0 = Vector::from_fn(4, |i, _| 1.0 - 0.4 * i as f64);
        let scales = [1e-1, 1e-2, 1e-3];
        let r2 = hjb_scaling(&red, &g.with_degree(2).unwrap(), &y0, &scales).unwrap();
        let r3 = hjb_scaling(&red, &g, &y0, &scales).unwrap();
        assert!(r2.fitted_slope >= 2.8, "{r2:?}");
        assert!(r3.fitted_slope >= 3.8, "{r3:?}");
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let red = reduce_system(&make_random_quad(3, 2, 3, false)).unwrap();
        let ric = solve_are(&red, 0.7).unwrap();
        let disc = Discrete::new(&red, 0.7, &ric.pi).unwrap();
        let y0 = Vector::from_vec(vec![0.3, -0.2, 0.5]);
        let steps = 20;
        let h = 0.1;
        let v: Vec<Vector> = (0..=steps).map(|i| Vector::from_fn(2, |a, _| ((i * 2 + a) as f64 * 0.37).sin() * 0.1)).collect();
        let (_, gv, _) = disc.cost_and_grad(&y0, &v, h);
        let eps = 1e-6;
        for (i, a) in [(0usize, 0usize), (5, 1), (steps, 0), (11, 1)] {
            let mut vp = v.clone();
            vp[i][a] += eps;
            let mut vm = v.clone();
            vm[i][a] -= eps;
            let fd = (disc.forward(&y0, &vp, h).1 - disc.forward(&y0, &vm, h).1) / (2.0 * eps);
            assert!((fd - gv[i][a]).abs() <= 1e-6 * fd.abs().max(1e-8), "node {i},{a}: fd {fd} adjoint {}", gv[i][a]);
        }
    }

    #[test]
    fn oracle_zero_state() {
        let red = reduce_system(&make_random_quad(2, 1, 4, false)).unwrap();
        let ric = solve_are(&red, 1.0).unwrap();
        let sol = ocp_oracle(&red, 1.0, &ric.pi, &Vector::zeros(2), None, 200, 1e-8).unwrap();
        assert_eq!(sol.j_star, 0.0);
        assert!(sol.controls.iter().all(|u| u.norm() == 0.0));
    }

    #[test]
    fn oracle_reproduces_lqr_on_linear_system() {
        let m = |r: usize, c: usize, v: &[f64]| Mat::from_row_slice(r, c, v);
        let sys = QuadraticSystem::new(
            Mat::identity(2, 2),
            m(2, 2, &[0.3, 1.0, -0.5, -0.2]),
            SymQuadTensor::zero(2),
            m(2, 1, &[0.0, 1.0]),
            Mat::identity(2, 2),
        )
        .unwrap();
        let red = reduce_system(&sys).unwrap();
        let ric = solve_are(&red, 1.0).unwrap();
        let y0 = Vector::from_vec(vec![1.0, -0.5]);
        let sol = ocp_oracle(&red, 1.0, &ric.pi, &y0, None, 1000, 1e-8).unwrap();
        let l2 = linear_gain(&red, 1.0, &ric.pi);
        let w = trapezoid_weights(sol.times.len(), sol.horizon / (sol.times.len() - 1) as f64);
        let (mut num, mut den) = (0.0, 0.0);
        for ((u, y), wi) in sol.controls.iter().zip(&sol.states).zip(&w) {
            num += wi * (u - &l2 * y).norm_squared();
            den += wi * u.norm_squared();
        }
        assert!((num / den).sqrt() <= 1e-3);
        let v0 = 0.5 * y0.dot(&(&ric.pi * &y0));
        assert!((sol.j_star - v0).abs() <= 1e-4 * v0);
    }

    #[test]
    fn oracle_beats_feedback() {
        let red = reduce_system(&make_random_quad(2, 1, 5, false)).unwrap();
        let g = gains(&red, 1.0);
        let y0 = Vector::from_vec(vec![0.02, -0.01]);
        let sol = ocp_oracle(&red, 1.0, &g.pi, &y0, None, 800, 1e-9).unwrap();
        assert!(sol.grad_norm.is_finite());
        let (_, _, j2) = feedback_gap(&red, &g.with_degree(2).unwrap(), &sol).unwrap();
        let (_, _, j3) = feedback_gap(&red, &g, &sol).unwrap();
        assert!(sol.j_star <= j2 * (1.0 + 1e-10), "{} vs {j2}", sol.j_star);
        assert!(sol.j_star <= j3 * (1.0 + 1e-10), "{} vs {j3}", sol.j_star);
        assert!(sol.j_star <= sol.j_u2);
    }

    #[test]
    fn oracle_guard() {
        let red = reduce_system(&make_random_quad(5, 2, 6, true)).unwrap();
        let ric = solve_are(&red, 1.0).unwrap();
        assert!(matches!(
            ocp_oracle(&red, 1.0, &ric.pi, &Vector::zeros(5), None, 100, 1e-6),
            Err(Error::Guard { .. })
        ));
    }

    #[test]
    fn slope_fit() {
        let s = [1.0, 0.1, 0.01];
        let e: Vec<f64> = s.iter().map(|x: &f64| 3.0 * x.powi(3)).collect();
        assert!((fit_slope(&s, &e) - 3.0).abs() < 1e-12);
    }
}
