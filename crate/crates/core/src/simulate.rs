//! Closed-loop simulation and cost.
//!
//! Bogacki–Shampine 2(3) pair with FSAL:
//!
//! ```text
//! k1 = f(y)
//! k2 = f(y + h/2 k1)
//! k3 = f(y + 3h/4 k2)
//! y⁺ = y + h (2/9 k1 + 1/3 k2 + 4/9 k3)
//! k4 = f(y⁺)
//! err = h (-5/72 k1 + 1/12 k2 + 1/9 k3 - 1/8 k4)
//! ```
//!
//! `f(y) = Ẽ^{-1}(Ãy + H̃(y⊗y) + B̃ u_d(y))` with `Ẽ` factored once. The
//! error norm is the RMS of `err_i / (atol + rtol·max(|y_i|, |y⁺_i|))`.
//! Steps are capped at a fixed fraction of the horizon. The uniform output
//! grid is filled by cubic Hermite interpolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedback::GainSet;
use crate::leray::ReducedSystem;
use crate::linalg::{self, Vector};

pub const DEFAULT_RTOL: f64 = 1e-3;
pub const DEFAULT_ATOL: f64 = 1e-8;
pub const DEFAULT_OUTPUT_POINTS: usize = 2001;
/// Default step cap as a fraction of the horizon.
pub const DEFAULT_MAX_STEP_FRACTION: f64 = 1.0 / 50.0;
/// Default perturbation ratio `‖z̄‖/2000`.
pub const DEFAULT_PERTURBATION_RATIO: f64 = 1.0 / 2000.0;
const MAX_STEPS: usize = 2_000_000;
const BLOWUP_FACTOR: f64 = 1e8;

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    pub output_points: usize,
    /// Largest step as a fraction of the horizon.
    pub max_step_fraction: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { rtol: DEFAULT_RTOL, atol: DEFAULT_ATOL, output_points: DEFAULT_OUTPUT_POINTS, max_step_fraction: DEFAULT_MAX_STEP_FRACTION }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CostSummary {
    pub j_running: f64,
    pub j_tail: f64,
    pub j_total: f64,
    pub tail_fraction: f64,
    /// Fitted decay rate of `‖y‖` on the last tenth of the horizon.
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Accepted step times.
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    /// Uniform output grid on `[0, T]`.
    pub grid_times: Vec<f64>,
    pub grid_states: Vec<Vector>,
    pub grid_controls: Vec<Vector>,
    /// Simpson integrals of `½‖C̃y‖²` and `½‖u‖²` over each accepted step,
    /// midpoint from the cubic Hermite interpolant.
    pub step_integrals: Vec<(f64, f64)>,
    pub cost: CostSummary,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn j_running(&self) -> f64 {
        self.cost.j_running
    }

    pub fn j_tail(&self) -> f64 {
        self.cost.j_tail
    }

    pub fn j_total(&self) -> f64 {
        self.cost.j_total
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// `‖y(T)‖ / ‖y(0)‖` (zero for a zero initial state).
    pub fn decay_ratio(&self) -> f64 {
        let n0 = self.states[0].norm();
        if n0 == 0.0 {
            0.0
        } else {
            self.final_state().norm() / n0
        }
    }
}

fn rms(err: &Vector, y: &Vector, yn: &Vector, rtol: f64, atol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = (0..err.len())
        .map(|i| {
            let sc = atol + rtol * y[i].abs().max(yn[i].abs());
            (err[i] / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

/// Integrates `Ẽẏ = Ãy + H̃(y⊗y) + B̃u_d(y)` on `[0, T]`.
pub fn integrate_closed_loop(red: &ReducedSystem, g: &GainSet, y0: &Vector, t_end: f64, opts: SimOptions) -> Result<Trajectory> {
    let n = red.n();
    if y0.len() != n {
        return Err(Error::dim("initial state", n, y0.len()));
    }
    if !(t_end > 0.0) {
        return Err(Error::Invalid(format!("horizon must be positive (got {t_end})")));
    }
    if !(opts.rtol > 0.0) || !(opts.atol > 0.0) || opts.output_points < 2 || !(opts.max_step_fraction > 0.0) {
        return Err(Error::Invalid("tolerances must be positive and the output grid needs two points".into()));
    }
    let e_lu = linalg::lu(&red.e, "reduced mass matrix")?;
    let f = |y: &Vector| -> Result<(Vector, Vector)> {
        let u = g.eval_u(y)?;
        let r = red.rhs(y, &u)?;
        let d = e_lu
            .solve(&r)
            .ok_or_else(|| Error::Singular { what: "reduced mass matrix".into(), cond: f64::INFINITY })?;
        Ok((d, u))
    };

    let grid_times: Vec<f64> = (0..opts.output_points)
        .map(|i| t_end * i as f64 / (opts.output_points - 1) as f64)
        .collect();
    let mut grid_states = Vec::with_capacity(opts.output_points);
    let mut grid_controls = Vec::with_capacity(opts.output_points);

    let mut t = 0.0;
    let mut y = y0.clone();
    let (mut k1, mut u) = f(&y)?;
    let mut times = vec![0.0];
    let mut states = vec![y.clone()];
    let mut controls = vec![u.clone()];
    grid_states.push(y.clone());
    grid_controls.push(u.clone());
    let mut next_grid = 1;
    let mut step_integrals = Vec::new();
    let y0n = y0.norm();
    if y0n == 0.0 {
        for _ in 1..opts.output_points {
            grid_states.push(y.clone());
            grid_controls.push(u.clone());
        }
        times.push(t_end);
        states.push(y.clone());
        controls.push(u.clone());
        step_integrals.push((0.0, 0.0));
        let mut traj = Trajectory {
            times,
            states,
            controls,
            grid_times,
            grid_states,
            grid_controls,
            step_integrals,
            cost: CostSummary { j_running: 0.0, j_tail: 0.0, j_total: 0.0, tail_fraction: 0.0, sigma: 0.0, diagnostic: None },
            rejected_steps: 0,
        };
        traj.cost = cost_j(&traj, g.alpha, red)?;
        return Ok(traj);
    }

    // initial step from the scaled derivative
    let sc0 = rms(&k1, &y, &y, opts.rtol, opts.atol).max(1e-10);
    let h_max = opts.max_step_fraction * t_end;
    let mut h = (0.01 * rms(&y, &y, &y, opts.rtol, opts.atol).max(1e-5) / sc0).min(h_max);
    let mut rejected = 0;
    let mut steps = 0;
    let blowup = BLOWUP_FACTOR * (y0n + 1.0);

    while t < t_end {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::NotConverged { what: "closed-loop integration".into(), iterations: MAX_STEPS, residual: y.norm() });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        if h <= 1e-13 * t.abs().max(1.0) {
            return Err(Error::StepUnderflow { t, norm: y.norm() });
        }
        let (k2, _) = f(&(&y + &k1 * (0.5 * h)))?;
        let (k3, _) = f(&(&y + &k2 * (0.75 * h)))?;
        let yn = &y + (&k1 * (2.0 / 9.0) + &k2 * (1.0 / 3.0) + &k3 * (4.0 / 9.0)) * h;
        if yn.iter().any(|v| !v.is_finite()) {
            h *= 0.25;
            rejected += 1;
            continue;
        }
        let (k4, un) = f(&yn)?;
        let err = (&k1 * (-5.0 / 72.0) + &k2 * (1.0 / 12.0) + &k3 * (1.0 / 9.0) + &k4 * (-1.0 / 8.0)) * h;
        let en = rms(&err, &y, &yn, opts.rtol, opts.atol);
        if en <= 1.0 {
            let tn = if last { t_end } else { t + h };
            let ym = (&y + &yn) * 0.5 + (&k1 - &k4) * (h / 8.0);
            let um = g.eval_u(&ym)?;
            let q = |z: &Vector| 0.5 * (&red.c * z).norm_squared();
            step_integrals.push((
                h / 6.0 * (q(&y) + 4.0 * q(&ym) + q(&yn)),
                h / 6.0 * 0.5 * (u.norm_squared() + 4.0 * um.norm_squared() + un.norm_squared()),
            ));
            while next_grid < grid_times.len() && grid_times[next_grid] <= tn {
                let s = (grid_times[next_grid] - t) / h;
                let (h00, h10, h01, h11) = (
                    (1.0 + 2.0 * s) * (1.0 - s).powi(2),
                    s * (1.0 - s).powi(2),
                    s * s * (3.0 - 2.0 * s),
                    s * s * (s - 1.0),
                );
                let yi = &y * h00 + &k1 * (h10 * h) + &yn * h01 + &k4 * (h11 * h);
                let ui = g.eval_u(&yi)?;
                grid_states.push(yi);
                grid_controls.push(ui);
                next_grid += 1;
            }
            t = tn;
            y = yn;
            k1 = k4;
            u = un;
            times.push(t);
            states.push(y.clone());
            controls.push(u.clone());
            if y.norm() > blowup {
                return Err(Error::StepUnderflow { t, norm: y.norm() });
            }
        } else {
            rejected += 1;
        }
        let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-1.0 / 3.0)).clamp(0.2, 5.0) };
        h = (h * fac).min(h_max);
    }
    while grid_states.len() < grid_times.len() {
        grid_states.push(y.clone());
        grid_controls.push(u.clone());
    }
    let mut traj = Trajectory {
        times,
        states,
        controls,
        grid_times,
        grid_states,
        grid_controls,
        step_integrals,
        cost: CostSummary { j_running: 0.0, j_tail: 0.0, j_total: 0.0, tail_fraction: 0.0, sigma: 0.0, diagnostic: None },
        rejected_steps: rejected,
    };
    traj.cost = cost_j(&traj, g.alpha, red)?;
    Ok(traj)
}

/// Running cost `½‖C̃ y‖² + (α/2)‖u‖²`.
pub fn running_cost(red: &ReducedSystem, alpha: f64, y: &Vector, u: &Vector) -> f64 {
    0.5 * (&red.c * y).norm_squared() + 0.5 * alpha * u.norm_squared()
}

/// Simpson rule over the accepted steps plus an exponential tail
/// `ℓ(T)/(2σ)` with `σ` fitted to `ln ‖y‖²` on the last tenth of the horizon.
pub fn cost_j(traj: &Trajectory, alpha: f64, red: &ReducedSystem) -> Result<CostSummary> {
    let ts = &traj.grid_times;
    if ts.is_empty() || traj.grid_states.len() != ts.len() || traj.grid_controls.len() != ts.len() {
        return Err(Error::Invalid("trajectory output grid is empty or inconsistent".into()));
    }
    let j_running: f64 = traj.step_integrals.iter().map(|(q, c)| q + alpha * c).sum();
    let t_end = *ts.last().unwrap();
    let l_end = running_cost(red, alpha, traj.grid_states.last().unwrap(), traj.grid_controls.last().unwrap());
    let mut diagnostic = None;
    let (j_tail, sigma) = if l_end == 0.0 {
        (0.0, 0.0)
    } else {
        let pts: Vec<(f64, f64)> = ts
            .iter()
            .zip(&traj.grid_states)
            .filter(|(t, y)| **t >= 0.9 * t_end && y.norm() > 0.0)
            .map(|(t, y)| (*t, y.norm_squared().ln()))
            .collect();
        if pts.len() < 2 {
            diagnostic = Some("too few points to fit the tail".to_string());
            (f64::INFINITY, f64::NAN)
        } else {
            let k = pts.len() as f64;
            let (mt, ml) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (t, l) in &pts {
                sxy += (t - mt) * (l - ml);
                sxx += (t - mt) * (t - mt);
            }
            let sigma = -0.5 * sxy / sxx;
            if sigma > 0.0 {
                (l_end / (2.0 * sigma), sigma)
            } else {
                diagnostic = Some(format!("tail does not decay (fitted rate {sigma:e})"));
                (f64::INFINITY, sigma)
            }
        }
    };
    let j_total = j_running + j_tail;
    let tail_fraction = if j_total > 0.0 { j_tail / j_total } else { 0.0 };
    Ok(CostSummary { j_running, j_tail, j_total, tail_fraction, sigma, diagnostic })
}

/// `ratio · s · ξ` with `ξ` standard normal from `seed` and `s = ‖z̄‖`
/// (`s = 1` when `z̄ = 0`).
pub fn make_perturbation(zbar: &Vector, ratio: f64, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = zbar.norm();
    let s = if s > 0.0 { s } else { 1.0 };
    Vector::from_fn(zbar.len(), |_, _| {
        let x: f64 = StandardNormal.sample(&mut rng);
        ratio * s * x
    })
}

/// Projected, reduced initial state from a full-space perturbation.
pub fn initial_state(red: &ReducedSystem, perturbation: &Vector) -> Result<Vector> {
    if perturbation.len() != red.theta_r.nrows() {
        return Err(Error::dim("perturbation", red.theta_r.nrows(), perturbation.len()));
    }
    Ok(red.restrict(&red.project(perturbation)))
}
