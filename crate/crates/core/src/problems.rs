//! Built-in desk-scale test systems and the steady-state solver.
//!
//! * `burgers1d`: viscous Burgers on (0, 1) with homogeneous Dirichlet data,
//!   central differences and an energy-conserving split of the convection.
//! * `oseen_mac`: 2-D Navier-Stokes on the unit square, staggered (MAC) grid,
//!   no-slip walls, linearized around a prescribed divergence-free base flow.
//! * `random_quad`: seeded random systems for property tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{QuadraticSystem, SymQuadTensor};

/// Base flow for the Oseen problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaseFlow {
    Zero,
    /// Velocity from the discrete curl of `amplitude * sin²(πx) sin²(πy)`.
    Streamfunction { amplitude: f64 },
    /// Explicit velocity vector (u-faces first, then v-faces).
    Explicit { values: Vec<f64> },
}

fn default_base_flow() -> BaseFlow {
    BaseFlow::Zero
}

fn default_m() -> usize {
    1
}

/// Problem selection as it appears in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Burgers1d {
        n: usize,
        nu: f64,
        #[serde(default)]
        shift: f64,
        control_intervals: Vec<[f64; 2]>,
        /// Amplitude of the forcing `sin(πx)`; zero gives the trivial steady state.
        #[serde(default)]
        forcing: f64,
    },
    OseenMac {
        nx: usize,
        ny: usize,
        nu: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default = "default_base_flow")]
        base_flow: BaseFlow,
        /// `[x0, x1, y0, y1]`
        control_region: [f64; 4],
        #[serde(default = "default_m")]
        m: usize,
    },
    RandomQuad {
        n: usize,
        m: usize,
        seed: u64,
        stable: bool,
    },
    External {
        path: String,
    },
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProblemSpec::Burgers1d { n, nu, .. } => {
                if *n < 4 {
                    return Err(Error::Invalid(format!("burgers grid size {n} < 4")));
                }
                if !(*nu > 0.0) {
                    return Err(Error::Invalid("viscosity must be positive".into()));
                }
            }
            ProblemSpec::OseenMac { nx, ny, nu, m, .. } => {
                if *nx < 3 || *ny < 3 {
                    return Err(Error::Invalid(format!("MAC grid {nx}x{ny} smaller than 3x3")));
                }
                if !(*nu > 0.0) {
                    return Err(Error::Invalid("viscosity must be positive".into()));
                }
                if *m < 1 {
                    return Err(Error::Invalid("need at least one control shape".into()));
                }
            }
            ProblemSpec::RandomQuad { n, .. } => {
                if *n < 1 {
                    return Err(Error::Invalid("random system needs n >= 1".into()));
                }
            }
            ProblemSpec::External { .. } => {}
        }
        Ok(())
    }

    /// Builds the (unshifted) system.
    pub fn build(&self) -> Result<QuadraticSystem> {
        self.validate()?;
        match self {
            ProblemSpec::Burgers1d { n, nu, shift, control_intervals, forcing } => {
                let mut sys = make_burgers(*n, *nu, *shift, control_intervals)?;
                if *forcing != 0.0 {
                    let h = 1.0 / (*n as f64 + 1.0);
                    let f = Vector::from_fn(*n, |i, _| {
                        forcing * (std::f64::consts::PI * (i as f64 + 1.0) * h).sin()
                    });
                    sys.f_z = Some(f);
                }
                Ok(sys)
            }
            ProblemSpec::OseenMac { nx, ny, nu, shift, base_flow, control_region, m } => {
                make_oseen_mac(*nx, *ny, *nu, *shift, base_flow, *control_region, *m)
            }
            ProblemSpec::RandomQuad { n, m, seed, stable } => Ok(make_random_quad(*n, *m, *seed, *stable)),
            ProblemSpec::External { path } => crate::io::load_system(std::path::Path::new(path)),
        }
    }
}

fn burgers_raw_convection(n: usize, h: f64) -> Vec<(usize, usize, usize, f64)> {
    // c(w, v)_i = -(1/3) [ w_i (D v)_i + (D (w v))_i ],  D = central difference
    let s = 1.0 / (6.0 * h);
    let mut raw = Vec::with_capacity(4 * n);
    for i in 0..n {
        if i + 1 < n {
            raw.push((i, i, i + 1, -s));
            raw.push((i, i + 1, i + 1, -s));
        }
        if i >= 1 {
            raw.push((i, i, i - 1, s));
            raw.push((i, i - 1, i - 1, s));
        }
    }
    raw
}

/// Viscous Burgers surrogate with `n` interior nodes on (0, 1).
///
/// `A = nu * Δ_h + c I`, `E = I`, `C = sqrt(h) I`, and the columns of `B` are
/// indicator functions of `control_intervals`.
pub fn make_burgers(n: usize, nu: f64, c: f64, control_intervals: &[[f64; 2]]) -> Result<QuadraticSystem> {
    if n < 4 {
        return Err(Error::Invalid(format!("burgers grid size {n} < 4")));
    }
    let h = 1.0 / (n as f64 + 1.0);
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = -2.0 * nu / (h * h) + c;
        if i + 1 < n {
            a[(i, i + 1)] = nu / (h * h);
            a[(i + 1, i)] = nu / (h * h);
        }
    }
    let hq = SymQuadTensor::symmetrize(&burgers_raw_convection(n, h), n)?;
    let mut b = Mat::zeros(n, control_intervals.len());
    for (col, &[lo, hi]) in control_intervals.iter().enumerate() {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::Invalid(format!("control interval [{lo}, {hi}] outside (0, 1)")));
        }
        let mut hit = false;
        for i in 0..n {
            let x = (i as f64 + 1.0) * h;
            if x >= lo && x <= hi {
                b[(i, col)] = 1.0;
                hit = true;
            }
        }
        if !hit {
            return Err(Error::Invalid(format!("control interval [{lo}, {hi}] contains no grid node")));
        }
    }
    let cmat = Mat::identity(n, n) * h.sqrt();
    QuadraticSystem::new(Mat::identity(n, n), a, hq, b, cmat)
}

struct Mac {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
}

impl Mac {
    fn n_u(&self) -> usize {
        (self.nx - 1) * self.ny
    }
    fn n(&self) -> usize {
        self.n_u() + self.nx * (self.ny - 1)
    }
    /// u-face at x = i hx (1 <= i <= nx-1), cell row j.
    fn iu(&self, i: isize, j: isize) -> Option<usize> {
        if i >= 1 && i < self.nx as isize && j >= 0 && j < self.ny as isize {
            Some((i as usize - 1) + (self.nx - 1) * j as usize)
        } else {
            None
        }
    }
    /// v-face at y = j hy (1 <= j <= ny-1), cell column i.
    fn iv(&self, i: isize, j: isize) -> Option<usize> {
        if i >= 0 && i < self.nx as isize && j >= 1 && j < self.ny as isize {
            Some(self.n_u() + i as usize + self.nx * (j as usize - 1))
        } else {
            None
        }
    }
    fn u_pos(&self, k: usize) -> (f64, f64) {
        let i = k % (self.nx - 1) + 1;
        let j = k / (self.nx - 1);
        (i as f64 * self.hx, (j as f64 + 0.5) * self.hy)
    }
    fn v_pos(&self, k: usize) -> (f64, f64) {
        let k = k - self.n_u();
        let i = k % self.nx;
        let j = k / self.nx + 1;
        ((i as f64 + 0.5) * self.hx, j as f64 * self.hy)
    }

    fn laplacian(&self) -> Mat {
        let n = self.n();
        let mut l = Mat::zeros(n, n);
        let (cx, cy) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        for j in 0..self.ny as isize {
            for i in 1..self.nx as isize {
                let r = self.iu(i, j).unwrap();
                l[(r, r)] -= 2.0 * (cx + cy);
                for (di, dj, w) in [(-1, 0, cx), (1, 0, cx), (0, -1, cy), (0, 1, cy)] {
                    match self.iu(i + di, j + dj) {
                        Some(c) => l[(r, c)] += w,
                        // tangential wall: ghost value mirrors with opposite sign
                        None if dj != 0 => l[(r, r)] -= w,
                        None => {}
                    }
                }
            }
        }
        for j in 1..self.ny as isize {
            for i in 0..self.nx as isize {
                let r = self.iv(i, j).unwrap();
                l[(r, r)] -= 2.0 * (cx + cy);
                for (di, dj, w) in [(-1, 0, cx), (1, 0, cx), (0, -1, cy), (0, 1, cy)] {
                    match self.iv(i + di, j + dj) {
                        Some(c) => l[(r, c)] += w,
                        None if di != 0 => l[(r, r)] -= w,
                        None => {}
                    }
                }
            }
        }
        l
    }

    /// Discrete divergence, one row per cell.
    fn divergence(&self) -> Mat {
        let mut d = Mat::zeros(self.nx * self.ny, self.n());
        for cj in 0..self.ny as isize {
            for ci in 0..self.nx as isize {
                let row = ci as usize + self.nx * cj as usize;
                if let Some(c) = self.iu(ci + 1, cj) {
                    d[(row, c)] += 1.0 / self.hx;
                }
                if let Some(c) = self.iu(ci, cj) {
                    d[(row, c)] -= 1.0 / self.hx;
                }
                if let Some(c) = self.iv(ci, cj + 1) {
                    d[(row, c)] += 1.0 / self.hy;
                }
                if let Some(c) = self.iv(ci, cj) {
                    d[(row, c)] -= 1.0 / self.hy;
                }
            }
        }
        d
    }

    /// Raw coordinates of the advective form `c(w, v) = -(w·∇) v`.
    fn convection(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut raw = Vec::new();
        let (ax, ay) = (1.0 / (2.0 * self.hx), 1.0 / (2.0 * self.hy));
        for j in 0..self.ny as isize {
            for i in 1..self.nx as isize {
                let r = self.iu(i, j).unwrap();
                // U du/dx
                if let Some(c) = self.iu(i + 1, j) {
                    raw.push((r, r, c, -ax));
                }
                if let Some(c) = self.iu(i - 1, j) {
                    raw.push((r, r, c, ax));
                }
                // V du/dy with V averaged from the four surrounding v-faces
                let vs: Vec<usize> = [(i - 1, j), (i, j), (i - 1, j + 1), (i, j + 1)]
                    .iter()
                    .filter_map(|&(a, b)| self.iv(a, b))
                    .collect();
                for &vw in &vs {
                    match self.iu(i, j + 1) {
                        Some(c) => raw.push((r, vw, c, -0.25 * ay)),
                        None => raw.push((r, vw, r, 0.25 * ay)),
                    }
                    match self.iu(i, j - 1) {
                        Some(c) => raw.push((r, vw, c, 0.25 * ay)),
                        None => raw.push((r, vw, r, -0.25 * ay)),
                    }
                }
            }
        }
        for j in 1..self.ny as isize {
            for i in 0..self.nx as isize {
                let r = self.iv(i, j).unwrap();
                let us: Vec<usize> = [(i, j - 1), (i + 1, j - 1), (i, j), (i + 1, j)]
                    .iter()
                    .filter_map(|&(a, b)| self.iu(a, b))
                    .collect();
                for &uw in &us {
                    match self.iv(i + 1, j) {
                        Some(c) => raw.push((r, uw, c, -0.25 * ax)),
                        None => raw.push((r, uw, r, 0.25 * ax)),
                    }
                    match self.iv(i - 1, j) {
                        Some(c) => raw.push((r, uw, c, 0.25 * ax)),
                        None => raw.push((r, uw, r, -0.25 * ax)),
                    }
                }
                if let Some(c) = self.iv(i, j + 1) {
                    raw.push((r, r, c, -ay));
                }
                if let Some(c) = self.iv(i, j - 1) {
                    raw.push((r, r, c, ay));
                }
            }
        }
        raw
    }

    fn streamfunction_velocity(&self, amplitude: f64) -> Vector {
        let pi = std::f64::consts::PI;
        let psi = |i: usize, j: usize| {
            let (x, y) = (i as f64 * self.hx, j as f64 * self.hy);
            amplitude * (pi * x).sin().powi(2) * (pi * y).sin().powi(2)
        };
        let mut z = Vector::zeros(self.n());
        for j in 0..self.ny {
            for i in 1..self.nx {
                let k = self.iu(i as isize, j as isize).unwrap();
                z[k] = (psi(i, j + 1) - psi(i, j)) / self.hy;
            }
        }
        for j in 1..self.ny {
            for i in 0..self.nx {
                let k = self.iv(i as isize, j as isize).unwrap();
                z[k] = -(psi(i + 1, j) - psi(i, j)) / self.hx;
            }
        }
        z
    }
}

/// Tolerance on the discrete divergence of a prescribed base flow.
pub const BASE_FLOW_DIV_TOL: f64 = 1e-10;

/// Staggered-grid Navier-Stokes surrogate on the unit square.
///
/// Returns the unshifted system `A = nu Δ_h + c I`; with a nonzero base flow
/// the forcing is set so that the base flow is a steady state (zero pressure),
/// and [`QuadraticSystem::shifted`] produces the Oseen linearization.
/// `B` has `2m` columns: `m` shapes acting on v (first), then on u, each
/// piecewise linear in y and constant in x over `control_region`.
pub fn make_oseen_mac(
    nx: usize,
    ny: usize,
    nu: f64,
    c: f64,
    base_flow: &BaseFlow,
    control_region: [f64; 4],
    m: usize,
) -> Result<QuadraticSystem> {
    if nx < 3 || ny < 3 {
        return Err(Error::Invalid(format!("MAC grid {nx}x{ny} smaller than 3x3")));
    }
    if m < 1 {
        return Err(Error::Invalid("need at least one control shape".into()));
    }
    let grid = Mac { nx, ny, hx: 1.0 / nx as f64, hy: 1.0 / ny as f64 };
    let n = grid.n();
    let a = grid.laplacian() * nu + Mat::identity(n, n) * c;
    let div = grid.divergence();
    // drop the last cell pressure to pin the constant mode
    let g = div.rows(0, nx * ny - 1).transpose();
    let hq = SymQuadTensor::symmetrize(&grid.convection(), n)?;

    let [x0, x1, y0, y1] = control_region;
    if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
        return Err(Error::Invalid(format!("control region {control_region:?} outside the unit square")));
    }
    let shape = |l: usize, y: f64| -> f64 {
        if y < y0 || y > y1 {
            return 0.0;
        }
        if m == 1 {
            return 1.0;
        }
        let w = (y1 - y0) / (m - 1) as f64;
        let centre = y0 + l as f64 * w;
        (1.0 - (y - centre).abs() / w).max(0.0)
    };
    let mut b = Mat::zeros(n, 2 * m);
    let (mut hit_u, mut hit_v) = (false, false);
    for k in 0..grid.n_u() {
        let (x, y) = grid.u_pos(k);
        if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
            hit_u = true;
            for l in 0..m {
                b[(k, m + l)] = shape(l, y);
            }
        }
    }
    for k in grid.n_u()..n {
        let (x, y) = grid.v_pos(k);
        if x >= x0 && x <= x1 && y >= y0 && y <= y1 {
            hit_v = true;
            for l in 0..m {
                b[(k, l)] = shape(l, y);
            }
        }
    }
    if !hit_u || !hit_v {
        return Err(Error::Invalid(format!("control region {control_region:?} contains no velocity unknowns")));
    }
    let cmat = Mat::identity(n, n) * (grid.hx * grid.hy).sqrt();

    let zbar = match base_flow {
        BaseFlow::Zero => None,
        BaseFlow::Streamfunction { amplitude } => Some(grid.streamfunction_velocity(*amplitude)),
        BaseFlow::Explicit { values } => {
            if values.len() != n {
                return Err(Error::dim("explicit base flow", n, values.len()));
            }
            Some(Vector::from_column_slice(values))
        }
    };
    let builder = QuadraticSystem::builder(Mat::identity(n, n), a.clone(), hq.clone(), b, cmat).constraint(g.clone());
    match zbar {
        None => builder.build(),
        Some(z) => {
            let div_norm = (g.transpose() * &z).norm();
            if div_norm > BASE_FLOW_DIV_TOL {
                return Err(Error::NotDivergenceFree { norm: div_norm });
            }
            let f = -(&a * &z + hq.eval_quadratic(z.as_slice())?);
            builder.forcing(f, Some(Vector::zeros(g.ncols()))).steady_state(z).build()
        }
    }
}

/// Seeded random system with `E = I`, `C = I` and about `3n` tensor entries.
///
/// With `stable`, `A` is shifted so its spectral abscissa is `-0.5`.
pub fn make_random_quad(n: usize, m: usize, seed: u64, stable: bool) -> QuadraticSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (n as f64).sqrt();
    let mut a = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    if stable {
        let abscissa = linalg::spectral_abscissa(&a);
        a -= Mat::identity(n, n) * (abscissa + 0.5);
    }
    let raw: Vec<_> = (0..3 * n)
        .map(|_| {
            (
                rng.random_range(0..n),
                rng.random_range(0..n),
                rng.random_range(0..n),
                rng.sample::<f64, _>(StandardNormal),
            )
        })
        .collect();
    let h = SymQuadTensor::symmetrize(&raw, n).expect("indices drawn in range");
    let b = Mat::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    QuadraticSystem::new(Mat::identity(n, n), a, h, b, Mat::identity(n, n)).expect("consistent random system")
}

/// Outcome of the steady-state iteration.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub zbar: Vector,
    pub iterations: usize,
    pub residual: f64,
}

/// Picard iteration for the uncontrolled stationary system: each step solves
/// the saddle-point problem with the convection frozen at the previous iterate,
/// `(A + H(z_prev ⊗ ·)) z + G p = -f_z`, `G^T z = -f_q`.
pub fn solve_steady_picard(sys: &QuadraticSystem, tol: f64, max_iter: usize) -> Result<SteadyState> {
    let n = sys.n();
    let np = sys.n_p();
    let f_z = sys.f_z.clone().unwrap_or_else(|| Vector::zeros(n));
    let f_q = sys.f_q.clone().unwrap_or_else(|| Vector::zeros(np));
    let mut z = Vector::zeros(n);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let k = &sys.a + sys.h.frozen_matrix(z.as_slice())?;
        let mut kkt = Mat::zeros(n + np, n + np);
        kkt.view_mut((0, 0), (n, n)).copy_from(&k);
        if let Some(g) = &sys.g {
            kkt.view_mut((0, n), (n, np)).copy_from(g);
            kkt.view_mut((n, 0), (np, n)).copy_from(&g.transpose());
        }
        let mut rhs = Vector::zeros(n + np);
        rhs.rows_mut(0, n).copy_from(&(-&f_z));
        rhs.rows_mut(n, np).copy_from(&(-&f_q));
        let sol = linalg::lu(&kkt, "Picard saddle-point system")?
            .solve(&rhs)
            .ok_or_else(|| Error::Singular { what: "Picard saddle-point system".into(), cond: f64::INFINITY })?;
        z = sol.rows(0, n).into_owned();
        let mut probe = sys.clone();
        probe.f_z = Some(f_z.clone());
        probe.f_q = if np > 0 { Some(f_q.clone()) } else { None };
        residual = probe.stationary_residual(&z)?;
        if !residual.is_finite() || residual > 1e12 {
            break;
        }
        if residual <= tol {
            return Ok(SteadyState { zbar: z, iterations: it, residual });
        }
    }
    Err(Error::NotConverged { what: "Picard steady-state iteration".into(), iterations: max_iter, residual })
}

/// Damped Newton iteration on the stationary saddle-point system, started at
/// zero; the step is halved until the residual norm decreases.
pub fn solve_steady_newton(sys: &QuadraticSystem, tol: f64, max_iter: usize) -> Result<SteadyState> {
    let n = sys.n();
    let np = sys.n_p();
    let f_z = sys.f_z.clone().unwrap_or_else(|| Vector::zeros(n));
    let f_q = sys.f_q.clone().unwrap_or_else(|| Vector::zeros(np));
    let full = |x: &Vector| -> Result<Vector> {
        let z = x.rows(0, n).into_owned();
        let mut r = Vector::zeros(n + np);
        let mut top = &sys.a * &z + sys.h.eval_quadratic(z.as_slice())? + &f_z;
        if let Some(g) = &sys.g {
            top += g * x.rows(n, np);
            r.rows_mut(n, np).copy_from(&(g.transpose() * &z + &f_q));
        }
        r.rows_mut(0, n).copy_from(&top);
        Ok(r)
    };
    let mut x = Vector::zeros(n + np);
    let mut r = full(&x)?;
    let scale = f_z.norm() + f_q.norm() + 1.0;
    for it in 1..=max_iter {
        let z = x.rows(0, n).into_owned();
        let mut jac = Mat::zeros(n + np, n + np);
        jac.view_mut((0, 0), (n, n)).copy_from(&(&sys.a + sys.h.linearization_matrix(z.as_slice())?));
        if let Some(g) = &sys.g {
            jac.view_mut((0, n), (n, np)).copy_from(g);
            jac.view_mut((n, 0), (np, n)).copy_from(&g.transpose());
        }
        let dx = linalg::lu(&jac, "Newton steady-state Jacobian")?
            .solve(&(-&r))
            .ok_or_else(|| Error::Singular { what: "Newton steady-state Jacobian".into(), cond: f64::INFINITY })?;
        let mut step = 1.0;
        loop {
            let trial = &x + &dx * step;
            let rt = full(&trial)?;
            if rt.norm() < r.norm() || step < 1e-4 {
                x = trial;
                r = rt;
                break;
            }
            step *= 0.5;
        }
        if !r.norm().is_finite() {
            break;
        }
        if r.norm() <= tol * scale {
            let zbar = x.rows(0, n).into_owned();
            let mut probe = sys.clone();
            probe.f_z = Some(f_z.clone());
            probe.f_q = if np > 0 { Some(f_q.clone()) } else { None };
            let residual = probe.stationary_residual(&zbar)?;
            return Ok(SteadyState { zbar, iterations: it, residual });
        }
    }
    Err(Error::NotConverged { what: "Newton steady-state iteration".into(), iterations: max_iter, residual: r.norm() })
}

/// Returns the affine-free system around the steady state, computing the
/// steady state when only forcing is given (Picard, then Newton if Picard
/// does not converge).
pub fn shift_to_steady_state(sys: &QuadraticSystem) -> Result<(QuadraticSystem, Option<Vector>)> {
    if let Some(z) = &sys.zbar {
        return Ok((sys.shifted(z)?, Some(z.clone())));
    }
    let forced = sys.f_z.as_ref().is_some_and(|f| f.norm() > 0.0) || sys.f_q.as_ref().is_some_and(|f| f.norm() > 0.0);
    if forced {
        let st = match solve_steady_picard(sys, 1e-12, 50) {
            Ok(st) => st,
            Err(_) => solve_steady_newton(sys, 1e-13, 50)?,
        };
        return Ok((sys.shifted(&st.zbar)?, Some(st.zbar)));
    }
    let mut plain = sys.clone();
    plain.f_z = None;
    plain.f_q = None;
    Ok((plain, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn burgers16() -> QuadraticSystem {
        make_burgers(16, 0.05, 2.0, &[[0.2, 0.4], [0.6, 0.8]]).unwrap()
    }

    #[test]
    fn burgers_small_viscous_is_stable() {
        let s = make_burgers(4, 1.0, 0.0, &[[0.0, 1.0]]).unwrap();
        let ev = s.a.clone().symmetric_eigenvalues();
        assert!(ev.iter().all(|&l| l < 0.0));
        // Dirichlet second difference: -4 sin²(kπh/2)/h², h = 1/5
        let h = 0.2f64;
        let mut want: Vec<f64> =
            (1..=4).map(|k| -4.0 * (k as f64 * std::f64::consts::PI * h / 2.0).sin().powi(2) / (h * h)).collect();
        let mut got: Vec<f64> = ev.iter().copied().collect();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn burgers_shift_destabilizes() {
        let s = burgers16();
        assert!(linalg::spectral_abscissa(&s.a) > 0.0);
    }

    #[test]
    fn burgers_convection_matches_stencil() {
        for n in [4usize, 9, 16] {
            let s = make_burgers(n, 0.1, 0.0, &[[0.0, 1.0]]).unwrap();
            let h = 1.0 / (n as f64 + 1.0);
            let y = vec![1.0; n];
            // dense oracle on the zero-padded vector
            let mut pad = vec![0.0; n + 2];
            pad[1..=n].copy_from_slice(&y);
            let want: Vec<f64> = (1..=n)
                .map(|i| {
                    let dy = (pad[i + 1] - pad[i - 1]) / (2.0 * h);
                    let dyy = (pad[i + 1] * pad[i + 1] - pad[i - 1] * pad[i - 1]) / (2.0 * h);
                    -(pad[i] * dy + dyy) / 3.0
                })
                .collect();
            let got = s.h.eval_quadratic(&y).unwrap();
            for i in 0..n {
                assert!((got[i] - want[i]).abs() < 1e-12, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn burgers_convection_conserves_energy() {
        let s = burgers16();
        let y = Vector::from_fn(16, |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let e = y.dot(&s.h.eval_quadratic(y.as_slice()).unwrap());
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn burgers_rejects_bad_interval() {
        assert!(make_burgers(8, 0.1, 0.0, &[[0.5, 1.5]]).is_err());
        assert!(make_burgers(8, 0.1, 0.0, &[[0.50, 0.51]]).is_err());
    }

    #[test]
    fn random_is_deterministic_and_stable() {
        let a = make_random_quad(6, 2, 42, true);
        let b = make_random_quad(6, 2, 42, true);
        assert_eq!(a, b);
        assert!(linalg::spectral_abscissa(&a.a) <= -0.5 + 1e-10);
        let s = make_random_quad(1, 1, 3, true);
        assert!(s.a[(0, 0)] <= -0.5 + 1e-15);
    }

    #[test]
    fn oseen_stokes_is_symmetric_and_projected_negative() {
        let s = make_oseen_mac(4, 4, 1.0, 0.0, &BaseFlow::Zero, [0.25, 0.75, 0.25, 0.75], 1).unwrap();
        assert!((&s.a - s.a.transpose()).norm() < 1e-14);
        let g = s.g.as_ref().unwrap();
        // orthonormal basis of ker G^T
        let gtg = g.transpose() * g;
        let p = Mat::identity(s.n(), s.n()) - g * gtg.try_inverse().unwrap() * g.transpose();
        let eig = p.symmetric_eigen();
        let cols: Vec<Vector> =
            (0..s.n()).filter(|&i| eig.eigenvalues[i] > 0.5).map(|i| eig.eigenvectors.column(i).into_owned()).collect();
        assert_eq!(cols.len(), s.n() - g.ncols());
        let basis = Mat::from_columns(&cols);
        let proj = basis.transpose() * &s.a * &basis;
        assert!(proj.symmetric_eigenvalues().iter().all(|&l| l < 0.0));
    }

    #[test]
    fn oseen_streamfunction_is_divergence_free() {
        for (nx, ny) in [(4, 4), (6, 5), (7, 7)] {
            let s = make_oseen_mac(nx, ny, 0.1, 0.0, &BaseFlow::Streamfunction { amplitude: 1.0 }, [0.2, 0.8, 0.2, 0.8], 2)
                .unwrap();
            let z = s.zbar.as_ref().unwrap();
            let div = s.g.as_ref().unwrap().transpose() * z;
            assert!(div.norm() < 1e-12 * z.norm().max(1.0));
            assert!(z.norm() > 0.0);
            assert_eq!(s.m(), 4);
        }
    }

    #[test]
    fn oseen_rejects_divergent_base_flow_and_bad_region() {
        let n = 2 * 3 * 4;
        let mut vals = vec![0.0; n];
        vals[0] = 1.0;
        let err = make_oseen_mac(4, 4, 0.1, 0.0, &BaseFlow::Explicit { values: vals }, [0.2, 0.8, 0.2, 0.8], 1)
            .unwrap_err();
        assert!(matches!(err, Error::NotDivergenceFree { .. }));
        assert!(make_oseen_mac(4, 4, 0.1, 0.0, &BaseFlow::Zero, [0.2, 1.3, 0.2, 0.8], 1).is_err());
    }

    #[test]
    fn oseen_g_has_full_rank() {
        let s = make_oseen_mac(5, 4, 0.1, 0.0, &BaseFlow::Zero, [0.2, 0.8, 0.2, 0.8], 1).unwrap();
        let g = s.g.as_ref().unwrap();
        assert_eq!(linalg::numerical_rank(g, 1e-10), g.ncols());
        let gtg = g.transpose() * g;
        assert!(linalg::condition_number(&gtg).is_finite());
    }

    #[test]
    fn picard_zero_forcing_is_immediate() {
        let mut s = burgers16();
        s.f_z = Some(Vector::zeros(16));
        let st = solve_steady_picard(&s, 1e-12, 10).unwrap();
        assert_eq!(st.iterations, 1);
        assert_eq!(st.zbar.norm(), 0.0);
    }

    #[test]
    fn picard_small_forcing_converges() {
        let mut s = burgers16();
        let f = Vector::from_fn(16, |i, _| ((i as f64 + 1.0) / 17.0 * std::f64::consts::PI).sin());
        s.f_z = Some(&f * (1e-3 / f.norm()));
        let st = solve_steady_picard(&s, 1e-10, 10).unwrap();
        assert!(st.iterations <= 10);
        // independent re-check of the full nonlinear residual
        let r = &s.a * &st.zbar + s.h.eval_quadratic(st.zbar.as_slice()).unwrap() + s.f_z.as_ref().unwrap();
        assert!(r.norm() <= 1e-10);
    }

    #[test]
    fn picard_large_forcing_fails_loudly() {
        let mut s = make_burgers(16, 0.05, 0.0, &[[0.2, 0.4]]).unwrap();
        let f = Vector::from_fn(16, |i, _| ((i as f64 + 1.0) / 17.0 * std::f64::consts::PI).sin());
        // found by bisection on the amplitude: contraction breaks well below 1e3
        s.f_z = Some(&f * 1e3);
        let err = solve_steady_picard(&s, 1e-10, 30).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }));
    }

    #[test]
    fn newton_converges_where_picard_stalls() {
        let mut s = make_burgers(16, 0.05, 0.0, &[[0.2, 0.4], [0.6, 0.8]]).unwrap();
        let f = Vector::from_fn(16, |i, _| 0.5 * ((i as f64 + 1.0) / 17.0 * std::f64::consts::PI).sin());
        s.f_z = Some(f.clone());
        let st = solve_steady_newton(&s, 1e-13, 50).unwrap();
        let r = &s.a * &st.zbar + s.h.eval_quadratic(st.zbar.as_slice()).unwrap() + &f;
        assert!(r.norm() <= 1e-11);
        assert!(st.zbar.norm() > 0.0);
        let (_, z) = shift_to_steady_state(&s).unwrap();
        assert_eq!(z.unwrap(), st.zbar);
    }

    #[test]
    fn oseen_picard_recovers_base_flow_shift() {
        let s = make_oseen_mac(4, 4, 0.5, 0.0, &BaseFlow::Streamfunction { amplitude: 0.1 }, [0.2, 0.8, 0.2, 0.8], 1)
            .unwrap();
        let (shifted, z) = shift_to_steady_state(&s).unwrap();
        assert!(z.is_some());
        assert!(shifted.f_z.is_none());
        assert!(shifted.stationary_residual(&Vector::zeros(s.n())).unwrap() == 0.0);
    }
}
