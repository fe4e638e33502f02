//! Discrete Leray projection and reduction of the saddle-point system to an
//! ODE on the discretely divergence-free subspace.
//!
//! With `S = G^T E^{-1} G`, the projector is `P = I - G S^{-1} G^T E^{-1}`.
//! It is factored as `P = Θ_l Θ_r^T` with `Θ_l^T Θ_r = I`. States with
//! `G^T y = 0` satisfy `P^T y = y`, so `y = Θ_r ỹ` with `ỹ = Θ_l^T y`, and the
//! reduced system is
//!
//! ```text
//! Ẽ ỹ' = Ã ỹ + H̃(ỹ ⊗ ỹ) + B̃ u,
//! Ẽ = Θ_r^T E Θ_r,  Ã = Θ_r^T A Θ_r,  B̃ = Θ_r^T B,  C̃ = C Θ_r,
//! H̃(a ⊗ b) = Θ_r^T H(Θ_r a ⊗ Θ_r b).
//! ```

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{QuadraticSystem, SymQuadTensor};

/// Largest full dimension for which the dense projector is formed.
pub const DENSE_PROJECTOR_LIMIT: usize = 2000;
/// Largest reduced dimension for which `H̃` is stored as an explicit tensor.
pub const DENSE_REDUCED_TENSOR_LIMIT: usize = 64;
/// Relative tolerance on the projector invariants.
pub const LERAY_TOL: f64 = 1e-12;
/// Rank threshold (relative to the largest singular value) for `P`.
pub const RANK_TOL: f64 = 1e-10;
/// Bound on the condition estimate of `G^T E^{-1} G`.
pub const SCHUR_COND_LIMIT: f64 = 1e12;
/// Tolerance on `|G^T y|` for states handed to pressure recovery.
pub const DIVERGENCE_TOL: f64 = 1e-8;

/// The projector `P` in factored form, plus its dense matrix when affordable.
#[derive(Debug, Clone)]
pub struct Projector {
    g: Mat,
    /// `S^{-1} G^T E^{-1}`
    correction: Mat,
    dense: Option<Mat>,
}

impl Projector {
    pub fn apply(&self, y: &Vector) -> Vector {
        y - &self.g * (&self.correction * y)
    }

    pub fn dense(&self) -> Option<&Mat> {
        self.dense.as_ref()
    }
}

pub fn build_projector(e: &Mat, g: &Mat) -> Result<Projector> {
    let n = e.nrows();
    if g.nrows() != n {
        return Err(Error::dim("G rows", n, g.nrows()));
    }
    let e_lu = linalg::lu(e, "mass matrix E")?;
    let einv_g = e_lu.solve(g).ok_or_else(|| Error::Singular { what: "mass matrix E".into(), cond: f64::INFINITY })?;
    let s = g.transpose() * &einv_g;
    let cond = linalg::condition_number(&s);
    if !(cond <= SCHUR_COND_LIMIT) {
        return Err(Error::Singular { what: "G^T E^{-1} G".into(), cond });
    }
    let s_lu = linalg::lu(&s, "G^T E^{-1} G")?;
    // S^{-1} G^T E^{-1} = (E^{-T} G S^{-T})^T
    let et_lu = linalg::lu(&e.transpose(), "mass matrix E^T")?;
    let einvt_g = et_lu.solve(g).ok_or_else(|| Error::Singular { what: "mass matrix E^T".into(), cond: f64::INFINITY })?;
    let correction = s_lu
        .solve(&einvt_g.transpose())
        .ok_or_else(|| Error::Singular { what: "G^T E^{-1} G".into(), cond })?;
    let dense = (n <= DENSE_PROJECTOR_LIMIT).then(|| Mat::identity(n, n) - g * &correction);
    Ok(Projector { g: g.clone(), correction, dense })
}

/// Factors an idempotent `P` of rank `n - n_p` as `Θ_l Θ_r^T` with
/// `Θ_l^T Θ_r = I`. `Θ_r` holds the leading right singular vectors of `P`
/// (each column signed so its largest-magnitude entry is positive).
pub fn decompose_projector(p: &Mat, n_p: usize) -> Result<(Mat, Mat)> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::dim("projector (square)", n, p.ncols()));
    }
    if n > DENSE_PROJECTOR_LIMIT {
        return Err(Error::Guard { what: "dense projector factorization".into(), limit: DENSE_PROJECTOR_LIMIT, got: n });
    }
    let svd = p.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("requested right singular vectors");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > RANK_TOL * smax).collect();
    let expected = n.saturating_sub(n_p);
    if keep.len() != expected {
        return Err(Error::Rank { name: "P".into(), rank: keep.len(), expected });
    }
    keep.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut theta_r = Mat::zeros(n, expected);
    for (col, &i) in keep.iter().enumerate() {
        let mut v = vt.row(i).transpose();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        theta_r.set_column(col, &v);
    }
    let theta_l = p * &theta_r;
    // enforce biorthogonality exactly up to rounding
    let m = theta_l.transpose() * &theta_r;
    let minv = linalg::inverse(&m, "Θ_l^T Θ_r")?;
    let theta_l = theta_l * minv.transpose();
    Ok((theta_l, theta_r))
}

/// Measured projector invariants (all relative).
#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct LerayDefects {
    pub idempotence: f64,
    pub constraint: f64,
    pub biorthogonality: f64,
    pub reconstruction: f64,
}

impl LerayDefects {
    pub fn max(&self) -> f64 {
        self.idempotence.max(self.constraint).max(self.biorthogonality).max(self.reconstruction)
    }
}

/// The reduced quadratic term.
#[derive(Debug, Clone)]
pub enum ReducedTensor {
    /// Explicit coordinates (identity reduction or small N).
    Explicit(SymQuadTensor),
    /// Applied through the full tensor: `Θ_r^T H(Θ_r a ⊗ Θ_r b)`.
    Lazy { h: SymQuadTensor, theta_r: Mat },
}

impl ReducedTensor {
    pub fn dim(&self) -> usize {
        match self {
            ReducedTensor::Explicit(h) => h.dim(),
            ReducedTensor::Lazy { theta_r, .. } => theta_r.ncols(),
        }
    }

    pub fn eval_bilinear(&self, a: &[f64], b: &[f64]) -> Result<Vector> {
        match self {
            ReducedTensor::Explicit(h) => h.eval_bilinear(a, b),
            ReducedTensor::Lazy { h, theta_r } => {
                let n = theta_r.ncols();
                if a.len() != n || b.len() != n {
                    return Err(Error::dim("reduced tensor argument", n, a.len().max(b.len())));
                }
                let fa = theta_r * Vector::from_column_slice(a);
                let fb = theta_r * Vector::from_column_slice(b);
                Ok(theta_r.transpose() * h.eval_bilinear(fa.as_slice(), fb.as_slice())?)
            }
        }
    }

    pub fn eval_quadratic(&self, y: &[f64]) -> Result<Vector> {
        self.eval_bilinear(y, y)
    }

    /// `H̃(ȳ ⊗ z) + H̃(z ⊗ ȳ)`
    pub fn eval_linearized(&self, ybar: &[f64], z: &[f64]) -> Result<Vector> {
        Ok(self.eval_bilinear(ybar, z)? * 2.0)
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ReducedTensor::Explicit(h) => h.is_zero(),
            ReducedTensor::Lazy { h, .. } => h.is_zero(),
        }
    }

    /// Dense `N × N²` matricization, column `j*N + k` holding `H̃(e_j ⊗ e_k)`.
    pub fn to_dense(&self) -> Mat {
        match self {
            ReducedTensor::Explicit(h) => h.to_dense(),
            ReducedTensor::Lazy { h, theta_r } => reduced_dense(h, theta_r),
        }
    }
}

fn reduced_dense(h: &SymQuadTensor, theta_r: &Mat) -> Mat {
    let nn = theta_r.ncols();
    let mut out = Mat::zeros(nn, nn * nn);
    for j in 0..nn {
        for k in j..nn {
            let col = h
                .eval_bilinear(theta_r.column(j).as_slice(), theta_r.column(k).as_slice())
                .expect("columns of Θ_r have the full dimension");
            let red = theta_r.transpose() * col;
            out.set_column(j * nn + k, &red);
            if k != j {
                out.set_column(k * nn + j, &red);
            }
        }
    }
    out
}

fn dense_to_sym(d: &Mat) -> Result<SymQuadTensor> {
    let n = d.nrows();
    let mut raw = Vec::new();
    for col in 0..d.ncols() {
        let (j, k) = (col / n, col % n);
        for i in 0..n {
            let v = d[(i, col)];
            if v != 0.0 {
                raw.push((i, j, k, v));
            }
        }
    }
    SymQuadTensor::symmetrize(&raw, n)
}

/// Reduced system together with its projector factors and parent system.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub e: Mat,
    pub a: Mat,
    pub h: ReducedTensor,
    pub b: Mat,
    pub c: Mat,
    pub theta_l: Mat,
    pub theta_r: Mat,
    pub defects: LerayDefects,
    pub parent: QuadraticSystem,
    projector: Option<Projector>,
}

impl ReducedSystem {
    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `Ã y + H̃(y ⊗ y) + B̃ u`
    pub fn rhs(&self, y: &Vector, u: &Vector) -> Result<Vector> {
        if y.len() != self.n() {
            return Err(Error::dim("reduced state", self.n(), y.len()));
        }
        if u.len() != self.m() {
            return Err(Error::dim("control", self.m(), u.len()));
        }
        Ok(&self.a * y + self.h.eval_quadratic(y.as_slice())? + &self.b * u)
    }

    pub fn lift(&self, y: &Vector) -> Vector {
        &self.theta_r * y
    }

    pub fn restrict(&self, y: &Vector) -> Vector {
        self.theta_l.transpose() * y
    }

    /// Full-space projection of a vector (identity when unconstrained).
    pub fn project(&self, y: &Vector) -> Vector {
        match &self.projector {
            Some(p) => p.apply(y),
            None => y.clone(),
        }
    }

    /// Copy with the quadratic term removed.
    pub fn linearized(&self) -> ReducedSystem {
        let mut out = self.clone();
        out.h = ReducedTensor::Explicit(SymQuadTensor::zero(self.n()));
        out.parent.h = SymQuadTensor::zero(self.parent.n());
        out
    }

    /// Copy with `H̃` (and the parent `H`) scaled by `s`.
    pub fn with_scaled_tensor(&self, s: f64) -> ReducedSystem {
        let mut out = self.clone();
        out.h = match &self.h {
            ReducedTensor::Explicit(h) => ReducedTensor::Explicit(h.scaled(s)),
            ReducedTensor::Lazy { h, theta_r } => ReducedTensor::Lazy { h: h.scaled(s), theta_r: theta_r.clone() },
        };
        out.parent.h = self.parent.h.scaled(s);
        out
    }
}

/// Leray reduction of an (affine-free) system; identity when `G` is absent.
pub fn reduce_system(sys: &QuadraticSystem) -> Result<ReducedSystem> {
    let n = sys.n();
    let Some(g) = &sys.g else {
        return Ok(ReducedSystem {
            e: sys.e.clone(),
            a: sys.a.clone(),
            h: ReducedTensor::Explicit(sys.h.clone()),
            b: sys.b.clone(),
            c: sys.c.clone(),
            theta_l: Mat::identity(n, n),
            theta_r: Mat::identity(n, n),
            defects: LerayDefects::default(),
            parent: sys.clone(),
            projector: None,
        });
    };
    let proj = build_projector(&sys.e, g)?;
    let p = proj
        .dense()
        .ok_or_else(|| Error::Guard { what: "dense projector".into(), limit: DENSE_PROJECTOR_LIMIT, got: n })?;
    let (theta_l, theta_r) = decompose_projector(p, g.ncols())?;
    let nn = theta_r.ncols();

    let pnorm = p.norm();
    let einv = linalg::inverse(&sys.e, "mass matrix E")?;
    let gte = g.transpose() * &einv;
    let defects = LerayDefects {
        idempotence: (p * p - p).norm() / pnorm,
        constraint: (&gte * p).norm() / (gte.norm() * pnorm),
        biorthogonality: (theta_l.transpose() * &theta_r - Mat::identity(nn, nn)).norm() / (nn as f64).sqrt(),
        reconstruction: (&theta_l * theta_r.transpose() - p).norm() / pnorm,
    };
    if defects.max() > LERAY_TOL {
        return Err(Error::Invariant { what: "Leray projector".into(), defect: defects.max(), tol: LERAY_TOL });
    }

    let h = if nn <= DENSE_REDUCED_TENSOR_LIMIT {
        ReducedTensor::Explicit(dense_to_sym(&reduced_dense(&sys.h, &theta_r))?)
    } else {
        ReducedTensor::Lazy { h: sys.h.clone(), theta_r: theta_r.clone() }
    };
    let rt = theta_r.transpose();
    Ok(ReducedSystem {
        e: &rt * &sys.e * &theta_r,
        a: &rt * &sys.a * &theta_r,
        h,
        b: &rt * &sys.b,
        c: &sys.c * &theta_r,
        theta_l,
        theta_r,
        defects,
        parent: sys.clone(),
        projector: Some(proj),
    })
}

/// Pressure `p = -(G^T E^{-1} G)^{-1} G^T E^{-1} (A y + H(y ⊗ y) + B u)`.
pub fn recover_pressure(sys: &QuadraticSystem, y: &Vector, u: &Vector) -> Result<Vector> {
    let g = sys.g.as_ref().ok_or_else(|| Error::Invalid("pressure recovery needs a constraint matrix G".into()))?;
    let div = (g.transpose() * y).norm();
    if div > DIVERGENCE_TOL * y.norm().max(1.0) {
        return Err(Error::NotDivergenceFree { norm: div });
    }
    let proj = build_projector(&sys.e, g)?;
    Ok(-(&proj.correction * sys.rhs(y, u)?))
}
