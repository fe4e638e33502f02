//! Quadratic-in-state control systems
//!
//! ```text
//! E z' = A z + H (z ⊗ z) + B u + G p + f_z,     0 = G^T z + f_q
//! ```
//!
//! # Kronecker / vec convention
//!
//! The whole crate uses the column-major convention: `vec(M)` stacks columns,
//! `(a ⊗ b)[p*n + q] = a[p] * b[q]`, and `(A ⊗ B) vec(X) = vec(B X A^T)`.
//! A dense order-k tensor `T[i1, .., ik]` is stored with the first index
//! fastest. Consequently, in `(M1 ⊗ M2 ⊗ M3) vec(T)` the *last* factor acts on
//! the first tensor index.
//!
//! The quadratic term is stored as a coordinate list of the matricization
//! `H ∈ R^{n × n²}`: an entry `(i, j, k, v)` contributes `v * a[j] * b[k]` to
//! `H(a ⊗ b)[i]`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Sparse quadratic tensor, symmetric in its last two slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SymQuadTensor {
    dim: usize,
    entries: Vec<(usize, usize, usize, f64)>,
}

impl SymQuadTensor {
    pub fn zero(dim: usize) -> Self {
        SymQuadTensor { dim, entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Canonical entries, sorted by `(i, j, k)`.
    pub fn entries(&self) -> &[(usize, usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds the tensor from raw coordinates, averaging every entry with its
    /// slot-swapped partner. Duplicates are summed; exact zeros are dropped.
    pub fn symmetrize(raw: &[(usize, usize, usize, f64)], n: usize) -> Result<Self> {
        let mut acc: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        for &(i, j, k, v) in raw {
            for idx in [i, j, k] {
                if idx >= n {
                    return Err(Error::IndexOutOfRange {
                        what: "quadratic tensor coordinate".into(),
                        index: idx,
                        bound: n,
                    });
                }
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("quadratic tensor entry".into()));
            }
            if j == k {
                *acc.entry((i, j, k)).or_insert(0.0) += v;
            } else {
                *acc.entry((i, j, k)).or_insert(0.0) += 0.5 * v;
                *acc.entry((i, k, j)).or_insert(0.0) += 0.5 * v;
            }
        }
        let entries = acc
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|((i, j, k), v)| (i, j, k, v))
            .collect();
        Ok(SymQuadTensor { dim: n, entries })
    }

    fn check(&self, what: &str, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::dim(what, self.dim, len));
        }
        Ok(())
    }

    /// `H(a ⊗ b)`.
    pub fn eval_bilinear(&self, a: &[f64], b: &[f64]) -> Result<Vector> {
        self.check("quadratic tensor, first argument", a.len())?;
        self.check("quadratic tensor, second argument", b.len())?;
        let mut out = Vector::zeros(self.dim);
        for &(i, j, k, v) in &self.entries {
            out[i] += v * a[j] * b[k];
        }
        Ok(out)
    }

    /// `H(y ⊗ y)`, contracted entry by entry.
    pub fn eval_quadratic(&self, y: &[f64]) -> Result<Vector> {
        self.eval_bilinear(y, y)
    }

    /// `H(ybar ⊗ z) + H(z ⊗ ybar)`: the derivative of `y ↦ H(y ⊗ y)` at `ybar`.
    pub fn eval_linearized(&self, ybar: &[f64], z: &[f64]) -> Result<Vector> {
        Ok(self.eval_bilinear(ybar, z)? + self.eval_bilinear(z, ybar)?)
    }

    /// The matrix `z ↦ H(ybar ⊗ z) + H(z ⊗ ybar)`.
    pub fn linearization_matrix(&self, ybar: &[f64]) -> Result<Mat> {
        self.check("linearization point", ybar.len())?;
        let n = self.dim;
        let mut m = Mat::zeros(n, n);
        for &(i, j, k, v) in &self.entries {
            m[(i, k)] += v * ybar[j];
            m[(i, j)] += v * ybar[k];
        }
        Ok(m)
    }

    /// The matrix `z ↦ H(ybar ⊗ z)` (first slot frozen).
    pub fn frozen_matrix(&self, ybar: &[f64]) -> Result<Mat> {
        self.check("frozen argument", ybar.len())?;
        let n = self.dim;
        let mut m = Mat::zeros(n, n);
        for &(i, j, k, v) in &self.entries {
            m[(i, k)] += v * ybar[j];
        }
        Ok(m)
    }

    /// Dense `n × n²` matricization. Test oracles and tiny dimensions only.
    pub fn to_dense(&self) -> Mat {
        let n = self.dim;
        let mut m = Mat::zeros(n, n * n);
        for &(i, j, k, v) in &self.entries {
            m[(i, j * n + k)] += v;
        }
        m
    }

    /// Frobenius norm of the matricization.
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.3 * e.3).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let entries = if s == 0.0 {
            Vec::new()
        } else {
            self.entries.iter().map(|&(i, j, k, v)| (i, j, k, v * s)).collect()
        };
        SymQuadTensor { dim: self.dim, entries }
    }
}

/// A quadratic-in-state control system with optional saddle-point constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSystem {
    pub e: Mat,
    pub a: Mat,
    pub h: SymQuadTensor,
    pub b: Mat,
    pub c: Mat,
    pub g: Option<Mat>,
    pub f_z: Option<Vector>,
    pub f_q: Option<Vector>,
    pub zbar: Option<Vector>,
}

/// Tolerance on the stationary residual of a stored steady state.
pub const STEADY_STATE_TOL: f64 = 1e-8;

impl QuadraticSystem {
    /// Validating constructor for the unconstrained, affine-free case.
    pub fn new(e: Mat, a: Mat, h: SymQuadTensor, b: Mat, c: Mat) -> Result<Self> {
        Self::builder(e, a, h, b, c).build()
    }

    pub fn builder(e: Mat, a: Mat, h: SymQuadTensor, b: Mat, c: Mat) -> SystemBuilder {
        SystemBuilder {
            sys: QuadraticSystem { e, a, h, b, c, g: None, f_z: None, f_q: None, zbar: None },
        }
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_p(&self) -> usize {
        self.g.as_ref().map_or(0, |g| g.ncols())
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let sq = |m: &Mat, name: &str| -> Result<()> {
            if m.nrows() != n {
                return Err(Error::dim(format!("{name} rows"), n, m.nrows()));
            }
            if m.ncols() != n {
                return Err(Error::dim(format!("{name} columns"), n, m.ncols()));
            }
            Ok(())
        };
        sq(&self.e, "E")?;
        sq(&self.a, "A")?;
        if self.h.dim() != n {
            return Err(Error::dim("H dimension", n, self.h.dim()));
        }
        if self.b.nrows() != n {
            return Err(Error::dim("B rows", n, self.b.nrows()));
        }
        if self.c.ncols() != n {
            return Err(Error::dim("C columns", n, self.c.ncols()));
        }
        linalg::lu(&self.e, "mass matrix E")?;
        if let Some(g) = &self.g {
            if g.nrows() != n {
                return Err(Error::dim("G rows", n, g.nrows()));
            }
            if g.ncols() >= n {
                return Err(Error::dim("G columns (must be < n)", n - 1, g.ncols()));
            }
            let r = linalg::numerical_rank(g, 1e-10);
            if r != g.ncols() {
                return Err(Error::Rank { name: "G".into(), rank: r, expected: g.ncols() });
            }
        }
        if let Some(f) = &self.f_z {
            if f.len() != n {
                return Err(Error::dim("f_z", n, f.len()));
            }
        }
        if let Some(f) = &self.f_q {
            let np = self.n_p();
            if f.len() != np {
                return Err(Error::dim("f_q", np, f.len()));
            }
        }
        if let Some(z) = &self.zbar {
            if z.len() != n {
                return Err(Error::dim("zbar", n, z.len()));
            }
            let r = self.stationary_residual(z)?;
            let scale = 1.0 + self.a.norm() * z.norm();
            if r > STEADY_STATE_TOL * scale {
                return Err(Error::Invariant {
                    what: "steady state zbar".into(),
                    defect: r,
                    tol: STEADY_STATE_TOL * scale,
                });
            }
        }
        Ok(())
    }

    /// Stationary residual at `z` (with `u = 0`): the momentum residual with
    /// the least-squares pressure, plus the constraint residual.
    pub fn stationary_residual(&self, z: &Vector) -> Result<f64> {
        let mut r = &self.a * z + self.h.eval_quadratic(z.as_slice())?;
        if let Some(f) = &self.f_z {
            r += f;
        }
        let mut cons = 0.0;
        if let Some(g) = &self.g {
            // min_p |r + G p|
            let p = g.clone().svd(true, true).solve(&(-&r), 1e-14).map_err(|e| Error::Invalid(e.to_string()))?;
            r += g * p;
            let mut c = g.transpose() * z;
            if let Some(fq) = &self.f_q {
                c += fq;
            }
            cons = c.norm();
        }
        Ok((r.norm_squared() + cons * cons).sqrt())
    }

    /// Shifts the system to the steady state: `y = z - zbar`, giving
    /// `E y' = (A + H(zbar ⊗ I + I ⊗ zbar)) y + H(y ⊗ y) + B u + G p`,
    /// `0 = G^T y`, with no affine terms.
    pub fn shifted(&self, zbar: &Vector) -> Result<QuadraticSystem> {
        if zbar.len() != self.n() {
            return Err(Error::dim("shift point", self.n(), zbar.len()));
        }
        let a = &self.a + self.h.linearization_matrix(zbar.as_slice())?;
        Ok(QuadraticSystem {
            e: self.e.clone(),
            a,
            h: self.h.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            g: self.g.clone(),
            f_z: None,
            f_q: None,
            zbar: None,
        })
    }

    /// Full-space right-hand side `A y + H(y ⊗ y) + B u` (pressure and affine
    /// terms excluded).
    pub fn rhs(&self, y: &Vector, u: &Vector) -> Result<Vector> {
        if u.len() != self.m() {
            return Err(Error::dim("control", self.m(), u.len()));
        }
        Ok(&self.a * y + self.h.eval_quadratic(y.as_slice())? + &self.b * u)
    }
}

pub struct SystemBuilder {
    sys: QuadraticSystem,
}

impl SystemBuilder {
    pub fn constraint(mut self, g: Mat) -> Self {
        self.sys.g = Some(g);
        self
    }

    pub fn forcing(mut self, f_z: Vector, f_q: Option<Vector>) -> Self {
        self.sys.f_z = Some(f_z);
        self.sys.f_q = f_q;
        self
    }

    pub fn steady_state(mut self, zbar: Vector) -> Self {
        self.sys.zbar = Some(zbar);
        self
    }

    pub fn build(self) -> Result<QuadraticSystem> {
        self.sys.validate()?;
        Ok(self.sys)
    }
}
