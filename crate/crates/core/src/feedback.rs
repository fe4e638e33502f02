//! Polynomial feedback laws in reduced coordinates.
//!
//! `u₂(y) = L₂ y` with `L₂ = -(1/α) B̃^T Π Ẽ`, and
//! `u₃(y) = u₂(y) - (1/(2α)) K̃(y, y)`. The ½ is the `1/(k-1)!` of the
//! Taylor gradient at `k = 3`.

use crate::error::{Error, Result};
use crate::leray::ReducedSystem;
use crate::linalg::{Mat, Vector};
use crate::riccati::RiccatiSolution;
use crate::tensor_lyap::Order3Gain;

#[derive(Debug, Clone)]
pub struct GainSet {
    pub alpha: f64,
    pub pi: Mat,
    /// `-(1/α) B̃^T Π Ẽ`, `m × N`.
    pub l2: Mat,
    pub k3: Option<Order3Gain>,
    pub degree: usize,
}

/// `-(1/α) B̃^T Π Ẽ`
pub fn linear_gain(red: &ReducedSystem, alpha: f64, pi: &Mat) -> Mat {
    -(red.b.transpose() * pi * &red.e) / alpha
}

impl GainSet {
    pub fn new(red: &ReducedSystem, ric: &RiccatiSolution, k3: Option<Order3Gain>, degree: usize) -> Result<Self> {
        Self::from_parts(red, ric.alpha, ric.pi.clone(), k3, degree)
    }

    pub fn from_parts(red: &ReducedSystem, alpha: f64, pi: Mat, k3: Option<Order3Gain>, degree: usize) -> Result<Self> {
        if !(degree == 2 || degree == 3) {
            return Err(Error::Invalid(format!("feedback degree must be 2 or 3 (got {degree})")));
        }
        if degree == 3 && k3.is_none() {
            return Err(Error::Invalid("degree-3 feedback needs the order-3 gain".into()));
        }
        if let Some(k) = &k3 {
            if k.n != red.n() || k.m != red.m() {
                return Err(Error::dim("order-3 gain state dimension", red.n(), k.n));
            }
        }
        let l2 = linear_gain(red, alpha, &pi);
        Ok(GainSet { alpha, pi, l2, k3, degree })
    }

    /// Same gains evaluated at another degree.
    pub fn with_degree(&self, degree: usize) -> Result<Self> {
        if !(degree == 2 || degree == 3) || (degree == 3 && self.k3.is_none()) {
            return Err(Error::Invalid(format!("cannot evaluate degree {degree} with the stored gains")));
        }
        let mut out = self.clone();
        out.degree = degree;
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.l2.ncols()
    }

    pub fn m(&self) -> usize {
        self.l2.nrows()
    }

    /// `-(1/(2α)) K̃(y, y)`, zero at degree 2.
    pub fn quadratic_part(&self, y: &Vector) -> Result<Vector> {
        if y.len() != self.n() {
            return Err(Error::dim("feedback state", self.n(), y.len()));
        }
        match (&self.k3, self.degree) {
            (Some(k), 3) => Ok(k.quadratic(y.as_slice())? * (-0.5 / self.alpha)),
            _ => Ok(Vector::zeros(self.m())),
        }
    }

    pub fn eval_u(&self, y: &Vector) -> Result<Vector> {
        if y.len() != self.n() {
            return Err(Error::dim("feedback state", self.n(), y.len()));
        }
        let mut u = &self.l2 * y;
        if self.degree == 3 {
            u += self.quadratic_part(y)?;
        }
        Ok(u)
    }

    /// Closed-loop correction `G₃(y) = B̃ (u₃(y) - u₂(y))`.
    pub fn eval_gk(&self, red: &ReducedSystem, k: usize, y: &Vector) -> Result<Vector> {
        if k != 3 {
            return Err(Error::Invalid(format!("closed-loop term G_{k} not available (only k = 3)")));
        }
        if self.k3.is_none() {
            return Err(Error::Invalid("G_3 needs the order-3 gain".into()));
        }
        let q = self.with_degree(3)?.quadratic_part(y)?;
        Ok(&red.b * q)
    }
}
