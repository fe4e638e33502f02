//! Generalized algebraic Riccati equation
//!
//! ```text
//! Ã^T Π Ẽ + Ẽ^T Π Ã - (1/α) Ẽ^T Π B̃ B̃^T Π Ẽ + C̃^T C̃ = 0
//! ```
//!
//! Substituting `X = Ẽ^T Π Ẽ`, `M = Ẽ^{-1} Ã`, `B̂ = Ẽ^{-1} B̃` gives the
//! standard equation `M^T X + X M - (1/α) X B̂ B̂^T X + C̃^T C̃ = 0`. Its
//! stabilizing solution spans the stable invariant subspace `[I; X]` of the
//! Hamiltonian matrix, extracted here with the matrix sign function and then
//! polished by Newton–Kleinman steps.

use crate::error::{Error, Result};
use crate::leray::ReducedSystem;
use crate::linalg::{self, Mat};

/// Target relative residual.
pub const ARE_TOL: f64 = 1e-8;
const NEWTON_MAX_STEPS: usize = 8;

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub pi: Mat,
    pub alpha: f64,
    /// `Ã_π = Ã - (1/α) B̃ B̃^T Π Ẽ`
    pub api: Mat,
    pub residual_norm: f64,
    pub newton_steps: usize,
}

impl RiccatiSolution {
    /// Largest real part of the spectrum of the pencil `(Ẽ, Ã_π)`.
    pub fn closed_loop_abscissa(&self, e: &Mat) -> Result<f64> {
        let m = linalg::lu(e, "reduced mass matrix")?
            .solve(&self.api)
            .ok_or_else(|| Error::Singular { what: "reduced mass matrix".into(), cond: f64::INFINITY })?;
        Ok(linalg::spectral_abscissa(&m))
    }
}

/// Relative Frobenius residual, divided by `|C̃^T C̃|_F + 1`.
pub fn are_residual_parts(e: &Mat, a: &Mat, b: &Mat, c: &Mat, alpha: f64, pi: &Mat) -> f64 {
    let q = c.transpose() * c;
    let pe = pi * e;
    let btpe = b.transpose() * &pe;
    let r = a.transpose() * &pe + pe.transpose() * a - btpe.transpose() * &btpe / alpha + &q;
    r.norm() / (q.norm() + 1.0)
}

pub fn are_residual(red: &ReducedSystem, alpha: f64, pi: &Mat) -> f64 {
    are_residual_parts(&red.e, &red.a, &red.b, &red.c, alpha, pi)
}

fn standard_residual(m: &Mat, r: &Mat, q: &Mat, x: &Mat) -> f64 {
    (m.transpose() * x + x * m - x * r * x + q).norm() / (q.norm() + 1.0)
}

/// Stabilizing solution of `M^T X + X M - X R X + Q = 0`.
fn care_standard(m: &Mat, r: &Mat, q: &Mat) -> Result<(Mat, usize)> {
    let n = m.nrows();
    let mut ham = Mat::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(m);
    ham.view_mut((0, n), (n, n)).copy_from(&(-r));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-q));
    ham.view_mut((n, n), (n, n)).copy_from(&(-m.transpose()));
    let s = linalg::matrix_sign(&ham, "Hamiltonian matrix").map_err(|e| match e {
        Error::Singular { .. } => Error::Unstabilizable("Hamiltonian has eigenvalues on the imaginary axis".into()),
        other => other,
    })?;
    // (S + I) [I; X] = 0
    let id = Mat::identity(n, n);
    let mut lhs = Mat::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&s.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(s.view((n, n), (n, n)) + &id));
    let mut rhs = Mat::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(s.view((0, 0), (n, n)) + &id)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-s.view((n, 0), (n, n))));
    let x = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Invalid(format!("stable subspace extraction: {e}")))?;
    let mut x = linalg::symmetrize(&x);

    let mut best = standard_residual(m, r, q, &x);
    let mut steps = 0;
    for _ in 0..NEWTON_MAX_STEPS {
        if best <= 1e-14 {
            break;
        }
        // F^T Δ + Δ F + Res(X) = 0 with F = M - R X
        let f = m - r * &x;
        let res_x = m.transpose() * &x + &x * m - &x * r * &x + q;
        let next = match linalg::lyapunov(&f, &res_x) {
            Ok(d) => linalg::symmetrize(&(&x + d)),
            Err(_) => break,
        };
        let res = standard_residual(m, r, q, &next);
        if !(res < best) {
            break;
        }
        x = next;
        best = res;
        steps += 1;
    }
    Ok((x, steps))
}

/// Solves the generalized ARE for the stabilizing `Π`.
pub fn solve_are(red: &ReducedSystem, alpha: f64) -> Result<RiccatiSolution> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Invalid(format!("penalty alpha must be positive, got {alpha}")));
    }
    let n = red.n();
    let e_lu = linalg::lu(&red.e, "reduced mass matrix")?;
    let sing = || Error::Singular { what: "reduced mass matrix".into(), cond: f64::INFINITY };
    let m = e_lu.solve(&red.a).ok_or_else(sing)?;
    let bh = e_lu.solve(&red.b).ok_or_else(sing)?;
    let r = &bh * bh.transpose() / alpha;
    let q = red.c.transpose() * &red.c;
    let (x, newton_steps) = if n == 0 { (Mat::zeros(0, 0), 0) } else { care_standard(&m, &r, &q)? };

    // Π = Ẽ^{-T} X Ẽ^{-1}
    let et_lu = linalg::lu(&red.e.transpose(), "reduced mass matrix")?;
    let y = et_lu.solve(&x).ok_or_else(sing)?;
    let pi = linalg::symmetrize(&et_lu.solve(&y.transpose()).ok_or_else(sing)?.transpose());

    let api = &red.a - &red.b * (red.b.transpose() * &pi * &red.e) / alpha;
    let sol = RiccatiSolution { residual_norm: are_residual(red, alpha, &pi), pi, alpha, api, newton_steps };
    if n > 0 {
        let abscissa = sol.closed_loop_abscissa(&red.e)?;
        if !(abscissa < 0.0) {
            return Err(Error::Unstabilizable(format!(
                "closed-loop pencil has spectral abscissa {abscissa:e} (pencil not stabilizable with this B)"
            )));
        }
    }
    if !(sol.residual_norm <= ARE_TOL) {
        return Err(Error::NotConverged {
            what: "Riccati solve".into(),
            iterations: newton_steps,
            residual: sol.residual_norm,
        });
    }
    Ok(sol)
}
