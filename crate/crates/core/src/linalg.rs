//! Dense linear-algebra helpers on top of `nalgebra`.
//!
//! Everything here is desk-scale: dense LU, eigenvalues through the real
//! Schur form, and Newton iterations for the matrix sign function.

use nalgebra::{Complex, DMatrix, DVector, LU};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// LU factorization that refuses exactly singular or badly conditioned input.
pub fn lu(m: &Mat, what: &str) -> Result<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!("{what} (square)"), m.nrows(), m.ncols()));
    }
    let f = m.clone().lu();
    let u = f.u();
    let mut dmax = 0.0f64;
    let mut dmin = f64::INFINITY;
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    if u.nrows() > 0 && (!(dmin > 0.0) || dmin <= 1e-14 * dmax) {
        return Err(Error::Singular {
            what: what.to_string(),
            cond: if dmin > 0.0 { dmax / dmin } else { f64::INFINITY },
        });
    }
    Ok(f)
}

pub fn inverse(m: &Mat, what: &str) -> Result<Mat> {
    let f = lu(m, what)?;
    f.try_inverse()
        .ok_or_else(|| Error::Singular { what: what.to_string(), cond: f64::INFINITY })
}

pub fn frob(m: &Mat) -> f64 {
    m.norm()
}

pub fn norm1(m: &Mat) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a real square matrix, sorted by real part then imaginary part.
pub fn eigenvalues(m: &Mat) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<Complex<f64>> = m.clone().complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    ev
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &Mat) -> f64 {
    eigenvalues(m).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &Mat, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Ratio of extreme singular values.
pub fn condition_number(m: &Mat) -> f64 {
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

fn log_abs_det(f: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let u = f.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum()
}

const SIGN_MAX_ITER: usize = 100;

/// Matrix sign function by the scaled Newton iteration.
///
/// Fails when an iterate becomes singular, which signals eigenvalues on (or
/// numerically near) the imaginary axis.
pub fn matrix_sign(h: &Mat, what: &str) -> Result<Mat> {
    let n = h.nrows();
    let mut z = h.clone();
    let mut scale = true;
    let mut last = f64::INFINITY;
    for _ in 0..SIGN_MAX_ITER {
        let f = lu(&z, what)?;
        let zi = f
            .try_inverse()
            .ok_or_else(|| Error::Singular { what: what.to_string(), cond: f64::INFINITY })?;
        let c = if scale { (-log_abs_det(&lu(&z, what)?) / n as f64).exp() } else { 1.0 };
        let znew = (&z * c + zi / c) * 0.5;
        let diff = norm1(&(&znew - &z));
        let rel = diff / norm1(&znew);
        z = znew;
        if rel < 1e-2 {
            scale = false;
        }
        if rel <= 1e-14 || (rel < 1e-9 && rel >= last) {
            return Ok(z);
        }
        last = rel;
    }
    Err(Error::NotConverged {
        what: format!("matrix sign iteration ({what})"),
        iterations: SIGN_MAX_ITER,
        residual: last,
    })
}

/// Solves `F^T X + X F + W = 0` for stable `F` by the sign-function iteration.
pub fn lyapunov(f: &Mat, w: &Mat) -> Result<Mat> {
    let n = f.nrows();
    if f.ncols() != n || w.nrows() != n || w.ncols() != n {
        return Err(Error::dim("lyapunov operands", n, w.nrows()));
    }
    let mut a = f.clone();
    let mut q = w.clone();
    let mut scale = true;
    let mut last = f64::INFINITY;
    for _ in 0..SIGN_MAX_ITER {
        let fa = lu(&a, "lyapunov iterate")?;
        let ai = fa.try_inverse().ok_or_else(|| Error::Singular {
            what: "lyapunov iterate".into(),
            cond: f64::INFINITY,
        })?;
        let c = if scale { (-log_abs_det(&lu(&a, "lyapunov iterate")?) / n as f64).exp() } else { 1.0 };
        let anew = (&a * c + &ai / c) * 0.5;
        let qnew = (&q * c + ai.transpose() * &q * &ai / c) * 0.5;
        let rel = norm1(&(&anew - &a)) / norm1(&anew);
        a = anew;
        q = qnew;
        if rel < 1e-2 {
            scale = false;
        }
        if rel <= 1e-14 || (rel < 1e-9 && rel >= last) {
            // The limit of `a` is -I exactly when `f` is stable.
            let defect = norm1(&(&a + Mat::identity(n, n)));
            if defect > 1e-6 {
                return Err(Error::Unstabilizable(
                    "Lyapunov operator has eigenvalues in the closed right half-plane".into(),
                ));
            }
            return Ok(symmetrize(&(q * 0.5)));
        }
        last = rel;
    }
    Err(Error::NotConverged {
        what: "Lyapunov sign iteration".into(),
        iterations: SIGN_MAX_ITER,
        residual: last,
    })
}

/// Matrix exponential `e^{tM}` (scaling and squaring with a Padé approximant).
pub fn expm(m: &Mat, t: f64) -> Result<Mat> {
    if !t.is_finite() || m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("expm input".into()));
    }
    let e = (m * t).exp();
    if e.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("expm output".into()));
    }
    Ok(e)
}
