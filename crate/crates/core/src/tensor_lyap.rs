//! Order-3 value derivative and feedback gain.
//!
//! In reduced coordinates with `X = Ẽ^T Π Ẽ` and `M_π = Ẽ^{-1} Ã_π`, the
//! third derivative of the value function is `D³V = (Ẽ^T)^{⊗3} 𝒳`, where
//!
//! ```text
//! 𝒜^T 𝒳 = ℱ,    𝒜 = Ẽ⊗Ẽ⊗Ã_π + Ẽ⊗Ã_π⊗Ẽ + Ã_π⊗Ẽ⊗Ẽ,
//! ℱ[a,b,c] = -2 (W[a;b,c] + W[b;a,c] + W[c;a,b]),   W = Ẽ^T Π H̃.
//! ```
//!
//! The gain is `K̃ = (Ẽ^T ⊗ Ẽ^T ⊗ B̃^T) 𝒳`, stored with the control index
//! fastest (`K̃[a + m (i + N j)]`).
//!
//! The quadrature path never forms `𝒜`. Writing the Kronecker sum of `M_π`
//! as `𝕄`, `𝕄^{-1} = -∫ e^{t𝕄} dt`, and with an exponential-sum rule
//! `1/x ≈ Σ_j w_j e^{-t_j x}` valid on `[1, R]` after scaling by `λ`,
//!
//! ```text
//! K̃ ≈ -Σ_j (w_j/λ) (Φ_j^T ⊗ Φ_j^T ⊗ B̃^T Ẽ^{-T} Φ_j^T) ℱ,   Φ_j = e^{(t_j/λ) M_π}.
//! ```
//!
//! The general-order right-hand side `R_k` (k = 3, 4) is built from value
//! derivatives in reduced coordinates with
//! `D²F(z1, z2) = -Ẽ^{-1}(H̃(z1⊗z2) + H̃(z2⊗z1))`; with this sign `R_3 = ℱ`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::leray::ReducedSystem;
use crate::linalg::{self, Mat, Vector};
use crate::riccati::RiccatiSolution;
use crate::symtensor::{kron3_apply, mode_apply, sym_ij, DenseTensor};

/// Largest N accepted by the dense order-3 solve (an `N³ × N³` system).
pub const DENSE_K3_MAX_N: usize = 12;
/// Largest `N^k` accepted by the general dense solve.
pub const DENSE_K_MAX_LEN: usize = 4096;
/// Largest N accepted by the dense `R_k` assembly.
pub const RK_MAX_N: usize = 8;
/// Certificates above this are flagged in the gain provenance.
pub const CERTIFICATE_WARN: f64 = 1e-3;

/// Exponential-sum rule `1/x ≈ Σ w_j e^{-t_j x}` on `[1, R]`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct QuadratureRule {
    pub r: usize,
    /// Step in the logarithmic variable `s = ln t`.
    pub h: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    /// Upper end of the normalized interval.
    pub r_max: f64,
    /// Sup-error over a log-spaced probe grid on `[1, r_max]`.
    pub certificate: f64,
}

impl QuadratureRule {
    pub fn eval(&self, x: f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(t, w)| w * (-t * x).exp()).sum()
    }
}

fn log_grid(r_max: f64, count: usize) -> Vec<f64> {
    let lr = r_max.ln();
    (0..count).map(|i| (lr * i as f64 / (count - 1).max(1) as f64).exp()).collect()
}

fn rule_error(s_lo: f64, s_hi: f64, r: usize, probe: &[f64]) -> f64 {
    let h = (s_hi - s_lo) / (2 * r) as f64;
    let terms: Vec<(f64, f64)> = (0..=2 * r)
        .map(|j| {
            let t = (s_lo + j as f64 * h).exp();
            (t, h * t)
        })
        .collect();
    probe
        .iter()
        .map(|&x| (1.0 / x - terms.iter().map(|(t, w)| w * (-t * x).exp()).sum::<f64>()).abs())
        .fold(0.0, f64::max)
}

/// Sinc quadrature of `1/x = ∫ exp(s - x e^s) ds` with `2r+1` equispaced
/// points in `s`; the window `[s_lo, s_hi]` is chosen by a deterministic
/// coarse-to-fine search minimizing the probe sup-error on `[1, R]`,
/// `R = x_max / x_min`, and `λ = x_min`.
pub fn build_quadrature(x_min: f64, x_max: f64, r: usize) -> Result<QuadratureRule> {
    if !(x_min > 0.0) || !(x_max >= x_min) || !x_max.is_finite() {
        return Err(Error::Invalid(format!("spectral interval [{x_min}, {x_max}] must satisfy 0 < x_min <= x_max")));
    }
    if r < 1 {
        return Err(Error::Invalid("quadrature order r must be >= 1".into()));
    }
    let r_max = (x_max / x_min).max(1.0);
    let probe = log_grid(r_max, 120);
    let mut best = (f64::INFINITY, -10.0, 2.0);
    // coarse grid
    let mut lo = -50.0;
    while lo <= -0.5 {
        let mut hi = -1.0;
        while hi <= 5.0 {
            let err = rule_error(lo, hi, r, &probe);
            if err < best.0 {
                best = (err, lo, hi);
            }
            hi += 0.25;
        }
        lo += 1.0;
    }
    // local refinement around the incumbent
    let (mut dlo, mut dhi) = (1.0, 0.25);
    for _ in 0..6 {
        let (_, clo, chi) = best;
        for a in -4..=4 {
            for b in -4..=4 {
                let (l, h) = (clo + a as f64 * dlo / 4.0, chi + b as f64 * dhi / 4.0);
                if h <= l {
                    continue;
                }
                let err = rule_error(l, h, r, &probe);
                if err < best.0 {
                    best = (err, l, h);
                }
            }
        }
        dlo /= 4.0;
        dhi /= 4.0;
    }
    let (_, s_lo, s_hi) = best;
    let h = (s_hi - s_lo) / (2 * r) as f64;
    let nodes: Vec<f64> = (0..=2 * r).map(|j| (s_lo + j as f64 * h).exp()).collect();
    let weights = nodes.iter().map(|t| h * t).collect();
    let mut rule = QuadratureRule { r, h, nodes, weights, lambda: x_min, r_max, certificate: 0.0 };
    rule.certificate = log_grid(r_max, 2001).iter().map(|&x| (1.0 / x - rule.eval(x)).abs()).fold(0.0, f64::max);
    Ok(rule)
}

/// `e^{tM} V`.
pub fn expm_action(m: &Mat, t: f64, v: &Mat) -> Result<Mat> {
    if !(t >= 0.0) {
        return Err(Error::Invalid(format!("expm_action needs t >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(v.clone());
    }
    Ok(linalg::expm(m, t)? * v)
}

/// Spectral data of `M_π = Ẽ^{-1} Ã_π`: `(λ, x_max)` with `λ` the distance of
/// the spectrum to the imaginary axis and `x_max` twice the sum of the three
/// largest real-part magnitudes (repeating the largest when N < 3).
pub fn spectral_interval(red: &ReducedSystem, ric: &RiccatiSolution) -> Result<(f64, f64)> {
    let mpi = closed_loop_standard(red, ric)?;
    let ev = linalg::eigenvalues(&mpi);
    let abscissa = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if !(abscissa < 0.0) {
        return Err(Error::Unstabilizable(format!("closed-loop pencil has spectral abscissa {abscissa:e}")));
    }
    let mut mags: Vec<f64> = ev.iter().map(|z| z.re.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let top: f64 = (0..3).map(|i| mags[i.min(mags.len() - 1)]).sum();
    Ok((-abscissa, 2.0 * top))
}

fn closed_loop_standard(red: &ReducedSystem, ric: &RiccatiSolution) -> Result<Mat> {
    linalg::lu(&red.e, "reduced mass matrix")?
        .solve(&ric.api)
        .ok_or_else(|| Error::Singular { what: "reduced mass matrix".into(), cond: f64::INFINITY })
}

fn check_cap(n: usize, k: u32) -> Result<()> {
    let len = n.checked_pow(k).unwrap_or(usize::MAX);
    if len > crate::symtensor::DENSE_CAP {
        return Err(Error::Guard { what: format!("dense order-{k} tensor"), limit: crate::symtensor::DENSE_CAP, got: len });
    }
    Ok(())
}

/// Assembles `ℱ` from `W = Ẽ^T Π H̃` by index permutation.
pub fn assemble_f(red: &ReducedSystem, pi: &Mat) -> Result<DenseTensor> {
    let n = red.n();
    check_cap(n, 3)?;
    if pi.nrows() != n || pi.ncols() != n {
        return Err(Error::dim("Π", n, pi.nrows()));
    }
    if red.h.is_zero() {
        return DenseTensor::zeros(3, n);
    }
    let w = red.e.transpose() * pi * red.h.to_dense();
    // w[a + n*(c + n*b)] = W[a; b, c], symmetric in (b, c)
    let ws = w.as_slice();
    let mut f = vec![0.0; n * n * n];
    for c in 0..n {
        for b in 0..n {
            for a in 0..n {
                let s = ws[a + n * (b + n * c)] + ws[b + n * (a + n * c)] + ws[c + n * (a + n * b)];
                f[a + n * (b + n * c)] = -2.0 * s;
            }
        }
    }
    DenseTensor::from_vec(3, n, f)
}

/// Largest relative change of `ℱ` under the six slot permutations.
pub fn f_symmetry_defect(f: &DenseTensor) -> f64 {
    f.symmetry_defect()
}

/// Dense solve of `Σ_i (Ẽ ⊗ .. ⊗ Ã_π ⊗ .. ⊗ Ẽ)^T x = vec R` for order `k`.
pub fn solve_dense_k(k: usize, red: &ReducedSystem, ric: &RiccatiSolution, rk: &DenseTensor) -> Result<DenseTensor> {
    let n = red.n();
    if rk.order() != k || rk.dim() != n {
        return Err(Error::dim("right-hand side order", k, rk.order()));
    }
    let len = n.checked_pow(k as u32).unwrap_or(usize::MAX);
    if len > DENSE_K_MAX_LEN {
        return Err(Error::Guard { what: format!("dense order-{k} Lyapunov solve"), limit: DENSE_K_MAX_LEN, got: len });
    }
    if rk.as_slice().iter().all(|&v| v == 0.0) {
        return DenseTensor::zeros(k, n);
    }
    let et = red.e.transpose();
    let at = ric.api.transpose();
    let mut op = Mat::zeros(len, len);
    for pos in 0..k {
        let mut term = Mat::identity(1, 1);
        for slot in 0..k {
            term = term.kronecker(if slot == pos { &at } else { &et });
        }
        op += term;
    }
    let rhs = Vector::from_column_slice(rk.as_slice());
    let x = linalg::lu(&op, "tensor Lyapunov operator")?
        .solve(&rhs)
        .ok_or_else(|| Error::Singular { what: "tensor Lyapunov operator".into(), cond: f64::INFINITY })?;
    let res = (&op * &x - &rhs).norm();
    let tol = 1e-10 * (rhs.norm() + 1.0);
    if res > tol {
        return Err(Error::Invariant { what: "dense tensor Lyapunov residual".into(), defect: res, tol });
    }
    DenseTensor::from_vec(k, n, x.as_slice().to_vec())
}

/// Dense solve of `𝒜^T 𝒳 = ℱ` (guarded to `N <= 12`).
pub fn solve_dense_k3(red: &ReducedSystem, ric: &RiccatiSolution, f: &DenseTensor) -> Result<DenseTensor> {
    if red.n() > DENSE_K3_MAX_N {
        return Err(Error::Guard { what: "dense order-3 Lyapunov solve".into(), limit: DENSE_K3_MAX_N, got: red.n() });
    }
    solve_dense_k(3, red, ric, f)
}

/// `(Ẽ^T)^{⊗k} x`: value derivative from the solution of the Lyapunov equation.
pub fn value_derivative(red: &ReducedSystem, x: &DenseTensor) -> Result<DenseTensor> {
    let k = x.order();
    let n = x.dim();
    let et = red.e.transpose();
    let dims = vec![n; k];
    let mut cur = x.as_slice().to_vec();
    for mode in 0..k {
        cur = mode_apply(&cur, &dims, mode, &et)?.0;
    }
    DenseTensor::from_vec(k, n, cur)
}

/// How a gain was computed.
#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Provenance {
    Dense,
    Quadrature {
        r: usize,
        lambda: f64,
        r_max: f64,
        certificate: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        warning: Option<String>,
    },
}

/// Order-3 feedback gain, optionally with the value tensor `D³V`.
#[derive(Debug, Clone)]
pub struct Order3Gain {
    /// Flat `m·N²` gain, control index fastest.
    pub kt: Vec<f64>,
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
    pub provenance: Provenance,
    /// `D³V` in reduced coordinates (needed for the HJB residual).
    pub value: Option<DenseTensor>,
}

impl Order3Gain {
    /// `(y^T ⊗ z^T ⊗ I_m) K̃`: `Σ_{i,j} K̃[a, i, j] y_i z_j`.
    pub fn bilinear(&self, y: &[f64], z: &[f64]) -> Result<Vector> {
        if y.len() != self.n || z.len() != self.n {
            return Err(Error::dim("gain argument", self.n, y.len().max(z.len())));
        }
        let (m, n) = (self.m, self.n);
        let mut out = Vector::zeros(m);
        for j in 0..n {
            if z[j] == 0.0 {
                continue;
            }
            for i in 0..n {
                let c = y[i] * z[j];
                if c == 0.0 {
                    continue;
                }
                let base = m * (i + n * j);
                for a in 0..m {
                    out[a] += self.kt[base + a] * c;
                }
            }
        }
        Ok(out)
    }

    pub fn quadratic(&self, y: &[f64]) -> Result<Vector> {
        self.bilinear(y, y)
    }

    /// `max |K̃[a,i,j] - K̃[a,j,i]| / (max |K̃| + tiny)`.
    pub fn slot_symmetry_defect(&self) -> f64 {
        let (m, n) = (self.m, self.n);
        let scale = self.kt.iter().fold(0.0f64, |s, x| s.max(x.abs()));
        let mut d = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                for a in 0..m {
                    d = d.max((self.kt[a + m * (i + n * j)] - self.kt[a + m * (j + n * i)]).abs());
                }
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            d / scale
        }
    }

    pub fn norm(&self) -> f64 {
        self.kt.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Copy with every entry (gain and value tensor) set to zero.
    pub fn zeroed(&self) -> Order3Gain {
        let mut out = self.clone();
        out.kt.iter_mut().for_each(|x| *x = 0.0);
        out.value = self.value.as_ref().map(|v| v.scaled(0.0));
        out
    }
}

/// `K̃ = (Ẽ^T ⊗ Ẽ^T ⊗ B̃^T) 𝒳`.
pub fn gain_k3_dense(red: &ReducedSystem, alpha: f64, x: &DenseTensor) -> Result<Order3Gain> {
    let n = red.n();
    if n > DENSE_K3_MAX_N {
        return Err(Error::Guard { what: "dense order-3 gain".into(), limit: DENSE_K3_MAX_N, got: n });
    }
    if x.order() != 3 || x.dim() != n {
        return Err(Error::dim("𝒳 dimension", n, x.dim()));
    }
    let et = red.e.transpose();
    let kt = kron3_apply(&et, &et, &red.b.transpose(), x.as_slice())?;
    Ok(Order3Gain {
        kt,
        m: red.m(),
        n,
        alpha,
        provenance: Provenance::Dense,
        value: Some(value_derivative(red, x)?),
    })
}

/// Number of quadrature terms evaluated concurrently before being added to
/// the running sum (in index order).
const QUADRATURE_BATCH: usize = 8;

/// Quadrature gain; the value tensor `D³V` is accumulated alongside.
pub fn gain_k3_quadrature(red: &ReducedSystem, ric: &RiccatiSolution, rule: &QuadratureRule) -> Result<Order3Gain> {
    let n = red.n();
    let m = red.m();
    check_cap(n, 3)?;
    let f = assemble_f(red, &ric.pi)?;
    let warning = (rule.certificate > CERTIFICATE_WARN)
        .then(|| format!("quadrature certificate {:e} above {:e}", rule.certificate, CERTIFICATE_WARN));
    let provenance = Provenance::Quadrature {
        r: rule.r,
        lambda: rule.lambda,
        r_max: rule.r_max,
        certificate: rule.certificate,
        warning,
    };
    let mut kt = vec![0.0; m * n * n];
    let mut value = vec![0.0; n * n * n];
    if f.as_slice().iter().any(|&v| v != 0.0) {
        let mpi = closed_loop_standard(red, ric)?;
        // B̃^T Ẽ^{-T} = (Ẽ^{-1} B̃)^T
        let bhat_t = linalg::lu(&red.e, "reduced mass matrix")?
            .solve(&red.b)
            .ok_or_else(|| Error::Singular { what: "reduced mass matrix".into(), cond: f64::INFINITY })?
            .transpose();
        let id = Mat::identity(n, n);
        let term = |j: usize| -> Result<(Vec<f64>, Vec<f64>)> {
            let phi_t = expm_action(&mpi, rule.nodes[j] / rule.lambda, &id)?.transpose();
            let g = kron3_apply(&phi_t, &phi_t, &(&bhat_t * &phi_t), f.as_slice())?;
            let v = kron3_apply(&phi_t, &phi_t, &phi_t, f.as_slice())?;
            Ok((g, v))
        };
        let idx: Vec<usize> = (0..rule.nodes.len()).collect();
        for batch in idx.chunks(QUADRATURE_BATCH) {
            let terms: Vec<Result<(Vec<f64>, Vec<f64>)>> = batch.par_iter().map(|&j| term(j)).collect();
            for (&j, t) in batch.iter().zip(terms) {
                let (g, v) = t?;
                let c = -rule.weights[j] / rule.lambda;
                for (acc, x) in kt.iter_mut().zip(&g) {
                    *acc += c * x;
                }
                for (acc, x) in value.iter_mut().zip(&v) {
                    *acc += c * x;
                }
            }
        }
    }
    if kt.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("quadrature gain".into()));
    }
    Ok(Order3Gain { kt, m, n, alpha: ric.alpha, provenance, value: Some(DenseTensor::from_vec(3, n, value)?) })
}

/// Order-k right-hand side of the value-derivative Lyapunov equation
/// (k = 3, 4) from the value derivatives of orders `2..k-1`:
///
/// ```text
/// R_k = (1/2α) Σ_{i=2}^{k-2} C(k,i) Sym_{i,k-i}(𝒞_i ⊗ 𝒞_{k-i})
///       + (k(k-1)/2) Sym_{k-2,2}(D^{k-1}V ⊗ D²F),
/// 𝒞_i(z_1..z_i) = B̂^T D^{i+1}V(·, z_1..z_i),  B̂ = Ẽ^{-1} B̃.
/// ```
pub fn assemble_rk_dense(k: usize, value_derivs: &[DenseTensor], red: &ReducedSystem, alpha: f64) -> Result<DenseTensor> {
    if !(k == 3 || k == 4) {
        return Err(Error::Invalid(format!("R_k assembly supports k = 3, 4 (got {k})")));
    }
    let n = red.n();
    if n > RK_MAX_N {
        return Err(Error::Guard { what: "dense R_k assembly".into(), limit: RK_MAX_N, got: n });
    }
    if value_derivs.len() < k - 2 {
        return Err(Error::Invalid(format!("R_{k} needs value derivatives of orders 2..{}", k - 1)));
    }
    for (idx, d) in value_derivs.iter().take(k - 2).enumerate() {
        if d.order() != idx + 2 || d.dim() != n {
            return Err(Error::Invalid(format!("value derivative {idx} has order {} (expected {})", d.order(), idx + 2)));
        }
    }
    let deriv = |order: usize| &value_derivs[order - 2];
    let e_lu = linalg::lu(&red.e, "reduced mass matrix")?;
    let sing = || Error::Singular { what: "reduced mass matrix".into(), cond: f64::INFINITY };
    let bhat = e_lu.solve(&red.b).ok_or_else(sing)?;

    // D²F(e_p, e_q), columns p*N + q
    let mut d2f = Mat::zeros(n, n * n);
    for p in 0..n {
        for q in 0..n {
            let mut ep = vec![0.0; n];
            let mut eq = vec![0.0; n];
            ep[p] = 1.0;
            eq[q] = 1.0;
            let col = e_lu.solve(&red.h.eval_linearized(&ep, &eq)?).ok_or_else(sing)?;
            d2f.set_column(p * n + q, &(-col));
        }
    }

    let len = n.pow(k as u32);
    let mut out = vec![0.0; len];

    // (D^{k-1}V ⊗ D²F)[c_1..c_{k-2}, d1, d2] = Σ_q D^{k-1}V[q, c..] D²F[q; d1, d2]
    let vk1 = deriv(k - 1);
    let rest = n.pow((k - 2) as u32);
    let vmat = Mat::from_column_slice(n, rest, vk1.as_slice());
    let t = vmat.transpose() * &d2f;
    let t = DenseTensor::from_vec(k, n, t.as_slice().to_vec())?;
    let s = sym_ij(&t, k - 2, 2)?;
    let coef = (k * (k - 1) / 2) as f64;
    for (o, v) in out.iter_mut().zip(s.as_slice()) {
        *o += coef * v;
    }

    // control terms
    let c_of = |i: usize| -> Mat {
        let d = deriv(i + 1);
        let dm = Mat::from_column_slice(n, n.pow(i as u32), d.as_slice());
        bhat.transpose() * dm
    };
    for i in 2..=k.saturating_sub(2) {
        let (ci, cj) = (c_of(i), c_of(k - i));
        let prod = ci.transpose() * cj;
        let t = DenseTensor::from_vec(k, n, prod.as_slice().to_vec())?;
        let s = sym_ij(&t, i, k - i)?;
        let binom = (0..i).fold(1usize, |acc, q| acc * (k - q) / (q + 1)) as f64;
        let coef = binom / (2.0 * alpha);
        for (o, v) in out.iter_mut().zip(s.as_slice()) {
            *o += coef * v;
        }
    }
    DenseTensor::from_vec(k, n, out)
}
