//! Dense tensors, mode contractions, the vec-transpose permutation and the
//! shuffle symmetrization `Sym_{i,j}`.
//!
//! Layout follows the crate convention (see [`crate::model`]): first index
//! fastest, so `(M1 ⊗ M2 ⊗ M3) vec(T)` applies `M3` to the first index.

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Maximum number of entries of a dense tensor.
pub const DENSE_CAP: usize = 4_000_000;

/// Maximum order handled by the shuffle symmetrization.
pub const SYM_MAX_ORDER: usize = 6;

/// Dense order-k tensor of dimension N in every slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    order: usize,
    dim: usize,
    data: Vec<f64>,
}

fn checked_len(dim: usize, order: usize) -> Result<usize> {
    let mut len: usize = 1;
    for _ in 0..order {
        len = len
            .checked_mul(dim)
            .filter(|&l| l <= DENSE_CAP)
            .ok_or_else(|| Error::Guard { what: format!("dense order-{order} tensor"), limit: DENSE_CAP, got: usize::MAX })?;
    }
    Ok(len)
}

impl DenseTensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self> {
        let len = checked_len(dim, order)?;
        Ok(DenseTensor { order, dim, data: vec![0.0; len] })
    }

    pub fn from_vec(order: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let len = checked_len(dim, order)?;
        if data.len() != len {
            return Err(Error::dim(format!("order-{order} tensor data"), len, data.len()));
        }
        Ok(DenseTensor { order, dim, data })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.dim + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        DenseTensor { order: self.order, dim: self.dim, data: self.data.iter().map(|x| x * s).collect() }
    }

    /// `out[b_1..b_k] = T[b_{perm[0]}, .., b_{perm[k-1]}]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.order {
            return Err(Error::dim("permutation length", self.order, perm.len()));
        }
        let mut out = vec![0.0; self.data.len()];
        let mut b = vec![0usize; self.order];
        let mut src = vec![0usize; self.order];
        for (flat, o) in out.iter_mut().enumerate() {
            unflatten(flat, self.dim, &mut b);
            for (s, &p) in src.iter_mut().zip(perm) {
                *s = b[p];
            }
            *o = self.data[self.flat_index(&src)];
        }
        Ok(DenseTensor { order: self.order, dim: self.dim, data: out })
    }

    /// Largest `|T∘σ - T|_∞ / (|T|_∞ + 1)` over all slot permutations σ.
    pub fn symmetry_defect(&self) -> f64 {
        let scale = self.norm_inf() + 1.0;
        permutations(self.order)
            .iter()
            .map(|p| {
                let q = self.permuted(p).expect("permutation of matching length");
                q.data.iter().zip(&self.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0, f64::max)
            / scale
    }
}

pub(crate) fn unflatten(mut flat: usize, dim: usize, out: &mut [usize]) {
    for o in out.iter_mut() {
        *o = flat % dim;
        flat /= dim;
    }
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// `vec(M) -> vec(M^T)` for an `N × N` matrix stored column-major.
pub fn perm_transpose_apply(v: &[f64]) -> Result<Vec<f64>> {
    let n = (v.len() as f64).sqrt().round() as usize;
    if n * n != v.len() {
        return Err(Error::Invalid(format!("length {} is not a perfect square", v.len())));
    }
    let mut out = vec![0.0; v.len()];
    for j in 0..n {
        for i in 0..n {
            out[i + n * j] = v[j + n * i];
        }
    }
    Ok(out)
}

/// Applies `m` to slot `mode` of a tensor with slot sizes `dims`.
pub fn mode_apply(t: &[f64], dims: &[usize], mode: usize, m: &Mat) -> Result<(Vec<f64>, Vec<usize>)> {
    let total: usize = dims.iter().product();
    if t.len() != total {
        return Err(Error::dim("tensor length", total, t.len()));
    }
    if mode >= dims.len() {
        return Err(Error::IndexOutOfRange { what: "tensor mode".into(), index: mode, bound: dims.len() });
    }
    let d = dims[mode];
    if m.ncols() != d {
        return Err(Error::dim(format!("mode-{mode} factor columns"), d, m.ncols()));
    }
    let p = m.nrows();
    let left: usize = dims[..mode].iter().product();
    let right: usize = dims[mode + 1..].iter().product();
    let mut out = vec![0.0; left * p * right];
    for r in 0..right {
        let src = &t[left * d * r..left * d * (r + 1)];
        let dst = &mut out[left * p * r..left * p * (r + 1)];
        for q in 0..d {
            let col = &src[left * q..left * (q + 1)];
            for pp in 0..p {
                let w = m[(pp, q)];
                if w == 0.0 {
                    continue;
                }
                let row = &mut dst[left * pp..left * (pp + 1)];
                for (o, x) in row.iter_mut().zip(col) {
                    *o += w * x;
                }
            }
        }
    }
    let mut nd = dims.to_vec();
    nd[mode] = p;
    Ok((out, nd))
}

/// `(M1 ⊗ M2 ⊗ M3) v` for `v` of length `N³`, by contracting the first slot
/// with `M3`, then the second with `M2`, then the third with `M1`.
pub fn kron3_apply(m1: &Mat, m2: &Mat, m3: &Mat, v: &[f64]) -> Result<Vec<f64>> {
    let dims = [m3.ncols(), m2.ncols(), m1.ncols()];
    let (t, d) = mode_apply(v, &dims, 0, m3)?;
    let (t, d) = mode_apply(&t, &d, 1, m2)?;
    let (t, _) = mode_apply(&t, &d, 2, m1)?;
    Ok(t)
}

fn binom(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Shuffles of two blocks of sizes `i` and `j`, as slot maps: for each subset
/// `S` of `{0..i+j}` with `|S| = i` (lexicographic order), the map lists `S`
/// followed by its complement, both increasing.
pub fn shuffles(i: usize, j: usize) -> Vec<Vec<usize>> {
    let k = i + j;
    let mut out = Vec::with_capacity(binom(k, i));
    let mut subset: Vec<usize> = (0..i).collect();
    loop {
        let mut map = subset.clone();
        map.extend((0..k).filter(|x| !subset.contains(x)));
        out.push(map);
        // next i-subset in lexicographic order
        let mut pos = i;
        while pos > 0 && subset[pos - 1] == k - i + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        subset[pos - 1] += 1;
        for q in pos..i {
            subset[q] = subset[q - 1] + 1;
        }
    }
    out
}

/// Shuffle average `Sym_{i,j}(T)(z_1..z_k) = binom(k,i)^{-1} Σ_S T(z_S, z_{S^c})`.
pub fn sym_ij(t: &DenseTensor, i: usize, j: usize) -> Result<DenseTensor> {
    let k = i + j;
    if k != t.order {
        return Err(Error::dim("Sym_{i,j} order", t.order, k));
    }
    if k > SYM_MAX_ORDER {
        return Err(Error::Guard { what: "Sym_{i,j} order".into(), limit: SYM_MAX_ORDER, got: k });
    }
    let maps = shuffles(i, j);
    let w = 1.0 / maps.len() as f64;
    let mut out = vec![0.0; t.data.len()];
    let mut b = vec![0usize; k];
    let mut src = vec![0usize; k];
    for (flat, o) in out.iter_mut().enumerate() {
        unflatten(flat, t.dim, &mut b);
        let mut acc = 0.0;
        for map in &maps {
            for (s, &p) in src.iter_mut().zip(map) {
                *s = b[p];
            }
            acc += t.data[t.flat_index(&src)];
        }
        *o = acc * w;
    }
    Ok(DenseTensor { order: k, dim: t.dim, data: out })
}

/// Full contraction `T(z_1, .., z_k) = Σ T[b] z_1[b_1] .. z_k[b_k]`.
pub fn tensor_as_multilinear(t: &DenseTensor, zs: &[&[f64]]) -> Result<f64> {
    if zs.len() != t.order {
        return Err(Error::dim("number of arguments", t.order, zs.len()));
    }
    for z in zs {
        if z.len() != t.dim {
            return Err(Error::dim("multilinear argument", t.dim, z.len()));
        }
    }
    let mut cur = t.data.clone();
    for z in zs {
        let n = t.dim;
        let next: Vec<f64> = cur.chunks(n).map(|c| c.iter().zip(z.iter()).map(|(a, b)| a * b).sum()).collect();
        cur = next;
    }
    Ok(cur[0])
}
