//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy of `A` are orthogonalized pairwise; the
//! accumulated rotations form `V`, column norms are the singular values and
//! normalized columns form `U`. Accurate to working precision for the small
//! dense matrices this crate handles.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 100;
pub const CONVERGENCE_TOL: f64 = 1e-12;

/// `a = u · diag(s) · vt` with `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-negative, non-increasing.
    pub s: Vec<f64>,
    /// `k × n`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.s.len()
    }

    /// `U[:, :r] · diag(s[:r]) · Vᵀ[:r, :]`
    pub fn reconstruct(&self, r: usize) -> Matrix {
        let r = r.min(self.s.len());
        let us = self.u.take_cols(r).scale_cols(&self.s[..r]);
        us.matmul(&self.vt.take_rows(r))
    }

    /// Sum of squared singular values beyond index `r`.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.s.iter().skip(r).map(|s| s * s).sum()
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::shape("svd of an empty matrix"));
    }
    let mut out = if m >= n {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Work on columns stored contiguously: cols[j] is column j of A.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= CONVERGENCE_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let s_max = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    let negligible = s_max * f64::EPSILON * (m.max(n) as f64);

    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s.push(sigma[j]);
        if sigma[j] > negligible && sigma[j] > 0.0 {
            let inv = 1.0 / sigma[j];
            for i in 0..m {
                u[(i, k)] = cols[j][i] * inv;
            }
        } else {
            deficient.push(k);
        }
        vt.row_mut(k).copy_from_slice(&v[j]);
    }
    if !deficient.is_empty() {
        complete_basis(&mut u, &deficient);
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite singular value".into()));
    }
    Ok(SvdResult { u, s, vt })
}

#[inline]
fn rotate(vs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vs.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis.
fn complete_basis(u: &mut Matrix, missing: &[usize]) {
    let (m, k) = u.shape();
    let mut filled: Vec<bool> = (0..k).map(|j| !missing.contains(&j)).collect();
    let mut candidate = 0;
    for &j in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt against every filled column.
            for _ in 0..2 {
                for (other, &is_filled) in filled.iter().enumerate() {
                    if !is_filled {
                        continue;
                    }
                    let col = u.column(other);
                    let proj = dot(&e, &col);
                    e.iter_mut().zip(&col).for_each(|(x, c)| *x -= proj * c);
                }
            }
            let nrm = norm(&e);
            if nrm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= nrm);
                u.set_column(j, &e);
                filled[j] = true;
                break;
            }
        }
    }
}

/// First entry of each left singular vector above 1e-12 in magnitude is made non-negative.
fn fix_signs(r: &mut SvdResult) {
    let (m, k) = r.u.shape();
    for j in 0..k {
        let lead = (0..m).map(|i| r.u[(i, j)]).find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..m {
                r.u[(i, j)] = -r.u[(i, j)];
            }
            r.vt.row_mut(j).iter_mut().for_each(|x| *x = -*x);
        }
    }
}
