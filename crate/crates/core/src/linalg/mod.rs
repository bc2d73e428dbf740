//! Dense linear algebra: SVD, best low-rank approximation, the proximal
//! operator of the rank function and a regularized pseudo-inverse.

mod matrix;
mod svd;

pub use matrix::{dot, norm, Matrix};
pub use svd::{svd, SvdResult, CONVERGENCE_TOL, MAX_SWEEPS};

use crate::error::{Error, Result};

/// Relative tolerance under which a singular value equal to the threshold is kept.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Best rank-`r` approximation in Frobenius norm.
pub fn truncate(a: &Matrix, r: usize) -> Result<Matrix> {
    let k = a.rows().min(a.cols());
    if r > k {
        return Err(Error::arg(format!("rank {r} exceeds min dimension {k}")));
    }
    if r == 0 {
        return Ok(Matrix::zeros(a.rows(), a.cols()));
    }
    Ok(svd(a)?.reconstruct(r))
}

/// Result of [`hard_threshold_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholded {
    pub matrix: Matrix,
    pub rank: usize,
    /// Full spectrum of the input, descending.
    pub singular_values: Vec<f64>,
}

impl Thresholded {
    /// Smallest retained singular value, `None` when everything was dropped.
    pub fn min_retained(&self) -> Option<f64> {
        self.rank.checked_sub(1).map(|i| self.singular_values[i])
    }
}

/// Zeroes every singular value strictly below `tau` (ties within
/// [`TIE_TOLERANCE`] are kept). Returns the thresholded matrix and its rank.
/// When nothing is dropped the input is returned unchanged.
pub fn hard_threshold(y: &Matrix, tau: f64) -> Result<(Matrix, usize)> {
    hard_threshold_detailed(y, tau).map(|t| (t.matrix, t.rank))
}

pub fn hard_threshold_detailed(y: &Matrix, tau: f64) -> Result<Thresholded> {
    let dec = svd(y)?;
    let cutoff = tau * (1.0 - TIE_TOLERANCE);
    let kept = dec
        .s
        .iter()
        .take_while(|&&s| s > 0.0 && s >= cutoff)
        .count();
    let matrix = if kept == dec.s.len() {
        y.clone()
    } else {
        dec.reconstruct(kept)
    };
    Ok(Thresholded {
        matrix,
        rank: kept,
        singular_values: dec.s,
    })
}

/// `argmin_W ½‖W − Y‖²_F + γ·rank(W)`: keeps `σ_i ≥ sqrt(2γ)`.
pub fn rank_prox(y: &Matrix, gamma: f64) -> Result<Matrix> {
    rank_prox_with_rank(y, gamma).map(|(w, _)| w)
}

pub fn rank_prox_with_rank(y: &Matrix, gamma: f64) -> Result<(Matrix, usize)> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::arg(format!(
            "rank_prox needs gamma > 0, got {gamma}"
        )));
    }
    hard_threshold(y, (2.0 * gamma).sqrt())
}

/// Tikhonov-regularized pseudo-inverse: each `σ` maps to `σ / (σ² + eps)`.
/// With `eps = 0`, singular values at working-precision noise level map to zero.
pub fn pinv(a: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps >= 0.0) {
        return Err(Error::arg(format!(
            "pinv eps must be non-negative, got {eps}"
        )));
    }
    let dec = svd(a)?;
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    let floor = s_max * f64::EPSILON * (a.rows().max(a.cols()) as f64);
    let inv: Vec<f64> = dec
        .s
        .iter()
        .map(|&s| {
            if eps == 0.0 {
                if s > floor {
                    1.0 / s
                } else {
                    0.0
                }
            } else {
                s / (s * s + eps)
            }
        })
        .collect();
    // A⁺ = V · diag(inv) · Uᵀ
    Ok(dec.vt.transpose().scale_cols(&inv).matmul_t(&dec.u))
}

/// Symmetric square root of a positive-semidefinite matrix with an optional
/// ridge: `(G + eps·I)^{1/2}`.
pub fn psd_sqrt(g: &Matrix, eps: f64) -> Result<Matrix> {
    if g.rows() != g.cols() {
        return Err(Error::shape("psd_sqrt needs a square matrix"));
    }
    let dec = svd(g).map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e}")))?;
    // For symmetric PSD input the left singular vectors are eigenvectors.
    let roots: Vec<f64> = dec.s.iter().map(|&s| (s + eps).sqrt()).collect();
    let half = dec.u.scale_cols(&roots).matmul_t(&dec.u);
    Ok(half.add(&half.transpose()).scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_matrix;

    #[test]
    fn full_rank_truncation_is_identity() {
        let a = random_matrix(5, 4, 3);
        assert!(truncate(&a, 4).unwrap().sub(&a).max_abs() < 1e-12);
        assert!(truncate(&a, 5).is_err());
    }

    #[test]
    fn keep_largest_value() {
        let t = truncate(&Matrix::diag(&[3.0, 1.0]), 1).unwrap();
        assert!(t.sub(&Matrix::diag(&[3.0, 0.0])).max_abs() < 1e-15);
    }

    #[test]
    fn tail_energy_matches() {
        let a = random_matrix(5, 4, 11);
        let dec = svd(&a).unwrap();
        let err = truncate(&a, 2).unwrap().sub(&a).frobenius();
        let expected = (dec.s[2].powi(2) + dec.s[3].powi(2)).sqrt();
        assert!((err - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn prox_drops_below_threshold() {
        // costs over r = 0, 1, 2 are 5, 2.5, 4
        let w = rank_prox(&Matrix::diag(&[3.0, 1.0]), 2.0).unwrap();
        assert!(w.sub(&Matrix::diag(&[3.0, 0.0])).max_abs() < 1e-14);
        let z = Matrix::zeros(3, 2);
        assert_eq!(rank_prox(&z, 0.7).unwrap(), z);
        assert!(rank_prox(&z, 0.0).is_err());
    }

    #[test]
    fn prox_keeps_ties() {
        // sqrt(2 * 0.5) == 1 exactly
        let (_, r) = rank_prox_with_rank(&Matrix::diag(&[3.0, 1.0]), 0.5).unwrap();
        assert_eq!(r, 2);
    }

    #[test]
    fn pinv_cases() {
        assert_eq!(
            pinv(&Matrix::identity(3), 0.0).unwrap(),
            Matrix::identity(3)
        );
        let p = pinv(&Matrix::diag(&[2.0, 0.0]), 0.0).unwrap();
        assert!(p.sub(&Matrix::diag(&[0.5, 0.0])).max_abs() < 1e-15);
        let a = random_matrix(4, 4, 5);
        let prod = a.matmul(&pinv(&a, 0.0).unwrap());
        assert!(prod.sub(&Matrix::identity(4)).max_abs() < 1e-8);
        let ridge = pinv(&Matrix::diag(&[1.0]), 1.0).unwrap();
        assert!((ridge[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let b = random_matrix(6, 4, 2);
        let g = b.t_matmul(&b);
        let h = psd_sqrt(&g, 0.0).unwrap();
        assert!(h.matmul(&h).sub(&g).max_abs() < 1e-9);
    }
}
