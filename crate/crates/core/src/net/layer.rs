use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

/// Plain affine layer `z = x·Wᵀ + b` with `W` of shape `n_out × n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Set on the inner factor of a compiled low-rank pair: no activation is
    /// applied to its output and its (zero) bias is not a parameter.
    pub bottleneck: bool,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            bottleneck: false,
        })
    }
}

/// A weight held as `U · S · Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedLayer {
    /// `n_out × r`
    pub u: Matrix,
    /// `r × r`, dense while training (only diagonal right after a re-factorization).
    pub s: Matrix,
    /// `r × n_in`
    pub vt: Matrix,
    pub bias: Vec<f64>,
    pub u_frozen: bool,
    pub vt_frozen: bool,
}

impl FactorizedLayer {
    pub fn rank(&self) -> usize {
        self.s.rows()
    }

    pub fn effective_weight(&self) -> Matrix {
        self.u.matmul(&self.s).matmul(&self.vt)
    }

    pub fn check(&self) -> Result<()> {
        let r = self.s.rows();
        if self.s.cols() != r || self.u.cols() != r || self.vt.rows() != r {
            return Err(Error::shape(format!(
                "factor shapes U {:?}, S {:?}, Vt {:?}",
                self.u.shape(),
                self.s.shape(),
                self.vt.shape()
            )));
        }
        if self.bias.len() != self.u.rows() {
            return Err(Error::shape("factorized bias length"));
        }
        Ok(())
    }

    /// Largest deviation of `UᵀU` and `V Vᵀ` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        self.u
            .orthonormality_defect()
            .max(self.vt.transpose().orthonormality_defect())
    }
}

/// Truncated-SVD conversion of a dense weight into frozen-basis form.
pub fn factorize_layer(w: &Matrix, bias: &[f64], r: usize) -> Result<FactorizedLayer> {
    let k = w.rows().min(w.cols());
    if r == 0 || r > k {
        return Err(Error::arg(format!(
            "factorization rank {r} outside 1..={k}"
        )));
    }
    if bias.len() != w.rows() {
        return Err(Error::shape("bias length does not match weight rows"));
    }
    let dec = svd(w)?;
    Ok(FactorizedLayer {
        u: dec.u.take_cols(r),
        s: Matrix::diag(&dec.s[..r]),
        vt: dec.vt.take_rows(r),
        bias: bias.to_vec(),
        u_frozen: true,
        vt_frozen: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(DenseLayer),
    Factorized(FactorizedLayer),
}

impl Layer {
    pub fn dense(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        DenseLayer::new(weight, bias).map(Layer::Dense)
    }

    pub fn n_in(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.cols(),
            Layer::Factorized(f) => f.vt.cols(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.rows(),
            Layer::Factorized(f) => f.u.rows(),
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Dense(d) => &d.bias,
            Layer::Factorized(f) => &f.bias,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Layer::Dense(d) => &mut d.bias,
            Layer::Factorized(f) => &mut f.bias,
        }
    }

    pub fn effective_weight(&self) -> Matrix {
        match self {
            Layer::Dense(d) => d.weight.clone(),
            Layer::Factorized(f) => f.effective_weight(),
        }
    }

    /// Whether the network activation is applied to this layer's output.
    pub fn is_bottleneck(&self) -> bool {
        matches!(self, Layer::Dense(d) if d.bottleneck)
    }

    /// Current rank budget: the inner dimension of a factorized layer,
    /// `min(n_out, n_in)` for a dense one.
    pub fn rank(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.rows().min(d.weight.cols()),
            Layer::Factorized(f) => f.rank(),
        }
    }

    /// Parameters this layer would occupy once compiled for deployment.
    pub fn deployed_param_count(&self) -> usize {
        match self {
            Layer::Dense(d) if d.bottleneck => d.weight.rows() * d.weight.cols(),
            Layer::Dense(d) => d.weight.rows() * d.weight.cols() + d.bias.len(),
            Layer::Factorized(f) => f.rank() * (f.u.rows() + f.vt.cols()) + f.bias.len(),
        }
    }

    /// Number of scalars in the flattened parameter vector (frozen ones included).
    pub fn num_params(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.rows() * d.weight.cols() + d.bias.len(),
            Layer::Factorized(f) => {
                f.u.rows() * f.u.cols()
                    + f.s.rows() * f.s.cols()
                    + f.vt.rows() * f.vt.cols()
                    + f.bias.len()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_matrix;

    #[test]
    fn full_rank_factorization_reconstructs() {
        let w = random_matrix(5, 4, 1);
        let f = factorize_layer(&w, &[0.0; 5], 4).unwrap();
        assert!(f.effective_weight().sub(&w).max_abs() < 1e-9);
        assert!(f.orthonormality_defect() < 1e-8);
    }

    #[test]
    fn rank_one_of_diagonal() {
        let f = factorize_layer(&Matrix::diag(&[3.0, 1.0]), &[0.0, 0.0], 1).unwrap();
        assert!(
            f.effective_weight()
                .sub(&Matrix::diag(&[3.0, 0.0]))
                .max_abs()
                < 1e-15
        );
    }

    #[test]
    fn tail_energy_error() {
        let w = random_matrix(8, 6, 4);
        let dec = svd(&w).unwrap();
        let f = factorize_layer(&w, &[0.0; 8], 3).unwrap();
        let err = f.effective_weight().sub(&w).frobenius();
        let tail = dec.tail_energy(3).sqrt();
        assert!((err - tail).abs() <= 1e-9 * tail.max(1.0));
    }

    #[test]
    fn rank_out_of_range() {
        let w = random_matrix(3, 2, 0);
        assert!(factorize_layer(&w, &[0.0; 3], 0).is_err());
        assert!(factorize_layer(&w, &[0.0; 3], 3).is_err());
    }
}
