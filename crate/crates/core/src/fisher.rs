//! Diagonal Fisher information for layer weights, its row-sum reduction and
//! second-moment statistics of layer inputs.
//!
//! Every estimate is a mean over samples. The per-sample gradient of the NLL
//! with respect to a weight `W_l` is the outer product `δ_{l,n} a_{l,n}ᵀ` of the
//! back-propagated output delta and the layer input, so the diagonal reduces
//! to `(1/N)·(Δ∘Δ)ᵀ(A∘A)` without forming per-sample gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{
    output_residual, softmax, Dataset, ForwardCache, LossFamily, Network, ParamVec, Targets,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Squared score at the observed labels.
    Empirical,
    /// Expectation of the squared score under the model's own predictive distribution.
    Exact,
    /// Constant weights; the Fisher-weighted methods then reduce to their Euclidean versions.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    /// One matrix per layer, shaped like its (effective) weight.
    pub per_layer_diag: Vec<Matrix>,
    /// Sum of each diagonal row: one weight per output unit.
    pub row_weights: Vec<Vec<f64>>,
    pub mode: FisherMode,
}

impl FisherInfo {
    pub fn from_diag(per_layer_diag: Vec<Matrix>, mode: FisherMode) -> Self {
        let row_weights = per_layer_diag.iter().map(Matrix::row_sums).collect();
        Self {
            per_layer_diag,
            row_weights,
            mode,
        }
    }

    /// Every row weight exactly `1`; each diagonal entry is `1/n_in`.
    pub fn uniform(net: &Network) -> Self {
        let per_layer_diag = net
            .layers
            .iter()
            .map(|l| Matrix::from_fn(l.n_out(), l.n_in(), |_, _| 1.0 / l.n_in() as f64))
            .collect();
        let row_weights = net.layers.iter().map(|l| vec![1.0; l.n_out()]).collect();
        Self {
            per_layer_diag,
            row_weights,
            mode: FisherMode::Uniform,
        }
    }

    pub fn estimate(net: &Network, data: &Dataset, mode: FisherMode) -> Result<Self> {
        match mode {
            FisherMode::Empirical => empirical_fisher_diag(net, data),
            FisherMode::Exact => exact_fisher_diag(net, data),
            FisherMode::Uniform => Ok(Self::uniform(net)),
        }
    }

    /// Row weights of `layer` floored at `1e-12·max(max_weight, 1)`.
    pub fn clamped_row_weights(&self, layer: usize) -> Vec<f64> {
        clamp_row_weights(&self.row_weights[layer])
    }
}

pub fn clamp_row_weights(w: &[f64]) -> Vec<f64> {
    let top = w.iter().copied().fold(0.0, f64::max).max(1.0);
    let floor = 1e-12 * top;
    w.iter()
        .map(|&v| if v.is_nan() { floor } else { v.max(floor) })
        .collect()
}

fn squared_outer_mean(deltas: &Matrix, inputs: &Matrix, acc: &mut Matrix, n: f64) {
    let d2 = deltas.map(|v| v * v);
    let a2 = inputs.map(|v| v * v);
    acc.axpy(1.0 / n, &d2.t_matmul(&a2));
}

pub fn empirical_fisher_diag(net: &Network, data: &Dataset) -> Result<FisherInfo> {
    let cache = net.forward_cached(&data.inputs)?;
    let resid = output_residual(net.loss, cache.output(), &data.targets)?;
    let deltas = net.backward_deltas(&cache, &resid);
    let n = data.len() as f64;
    let mut diag: Vec<Matrix> = cache
        .weights
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    for (l, acc) in diag.iter_mut().enumerate() {
        squared_outer_mean(&deltas[l], &cache.inputs[l], acc, n);
    }
    check_finite(&diag)?;
    Ok(FisherInfo::from_diag(diag, FisherMode::Empirical))
}

/// Requires a softmax head: the class sum is taken exactly.
pub fn exact_fisher_diag(net: &Network, data: &Dataset) -> Result<FisherInfo> {
    if net.loss != LossFamily::SoftmaxCrossEntropy {
        return Err(Error::Unsupported(
            "exact Fisher needs a softmax head".into(),
        ));
    }
    let cache = net.forward_cached(&data.inputs)?;
    let out = cache.output();
    let (n_samples, classes) = out.shape();
    let mut probs = Matrix::zeros(n_samples, classes);
    for i in 0..n_samples {
        probs.row_mut(i).copy_from_slice(&softmax(out.row(i)));
    }
    let n = n_samples as f64;
    let mut diag: Vec<Matrix> = cache
        .weights
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    for c in 0..classes {
        // Row n is sqrt(π_nc)·(π_n − e_c); squaring restores the π_nc weight.
        let mut d_out = probs.clone();
        for i in 0..n_samples {
            d_out[(i, c)] -= 1.0;
            let w = probs[(i, c)].sqrt();
            d_out.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        let deltas = net.backward_deltas(&cache, &d_out);
        for (l, acc) in diag.iter_mut().enumerate() {
            squared_outer_mean(&deltas[l], &cache.inputs[l], acc, n);
        }
    }
    check_finite(&diag)?;
    Ok(FisherInfo::from_diag(diag, FisherMode::Exact))
}

fn check_finite(diag: &[Matrix]) -> Result<()> {
    if diag.iter().all(Matrix::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite("Fisher diagonal".into()))
    }
}

/// Per-sample quadratic `vᵀ H v` of the NLL Hessian in the network output.
fn output_curvature(loss: LossFamily, out: &[f64], v: &[f64]) -> f64 {
    match loss {
        LossFamily::GaussianSquaredError => v.iter().map(|x| x * x).sum(),
        LossFamily::SoftmaxCrossEntropy => {
            let p = softmax(out);
            let mean: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
            p.iter().zip(v).map(|(a, b)| a * b * b).sum::<f64>() - mean * mean
        }
    }
}

/// `H v` for the output Hessian of one sample.
fn output_curvature_vec(loss: LossFamily, out: &[f64], v: &[f64]) -> Vec<f64> {
    match loss {
        LossFamily::GaussianSquaredError => v.to_vec(),
        LossFamily::SoftmaxCrossEntropy => {
            let p = softmax(out);
            let mean: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
            p.iter().zip(v).map(|(a, b)| a * (b - mean)).collect()
        }
    }
}

/// `Δᵀ G Δ` for the generalized Gauss–Newton matrix `G = (1/N)·Σ J_nᵀ H_n J_n`
/// of the mean NLL, evaluated by one tangent pass.
pub fn ggn_quadratic_form(net: &Network, cache: &ForwardCache, delta: &ParamVec) -> Result<f64> {
    let jv = net.jvp(cache, delta)?;
    let out = cache.output();
    let total: f64 = (0..out.rows())
        .map(|i| output_curvature(net.loss, out.row(i), jv.row(i)))
        .sum();
    Ok((total / out.rows() as f64).max(0.0))
}

/// `G Δ` in parameter order (tangent pass, curvature, then reverse pass).
pub fn ggn_vector_product(
    net: &Network,
    cache: &ForwardCache,
    delta: &ParamVec,
) -> Result<ParamVec> {
    let jv = net.jvp(cache, delta)?;
    let out = cache.output();
    let n = out.rows() as f64;
    let mut hv = Matrix::zeros(out.rows(), out.cols());
    for i in 0..out.rows() {
        let r = output_curvature_vec(net.loss, out.row(i), jv.row(i));
        hv.row_mut(i)
            .iter_mut()
            .zip(r)
            .for_each(|(d, v)| *d = v / n);
    }
    Ok(net.grads_to_params(&net.backward(cache, &hv)))
}

/// `Δᵀ I(θ) Δ` for the exact (expected) Fisher of a softmax head. For
/// exponential-family heads this equals the Gauss–Newton contraction.
pub fn exact_fim_quadratic_form(net: &Network, data: &Dataset, delta: &ParamVec) -> Result<f64> {
    if net.loss != LossFamily::SoftmaxCrossEntropy {
        return Err(Error::Unsupported(
            "exact FIM quadratic form needs a softmax head".into(),
        ));
    }
    if !matches!(data.targets, Targets::Classes { .. }) {
        return Err(Error::Unsupported(
            "softmax head needs class targets".into(),
        ));
    }
    let cache = net.forward_cached(&data.inputs)?;
    ggn_quadratic_form(net, &cache, delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    /// `(1/N)·Σ_n x_n x_nᵀ` of each layer's input.
    pub per_layer_gram: Vec<Matrix>,
    pub sample_count: usize,
}

pub fn collect_activation_stats(net: &Network, data: &Dataset) -> Result<ActivationStats> {
    let cache = net.forward_cached(&data.inputs)?;
    let n = data.len() as f64;
    let per_layer_gram = cache
        .inputs
        .iter()
        .map(|a| {
            let g = a.t_matmul(a).scale(1.0 / n);
            g.add(&g.transpose()).scale(0.5)
        })
        .collect();
    Ok(ActivationStats {
        per_layer_gram,
        sample_count: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Layer};
    use crate::random::{random_matrix, seeded_rng};
    use rand::Rng;

    fn small_net(seed: u64) -> Network {
        let mut rng = seeded_rng(seed);
        Network::random(
            &[3, 4, 3],
            Activation::Tanh,
            LossFamily::SoftmaxCrossEntropy,
            1.0,
            &mut rng,
        )
        .unwrap()
    }

    fn data(n: usize, seed: u64) -> Dataset {
        let labels = (0..n).map(|i| (i + seed as usize) % 3).collect();
        Dataset::classification(random_matrix(n, 3, seed), labels, 3, seed).unwrap()
    }

    #[test]
    fn single_sample_is_squared_gradient() {
        let net = small_net(1);
        let d = data(1, 2);
        let f = empirical_fisher_diag(&net, &d).unwrap();
        let (_, g) = net.loss_and_grad(&d).unwrap();
        for (diag, gl) in f.per_layer_diag.iter().zip(&g) {
            assert!(diag.sub(&gl.weight.map(|v| v * v)).max_abs() < 1e-12);
        }
        for (rw, diag) in f.row_weights.iter().zip(&f.per_layer_diag) {
            for (a, b) in rw.iter().zip(diag.row_sums()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn additive_over_samples() {
        let net = small_net(3);
        let d = data(4, 5);
        let all = empirical_fisher_diag(&net, &d).unwrap();
        let mut mean = all
            .per_layer_diag
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect::<Vec<_>>();
        for i in 0..4 {
            let one = empirical_fisher_diag(&net, &d.subset(&[i])).unwrap();
            for (m, o) in mean.iter_mut().zip(&one.per_layer_diag) {
                m.axpy(0.25, o);
            }
        }
        for (a, b) in all.per_layer_diag.iter().zip(&mean) {
            assert!(a.sub(b).max_abs() < 1e-12);
        }
    }

    #[test]
    fn dead_output_has_zero_fisher() {
        // Output row 1 of the last layer sees a zero input column, so its gradient is zero.
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.5, -0.3]]);
        let net = Network::new(
            vec![Layer::dense(w, vec![0.0; 2]).unwrap()],
            Activation::Identity,
            LossFamily::SoftmaxCrossEntropy,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]]);
        let d = Dataset::classification(x, vec![0, 1, 0], 2, 0).unwrap();
        for f in [
            empirical_fisher_diag(&net, &d).unwrap(),
            exact_fisher_diag(&net, &d).unwrap(),
        ] {
            assert_eq!(f.per_layer_diag[0][(0, 1)], 0.0);
            assert_eq!(f.per_layer_diag[0][(1, 1)], 0.0);
        }
    }

    #[test]
    fn exact_closed_form_single_layer() {
        let net = Network::new(
            vec![Layer::dense(Matrix::zeros(3, 2), vec![0.0; 3]).unwrap()],
            Activation::Identity,
            LossFamily::SoftmaxCrossEntropy,
        )
        .unwrap();
        let x = [0.7, -1.3];
        let d = Dataset::classification(Matrix::from_rows(&[x]), vec![0], 3, 0).unwrap();
        let f = exact_fisher_diag(&net, &d).unwrap();
        let pi: f64 = 1.0 / 3.0;
        // Σ_c π_c (δ_ic − π)² = π(1−π)
        for i in 0..3 {
            for j in 0..2 {
                let expect: f64 = (0..3)
                    .map(|c| pi * (if c == i { 1.0 - pi } else { -pi }).powi(2))
                    .sum::<f64>()
                    * x[j]
                    * x[j];
                assert!((f.per_layer_diag[0][(i, j)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn confident_predictions_have_vanishing_fisher() {
        let w = Matrix::from_rows(&[[60.0, 0.0], [-60.0, 0.0]]);
        let net = Network::new(
            vec![Layer::dense(w, vec![0.0; 2]).unwrap()],
            Activation::Identity,
            LossFamily::SoftmaxCrossEntropy,
        )
        .unwrap();
        let d = Dataset::classification(Matrix::from_rows(&[[1.0, 0.5]]), vec![0], 2, 0).unwrap();
        let f = exact_fisher_diag(&net, &d).unwrap();
        assert!(f.per_layer_diag[0].max_abs() < 1e-40);
    }

    #[test]
    fn exact_matches_monte_carlo_empirical() {
        let mut rng = seeded_rng(9);
        let net = Network::random(
            &[2, 3],
            Activation::Identity,
            LossFamily::SoftmaxCrossEntropy,
            1.0,
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.8, -0.4]]);
        let exact = exact_fisher_diag(
            &net,
            &Dataset::classification(x.clone(), vec![0], 3, 0).unwrap(),
        )
        .unwrap();
        let p = softmax(net.forward(&x).unwrap().row(0));
        let draws = 100_000;
        let mut per_class = Vec::new();
        for c in 0..3 {
            let d = Dataset::classification(x.clone(), vec![c], 3, 0).unwrap();
            per_class.push(empirical_fisher_diag(&net, &d).unwrap().per_layer_diag[0].clone());
        }
        let mut sum = Matrix::zeros(3, 2);
        let mut sum_sq = Matrix::zeros(3, 2);
        for _ in 0..draws {
            let u: f64 = rng.gen();
            let c = if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            };
            sum.axpy(1.0, &per_class[c]);
            sum_sq.axpy(1.0, &per_class[c].map(|v| v * v));
        }
        let n = draws as f64;
        for i in 0..3 {
            for j in 0..2 {
                let mean = sum[(i, j)] / n;
                let var = sum_sq[(i, j)] / n - mean * mean;
                let se = (var / n).sqrt();
                assert!((mean - exact.per_layer_diag[0][(i, j)]).abs() <= 3.0 * se + 1e-15);
            }
        }
    }

    fn dense_fim(net: &Network, data: &Dataset) -> Matrix {
        let cache = net.forward_cached(&data.inputs).unwrap();
        let p = net.num_params();
        let cols: Vec<Matrix> = (0..p)
            .map(|k| {
                let mut e = ParamVec::zeros(p);
                e.0[k] = 1.0;
                net.jvp(&cache, &e).unwrap()
            })
            .collect();
        let out = cache.output();
        let n = out.rows();
        let mut fim = Matrix::zeros(p, p);
        for s in 0..n {
            let pi = softmax(out.row(s));
            for a in 0..p {
                for b in 0..p {
                    let ja = cols[a].row(s);
                    let jb = cols[b].row(s);
                    let ma: f64 = pi.iter().zip(ja).map(|(x, y)| x * y).sum();
                    let mb: f64 = pi.iter().zip(jb).map(|(x, y)| x * y).sum();
                    let cross: f64 = (0..pi.len()).map(|c| pi[c] * ja[c] * jb[c]).sum();
                    fim[(a, b)] += (cross - ma * mb) / n as f64;
                }
            }
        }
        fim
    }

    #[test]
    fn quadratic_form_matches_dense_fim() {
        // 2 outputs, 2 inputs: four weights and two biases
        let mut rng = seeded_rng(2);
        let net = Network::random(
            &[2, 2],
            Activation::Identity,
            LossFamily::SoftmaxCrossEntropy,
            1.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(net.num_params(), 6);
        let d = Dataset::classification(random_matrix(5, 2, 1), vec![0, 1, 1, 0, 1], 2, 0).unwrap();
        let fim = dense_fim(&net, &d);
        for seed in 0..5 {
            let delta = ParamVec(random_matrix(1, 6, seed).into_vec());
            let q = exact_fim_quadratic_form(&net, &d, &delta).unwrap();
            let expect = dot_quad(&fim, &delta.0);
            assert!((q - expect).abs() < 1e-10);
        }
        assert_eq!(
            exact_fim_quadratic_form(&net, &d, &ParamVec::zeros(6)).unwrap(),
            0.0
        );
    }

    fn dot_quad(m: &Matrix, v: &[f64]) -> f64 {
        crate::linalg::dot(v, &m.mul_vec(v))
    }

    #[test]
    fn ggn_product_is_consistent_with_quadratic_form() {
        let net = small_net(4);
        let d = data(6, 1);
        let cache = net.forward_cached(&d.inputs).unwrap();
        let v = ParamVec(random_matrix(1, net.num_params(), 3).into_vec());
        let gv = ggn_vector_product(&net, &cache, &v).unwrap();
        let q = ggn_quadratic_form(&net, &cache, &v).unwrap();
        assert!((gv.dot(&v) - q).abs() < 1e-10 * q.max(1.0));
    }

    #[test]
    fn quadratic_form_is_kl_curvature() {
        let net = small_net(6);
        let d = data(7, 3);
        let delta = ParamVec(random_matrix(1, net.num_params(), 8).into_vec());
        let q = exact_fim_quadratic_form(&net, &d, &delta).unwrap();
        let base = net.forward(&d.inputs).unwrap();
        let kl = |t: f64| {
            let o = net.offset(&delta, t).unwrap().forward(&d.inputs).unwrap();
            (0..base.rows())
                .map(|i| {
                    let p = softmax(base.row(i));
                    let r = softmax(o.row(i));
                    p.iter().zip(&r).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
                })
                .sum::<f64>()
                / base.rows() as f64
        };
        let h = 1e-3;
        let second = (kl(h) - 2.0 * kl(0.0) + kl(-h)) / (h * h);
        assert!((second - q).abs() <= 1e-4 * q.max(1.0), "{second} vs {q}");
    }

    #[test]
    fn activation_gram_cases() {
        let x = [1.0, -2.0, 0.5];
        let net = Network::new(
            vec![Layer::dense(Matrix::identity(3), vec![0.0; 3]).unwrap(); 3],
            Activation::Identity,
            LossFamily::GaussianSquaredError,
        )
        .unwrap();
        let one = Dataset::regression(Matrix::from_rows(&[x]), Matrix::zeros(1, 3), 0).unwrap();
        let g = collect_activation_stats(&net, &one).unwrap();
        let outer = Matrix::from_fn(3, 3, |i, j| x[i] * x[j]);
        assert!(g.per_layer_gram[0].sub(&outer).max_abs() < 1e-15);

        let q = crate::linalg::svd(&random_matrix(3, 3, 4)).unwrap().u;
        let batch = Dataset::regression(q.clone(), Matrix::zeros(3, 3), 0).unwrap();
        let g = collect_activation_stats(&net, &batch).unwrap();
        assert!(
            g.per_layer_gram[0]
                .sub(&Matrix::identity(3).scale(1.0 / 3.0))
                .max_abs()
                < 1e-12
        );
        for l in 1..3 {
            assert!(g.per_layer_gram[l].sub(&g.per_layer_gram[0]).max_abs() < 1e-10);
        }
        assert_eq!(g.sample_count, 3);
    }

    #[test]
    fn clamp_floor() {
        assert_eq!(clamp_row_weights(&[0.0, 2.0]), vec![2e-12, 2.0]);
        assert_eq!(clamp_row_weights(&[0.0, 0.5]), vec![1e-12, 0.5]);
    }
}
