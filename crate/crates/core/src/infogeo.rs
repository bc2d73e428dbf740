//! Categorical exponential family utilities: KL and Bregman divergences,
//! m-projection onto coordinate-restricted (e-flat) subfamilies, and the
//! second-order KL expansion check for networks.

use crate::error::{Error, Result};
use crate::fisher::exact_fim_quadratic_form;
use crate::linalg::{dot, pinv, svd, Matrix};
use crate::net::{log_sum_exp, Dataset, LossFamily, Network, ParamVec};

/// Softmax family in natural coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParams {
    pub logits: Vec<f64>,
}

impl CategoricalParams {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::arg("categorical needs at least one class"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self { logits })
    }

    /// Natural parameters `ln π`; every probability must be positive.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::arg("probabilities must be positive"));
        }
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|f| f - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }
}

/// `Σ_c π_c(p) ln(π_c(p)/π_c(q))`.
pub fn kl_categorical(p: &CategoricalParams, q: &CategoricalParams) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape(format!(
            "KL between dimensions {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let lp = p.log_probs();
    let lq = q.log_probs();
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

/// Strictly convex generators of Bregman divergences.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// `½‖x‖²`
    SquaredNorm,
    /// `Σ x_i ln x_i` on the positive orthant.
    NegativeEntropy,
    /// `½ xᵀ M x` for symmetric positive-definite `M`.
    MetricQuadratic(Matrix),
}

/// `φ(x) − φ(y) − ⟨∇φ(y), x − y⟩`.
pub fn bregman(phi: &Generator, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("Bregman arguments differ in length"));
    }
    let d = match phi {
        Generator::SquaredNorm => {
            0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
        Generator::NegativeEntropy => {
            if y.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::arg(
                    "negative entropy needs a strictly positive second argument",
                ));
            }
            if x.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::arg(
                    "negative entropy needs a non-negative first argument",
                ));
            }
            x.iter()
                .zip(y)
                .map(|(&a, &b)| {
                    let xlx = if a == 0.0 { 0.0 } else { a * (a / b).ln() };
                    xlx - a + b
                })
                .sum()
        }
        Generator::MetricQuadratic(m) => {
            if m.rows() != x.len() || m.cols() != x.len() {
                return Err(Error::shape("metric size"));
            }
            if !is_positive_definite(m) {
                return Err(Error::arg("metric must be symmetric positive definite"));
            }
            let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            0.5 * dot(&diff, &m.mul_vec(&diff))
        }
    };
    Ok(d.max(0.0))
}

fn is_positive_definite(m: &Matrix) -> bool {
    let n = m.rows();
    let sym = m.sub(&m.transpose()).max_abs() <= 1e-12 * m.max_abs().max(1.0);
    if !sym {
        return false;
    }
    // Cholesky succeeds iff M is positive definite.
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let d = m[(i, i)] - s;
                if !(d > 0.0) {
                    return false;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (m[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    true
}

/// Subfamily obtained by pinning some natural coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EFlatRestriction {
    pub frozen_indices: Vec<usize>,
    pub frozen_values: Vec<f64>,
}

impl EFlatRestriction {
    pub fn new(frozen_indices: Vec<usize>, frozen_values: Vec<f64>) -> Result<Self> {
        if frozen_indices.len() != frozen_values.len() {
            return Err(Error::shape("one value per frozen index"));
        }
        let mut seen = frozen_indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::arg("frozen indices must be distinct"));
        }
        Ok(Self {
            frozen_indices,
            frozen_values,
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(&i) = self.frozen_indices.iter().find(|&&i| i >= dim) {
            return Err(Error::arg(format!(
                "frozen index {i} outside dimension {dim}"
            )));
        }
        if self.frozen_indices.len() >= dim {
            return Err(Error::arg("restriction leaves no free coordinate"));
        }
        Ok(())
    }

    pub fn free_indices(&self, dim: usize) -> Vec<usize> {
        (0..dim)
            .filter(|i| !self.frozen_indices.contains(i))
            .collect()
    }

    pub fn contains(&self, q: &CategoricalParams, tol: f64) -> bool {
        self.frozen_indices
            .iter()
            .zip(&self.frozen_values)
            .all(|(&i, &v)| (q.logits[i] - v).abs() <= tol)
    }

    /// Point of the subfamily with the given free coordinates.
    pub fn point(&self, dim: usize, free: &[f64]) -> Result<CategoricalParams> {
        let idx = self.free_indices(dim);
        if idx.len() != free.len() {
            return Err(Error::shape("free coordinate count"));
        }
        let mut logits = vec![0.0; dim];
        for (&i, &v) in self.frozen_indices.iter().zip(&self.frozen_values) {
            logits[i] = v;
        }
        for (&i, &v) in idx.iter().zip(free) {
            logits[i] = v;
        }
        CategoricalParams::new(logits)
    }
}

pub const M_PROJECTION_TOL: f64 = 1e-10;
const NEWTON_ITERS: usize = 200;
const GRADIENT_ITERS: usize = 20_000;
const MAX_CONDITION: f64 = 1e12;

/// `argmin_{q ∈ sub} KL(p‖q)`. The objective is convex in the free natural
/// coordinates with gradient `π(q) − π(p)` there.
pub fn m_project(p: &CategoricalParams, sub: &EFlatRestriction) -> Result<CategoricalParams> {
    let dim = p.dim();
    sub.validate(dim)?;
    let free = sub.free_indices(dim);
    let target = p.probs();
    let mut q = sub.point(dim, &free.iter().map(|&i| p.logits[i]).collect::<Vec<_>>())?;
    if sub.frozen_indices.is_empty() {
        return Ok(q);
    }
    let objective = |q: &CategoricalParams| kl_categorical(p, q);
    let gradient = |q: &CategoricalParams| {
        let pq = q.probs();
        free.iter()
            .map(|&i| pq[i] - target[i])
            .collect::<Vec<f64>>()
    };

    let mut g = gradient(&q);
    let mut f = objective(&q)?;
    let mut iters = 0;
    while crate::linalg::norm(&g) > M_PROJECTION_TOL && iters < NEWTON_ITERS {
        iters += 1;
        let pq = q.probs();
        let k = free.len();
        let h = Matrix::from_fn(k, k, |a, b| {
            let (i, j) = (free[a], free[b]);
            let d = if a == b { pq[i] } else { 0.0 };
            d - pq[i] * pq[j]
        });
        let s = svd(&h)?.s;
        let cond = s[0] / s[k - 1].max(f64::MIN_POSITIVE);
        let dir: Vec<f64> = if cond > MAX_CONDITION {
            g.iter().map(|v| -v).collect()
        } else {
            pinv(&h, 0.0)?.mul_vec(&g).into_iter().map(|v| -v).collect()
        };
        let slope = dot(&g, &dir);
        let mut step = 1.0;
        let current: Vec<f64> = free.iter().map(|&i| q.logits[i]).collect();
        loop {
            let trial: Vec<f64> = current
                .iter()
                .zip(&dir)
                .map(|(c, d)| c + step * d)
                .collect();
            let cand = sub.point(dim, &trial)?;
            let fc = objective(&cand)?;
            let gc = gradient(&cand);
            let armijo = fc <= f + 1e-4 * step * slope;
            // Below round-off in the objective, progress is judged by the gradient.
            let flat = (fc - f).abs() <= 1e-14 * f.abs().max(1.0);
            if armijo || (flat && crate::linalg::norm(&gc) < crate::linalg::norm(&g)) {
                q = cand;
                f = fc;
                g = gc;
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                break;
            }
        }
        if step < 1e-16 {
            break;
        }
    }
    if crate::linalg::norm(&g) > M_PROJECTION_TOL {
        q = gradient_descent_polish(p, sub, q, &free, &target)?;
        g = {
            let pq = q.probs();
            free.iter().map(|&i| pq[i] - target[i]).collect()
        };
    }
    if crate::linalg::norm(&g) > M_PROJECTION_TOL {
        return Err(Error::Numerical(format!(
            "m-projection stalled with gradient norm {:e}",
            crate::linalg::norm(&g)
        )));
    }
    Ok(q)
}

fn gradient_descent_polish(
    p: &CategoricalParams,
    sub: &EFlatRestriction,
    mut q: CategoricalParams,
    free: &[usize],
    target: &[f64],
) -> Result<CategoricalParams> {
    let dim = p.dim();
    let mut step = 1.0;
    for _ in 0..GRADIENT_ITERS {
        let pq = q.probs();
        let g: Vec<f64> = free.iter().map(|&i| pq[i] - target[i]).collect();
        if crate::linalg::norm(&g) <= M_PROJECTION_TOL {
            break;
        }
        let f = kl_categorical(p, &q)?;
        let current: Vec<f64> = free.iter().map(|&i| q.logits[i]).collect();
        loop {
            let trial: Vec<f64> = current.iter().zip(&g).map(|(c, d)| c - step * d).collect();
            let cand = sub.point(dim, &trial)?;
            let pc = cand.probs();
            let gc: Vec<f64> = free.iter().map(|&i| pc[i] - target[i]).collect();
            let fc = kl_categorical(p, &cand)?;
            let flat = (fc - f).abs() <= 1e-14 * f.abs().max(1.0);
            if fc <= f - 0.5 * step * dot(&g, &g)
                || (flat && crate::linalg::norm(&gc) < crate::linalg::norm(&g))
                || step < 1e-12
            {
                q = cand;
                break;
            }
            step *= 0.5;
        }
        step = (step * 2.0).min(4.0);
    }
    Ok(q)
}

/// `|KL(p‖q) − KL(p‖p*) − KL(p*‖q)|` with `p*` the m-projection of `p`.
pub fn pythagorean_gap(
    p: &CategoricalParams,
    sub: &EFlatRestriction,
    q: &CategoricalParams,
) -> Result<f64> {
    if !sub.contains(q, 1e-12) {
        return Err(Error::arg("q must lie in the restricted family"));
    }
    let star = m_project(p, sub)?;
    Ok((kl_categorical(p, q)? - kl_categorical(p, &star)? - kl_categorical(&star, q)?).abs())
}

/// Mean over inputs of `KL(p_θ(·|x_n) ‖ p_{θ+tΔ}(·|x_n))`.
pub fn network_kl(net: &Network, data: &Dataset, delta: &ParamVec, t: f64) -> Result<f64> {
    let base = net.forward(&data.inputs)?;
    let moved = net.offset(delta, t)?.forward(&data.inputs)?;
    let mut total = 0.0;
    for i in 0..base.rows() {
        let p = CategoricalParams::new(base.row(i).to_vec())?;
        let q = CategoricalParams::new(moved.row(i).to_vec())?;
        total += kl_categorical(&p, &q)?;
    }
    let kl = total / base.rows() as f64;
    if !kl.is_finite() {
        return Err(Error::NonFinite("KL".into()));
    }
    Ok(kl)
}

/// `(t, |KL(p_θ‖p_{θ+tΔ}) − ½t²ΔᵀI(θ)Δ|)` for each scale.
pub fn fim_quadratic_check(
    net: &Network,
    data: &Dataset,
    delta: &ParamVec,
    scales: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if net.loss != LossFamily::SoftmaxCrossEntropy {
        return Err(Error::Unsupported(
            "KL expansion check needs a softmax head".into(),
        ));
    }
    if scales.iter().any(|&t| !(t > 0.0)) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::arg(
            "scales must be positive and strictly descending",
        ));
    }
    let quad = exact_fim_quadratic_form(net, data, delta)?;
    scales
        .iter()
        .map(|&t| {
            let kl = network_kl(net, data, delta, t)?;
            Ok((t, (kl - 0.5 * t * t * quad).abs()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;
    use crate::random::{random_matrix, seeded_rng};
    use rand::Rng;

    fn cat(probs: &[f64]) -> CategoricalParams {
        CategoricalParams::from_probs(probs).unwrap()
    }

    #[test]
    fn kl_values() {
        let p = cat(&[0.5, 0.5]);
        let q = cat(&[0.9, 0.1]);
        assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
        assert!((kl_categorical(&p, &q).unwrap() - 0.510826).abs() < 1e-6);
        assert!((kl_categorical(&q, &p).unwrap() - 0.368064).abs() < 1e-6);
        assert!(kl_categorical(&p, &cat(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn bregman_generators() {
        assert_eq!(
            bregman(&Generator::SquaredNorm, &[1.0, 0.0], &[0.0, 0.0]).unwrap(),
            0.5
        );
        let m = Generator::MetricQuadratic(Matrix::diag(&[2.0, 1.0]));
        assert_eq!(bregman(&m, &[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.5);
        let x = [0.2, 0.3, 0.5];
        let y = [0.6, 0.1, 0.3];
        let kl = kl_categorical(&cat(&x), &cat(&y)).unwrap();
        assert!((bregman(&Generator::NegativeEntropy, &x, &y).unwrap() - kl).abs() < 1e-9);
        assert!(bregman(&Generator::NegativeEntropy, &x, &[0.5, 0.5, 0.0]).is_err());
        let bad = Generator::MetricQuadratic(Matrix::diag(&[1.0, -1.0]));
        assert!(bregman(&bad, &[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn projection_fixed_point() {
        let sub = EFlatRestriction::new(vec![0, 2], vec![0.3, -1.0]).unwrap();
        let p = CategoricalParams::new(vec![0.3, 0.8, -1.0, 0.1]).unwrap();
        let star = m_project(&p, &sub).unwrap();
        assert!(kl_categorical(&p, &star).unwrap() < 1e-20);
    }

    #[test]
    fn projection_beats_grid() {
        let sub = EFlatRestriction::new(vec![2], vec![0.0]).unwrap();
        let p = CategoricalParams::new(vec![1.2, -0.4, 0.7]).unwrap();
        let star = m_project(&p, &sub).unwrap();
        let best = kl_categorical(&p, &star).unwrap();
        for a in 0..201 {
            for b in 0..201 {
                let x = -5.0 + 0.05 * a as f64;
                let y = -5.0 + 0.05 * b as f64;
                let q = sub.point(3, &[x, y]).unwrap();
                assert!(kl_categorical(&p, &q).unwrap() >= best - 1e-14);
            }
        }
        // A one-parameter subfamily: only the first logit is free.
        let sub = EFlatRestriction::new(vec![1, 2], vec![0.0, 0.5]).unwrap();
        let star = m_project(&p, &sub).unwrap();
        let best = kl_categorical(&p, &star).unwrap();
        assert!(best > 0.0);
        for a in 0..201 {
            let q = sub.point(3, &[-5.0 + 0.05 * a as f64]).unwrap();
            assert!(kl_categorical(&p, &q).unwrap() > best);
        }
    }

    #[test]
    fn pythagoras_random() {
        let mut rng = seeded_rng(11);
        for _ in 0..20 {
            let c = rng.gen_range(3..=5);
            let p =
                CategoricalParams::new((0..c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let sub =
                EFlatRestriction::new(vec![0, c - 1], vec![rng.gen_range(-1.0..1.0), 0.0]).unwrap();
            let free: Vec<f64> = (0..c - 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = sub.point(c, &free).unwrap();
            assert!(pythagorean_gap(&p, &sub, &q).unwrap() <= 1e-6);
        }
    }

    fn softmax_net() -> (Network, Dataset) {
        let mut rng = seeded_rng(3);
        let net = Network::random(
            &[4, 6, 3],
            Activation::Tanh,
            LossFamily::SoftmaxCrossEntropy,
            1.0,
            &mut rng,
        )
        .unwrap();
        let data = Dataset::classification(
            random_matrix(10, 4, 2),
            (0..10).map(|i| i % 3).collect(),
            3,
            0,
        )
        .unwrap();
        (net, data)
    }

    #[test]
    fn expansion_zero_direction() {
        let (net, data) = softmax_net();
        let res = fim_quadratic_check(
            &net,
            &data,
            &ParamVec::zeros(net.num_params()),
            &[1e-1, 1e-2],
        )
        .unwrap();
        assert!(res.iter().all(|&(_, r)| r == 0.0));
    }

    #[test]
    fn expansion_residual_is_cubic() {
        let (net, data) = softmax_net();
        let delta = ParamVec(random_matrix(1, net.num_params(), 5).into_vec());
        let res = fim_quadratic_check(&net, &data, &delta, &[1e-2, 5e-3, 2.5e-3]).unwrap();
        for w in res.windows(2) {
            assert!(w[1].1 / w[0].1 <= 0.25, "{res:?}");
        }
        let sweep = fim_quadratic_check(&net, &data, &delta, &[1e-1, 1e-2, 1e-3]).unwrap();
        let normalized: Vec<f64> = sweep.iter().map(|&(t, r)| r / (t * t)).collect();
        assert!(normalized.windows(2).all(|w| w[1] < w[0]), "{normalized:?}");
    }
}
