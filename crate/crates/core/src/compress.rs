//! One-shot low-rank projections of weight matrices and the rank-selection
//! rules shared by the one-shot and during-training methods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{clamp_row_weights, empirical_fisher_diag};
use crate::linalg::{pinv, psd_sqrt, svd, truncate, Matrix};
use crate::net::{Dataset, Layer, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Keep `σ_i ≥ β·σ_max`.
    MaxSv,
    /// Per-layer retained-energy fraction.
    LayerEnergy,
    /// Per-layer retained energy of the Fisher-weighted spectrum.
    FisherEnergy,
    /// Retained energy pooled across layers.
    GlobalEnergy,
    /// Fisher-weighted spectra pooled across layers.
    GlobalFisherEnergy,
    /// A fixed rank per layer.
    FixedRank,
}

impl Criterion {
    pub fn is_energy(self) -> bool {
        !matches!(self, Criterion::MaxSv | Criterion::FixedRank)
    }

    pub fn is_global(self) -> bool {
        matches!(
            self,
            Criterion::GlobalEnergy | Criterion::GlobalFisherEnergy
        )
    }

    pub fn is_fisher(self) -> bool {
        matches!(
            self,
            Criterion::FisherEnergy | Criterion::GlobalFisherEnergy
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSchedule {
    Constant,
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    Epoch,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSchedule {
    pub criterion: Criterion,
    /// Cutoff fraction in `(0, 1]` (`[0, 1]` for `max_sv`).
    pub beta: f64,
    /// Used by [`Criterion::FixedRank`].
    pub fixed_rank: Option<usize>,
    pub frequency_nu: usize,
    pub delay_d: usize,
    pub unit: ScheduleUnit,
    pub depth_schedule: DepthSchedule,
    pub min_rank_fraction: f64,
}

impl Default for RankSchedule {
    fn default() -> Self {
        Self {
            criterion: Criterion::MaxSv,
            beta: 0.1,
            fixed_rank: None,
            frequency_nu: 50,
            delay_d: 100,
            unit: ScheduleUnit::Step,
            depth_schedule: DepthSchedule::Constant,
            min_rank_fraction: 0.01,
        }
    }
}

impl RankSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.criterion == Criterion::FixedRank {
            if !self.fixed_rank.is_some_and(|r| r >= 1) {
                return Err(Error::arg(
                    "fixed_rank criterion needs a rank of at least 1",
                ));
            }
        } else {
            let lo_ok = if self.criterion == Criterion::MaxSv {
                self.beta >= 0.0
            } else {
                self.beta > 0.0
            };
            if !lo_ok || self.beta > 1.0 {
                return Err(Error::arg(format!("beta {} outside its range", self.beta)));
            }
        }
        if self.frequency_nu == 0 {
            return Err(Error::arg("frequency must be at least 1"));
        }
        if !(self.min_rank_fraction > 0.0 && self.min_rank_fraction < 1.0) {
            return Err(Error::arg("min_rank_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `ceil(min_rank_fraction · full_rank)`, at least 1.
    pub fn min_rank(&self, full_rank: usize) -> usize {
        ((self.min_rank_fraction * full_rank as f64).ceil() as usize).clamp(1, full_rank.max(1))
    }
}

/// How row weights enter a weighted SVD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowWeighting {
    /// `diag(sqrt(w))`: the exact minimizer of the row-weighted squared error.
    #[default]
    Sqrt,
    /// `diag(w)` before the SVD and its inverse after.
    Literal,
}

impl RowWeighting {
    pub fn scales(self, row_weights: &[f64]) -> Vec<f64> {
        let w = clamp_row_weights(row_weights);
        match self {
            RowWeighting::Sqrt => w.iter().map(|v| v.sqrt()).collect(),
            RowWeighting::Literal => w,
        }
    }
}

pub fn euclidean_project(w: &Matrix, r: usize) -> Result<Matrix> {
    truncate(w, r)
}

/// Factors of a weighted projection; `u` is generally not orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl WeightedFactors {
    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_cols(&self.s).matmul(&self.vt)
    }
}

pub fn fwsvd_project(w: &Matrix, row_weights: &[f64], r: usize) -> Result<WeightedFactors> {
    fwsvd_project_with(w, row_weights, r, RowWeighting::Sqrt)
}

pub fn fwsvd_project_with(
    w: &Matrix,
    row_weights: &[f64],
    r: usize,
    form: RowWeighting,
) -> Result<WeightedFactors> {
    if row_weights.len() != w.rows() {
        return Err(Error::shape(format!(
            "{} row weights for {} rows",
            row_weights.len(),
            w.rows()
        )));
    }
    if row_weights.iter().any(|&v| v < 0.0) {
        return Err(Error::arg("row weights must be non-negative"));
    }
    let k = w.rows().min(w.cols());
    if r == 0 || r > k {
        return Err(Error::arg(format!("rank {r} outside 1..={k}")));
    }
    let d = form.scales(row_weights);
    let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
    let dec = svd(&w.scale_rows(&d))?;
    Ok(WeightedFactors {
        u: dec.u.take_cols(r).scale_rows(&inv),
        s: dec.s[..r].to_vec(),
        vt: dec.vt.take_rows(r),
    })
}

/// `Σ_ij w_i (A − B)²_ij`
pub fn row_weighted_error(a: &Matrix, b: &Matrix, row_weights: &[f64]) -> f64 {
    let diff = a.sub(b);
    (0..diff.rows())
        .map(|i| row_weights[i] * diff.row(i).iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// `Σ_ij M_ij (A − B)²_ij`
pub fn elementwise_weighted_error(a: &Matrix, b: &Matrix, weights: &Matrix) -> f64 {
    a.sub(b)
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .map(|(d, m)| m * d * d)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsResult {
    /// `m × r`
    pub a: Matrix,
    /// `n × r`
    pub b: Matrix,
    /// Objective after initialization and after every half-step.
    pub objective: Vec<f64>,
}

impl AlsResult {
    pub fn reconstruct(&self) -> Matrix {
        self.a.matmul_t(&self.b)
    }
}

const ALS_RIDGE: f64 = 1e-10;

/// Alternating least squares for `min Σ M_ij (W − ABᵀ)²_ij`, started from
/// the truncated SVD. Each half-step solves one ridge-stabilized normal
/// equation per row.
pub fn weighted_lowrank_als(
    w: &Matrix,
    weights: &Matrix,
    r: usize,
    iters: usize,
) -> Result<AlsResult> {
    if weights.shape() != w.shape() {
        return Err(Error::shape("weights must match the matrix shape"));
    }
    if weights.as_slice().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::arg("weights must be non-negative"));
    }
    if iters == 0 {
        return Err(Error::arg("at least one iteration"));
    }
    let k = w.rows().min(w.cols());
    if r == 0 || r > k {
        return Err(Error::arg(format!("rank {r} outside 1..={k}")));
    }
    let dec = svd(w)?;
    let roots: Vec<f64> = dec.s[..r].iter().map(|s| s.sqrt()).collect();
    let mut a = dec.u.take_cols(r).scale_cols(&roots);
    let mut b = dec.vt.take_rows(r).transpose().scale_cols(&roots);
    let mut objective = vec![elementwise_weighted_error(w, &a.matmul_t(&b), weights)];
    for _ in 0..iters {
        a = als_half_step(w, weights, &b)?;
        objective.push(elementwise_weighted_error(w, &a.matmul_t(&b), weights));
        b = als_half_step(&w.transpose(), &weights.transpose(), &a)?;
        objective.push(elementwise_weighted_error(w, &a.matmul_t(&b), weights));
    }
    Ok(AlsResult { a, b, objective })
}

/// Rows `a_i = argmin Σ_j M_ij (W_ij − a·b_j)²` for fixed `B`.
fn als_half_step(w: &Matrix, weights: &Matrix, b: &Matrix) -> Result<Matrix> {
    let r = b.cols();
    let mut out = Matrix::zeros(w.rows(), r);
    for i in 0..w.rows() {
        let m = weights.row(i);
        let mut lhs = Matrix::zeros(r, r);
        let mut rhs = vec![0.0; r];
        for j in 0..w.cols() {
            if m[j] == 0.0 {
                continue;
            }
            let bj = b.row(j);
            for p in 0..r {
                rhs[p] += m[j] * w[(i, j)] * bj[p];
                for q in 0..r {
                    lhs[(p, q)] += m[j] * bj[p] * bj[q];
                }
            }
        }
        let scale = lhs.trace().max(1.0);
        for p in 0..r {
            lhs[(p, p)] += ALS_RIDGE * scale;
        }
        let x = solve_spd(&lhs, &rhs)
            .ok_or_else(|| Error::Numerical(format!("singular normal equations at row {i}")))?;
        out.row_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}

/// Cholesky solve; `None` when the matrix is not numerically positive definite.
fn solve_spd(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let d = a[(i, i)] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        y[i] = (b[i] - s) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (y[i] - s) / l[(i, i)];
    }
    Some(x)
}

/// Rank-`r` minimizer of `‖(W′ − W)·G^{1/2}‖_F` for the input Gram matrix `G`.
pub fn activation_project(w: &Matrix, gram: &Matrix, r: usize, eps: f64) -> Result<Matrix> {
    if gram.rows() != w.cols() || gram.cols() != w.cols() {
        return Err(Error::shape(format!(
            "Gram {:?} for weight {:?}",
            gram.shape(),
            w.shape()
        )));
    }
    let half = psd_sqrt(gram, eps)?;
    Ok(truncate(&w.matmul(&half), r)?.matmul(&pinv(&half, 0.0)?))
}

/// `‖(A − B)·G^{1/2}‖²_F = tr((A−B) G (A−B)ᵀ)`
pub fn gram_weighted_error(a: &Matrix, b: &Matrix, gram: &Matrix) -> f64 {
    let d = a.sub(b);
    d.matmul(gram).hadamard(&d).as_slice().iter().sum()
}

/// Second-order surrogate `gᵀΔ + ½ΔᵀdiagI Δ` of the loss change caused by
/// truncating `layer` to rank `r`, with `g` the loss gradient and `I` the
/// empirical Fisher diagonal.
pub fn importance_score(net: &Network, data: &Dataset, layer: usize, r: usize) -> Result<f64> {
    let l = net
        .layers
        .get(layer)
        .ok_or_else(|| Error::arg(format!("layer {layer} out of range")))?;
    let w = l.effective_weight();
    let k = w.rows().min(w.cols());
    if r > k {
        return Err(Error::arg(format!("rank {r} exceeds {k}")));
    }
    if r == k {
        return Ok(0.0);
    }
    let delta = truncate(&w, r)?.sub(&w);
    let (_, grads) = net.loss_and_grad(data)?;
    let fisher = empirical_fisher_diag(net, data)?;
    let linear: f64 = crate::linalg::dot(grads[layer].weight.as_slice(), delta.as_slice());
    let quad: f64 = fisher.per_layer_diag[layer]
        .as_slice()
        .iter()
        .zip(delta.as_slice())
        .map(|(i, d)| i * d * d)
        .sum();
    Ok(linear + 0.5 * quad)
}

/// Relative slack when comparing cumulative energy against its target.
const ENERGY_SLACK: f64 = 1e-12;

/// Rank kept by a cutoff rule, clamped to `[min_rank, len]`.
pub fn select_rank(
    values: &[f64],
    criterion: Criterion,
    beta: f64,
    min_rank: usize,
) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::arg("no singular values"));
    }
    let raw = match criterion {
        Criterion::MaxSv => {
            let cut = beta * values[0];
            values.iter().take_while(|&&s| s >= cut).count()
        }
        Criterion::FixedRank => {
            return Err(Error::arg("fixed_rank has no cutoff rule"));
        }
        _ => energy_prefix(values, beta),
    };
    Ok(raw.max(min_rank).min(values.len()))
}

fn energy_prefix(values: &[f64], beta: f64) -> usize {
    let energies: Vec<f64> = values.iter().map(|s| s * s).collect();
    let total: f64 = energies.iter().sum();
    if total == 0.0 {
        return 0;
    }
    let target = beta * total * (1.0 - ENERGY_SLACK);
    let mut cum = 0.0;
    for (k, e) in energies.iter().enumerate() {
        if cum >= target {
            return k;
        }
        cum += e;
    }
    values.len()
}

/// Pools `σ²` from every layer and keeps the largest values until `β` of the
/// total energy is reached. Ties are broken by layer, then position.
pub fn select_ranks_global(
    all_values: &[Vec<f64>],
    beta: f64,
    min_ranks: &[usize],
) -> Result<Vec<usize>> {
    if all_values.len() != min_ranks.len() {
        return Err(Error::shape("one minimum rank per layer"));
    }
    if all_values.iter().any(Vec::is_empty) {
        return Err(Error::arg("every layer needs singular values"));
    }
    let mut pool: Vec<(f64, usize, usize)> = all_values
        .iter()
        .enumerate()
        .flat_map(|(l, v)| v.iter().enumerate().map(move |(i, s)| (s * s, l, i)))
        .collect();
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total: f64 = pool.iter().map(|p| p.0).sum();
    let target = beta * total * (1.0 - ENERGY_SLACK);
    let mut counts = vec![0usize; all_values.len()];
    let mut cum = 0.0;
    for &(e, l, _) in &pool {
        if cum >= target && total > 0.0 {
            break;
        }
        if total == 0.0 {
            break;
        }
        cum += e;
        counts[l] += 1;
    }
    Ok(counts
        .iter()
        .zip(all_values)
        .zip(min_ranks)
        .map(|((&c, v), &m)| c.max(m).min(v.len()))
        .collect())
}

/// Span of the depth interpolation.
pub const DEPTH_SPAN: f64 = 0.5;

/// Linear interpolation from `base` at one end to `base·(1−κ) + κ` at the other.
pub fn depth_adjusted_beta(
    base_beta: f64,
    layer: usize,
    num_layers: usize,
    schedule: DepthSchedule,
) -> f64 {
    if num_layers <= 1 {
        return base_beta;
    }
    let pos = layer.min(num_layers - 1) as f64 / (num_layers - 1) as f64;
    let t = match schedule {
        DepthSchedule::Constant => return base_beta,
        DepthSchedule::Increasing => pos,
        DepthSchedule::Decreasing => 1.0 - pos,
    };
    base_beta + t * DEPTH_SPAN * (1.0 - base_beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    Svd,
    Fwsvd { weighting: RowWeighting },
    WeightedAls { iters: usize },
    Activation { eps: f64 },
}

impl Projection {
    pub fn tag(&self) -> &'static str {
        match self {
            Projection::Svd => "svd",
            Projection::Fwsvd { .. } => "fwsvd",
            Projection::WeightedAls { .. } => "tfwsvd",
            Projection::Activation { .. } => "activation",
        }
    }
}

/// Rank budget `max(1, round(fraction · min(n_out, n_in)))` for every layer.
pub fn ranks_for_fraction(net: &Network, fraction: f64) -> Vec<usize> {
    net.layers
        .iter()
        .map(|l| {
            let k = l.n_out().min(l.n_in());
            ((fraction * k as f64).round() as usize).clamp(1, k)
        })
        .collect()
}

/// Projects every layer with the chosen operator and stores the results as
/// frozen-basis factorized layers, re-factorized so the bases are orthonormal.
pub fn compress_network(
    net: &Network,
    data: &Dataset,
    projection: Projection,
    ranks: &[usize],
) -> Result<Network> {
    if ranks.len() != net.layers.len() {
        return Err(Error::shape("one rank per layer"));
    }
    let fisher = match projection {
        Projection::Fwsvd { .. } | Projection::WeightedAls { .. } => {
            Some(empirical_fisher_diag(net, data)?)
        }
        _ => None,
    };
    let stats = match projection {
        Projection::Activation { .. } => Some(crate::fisher::collect_activation_stats(net, data)?),
        _ => None,
    };
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, (layer, &r)) in net.layers.iter().zip(ranks).enumerate() {
        let w = layer.effective_weight();
        let projected = match projection {
            Projection::Svd => euclidean_project(&w, r)?,
            Projection::Fwsvd { weighting } => {
                let rw = &fisher.as_ref().expect("fisher").row_weights[i];
                fwsvd_project_with(&w, rw, r, weighting)?.reconstruct()
            }
            Projection::WeightedAls { iters } => {
                let diag = &fisher.as_ref().expect("fisher").per_layer_diag[i];
                let top = diag.max_abs().max(1.0);
                let weights = diag.map(|v| v.max(1e-12 * top));
                weighted_lowrank_als(&w, &weights, r, iters)?.reconstruct()
            }
            Projection::Activation { eps } => activation_project(
                &w,
                &stats.as_ref().expect("stats").per_layer_gram[i],
                r,
                eps,
            )?,
        };
        let f = crate::net::factorize_layer(&projected, layer.bias(), r)?;
        layers.push(Layer::Factorized(f));
    }
    Network::new(layers, net.activation, net.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub per_layer_rank: Vec<usize>,
    pub parameter_fraction: f64,
    pub zero_shot_loss: f64,
    pub zero_shot_accuracy: f64,
    pub method_tag: String,
}

impl CompressionReport {
    pub fn evaluate(compressed: &Network, data: &Dataset, method_tag: &str) -> Result<Self> {
        let accuracy = match data.targets {
            crate::net::Targets::Classes { .. } => compressed.accuracy(data)?,
            crate::net::Targets::Real(_) => f64::NAN,
        };
        Ok(Self {
            per_layer_rank: compressed.ranks(),
            parameter_fraction: parameter_fraction(compressed),
            zero_shot_loss: compressed.loss(data)?,
            zero_shot_accuracy: accuracy,
            method_tag: method_tag.to_string(),
        })
    }
}

/// Deployed parameters over the dense count of the same layer shapes.
pub fn parameter_fraction(net: &Network) -> f64 {
    let dense: usize = net
        .layers
        .iter()
        .map(|l| l.n_out() * l.n_in() + l.n_out())
        .sum();
    net.deployed_param_count() as f64 / dense as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_matrix;

    #[test]
    fn select_rank_examples() {
        assert_eq!(
            select_rank(&[3.0, 1.0, 0.1], Criterion::MaxSv, 0.1, 1).unwrap(),
            2
        );
        assert_eq!(
            select_rank(&[2.0, 1.0, 1.0], Criterion::LayerEnergy, 0.8, 1).unwrap(),
            2
        );
        assert_eq!(
            select_rank(&[2.0, 1.0, 1.0], Criterion::LayerEnergy, 1.0, 1).unwrap(),
            3
        );
        assert_eq!(
            select_rank(&[2.0, 1.0, 1.0], Criterion::LayerEnergy, 0.9, 1).unwrap(),
            3
        );
        assert_eq!(
            select_rank(&[2.0, 1.0, 1.0], Criterion::MaxSv, 0.6, 1).unwrap(),
            1
        );
        assert_eq!(
            select_rank(&[10.0, 1.0, 1.0, 1.0], Criterion::MaxSv, 0.15, 1).unwrap(),
            1
        );
        assert_eq!(
            select_rank(&[3.0, 1.0, 0.1], Criterion::MaxSv, 0.0, 1).unwrap(),
            3
        );
        assert_eq!(
            select_rank(&[3.0, 1.0, 0.1], Criterion::MaxSv, 1.0, 2).unwrap(),
            2
        );
        assert!(select_rank(&[], Criterion::MaxSv, 0.5, 1).is_err());
    }

    #[test]
    fn global_examples() {
        assert_eq!(
            select_ranks_global(&[vec![10.0], vec![1.0, 1.0]], 0.99, &[0, 0]).unwrap(),
            vec![1, 1]
        );
        assert_eq!(
            select_ranks_global(&[vec![10.0], vec![1.0, 1.0]], 1.0, &[1, 1]).unwrap(),
            vec![1, 2]
        );
        let v = vec![2.0, 1.0, 1.0];
        assert_eq!(
            select_ranks_global(std::slice::from_ref(&v), 0.8, &[1]).unwrap()[0],
            select_rank(&v, Criterion::LayerEnergy, 0.8, 1).unwrap()
        );
    }

    #[test]
    fn depth_schedules() {
        let inc: Vec<f64> = (0..3)
            .map(|l| depth_adjusted_beta(0.9, l, 3, DepthSchedule::Increasing))
            .collect();
        for (a, b) in inc.iter().zip([0.90, 0.925, 0.95]) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut dec: Vec<f64> = (0..3)
            .map(|l| depth_adjusted_beta(0.9, l, 3, DepthSchedule::Decreasing))
            .collect();
        dec.reverse();
        assert_eq!(dec, inc);
        assert!((0..3).all(|l| depth_adjusted_beta(0.9, l, 3, DepthSchedule::Constant) == 0.9));
    }

    #[test]
    fn fwsvd_uniform_matches_svd() {
        let w = random_matrix(6, 5, 3);
        let f = fwsvd_project(&w, &[2.0; 6], 2).unwrap();
        assert!(f.reconstruct().sub(&truncate(&w, 2).unwrap()).max_abs() < 1e-10);
    }

    #[test]
    fn fwsvd_prefers_heavy_row() {
        let w = Matrix::diag(&[1.0, 0.9]);
        let f = fwsvd_project(&w, &[100.0, 1.0], 1).unwrap();
        let x = f.reconstruct();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12 && x[(1, 1)].abs() < 1e-12);
        // reversing the weights overturns the plain-SVD choice
        let f = fwsvd_project(&w, &[1.0, 100.0], 1).unwrap();
        assert!((f.reconstruct()[(1, 1)] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn fwsvd_weighted_error_is_weighted_tail() {
        let w = random_matrix(6, 5, 8);
        let rw: Vec<f64> = random_matrix(1, 6, 9)
            .into_vec()
            .iter()
            .map(|v| v.abs() + 0.1)
            .collect();
        let f = fwsvd_project(&w, &rw, 2).unwrap();
        let d: Vec<f64> = rw.iter().map(|v| v.sqrt()).collect();
        let tail = svd(&w.scale_rows(&d)).unwrap().tail_energy(2);
        let err = row_weighted_error(&w, &f.reconstruct(), &rw);
        assert!((err - tail).abs() <= 1e-9 * tail.max(1.0));
        assert!(err <= row_weighted_error(&w, &truncate(&w, 2).unwrap(), &rw) + 1e-12);
        let lit = fwsvd_project_with(&w, &rw, 2, RowWeighting::Literal).unwrap();
        assert!(row_weighted_error(&w, &lit.reconstruct(), &rw) >= err - 1e-12);
    }

    #[test]
    fn als_cases() {
        let w = random_matrix(6, 5, 2);
        let ones = Matrix::from_fn(6, 5, |_, _| 1.0);
        let res = weighted_lowrank_als(&w, &ones, 2, 5).unwrap();
        let tail = svd(&w).unwrap().tail_energy(2);
        assert!((res.objective.last().unwrap() - tail).abs() < 1e-6);

        let exact = random_matrix(6, 2, 1).matmul_t(&random_matrix(5, 2, 2));
        let mask = Matrix::from_fn(6, 5, |i, j| if (i + j) % 3 == 0 { 0.0 } else { 1.0 });
        let res = weighted_lowrank_als(&exact, &mask, 2, 50).unwrap();
        assert!(*res.objective.last().unwrap() < 1e-12);

        let weights = random_matrix(6, 5, 4).map(|v| v.abs());
        let res = weighted_lowrank_als(&w, &weights, 2, 20).unwrap();
        assert!(res.objective.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    }

    #[test]
    fn activation_cases() {
        let w = random_matrix(4, 5, 1);
        let p = activation_project(&w, &Matrix::identity(5), 2, 0.0).unwrap();
        assert!(p.sub(&truncate(&w, 2).unwrap()).max_abs() < 1e-10);

        let w = Matrix::diag(&[1.0, 0.9]);
        let g = Matrix::diag(&[100.0, 1.0]);
        let p = activation_project(&w, &g, 1, 0.0).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12 && p[(1, 1)].abs() < 1e-12);

        let x = random_matrix(3, 5, 7);
        let g = x.t_matmul(&x);
        let w = random_matrix(4, 5, 8);
        let p = activation_project(&w, &g, 2, 1e-8).unwrap();
        assert!(p.is_finite());
        let e_act = gram_weighted_error(&w, &p, &g);
        let e_svd = gram_weighted_error(&w, &truncate(&w, 2).unwrap(), &g);
        assert!(e_act <= e_svd + 1e-9);
    }

    #[test]
    fn min_rank_rounds_up() {
        let s = RankSchedule {
            min_rank_fraction: 0.1,
            ..RankSchedule::default()
        };
        assert_eq!(s.min_rank(32), 4);
        assert_eq!(s.min_rank(3), 1);
    }
}
