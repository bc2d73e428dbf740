//! Small feedforward networks with exponential-family output heads.
//!
//! Inputs are stored one sample per row, so a layer maps `X (N × n_in)` to
//! `X·Wᵀ + 1·bᵀ (N × n_out)`. The last layer's output is the natural
//! parameter of the predictive distribution (softmax logits or the mean of an
//! identity-covariance Gaussian). Gradients are exact full-batch gradients of
//! the mean negative log-likelihood.

mod layer;

pub use layer::{factorize_layer, DenseLayer, FactorizedLayer, Layer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    /// Same derivative expressed through the activation output `a = σ(z)`.
    #[inline]
    pub fn derivative_at_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    SoftmaxCrossEntropy,
    GaussianSquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Real(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub seed: u64,
}

impl Dataset {
    pub fn classification(
        inputs: Matrix,
        labels: Vec<usize>,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let ds = Self {
            inputs,
            targets: Targets::Classes { labels, classes },
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn regression(inputs: Matrix, targets: Matrix, seed: u64) -> Result<Self> {
        let ds = Self {
            inputs,
            targets: Targets::Real(targets),
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.rows();
        if n == 0 {
            return Err(Error::arg("dataset has no samples"));
        }
        match &self.targets {
            Targets::Classes { labels, classes } => {
                if labels.len() != n {
                    return Err(Error::shape(format!(
                        "{} labels for {n} samples",
                        labels.len()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= *classes) {
                    return Err(Error::arg(format!(
                        "label {bad} not below class count {classes}"
                    )));
                }
            }
            Targets::Real(t) => {
                if t.rows() != n {
                    return Err(Error::shape(format!(
                        "{} target rows for {n} samples",
                        t.rows()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Samples at the given indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let inputs = Matrix::from_fn(idx.len(), self.inputs.cols(), |i, j| {
            self.inputs[(idx[i], j)]
        });
        let targets = match &self.targets {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Real(t) => {
                Targets::Real(Matrix::from_fn(idx.len(), t.cols(), |i, j| t[(idx[i], j)]))
            }
        };
        Dataset {
            inputs,
            targets,
            seed: self.seed,
        }
    }
}

/// Flattened parameter vector. Order per layer: dense `W` then `b`;
/// factorized `U`, `S`, `Vᵀ`, then `b`; every matrix row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec(pub Vec<f64>);

impl ParamVec {
    pub fn zeros(n: usize) -> Self {
        ParamVec(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &ParamVec) -> f64 {
        crate::linalg::dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|v| v * s).collect())
    }
}

/// Gradients of the factors of a [`FactorizedLayer`]; frozen factors are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub u: Option<Matrix>,
    pub s: Matrix,
    pub vt: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Gradient with respect to the effective weight `W` (or `U S Vᵀ`).
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub factors: Option<FactorGrad>,
}

/// Intermediate values of a forward pass, kept for backward and tangent passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the data).
    pub inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Matrix>,
    /// Effective weight of each layer.
    pub weights: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("network has layers")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub loss: LossFamily,
}

impl Network {
    pub fn new(layers: Vec<Layer>, activation: Activation, loss: LossFamily) -> Result<Self> {
        let net = Self {
            layers,
            activation,
            loss,
        };
        net.validate()?;
        Ok(net)
    }

    /// Uniform fan-based initialization `U(−a, a)`, `a = scale·sqrt(6/(n_in+n_out))`,
    /// zero biases. `sizes` lists layer widths from input to output.
    pub fn random(
        sizes: &[usize],
        activation: Activation,
        loss: LossFamily,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::arg("need at least input and output sizes"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let a = init_scale * (6.0 / (n_in + n_out) as f64).sqrt();
                Layer::dense(
                    crate::random::uniform_matrix(n_out, n_in, a, rng),
                    vec![0.0; n_out],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, activation, loss)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("network has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Factorized(f) = l {
                f.check()?;
            }
            if l.bias().len() != l.n_out() {
                return Err(Error::shape(format!("layer {i} bias length")));
            }
            if i + 1 < self.layers.len() && self.layers[i + 1].n_in() != l.n_out() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    l.n_out(),
                    i + 1,
                    self.layers[i + 1].n_in()
                )));
            }
        }
        if self.layers.last().is_some_and(Layer::is_bottleneck) {
            return Err(Error::arg("output layer cannot be a bottleneck"));
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(Layer::n_out).unwrap_or(0)
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() && !self.layers[layer].is_bottleneck()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.pre.pop().expect("layers"))
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.n_in() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.n_in()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.effective_weight();
            let mut z = a.matmul_t(&w);
            let b = layer.bias();
            for n in 0..z.rows() {
                z.row_mut(n).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            let next = if self.activates(i) {
                z.map(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
            weights.push(w);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            weights,
        })
    }

    /// Mean negative log-likelihood of the dataset.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let out = self.forward(&data.inputs)?;
        let loss = mean_nll(self.loss, &out, &data.targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(loss)
    }

    /// Fraction of correctly classified samples (argmax of the logits).
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let Targets::Classes { labels, .. } = &data.targets else {
            return Err(Error::Unsupported("accuracy needs class targets".into()));
        };
        let out = self.forward(&data.inputs)?;
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(n, &y)| argmax(out.row(*n)) == y)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Back-propagates `d_out = ∂(objective)/∂(network output)` through the
    /// cached pass. Factor gradients are computed for every factor, frozen or not.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Vec<LayerGrad> {
        let deltas = self.backward_deltas(cache, d_out);
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let dz = &deltas[i];
                let weight = dz.t_matmul(&cache.inputs[i]);
                let bias = dz.col_sums();
                let factors = match layer {
                    Layer::Dense(_) => None,
                    Layer::Factorized(f) => Some(FactorGrad {
                        u: Some(weight.matmul(&f.s.matmul(&f.vt).transpose())),
                        s: f.u.t_matmul(&weight).matmul_t(&f.vt),
                        vt: Some(f.u.matmul(&f.s).t_matmul(&weight)),
                    }),
                };
                LayerGrad {
                    weight,
                    bias,
                    factors,
                }
            })
            .collect()
    }

    /// `∂(objective)/∂z_l` for every layer pre-activation `z_l`.
    pub fn backward_deltas(&self, cache: &ForwardCache, d_out: &Matrix) -> Vec<Matrix> {
        let n_layers = self.layers.len();
        let mut deltas = vec![Matrix::zeros(0, 0); n_layers];
        let mut dz = d_out.clone();
        for i in (0..n_layers).rev() {
            if i > 0 {
                let mut da = dz.matmul(&cache.weights[i]);
                if self.activates(i - 1) {
                    da = da.zip_map(&cache.inputs[i], |g, a| {
                        g * self.activation.derivative_at_output(a)
                    });
                }
                deltas[i] = std::mem::replace(&mut dz, da);
            } else {
                deltas[0] = std::mem::replace(&mut dz, Matrix::zeros(0, 0));
            }
        }
        deltas
    }

    /// Mean NLL and its exact gradient. Gradients of frozen factors are omitted.
    pub fn loss_and_grad(&self, data: &Dataset) -> Result<(f64, Vec<LayerGrad>)> {
        let cache = self.forward_cached(&data.inputs)?;
        let loss = mean_nll(self.loss, cache.output(), &data.targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = data.len() as f64;
        let d_out = output_residual(self.loss, cache.output(), &data.targets)?.scale(1.0 / n);
        let mut grads = self.backward(&cache, &d_out);
        for (g, layer) in grads.iter_mut().zip(&self.layers) {
            if let (Some(fg), Layer::Factorized(f)) = (g.factors.as_mut(), layer) {
                if f.u_frozen {
                    fg.u = None;
                }
                if f.vt_frozen {
                    fg.vt = None;
                }
            }
        }
        if grads.iter().any(|g| !g.weight.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok((loss, grads))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn params(&self) -> ParamVec {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.extend_from_slice(d.weight.as_slice());
                    out.extend_from_slice(&d.bias);
                }
                Layer::Factorized(f) => {
                    out.extend_from_slice(f.u.as_slice());
                    out.extend_from_slice(f.s.as_slice());
                    out.extend_from_slice(f.vt.as_slice());
                    out.extend_from_slice(&f.bias);
                }
            }
        }
        ParamVec(out)
    }

    pub fn set_params(&mut self, p: &ParamVec) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} parameters for a network with {}",
                p.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p.0[off..off + dst.len()]);
            off += dst.len();
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    take(d.weight.as_mut_slice());
                    take(&mut d.bias);
                }
                Layer::Factorized(f) => {
                    take(f.u.as_mut_slice());
                    take(f.s.as_mut_slice());
                    take(f.vt.as_mut_slice());
                    take(&mut f.bias);
                }
            }
        }
        Ok(())
    }

    /// Copy with parameters `θ + t·Δ`.
    pub fn offset(&self, delta: &ParamVec, t: f64) -> Result<Network> {
        let mut p = self.params();
        if p.len() != delta.len() {
            return Err(Error::shape("parameter offset length"));
        }
        p.0.iter_mut().zip(&delta.0).for_each(|(a, d)| *a += t * d);
        let mut out = self.clone();
        out.set_params(&p)?;
        Ok(out)
    }

    /// Flattens full gradients (every factor present) into parameter order.
    pub fn grads_to_params(&self, grads: &[LayerGrad]) -> ParamVec {
        let mut out = Vec::with_capacity(self.num_params());
        for (g, layer) in grads.iter().zip(&self.layers) {
            match (layer, &g.factors) {
                (Layer::Dense(_), _) => {
                    out.extend_from_slice(g.weight.as_slice());
                }
                (Layer::Factorized(f), Some(fg)) => {
                    let zeros_u = Matrix::zeros(f.u.rows(), f.u.cols());
                    let zeros_vt = Matrix::zeros(f.vt.rows(), f.vt.cols());
                    out.extend_from_slice(fg.u.as_ref().unwrap_or(&zeros_u).as_slice());
                    out.extend_from_slice(fg.s.as_slice());
                    out.extend_from_slice(fg.vt.as_ref().unwrap_or(&zeros_vt).as_slice());
                }
                (Layer::Factorized(_), None) => {
                    unreachable!("factorized layer without factor gradient")
                }
            }
            out.extend_from_slice(&g.bias);
        }
        ParamVec(out)
    }

    /// Per-layer tangents `(dW_eff, db)` induced by a parameter direction.
    pub fn weight_tangents(&self, delta: &ParamVec) -> Result<Vec<(Matrix, Vec<f64>)>> {
        if delta.len() != self.num_params() {
            return Err(Error::shape("tangent length"));
        }
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| {
            let m = Matrix::from_vec(rows, cols, delta.0[off..off + rows * cols].to_vec())
                .expect("sized");
            off += rows * cols;
            m
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    let (r, c) = d.weight.shape();
                    let dw = take(r, c);
                    let db = take(1, r).into_vec();
                    out.push((dw, db));
                }
                Layer::Factorized(f) => {
                    let du = take(f.u.rows(), f.u.cols());
                    let ds = take(f.s.rows(), f.s.cols());
                    let dvt = take(f.vt.rows(), f.vt.cols());
                    let db = take(1, f.bias.len()).into_vec();
                    let dw = du
                        .matmul(&f.s)
                        .matmul(&f.vt)
                        .add(&f.u.matmul(&ds).matmul(&f.vt))
                        .add(&f.u.matmul(&f.s).matmul(&dvt));
                    out.push((dw, db));
                }
            }
        }
        Ok(out)
    }

    /// Forward-mode derivative of the network output along `delta`.
    pub fn jvp(&self, cache: &ForwardCache, delta: &ParamVec) -> Result<Matrix> {
        let tangents = self.weight_tangents(delta)?;
        let n = cache.inputs[0].rows();
        let mut da = Matrix::zeros(n, self.n_in());
        let mut dz = Matrix::zeros(0, 0);
        for (i, (dw, db)) in tangents.iter().enumerate() {
            dz = da
                .matmul_t(&cache.weights[i])
                .add(&cache.inputs[i].matmul_t(dw));
            for r in 0..n {
                dz.row_mut(r).iter_mut().zip(db).for_each(|(v, b)| *v += b);
            }
            if self.activates(i) {
                da = dz.zip_map(&cache.pre[i], |t, z| t * self.activation.derivative(z));
            } else {
                da = dz.clone();
            }
        }
        Ok(dz)
    }

    /// Number of parameters once every factorized layer is compiled (each
    /// layer counted at the smaller of its factored and dense footprint).
    pub fn deployed_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Factorized(f) => {
                    let dense = f.u.rows() * f.vt.cols() + f.bias.len();
                    l.deployed_param_count().min(dense)
                }
                _ => l.deployed_param_count(),
            })
            .sum()
    }

    /// Per-layer rank budgets.
    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::rank).collect()
    }

    /// Replaces every dense layer with a full-rank frozen-basis factorization.
    pub fn to_factorized(&self) -> Result<Network> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => {
                    let r = d.weight.rows().min(d.weight.cols());
                    factorize_layer(&d.weight, &d.bias, r).map(Layer::Factorized)
                }
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers, self.activation, self.loss)
    }
}

/// Replaces each factorized layer by the dense pair `sqrt(S)·Vᵀ` (bottleneck,
/// no bias) followed by `U·sqrt(S)` (with the layer bias). `S` is first
/// diagonalized by an SVD and rotated into the bases, so the pair carries
/// non-negative singular values.
pub fn compile_network(net: &Network) -> Result<Network> {
    let mut layers = Vec::with_capacity(net.layers.len() * 2);
    for layer in &net.layers {
        match layer {
            Layer::Dense(_) => layers.push(layer.clone()),
            Layer::Factorized(f) => {
                let inner = svd(&f.s)?;
                if inner.s.iter().any(|&s| s < 0.0) {
                    return Err(Error::Numerical(
                        "negative singular value after sign absorption".into(),
                    ));
                }
                let roots: Vec<f64> = inner.s.iter().map(|s| s.sqrt()).collect();
                let left = f.u.matmul(&inner.u).scale_cols(&roots);
                let right = inner.vt.matmul(&f.vt).scale_rows(&roots);
                let r = right.rows();
                layers.push(Layer::Dense(DenseLayer {
                    weight: right,
                    bias: vec![0.0; r],
                    bottleneck: true,
                }));
                layers.push(Layer::Dense(DenseLayer {
                    weight: left,
                    bias: f.bias.clone(),
                    bottleneck: false,
                }));
            }
        }
    }
    Network::new(layers, net.activation, net.loss)
}

/// Number of singular values above `tol · σ_max`; zero for the zero matrix.
pub fn effective_rank(w: &Matrix, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::arg("effective_rank tolerance must be positive"));
    }
    let s = svd(w)?.s;
    let s_max = s.first().copied().unwrap_or(0.0);
    if s_max == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > tol * s_max).count())
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

fn check_head(loss: LossFamily, out: &Matrix, targets: &Targets) -> Result<()> {
    match (loss, targets) {
        (LossFamily::SoftmaxCrossEntropy, Targets::Classes { classes, labels }) => {
            if *classes != out.cols() {
                return Err(Error::shape(format!(
                    "{classes} classes but {} logits",
                    out.cols()
                )));
            }
            if labels.len() != out.rows() {
                return Err(Error::shape("label count"));
            }
        }
        (LossFamily::GaussianSquaredError, Targets::Real(t)) => {
            if t.shape() != out.shape() {
                return Err(Error::shape(format!(
                    "targets {:?} vs outputs {:?}",
                    t.shape(),
                    out.shape()
                )));
            }
        }
        _ => {
            return Err(Error::Unsupported(
                "loss family does not match target kind".into(),
            ))
        }
    }
    Ok(())
}

/// Mean over samples of `−log p(y_n | f_n)`; the Gaussian head drops the
/// normalizing constant.
pub fn mean_nll(loss: LossFamily, out: &Matrix, targets: &Targets) -> Result<f64> {
    check_head(loss, out, targets)?;
    let n = out.rows() as f64;
    let total: f64 = match targets {
        Targets::Classes { labels, .. } => labels
            .iter()
            .enumerate()
            .map(|(i, &y)| log_sum_exp(out.row(i)) - out.row(i)[y])
            .sum(),
        Targets::Real(t) => out.sub(t).frobenius_sq() * 0.5,
    };
    Ok(total / n)
}

/// Per-sample `∂(−log p(y_n|f_n))/∂f_n`: `π − e_y` or `f − y`.
pub fn output_residual(loss: LossFamily, out: &Matrix, targets: &Targets) -> Result<Matrix> {
    check_head(loss, out, targets)?;
    Ok(match targets {
        Targets::Classes { labels, .. } => {
            let mut r = Matrix::zeros(out.rows(), out.cols());
            for (i, &y) in labels.iter().enumerate() {
                let p = softmax(out.row(i));
                r.row_mut(i).copy_from_slice(&p);
                r[(i, y)] -= 1.0;
            }
            r
        }
        Targets::Real(t) => out.sub(t),
    })
}
