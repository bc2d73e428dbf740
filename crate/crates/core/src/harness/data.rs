//! Seeded synthetic tasks and a CSV loader.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{Activation, Dataset, LossFamily, Network};
use crate::random::{gaussian_matrix, seeded_rng};

/// Distance of each class mean from the origin, before anisotropic scaling.
pub const CLASS_SEPARATION: f64 = 4.0;

/// Number of leading coordinates stretched by the anisotropy factor.
pub const PLANTED_AXES: usize = 2;

/// Gaussian-mixture classification. Class `c` has mean
/// `±CLASS_SEPARATION·e_{c mod dim}` (sign flips on the second pass over the
/// axes) and unit covariance; the first [`PLANTED_AXES`] coordinates of both
/// the means and the noise are then multiplied by `anisotropy`. Labels cycle
/// through the classes. Means do not depend on the seed, so datasets drawn
/// with different seeds share one population.
pub fn generate_synthetic(
    dim: usize,
    classes: usize,
    n: usize,
    anisotropy: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::arg("need at least two classes"));
    }
    if dim == 0 || n == 0 {
        return Err(Error::arg("dimension and sample count must be positive"));
    }
    if classes > 2 * dim {
        return Err(Error::arg(format!(
            "{classes} classes do not fit on the axes of dimension {dim}"
        )));
    }
    if !(anisotropy >= 1.0) || !anisotropy.is_finite() {
        return Err(Error::arg("anisotropy must be a finite value >= 1"));
    }
    let mut rng = seeded_rng(seed);
    let scale: Vec<f64> = (0..dim)
        .map(|j| if j < PLANTED_AXES { anisotropy } else { 1.0 })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = Matrix::zeros(n, dim);
    for (i, &c) in labels.iter().enumerate() {
        let axis = c % dim;
        let sign = if c < dim { 1.0 } else { -1.0 };
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == axis {
                sign * CLASS_SEPARATION
            } else {
                0.0
            };
            *v = (mean + z) * scale[j];
        }
    }
    Dataset::classification(x, labels, classes, seed)
}

/// Regression task `y = T·x` with a rank-`rank` teacher built from random
/// orthonormal factors and singular values `rank, rank−1, …, 1`, plus
/// optional Gaussian label noise. Train and test inputs are independent draws.
#[derive(Debug, Clone)]
pub struct DeepLinearTask {
    pub train: Dataset,
    pub test: Dataset,
    pub teacher: Matrix,
}

pub fn deep_linear_task(
    dim: usize,
    rank: usize,
    samples: usize,
    noise: f64,
    seed: u64,
) -> Result<DeepLinearTask> {
    if rank == 0 || rank > dim {
        return Err(Error::arg(format!("teacher rank {rank} outside 1..={dim}")));
    }
    if samples == 0 || !(noise >= 0.0) {
        return Err(Error::arg("need samples > 0 and noise >= 0"));
    }
    let mut rng = seeded_rng(seed);
    // Well-separated singular values 3, 2, 1, ... keep the recovery problem
    // well conditioned.
    let left = orthonormal_columns(dim, rank, &mut rng)?;
    let right = orthonormal_columns(dim, rank, &mut rng)?;
    let spectrum: Vec<f64> = (0..rank).map(|i| (rank - i) as f64).collect();
    let teacher = left.scale_cols(&spectrum).matmul_t(&right);
    let draw = |rng: &mut crate::random::SeededRng, n: usize, s: u64| -> Result<Dataset> {
        let x = gaussian_matrix(n, dim, rng);
        let mut y = x.matmul_t(&teacher);
        if noise > 0.0 {
            y = y.add(&gaussian_matrix(n, dim, rng).scale(noise));
        }
        Dataset::regression(x, y, s)
    };
    let train = draw(&mut rng, samples, seed)?;
    let test = draw(&mut rng, samples, seed.wrapping_add(1))?;
    Ok(DeepLinearTask {
        train,
        test,
        teacher,
    })
}

fn orthonormal_columns(
    rows: usize,
    cols: usize,
    rng: &mut crate::random::SeededRng,
) -> Result<Matrix> {
    let dec = crate::linalg::svd(&gaussian_matrix(rows, cols, rng))?;
    Ok(dec.u.take_cols(cols))
}

/// `depth` square identity-activation layers of width `dim`, zero biases,
/// uniform init scaled by `init_scale`.
pub fn deep_linear_student(
    dim: usize,
    depth: usize,
    init_scale: f64,
    seed: u64,
) -> Result<Network> {
    if depth == 0 {
        return Err(Error::arg("depth must be at least 1"));
    }
    let sizes = vec![dim; depth + 1];
    Network::random(
        &sizes,
        Activation::Identity,
        LossFamily::GaussianSquaredError,
        init_scale,
        &mut seeded_rng(seed),
    )
}

/// Loads a CSV with a header row. The column named `label_column` holds
/// non-negative integer class labels; every other column is a feature.
pub fn csv_dataset(path: &Path, label_column: &str, seed: u64) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Config(format!(
                "{}: no column named {label_column:?}",
                path.display()
            ))
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Config(format!(
            "{}: no feature columns",
            path.display()
        )));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let bad = || {
                Error::Config(format!(
                    "{}: row {}: cannot parse {field:?}",
                    path.display(),
                    line + 2
                ))
            };
            if j == label_idx {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                values.push(field.trim().parse::<f64>().map_err(|_| bad())?);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Config(format!("{}: no data rows", path.display())));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    if classes < 2 {
        return Err(Error::Config(format!(
            "{}: need at least two classes",
            path.display()
        )));
    }
    let x = Matrix::from_vec(labels.len(), dim, values)?;
    Dataset::classification(x, labels, classes, seed)
}
