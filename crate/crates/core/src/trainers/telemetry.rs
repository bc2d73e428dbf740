//! Curvature estimates and checks of a recorded proximal run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::ggn_vector_product;
use crate::net::{Dataset, Network, ParamVec};
use crate::random::seeded_rng;

use super::{TrainConfig, TrainTrace};

pub const POWER_ITERATIONS: usize = 20;

/// Absolute slack of the per-step objective comparisons.
pub const OBJECTIVE_SLACK: f64 = 1e-8;

/// Largest eigenvalue of the Gauss–Newton matrix by power iteration from a
/// seeded normal start. Exact for linear models with a Gaussian head, and a
/// lower bound in general.
pub fn lipschitz_estimate(net: &Network, data: &Dataset, seed: u64) -> Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let cache = net.forward_cached(&data.inputs)?;
    let mut rng = seeded_rng(seed);
    let mut v = ParamVec(
        (0..net.num_params())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    );
    // Frozen directions carry no curvature; start inside the trainable subspace.
    v = ggn_vector_product(net, &cache, &v)?;
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let n = v.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        v = v.scale(1.0 / n);
        let gv = ggn_vector_product(net, &cache, &v)?;
        estimate = v.dot(&gv);
        v = gv;
    }
    if !estimate.is_finite() {
        return Err(Error::NonFinite("curvature estimate".into()));
    }
    Ok(estimate.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Step where the margin is smallest.
    pub worst_step: Option<usize>,
    /// Smallest slack across the run; negative means violated.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub checks: Vec<CheckOutcome>,
}

impl ConvergenceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn into_result(self) -> Result<Self> {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| {
                format!(
                    "{} (margin {:.3e} at step {:?})",
                    c.name, c.margin, c.worst_step
                )
            })
            .collect();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(Error::Numerical(format!(
                "convergence checks failed: {}",
                failed.join(", ")
            )))
        }
    }
}

fn outcome(name: &str, margins: impl Iterator<Item = (usize, f64)>) -> CheckOutcome {
    let worst = margins.fold(None, |acc: Option<(usize, f64)>, (s, m)| match acc {
        Some((_, best)) if best <= m => acc,
        _ => Some((s, m)),
    });
    CheckOutcome {
        name: name.into(),
        passed: worst.is_none_or(|(_, m)| m >= 0.0),
        worst_step: worst.map(|(s, _)| s),
        margin: worst.map_or(0.0, |(_, m)| m),
    }
}

/// Step size `0.5 / L`.
pub fn default_step_size(l_estimate: f64) -> Result<f64> {
    if !(l_estimate > 0.0) || !l_estimate.is_finite() {
        return Err(Error::arg("curvature estimate must be positive"));
    }
    Ok(0.5 / l_estimate)
}

/// Checks a proximal run made with `cfg` (step `α`, rank weight `λ`)
/// against the curvature bound `l_estimate`:
///
/// * `monotone_objective`: the objective never increases.
/// * `step_norms_shrink`: the last quarter of step norms sums to no more
///   than the first quarter.
/// * `singular_value_floor`: every retained singular value at the end is at
///   least `sqrt(α·λ)`.
/// * `sufficient_decrease`: `F_{k+1} + (σ − Lα)/(2α)·‖Δ_k‖² ≤ F_k`, where
///   `σ` is the step's metric modulus. It is only meaningful, and is only
///   reported as passing, when `σ ≥ L·α` at every step.
pub fn verify_convergence(
    trace: &TrainTrace,
    cfg: &TrainConfig,
    l_estimate: f64,
) -> Result<ConvergenceReport> {
    let (alpha, lambda) = (cfg.learning_rate, cfg.rank_penalty);
    if !(alpha > 0.0) || !(lambda >= 0.0) || !(l_estimate >= 0.0) {
        return Err(Error::arg(
            "verify_convergence needs alpha > 0, lambda >= 0, L >= 0",
        ));
    }
    let recs = &trace.records;
    if recs.len() < 2 {
        return Err(Error::arg("need at least one recorded step"));
    }
    let pairs = || recs.windows(2).map(|w| (&w[0], &w[1]));

    let monotone = outcome(
        "monotone_objective",
        pairs().map(|(a, b)| (b.step, a.objective + OBJECTIVE_SLACK - b.objective)),
    );

    let norms: Vec<f64> = recs[1..].iter().map(|r| r.step_norm).collect();
    let q = norms.len() / 4;
    let shrink = if q == 0 {
        outcome("step_norms_shrink", std::iter::empty())
    } else {
        let first: f64 = norms[..q].iter().sum();
        let last: f64 = norms[norms.len() - q..].iter().sum();
        outcome(
            "step_norms_shrink",
            std::iter::once((recs.last().unwrap().step, first - last)),
        )
    };

    let floor = (alpha * lambda).sqrt();
    let last = recs.last().unwrap();
    let sv = outcome(
        "singular_value_floor",
        last.min_nonzero_sv
            .iter()
            .flatten()
            .map(|&s| (last.step, s - floor)),
    );

    let descent = outcome(
        "sufficient_decrease",
        pairs().map(|(a, b)| {
            let coeff = (b.metric_modulus - l_estimate * alpha) / (2.0 * alpha);
            let lhs = b.objective + coeff * b.step_norm * b.step_norm;
            let m = a.objective + OBJECTIVE_SLACK - lhs;
            (b.step, if coeff < 0.0 { m.min(coeff) } else { m })
        }),
    );

    Ok(ConvergenceReport {
        checks: vec![monotone, shrink, sv, descent],
    })
}
