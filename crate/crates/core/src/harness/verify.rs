//! Self-checks behind the `verify` subcommand: convergence telemetry of a
//! proximal IHT run, the Pythagorean relation of m-projections, and the
//! quadratic KL expansion around a softmax network.

use rand::Rng;

use crate::error::Result;
use crate::infogeo::{fim_quadratic_check, pythagorean_gap, CategoricalParams, EFlatRestriction};
use crate::net::{Activation, LossFamily, Network, ParamVec};
use crate::random::{random_matrix, seeded_rng};
use crate::trainers::{lipschitz_estimate, train_prox_iht, verify_convergence, TrainConfig};

use super::data::generate_synthetic;

/// Largest tolerated Pythagorean gap.
pub const PYTHAGORAS_TOL: f64 = 1e-6;

/// Halving the expansion scale must shrink the residual at least this much.
pub const EXPANSION_RATIO: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyLine {
    pub suite: &'static str,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// Prox-IHT on a two-layer tanh classifier over 200 samples at
/// `α = 0.5/L`, `λ = 1e-3`, 500 steps.
pub fn convergence_suite(seed: u64) -> Result<Vec<VerifyLine>> {
    let data = generate_synthetic(6, 3, 200, 1.0, seed)?;
    let net = Network::random(
        &[6, 8, 3],
        Activation::Tanh,
        LossFamily::SoftmaxCrossEntropy,
        1.0,
        &mut seeded_rng(seed ^ 0x00c0_ffee),
    )?;
    let l = lipschitz_estimate(&net, &data, seed)?;
    let cfg = TrainConfig {
        max_steps: 500,
        learning_rate: 0.5 / l,
        rank_penalty: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let run = train_prox_iht(&net, &data, &cfg)?;
    let report = verify_convergence(&run.trace, &cfg, l)?;
    Ok(report
        .checks
        .into_iter()
        .map(|c| VerifyLine {
            suite: "convergence",
            detail: format!("margin {:.3e}", c.margin),
            check: c.name,
            passed: c.passed,
        })
        .collect())
}

/// Gap of the Pythagorean relation on `trials` random categorical triples.
pub fn pythagoras_suite(seed: u64, trials: usize) -> Result<Vec<VerifyLine>> {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let c = rng.gen_range(3..=6);
        let p = CategoricalParams::new((0..c).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
        let sub = EFlatRestriction::new(vec![0, c - 1], vec![rng.gen_range(-1.0..1.0), 0.0])?;
        let free: Vec<f64> = (0..c - 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q = sub.point(c, &free)?;
        worst = worst.max(pythagorean_gap(&p, &sub, &q)?);
    }
    Ok(vec![VerifyLine {
        suite: "pythagoras",
        check: format!("{trials} triples"),
        passed: worst <= PYTHAGORAS_TOL,
        detail: format!("worst gap {worst:.3e}"),
    }])
}

/// Residual of the quadratic KL expansion at `t` and `t/2`.
pub fn expansion_suite(seed: u64) -> Result<Vec<VerifyLine>> {
    let mut rng = seeded_rng(seed);
    let net = Network::random(
        &[4, 6, 3],
        Activation::Tanh,
        LossFamily::SoftmaxCrossEntropy,
        1.0,
        &mut rng,
    )?;
    let data = generate_synthetic(4, 3, 30, 1.0, seed)?;
    let delta = ParamVec(random_matrix(1, net.num_params(), seed.wrapping_add(1)).into_vec());
    let mut lines = Vec::new();
    for t in [1e-2, 5e-3] {
        let res = fim_quadratic_check(&net, &data, &delta, &[t, t / 2.0])?;
        let ratio = res[1].1 / res[0].1;
        lines.push(VerifyLine {
            suite: "fim_expansion",
            check: format!("t = {t:e}"),
            passed: ratio <= EXPANSION_RATIO,
            detail: format!("residual ratio {ratio:.4}"),
        });
    }
    Ok(lines)
}

pub fn run_verification(seed: u64) -> Result<Vec<VerifyLine>> {
    let mut lines = convergence_suite(seed)?;
    lines.extend(pythagoras_suite(seed, 50)?);
    lines.extend(expansion_suite(seed)?);
    Ok(lines)
}
