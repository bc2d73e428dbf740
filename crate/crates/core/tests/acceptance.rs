//! Acceptance suite. Each criterion prints one line with its verdict,
//! measured value and runtime; the test fails if any criterion misses its
//! tolerance or its time budget.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;

use lowrank_core::compress::DepthSchedule;
use lowrank_core::fisher::{FisherInfo, FisherMode};
use lowrank_core::harness::{
    deep_linear_demo_config, generate_synthetic, render_report, run_experiment, sweep,
    ExperimentConfig, MethodTag, ReportOptions,
};
use lowrank_core::infogeo::{
    fim_quadratic_check, pythagorean_gap, CategoricalParams, EFlatRestriction,
};
use lowrank_core::linalg::{rank_prox_with_rank, svd, truncate};
use lowrank_core::net::output_residual;
use lowrank_core::random::{random_matrix, seeded_rng};
use lowrank_core::trainers::{
    fisher_prox_step, lipschitz_estimate, train, train_prox_iht, verify_convergence, Method,
    TrainConfig,
};
use lowrank_core::{Activation, Dataset, Layer, LossFamily, Matrix, Network, ParamVec};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn prox_objective(y: &Matrix, w: &Matrix, rank: usize, gamma: f64) -> f64 {
    0.5 * y.sub(w).frobenius_sq() + gamma * rank as f64
}

fn c1_prox_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let y = random_matrix(6, 5, seed);
        for gamma in [0.05, 0.5, 2.0] {
            let (w, rank) = rank_prox_with_rank(&y, gamma).unwrap();
            let got = prox_objective(&y, &w, rank, gamma);
            let best = (0..=5)
                .map(|k| prox_objective(&y, &truncate(&y, k).unwrap(), k, gamma))
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(got - best);
        }
    }
    verdict(worst <= 1e-9, format!("worst objective gap {worst:.2e}"))
}

fn c2_eckart_young() -> Verdict {
    let mut rng = seeded_rng(2);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (m, n) = (rng.gen_range(2..=9), rng.gen_range(2..=9));
        let a = random_matrix(m, n, 1000 + seed);
        let r = rng.gen_range(0..=m.min(n));
        let s = svd(&a).unwrap().s;
        let tail: f64 = s[r..].iter().map(|v| v * v).sum();
        let resid = a.sub(&truncate(&a, r).unwrap()).frobenius_sq();
        worst = worst.max((resid - tail).abs() / a.frobenius_sq());
    }
    verdict(
        worst <= 1e-9,
        format!("worst relative deviation {worst:.2e}"),
    )
}

/// Largest relative mismatch between back-propagated and central-difference
/// gradients over every parameter.
fn fd_mismatch(net: &Network, data: &Dataset) -> f64 {
    let cache = net.forward_cached(&data.inputs).unwrap();
    let d_out = output_residual(net.loss, cache.output(), &data.targets)
        .unwrap()
        .scale(1.0 / data.len() as f64);
    let analytic = net.grads_to_params(&net.backward(&cache, &d_out));
    let n = analytic.len();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut e = ParamVec::zeros(n);
        e.0[i] = 1.0;
        let lp = net.offset(&e, h).unwrap().loss(data).unwrap();
        let lm = net.offset(&e, -h).unwrap().loss(data).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let g = analytic.0[i];
        worst = worst.max((fd - g).abs() / g.abs().max(fd.abs()).max(1.0));
    }
    worst
}

fn c3_gradients() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for loss in [
        LossFamily::SoftmaxCrossEntropy,
        LossFamily::GaussianSquaredError,
    ] {
        for activation in [Activation::Identity, Activation::Relu, Activation::Tanh] {
            let mut rng = seeded_rng(cases);
            let dense = Network::random(&[4, 5, 3], activation, loss, 1.0, &mut rng).unwrap();
            let data = match loss {
                LossFamily::SoftmaxCrossEntropy => Dataset::classification(
                    random_matrix(9, 4, 30 + cases),
                    (0..9).map(|i| i % 3).collect(),
                    3,
                    0,
                )
                .unwrap(),
                LossFamily::GaussianSquaredError => Dataset::regression(
                    random_matrix(9, 4, 30 + cases),
                    random_matrix(9, 3, 60 + cases),
                    0,
                )
                .unwrap(),
            };
            let mut factorized = dense.to_factorized().unwrap();
            for (i, layer) in factorized.layers.iter_mut().enumerate() {
                if let Layer::Factorized(f) = layer {
                    let r = f.rank();
                    f.s = random_matrix(r, r, 90 + cases + i as u64);
                }
            }
            let compiled = lowrank_core::net::compile_network(&factorized).unwrap();
            for net in [&dense, &factorized, &compiled] {
                worst = worst.max(fd_mismatch(net, &data));
                cases += 1;
            }
        }
    }
    verdict(
        worst <= 1e-6,
        format!("{cases} networks, worst relative error {worst:.2e}"),
    )
}

fn c4_fim_expansion() -> Verdict {
    let mut rng = seeded_rng(4);
    let net = Network::random(
        &[4, 6, 3],
        Activation::Tanh,
        LossFamily::SoftmaxCrossEntropy,
        1.0,
        &mut rng,
    )
    .unwrap();
    let data = generate_synthetic(4, 3, 30, 1.0, 4).unwrap();
    let delta = ParamVec(random_matrix(1, net.num_params(), 5).into_vec());
    let mut ratios = Vec::new();
    for t in [1e-2, 5e-3] {
        let res = fim_quadratic_check(&net, &data, &delta, &[t, t / 2.0]).unwrap();
        ratios.push(res[1].1 / res[0].1);
    }
    verdict(
        ratios.iter().all(|&r| r <= 0.25),
        format!("residual ratios {:.4} {:.4}", ratios[0], ratios[1]),
    )
}

fn c5_pythagoras() -> Verdict {
    let mut rng = seeded_rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c = rng.gen_range(3..=6);
        let frozen = rng.gen_range(1..c);
        let mut idx: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let mut frozen_idx = idx[..frozen].to_vec();
        frozen_idx.sort_unstable();
        let values = (0..frozen).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let sub = EFlatRestriction::new(frozen_idx, values).unwrap();
        let p = CategoricalParams::new((0..c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let free: Vec<f64> = (0..sub.free_indices(c).len())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let q = sub.point(c, &free).unwrap();
        worst = worst.max(pythagorean_gap(&p, &sub, &q).unwrap());
    }
    verdict(worst <= 1e-6, format!("worst gap {worst:.2e}"))
}

fn two_layer_tanh(seed: u64, anisotropy: f64) -> (Network, Dataset) {
    let data = generate_synthetic(6, 3, 200, anisotropy, seed).unwrap();
    let net = Network::random(
        &[6, 8, 3],
        Activation::Tanh,
        LossFamily::SoftmaxCrossEntropy,
        1.0,
        &mut seeded_rng(seed + 1),
    )
    .unwrap();
    (net, data)
}

fn c6_convergence() -> Verdict {
    let (net, data) = two_layer_tanh(6, 1.0);
    let l = lipschitz_estimate(&net, &data, 0).unwrap();
    let cfg = |alpha: f64, steps: usize| TrainConfig {
        max_steps: steps,
        learning_rate: alpha,
        rank_penalty: 1e-3,
        ..TrainConfig::default()
    };
    let good = cfg(0.5 / l, 500);
    let run = train_prox_iht(&net, &data, &good).unwrap();
    let report = verify_convergence(&run.trace, &good, l).unwrap();
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    let bad = cfg(10.0 / l, 500);
    let negative = match train_prox_iht(&net, &data, &bad) {
        Ok(run) => {
            let r = verify_convergence(&run.trace, &bad, l).unwrap();
            !r.check("sufficient_decrease").unwrap().passed
        }
        Err(_) => false,
    };
    verdict(
        failed.is_empty() && negative,
        format!(
            "L = {l:.4}, failed checks at 0.5/L: {failed:?}, 10/L rejected by decrease check: {negative}"
        ),
    )
}

fn c7_fisher_prox() -> Verdict {
    let (net, data) = two_layer_tanh(7, 1.0);
    let cfg = TrainConfig {
        max_steps: 100,
        learning_rate: 0.1,
        rank_penalty: 1e-3,
        fisher_mode: FisherMode::Uniform,
        ..TrainConfig::default()
    };
    let euclid = train(Method::ProxIht, &net, &data, &cfg).unwrap();
    let uniform = train(Method::FisherProx, &net, &data, &cfg).unwrap();
    let identical = euclid.trace.to_csv() == uniform.trace.to_csv() && euclid.net == uniform.net;

    let (mut cur, data) = two_layer_tanh(7, 10.0);
    let (alpha, lambda): (f64, f64) = (0.05, 2e-3);
    let floor = (2.0 * alpha * lambda).sqrt();
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let fisher = FisherInfo::estimate(&cur, &data, FisherMode::Empirical).unwrap();
        let next = fisher_prox_step(&cur, &data, &fisher, alpha, lambda).unwrap();
        for (i, layer) in next.layers.iter().enumerate() {
            let Layer::Dense(d) = layer else {
                unreachable!()
            };
            let rw = fisher.clamped_row_weights(i);
            let dw = Matrix::from_fn(d.weight.rows(), d.weight.cols(), |r, c| {
                rw[r].sqrt() * d.weight[(r, c)]
            });
            // Singular values below working precision belong to the discarded part.
            let s = svd(&dw).unwrap().s;
            let noise = s[0] * 1e-10;
            if let Some(min) = s.iter().copied().filter(|&v| v > noise).reduce(f64::min) {
                worst = worst.min(min / floor);
            }
        }
        cur = next;
    }
    verdict(
        identical && worst >= 1.0 - 1e-9,
        format!(
            "uniform trace identical: {identical}, min sigma(D W) / sqrt(2 alpha lambda) = {worst:.4}"
        ),
    )
}

/// Anisotropic classification, 25% rank on every layer but the output one.
fn table1_config(method: MethodTag, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(method, seed);
    cfg.task.anisotropy = 10.0;
    cfg.task.samples = 512;
    cfg.model.hidden = vec![64];
    cfg.training.pretrain_steps = 300;
    cfg.training.finetune_steps = 200;
    cfg.svd.rank_fraction = Some(0.25);
    cfg.svd.keep_head = true;
    cfg
}

struct Table1 {
    zero_shot_loss: [Vec<f64>; 2],
    finetuned_acc: [Vec<f64>; 2],
}

fn table1_runs() -> Table1 {
    let mut t = Table1 {
        zero_shot_loss: [vec![], vec![]],
        finetuned_acc: [vec![], vec![]],
    };
    for (k, m) in [MethodTag::Svd, MethodTag::Fwsvd].into_iter().enumerate() {
        for seed in 0..10 {
            let out = run_experiment(&table1_config(m, seed)).unwrap();
            t.zero_shot_loss[k].push(out.zero_shot_loss.unwrap());
            t.finetuned_acc[k].push(out.rows.last().unwrap().finetuned_acc);
        }
    }
    t
}

fn c8_zero_shot(t: &Table1) -> Verdict {
    let svd = median(t.zero_shot_loss[0].clone());
    let fw = median(t.zero_shot_loss[1].clone());
    verdict(
        fw <= svd,
        format!("median zero-shot loss: fwsvd {fw:.4}, svd {svd:.4}"),
    )
}

fn c9_finetuned(t: &Table1) -> Verdict {
    let svd = median(t.finetuned_acc[0].clone());
    let fw = median(t.finetuned_acc[1].clone());
    let gap = 100.0 * (fw - svd).abs();
    verdict(
        gap <= 2.0,
        format!("median accuracy after refit: fwsvd {fw:.4}, svd {svd:.4}, gap {gap:.2} points"),
    )
}

fn c10_deep_linear() -> Verdict {
    let mut hits = 0;
    let mut seen = Vec::new();
    for seed in 0..10 {
        let out = run_experiment(&deep_linear_demo_config(seed)).unwrap();
        let ranks = out.network.ranks();
        if ranks.iter().all(|&r| r == 3) {
            hits += 1;
        }
        seen.push(ranks);
    }
    verdict(
        hits >= 8,
        format!("{hits}/10 seeds at rank 3 everywhere; ranks {seen:?}"),
    )
}

/// Accuracy at `target` by linear interpolation over `(fraction, accuracy)` points.
fn accuracy_at(mut points: Vec<(f64, f64)>, target: f64) -> Option<f64> {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.windows(2).find_map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 <= target && target <= x1 {
            let t = if x1 > x0 {
                (target - x0) / (x1 - x0)
            } else {
                0.0
            };
            Some(y0 + t * (y1 - y0))
        } else {
            None
        }
    })
}

fn c11_depth_schedule() -> Verdict {
    const TARGET: f64 = 0.5;
    let mut medians = Vec::new();
    let mut unmatched = 0;
    for schedule in [DepthSchedule::Increasing, DepthSchedule::Decreasing] {
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut points = Vec::new();
            for beta in [0.3, 0.4, 0.5, 0.6] {
                let mut cfg = ExperimentConfig::new(MethodTag::Oialr, seed);
                cfg.task.samples = 512;
                cfg.model.hidden = vec![32, 32, 32];
                cfg.training.max_steps = 500;
                cfg.training.steps_per_epoch = 25;
                cfg.oialr.oialr_threshold = beta;
                cfg.oialr.oialr_depth_schedule = schedule;
                let out = run_experiment(&cfg).unwrap();
                let last = out.rows.last().unwrap();
                points.push((last.param_fraction, last.finetuned_acc));
            }
            match accuracy_at(points, TARGET) {
                Some(a) => accs.push(a),
                None => unmatched += 1,
            }
        }
        medians.push(if accs.is_empty() {
            f64::NAN
        } else {
            median(accs)
        });
    }
    verdict(
        unmatched == 0 && medians[0] >= medians[1],
        format!(
            "median accuracy at parameter fraction {TARGET}: increasing {:.4}, decreasing {:.4}; unmatched seeds {unmatched}",
            medians[0], medians[1]
        ),
    )
}

fn c12_determinism() -> Verdict {
    let mut grid = Vec::new();
    for method in [MethodTag::Oialr, MethodTag::Ieht] {
        for beta in [0.3, 0.6, 0.9] {
            for schedule in [DepthSchedule::Increasing, DepthSchedule::Decreasing] {
                let mut cfg = ExperimentConfig::new(method, 12);
                cfg.task.dim = 16;
                cfg.task.samples = 256;
                cfg.task.test_samples = 256;
                cfg.model.hidden = vec![32, 32];
                cfg.training.max_steps = 200;
                cfg.training.steps_per_epoch = 25;
                cfg.oialr.oialr_threshold = beta;
                cfg.oialr.oialr_depth_schedule = schedule;
                grid.push(cfg);
            }
        }
    }
    let opts = ReportOptions { wall_time: false };
    let render = |jobs| render_report(&sweep(&grid, jobs).unwrap().rows, opts).unwrap();
    let single = render(1);
    let again = render(1);
    let parallel = render(4);
    verdict(
        single == again && single == parallel,
        format!(
            "{} configs, {} report lines, repeat identical {}, jobs 4 identical {}",
            grid.len(),
            single.lines().count(),
            single == again,
            single == parallel
        ),
    )
}

/// `prior` is time already spent on shared fixtures.
fn run_with(
    id: usize,
    name: &str,
    budget: Duration,
    prior: Duration,
    f: impl FnOnce() -> Verdict,
    failures: &mut Vec<usize>,
) {
    let start = Instant::now();
    let v = f();
    let elapsed = start.elapsed() + prior;
    let in_time = elapsed <= budget;
    let ok = v.passed && in_time;
    if !ok {
        failures.push(id);
    }
    // Bypasses output capture so the lines show in every test run.
    let _ = writeln!(
        std::io::stderr(),
        "[{}] {id:>2} {name}: {} ({:.1}s of {}s{})",
        if ok { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
}

fn run(
    id: usize,
    name: &str,
    budget: Duration,
    f: impl FnOnce() -> Verdict,
    failures: &mut Vec<usize>,
) {
    run_with(id, name, budget, Duration::ZERO, f, failures);
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let mut failures = Vec::new();
    let _ = writeln!(std::io::stderr());
    run(
        1,
        "rank prox vs exhaustive rank search",
        s(5),
        c1_prox_oracle,
        &mut failures,
    );
    run(
        2,
        "truncation residual equals tail energy",
        s(2),
        c2_eckart_young,
        &mut failures,
    );
    run(
        3,
        "gradients vs central differences",
        s(30),
        c3_gradients,
        &mut failures,
    );
    run(
        4,
        "KL quadratic expansion",
        s(10),
        c4_fim_expansion,
        &mut failures,
    );
    run(
        5,
        "Pythagorean relation of m-projections",
        s(5),
        c5_pythagoras,
        &mut failures,
    );
    run(
        6,
        "prox-IHT convergence telemetry",
        s(60),
        c6_convergence,
        &mut failures,
    );
    run(
        7,
        "Fisher-metric prox",
        s(60),
        c7_fisher_prox,
        &mut failures,
    );
    let start = Instant::now();
    let t1 = table1_runs();
    let shared = start.elapsed();
    // The paired runs serve both comparisons; each is charged their full cost.
    run_with(
        8,
        "FWSVD zero-shot loss <= SVD",
        s(300),
        shared,
        || c8_zero_shot(&t1),
        &mut failures,
    );
    run_with(
        9,
        "refit accuracy gap FWSVD vs SVD",
        s(300),
        shared,
        || c9_finetuned(&t1),
        &mut failures,
    );
    run(
        10,
        "deep linear rank recovery",
        s(180),
        c10_deep_linear,
        &mut failures,
    );
    run(
        11,
        "increasing vs decreasing depth schedule",
        s(600),
        c11_depth_schedule,
        &mut failures,
    );
    run(
        12,
        "sweep determinism across thread counts",
        s(600),
        c12_determinism,
        &mut failures,
    );
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
