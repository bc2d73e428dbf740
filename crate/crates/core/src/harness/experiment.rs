//! Running one configuration, a grid of them, and Pareto extraction.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{compress_network, ranks_for_fraction};
use crate::error::{Error, Result};
use crate::net::{Dataset, Network, Targets};
use crate::random::seeded_rng;
use crate::trainers::{train, train_observed, Method, TrainConfig, TrainEvent, TrainTrace};

use super::config::{ExperimentConfig, MethodKind, TaskKind};
use super::data::{csv_dataset, deep_linear_student, deep_linear_task, generate_synthetic};

/// One evaluation of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub config_id: String,
    /// Deployed parameters over the dense parameter count of the architecture.
    pub param_fraction: f64,
    /// Test accuracy right after the most recent projection or cut (NaN
    /// before the first one, and for regression tasks).
    pub zero_shot_acc: f64,
    /// Test accuracy at the end of the epoch (NaN for regression tasks).
    pub finetuned_acc: f64,
    pub epoch: usize,
    pub wall_ms: u64,
    pub pareto: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config_id: String,
    pub rows: Vec<SweepRow>,
    pub trace: TrainTrace,
    /// Final network in its training representation.
    pub network: Network,
    pub test_loss: f64,
    /// Test loss right after the projection, for one-shot methods.
    pub zero_shot_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    pub net: Network,
}

/// Seeds derived from the experiment seed so that data, initialization and
/// held-out draws never share a stream.
const DATA_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

pub fn build_task(cfg: &ExperimentConfig) -> Result<Task> {
    let t = &cfg.task;
    let (train, test) = match t.kind {
        TaskKind::SyntheticClassification => (
            generate_synthetic(
                t.dim,
                t.classes,
                t.samples,
                t.anisotropy,
                stream(cfg.seed, DATA_STREAM),
            )?,
            generate_synthetic(
                t.dim,
                t.classes,
                t.test_samples,
                t.anisotropy,
                stream(cfg.seed, TEST_STREAM),
            )?,
        ),
        TaskKind::DeepLinear => {
            let task = deep_linear_task(
                t.dim,
                t.teacher_rank,
                t.samples,
                t.noise,
                stream(cfg.seed, DATA_STREAM),
            )?;
            let net = deep_linear_student(
                t.dim,
                t.depth,
                cfg.model.init_scale,
                stream(cfg.seed, INIT_STREAM),
            )?;
            return Ok(Task {
                train: task.train,
                test: task.test,
                net,
            });
        }
        TaskKind::CsvDataset => {
            let path = t
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("csv_dataset needs task.path".into()))?;
            let train = csv_dataset(path, &t.label_column, cfg.seed)?;
            let test = match &t.test_path {
                Some(p) => csv_dataset(p, &t.label_column, cfg.seed)?,
                None => train.clone(),
            };
            (train, test)
        }
    };
    let classes = match (&train.targets, &test.targets) {
        (Targets::Classes { classes: a, .. }, Targets::Classes { classes: b, .. }) => (*a).max(*b),
        _ => unreachable!("classification tasks"),
    };
    let mut sizes = vec![train.inputs.cols()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(classes);
    let net = Network::random(
        &sizes,
        cfg.model.activation,
        crate::net::LossFamily::SoftmaxCrossEntropy,
        cfg.model.init_scale,
        &mut seeded_rng(stream(cfg.seed, INIT_STREAM)),
    )?;
    Ok(Task { train, test, net })
}

fn accuracy_or_nan(net: &Network, data: &Dataset) -> Result<f64> {
    match data.targets {
        Targets::Classes { .. } => net.accuracy(data),
        Targets::Real(_) => Ok(f64::NAN),
    }
}

/// Dense parameter count of the architecture a network was trained from.
pub fn dense_param_count(net: &Network) -> usize {
    net.layers
        .iter()
        .map(|l| l.n_out() * l.n_in() + l.n_out())
        .sum()
}

/// Deployed parameters of `net` over the dense count of the same layer shapes.
pub fn param_fraction(net: &Network) -> f64 {
    net.deployed_param_count() as f64 / dense_param_count(net) as f64
}

/// Per-layer ranks for a one-shot projection, clamped to the layer sizes.
pub fn one_shot_ranks(cfg: &ExperimentConfig, net: &Network) -> Vec<usize> {
    let mut ranks = match (cfg.svd.rank, cfg.svd.rank_fraction) {
        (Some(r), _) => net
            .layers
            .iter()
            .map(|l| r.clamp(1, l.n_out().min(l.n_in())))
            .collect(),
        (None, Some(f)) => ranks_for_fraction(net, f),
        (None, None) => net.ranks(),
    };
    if cfg.svd.keep_head {
        if let (Some(r), Some(l)) = (ranks.last_mut(), net.layers.last()) {
            *r = l.n_out().min(l.n_in());
        }
    }
    ranks
}

/// Runs one configuration. Trainers report a row at each epoch end; one-shot
/// methods pretrain densely, project, then refit with frozen bases and
/// report a row at each refit epoch end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let task = build_task(cfg)?;
    let id = cfg.fingerprint();
    let tag = cfg.method.tag().to_string();
    let spe = cfg.training.steps_per_epoch;
    let row = |net: &Network, zero_shot: f64, epoch: usize, finetuned: f64| SweepRow {
        method: tag.clone(),
        config_id: id.clone(),
        param_fraction: param_fraction(net),
        zero_shot_acc: zero_shot,
        finetuned_acc: finetuned,
        epoch,
        wall_ms: start.elapsed().as_millis() as u64,
        pareto: false,
    };
    let mut rows = Vec::new();
    match cfg.kind() {
        MethodKind::Trainer(method) => {
            let tc = cfg.train_config();
            let mut zero_shot = f64::NAN;
            let mut last_epoch_step = 0;
            let run = train_observed(method, &task.net, &task.train, &tc, &mut |e| {
                match e {
                    TrainEvent::Projection { net, .. } => {
                        zero_shot = accuracy_or_nan(net, &task.test)?
                    }
                    TrainEvent::Step { step, net } => {
                        if step % spe == 0 {
                            rows.push(row(
                                net,
                                zero_shot,
                                step / spe,
                                accuracy_or_nan(net, &task.test)?,
                            ));
                            last_epoch_step = step;
                        }
                    }
                }
                Ok(())
            })?;
            // Trailing partial epoch, and TRP's final factorization.
            if last_epoch_step != tc.max_steps || rows.is_empty() {
                rows.push(row(
                    &run.net,
                    zero_shot,
                    tc.max_steps.div_ceil(spe),
                    accuracy_or_nan(&run.net, &task.test)?,
                ));
            } else if let Some(last) = rows.last_mut() {
                last.param_fraction = param_fraction(&run.net);
            }
            Ok(ExperimentOutcome {
                config_id: id.clone(),
                test_loss: run.net.loss(&task.test)?,
                rows,
                trace: run.trace,
                network: run.net,
                zero_shot_loss: None,
            })
        }
        MethodKind::OneShot(projection) => {
            let pre_cfg = TrainConfig {
                max_steps: cfg.training.pretrain_steps,
                learning_rate: cfg.training.learning_rate,
                ..TrainConfig::default()
            };
            let pretrained = train(Method::Sgd, &task.net, &task.train, &pre_cfg)?.net;
            let ranks = one_shot_ranks(cfg, &pretrained);
            let compressed = compress_network(&pretrained, &task.train, projection, &ranks)?;
            let zero_shot = accuracy_or_nan(&compressed, &task.test)?;
            let zero_shot_loss = compressed.loss(&task.test)?;
            let refit_cfg = TrainConfig {
                max_steps: cfg.training.finetune_steps,
                learning_rate: cfg.training.learning_rate,
                ..TrainConfig::default()
            };
            let mut last_epoch_step = 0;
            let refit = train_observed(
                Method::Sgd,
                &compressed,
                &task.train,
                &refit_cfg,
                &mut |e| {
                    if let TrainEvent::Step { step, net } = e {
                        if step % spe == 0 {
                            rows.push(row(
                                net,
                                zero_shot,
                                step / spe,
                                accuracy_or_nan(net, &task.test)?,
                            ));
                            last_epoch_step = step;
                        }
                    }
                    Ok(())
                },
            )?;
            if last_epoch_step != refit_cfg.max_steps || rows.is_empty() {
                rows.push(row(
                    &refit.net,
                    zero_shot,
                    refit_cfg.max_steps.div_ceil(spe),
                    accuracy_or_nan(&refit.net, &task.test)?,
                ));
            }
            Ok(ExperimentOutcome {
                config_id: id.clone(),
                test_loss: refit.net.loss(&task.test)?,
                rows,
                trace: refit.trace,
                network: refit.net,
                zero_shot_loss: Some(zero_shot_loss),
            })
        }
    }
}

/// Writes `trace.csv`, `checkpoint.lrck` and `report.csv` into `dir`.
pub fn write_outputs(
    outcome: &ExperimentOutcome,
    dir: &Path,
    options: super::ReportOptions,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trace.csv"), outcome.trace.to_csv())?;
    super::save_checkpoint(&outcome.network, &dir.join("checkpoint.lrck"))?;
    let mut rows = outcome.rows.clone();
    mark_pareto(&mut rows);
    super::emit_report(&rows, &dir.join("report.csv"), options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub method: String,
    pub config_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

/// Runs every configuration on a pool of `jobs` threads (0 means one per
/// core). Rows come back sorted by `(method, config_id, epoch)` with the
/// Pareto column filled; a failing configuration is recorded and skipped.
pub fn sweep(grid: &[ExperimentConfig], jobs: usize) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::arg("empty sweep grid"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<std::result::Result<Vec<SweepRow>, SweepFailure>> = pool.install(|| {
        grid.par_iter()
            .map(|cfg| {
                run_experiment(cfg)
                    .map(|o| o.rows)
                    .map_err(|e| SweepFailure {
                        method: cfg.method.tag().into(),
                        config_id: cfg.fingerprint(),
                        message: e.to_string(),
                    })
            })
            .collect()
    });
    let mut result = SweepResult::default();
    for o in outcomes {
        match o {
            Ok(rows) => result.rows.extend(rows),
            Err(f) => result.failures.push(f),
        }
    }
    sort_rows(&mut result.rows);
    result
        .failures
        .sort_by(|a, b| (&a.method, &a.config_id).cmp(&(&b.method, &b.config_id)));
    mark_pareto(&mut result.rows);
    Ok(result)
}

pub fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        (&a.method, &a.config_id, a.epoch).cmp(&(&b.method, &b.config_id, b.epoch))
    });
}

/// `a` dominates `b`: at least as accurate with no more parameters, and
/// strictly better in one of the two.
pub fn dominates(a: &SweepRow, b: &SweepRow) -> bool {
    a.finetuned_acc >= b.finetuned_acc
        && a.param_fraction <= b.param_fraction
        && (a.finetuned_acc > b.finetuned_acc || a.param_fraction < b.param_fraction)
}

/// Marks the rows no other row dominates. Rows without an accuracy never
/// make the front.
pub fn mark_pareto(rows: &mut [SweepRow]) {
    let mut order: Vec<usize> = (0..rows.len())
        .filter(|&i| !rows[i].finetuned_acc.is_nan())
        .collect();
    // Sweep by ascending parameter fraction, best accuracy first within ties.
    order.sort_by(|&i, &j| {
        rows[i]
            .param_fraction
            .total_cmp(&rows[j].param_fraction)
            .then(rows[j].finetuned_acc.total_cmp(&rows[i].finetuned_acc))
    });
    for r in rows.iter_mut() {
        r.pareto = false;
    }
    let mut best = f64::NEG_INFINITY;
    let mut k = 0;
    while k < order.len() {
        // A group of rows with identical coordinates shares one verdict.
        let (pf, acc) = (rows[order[k]].param_fraction, rows[order[k]].finetuned_acc);
        let mut end = k;
        while end < order.len()
            && rows[order[end]].param_fraction == pf
            && rows[order[end]].finetuned_acc == acc
        {
            end += 1;
        }
        let on_front = acc > best;
        for &i in &order[k..end] {
            rows[i].pareto = on_front;
        }
        // Later rows with the same fraction and lower accuracy are dominated.
        best = best.max(acc);
        k = end;
    }
}
