//! Dense training with periodic truncation and a nuclear-norm push.
//!
//! Every `trp_frequency`-th update replaces gradient descent by an energy
//! truncation of each weight and remembers `G = U_k·V_kᵀ`. Every
//! `nuclear_norm_frequency`-th update additionally subtracts
//! `nuclear_norm_weight·G`, a subgradient step on the nuclear norm. The
//! last update always truncates, and the output is factorized at the kept
//! ranks.

use crate::compress::{select_rank, Criterion};
use crate::error::Result;
use crate::fisher::FisherInfo;
use crate::linalg::{svd, Matrix};
use crate::net::{factorize_layer, Dataset, Layer, Network};

use super::lowrank::projection_event;
use super::{
    displacement_sq, ensure_finite, gradient_step, objective, train, Method, Observer, StepRecord,
    TrainConfig, TrainEvent, TrainRun, TrainTrace,
};

pub fn train_trp(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::Trp, net, data, cfg)
}

pub fn train_fwtrp(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::Fwtrp, net, data, cfg)
}

struct Truncation {
    net: Network,
    ranks: Vec<usize>,
    /// `D⁻¹·U_k·V_kᵀ` per layer (`D = I` for the Euclidean variant).
    directions: Vec<Matrix>,
    min_retained: Vec<Option<f64>>,
    metric_modulus: f64,
}

fn truncate_all(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    weighted: bool,
) -> Result<Truncation> {
    let fisher = if weighted {
        Some(FisherInfo::estimate(net, data, cfg.fisher_mode)?)
    } else {
        None
    };
    let mut out = net.clone();
    let mut ranks = Vec::with_capacity(net.layers.len());
    let mut directions = Vec::with_capacity(net.layers.len());
    let mut mins = Vec::with_capacity(net.layers.len());
    let mut modulus = 1.0f64;
    for (i, layer) in out.layers.iter_mut().enumerate() {
        let Layer::Dense(dense) = layer else {
            return Err(crate::Error::Unsupported(
                "truncation training needs dense layers".into(),
            ));
        };
        let d: Option<Vec<f64>> = fisher
            .as_ref()
            .map(|f| cfg.weighting.scales(&f.clamped_row_weights(i)));
        let z = match &d {
            Some(d) => dense.weight.scale_rows(d),
            None => dense.weight.clone(),
        };
        let dec = svd(&z)?;
        let floor = cfg.schedule.min_rank(z.rows().min(z.cols()));
        let k = select_rank(&dec.s, Criterion::LayerEnergy, cfg.trp_threshold, floor)?;
        let uk = dec.u.take_cols(k);
        let vtk = dec.vt.take_rows(k);
        let zk = uk.scale_cols(&dec.s[..k]).matmul(&vtk);
        let g = uk.matmul(&vtk);
        match &d {
            Some(d) => {
                let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
                dense.weight = zk.scale_rows(&inv);
                directions.push(g.scale_rows(&inv));
                modulus = modulus.min(d.iter().map(|v| v * v).fold(f64::INFINITY, f64::min));
            }
            None => {
                dense.weight = zk;
                directions.push(g);
            }
        }
        ranks.push(k);
        mins.push(Some(dec.s[k - 1]));
    }
    ensure_finite(&out)?;
    Ok(Truncation {
        net: out,
        ranks,
        directions,
        min_retained: mins,
        metric_modulus: modulus,
    })
}

pub(super) fn run(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    weighted: bool,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    let mut cur = net.clone();
    let mut trace = TrainTrace::default();
    let mut prev: Option<Network> = None;
    let mut ranks = cur.ranks();
    let mut directions: Option<Vec<Matrix>> = None;
    let mut mins = vec![None; cur.layers.len()];
    let mut modulus = 1.0;
    for t in 0..=cfg.max_steps {
        let (loss, grads) = cur.loss_and_grad(data).map_err(super::at_step(t))?;
        trace.records.push(StepRecord {
            step: t,
            loss,
            objective: objective(loss, cfg.rank_penalty, &ranks),
            ranks: ranks.clone(),
            step_norm: prev
                .as_ref()
                .map(|p| displacement_sq(p, &cur).sqrt())
                .unwrap_or(0.0),
            min_nonzero_sv: std::mem::replace(&mut mins, vec![None; cur.layers.len()]),
            metric_modulus: std::mem::replace(&mut modulus, 1.0),
        });
        if t == cfg.max_steps {
            break;
        }
        let step = t + 1;
        let truncating = step % cfg.trp_frequency == 0 || step == cfg.max_steps;
        let mut next = if truncating {
            let tr = truncate_all(&cur, data, cfg, weighted).map_err(super::at_step(step))?;
            trace.events.push(projection_event(
                step,
                &cur,
                loss,
                &grads,
                &tr.net,
                tr.ranks.clone(),
                data,
                &tr.min_retained,
            )?);
            ranks = tr.ranks;
            mins = tr.min_retained;
            modulus = tr.metric_modulus;
            directions = Some(tr.directions);
            tr.net
        } else {
            gradient_step(&cur, &grads, cfg.learning_rate).map_err(super::at_step(step))?
        };
        if step % cfg.nuclear_norm_frequency == 0 && cfg.nuclear_norm_weight > 0.0 {
            if let Some(dirs) = &directions {
                for (layer, g) in next.layers.iter_mut().zip(dirs) {
                    if let Layer::Dense(d) = layer {
                        d.weight.axpy(-cfg.nuclear_norm_weight, g);
                    }
                }
            }
        }
        prev = Some(std::mem::replace(&mut cur, next));
        if truncating {
            observer(TrainEvent::Projection { step, net: &cur })?;
        }
        observer(TrainEvent::Step { step, net: &cur })?;
    }
    if cfg.max_steps > 0 {
        cur = factorize_at(&cur, &ranks)?;
    }
    Ok(TrainRun { net: cur, trace })
}

/// Factorizes each dense layer at its kept rank.
fn factorize_at(net: &Network, ranks: &[usize]) -> Result<Network> {
    let layers = net
        .layers
        .iter()
        .zip(ranks)
        .map(|(l, &k)| match l {
            Layer::Dense(d) => factorize_layer(&d.weight, &d.bias, k).map(Layer::Factorized),
            other => Ok(other.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, net.activation, net.loss)
}
