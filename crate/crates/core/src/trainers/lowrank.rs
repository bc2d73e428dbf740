//! Frozen-basis training with periodic cuts of the inner factor.
//!
//! Before iteration `d` the network is trained at full rank. At `d` every
//! dense layer is factorized as `U·S·Vᵀ` with frozen bases; afterwards only
//! `S` and the biases train, and every `ν`-th iteration diagonalizes `S`,
//! rotates the bases and drops the tail selected by the schedule criterion.

use crate::compress::{
    depth_adjusted_beta, select_rank, select_ranks_global, Criterion, RowWeighting,
};
use crate::error::{Error, Result};
use crate::fisher::FisherInfo;
use crate::linalg::{pinv, svd, Matrix};
use crate::net::{factorize_layer, Dataset, FactorizedLayer, Layer, LayerGrad, Network};

use super::{
    displacement_sq, gradient_step, objective, train, Method, Observer, ProjectionEvent,
    StepRecord, TrainConfig, TrainEvent, TrainRun, TrainTrace,
};

pub fn train_oialr(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::Oialr, net, data, cfg)
}

pub fn train_ieht(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::Ieht, net, data, cfg)
}

pub fn train_ifht(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::Ifht, net, data, cfg)
}

enum Action {
    Train,
    Convert,
    Cut,
}

fn action(t: usize, delay: usize, nu: usize) -> Action {
    if t < delay {
        Action::Train
    } else if t == delay {
        Action::Convert
    } else if t.is_multiple_of(nu) {
        Action::Cut
    } else {
        Action::Train
    }
}

/// Per-layer outcome of a cut.
struct Cut {
    net: Network,
    min_retained: Vec<Option<f64>>,
    metric_modulus: f64,
}

pub(super) fn run(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    if cfg.schedule.criterion == Criterion::FixedRank {
        return Err(Error::arg("during-training cuts need a cutoff criterion"));
    }
    let min_ranks: Vec<usize> = net
        .layers
        .iter()
        .map(|l| cfg.schedule.min_rank(l.n_out().min(l.n_in())))
        .collect();
    let (delay, nu) = (cfg.delay_steps(), cfg.nu_steps());
    let mut cur = net.clone();
    let mut trace = TrainTrace::default();
    let mut prev: Option<Network> = None;
    let mut mins = vec![None; cur.layers.len()];
    let mut modulus = 1.0;
    for t in 0..=cfg.max_steps {
        let (loss, grads) = cur.loss_and_grad(data).map_err(super::at_step(t))?;
        let ranks = cur.ranks();
        trace.records.push(StepRecord {
            step: t,
            loss,
            objective: objective(loss, cfg.rank_penalty, &ranks),
            ranks,
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
        let is_cut = match action(t, delay, nu) {
            Action::Train => {
                let next = gradient_step(&cur, &grads, cfg.learning_rate)
                    .map_err(super::at_step(t + 1))?;
                prev = Some(std::mem::replace(&mut cur, next));
                false
            }
            Action::Convert => {
                let next = cur.to_factorized()?;
                prev = Some(std::mem::replace(&mut cur, next));
                false
            }
            Action::Cut => {
                let cut =
                    cut_network(&cur, data, cfg, &min_ranks).map_err(super::at_step(t + 1))?;
                let event = projection_event(
                    t + 1,
                    &cur,
                    loss,
                    &grads,
                    &cut.net,
                    cut.net.ranks(),
                    data,
                    &cut.min_retained,
                )?;
                trace.events.push(event);
                mins = cut.min_retained;
                modulus = cut.metric_modulus;
                prev = Some(std::mem::replace(&mut cur, cut.net));
                true
            }
        };
        if is_cut {
            observer(TrainEvent::Projection {
                step: t + 1,
                net: &cur,
            })?;
        }
        observer(TrainEvent::Step {
            step: t + 1,
            net: &cur,
        })?;
    }
    Ok(TrainRun { net: cur, trace })
}

fn layer_beta(cfg: &TrainConfig, layer: usize, num_layers: usize) -> f64 {
    if cfg.schedule.criterion.is_global() {
        cfg.schedule.beta
    } else {
        depth_adjusted_beta(
            cfg.schedule.beta,
            layer,
            num_layers,
            cfg.schedule.depth_schedule,
        )
    }
}

/// Ranks for a set of spectra, clamped to each layer's current rank.
fn choose_ranks(
    spectra: &[Vec<f64>],
    cfg: &TrainConfig,
    min_ranks: &[usize],
) -> Result<Vec<usize>> {
    let n = spectra.len();
    let floors: Vec<usize> = spectra
        .iter()
        .zip(min_ranks)
        .map(|(s, &m)| m.min(s.len()))
        .collect();
    if cfg.schedule.criterion.is_global() {
        return select_ranks_global(spectra, cfg.schedule.beta, &floors);
    }
    spectra
        .iter()
        .enumerate()
        .map(|(l, s)| select_rank(s, cfg.schedule.criterion, layer_beta(cfg, l, n), floors[l]))
        .collect()
}

fn factorized_indices(net: &Network) -> Vec<usize> {
    (0..net.layers.len())
        .filter(|&i| matches!(net.layers[i], Layer::Factorized(_)))
        .collect()
}

fn cut_network(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    min_ranks: &[usize],
) -> Result<Cut> {
    let idx = factorized_indices(net);
    let floors: Vec<usize> = idx.iter().map(|&i| min_ranks[i]).collect();
    let mut out = net.clone();
    let mut min_retained = vec![None; net.layers.len()];
    let mut modulus = 1.0f64;
    if cfg.schedule.criterion.is_fisher() {
        let fisher = FisherInfo::estimate(net, data, cfg.fisher_mode)?;
        let prepared: Vec<FisherCut> = idx
            .iter()
            .map(|&i| {
                let Layer::Factorized(f) = &net.layers[i] else {
                    unreachable!()
                };
                FisherCut::prepare(f, &fisher.clamped_row_weights(i), cfg.weighting)
            })
            .collect::<Result<_>>()?;
        let spectra: Vec<Vec<f64>> = prepared.iter().map(|p| p.spectrum.clone()).collect();
        let ranks = choose_ranks(&spectra, cfg, &floors)?;
        for ((&i, p), k) in idx.iter().zip(prepared).zip(ranks) {
            modulus = modulus.min(p.modulus);
            min_retained[i] = Some(p.spectrum[k - 1]);
            out.layers[i] = Layer::Factorized(p.finish(k)?);
        }
    } else {
        let rotated: Vec<FactorizedLayer> = idx
            .iter()
            .map(|&i| {
                let Layer::Factorized(f) = &net.layers[i] else {
                    unreachable!()
                };
                rotate(f)
            })
            .collect::<Result<_>>()?;
        let spectra: Vec<Vec<f64>> = rotated.iter().map(|f| f.s.diagonal()).collect();
        let ranks = choose_ranks(&spectra, cfg, &floors)?;
        for ((&i, f), k) in idx.iter().zip(rotated).zip(ranks) {
            min_retained[i] = Some(f.s[(k - 1, k - 1)]);
            out.layers[i] = Layer::Factorized(keep_leading(&f, k));
        }
    }
    super::ensure_finite(&out)?;
    Ok(Cut {
        net: out,
        min_retained,
        metric_modulus: modulus,
    })
}

/// `S = U′·Σ·V′ᵀ`, then `U ← U·U′`, `Vᵀ ← V′ᵀ·Vᵀ`, `S ← Σ`.
fn rotate(f: &FactorizedLayer) -> Result<FactorizedLayer> {
    let inner = svd(&f.s)?;
    Ok(FactorizedLayer {
        u: f.u.matmul(&inner.u),
        s: Matrix::diag(&inner.s),
        vt: inner.vt.matmul(&f.vt),
        ..f.clone()
    })
}

fn keep_leading(f: &FactorizedLayer, k: usize) -> FactorizedLayer {
    FactorizedLayer {
        u: f.u.take_cols(k),
        s: f.s.top_left(k, k),
        vt: f.vt.take_rows(k),
        ..f.clone()
    }
}

/// A Fisher-weighted cut prepared for one layer.
struct FisherCut {
    spectrum: Vec<f64>,
    modulus: f64,
    form: FisherForm,
}

enum FisherForm {
    /// `Z = D·W` with `D = diag(sqrt(w))`; the result is `D⁻¹·Z_k`.
    Ambient {
        dec: crate::linalg::SvdResult,
        d: Vec<f64>,
        layer: FactorizedLayer,
    },
    /// `Ĩ = Uᵀ·diag(w)·U`, SVD of `Ĩ·S`, and `S ← Ĩ⁻¹·(Ĩ·S)_k`.
    Inner {
        dec: crate::linalg::SvdResult,
        gram_inv: Matrix,
        layer: FactorizedLayer,
    },
}

impl FisherCut {
    fn prepare(f: &FactorizedLayer, row_weights: &[f64], weighting: RowWeighting) -> Result<Self> {
        let r = f.rank();
        match weighting {
            RowWeighting::Sqrt => {
                let d: Vec<f64> = row_weights.iter().map(|w| w.sqrt()).collect();
                let z = f.effective_weight().scale_rows(&d);
                let mut dec = svd(&z)?;
                dec.s.truncate(r);
                Ok(Self {
                    spectrum: dec.s.clone(),
                    modulus: row_weights.iter().copied().fold(f64::INFINITY, f64::min),
                    form: FisherForm::Ambient {
                        dec,
                        d,
                        layer: f.clone(),
                    },
                })
            }
            RowWeighting::Literal => {
                let gram = f.u.t_matmul(&f.u.scale_rows(row_weights));
                let gram_inv = pinv(&gram, 0.0)?;
                let dec = svd(&gram.matmul(&f.s))?;
                let modulus = svd(&gram)?.s.last().copied().unwrap_or(0.0);
                Ok(Self {
                    spectrum: dec.s.clone(),
                    modulus,
                    form: FisherForm::Inner {
                        dec,
                        gram_inv,
                        layer: f.clone(),
                    },
                })
            }
        }
    }

    fn finish(self, k: usize) -> Result<FactorizedLayer> {
        match self.form {
            FisherForm::Ambient { dec, d, layer } => {
                let zk = dec
                    .u
                    .take_cols(k)
                    .scale_cols(&dec.s[..k])
                    .matmul(&dec.vt.take_rows(k));
                let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
                let mut out = factorize_layer(&zk.scale_rows(&inv), &layer.bias, k)?;
                out.u_frozen = layer.u_frozen;
                out.vt_frozen = layer.vt_frozen;
                Ok(out)
            }
            FisherForm::Inner {
                dec,
                gram_inv,
                layer,
            } => {
                let sk = dec
                    .u
                    .take_cols(k)
                    .scale_cols(&dec.s[..k])
                    .matmul(&dec.vt.take_rows(k));
                let s_new = gram_inv.matmul(&sk);
                let again = svd(&s_new)?;
                Ok(FactorizedLayer {
                    u: layer.u.matmul(&again.u.take_cols(k)),
                    s: Matrix::diag(&again.s[..k]),
                    vt: again.vt.take_rows(k).matmul(&layer.vt),
                    ..layer
                })
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn projection_event(
    step: usize,
    before: &Network,
    loss_before: f64,
    grads: &[LayerGrad],
    after: &Network,
    ranks_after: Vec<usize>,
    data: &Dataset,
    min_retained: &[Option<f64>],
) -> Result<ProjectionEvent> {
    let ranks_before = before.ranks();
    let mut first_order = 0.0;
    for ((a, b), g) in before.layers.iter().zip(&after.layers).zip(grads) {
        let dw = b.effective_weight().sub(&a.effective_weight());
        first_order += g.weight.hadamard(&dw).as_slice().iter().sum::<f64>();
        first_order += a
            .bias()
            .iter()
            .zip(b.bias())
            .zip(&g.bias)
            .map(|((p, q), gb)| (q - p) * gb)
            .sum::<f64>();
    }
    let threshold_energy = ranks_before
        .iter()
        .zip(&ranks_after)
        .zip(min_retained)
        .map(|((&rb, &ra), m)| match m {
            Some(s) => 0.5 * s * s * rb.saturating_sub(ra) as f64,
            None => 0.0,
        })
        .sum();
    let basis_defect = after
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Factorized(f) => Some(f.orthonormality_defect()),
            Layer::Dense(_) => None,
        })
        .fold(0.0, f64::max);
    Ok(ProjectionEvent {
        step,
        ranks_before,
        ranks_after,
        loss_before,
        loss_after: after.loss(data)?,
        first_order,
        displacement_sq: displacement_sq(before, after),
        threshold_energy,
        basis_defect,
    })
}
