//! Training loops that threshold singular values while training.
//!
//! All loops are full-batch and deterministic. A run returns the final
//! network in its training representation together with a per-step trace;
//! [`TrainRun::compiled`] produces the deployable dense-pair form.

mod lowrank;
mod telemetry;
mod trp;

pub use lowrank::{train_ieht, train_ifht, train_oialr};
pub use telemetry::{
    default_step_size, lipschitz_estimate, verify_convergence, CheckOutcome, ConvergenceReport,
    POWER_ITERATIONS,
};
pub use trp::{train_fwtrp, train_trp};

use serde::{Deserialize, Serialize};

use crate::compress::{Criterion, RankSchedule, RowWeighting};
use crate::error::{Error, Result};
use crate::fisher::{FisherInfo, FisherMode};
use crate::linalg::{hard_threshold_detailed, Matrix};
use crate::net::{compile_network, Dataset, Layer, LayerGrad, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    /// Weight `λ` of `Σ rank` in the prox objectives.
    pub rank_penalty: f64,
    pub schedule: RankSchedule,
    /// Full-batch steps per epoch; converts epoch-based schedules into steps.
    pub steps_per_epoch: usize,
    pub trp_threshold: f64,
    pub trp_frequency: usize,
    pub nuclear_norm_weight: f64,
    pub nuclear_norm_frequency: usize,
    pub seed: u64,
    pub fisher_mode: FisherMode,
    pub weighting: RowWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            learning_rate: 0.1,
            rank_penalty: 0.0,
            schedule: RankSchedule::default(),
            steps_per_epoch: 1,
            trp_threshold: 0.95,
            trp_frequency: 50,
            nuclear_norm_weight: 0.0,
            nuclear_norm_frequency: 25,
            seed: 0,
            fisher_mode: FisherMode::Empirical,
            weighting: RowWeighting::Sqrt,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg("learning rate must be positive"));
        }
        if !(self.rank_penalty >= 0.0) {
            return Err(Error::arg("rank penalty must be non-negative"));
        }
        if self.trp_frequency == 0 || self.nuclear_norm_frequency == 0 || self.steps_per_epoch == 0
        {
            return Err(Error::arg("frequencies must be at least 1"));
        }
        if !(self.nuclear_norm_weight >= 0.0) {
            return Err(Error::arg("nuclear norm weight must be non-negative"));
        }
        if !(self.trp_threshold > 0.0 && self.trp_threshold <= 1.0) {
            return Err(Error::arg("trp_threshold must lie in (0, 1]"));
        }
        self.schedule.validate()
    }

    /// Cut frequency in steps.
    pub fn nu_steps(&self) -> usize {
        match self.schedule.unit {
            crate::compress::ScheduleUnit::Step => self.schedule.frequency_nu,
            crate::compress::ScheduleUnit::Epoch => {
                self.schedule.frequency_nu * self.steps_per_epoch
            }
        }
    }

    /// Delay before conversion, in steps.
    pub fn delay_steps(&self) -> usize {
        match self.schedule.unit {
            crate::compress::ScheduleUnit::Step => self.schedule.delay_d,
            crate::compress::ScheduleUnit::Epoch => self.schedule.delay_d * self.steps_per_epoch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    ProxIht,
    FisherProx,
    Oialr,
    Ieht,
    Ifht,
    GlobalIeht,
    GlobalIfht,
    Trp,
    Fwtrp,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Sgd,
        Method::ProxIht,
        Method::FisherProx,
        Method::Oialr,
        Method::Ieht,
        Method::Ifht,
        Method::GlobalIeht,
        Method::GlobalIfht,
        Method::Trp,
        Method::Fwtrp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::ProxIht => "prox_iht",
            Method::FisherProx => "fisher_prox",
            Method::Oialr => "oialr",
            Method::Ieht => "ieht",
            Method::Ifht => "ifht",
            Method::GlobalIeht => "global_ieht",
            Method::GlobalIfht => "global_ifht",
            Method::Trp => "trp",
            Method::Fwtrp => "fwtrp",
        }
    }

    /// The cutoff rule a low-rank method runs with.
    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Method::Oialr => Some(Criterion::MaxSv),
            Method::Ieht | Method::Trp => Some(Criterion::LayerEnergy),
            Method::Ifht | Method::Fwtrp => Some(Criterion::FisherEnergy),
            Method::GlobalIeht => Some(Criterion::GlobalEnergy),
            Method::GlobalIfht => Some(Criterion::GlobalFisherEnergy),
            _ => None,
        }
    }
}

/// State after `step` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub ranks: Vec<usize>,
    /// `loss + λ·Σ ranks`
    pub objective: f64,
    /// `‖θ_step − θ_{step−1}‖` over effective weights and biases (0 for the first record).
    pub step_norm: f64,
    /// Smallest retained singular value per layer, in the metric of the
    /// thresholding step, when this step thresholded that layer.
    pub min_nonzero_sv: Vec<Option<f64>>,
    /// Strong-convexity modulus of the step's proximity term (1 for Euclidean steps).
    pub metric_modulus: f64,
}

/// A rank cut or threshold event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEvent {
    pub step: usize,
    pub ranks_before: Vec<usize>,
    pub ranks_after: Vec<usize>,
    pub loss_before: f64,
    pub loss_after: f64,
    /// `⟨∇L(W_before), W_after − W_before⟩`
    pub first_order: f64,
    /// `Σ_l ‖W_after − W_before‖²_F`
    pub displacement_sq: f64,
    /// `Σ_l λ_l·(rank drop)_l` with `λ_l = σ²_min(kept)/2`, the implied per-layer threshold.
    pub threshold_energy: f64,
    /// Largest orthonormality defect of any stored basis after the event.
    pub basis_defect: f64,
}

impl ProjectionEvent {
    /// `jump − first_order ≤ (L/2)·displacement ≤ L·threshold_energy`, with
    /// an absolute slack for round-off.
    pub fn within_descent_bound(&self, l_estimate: f64, slack: f64) -> bool {
        let excess = self.loss_after - self.loss_before - self.first_order;
        let quad = 0.5 * l_estimate * self.displacement_sq;
        excess <= quad + slack && quad <= l_estimate * self.threshold_energy + slack
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub events: Vec<ProjectionEvent>,
}

impl TrainTrace {
    /// Deterministic text rendering (shortest round-trip float formatting).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,objective,step_norm,ranks,min_nonzero_sv\n");
        for r in &self.records {
            let ranks: Vec<String> = r.ranks.iter().map(usize::to_string).collect();
            let svs: Vec<String> = r
                .min_nonzero_sv
                .iter()
                .map(|v| v.map(|x| format!("{x:?}")).unwrap_or_default())
                .collect();
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{},{}\n",
                r.step,
                r.loss,
                r.objective,
                r.step_norm,
                ranks.join(";"),
                svs.join(";")
            ));
        }
        out
    }

    pub fn rank_history(&self) -> Vec<Vec<usize>> {
        self.records.iter().map(|r| r.ranks.clone()).collect()
    }

    pub fn final_record(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: Network,
    pub trace: TrainTrace,
}

impl TrainRun {
    pub fn compiled(&self) -> Result<Network> {
        compile_network(&self.net)
    }
}

/// What a training loop reports to an observer.
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    /// After update `step` (1-based).
    Step { step: usize, net: &'a Network },
    /// Right after a cut or threshold at update `step`.
    Projection { step: usize, net: &'a Network },
}

pub type Observer<'o> = dyn FnMut(TrainEvent<'_>) -> Result<()> + 'o;

pub fn train(method: Method, net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train_observed(method, net, data, cfg, &mut |_| Ok(()))
}

pub fn train_observed(
    method: Method,
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    cfg.validate()?;
    match method {
        Method::Sgd => train_sgd_observed(net, data, cfg, observer),
        Method::ProxIht => train_prox_observed(net, data, cfg, None, observer),
        Method::FisherProx => train_prox_observed(net, data, cfg, Some(cfg.fisher_mode), observer),
        Method::Oialr | Method::Ieht | Method::Ifht | Method::GlobalIeht | Method::GlobalIfht => {
            let mut c = cfg.clone();
            c.schedule.criterion = method.criterion().expect("low-rank method");
            lowrank::run(net, data, &c, observer)
        }
        Method::Trp => trp::run(net, data, cfg, false, observer),
        Method::Fwtrp => trp::run(net, data, cfg, true, observer),
    }
}

/// Plain update `θ ← θ − lr·g` on every trainable parameter.
pub(crate) fn gradient_step(net: &Network, grads: &[LayerGrad], lr: f64) -> Result<Network> {
    let mut out = net.clone();
    for (layer, g) in out.layers.iter_mut().zip(grads) {
        match layer {
            Layer::Dense(d) => {
                d.weight = d.weight.zip_map(&g.weight, |w, gw| w - lr * gw);
            }
            Layer::Factorized(f) => {
                let fg = g
                    .factors
                    .as_ref()
                    .ok_or_else(|| Error::Numerical("missing factor gradient".into()))?;
                f.s = f.s.zip_map(&fg.s, |w, gw| w - lr * gw);
                if let Some(gu) = &fg.u {
                    f.u = f.u.zip_map(gu, |w, gw| w - lr * gw);
                }
                if let Some(gv) = &fg.vt {
                    f.vt = f.vt.zip_map(gv, |w, gw| w - lr * gw);
                }
            }
        }
        for (b, gb) in layer.bias_mut().iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    ensure_finite(&out)?;
    Ok(out)
}

/// Tags numerical failures with the update that produced them.
pub(crate) fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
        Error::Numerical(m) => Error::Numerical(format!("{m} at step {step}")),
        other => other,
    }
}

pub(crate) fn ensure_finite(net: &Network) -> Result<()> {
    let ok = net.params().0.iter().all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite("parameters after update".into()))
    }
}

pub fn sgd_step(net: &Network, data: &Dataset, lr: f64) -> Result<Network> {
    if !(lr > 0.0) {
        return Err(Error::arg("learning rate must be positive"));
    }
    let (_, grads) = net.loss_and_grad(data)?;
    gradient_step(net, &grads, lr)
}

fn require_dense(net: &Network) -> Result<()> {
    if net.layers.iter().all(|l| matches!(l, Layer::Dense(_))) {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "proximal steps need dense layers".into(),
        ))
    }
}

/// Output of one proximal step.
#[derive(Debug, Clone)]
pub struct ProxOutcome {
    pub net: Network,
    pub ranks: Vec<usize>,
    /// Smallest retained singular value of each thresholded matrix
    /// (`D·W` for the Fisher step).
    pub min_nonzero_sv: Vec<Option<f64>>,
    /// Smallest metric weight used by the step.
    pub metric_modulus: f64,
}

/// `W ← prox_{αλ·rank}(W − α∇L)` per layer; biases take a gradient step.
pub fn prox_iht_step(net: &Network, data: &Dataset, alpha: f64, lambda: f64) -> Result<Network> {
    let (_, grads) = net.loss_and_grad(data)?;
    prox_from_grads(net, &grads, alpha, lambda, None).map(|o| o.net)
}

/// Proximal step in the metric `½‖·‖²_D²` with `D = diag(sqrt(row weights))`:
/// `W ← D⁻¹·H(D·W − α·D⁻¹·G, sqrt(2αλ))`.
pub fn fisher_prox_step(
    net: &Network,
    data: &Dataset,
    fisher: &FisherInfo,
    alpha: f64,
    lambda: f64,
) -> Result<Network> {
    let (_, grads) = net.loss_and_grad(data)?;
    prox_from_grads(net, &grads, alpha, lambda, Some(fisher)).map(|o| o.net)
}

pub(crate) fn prox_from_grads(
    net: &Network,
    grads: &[LayerGrad],
    alpha: f64,
    lambda: f64,
    fisher: Option<&FisherInfo>,
) -> Result<ProxOutcome> {
    require_dense(net)?;
    if !(alpha > 0.0) || !(lambda >= 0.0) {
        return Err(Error::arg("prox step needs alpha > 0 and lambda >= 0"));
    }
    let tau = (2.0 * alpha * lambda).sqrt();
    let mut out = net.clone();
    let mut ranks = Vec::with_capacity(net.layers.len());
    let mut mins = Vec::with_capacity(net.layers.len());
    let mut modulus = f64::INFINITY;
    for (i, (layer, g)) in out.layers.iter_mut().zip(grads).enumerate() {
        let Layer::Dense(dense) = layer else {
            unreachable!()
        };
        let d: Option<Vec<f64>> = match fisher {
            Some(f) => {
                let d: Vec<f64> = f.clamped_row_weights(i).iter().map(|v| v.sqrt()).collect();
                if d.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Numerical(
                        "non-positive metric weight after clamping".into(),
                    ));
                }
                Some(d)
            }
            None => None,
        };
        let z = match &d {
            None => dense.weight.zip_map(&g.weight, |w, gw| w - alpha * gw),
            Some(d) => Matrix::from_fn(dense.weight.rows(), dense.weight.cols(), |r, c| {
                d[r] * dense.weight[(r, c)] - alpha * (g.weight[(r, c)] / d[r])
            }),
        };
        if let Some(d) = &d {
            modulus = modulus.min(d.iter().map(|v| v * v).fold(f64::INFINITY, f64::min));
        } else {
            modulus = modulus.min(1.0);
        }
        if lambda > 0.0 {
            let t = hard_threshold_detailed(&z, tau)?;
            ranks.push(t.rank);
            mins.push(t.min_retained());
            dense.weight = match &d {
                None => t.matrix,
                Some(d) => Matrix::from_fn(z.rows(), z.cols(), |r, c| t.matrix[(r, c)] / d[r]),
            };
        } else {
            let s = crate::linalg::svd(&z)?.s;
            let cut = s[0] * f64::EPSILON * (z.rows().max(z.cols()) as f64);
            let rank = s.iter().filter(|&&v| v > cut && v > 0.0).count();
            ranks.push(rank);
            mins.push(rank.checked_sub(1).map(|k| s[k]));
            dense.weight = match &d {
                None => z,
                Some(d) => Matrix::from_fn(z.rows(), z.cols(), |r, c| z[(r, c)] / d[r]),
            };
        }
        for (b, gb) in dense.bias.iter_mut().zip(&g.bias) {
            *b -= alpha * gb;
        }
    }
    ensure_finite(&out)?;
    Ok(ProxOutcome {
        net: out,
        ranks,
        min_nonzero_sv: mins,
        metric_modulus: if modulus.is_finite() { modulus } else { 1.0 },
    })
}

/// `Σ_l ‖W_l − W′_l‖² + ‖b_l − b′_l‖²` between networks with matching layer shapes.
pub(crate) fn displacement_sq(a: &Network, b: &Network) -> f64 {
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| {
            let dw = x
                .effective_weight()
                .sub(&y.effective_weight())
                .frobenius_sq();
            let db: f64 = x
                .bias()
                .iter()
                .zip(y.bias())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            dw + db
        })
        .sum()
}

pub(crate) fn objective(loss: f64, lambda: f64, ranks: &[usize]) -> f64 {
    loss + lambda * ranks.iter().sum::<usize>() as f64
}

pub fn train_sgd(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::Sgd, net, data, cfg)
}

fn train_sgd_observed(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    let mut cur = net.clone();
    let mut trace = TrainTrace::default();
    let mut prev: Option<Network> = None;
    for step in 0..=cfg.max_steps {
        let (loss, grads) = cur.loss_and_grad(data).map_err(at_step(step))?;
        let ranks = cur.ranks();
        trace.records.push(StepRecord {
            step,
            loss,
            objective: objective(loss, 0.0, &ranks),
            ranks,
            step_norm: prev
                .as_ref()
                .map(|p| displacement_sq(p, &cur).sqrt())
                .unwrap_or(0.0),
            min_nonzero_sv: vec![None; cur.layers.len()],
            metric_modulus: 1.0,
        });
        if step == cfg.max_steps {
            break;
        }
        let next = gradient_step(&cur, &grads, cfg.learning_rate).map_err(at_step(step + 1))?;
        prev = Some(std::mem::replace(&mut cur, next));
        observer(TrainEvent::Step {
            step: step + 1,
            net: &cur,
        })?;
    }
    Ok(TrainRun { net: cur, trace })
}

pub fn train_prox_iht(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::ProxIht, net, data, cfg)
}

pub fn train_fisher_prox(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train(Method::FisherProx, net, data, cfg)
}

fn train_prox_observed(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    fisher_mode: Option<FisherMode>,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    require_dense(net)?;
    let mut cur = net.clone();
    let mut trace = TrainTrace::default();
    let mut prev: Option<Network> = None;
    let mut ranks = cur.ranks();
    let mut mins = vec![None; cur.layers.len()];
    let mut modulus = 1.0;
    for step in 0..=cfg.max_steps {
        let (loss, grads) = cur.loss_and_grad(data).map_err(at_step(step))?;
        trace.records.push(StepRecord {
            step,
            loss,
            objective: objective(loss, cfg.rank_penalty, &ranks),
            ranks: ranks.clone(),
            step_norm: prev
                .as_ref()
                .map(|p| displacement_sq(p, &cur).sqrt())
                .unwrap_or(0.0),
            min_nonzero_sv: mins.clone(),
            metric_modulus: modulus,
        });
        if step == cfg.max_steps {
            break;
        }
        let fisher = match fisher_mode {
            Some(mode) => Some(FisherInfo::estimate(&cur, data, mode)?),
            None => None,
        };
        let outcome = prox_from_grads(
            &cur,
            &grads,
            cfg.learning_rate,
            cfg.rank_penalty,
            fisher.as_ref(),
        )
        .map_err(at_step(step + 1))?;
        ranks = outcome.ranks;
        mins = outcome.min_nonzero_sv;
        modulus = outcome.metric_modulus;
        prev = Some(std::mem::replace(&mut cur, outcome.net));
        observer(TrainEvent::Step {
            step: step + 1,
            net: &cur,
        })?;
    }
    Ok(TrainRun { net: cur, trace })
}
