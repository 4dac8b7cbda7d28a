//! Minibatch training of the drift network.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{bridge_samples, sample_loss, TrainBridge};
use super::{data_variance, prepare_states, AlphaMode, DriftModel, FeatureSpec, Mlp};
use crate::energies::EnergyForce;
use crate::error::{Error, Result};
use crate::geometry::MarkedPointSet;
use crate::rng;
use crate::sde::{make_grid, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeChoice {
    Brownian,
    Forced,
}

impl std::str::FromStr for BridgeChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "brownian" => Ok(BridgeChoice::Brownian),
            "forced" => Ok(BridgeChoice::Forced),
            other => Err(Error::Config(format!("unknown bridge kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Grid steps `N` of the training bridges.
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub bridge: BridgeChoice,
    /// Grid times drawn per item and step.
    pub times_per_item: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm bound; zero disables it.
    pub grad_clip: f64,
    pub hidden: usize,
    pub depth: usize,
    pub time_freqs: usize,
    pub alpha_mode: AlphaMode,
    pub type_scale: f64,
    /// Scale of the charge input channel; zero disables it.
    pub charge_scale: f64,
    /// Learning-rate multiplier for a learnable alpha.
    #[serde(default = "one")]
    pub alpha_lr_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            seed: 0,
            schedule: NoiseSchedule {
                kind: crate::sde::ScheduleKind::Constant { sigma: 1.0 },
                horizon: 1.0,
            },
            bridge: BridgeChoice::Brownian,
            times_per_item: 4,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            grad_clip: 0.0,
            hidden: 64,
            depth: 2,
            time_freqs: 4,
            alpha_mode: AlphaMode::Learnable { init: 0.1 },
            type_scale: 0.25,
            charge_scale: 0.1,
            alpha_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("times_per_item", self.times_per_item),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.alpha_lr_scale >= 0.0 && self.alpha_lr_scale.is_finite()) {
            return Err(Error::Config("alpha_lr_scale must be finite and non-negative".into()));
        }
        if !(self.grad_clip >= 0.0) || !(self.type_scale > 0.0) || !(self.charge_scale >= 0.0) {
            return Err(Error::Config("grad_clip, type_scale and charge_scale must be non-negative".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
}

pub fn write_log<W: Write>(log: &[EpochLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,loss,alpha")?;
    for e in log {
        writeln!(w, "{},{},{}", e.epoch, e.loss, e.alpha)?;
    }
    Ok(())
}

/// Result of a training run. On divergence `checkpoint` is the last state
/// that completed an epoch with a finite loss.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub diverged: Option<String>,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    /// Learning rate of the last entry (alpha when learnable).
    last_lr: f64,
    momentum: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        let scale = if cfg.alpha_mode.is_learnable() { cfg.alpha_lr_scale } else { 1.0 };
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            last_lr: cfg.learning_rate * scale,
            momentum: cfg.momentum,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, theta: &mut [f64], g: &[f64]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let n = theta.len();
                for (i, ((p, m), gi)) in theta.iter_mut().zip(&mut self.m).zip(g).enumerate() {
                    let lr = if i + 1 == n { self.last_lr } else { self.lr };
                    *m = self.momentum * *m + gi;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                let n = theta.len();
                for (i, (((p, m), v), gi)) in theta.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(g).enumerate() {
                    let lr = if i + 1 == n { self.last_lr } else { self.lr };
                    *m = b1 * *m + (1.0 - b1) * gi;
                    *v = b2 * *v + (1.0 - b2) * gi * gi;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Most common item size; ties go to the larger size.
fn typical_size(dataset: &[MarkedPointSet]) -> usize {
    let mut counts = std::collections::BTreeMap::new();
    for s in dataset {
        *counts.entry(s.len()).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(m, c)| (c, m))
        .map_or(0, |(m, _)| m)
}

/// Builds the untrained model for `dataset` under `config`.
pub fn initial_model(
    config: &TrainConfig,
    dataset: &[MarkedPointSet],
    force: Option<Arc<EnergyForce>>,
) -> Result<DriftModel> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    let k = first.k;
    if dataset.iter().any(|s| s.k != k) {
        return Err(Error::Config("dataset items disagree on the number of types".into()));
    }
    let charges = match (&force, k > 0 && config.charge_scale > 0.0) {
        (Some(f), true) => f
            .tables
            .as_ref()
            .filter(|t| t.len() == k)
            .map(|t| t.types.iter().map(|a| a.charge * config.charge_scale).collect()),
        _ => None,
    };
    let features = FeatureSpec {
        type_channels: k,
        type_scale: config.type_scale,
        charges,
        time_freqs: config.time_freqs,
    };
    let states = prepare_states(dataset, config.type_scale);
    let v_data = data_variance(&states);
    if config.schedule.beta_total() < 4.0 * v_data {
        log::warn!(
            "beta_T = {} is below 4x the data variance {v_data}; the sampler's start law is far from the training bridges'",
            config.schedule.beta_total()
        );
    }
    let arch = DriftModel::arch_for(&features, config.hidden, config.depth);
    let net = Mlp::init(arch, config.seed)?;
    DriftModel::new(net, config.alpha_mode, force, config.schedule, features, v_data)
}

/// Score-matching training over `dataset`.
///
/// Items are centred and type channels scaled before use. With a force the
/// model drift includes `alpha f`; the training bridge follows
/// `config.bridge`.
pub fn train(config: &TrainConfig, dataset: &[MarkedPointSet], force: Option<Arc<EnergyForce>>) -> Result<TrainRun> {
    let mut model = initial_model(config, dataset, force.clone())?;
    let bridge = match (config.bridge, &force) {
        (BridgeChoice::Brownian, _) => TrainBridge::Brownian,
        (BridgeChoice::Forced, Some(f)) => TrainBridge::Forced(f.clone()),
        (BridgeChoice::Forced, None) => return Err(Error::Config("forced bridge needs an energy".into())),
    };
    let states = prepare_states(dataset, config.type_scale);
    let grid = make_grid(config.steps, config.schedule.horizon())?;
    let scale_base = config.schedule.horizon() / config.times_per_item as f64;

    let mut theta = model.trainable();
    let mut opt = Optimizer::new(config, theta.len());
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let m_points = typical_size(dataset);
    let snapshot = |m: &DriftModel| -> Result<Checkpoint> {
        let mut c = Checkpoint::from_model(m, config)?;
        c.m_points = m_points;
        Ok(c)
    };
    let mut last_good = snapshot(&model)?;

    for epoch in 0..config.epochs {
        let mut shuffle = rng::substream(config.seed, epoch as u64, u64::MAX);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut failure = None;
        for batch in order.chunks(config.batch_size) {
            let scale = scale_base / batch.len() as f64;
            let parts: Vec<Result<super::LossOutput>> = batch
                .par_iter()
                .map(|&item| {
                    let mut r = rng::substream(config.seed, epoch as u64, item as u64);
                    let ss = bridge_samples(&bridge, &states[item], config.schedule, &grid, config.times_per_item, &mut r)?;
                    sample_loss(&model, &ss, scale)
                })
                .collect();
            let mut loss = 0.0;
            let mut grad = vec![0.0; theta.len()];
            for p in parts {
                match p {
                    Ok(out) => {
                        loss += out.loss;
                        for (g, d) in grad.iter_mut().zip(&out.grad) {
                            *g += d;
                        }
                    }
                    Err(e) if e.is_numerical() => {
                        failure = Some(e.to_string());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if failure.is_none() && !(loss.is_finite() && grad.iter().all(|g| g.is_finite())) {
                failure = Some(format!("non-finite loss {loss}"));
            }
            if failure.is_some() {
                break;
            }
            if config.grad_clip > 0.0 {
                let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if n > config.grad_clip {
                    grad.iter_mut().for_each(|g| *g *= config.grad_clip / n);
                }
            }
            opt.apply(&mut theta, &grad);
            model.set_trainable(&theta);
            epoch_loss += loss;
            batches += 1;
        }
        if let Some(reason) = failure {
            log::error!("training diverged in epoch {epoch}: {reason}");
            return Ok(TrainRun {
                checkpoint: last_good,
                log,
                diverged: Some(Error::Diverged { epoch, reason }.to_string()),
            });
        }
        let entry = EpochLog {
            epoch,
            loss: epoch_loss / batches as f64,
            alpha: model.alpha,
        };
        log::info!("epoch {epoch} loss {:.6e} alpha {:.6e}", entry.loss, entry.alpha);
        log.push(entry);
        last_good = snapshot(&model)?;
    }
    Ok(TrainRun {
        checkpoint: last_good,
        log,
        diverged: None,
    })
}
