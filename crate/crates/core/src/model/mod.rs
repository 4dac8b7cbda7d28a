//! Learnable drift `s(z, t) = alpha_t f(z) + s~(z, t)`: a prior force plus
//! a per-point network, its score-matching loss and the training loop.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bridges::Force;
use crate::energies::EnergyForce;
use crate::error::{Error, Result};
use crate::geometry::{Layout, MarkedPointSet};
use crate::sde::{Drift, NoiseSchedule};

pub mod checkpoint;
pub mod loss;
pub mod nn;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{bridge_samples, matching_loss, LossOutput, LossSample, TrainBridge};
pub use nn::{Mlp, NetArch};
pub use train::{train, EpochLog, OptimizerKind, TrainConfig, TrainRun};

/// How the force coefficient is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AlphaMode {
    /// A trained scalar starting at `init`.
    Learnable { init: f64 },
    /// `alpha_t = start (1 - t / T)`.
    Scheduled { start: f64 },
}

impl AlphaMode {
    pub fn initial(&self) -> f64 {
        match *self {
            AlphaMode::Learnable { init } => init,
            AlphaMode::Scheduled { start } => start,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, AlphaMode::Learnable { .. })
    }
}

/// Network input layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub type_channels: usize,
    /// Factor applied to one-hot types when they enter the state.
    pub type_scale: f64,
    /// Per-type charges already multiplied by their feature scale; adds one
    /// input channel `sum_r q_r h_r`.
    pub charges: Option<Vec<f64>>,
    pub time_freqs: usize,
}

impl FeatureSpec {
    pub fn untyped(time_freqs: usize) -> Self {
        Self {
            type_channels: 0,
            type_scale: 1.0,
            charges: None,
            time_freqs,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout { k: self.type_channels }
    }

    pub fn input_dim(&self) -> usize {
        3 + self.type_channels + usize::from(self.charges.is_some()) + 2 * self.time_freqs
    }
}

/// Centred SDE states of a dataset: coordinates translated to zero mean,
/// types scaled by `type_scale`.
pub fn prepare_states(sets: &[MarkedPointSet], type_scale: f64) -> Vec<Vec<f64>> {
    sets.iter().map(|s| s.centered().to_state(type_scale)).collect()
}

/// Mean square entry of the states (the data scale used for input
/// preconditioning).
pub fn data_variance(states: &[Vec<f64>]) -> f64 {
    let (sum, n) = states
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug)]
pub struct DriftModel {
    pub net: Mlp,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub force: Option<Arc<EnergyForce>>,
    pub schedule: NoiseSchedule,
    pub features: FeatureSpec,
    pub v_data: f64,
}

/// Forward quantities of one drift evaluation, kept for the loss gradient.
pub struct DriftParts {
    pub drift: Vec<f64>,
    pub force: Option<Vec<f64>>,
    pub alpha_t: f64,
    pub c_out: f64,
    pub cache: nn::Cache,
}

impl DriftModel {
    pub fn new(
        net: Mlp,
        alpha_mode: AlphaMode,
        force: Option<Arc<EnergyForce>>,
        schedule: NoiseSchedule,
        features: FeatureSpec,
        v_data: f64,
    ) -> Result<Self> {
        if net.arch.input != features.input_dim() {
            return Err(Error::Config(format!(
                "network input {} does not match the feature width {}",
                net.arch.input,
                features.input_dim()
            )));
        }
        if net.arch.output != features.layout().width() {
            return Err(Error::Config("network output must match the per-point state width".into()));
        }
        if let Some(f) = &force {
            if f.type_channels != features.type_channels {
                return Err(Error::Config("force and model disagree on type channels".into()));
            }
        }
        if !(v_data >= 0.0 && v_data.is_finite()) {
            return Err(Error::Config("data variance must be finite and non-negative".into()));
        }
        Ok(Self {
            net,
            alpha: alpha_mode.initial(),
            alpha_mode,
            force,
            schedule,
            features,
            v_data,
        })
    }

    pub fn arch_for(features: &FeatureSpec, hidden: usize, depth: usize) -> NetArch {
        NetArch {
            input: features.input_dim(),
            hidden,
            depth,
            output: features.layout().width(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon()
    }

    /// Force coefficient at time `t`.
    pub fn alpha_at(&self, t: f64) -> f64 {
        match self.alpha_mode {
            AlphaMode::Learnable { .. } => self.alpha,
            AlphaMode::Scheduled { start } => start * (1.0 - t / self.horizon()),
        }
    }

    /// `(c_in, c_out)` at `t < T`.
    pub fn preconditioning(&self, t: f64) -> Result<(f64, f64)> {
        let rem = self.schedule.remaining_variance(t);
        if !(rem > 0.0) {
            return Err(Error::domain(format!("drift evaluated at t = {t} with no remaining variance")));
        }
        let s = self.schedule.sigma(t);
        Ok((1.0 / (rem + self.v_data).sqrt(), s * s / rem.sqrt()))
    }

    pub fn time_embedding(&self, t: f64) -> Vec<f64> {
        let tau = t / self.horizon();
        let mut e = Vec::with_capacity(2 * self.features.time_freqs);
        for j in 0..self.features.time_freqs {
            let w = std::f64::consts::PI * (1u64 << j) as f64;
            e.push((w * tau).sin());
            e.push((w * tau).cos());
        }
        e
    }

    fn inputs(&self, z: &[f64], t: f64, c_in: f64) -> Result<Array2<f64>> {
        let layout = self.features.layout();
        let m = layout.points(z.len())?;
        let w = layout.width();
        let temb = self.time_embedding(t);
        let dim = self.features.input_dim();
        let mut x = Array2::<f64>::zeros((m, dim));
        for (i, row) in z.chunks_exact(w).enumerate() {
            let mut out = x.row_mut(i);
            let mut c = 0;
            for v in row {
                out[c] = c_in * v;
                c += 1;
            }
            if let Some(q) = &self.features.charges {
                let ts = self.features.type_scale;
                out[c] = c_in * row[3..].iter().zip(q).map(|(h, q)| q * h / ts).sum::<f64>();
                c += 1;
            }
            for e in &temb {
                out[c] = *e;
                c += 1;
            }
        }
        Ok(x)
    }

    /// Full forward pass with everything the loss gradient needs.
    pub fn drift_parts(&self, z: &[f64], t: f64) -> Result<DriftParts> {
        if !(t >= 0.0 && t < self.horizon()) {
            return Err(Error::domain(format!("drift needs t in [0, {}), got {t}", self.horizon())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "drift input".into(), t });
        }
        let (c_in, c_out) = self.preconditioning(t)?;
        let (out, cache) = self.net.forward(self.inputs(z, t, c_in)?);
        let mut drift: Vec<f64> = out.iter().map(|v| c_out * v).collect();
        let alpha_t = self.alpha_at(t);
        let force = match &self.force {
            Some(f) => {
                let mut fv = vec![0.0; z.len()];
                f.force(z, t, &mut fv).map_err(|e| match e {
                    Error::Force { .. } | Error::Singularity(_) | Error::NonFinite { .. } => e,
                    other => Error::Singularity(format!("prior force at t = {t}: {other}")),
                })?;
                if fv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Force { state: z.to_vec() });
                }
                for (d, f) in drift.iter_mut().zip(&fv) {
                    *d += alpha_t * f;
                }
                Some(fv)
            }
            None => None,
        };
        Ok(DriftParts {
            drift,
            force,
            alpha_t,
            c_out,
            cache,
        })
    }

    /// `alpha_t f(z) + s~(z, t)`.
    pub fn drift_eval(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let parts = self.drift_parts(z, t)?;
        out.copy_from_slice(&parts.drift);
        Ok(())
    }

    /// Trainable values as one vector: network parameters, then alpha when
    /// it is learnable.
    pub fn trainable(&self) -> Vec<f64> {
        let mut v = self.net.params.clone();
        if self.alpha_mode.is_learnable() {
            v.push(self.alpha);
        }
        v
    }

    pub fn set_trainable(&mut self, v: &[f64]) {
        let n = self.net.params.len();
        self.net.params.copy_from_slice(&v[..n]);
        if self.alpha_mode.is_learnable() {
            self.alpha = v[n];
        }
    }
}

impl Drift for DriftModel {
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.drift_eval(z, t, out)
    }

    /// `E[Z_T | Z_t = z]` implied by the drift read as a bridge drift:
    /// `z + (beta_T - beta_t) / sigma_t^2 * s(z, t)`.
    fn terminal_mean(&self, z: &[f64], t: f64, out: &mut [f64]) -> Option<Result<()>> {
        let rem = self.schedule.remaining_variance(t);
        let s2 = self.schedule.sigma(t).powi(2);
        Some(self.drift_eval(z, t, out).map(|_| {
            for (o, zi) in out.iter_mut().zip(z) {
                *o = zi + rem / s2 * *o;
            }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::EnergyForce;

    fn model(alpha: f64, force: bool, zero: bool) -> DriftModel {
        let features = FeatureSpec::untyped(3);
        let arch = DriftModel::arch_for(&features, 8, 1);
        let mut net = if zero { Mlp::zeros(arch).unwrap() } else { Mlp::init(arch, 1).unwrap() };
        if !zero {
            let mut r = crate::rng::stream(2, 0);
            for p in net.params.iter_mut() {
                *p += 0.2 * crate::rng::standard_normal(&mut r);
            }
        }
        let f = force.then(|| Arc::new(EnergyForce::riesz(0)));
        DriftModel::new(
            net,
            AlphaMode::Learnable { init: alpha },
            f,
            NoiseSchedule::constant(1.0, 1.0).unwrap(),
            features,
            0.3,
        )
        .unwrap()
    }

    fn cloud() -> Vec<f64> {
        vec![0.0, 0.0, 0.0, 1.0, 0.2, 0.0, -0.3, 0.9, 0.4, 0.5, -0.7, 1.1]
    }

    #[test]
    fn zero_network_zero_alpha_is_zero_drift() {
        let m = model(0.0, true, true);
        let mut out = vec![1.0; 12];
        m.drift_eval(&cloud(), 0.3, &mut out).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_network_unit_alpha_is_the_force() {
        let m = model(1.0, true, true);
        let mut out = vec![0.0; 12];
        m.drift_eval(&cloud(), 0.3, &mut out).unwrap();
        let mut f = vec![0.0; 12];
        EnergyForce::riesz(0).force(&cloud(), 0.3, &mut f).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn permuting_points_permutes_drift_bitwise() {
        let m = model(0.5, true, false);
        let z = cloud();
        let perm = [2, 0, 3, 1];
        let zp: Vec<f64> = perm.iter().flat_map(|&i| z[i * 3..i * 3 + 3].to_vec()).collect();
        let mut a = vec![0.0; 12];
        let mut b = vec![0.0; 12];
        m.drift_eval(&z, 0.4, &mut a).unwrap();
        m.drift_eval(&zp, 0.4, &mut b).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(b[slot * 3 + c].to_bits(), a[i * 3 + c].to_bits());
            }
        }
    }

    #[test]
    fn rejects_terminal_time() {
        let m = model(0.0, false, true);
        let mut out = vec![0.0; 12];
        assert!(matches!(m.drift_eval(&cloud(), 1.0, &mut out), Err(Error::Domain(_))));
    }

    #[test]
    fn scheduled_alpha_decays_linearly() {
        let mut m = model(0.0, false, true);
        m.alpha_mode = AlphaMode::Scheduled { start: 1e-3 };
        assert_eq!(m.alpha_at(0.0), 1e-3);
        assert!((m.alpha_at(0.5) - 5e-4).abs() < 1e-18);
        assert_eq!(m.trainable().len(), m.net.params.len());
    }
}
