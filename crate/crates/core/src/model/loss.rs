//! Score-matching loss against bridge drifts.
//!
//! For an item `x` and `J` grid times per item the estimate is
//!
//! ```text
//! L = T / (J B) * sum_{items, times} 1/2 |s(Z_t, t) - b_t(Z_t | x)|^2 / sigma_t^2
//! ```
//!
//! with `Z_t` drawn from the bridge pinned at `x`.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DriftModel;
use crate::bridges::{BridgeSpec, Force};
use crate::energies::EnergyForce;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::sde::{self, Drift, EmOptions, NoiseSchedule, TimeGrid};

/// Bridge family used to build training targets.
#[derive(Clone, Debug)]
pub enum TrainBridge {
    Brownian,
    Forced(Arc<EnergyForce>),
}

impl TrainBridge {
    pub fn name(&self) -> &'static str {
        match self {
            TrainBridge::Brownian => "brownian",
            TrainBridge::Forced(_) => "forced",
        }
    }

    fn spec(&self, x: &[f64], schedule: NoiseSchedule) -> Result<BridgeSpec> {
        match self {
            TrainBridge::Brownian => BridgeSpec::brownian(x.to_vec(), schedule),
            TrainBridge::Forced(f) => BridgeSpec::forced(x.to_vec(), schedule, f.clone() as Arc<dyn Force>),
        }
    }
}

/// One `(t, Z_t, b_t(Z_t | x))` triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub t: f64,
    pub z: Vec<f64>,
    pub target: Vec<f64>,
}

/// Draws `count` grid times uniformly from `t_0 .. t_{N-1}` and the bridge
/// state at each.
///
/// Brownian states come from the exact marginal; forced states are read off
/// one simulated path on `grid`.
pub fn bridge_samples(
    bridge: &TrainBridge,
    x: &[f64],
    schedule: NoiseSchedule,
    grid: &TimeGrid,
    count: usize,
    rng: &mut StreamRng,
) -> Result<Vec<LossSample>> {
    if count == 0 {
        return Err(Error::Config("times per item must be positive".into()));
    }
    let spec = bridge.spec(x, schedule)?;
    let n = grid.steps();
    let pts = grid.points();
    let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..n)).collect();
    let path = match bridge {
        TrainBridge::Brownian => None,
        TrainBridge::Forced(_) => {
            // simulate only as far as the latest drawn time
            let last = *idx.iter().max().expect("count > 0");
            let z0 = spec.mu0.sample(rng);
            let mut states = vec![z0.clone()];
            if last > 0 {
                let sub = TimeGrid::from_points(pts[..=last].to_vec())?;
                let no_hook = EmOptions { terminal_hook: false };
                sde::integrate(&spec, &schedule, &z0, &sub, rng, no_hook, |i, _, z| {
                    if i > 0 {
                        states.push(z.to_vec());
                    }
                })?;
            }
            Some(states)
        }
    };
    let mut out = Vec::with_capacity(count);
    for i in idx {
        let t = pts[i];
        let z = match &path {
            Some(states) => states[i].clone(),
            None => {
                let (mean, var) = spec.brownian_marginal(t)?;
                let sd = var.sqrt();
                mean.iter()
                    .map(|m| m + sd * crate::rng::standard_normal(rng))
                    .collect()
            }
        };
        let mut target = vec![0.0; z.len()];
        spec.drift_at(&z, t, &mut target)?;
        out.push(LossSample { t, z, target });
    }
    Ok(out)
}

/// Loss value and gradient over the model's trainable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Contribution of `samples` with overall weight `scale` (typically
/// `T / (J B)`), plus its gradient.
pub fn sample_loss(model: &DriftModel, samples: &[LossSample], scale: f64) -> Result<LossOutput> {
    let n_net = model.net.params.len();
    let learn_alpha = model.alpha_mode.is_learnable();
    let mut grad = vec![0.0; n_net + usize::from(learn_alpha)];
    let mut loss = 0.0;
    let w = model.features.layout().width();
    for s in samples {
        let parts = model.drift_parts(&s.z, s.t)?;
        let s2 = model.schedule.sigma(s.t).powi(2);
        let r: Vec<f64> = parts.drift.iter().zip(&s.target).map(|(a, b)| a - b).collect();
        loss += 0.5 * scale * r.iter().map(|v| v * v).sum::<f64>() / s2;
        let k = scale / s2;
        let dout = Array2::from_shape_fn((r.len() / w, w), |(i, c)| k * parts.c_out * r[i * w + c]);
        model.net.backward(&parts.cache, &dout, &mut grad[..n_net]);
        if learn_alpha {
            if let Some(f) = &parts.force {
                grad[n_net] += k * r.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok(LossOutput { loss, grad })
}

/// Matching term of any drift against stored targets, with the same
/// weighting as [`sample_loss`].
pub fn matching_loss<D: Drift + ?Sized>(
    drift: &D,
    schedule: &NoiseSchedule,
    samples: &[LossSample],
    scale: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut out = vec![0.0; s.z.len()];
        drift.drift(&s.z, s.t, &mut out)?;
        let s2 = schedule.sigma(s.t).powi(2);
        total += 0.5 * scale * out.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s2;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AlphaMode, FeatureSpec, Mlp};
    use crate::rng;
    use crate::sde::{make_grid, FnDrift};

    fn cloud(seed: u64, m: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, 0);
        (0..3 * m).map(|_| rng::standard_normal(&mut r)).collect()
    }

    fn model(learnable: bool) -> DriftModel {
        let features = FeatureSpec::untyped(2);
        let arch = DriftModel::arch_for(&features, 6, 1);
        let mut net = Mlp::init(arch, 3).unwrap();
        let mut r = rng::stream(4, 0);
        for p in net.params.iter_mut() {
            *p += 0.3 * rng::standard_normal(&mut r);
        }
        let mode = if learnable {
            AlphaMode::Learnable { init: 0.4 }
        } else {
            AlphaMode::Scheduled { start: 0.4 }
        };
        DriftModel::new(
            net,
            mode,
            Some(Arc::new(EnergyForce::riesz(0))),
            NoiseSchedule::constant(1.3, 1.0).unwrap(),
            features,
            0.5,
        )
        .unwrap()
    }

    fn samples(bridge: &TrainBridge, x: &[f64], schedule: NoiseSchedule) -> Vec<LossSample> {
        let grid = make_grid(50, schedule.horizon()).unwrap();
        let mut r = rng::stream(11, 0);
        bridge_samples(bridge, x, schedule, &grid, 6, &mut r).unwrap()
    }

    #[test]
    fn teacher_forced_drift_has_zero_matching_term() {
        let x = cloud(1, 5);
        let schedule = NoiseSchedule::constant(1.0, 1.0).unwrap();
        let force = Arc::new(EnergyForce::riesz(0));
        for bridge in [TrainBridge::Brownian, TrainBridge::Forced(force.clone())] {
            let spec = bridge.spec(&x, schedule).unwrap();
            let ss = samples(&bridge, &x, schedule);
            assert_eq!(matching_loss(&spec, &schedule, &ss, 1.0).unwrap(), 0.0);
            // alpha f plus a residual network reproducing b - alpha f
            let folded = FnDrift(|z: &[f64], t: f64, out: &mut [f64]| {
                let mut f = vec![0.0; z.len()];
                force.force(z, t, &mut f)?;
                spec.drift_at(z, t, out)?;
                for (o, fi) in out.iter_mut().zip(&f) {
                    *o = fi + (*o - fi);
                }
                Ok(())
            });
            assert!(matching_loss(&folded, &schedule, &ss, 1.0).unwrap() < 1e-20);
        }
    }

    #[test]
    fn doubling_residual_quadruples_loss() {
        let x = cloud(2, 4);
        let schedule = NoiseSchedule::constant(0.7, 2.0).unwrap();
        let ss = samples(&TrainBridge::Brownian, &x, schedule);
        let zero = FnDrift(|_: &[f64], _: f64, out: &mut [f64]| {
            out.fill(0.0);
            Ok(())
        });
        let base = matching_loss(&zero, &schedule, &ss, 1.0).unwrap();
        let doubled: Vec<LossSample> = ss
            .iter()
            .map(|s| LossSample {
                t: s.t,
                z: s.z.clone(),
                target: s.target.iter().map(|v| 2.0 * v).collect(),
            })
            .collect();
        let quad = matching_loss(&zero, &schedule, &doubled, 1.0).unwrap();
        assert!((quad - 4.0 * base).abs() <= 1e-12 * quad);
    }

    #[test]
    fn brownian_samples_avoid_the_terminal_time() {
        let x = cloud(3, 3);
        let schedule = NoiseSchedule::constant(1.0, 1.0).unwrap();
        let grid = make_grid(4, 1.0).unwrap();
        let mut r = rng::stream(5, 0);
        let ss = bridge_samples(&TrainBridge::Brownian, &x, schedule, &grid, 200, &mut r).unwrap();
        assert!(ss.iter().all(|s| s.t < 1.0));
        assert!(ss.iter().any(|s| s.t == 0.75));
    }

    fn check_fd(model: &DriftModel, ss: &[LossSample]) {
        let out = sample_loss(model, ss, 0.25).unwrap();
        let theta = model.trainable();
        let mut r = rng::stream(99, 0);
        let h = 1e-6;
        let mut probes: Vec<usize> = (0..20).map(|_| r.random_range(0..theta.len())).collect();
        if model.alpha_mode.is_learnable() {
            probes.push(theta.len() - 1);
        }
        for k in probes {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut v = theta.clone();
                v[k] += delta;
                m.set_trainable(&v);
                sample_loss(&m, ss, 0.25).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - out.grad[k]).abs() / fd.abs().max(1e-3);
            assert!(err <= 1e-4, "coordinate {k}: fd {fd} vs {}", out.grad[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = cloud(6, 5);
        let schedule = NoiseSchedule::constant(1.3, 1.0).unwrap();
        let ss = samples(&TrainBridge::Brownian, &x, schedule);
        check_fd(&model(true), &ss);
        check_fd(&model(false), &ss);
    }

    #[test]
    fn loss_is_invariant_to_point_order() {
        let x = cloud(7, 5);
        let schedule = NoiseSchedule::constant(1.3, 1.0).unwrap();
        let ss = samples(&TrainBridge::Brownian, &x, schedule);
        let perm = [4, 2, 0, 1, 3];
        let permute = |v: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| v[3 * i..3 * i + 3].to_vec()).collect() };
        let pss: Vec<LossSample> = ss
            .iter()
            .map(|s| LossSample {
                t: s.t,
                z: permute(&s.z),
                target: permute(&s.target),
            })
            .collect();
        let m = model(true);
        let a = sample_loss(&m, &ss, 1.0).unwrap().loss;
        let b = sample_loss(&m, &pss, 1.0).unwrap().loss;
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }
}
