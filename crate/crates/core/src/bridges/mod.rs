//! Bridge processes pinned at a data point `x`.
//!
//! Three drifts are supported, all with diffusion `sigma_t dW_t`:
//!
//! * Brownian: `sigma_t^2 (x - z) / (beta_T - beta_t)`
//! * forced: `sigma_t f_t(z) + ` the Brownian drift, for a prior force `f`
//! * Lyapunov: `-alpha_t ∇U_t(z) + nu_t(z)` for a user supplied `U`, step size
//!   `alpha_t` and perturbation `nu_t`
//!
//! The Brownian drift blows up at `t = T`; none of the drifts may be requested
//! there. Pinning is checked numerically in [`verify`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng;
use crate::sde::{self, Drift, EmOptions, NoiseSchedule};

pub mod verify;

pub use verify::{
    gronwall_check, pl_condition_probe, verify_pinning, verify_pinning_with, GronwallOptions,
    GronwallReport, GronwallSeries, PinningLevel, PinningOptions, PinningReport, PlProbeReport,
};

/// A prior force `f_t(z)` on flat states.
pub trait Force: Send + Sync {
    fn force(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()>;
}

/// Lyapunov function `U_t(z)` with its gradient in `z`.
pub trait Lyapunov: Send + Sync {
    fn value(&self, z: &[f64], t: f64) -> f64;
    fn grad(&self, z: &[f64], t: f64, out: &mut [f64]);
}

/// `U(z) = |x - z|^2 / 2`.
#[derive(Clone, Debug)]
pub struct QuadraticLyapunov {
    pub target: Vec<f64>,
}

impl Lyapunov for QuadraticLyapunov {
    fn value(&self, z: &[f64], _t: f64) -> f64 {
        0.5 * sq_dist(z, &self.target)
    }

    fn grad(&self, z: &[f64], _t: f64, out: &mut [f64]) {
        for ((o, zi), xi) in out.iter_mut().zip(z).zip(&self.target) {
            *o = zi - xi;
        }
    }
}

/// `U(z) = |x - z|^4`.
#[derive(Clone, Debug)]
pub struct QuarticLyapunov {
    pub target: Vec<f64>,
}

impl Lyapunov for QuarticLyapunov {
    fn value(&self, z: &[f64], _t: f64) -> f64 {
        let r2 = sq_dist(z, &self.target);
        r2 * r2
    }

    fn grad(&self, z: &[f64], _t: f64, out: &mut [f64]) {
        let r2 = sq_dist(z, &self.target);
        for ((o, zi), xi) in out.iter_mut().zip(z).zip(&self.target) {
            *o = 4.0 * r2 * (zi - xi);
        }
    }
}

pub type StepSize = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// The `(U_t, alpha_t, nu_t)` triple of a Lyapunov bridge.
#[derive(Clone)]
pub struct LyapunovParts {
    pub u: Arc<dyn Lyapunov>,
    pub step: StepSize,
    pub perturbation: Option<Arc<dyn Force>>,
}

#[derive(Clone)]
pub enum BridgeKind {
    Brownian,
    Forced(Arc<dyn Force>),
    Lyapunov(LyapunovParts),
}

impl BridgeKind {
    pub fn name(&self) -> &'static str {
        match self {
            BridgeKind::Brownian => "brownian",
            BridgeKind::Forced(_) => "forced",
            BridgeKind::Lyapunov(_) => "lyapunov",
        }
    }
}

/// Isotropic Gaussian `N(mean, var I)`; `var = 0` is a point mass.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialLaw {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl InitialLaw {
    pub fn point_mass(at: Vec<f64>) -> Self {
        Self { mean: at, var: 0.0 }
    }

    pub fn gaussian(mean: Vec<f64>, var: f64) -> Self {
        Self { mean, var }
    }

    pub fn sample(&self, rng: &mut rng::StreamRng) -> Vec<f64> {
        let sd = self.var.sqrt();
        self.mean
            .iter()
            .map(|m| if sd > 0.0 { m + sd * rng::standard_normal(rng) } else { *m })
            .collect()
    }
}

/// A bridge `Q^x`: drift kind, pin, schedule and initial law.
#[derive(Clone)]
pub struct BridgeSpec {
    pub kind: BridgeKind,
    pub pin: Vec<f64>,
    pub schedule: NoiseSchedule,
    pub mu0: InitialLaw,
    /// Grid resolution used when a marginal has to be simulated.
    pub fallback_steps: usize,
}

impl std::fmt::Debug for BridgeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeSpec")
            .field("kind", &self.kind.name())
            .field("dim", &self.pin.len())
            .field("schedule", &self.schedule)
            .field("mu0_var", &self.mu0.var)
            .finish()
    }
}

impl BridgeSpec {
    /// Brownian bridge with the default initial law `N(x, beta_T I)`.
    pub fn brownian(pin: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(BridgeKind::Brownian, pin, schedule)
    }

    pub fn forced(pin: Vec<f64>, schedule: NoiseSchedule, force: Arc<dyn Force>) -> Result<Self> {
        Self::new(BridgeKind::Forced(force), pin, schedule)
    }

    pub fn lyapunov(pin: Vec<f64>, schedule: NoiseSchedule, parts: LyapunovParts) -> Result<Self> {
        Self::new(BridgeKind::Lyapunov(parts), pin, schedule)
    }

    pub fn new(kind: BridgeKind, pin: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        if pin.is_empty() {
            return Err(Error::domain("bridge dimension must be at least 1"));
        }
        schedule.validate()?;
        let mu0 = InitialLaw::gaussian(pin.clone(), schedule.beta_total());
        Ok(Self {
            kind,
            pin,
            schedule,
            mu0,
            fallback_steps: 1000,
        })
    }

    pub fn with_mu0(mut self, mu0: InitialLaw) -> Result<Self> {
        if mu0.mean.len() != self.pin.len() || !(mu0.var >= 0.0) {
            return Err(Error::domain("initial law does not match the bridge dimension"));
        }
        self.mu0 = mu0;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.pin.len()
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("t = {t} is negative")));
        }
        if t >= self.horizon() {
            return Err(Error::Singularity(format!(
                "bridge drift requested at t = {t} >= T = {}",
                self.horizon()
            )));
        }
        Ok(())
    }

    fn check_dim(&self, z: &[f64], out: &[f64]) -> Result<()> {
        if z.len() != self.dim() || out.len() != self.dim() {
            return Err(Error::domain(format!(
                "state has dimension {}, bridge expects {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `sigma_t^2 (x - z) / (beta_T - beta_t)`.
    pub fn brownian_drift(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.check_time(t)?;
        self.check_dim(z, out)?;
        let rem = self.schedule.remaining_variance(t);
        if !(rem > 0.0) {
            return Err(Error::Singularity(format!("beta_T - beta_t = {rem} at t = {t}")));
        }
        let s = self.schedule.sigma(t);
        let c = s * s / rem;
        for ((o, zi), xi) in out.iter_mut().zip(z).zip(&self.pin) {
            *o = c * (xi - zi);
        }
        Ok(())
    }

    /// `sigma_t f_t(z) + ` Brownian drift. Fails for non-forced kinds.
    pub fn forced_drift(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let BridgeKind::Forced(force) = &self.kind else {
            return Err(Error::domain("forced_drift needs a forced bridge"));
        };
        self.brownian_drift(z, t, out)?;
        let mut f = vec![0.0; z.len()];
        force.force(z, t, &mut f)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Force { state: z.to_vec() });
        }
        let s = self.schedule.sigma(t);
        for (o, fi) in out.iter_mut().zip(&f) {
            *o += s * fi;
        }
        Ok(())
    }

    /// `-alpha_t ∇U_t(z) + nu_t(z)`. Fails for non-Lyapunov kinds.
    pub fn lyapunov_drift(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let BridgeKind::Lyapunov(parts) = &self.kind else {
            return Err(Error::domain("lyapunov_drift needs a Lyapunov bridge"));
        };
        self.check_time(t)?;
        self.check_dim(z, out)?;
        parts.u.grad(z, t, out);
        let a = (parts.step)(t);
        if !a.is_finite() || out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "Lyapunov gradient".into(),
                t,
            });
        }
        for o in out.iter_mut() {
            *o *= -a;
        }
        if let Some(nu) = &parts.perturbation {
            let mut p = vec![0.0; z.len()];
            nu.force(z, t, &mut p)?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Force { state: z.to_vec() });
            }
            for (o, pi) in out.iter_mut().zip(&p) {
                *o += pi;
            }
        }
        Ok(())
    }

    /// Drift of whichever kind this bridge is.
    pub fn drift_at(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match &self.kind {
            BridgeKind::Brownian => self.brownian_drift(z, t, out),
            BridgeKind::Forced(_) => self.forced_drift(z, t, out),
            BridgeKind::Lyapunov(_) => self.lyapunov_drift(z, t, out),
        }
    }

    /// Gaussian marginal of the Brownian bridge at `t`: `(mean, variance)`.
    ///
    /// In the `beta` clock the process is a standard Brownian bridge from
    /// `Z_0 ~ N(m0, v0)` to `x`, so with `r = beta_t / beta_T`
    /// `mean = (1 - r) m0 + r x` and `var = (1 - r)^2 v0 + beta_t (1 - r)`.
    pub fn brownian_marginal(&self, t: f64) -> Result<(Vec<f64>, f64)> {
        let h = self.horizon();
        if !(0.0..=h).contains(&t) {
            return Err(Error::domain(format!("t = {t} outside [0, {h}]")));
        }
        let total = self.schedule.beta_total();
        let b = self.schedule.beta(t)?;
        let r = if t >= h { 1.0 } else { b / total };
        let mean = self
            .mu0
            .mean
            .iter()
            .zip(&self.pin)
            .map(|(m0, x)| (1.0 - r) * m0 + r * x)
            .collect();
        let var = if t >= h {
            0.0
        } else {
            (1.0 - r) * (1.0 - r) * self.mu0.var + b * (1.0 - r)
        };
        Ok((mean, var))
    }
}

impl Drift for BridgeSpec {
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.drift_at(z, t, out)
    }

    fn terminal_mean(&self, _z: &[f64], _t: f64, out: &mut [f64]) -> Option<Result<()>> {
        match self.kind {
            // Conditional on Z_t the pinned endpoint is deterministic.
            BridgeKind::Brownian | BridgeKind::Forced(_) => {
                out.copy_from_slice(&self.pin);
                Some(Ok(()))
            }
            BridgeKind::Lyapunov(_) => None,
        }
    }
}

/// Draws `Z_t` under the bridge.
///
/// Brownian bridges are sampled exactly from their Gaussian marginal; other
/// kinds are simulated with Euler–Maruyama on a `fallback_steps` grid up to `t`.
pub fn sample_bridge_marginal(spec: &BridgeSpec, t: f64, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, 0);
    sample_bridge_marginal_rng(spec, t, &mut r)
}

pub fn sample_bridge_marginal_rng(spec: &BridgeSpec, t: f64, r: &mut rng::StreamRng) -> Result<Vec<f64>> {
    let h = spec.horizon();
    if !(0.0..=h).contains(&t) {
        return Err(Error::domain(format!("t = {t} outside [0, {h}]")));
    }
    if t >= h {
        return Ok(spec.pin.clone());
    }
    match spec.kind {
        BridgeKind::Brownian => {
            let (mean, var) = spec.brownian_marginal(t)?;
            let sd = var.sqrt();
            Ok(mean.iter().map(|m| m + sd * rng::standard_normal(r)).collect())
        }
        _ => {
            let z0 = spec.mu0.sample(r);
            if t == 0.0 {
                return Ok(z0);
            }
            let full = sde::make_grid(spec.fallback_steps, h)?;
            let mut pts: Vec<f64> = full.points().iter().copied().filter(|&s| s < t).collect();
            pts.push(t);
            let grid = sde::TimeGrid::from_points(pts)?;
            let opts = EmOptions { terminal_hook: false };
            sde::integrate(spec, &spec.schedule, &z0, &grid, r, opts, |_, _, _| {})
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstForce(f64);
    impl Force for ConstForce {
        fn force(&self, _z: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
            out.fill(self.0);
            Ok(())
        }
    }

    fn unit() -> NoiseSchedule {
        NoiseSchedule::constant(1.0, 1.0).unwrap()
    }

    #[test]
    fn brownian_drift_examples() {
        let b = BridgeSpec::brownian(vec![1.0], unit()).unwrap();
        let mut out = [0.0];
        b.brownian_drift(&[1.0], 0.3, &mut out).unwrap();
        assert_eq!(out[0], 0.0);
        b.brownian_drift(&[0.0], 0.0, &mut out).unwrap();
        assert_eq!(out[0], 1.0);
        b.brownian_drift(&[0.0], 0.5, &mut out).unwrap();
        assert_eq!(out[0], 2.0);
        assert!(matches!(b.brownian_drift(&[0.0], 1.0, &mut out), Err(Error::Singularity(_))));
    }

    #[test]
    fn forced_drift_reductions() {
        let zero = BridgeSpec::forced(vec![1.0, -1.0], unit(), Arc::new(ConstForce(0.0))).unwrap();
        let c = BridgeSpec::forced(vec![1.0, -1.0], unit(), Arc::new(ConstForce(0.7))).unwrap();
        let plain = BridgeSpec::brownian(vec![1.0, -1.0], unit()).unwrap();
        let z = [0.3, 0.2];
        let (mut a, mut b, mut p) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        zero.forced_drift(&z, 0.4, &mut a).unwrap();
        c.forced_drift(&z, 0.4, &mut b).unwrap();
        plain.brownian_drift(&z, 0.4, &mut p).unwrap();
        assert_eq!(a, p);
        for i in 0..2 {
            assert!((b[i] - p[i] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_force_is_reported() {
        let b = BridgeSpec::forced(vec![0.0], unit(), Arc::new(ConstForce(f64::NAN))).unwrap();
        let mut out = [0.0];
        match b.forced_drift(&[0.5], 0.1, &mut out) {
            Err(Error::Force { state }) => assert_eq!(state, vec![0.5]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quadratic_lyapunov_is_the_brownian_bridge() {
        let sched = NoiseSchedule::linear(1.0, 0.5, 1.0).unwrap();
        let x = vec![0.5, -0.25, 2.0];
        let parts = LyapunovParts {
            u: Arc::new(QuadraticLyapunov { target: x.clone() }),
            step: Arc::new(move |t| {
                let s = sched.sigma(t);
                s * s / sched.remaining_variance(t)
            }),
            perturbation: None,
        };
        let ly = BridgeSpec::lyapunov(x.clone(), sched, parts).unwrap();
        let bb = BridgeSpec::brownian(x, sched).unwrap();
        let z = [0.1, 0.2, 0.3];
        for &t in &[0.0, 0.3, 0.9, 0.999] {
            let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
            ly.lyapunov_drift(&z, t, &mut a).unwrap();
            bb.brownian_drift(&z, t, &mut b).unwrap();
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() <= 1e-12 * b[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn lyapunov_drift_vanishes_at_minimiser_and_scales_with_step() {
        let parts = LyapunovParts {
            u: Arc::new(QuadraticLyapunov { target: vec![1.0] }),
            step: Arc::new(|t| 1.0 / (1.0 - t)),
            perturbation: None,
        };
        let ly = BridgeSpec::lyapunov(vec![1.0], unit(), parts).unwrap();
        let mut out = [0.0];
        ly.lyapunov_drift(&[1.0], 0.5, &mut out).unwrap();
        assert_eq!(out[0], 0.0);
        let mut early = [0.0];
        let mut late = [0.0];
        ly.lyapunov_drift(&[0.0], 0.0, &mut early).unwrap();
        ly.lyapunov_drift(&[0.0], 0.9, &mut late).unwrap();
        assert!((late[0] / early[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn marginal_endpoints() {
        let b = BridgeSpec::brownian(vec![2.0, 3.0], unit()).unwrap();
        assert_eq!(sample_bridge_marginal(&b, 1.0, 5).unwrap(), vec![2.0, 3.0]);
        let pm = b.clone().with_mu0(InitialLaw::point_mass(vec![-1.0, 0.0])).unwrap();
        assert_eq!(sample_bridge_marginal(&pm, 0.0, 5).unwrap(), vec![-1.0, 0.0]);
        let (mean, var) = b.brownian_marginal(0.5).unwrap();
        assert_eq!(mean, vec![2.0, 3.0]);
        assert!((var - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(BridgeSpec::brownian(vec![], unit()).is_err());
    }
}
