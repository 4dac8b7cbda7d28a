//! Noise schedules, time grids and the Euler–Maruyama integrator.
//!
//! All processes here have scalar-times-identity diffusion:
//!
//! ```text
//! dZ_t = drift(Z_t, t) dt + sigma_t dW_t
//! ```
//!
//! The schedule also owns the integrated variance `beta_t = ∫_0^t sigma_s^2 ds`,
//! which sets the Brownian-bridge drift and marginals.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;
use crate::rng::{self, StreamRng};

const BETA_REL_TOL: f64 = 1e-11;

/// Shape of `sigma_t` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `sigma_t = sigma`.
    Constant { sigma: f64 },
    /// `sigma_t = start + (end - start) * t / T`.
    Linear { start: f64, end: f64 },
    /// `sigma_t = floor + scale * (1 - t / T)^power`.
    Polynomial { scale: f64, power: f64, floor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub horizon: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, horizon: f64) -> Result<Self> {
        let s = Self { kind, horizon };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(sigma: f64, horizon: f64) -> Result<Self> {
        Self::new(ScheduleKind::Constant { sigma }, horizon)
    }

    pub fn linear(start: f64, end: f64, horizon: f64) -> Result<Self> {
        Self::new(ScheduleKind::Linear { start, end }, horizon)
    }

    /// Checks `T > 0` and `sigma_t > 0` on `[0, T)`.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::domain(format!("horizon must be positive, got {}", self.horizon)));
        }
        let ok = match self.kind {
            ScheduleKind::Constant { sigma } => sigma.is_finite() && sigma > 0.0,
            // sigma may reach zero at t = T but not before.
            ScheduleKind::Linear { start, end } => {
                start.is_finite() && end.is_finite() && start > 0.0 && end >= 0.0
            }
            ScheduleKind::Polynomial { scale, power, floor } => {
                scale.is_finite()
                    && power.is_finite()
                    && floor.is_finite()
                    && scale >= 0.0
                    && power >= 0.0
                    && floor >= 0.0
                    && scale + floor > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("schedule {:?} is not positive on [0, T)", self.kind)))
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `sigma_t`; `t` is clamped to `[0, T]`.
    pub fn sigma(&self, t: f64) -> f64 {
        let u = (t / self.horizon).clamp(0.0, 1.0);
        match self.kind {
            ScheduleKind::Constant { sigma } => sigma,
            ScheduleKind::Linear { start, end } => start + (end - start) * u,
            ScheduleKind::Polynomial { scale, power, floor } => floor + scale * (1.0 - u).powf(power),
        }
    }

    /// `beta_t = ∫_0^t sigma_s^2 ds`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::domain(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(self.beta_unchecked(t))
    }

    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match self.kind {
            ScheduleKind::Constant { sigma } => sigma * sigma * t,
            ScheduleKind::Linear { start, end } => {
                // ∫ (a + c s)^2 ds with c = (end - start) / T
                let c = (end - start) / self.horizon;
                start * start * t + start * c * t * t + c * c * t * t * t / 3.0
            }
            ScheduleKind::Polynomial { .. } => {
                let f = |s: f64| {
                    let v = self.sigma(s);
                    v * v
                };
                quad::adaptive_simpson(&f, 0.0, t, BETA_REL_TOL)
            }
        }
    }

    /// `beta_T`.
    pub fn beta_total(&self) -> f64 {
        self.beta_unchecked(self.horizon)
    }

    /// `beta_T - beta_t`, the variance still to be removed after time `t`.
    pub fn remaining_variance(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Polynomial { .. } => {
                let f = |s: f64| {
                    let v = self.sigma(s);
                    v * v
                };
                quad::adaptive_simpson(&f, t.clamp(0.0, self.horizon), self.horizon, BETA_REL_TOL)
            }
            _ => self.beta_total() - self.beta_unchecked(t),
        }
    }
}

/// `beta_integral(schedule, t)`.
pub fn beta_integral(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    schedule.beta(t)
}

impl fmt::Display for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::Constant { sigma } => write!(f, "constant:{sigma}"),
            ScheduleKind::Linear { start, end } => write!(f, "linear:{start},{end}"),
            ScheduleKind::Polynomial { scale, power, floor } => {
                write!(f, "polynomial:{scale},{power},{floor}")
            }
        }
    }
}

impl ScheduleKind {
    /// Parses `constant:S`, `linear:A,B` or `polynomial:SCALE,POWER,FLOOR`.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, args) = text.split_once(':').unwrap_or((text, ""));
        let nums: Vec<f64> = args
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number {s:?} in schedule {text:?}")))
            })
            .collect::<Result<_>>()?;
        let kind = match (name.trim(), nums.as_slice()) {
            ("constant", [s]) => ScheduleKind::Constant { sigma: *s },
            ("linear", [a, b]) => ScheduleKind::Linear { start: *a, end: *b },
            ("polynomial", [s, p, fl]) => ScheduleKind::Polynomial {
                scale: *s,
                power: *p,
                floor: *fl,
            },
            ("polynomial", [s, p]) => ScheduleKind::Polynomial {
                scale: *s,
                power: *p,
                floor: 0.0,
            },
            _ => return Err(Error::Config(format!("unrecognised schedule {text:?}"))),
        };
        Ok(kind)
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Strictly increasing time points `0 = t_0 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize, horizon: f64) -> Result<Self> {
        make_grid(steps, horizon)
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::domain("a time grid needs at least two points"));
        }
        if points[0] != 0.0 {
            return Err(Error::domain("time grid must start at 0"));
        }
        if points.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::domain("time grid must be strictly increasing and finite"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Number of steps `N` (one less than the number of points).
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }
}

/// Uniform grid with `steps + 1` points whose last point is exactly `horizon`.
pub fn make_grid(steps: usize, horizon: f64) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(Error::domain("steps must be at least 1"));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
    }
    let mut points: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
    points[steps] = horizon;
    Ok(TimeGrid { points })
}

/// Time-dependent drift `b(z, t)` on `R^d`.
pub trait Drift: Sync {
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    /// Exact conditional mean of `Z_T` given `Z_t = z`, for drifts that know
    /// their endpoint. When provided, the integrator uses it for the last step
    /// instead of evaluating the (typically singular) drift there.
    fn terminal_mean(&self, _z: &[f64], _t: f64, _out: &mut [f64]) -> Option<Result<()>> {
        None
    }
}

/// Adapts a closure `(z, t, out)` into a [`Drift`].
pub struct FnDrift<F>(pub F);

impl<F> Drift for FnDrift<F>
where
    F: Fn(&[f64], f64, &mut [f64]) -> Result<()> + Sync,
{
    fn drift(&self, z: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        (self.0)(z, t, out)
    }
}

/// Integrator switches.
#[derive(Clone, Copy, Debug)]
pub struct EmOptions {
    /// Use [`Drift::terminal_mean`] for the final step when available.
    pub terminal_hook: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { terminal_hook: true }
    }
}

/// Simulated path aligned with its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// Whitespace-separated columns: time, then the state coordinates.
    pub fn write_columns<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (t, z) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for v in z {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Core Euler–Maruyama loop.
///
/// `observe(i, t_i, z)` is called for every grid point including the start.
/// The drift is evaluated at `t_0 .. t_{N-1}` only.
pub fn integrate<D, O>(
    drift: &D,
    schedule: &NoiseSchedule,
    z0: &[f64],
    grid: &TimeGrid,
    rng: &mut StreamRng,
    options: EmOptions,
    mut observe: O,
) -> Result<Vec<f64>>
where
    D: Drift + ?Sized,
    O: FnMut(usize, f64, &[f64]),
{
    let d = z0.len();
    let mut z = z0.to_vec();
    let mut b = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let pts = grid.points();
    let n = grid.steps();
    observe(0, pts[0], &z);
    for i in 0..n {
        let t = pts[i];
        let dt = pts[i + 1] - t;
        let last = i + 1 == n;
        if last && options.terminal_hook {
            if let Some(res) = drift.terminal_mean(&z, t, &mut b) {
                res.map_err(|e| Error::Integration {
                    step: i,
                    t,
                    reason: e.to_string(),
                })?;
                z.copy_from_slice(&b);
                check_finite(&z, i, t, "state")?;
                observe(i + 1, pts[i + 1], &z);
                continue;
            }
        }
        drift.drift(&z, t, &mut b).map_err(|e| Error::Integration {
            step: i,
            t,
            reason: e.to_string(),
        })?;
        check_finite(&b, i, t, "drift")?;
        let scale = schedule.sigma(t) * dt.sqrt();
        rng::fill_standard_normal(rng, &mut noise);
        for ((zj, bj), xi) in z.iter_mut().zip(&b).zip(&noise) {
            *zj += bj * dt + scale * xi;
        }
        check_finite(&z, i, t, "state")?;
        observe(i + 1, pts[i + 1], &z);
    }
    Ok(z)
}

fn check_finite(v: &[f64], step: usize, t: f64, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step,
            t,
            reason: format!("non-finite {what}"),
        })
    }
}

/// Simulates one path from `z0` and keeps every state.
pub fn euler_maruyama<D: Drift + ?Sized>(
    drift: &D,
    schedule: &NoiseSchedule,
    z0: &[f64],
    grid: &TimeGrid,
    seed: u64,
) -> Result<Trajectory> {
    euler_maruyama_with(drift, schedule, z0, grid, seed, EmOptions::default())
}

pub fn euler_maruyama_with<D: Drift + ?Sized>(
    drift: &D,
    schedule: &NoiseSchedule,
    z0: &[f64],
    grid: &TimeGrid,
    seed: u64,
    options: EmOptions,
) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, 0);
    let mut states = Vec::with_capacity(grid.len());
    integrate(drift, schedule, z0, grid, &mut rng, options, |_, _, z| states.push(z.to_vec()))?;
    Ok(Trajectory {
        times: grid.points().to_vec(),
        states,
        seed,
    })
}
