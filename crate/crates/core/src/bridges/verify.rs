//! Monte Carlo and quadrature checks of the bridge conditions.
//!
//! * [`verify_pinning`]: terminal error `|Z_T - x|` shrinks with the step size.
//! * [`gronwall_check`]: `zeta_t = exp(∫ alpha)` and
//!   `zeta_t / ∫ zeta_s (beta_s + gamma_s) ds` both diverge as `t -> T`.
//! * [`pl_condition_probe`]: `E[U_t] - E[|∇U_t|^2] <= 0` along bridge paths.

use rayon::prelude::*;
use serde::Serialize;

use super::{BridgeSpec, Lyapunov, StepSize};
use crate::error::{Error, Result};
use crate::rng;
use crate::sde::{self, EmOptions, TimeGrid};

#[derive(Clone, Copy, Debug)]
pub struct PinningOptions {
    /// Finest-level tolerance is `factor * sqrt(beta_T - beta_{t_{N-1}})`,
    /// the standard deviation of the last noise increment.
    pub tolerance_factor: f64,
}

impl Default for PinningOptions {
    fn default() -> Self {
        Self { tolerance_factor: 2.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PinningLevel {
    pub steps: usize,
    /// Mean over paths of `|Z_T - x| / sqrt(d)`.
    pub mean_error: f64,
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PinningReport {
    pub bridge: String,
    pub n_paths: usize,
    pub seed: u64,
    pub levels: Vec<PinningLevel>,
    pub monotone: bool,
    pub finest_within_tolerance: bool,
    pub pass: bool,
    pub diagnostics: Option<String>,
}

/// Simulates `n_paths` bridge paths per step count and checks that the
/// terminal error decreases monotonically and ends below tolerance.
///
/// Paths are integrated with plain Euler–Maruyama up to `T` (no terminal
/// snapping), so the reported error is the discretisation's own.
pub fn verify_pinning(spec: &BridgeSpec, steps_list: &[usize], n_paths: usize, seed: u64) -> Result<PinningReport> {
    verify_pinning_with(spec, steps_list, n_paths, seed, PinningOptions::default())
}

pub fn verify_pinning_with(
    spec: &BridgeSpec,
    steps_list: &[usize],
    n_paths: usize,
    seed: u64,
    options: PinningOptions,
) -> Result<PinningReport> {
    if n_paths < 100 {
        return Err(Error::domain(format!("verify_pinning needs n_paths >= 100, got {n_paths}")));
    }
    if steps_list.is_empty() {
        return Err(Error::domain("steps_list is empty"));
    }
    let mut steps: Vec<usize> = steps_list.to_vec();
    steps.sort_unstable();
    steps.dedup();

    let d = spec.dim() as f64;
    let h = spec.horizon();
    let mut levels = Vec::with_capacity(steps.len());
    let mut diagnostics = None;
    for (li, &n) in steps.iter().enumerate() {
        let grid = sde::make_grid(n, h)?;
        let errors: Vec<Result<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut r = rng::substream(seed, li as u64, p as u64);
                let z0 = spec.mu0.sample(&mut r);
                let opts = EmOptions { terminal_hook: false };
                let zt = sde::integrate(spec, &spec.schedule, &z0, &grid, &mut r, opts, |_, _, _| {})?;
                Ok((super::sq_dist(&zt, &spec.pin) / d).sqrt())
            })
            .collect();
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        for (p, e) in errors.into_iter().enumerate() {
            match e {
                Ok(v) => {
                    sum += v;
                    max = max.max(v);
                }
                Err(err) => {
                    diagnostics = Some(format!("steps = {n}, path {p}: {err}"));
                    break;
                }
            }
        }
        if diagnostics.is_some() {
            break;
        }
        let penultimate = grid.points()[n - 1];
        let tolerance = options.tolerance_factor * spec.schedule.remaining_variance(penultimate).sqrt();
        levels.push(PinningLevel {
            steps: n,
            mean_error: sum / n_paths as f64,
            max_error: max,
            tolerance,
        });
    }

    let (monotone, finest_ok) = if diagnostics.is_some() {
        (false, false)
    } else {
        let monotone = levels.windows(2).all(|w| w[1].mean_error < w[0].mean_error);
        let finest = levels.last().unwrap();
        (monotone, finest.mean_error <= finest.tolerance)
    };
    Ok(PinningReport {
        bridge: spec.kind.name().to_string(),
        n_paths,
        seed,
        levels,
        monotone,
        finest_within_tolerance: finest_ok,
        pass: monotone && finest_ok,
        diagnostics,
    })
}

/// `alpha_t`, `beta_t` and `gamma_t` of the Grönwall argument, sampled on a
/// grid. `pl_beta`/`pl_gamma` are the perturbation and Itô-correction bounds,
/// not the schedule's integrated variance.
#[derive(Clone)]
pub struct GronwallSeries {
    pub alpha: StepSize,
    pub pl_beta: StepSize,
    pub pl_gamma: StepSize,
    pub grid: TimeGrid,
}

#[derive(Clone, Copy, Debug)]
pub struct GronwallOptions {
    /// Both traces must reach this value at the penultimate grid point.
    pub threshold: f64,
    /// Quadrature sub-panels per grid interval.
    pub substeps: usize,
}

impl Default for GronwallOptions {
    fn default() -> Self {
        Self {
            threshold: 1e3,
            substeps: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GronwallReport {
    pub pass: bool,
    pub threshold: f64,
    /// `(t, zeta_t)` for grid points `t_1 .. t_{N-1}`.
    pub zeta_trace: Vec<(f64, f64)>,
    pub log_zeta_trace: Vec<(f64, f64)>,
    /// `(t, zeta_t / ∫_0^t zeta_s (beta_s + gamma_s) ds)`; `+inf` where the
    /// integral is not positive.
    pub ratio_trace: Vec<(f64, f64)>,
    pub zeta_diverges: bool,
    pub ratio_diverges: bool,
}

/// Numerically checks the two divergence conditions up to `T - T/N`.
pub fn gronwall_check(series: &GronwallSeries) -> Result<GronwallReport> {
    gronwall_check_with(series, GronwallOptions::default())
}

pub fn gronwall_check_with(series: &GronwallSeries, options: GronwallOptions) -> Result<GronwallReport> {
    let pts = series.grid.points();
    let n = series.grid.steps();
    if n < 2 {
        return Err(Error::domain("gronwall_check needs at least two grid steps"));
    }
    let eval = |f: &StepSize, what: &str, t: f64| -> Result<f64> {
        let v = f(t);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: what.into(), t })
        }
    };
    let source = |t: f64| -> Result<f64> {
        Ok(eval(&series.pl_beta, "pl_beta", t)? + eval(&series.pl_gamma, "pl_gamma", t)?)
    };

    // Log-domain recursion: lz = log zeta, j = ∫_0^t exp(lz_s - lz_t) g_s ds,
    // so the ratio is 1 / j and nothing overflows.
    let sub = options.substeps.max(1);
    let mut lz = 0.0;
    let mut j = 0.0;
    let mut g_prev = source(pts[0])?;
    let mut a_prev = eval(&series.alpha, "alpha", pts[0])?;
    let mut zeta_trace = Vec::with_capacity(n - 1);
    let mut log_zeta_trace = Vec::with_capacity(n - 1);
    let mut ratio_trace = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let (t0, t1) = (pts[i], pts[i + 1]);
        let hs = (t1 - t0) / sub as f64;
        for k in 0..sub {
            let a = t0 + hs * k as f64;
            let b = if k + 1 == sub { t1 } else { a + hs };
            let am = eval(&series.alpha, "alpha", 0.5 * (a + b))?;
            let ab = eval(&series.alpha, "alpha", b)?;
            let dlz = (b - a) / 6.0 * (a_prev + 4.0 * am + ab);
            let g_b = source(b)?;
            let decay = (-dlz).exp();
            j = j * decay + 0.5 * (b - a) * (decay * g_prev + g_b);
            lz += dlz;
            if !lz.is_finite() || !j.is_finite() {
                return Err(Error::NonFinite {
                    what: "Grönwall recursion".into(),
                    t: b,
                });
            }
            g_prev = g_b;
            a_prev = ab;
        }
        let ratio = if j > 0.0 { 1.0 / j } else { f64::INFINITY };
        zeta_trace.push((t1, lz.exp()));
        log_zeta_trace.push((t1, lz));
        ratio_trace.push((t1, ratio));
    }

    let horizon = series.grid.horizon();
    let last_gap = horizon - pts[n - 1];
    let tail_start = log_zeta_trace
        .iter()
        .position(|(t, _)| horizon - t <= 10.0 * last_gap * (1.0 + 1e-9))
        .unwrap_or(0);
    let increasing = |trace: &[(f64, f64)]| {
        let tail = &trace[tail_start.min(trace.len().saturating_sub(2))..];
        tail.windows(2)
            .all(|w| w[1].1 > w[0].1 || (w[1].1.is_infinite() && w[0].1.is_infinite()))
    };
    let log_threshold = options.threshold.ln();
    let final_lz = log_zeta_trace.last().unwrap().1;
    let final_ratio = ratio_trace.last().unwrap().1;
    let zeta_diverges = final_lz >= log_threshold && increasing(&log_zeta_trace);
    let ratio_diverges = final_ratio >= options.threshold && increasing(&ratio_trace);
    Ok(GronwallReport {
        pass: zeta_diverges && ratio_diverges,
        threshold: options.threshold,
        zeta_trace,
        log_zeta_trace,
        ratio_trace,
        zeta_diverges,
        ratio_diverges,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PlProbeReport {
    /// `(t, E[U_t] - E[|∇U_t|^2], standard error)` per grid time before `T`.
    pub margins: Vec<(f64, f64, f64)>,
    pub worst_margin: f64,
    pub worst_time: f64,
    /// Every margin is at most three of its standard errors.
    pub pass: bool,
}

/// Monte Carlo estimate of the expected Polyak–Łojasiewicz margin along
/// paths of `spec`.
pub fn pl_condition_probe(
    u: &dyn Lyapunov,
    spec: &BridgeSpec,
    n_paths: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PlProbeReport> {
    let d = spec.dim();
    if d == 0 {
        return Err(Error::domain("pl_condition_probe on a zero-dimensional state"));
    }
    if n_paths < 2 {
        return Err(Error::domain("pl_condition_probe needs at least two paths"));
    }
    let n = grid.steps();
    let per_path: Vec<Result<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::stream(seed, p as u64);
            let z0 = spec.mu0.sample(&mut r);
            let mut diffs = vec![0.0; n];
            let mut g = vec![0.0; d];
            let opts = EmOptions { terminal_hook: false };
            sde::integrate(spec, &spec.schedule, &z0, grid, &mut r, opts, |i, t, z| {
                if i < n {
                    u.grad(z, t, &mut g);
                    let g2: f64 = g.iter().map(|v| v * v).sum();
                    diffs[i] = u.value(z, t) - g2;
                }
            })?;
            Ok(diffs)
        })
        .collect();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for path in per_path {
        for (i, v) in path?.into_iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let np = n_paths as f64;
    let mut margins = Vec::with_capacity(n);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_time = 0.0;
    let mut pass = true;
    for i in 0..n {
        let mean = sum[i] / np;
        let var = (sum_sq[i] / np - mean * mean).max(0.0) * np / (np - 1.0);
        let se = (var / np).sqrt();
        let t = grid.points()[i];
        margins.push((t, mean, se));
        if mean > worst {
            worst = mean;
            worst_time = t;
        }
        pass &= mean <= 3.0 * se;
    }
    Ok(PlProbeReport {
        margins,
        worst_margin: worst,
        worst_time,
        pass,
    })
}
