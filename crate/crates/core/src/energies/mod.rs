//! Prior energies over point coordinates and their analytic gradients.
//!
//! Every energy is evaluated on a [`FrozenGraph`]: the discrete structure
//! (rounded types, bonds, knn lists, reference values) is read off the base
//! configuration once and then held fixed, so the gradient is that of a
//! smooth function of the coordinates.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bridges::Force;
use crate::error::{Error, Result};
use crate::geometry::stats::effective_k;
use crate::geometry::{
    adjacency, angle_triples, cross, dot, infer_bonds, knn_graph, norm, sub, undirected_edges, AtomTables,
    DatasetStats, Layout, MarkedPointSet, Vec3,
};

/// Pairs closer than this are treated as singular.
pub const EPS_DIST: f64 = 1e-6;
/// Default per-point bound on force norms entering a drift.
pub const DEFAULT_CLIP: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    Amber,
    Statistical,
    Riesz,
    KnnUniform,
}

impl EnergyKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnergyKind::Amber => "amber",
            EnergyKind::Statistical => "statistical",
            EnergyKind::Riesz => "riesz",
            EnergyKind::KnnUniform => "knn_uniform",
        }
    }

    pub fn needs_types(&self) -> bool {
        matches!(self, EnergyKind::Amber | EnergyKind::Statistical)
    }
}

impl fmt::Display for EnergyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnergyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "amber" => Ok(EnergyKind::Amber),
            "statistical" | "stat" => Ok(EnergyKind::Statistical),
            "riesz" => Ok(EnergyKind::Riesz),
            "knn_uniform" | "knn" => Ok(EnergyKind::KnnUniform),
            other => Err(Error::Config(format!("unknown energy kind {other:?}"))),
        }
    }
}

/// Energy settings as they appear in configs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub kind: EnergyKind,
    pub k: usize,
    pub term_mask: TermMask,
    pub clip: f64,
    pub weight: f64,
}

/// Which AMBER-style terms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub bond: bool,
    pub angle: bool,
    pub lj: bool,
    pub coulomb: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        bond: true,
        angle: true,
        lj: true,
        coulomb: true,
    };
    pub const NONE: TermMask = TermMask {
        bond: false,
        angle: false,
        lj: false,
        coulomb: false,
    };
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask::ALL
    }
}

impl fmt::Display for TermMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.bond, "bond"),
            (self.angle, "angle"),
            (self.lj, "lj"),
            (self.coulomb, "coulomb"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for TermMask {
    type Err = Error;

    /// Comma-separated subset of `bond,angle,lj,coulomb`, or `all` / `none`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "all" => return Ok(TermMask::ALL),
            "none" | "" => return Ok(TermMask::NONE),
            _ => {}
        }
        let mut m = TermMask::NONE;
        for part in s.split(',') {
            match part.trim() {
                "bond" => m.bond = true,
                "angle" => m.angle = true,
                "lj" => m.lj = true,
                "coulomb" => m.coulomb = true,
                other => return Err(Error::Config(format!("unknown energy term {other:?}"))),
            }
        }
        Ok(m)
    }
}

/// A prior energy plus everything it reads: statistics, tables, K and the
/// clipping bound applied when it acts as a force.
#[derive(Clone)]
pub struct EnergyForce {
    pub kind: EnergyKind,
    pub stats: Option<Arc<DatasetStats>>,
    pub tables: Option<Arc<AtomTables>>,
    pub k: usize,
    pub term_mask: TermMask,
    pub clip: f64,
    /// Multiplies the force (not the reported energy).
    pub weight: f64,
    /// Type channels per point in the SDE state this force is applied to.
    pub type_channels: usize,
    warned: Arc<AtomicBool>,
}

impl fmt::Debug for EnergyForce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnergyForce")
            .field("kind", &self.kind)
            .field("k", &self.k)
            .field("term_mask", &self.term_mask)
            .field("clip", &self.clip)
            .field("weight", &self.weight)
            .field("type_channels", &self.type_channels)
            .finish()
    }
}

impl EnergyForce {
    pub fn new(
        kind: EnergyKind,
        stats: Option<Arc<DatasetStats>>,
        tables: Option<Arc<AtomTables>>,
        k: usize,
        type_channels: usize,
    ) -> Result<Self> {
        let ef = Self {
            kind,
            stats,
            tables,
            k,
            term_mask: TermMask::ALL,
            clip: DEFAULT_CLIP,
            weight: 1.0,
            type_channels,
            warned: Arc::new(AtomicBool::new(false)),
        };
        ef.validate()?;
        Ok(ef)
    }

    pub fn riesz(type_channels: usize) -> Self {
        Self::new(EnergyKind::Riesz, None, None, 1, type_channels).expect("riesz needs no side data")
    }

    pub fn with_mask(mut self, mask: TermMask) -> Self {
        self.term_mask = mask;
        self
    }

    pub fn with_clip(mut self, clip: f64) -> Result<Self> {
        if !(clip > 0.0) {
            return Err(Error::Config("force clip must be positive".into()));
        }
        self.clip = clip;
        Ok(self)
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::Config("force weight must be finite and non-negative".into()));
        }
        self.weight = weight;
        Ok(self)
    }

    /// Serializable settings (everything except stats and tables).
    pub fn config(&self) -> EnergyConfig {
        EnergyConfig {
            kind: self.kind,
            k: self.k,
            term_mask: self.term_mask,
            clip: self.clip,
            weight: self.weight,
        }
    }

    pub fn from_config(
        cfg: &EnergyConfig,
        stats: Option<Arc<DatasetStats>>,
        tables: Option<Arc<AtomTables>>,
        type_channels: usize,
    ) -> Result<Self> {
        Self::new(cfg.kind, stats, tables, cfg.k, type_channels)?
            .with_mask(cfg.term_mask)
            .with_clip(cfg.clip)?
            .with_weight(cfg.weight)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("energy K must be at least 1".into()));
        }
        match self.kind {
            EnergyKind::Amber => {
                if self.stats.is_none() || self.tables.is_none() {
                    return Err(Error::Config("amber energy needs stats and atom tables".into()));
                }
            }
            EnergyKind::Statistical | EnergyKind::KnnUniform => {
                if self.stats.is_none() {
                    return Err(Error::Config(format!("{} energy needs dataset stats", self.kind)));
                }
            }
            EnergyKind::Riesz => {}
        }
        if self.kind.needs_types() && self.type_channels == 0 {
            return Err(Error::Config(format!("{} energy needs typed points", self.kind)));
        }
        Ok(())
    }

    fn stats(&self) -> &DatasetStats {
        self.stats.as_deref().expect("validated")
    }

    fn warn_absent(&self, what: &str) {
        if !self.warned.swap(true, Ordering::Relaxed) {
            log::warn!("no statistics for {what}; such terms contribute zero");
        }
    }

    /// Discrete structure of the energy at `coords` (types are rounded
    /// indices, required for typed kinds).
    pub fn freeze(&self, coords: &[Vec3], types: Option<&[usize]>) -> Result<FrozenGraph> {
        let m = coords.len();
        if m == 0 {
            return Err(Error::domain("energy of an empty point set"));
        }
        let mut g = FrozenGraph::empty(m);
        match self.kind {
            EnergyKind::Riesz => g.riesz = true,
            EnergyKind::KnnUniform => {
                if self.k >= m {
                    return Err(Error::domain(format!("knn energy needs K < m, got K = {}, m = {m}", self.k)));
                }
                g.knn = Some(KnnTerm {
                    lists: knn_graph(coords, self.k)?,
                    target: self.stats().knn_mean()?,
                });
            }
            EnergyKind::Statistical => {
                let types = self.require_types(types, m)?;
                let ke = effective_k(self.k, m);
                if ke == 0 {
                    return Ok(g);
                }
                let edges = undirected_edges(&knn_graph(coords, ke)?);
                let stats = self.stats();
                for &(i, j) in &edges {
                    match stats.knn_length(types[i], types[j]) {
                        Some((mu, var)) => g.lengths.push(Term2 { i, j, target: mu, weight: 1.0 / var }),
                        None => self.warn_absent("a knn type pair"),
                    }
                }
                for (i, j, k) in angle_triples(&adjacency(m, &edges)) {
                    match stats.knn_angle(types[i], types[j], types[k]) {
                        Some((mu, var)) => g.angles.push(Term3 { i, j, k, target: mu, weight: 1.0 / var }),
                        None => self.warn_absent("a knn angle triple"),
                    }
                }
            }
            EnergyKind::Amber => {
                let types = self.require_types(types, m)?;
                let tables = self.tables.as_deref().expect("validated");
                let stats = self.stats();
                let bonds = infer_bonds(coords, types, tables)?;
                if self.term_mask.bond {
                    for &(i, j) in &bonds {
                        match stats.ref_bond_len(types[i], types[j]) {
                            Some(l0) => g.lengths.push(Term2 { i, j, target: l0, weight: 1.0 }),
                            None => self.warn_absent("a bonded type pair"),
                        }
                    }
                }
                if self.term_mask.angle {
                    for (i, j, k) in angle_triples(&adjacency(m, &bonds)) {
                        match stats.ref_angle(types[i], types[j], types[k]) {
                            Some(w0) => g.angles.push(Term3 { i, j, k, target: w0, weight: 1.0 }),
                            None => self.warn_absent("a bond angle triple"),
                        }
                    }
                }
                if self.term_mask.lj {
                    g.lj_sigma = Some(tables.lj_sigma);
                }
                if self.term_mask.coulomb {
                    let q = types
                        .iter()
                        .map(|&t| tables.get(t).map(|a| a.charge))
                        .collect::<Result<Vec<_>>>()?;
                    g.coulomb = Some((tables.coulomb_kappa, q));
                }
            }
        }
        Ok(g)
    }

    fn require_types<'a>(&self, types: Option<&'a [usize]>, m: usize) -> Result<&'a [usize]> {
        match types {
            Some(t) if t.len() == m => Ok(t),
            Some(_) => Err(Error::domain("one type per point required")),
            None => Err(Error::domain(format!("{} energy needs typed points", self.kind))),
        }
    }

    fn frozen_for(&self, set: &MarkedPointSet) -> Result<FrozenGraph> {
        let types = if self.kind.needs_types() {
            Some(set.type_indices()?)
        } else {
            None
        };
        self.freeze(&set.coords, types.as_deref())
    }

    pub fn energy(&self, set: &MarkedPointSet) -> Result<f64> {
        self.frozen_for(set)?.energy(&set.coords)
    }

    /// Energy and its coordinate gradient (`m x 3`).
    pub fn energy_grad(&self, set: &MarkedPointSet) -> Result<(f64, Vec<Vec3>)> {
        self.frozen_for(set)?.energy_grad(&set.coords)
    }

    /// Central differences with the graph frozen at `set`.
    pub fn fd_gradient(&self, set: &MarkedPointSet, h: f64) -> Result<Vec<Vec3>> {
        if !(h > 0.0) {
            return Err(Error::domain("finite-difference step must be positive"));
        }
        let g = self.frozen_for(set)?;
        let mut x = set.coords.clone();
        let mut out = vec![[0.0; 3]; x.len()];
        for i in 0..x.len() {
            for a in 0..3 {
                let orig = x[i][a];
                x[i][a] = orig + h;
                let ep = g.energy(&x)?;
                x[i][a] = orig - h;
                let em = g.energy(&x)?;
                x[i][a] = orig;
                out[i][a] = (ep - em) / (2.0 * h);
            }
        }
        Ok(out)
    }

    /// `-weight * grad E` at a row-major SDE state, clipped per point to
    /// `clip`; type channels receive zero.
    pub fn state_force(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let layout = Layout { k: self.type_channels };
        let coords = layout.coords(z)?;
        let types = if self.kind.needs_types() {
            layout.type_indices(z)?
        } else {
            None
        };
        let (_, grad) = self.freeze(&coords, types.as_deref())?.energy_grad(&coords)?;
        out.fill(0.0);
        let w = layout.width();
        for (i, g) in grad.iter().enumerate() {
            let n = self.weight * norm(g);
            let scale = self.weight * if n > self.clip { self.clip / n } else { 1.0 };
            for a in 0..3 {
                out[i * w + a] = -g[a] * scale;
            }
        }
        Ok(())
    }
}

impl Force for EnergyForce {
    fn force(&self, z: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        self.state_force(z, out)
    }
}

pub fn amber_energy(set: &MarkedPointSet, ef: &EnergyForce) -> Result<f64> {
    expect_kind(ef, EnergyKind::Amber)?;
    ef.energy(set)
}

pub fn stat_energy(set: &MarkedPointSet, ef: &EnergyForce) -> Result<f64> {
    expect_kind(ef, EnergyKind::Statistical)?;
    ef.energy(set)
}

pub fn riesz_energy(set: &MarkedPointSet) -> Result<f64> {
    EnergyForce::riesz(set.k).energy(set)
}

pub fn knn_energy(set: &MarkedPointSet, ef: &EnergyForce) -> Result<f64> {
    expect_kind(ef, EnergyKind::KnnUniform)?;
    ef.energy(set)
}

fn expect_kind(ef: &EnergyForce, kind: EnergyKind) -> Result<()> {
    if ef.kind != kind {
        return Err(Error::Config(format!("expected a {kind} energy, got {}", ef.kind)));
    }
    Ok(())
}

/// `weight * (|x_i - x_j| - target)^2`
#[derive(Clone, Debug, PartialEq)]
pub struct Term2 {
    pub i: usize,
    pub j: usize,
    pub target: f64,
    pub weight: f64,
}

/// `weight * (angle(x_i, x_j, x_k) - target)^2`
#[derive(Clone, Debug, PartialEq)]
pub struct Term3 {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub target: f64,
    pub weight: f64,
}

/// `sum_i (mean_{j in lists[i]} |x_i - x_j|^2 - target)^2`
#[derive(Clone, Debug, PartialEq)]
pub struct KnnTerm {
    pub lists: Vec<Vec<usize>>,
    pub target: f64,
}

/// An energy with its discrete structure fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenGraph {
    pub m: usize,
    pub lengths: Vec<Term2>,
    pub angles: Vec<Term3>,
    pub lj_sigma: Option<f64>,
    pub coulomb: Option<(f64, Vec<f64>)>,
    pub riesz: bool,
    pub knn: Option<KnnTerm>,
}

fn pair_distance(x: &[Vec3], i: usize, j: usize) -> Result<(Vec3, f64)> {
    let d = sub(&x[i], &x[j]);
    let l = norm(&d);
    if !(l >= EPS_DIST) {
        return Err(Error::Singularity(format!("points {i} and {j} are {l:e} apart")));
    }
    Ok((d, l))
}

fn add(g: &mut Vec3, d: &Vec3, s: f64) {
    for a in 0..3 {
        g[a] += s * d[a];
    }
}

impl FrozenGraph {
    fn empty(m: usize) -> Self {
        Self {
            m,
            lengths: Vec::new(),
            angles: Vec::new(),
            lj_sigma: None,
            coulomb: None,
            riesz: false,
            knn: None,
        }
    }

    pub fn energy(&self, x: &[Vec3]) -> Result<f64> {
        self.eval(x, None)
    }

    pub fn energy_grad(&self, x: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        let mut g = vec![[0.0; 3]; x.len()];
        let e = self.eval(x, Some(&mut g))?;
        Ok((e, g))
    }

    fn eval(&self, x: &[Vec3], mut grad: Option<&mut Vec<Vec3>>) -> Result<f64> {
        if x.len() != self.m {
            return Err(Error::domain(format!("graph frozen for {} points, got {}", self.m, x.len())));
        }
        let mut e = 0.0;
        for t in &self.lengths {
            let d = sub(&x[t.i], &x[t.j]);
            let l = norm(&d);
            let r = l - t.target;
            e += t.weight * r * r;
            if let Some(g) = grad.as_deref_mut() {
                if l > 0.0 {
                    let s = 2.0 * t.weight * r / l;
                    add(&mut g[t.i], &d, s);
                    add(&mut g[t.j], &d, -s);
                }
            }
        }
        for t in &self.angles {
            let u = sub(&x[t.i], &x[t.j]);
            let v = sub(&x[t.k], &x[t.j]);
            let (nu, nv) = (norm(&u), norm(&v));
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::DegenerateAngle(format!("zero-length arm at vertex {}", t.j)));
            }
            let c = (dot(&u, &v) / (nu * nv)).clamp(-1.0, 1.0);
            let theta = c.acos();
            let r = theta - t.target;
            e += t.weight * r * r;
            if let Some(g) = grad.as_deref_mut() {
                let s = norm(&cross(&u, &v)) / (nu * nv);
                // the angle is not differentiable at 0 and pi
                if s > 1e-12 {
                    let w = -2.0 * t.weight * r / s;
                    let mut du = [0.0; 3];
                    let mut dv = [0.0; 3];
                    for a in 0..3 {
                        du[a] = w * (v[a] / (nu * nv) - c * u[a] / (nu * nu));
                        dv[a] = w * (u[a] / (nu * nv) - c * v[a] / (nv * nv));
                    }
                    add(&mut g[t.i], &du, 1.0);
                    add(&mut g[t.k], &dv, 1.0);
                    add(&mut g[t.j], &du, -1.0);
                    add(&mut g[t.j], &dv, -1.0);
                }
            }
        }
        if self.lj_sigma.is_some() || self.coulomb.is_some() || self.riesz {
            for i in 0..self.m {
                for j in i + 1..self.m {
                    let (d, l) = pair_distance(x, i, j)?;
                    let mut de = 0.0;
                    if let Some(sigma) = self.lj_sigma {
                        let s6 = (sigma / l).powi(6);
                        e += s6 * s6 - 2.0 * s6;
                        de += (-12.0 * s6 * s6 + 12.0 * s6) / l;
                    }
                    if let Some((kappa, q)) = &self.coulomb {
                        let qq = kappa * q[i] * q[j];
                        e += qq / l;
                        de -= qq / (l * l);
                    }
                    if self.riesz {
                        e += 1.0 / (l * l);
                        de -= 2.0 / (l * l * l);
                    }
                    if let Some(g) = grad.as_deref_mut() {
                        add(&mut g[i], &d, de / l);
                        add(&mut g[j], &d, -de / l);
                    }
                }
            }
        }
        if let Some(knn) = &self.knn {
            for (i, ns) in knn.lists.iter().enumerate() {
                let kf = ns.len() as f64;
                let kd = ns
                    .iter()
                    .map(|&j| {
                        let d = sub(&x[i], &x[j]);
                        dot(&d, &d)
                    })
                    .sum::<f64>()
                    / kf;
                let r = kd - knn.target;
                e += r * r;
                if let Some(g) = grad.as_deref_mut() {
                    let w = 4.0 * r / kf;
                    for &j in ns {
                        let d = sub(&x[i], &x[j]);
                        add(&mut g[i], &d, w);
                        add(&mut g[j], &d, -w);
                    }
                }
            }
        }
        if !e.is_finite() {
            return Err(Error::NonFinite {
                what: "energy".into(),
                t: f64::NAN,
            });
        }
        Ok(e)
    }
}

/// Largest norm-wise relative discrepancy `|a - b| / max(|b|, floor)`.
pub fn relative_error(a: &[Vec3], b: &[Vec3], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(p, q)| {
        let d = sub(p, q);
        dot(&d, &d)
    }).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|q| dot(q, q)).sum::<f64>().sqrt();
    diff / scale.max(floor)
}
