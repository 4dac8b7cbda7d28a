//! Dataset statistics of knn/bond lengths and angles per type pair/triple.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{adjacency, angle, angle_triples, dist2, infer_bonds, knn_graph, undirected_edges, AtomTables, MarkedPointSet};
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const FORMAT: &str = "prior-bridge-stats";
const VERSION: u32 = 1;

/// Streaming mean/variance (Welford) with an associative merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussStat {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl GaussStat {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &GaussStat) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        let (na, nb) = (self.count as f64, other.count as f64);
        self.mean += d * nb / n;
        self.m2 += other.m2 + d * d * na * nb / n;
        self.count += other.count;
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

pub type PairKey = (usize, usize);
pub type TripleKey = (usize, usize, usize);

pub fn pair_key(r: usize, c: usize) -> PairKey {
    (r.min(c), r.max(c))
}

pub fn triple_key(r: usize, c: usize, rp: usize) -> TripleKey {
    (r.min(rp), c, r.max(rp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    /// Neighbour count the knn statistics were gathered with.
    pub k_used: usize,
    /// Type channel count of the data (0 for untyped clouds).
    pub type_count: usize,
    pub symbols: Vec<String>,
    pub variance_floor: f64,
    pub knn_length: BTreeMap<PairKey, GaussStat>,
    pub knn_angle: BTreeMap<TripleKey, GaussStat>,
    pub bond_length: BTreeMap<PairKey, GaussStat>,
    pub bond_angle: BTreeMap<TripleKey, GaussStat>,
    /// Per-point mean squared knn distance, pooled over every point.
    pub knn_dist: GaussStat,
}

#[derive(Serialize, Deserialize)]
struct PairEntry {
    types: [usize; 2],
    #[serde(flatten)]
    stat: GaussStat,
}

#[derive(Serialize, Deserialize)]
struct TripleEntry {
    types: [usize; 3],
    #[serde(flatten)]
    stat: GaussStat,
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    format: String,
    version: u32,
    k_used: usize,
    type_count: usize,
    symbols: Vec<String>,
    variance_floor: f64,
    knn_dist: GaussStat,
    knn_length: Vec<PairEntry>,
    knn_angle: Vec<TripleEntry>,
    bond_length: Vec<PairEntry>,
    bond_angle: Vec<TripleEntry>,
}

fn pairs(m: &BTreeMap<PairKey, GaussStat>) -> Vec<PairEntry> {
    m.iter()
        .map(|(&(a, b), &stat)| PairEntry { types: [a, b], stat })
        .collect()
}

fn triples(m: &BTreeMap<TripleKey, GaussStat>) -> Vec<TripleEntry> {
    m.iter()
        .map(|(&(a, b, c), &stat)| TripleEntry { types: [a, b, c], stat })
        .collect()
}

impl DatasetStats {
    pub fn empty(k_used: usize, type_count: usize, symbols: Vec<String>) -> Self {
        Self {
            k_used,
            type_count,
            symbols,
            variance_floor: VARIANCE_FLOOR,
            knn_length: BTreeMap::new(),
            knn_angle: BTreeMap::new(),
            bond_length: BTreeMap::new(),
            bond_angle: BTreeMap::new(),
            knn_dist: GaussStat::default(),
        }
    }

    pub fn merge(&mut self, other: &DatasetStats) {
        fn fold<K: Ord + Copy>(a: &mut BTreeMap<K, GaussStat>, b: &BTreeMap<K, GaussStat>) {
            for (k, s) in b {
                a.entry(*k).or_default().merge(s);
            }
        }
        fold(&mut self.knn_length, &other.knn_length);
        fold(&mut self.knn_angle, &other.knn_angle);
        fold(&mut self.bond_length, &other.bond_length);
        fold(&mut self.bond_angle, &other.bond_angle);
        self.knn_dist.merge(&other.knn_dist);
    }

    fn floored(&self, s: Option<&GaussStat>) -> Option<(f64, f64)> {
        s.filter(|s| s.count > 0)
            .map(|s| (s.mean, s.variance().max(self.variance_floor)))
    }

    /// `(mean, floored variance)` of knn edge lengths between types `r`, `c`.
    pub fn knn_length(&self, r: usize, c: usize) -> Option<(f64, f64)> {
        self.floored(self.knn_length.get(&pair_key(r, c)))
    }

    /// `(mean, floored variance)` of knn angles `r - c - r'` with vertex type `c`.
    pub fn knn_angle(&self, r: usize, c: usize, rp: usize) -> Option<(f64, f64)> {
        self.floored(self.knn_angle.get(&triple_key(r, c, rp)))
    }

    /// Reference bond length between types `r`, `c`.
    pub fn ref_bond_len(&self, r: usize, c: usize) -> Option<f64> {
        self.bond_length
            .get(&pair_key(r, c))
            .filter(|s| s.count > 0)
            .map(|s| s.mean)
    }

    /// Reference bond angle `r - c - r'`.
    pub fn ref_angle(&self, r: usize, c: usize, rp: usize) -> Option<f64> {
        self.bond_angle
            .get(&triple_key(r, c, rp))
            .filter(|s| s.count > 0)
            .map(|s| s.mean)
    }

    pub fn knn_mean(&self) -> Result<f64> {
        if self.knn_dist.count == 0 {
            return Err(Error::Config("stats carry no knn distance samples".into()));
        }
        Ok(self.knn_dist.mean)
    }

    pub fn to_json(&self) -> String {
        let file = StatsFile {
            format: FORMAT.into(),
            version: VERSION,
            k_used: self.k_used,
            type_count: self.type_count,
            symbols: self.symbols.clone(),
            variance_floor: self.variance_floor,
            knn_dist: self.knn_dist,
            knn_length: pairs(&self.knn_length),
            knn_angle: triples(&self.knn_angle),
            bond_length: pairs(&self.bond_length),
            bond_angle: triples(&self.bond_angle),
        };
        serde_json::to_string_pretty(&file).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: StatsFile = serde_json::from_str(text)?;
        if f.format != FORMAT {
            return Err(Error::Config(format!("not a stats file (format {:?})", f.format)));
        }
        if f.version != VERSION {
            return Err(Error::Config(format!("unsupported stats version {}", f.version)));
        }
        let bad = |s: &GaussStat| !s.mean.is_finite() || !s.m2.is_finite() || s.m2 < 0.0;
        let all = f.knn_length.iter().map(|e| &e.stat)
            .chain(f.bond_length.iter().map(|e| &e.stat))
            .chain(f.knn_angle.iter().map(|e| &e.stat))
            .chain(f.bond_angle.iter().map(|e| &e.stat))
            .chain(std::iter::once(&f.knn_dist));
        for s in all {
            if bad(s) {
                return Err(Error::Config("stats file holds a non-finite entry".into()));
            }
        }
        let p = |v: Vec<PairEntry>| v.into_iter().map(|e| (pair_key(e.types[0], e.types[1]), e.stat)).collect();
        let t = |v: Vec<TripleEntry>| {
            v.into_iter()
                .map(|e| (triple_key(e.types[0], e.types[1], e.types[2]), e.stat))
                .collect()
        };
        Ok(Self {
            k_used: f.k_used,
            type_count: f.type_count,
            symbols: f.symbols,
            variance_floor: f.variance_floor,
            knn_length: p(f.knn_length),
            knn_angle: t(f.knn_angle),
            bond_length: p(f.bond_length),
            bond_angle: t(f.bond_angle),
            knn_dist: f.knn_dist,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON text, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Neighbour count actually used on an `m`-point item: `min(K, m - 1)`.
pub fn effective_k(k: usize, m: usize) -> usize {
    k.min(m.saturating_sub(1))
}

fn item_stats(item: &MarkedPointSet, k: usize, tables: Option<&AtomTables>, symbols: &[String]) -> Result<DatasetStats> {
    let mut s = DatasetStats::empty(k, item.k, symbols.to_vec());
    let m = item.len();
    let ke = effective_k(k, m);
    if ke == 0 {
        return Ok(s);
    }
    let lists = knn_graph(&item.coords, ke)?;
    for (i, ns) in lists.iter().enumerate() {
        let kd = ns.iter().map(|&j| dist2(&item.coords[i], &item.coords[j])).sum::<f64>() / ke as f64;
        s.knn_dist.push(kd);
    }
    if !item.is_typed() {
        return Ok(s);
    }
    let types = item.type_indices()?;
    let x = &item.coords;
    let edges = undirected_edges(&lists);
    for &(i, j) in &edges {
        s.knn_length.entry(pair_key(types[i], types[j])).or_default().push(dist2(&x[i], &x[j]).sqrt());
    }
    for (i, j, kk) in angle_triples(&adjacency(m, &edges)) {
        let a = angle(&x[i], &x[j], &x[kk])?;
        s.knn_angle.entry(triple_key(types[i], types[j], types[kk])).or_default().push(a);
    }
    if let Some(tables) = tables {
        let bonds = infer_bonds(x, &types, tables)?;
        for &(i, j) in &bonds {
            s.bond_length.entry(pair_key(types[i], types[j])).or_default().push(dist2(&x[i], &x[j]).sqrt());
        }
        for (i, j, kk) in angle_triples(&adjacency(m, &bonds)) {
            let a = angle(&x[i], &x[j], &x[kk])?;
            s.bond_angle.entry(triple_key(types[i], types[j], types[kk])).or_default().push(a);
        }
    }
    Ok(s)
}

/// Statistics over a dataset of rounded point sets.
///
/// Items are processed in parallel and merged in dataset order. Items with
/// fewer than `K + 1` points use `m - 1` neighbours. Bond statistics need
/// `tables`; untyped clouds only contribute the pooled knn distance.
pub fn extract_stats(dataset: &[MarkedPointSet], k: usize, tables: Option<&AtomTables>) -> Result<DatasetStats> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::domain("extract_stats needs a nonempty dataset"))?;
    if k == 0 {
        return Err(Error::domain("K must be at least 1"));
    }
    let type_count = first.k;
    if dataset.iter().any(|d| d.k != type_count) {
        return Err(Error::domain("dataset mixes different type counts"));
    }
    let symbols = match tables {
        Some(t) if type_count > 0 => {
            if t.len() != type_count {
                return Err(Error::Table(format!(
                    "tables list {} types but the data has {type_count} channels",
                    t.len()
                )));
            }
            t.symbols()
        }
        _ => Vec::new(),
    };
    let parts = dataset
        .par_iter()
        .map(|item| item_stats(item, k, tables, &symbols))
        .collect::<Result<Vec<_>>>()?;
    let mut out = DatasetStats::empty(k, type_count, symbols);
    for p in &parts {
        out.merge(p);
    }
    Ok(out)
}
