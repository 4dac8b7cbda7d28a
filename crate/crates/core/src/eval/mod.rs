//! Sampling from a trained drift and evaluating the samples.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{atom_stability, io, molecule_stable, AtomTables, MarkedPointSet, Vec3};
use crate::model::Checkpoint;
use crate::rng;
use crate::sde::{integrate, make_grid, EmOptions};

pub mod metrics;

pub use metrics::{chamfer, emd, emd_resampled, mmd_cov, uniformity_stats, uniqueness, CloudMetric};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub items: Vec<MarkedPointSet>,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_fingerprint: String,
    /// Per item, the state at every grid time (types unrounded).
    pub trajectories: Option<Vec<Vec<MarkedPointSet>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub n_items: usize,
    pub m_points: usize,
    pub steps: usize,
    pub seed: u64,
    pub keep_trajectories: bool,
}

/// Integrates the checkpoint's drift from `N(0, beta_T I)` over a uniform
/// `steps` grid. Item `i` uses stream `(seed, i)`.
pub fn sample(ckpt: &Checkpoint, opts: SampleOptions) -> Result<SampleBatch> {
    if opts.n_items == 0 || opts.m_points == 0 {
        return Err(Error::Config("sample count and point count must be positive".into()));
    }
    let model = ckpt.model()?;
    let k = model.features.type_channels;
    let ts = model.features.type_scale;
    let dim = opts.m_points * (3 + k);
    let grid = make_grid(opts.steps, model.horizon())?;
    let sd = model.schedule.beta_total().sqrt();
    let results: Vec<Result<(MarkedPointSet, Option<Vec<MarkedPointSet>>)>> = (0..opts.n_items)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(opts.seed, i as u64);
            let mut z0 = vec![0.0; dim];
            rng::fill_standard_normal(&mut r, &mut z0);
            z0.iter_mut().for_each(|v| *v *= sd);
            let mut frames = Vec::new();
            let end = integrate(&model, &model.schedule, &z0, &grid, &mut r, EmOptions::default(), |_, _, z| {
                if opts.keep_trajectories {
                    frames.push(z.to_vec());
                }
            })?;
            let mut set = MarkedPointSet::from_state(&end, k, ts)?;
            if k > 0 {
                set = set.rounded()?;
            }
            let traj = if opts.keep_trajectories {
                Some(
                    frames
                        .iter()
                        .map(|z| MarkedPointSet::from_state(z, k, ts))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok((set, traj))
        })
        .collect();
    let mut items = Vec::with_capacity(opts.n_items);
    let mut trajs = Vec::new();
    for r in results {
        let (s, t) = r?;
        items.push(s);
        if let Some(t) = t {
            trajs.push(t);
        }
    }
    Ok(SampleBatch {
        items,
        steps: opts.steps,
        seed: opts.seed,
        checkpoint_fingerprint: ckpt.fingerprint(),
        trajectories: opts.keep_trajectories.then_some(trajs),
    })
}

/// Writes `sample_XXXX.xyz` per item (`sample_XXXX.txt` rows for untyped
/// clouds) and, when kept, `trajectories/traj_XXXX.xyz` with one frame per
/// grid time.
pub fn write_batch(batch: &SampleBatch, dir: &Path, symbols: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, item) in batch.items.iter().enumerate() {
        if item.is_typed() {
            let comment = format!("sample {i} steps={} seed={}", batch.steps, batch.seed);
            io::write_xyz(&dir.join(format!("sample_{i:04}.xyz")), item, symbols, &comment)?;
        } else {
            io::write_cloud_rows(&dir.join(format!("sample_{i:04}.txt")), item)?;
        }
    }
    if let Some(trajs) = &batch.trajectories {
        let tdir = dir.join("trajectories");
        std::fs::create_dir_all(&tdir)?;
        for (i, frames) in trajs.iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(tdir.join(format!("traj_{i:04}.xyz")))?);
            for (s, frame) in frames.iter().enumerate() {
                let shown = if frame.is_typed() { frame.rounded()? } else { frame.clone() };
                io::write_xyz_frame(&mut f, &shown, symbols, &format!("step {s}"))?;
            }
            f.flush()?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_generated: usize,
    pub n_reference: usize,
    pub mmd_cd: f64,
    pub cov_cd: f64,
    pub mmd_emd: f64,
    pub cov_emd: f64,
    pub atom_stability: Option<f64>,
    pub mol_stability: Option<f64>,
    /// Averages over generated clouds of the per-cloud knn-dist mean and
    /// variance; absent when no cloud has more than `knn_k` points.
    pub knn_dist_mean: Option<f64>,
    pub knn_dist_var: Option<f64>,
    pub knn_k: usize,
    pub uniqueness: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub knn_k: usize,
    pub emd: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { knn_k: 4, emd: true }
    }
}

/// Mean and variance knn-dist averaged over clouds with more than `k` points.
pub fn batch_uniformity(clouds: &[Vec<Vec3>], k: usize) -> Result<Option<(f64, f64)>> {
    let stats: Vec<(f64, f64)> = clouds
        .par_iter()
        .filter(|c| c.len() > k)
        .map(|c| uniformity_stats(c, k))
        .collect::<Result<_>>()?;
    if stats.is_empty() {
        return Ok(None);
    }
    let n = stats.len() as f64;
    Ok(Some((
        stats.iter().map(|s| s.0).sum::<f64>() / n,
        stats.iter().map(|s| s.1).sum::<f64>() / n,
    )))
}

/// All metrics of `generated` against `reference`. Molecule metrics need
/// typed items and `tables`.
pub fn evaluate(
    generated: &[MarkedPointSet],
    reference: &[MarkedPointSet],
    tables: Option<&AtomTables>,
    opts: EvalOptions,
) -> Result<MetricReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::domain("evaluation needs nonempty generated and reference sets"));
    }
    let gen: Vec<Vec<Vec3>> = generated.iter().map(|s| s.centered().coords).collect();
    let refs: Vec<Vec<Vec3>> = reference.iter().map(|s| s.centered().coords).collect();
    let (mmd_cd, cov_cd) = mmd_cov(&gen, &refs, CloudMetric::Chamfer)?;
    let (mmd_emd, cov_emd) = if opts.emd {
        mmd_cov(&gen, &refs, CloudMetric::Emd)?
    } else {
        (f64::NAN, f64::NAN)
    };
    let uni = batch_uniformity(&gen, opts.knn_k)?;
    let (mut atom_stab, mut mol_stab, mut uniq) = (None, None, None);
    if let Some(t) = tables.filter(|_| generated.iter().all(MarkedPointSet::is_typed)) {
        let mut stable_atoms = 0.0;
        let mut atoms = 0usize;
        let mut stable_mols = 0usize;
        for mol in generated {
            stable_atoms += atom_stability(mol, t)? * mol.len() as f64;
            atoms += mol.len();
            stable_mols += usize::from(molecule_stable(mol, t)?);
        }
        atom_stab = Some(stable_atoms / atoms as f64);
        mol_stab = Some(stable_mols as f64 / generated.len() as f64);
        uniq = Some(uniqueness(generated, t)?);
    }
    Ok(MetricReport {
        n_generated: generated.len(),
        n_reference: reference.len(),
        mmd_cd,
        cov_cd,
        mmd_emd,
        cov_emd,
        atom_stability: atom_stab,
        mol_stability: mol_stab,
        knn_dist_mean: uni.map(|u| u.0),
        knn_dist_var: uni.map(|u| u.1),
        knn_k: opts.knn_k,
        uniqueness: uniq,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "{:<18} {}", "generated", self.n_generated)?;
        writeln!(f, "{:<18} {}", "reference", self.n_reference)?;
        writeln!(f, "{:<18} {:.6e}", "MMD-CD", self.mmd_cd)?;
        writeln!(f, "{:<18} {:.4}", "COV-CD", self.cov_cd)?;
        writeln!(f, "{:<18} {:.6e}", "MMD-EMD", self.mmd_emd)?;
        writeln!(f, "{:<18} {:.4}", "COV-EMD", self.cov_emd)?;
        writeln!(f, "{:<18} {}", "atom stability", opt(self.atom_stability))?;
        writeln!(f, "{:<18} {}", "mol stability", opt(self.mol_stability))?;
        writeln!(f, "{:<18} {}", format!("knn-dist mean K={}", self.knn_k), opt(self.knn_dist_mean))?;
        writeln!(f, "{:<18} {}", "knn-dist var", opt(self.knn_dist_var))?;
        write!(f, "{:<18} {}", "uniqueness", opt(self.uniqueness))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MarkedPointSet;
    use crate::model::train::initial_model;
    use crate::model::{AlphaMode, TrainConfig};

    fn zero_checkpoint() -> Checkpoint {
        let data = vec![MarkedPointSet::untyped(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap()];
        let cfg = TrainConfig {
            hidden: 4,
            depth: 1,
            alpha_mode: AlphaMode::Learnable { init: 0.0 },
            ..TrainConfig::default()
        };
        let m = initial_model(&cfg, &data, None).unwrap();
        Checkpoint::from_model(&m, &cfg).unwrap()
    }

    #[test]
    fn one_step_with_zero_drift_returns_start_draws() {
        let ck = zero_checkpoint();
        let opts = SampleOptions {
            n_items: 3,
            m_points: 5,
            steps: 1,
            seed: 4,
            keep_trajectories: true,
        };
        let batch = sample(&ck, opts).unwrap();
        let sd = ck.schedule.beta_total().sqrt();
        for (i, item) in batch.items.iter().enumerate() {
            let mut r = rng::stream(4, i as u64);
            let mut z = vec![0.0; 15];
            rng::fill_standard_normal(&mut r, &mut z);
            let flat: Vec<f64> = item.coords.iter().flatten().copied().collect();
            let expect: Vec<f64> = z.iter().map(|v| v * sd).collect();
            assert_eq!(flat, expect);
        }
        assert_eq!(batch.trajectories.as_ref().unwrap()[0].len(), 2);
    }

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let ck = zero_checkpoint();
        let opts = SampleOptions {
            n_items: 4,
            m_points: 6,
            steps: 10,
            seed: 1,
            keep_trajectories: false,
        };
        assert_eq!(sample(&ck, opts).unwrap(), sample(&ck, opts).unwrap());
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let mut r = rng::stream(3, 0);
        let sets: Vec<MarkedPointSet> = (0..4)
            .map(|_| {
                MarkedPointSet::untyped((0..8).map(|_| [0.0; 3].map(|_: f64| rng::standard_normal(&mut r))).collect())
                    .unwrap()
            })
            .collect();
        let rep = evaluate(&sets, &sets, None, EvalOptions::default()).unwrap();
        assert_eq!((rep.mmd_cd, rep.cov_cd, rep.mmd_emd, rep.cov_emd), (0.0, 1.0, 0.0, 1.0));
        assert!(rep.knn_dist_var.unwrap() > 0.0);
        assert!(rep.atom_stability.is_none());
        let back: MetricReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        assert!(rep.to_string().contains("COV-CD"));
    }
}
