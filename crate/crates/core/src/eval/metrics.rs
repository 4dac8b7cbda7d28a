//! Cloud distances, set-level MMD/COV, knn-dist uniformity and a
//! bond-graph uniqueness proxy.

use std::collections::BTreeSet;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, infer_bonds, knn_graph, AtomTables, MarkedPointSet, Vec3};
use crate::rng;

fn require_nonempty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("distance between empty clouds"));
    }
    Ok(())
}

fn nearest_mean(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Mean squared nearest-neighbour distance from `a` to `b` plus the same
/// from `b` to `a`.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    require_nonempty(a, b)?;
    Ok(nearest_mean(a, b) + nearest_mean(b, a))
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // potentials u (rows), v (columns); column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Earth mover's distance between equal-size clouds: mean Euclidean
/// distance under the optimal one-to-one matching.
pub fn emd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    require_nonempty(a, b)?;
    if a.len() != b.len() {
        return Err(Error::domain(format!("emd needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| dist2(p, q).sqrt()))
        .collect();
    let assign = hungarian(&cost, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// [`emd`] after subsampling the larger cloud to the smaller size without
/// replacement (stream keyed by `seed`).
pub fn emd_resampled(a: &[Vec3], b: &[Vec3], seed: u64) -> Result<f64> {
    require_nonempty(a, b)?;
    let n = a.len().min(b.len());
    let pick = |c: &[Vec3]| -> Vec<Vec3> {
        if c.len() == n {
            return c.to_vec();
        }
        let mut r = rng::stream(seed, c.len() as u64);
        let mut idx = index::sample(&mut r, c.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| c[i]).collect()
    };
    emd(&pick(a), &pick(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudMetric {
    Chamfer,
    Emd,
}

impl CloudMetric {
    pub fn distance(&self, a: &[Vec3], b: &[Vec3]) -> Result<f64> {
        match self {
            CloudMetric::Chamfer => chamfer(a, b),
            CloudMetric::Emd => emd_resampled(a, b, 0),
        }
    }
}

/// Pairwise distances `d[r][g]` between reference and generated clouds.
pub fn distance_matrix(generated: &[Vec<Vec3>], reference: &[Vec<Vec3>], metric: CloudMetric) -> Result<Vec<Vec<f64>>> {
    reference
        .par_iter()
        .map(|r| generated.iter().map(|g| metric.distance(r, g)).collect())
        .collect()
}

/// `(MMD, COV)`.
///
/// MMD is the mean over reference clouds of the distance to the closest
/// generated cloud. COV is the fraction of reference clouds that are the
/// closest reference (lowest index on ties) of at least one generated cloud.
pub fn mmd_cov(generated: &[Vec<Vec3>], reference: &[Vec<Vec3>], metric: CloudMetric) -> Result<(f64, f64)> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::domain("mmd/cov needs nonempty generated and reference sets"));
    }
    let d = distance_matrix(generated, reference, metric)?;
    Ok(mmd_cov_from_matrix(&d))
}

pub fn mmd_cov_from_matrix(d: &[Vec<f64>]) -> (f64, f64) {
    let nr = d.len();
    let ng = d[0].len();
    let mmd = d.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).sum::<f64>() / nr as f64;
    let mut covered = vec![false; nr];
    for g in 0..ng {
        let mut best = 0;
        for r in 1..nr {
            if d[r][g] < d[best][g] {
                best = r;
            }
        }
        covered[best] = true;
    }
    let cov = covered.iter().filter(|&&c| c).count() as f64 / nr as f64;
    (mmd, cov)
}

/// Per-point knn-dist (mean squared distance to the `k` nearest
/// neighbours): `(mean, population variance)` over the cloud.
pub fn uniformity_stats(cloud: &[Vec3], k: usize) -> Result<(f64, f64)> {
    let lists = knn_graph(cloud, k)?;
    let kd: Vec<f64> = lists
        .iter()
        .enumerate()
        .map(|(i, ns)| ns.iter().map(|&j| dist2(&cloud[i], &cloud[j])).sum::<f64>() / ns.len() as f64)
        .collect();
    let n = kd.len() as f64;
    let mean = kd.iter().sum::<f64>() / n;
    let var = kd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Canonical bond-graph fingerprint: sorted multiset of
/// `(type, sorted neighbour types, degree)`.
pub type Fingerprint = Vec<(usize, Vec<usize>, usize)>;

pub fn fingerprint(mol: &MarkedPointSet, tables: &AtomTables) -> Result<Fingerprint> {
    let types = mol.type_indices()?;
    let bonds = infer_bonds(&mol.coords, &types, tables)?;
    let mut nbrs = vec![Vec::new(); mol.len()];
    for &(i, j) in &bonds {
        nbrs[i].push(types[j]);
        nbrs[j].push(types[i]);
    }
    let mut fp: Fingerprint = nbrs
        .into_iter()
        .enumerate()
        .map(|(i, mut n)| {
            n.sort_unstable();
            let deg = n.len();
            (types[i], n, deg)
        })
        .collect();
    fp.sort();
    Ok(fp)
}

/// Distinct fingerprints divided by the batch size.
pub fn uniqueness(batch: &[MarkedPointSet], tables: &AtomTables) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("uniqueness of an empty batch"));
    }
    let set: BTreeSet<Fingerprint> = batch.iter().map(|m| fingerprint(m, tables)).collect::<Result<_>>()?;
    Ok(set.len() as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut r = rng::stream(seed, 0);
        (0..n)
            .map(|_| [0.0; 3].map(|_: f64| rng::standard_normal(&mut r)))
            .collect()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn chamfer_examples() {
        let a = random_cloud(6, 1);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let d = 1.7;
        let c = chamfer(&[[0.0; 3]], &[[d, 0.0, 0.0]]).unwrap();
        assert!((c - 2.0 * d * d).abs() < 1e-15);
    }

    #[test]
    fn chamfer_matches_double_loop() {
        let a = random_cloud(13, 2);
        let b = random_cloud(9, 3);
        let mut s1 = 0.0;
        for p in &a {
            let mut best = f64::MAX;
            for q in &b {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            s1 += best;
        }
        let mut s2 = 0.0;
        for q in &b {
            let mut best = f64::MAX;
            for p in &a {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            s2 += best;
        }
        let oracle = s1 / 13.0 + s2 / 9.0;
        assert!((chamfer(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn emd_matches_exhaustive_search_on_8_points() {
        for seed in 0..5 {
            let a = random_cloud(8, 10 + seed);
            let b = random_cloud(8, 20 + seed);
            let best = permutations(8)
                .iter()
                .map(|p| {
                    (0..8)
                        .map(|i| {
                            let (x, y) = (a[i], b[p[i]]);
                            ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
                        })
                        .sum::<f64>()
                        / 8.0
                })
                .fold(f64::INFINITY, f64::min);
            let e = emd(&a, &b).unwrap();
            assert!((e - best).abs() < 1e-12, "{e} vs {best}");
        }
    }

    #[test]
    fn emd_examples() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = vec![a[1], a[0]];
        assert_eq!(emd(&a, &b).unwrap(), 0.0);
        assert!(emd(&a, &a[..1]).is_err());
        assert!(emd_resampled(&random_cloud(10, 1), &random_cloud(7, 2), 0).is_ok());
    }

    #[test]
    fn mmd_cov_matches_enumeration_on_5x5() {
        let gen: Vec<Vec<Vec3>> = (0..5).map(|i| random_cloud(6, 100 + i)).collect();
        let refs: Vec<Vec<Vec3>> = (0..5).map(|i| random_cloud(6, 200 + i)).collect();
        for metric in [CloudMetric::Chamfer, CloudMetric::Emd] {
            let (mmd, cov) = mmd_cov(&gen, &refs, metric).unwrap();
            let mut total = 0.0;
            for r in &refs {
                let ds: Vec<f64> = gen.iter().map(|g| metric.distance(r, g).unwrap()).collect();
                total += ds.iter().cloned().fold(f64::INFINITY, f64::min);
            }
            let mut hit = [false; 5];
            for g in &gen {
                let ds: Vec<f64> = refs.iter().map(|r| metric.distance(r, g).unwrap()).collect();
                let mut arg = 0;
                for (i, d) in ds.iter().enumerate() {
                    if *d < ds[arg] {
                        arg = i;
                    }
                }
                hit[arg] = true;
            }
            assert!((mmd - total / 5.0).abs() < 1e-12);
            assert_eq!(cov, hit.iter().filter(|&&h| h).count() as f64 / 5.0);
        }
    }

    #[test]
    fn single_copy_covers_its_reference() {
        let refs: Vec<Vec<Vec3>> = (0..4).map(|i| random_cloud(5, 300 + i)).collect();
        let gen = vec![refs[2].clone()];
        let (_, cov) = mmd_cov(&gen, &refs, CloudMetric::Chamfer).unwrap();
        assert!(cov >= 0.25);
    }

    #[test]
    fn uniformity_grid_and_outlier() {
        let mut grid = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    grid.push([i as f64, j as f64, k as f64]);
                }
            }
        }
        let (mean, var) = uniformity_stats(&grid, 6).unwrap();
        assert!(mean >= 1.0 && var < 0.1);
        let lists = knn_graph(&grid, 6).unwrap();
        let center = 2 * 36 + 2 * 6 + 2;
        let kd: f64 = lists[center].iter().map(|&j| dist2(&grid[center], &grid[j])).sum::<f64>() / 6.0;
        assert_eq!(kd, 1.0);

        let base = random_cloud(30, 5);
        let mut with_outlier = base.clone();
        with_outlier.push([25.0, 0.0, 0.0]);
        assert!(uniformity_stats(&with_outlier, 4).unwrap().1 > uniformity_stats(&base, 4).unwrap().1);
    }

    #[test]
    fn uniformity_matches_brute_force() {
        let c = random_cloud(20, 6);
        let k = 4;
        let mut kd = Vec::new();
        for i in 0..20 {
            let mut ds: Vec<f64> = (0..20).filter(|&j| j != i).map(|j| dist2(&c[i], &c[j])).collect();
            ds.sort_by(f64::total_cmp);
            kd.push(ds[..k].iter().sum::<f64>() / k as f64);
        }
        let mean = kd.iter().sum::<f64>() / 20.0;
        let var = kd.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        let (m, v) = uniformity_stats(&c, k).unwrap();
        assert!((m - mean).abs() < 1e-12 && (v - var).abs() < 1e-12);
    }

    fn water(rot: bool) -> MarkedPointSet {
        let mut coords = vec![[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]];
        if rot {
            for c in coords.iter_mut() {
                *c = [c[1], -c[0], c[2] + 3.0];
            }
        }
        let tables = AtomTables::builtin().select(&["H", "O"]).unwrap();
        MarkedPointSet::one_hot(coords, &[1, 0, 0], tables.len()).unwrap()
    }

    #[test]
    fn uniqueness_examples() {
        let tables = AtomTables::builtin().select(&["H", "O"]).unwrap();
        let same = vec![water(false); 4];
        assert_eq!(uniqueness(&same, &tables).unwrap(), 0.25);
        assert_eq!(fingerprint(&water(false), &tables).unwrap(), fingerprint(&water(true), &tables).unwrap());
        let apart = MarkedPointSet::one_hot(vec![[0.0; 3], [5.0, 0.0, 0.0], [-5.0, 0.0, 0.0]], &[1, 0, 0], 2).unwrap();
        assert_eq!(uniqueness(&[water(false), apart], &tables).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_permutation_invariant(seed in 0u64..1000, n in 2usize..9) {
            let a = random_cloud(n, seed);
            let b = random_cloud(n, seed + 5000);
            let mut ap = a.clone();
            ap.reverse();
            prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((emd(&a, &b).unwrap() - emd(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((chamfer(&ap, &b).unwrap() - chamfer(&a, &b).unwrap()).abs() < 1e-12);
            prop_assert!((emd(&ap, &b).unwrap() - emd(&a, &b).unwrap()).abs() < 1e-12);
            prop_assert!(chamfer(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn mmd_cov_of_a_set_against_itself(seed in 0u64..1000, n in 1usize..6) {
            let xs: Vec<Vec<Vec3>> = (0..n).map(|i| random_cloud(4, seed * 10 + i as u64)).collect();
            prop_assert_eq!(mmd_cov(&xs, &xs, CloudMetric::Chamfer).unwrap(), (0.0, 1.0));
            prop_assert_eq!(mmd_cov(&xs, &xs, CloudMetric::Emd).unwrap(), (0.0, 1.0));
        }
    }
}
