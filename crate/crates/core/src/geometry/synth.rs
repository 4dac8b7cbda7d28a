//! Synthetic point-cloud datasets.

use std::f64::consts::PI;

use super::{MarkedPointSet, Vec3};
use crate::error::Result;
use crate::rng;

/// `n` points drawn uniformly on the sphere of `radius`.
pub fn sphere_cloud(n: usize, radius: f64, seed: u64) -> Result<MarkedPointSet> {
    let mut r = rng::stream(seed, 0);
    let coords = (0..n)
        .map(|_| loop {
            let v: Vec3 = [0.0; 3].map(|_: f64| rng::standard_normal(&mut r));
            let l = super::norm(&v);
            if l > 1e-12 {
                break v.map(|c| radius * c / l);
            }
        })
        .collect();
    MarkedPointSet::untyped(coords)
}

/// `n` evenly spaced points on the circle of `radius` in the `xy` plane,
/// rotated by a random phase.
pub fn circle_cloud(n: usize, radius: f64, seed: u64) -> Result<MarkedPointSet> {
    let mut r = rng::stream(seed, 0);
    let phase: f64 = 2.0 * PI * rand::Rng::random::<f64>(&mut r);
    let coords = (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / n as f64;
            [radius * a.cos(), radius * a.sin(), 0.0]
        })
        .collect();
    MarkedPointSet::untyped(coords)
}

/// Items `sphere_cloud(n, radius, seed + i)` for `i < count`.
pub fn sphere_dataset(count: usize, n: usize, radius: f64, seed: u64) -> Result<Vec<MarkedPointSet>> {
    (0..count as u64).map(|i| sphere_cloud(n, radius, seed + i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_lie_on_their_shapes() {
        let s = sphere_cloud(50, 2.0, 1).unwrap();
        assert!(s.coords.iter().all(|p| (super::super::norm(p) - 2.0).abs() < 1e-12));
        let c = circle_cloud(16, 1.0, 2).unwrap();
        assert!(c.coords.iter().all(|p| (p[0].hypot(p[1]) - 1.0).abs() < 1e-12 && p[2] == 0.0));
        assert_eq!(sphere_dataset(3, 10, 1.0, 5).unwrap()[1], sphere_cloud(10, 1.0, 6).unwrap());
    }
}
