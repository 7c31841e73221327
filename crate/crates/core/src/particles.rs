use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{FieldBundle, Label};
use crate::lidar::PointCloud;
use crate::math::Vec3;

/// Particle positions standing in for Gaussian means, with a scalar payload
/// standing in for appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    pub positions: Vec<Vec3>,
    pub alive: Vec<bool>,
    pub tracked: Vec<usize>,
    pub payload: Vec<f64>,
}

impl ParticleSet {
    pub fn new(positions: Vec<Vec3>) -> Self {
        let n = positions.len();
        ParticleSet { positions, alive: vec![true; n], tracked: Vec::new(), payload: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.positions.iter().zip(&self.alive).filter(|(_, &a)| a).map(|(p, _)| *p)
    }

    /// Track the first `n` particles.
    pub fn track_first(mut self, n: usize) -> Self {
        self.tracked = (0..n.min(self.len())).collect();
        self
    }

    /// Alive particles as `x y z` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# x y z (alive particles)\n");
        for p in self.alive_positions() {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }
        s
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` LiDAR points drawn with replacement, or every point when `n` is `None`.
pub fn init_on_points(cloud: &PointCloud, n: Option<usize>, seed: u64) -> Result<ParticleSet> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("point cloud has no points"));
    }
    let positions = match n {
        None => cloud.points.clone(),
        Some(n) => {
            let mut r = rng(seed);
            (0..n).map(|_| cloud.points[r.random_range(0..cloud.len())]).collect()
        }
    };
    Ok(ParticleSet::new(positions))
}

/// Uniform samples inside the domain.
pub fn init_uniform_in_domain(bundle: &FieldBundle, n: usize, seed: u64) -> ParticleSet {
    let b = bundle.frame().bounds();
    let e = b.extent();
    let mut r = rng(seed);
    let positions = (0..n)
        .map(|_| b.min + Vec3::new(r.random::<f64>() * e.x, r.random::<f64>() * e.y, r.random::<f64>() * e.z))
        .collect();
    ParticleSet::new(positions)
}

/// Uniform samples restricted to voxels with the given label (rejection
/// sampling on the containing voxel).
pub fn init_uniform_in_label(bundle: &FieldBundle, label: Label, n: usize, seed: u64) -> Result<ParticleSet> {
    if n > 0 && !bundle.partition.labels.contains(&label) {
        return Err(Error::EmptyInput("no voxel carries the requested label"));
    }
    let b = bundle.frame().bounds();
    let e = b.extent();
    let mut r = rng(seed);
    let mut positions = Vec::with_capacity(n);
    while positions.len() < n {
        let p = b.min + Vec3::new(r.random::<f64>() * e.x, r.random::<f64>() * e.y, r.random::<f64>() * e.z);
        if bundle.query_region(p) == label {
            positions.push(p);
        }
    }
    Ok(ParticleSet::new(positions))
}

pub fn init_uniform_in_free(bundle: &FieldBundle, n: usize, seed: u64) -> Result<ParticleSet> {
    init_uniform_in_label(bundle, Label::Free, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridFrame, VoxelPartition};
    use crate::math::Aabb;

    #[test]
    fn uniform_in_free_lands_in_free() {
        let frame = GridFrame::new(Aabb::new(Vec3::ZERO, Vec3::new(2.0, 2.0, 2.0)), 0.5).unwrap();
        let mut part = VoxelPartition::filled(frame, Label::Unk);
        part.set(1, 2, 3, Label::Free);
        let bundle = FieldBundle::new(part, &PointCloud::default());
        let ps = init_uniform_in_free(&bundle, 50, 3).unwrap();
        assert_eq!(ps.len(), 50);
        assert!(ps.positions.iter().all(|&p| bundle.query_region(p) == Label::Free));
        assert_eq!(init_uniform_in_free(&bundle, 50, 3).unwrap(), ps);
        assert!(init_uniform_in_label(&bundle, Label::Occ, 1, 0).is_err());
        assert!(init_uniform_in_label(&bundle, Label::Occ, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn text_lists_alive_only() {
        let mut ps = ParticleSet::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.5)]);
        ps.alive[0] = false;
        let back = PointCloud::from_reader(ps.to_text().as_bytes()).unwrap();
        assert_eq!(back.points, vec![Vec3::new(4.0, 5.0, 6.5)]);
    }
}
