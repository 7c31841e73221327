use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lidar::{RayOutcome, SensorScan};
use crate::math::{Aabb, Vec3};

/// Tri-state voxel label. Codes are part of the on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Occ = 1,
    Free = 2,
    Unk = 3,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Label> {
        match c {
            1 => Some(Label::Occ),
            2 => Some(Label::Free),
            3 => Some(Label::Unk),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Occ => "OCC",
            Label::Free => "FREE",
            Label::Unk => "UNK",
        }
    }
}

/// Dense grid shape; storage is x-fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis(&self, a: usize) -> usize {
        [self.nx, self.ny, self.nz][a]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        let k = idx / (self.nx * self.ny);
        [i, j, k]
    }
}

/// Regular grid geometry shared by the partition and the distance grids.
/// Voxel `(i, j, k)` spans `origin + [i, i+1) * voxel_size` and its value
/// node sits at the voxel center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: Dims,
}

impl GridFrame {
    pub fn new(bounds: Aabb, voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("voxel_size must be positive, got {voxel_size}")));
        }
        let ext = bounds.extent();
        let mut n = [0usize; 3];
        for a in 0..3 {
            if !(ext[a] > 0.0 && ext[a].is_finite()) {
                return Err(Error::InvalidArgument("bounds are degenerate".into()));
            }
            let cells = ext[a] / voxel_size;
            let r = cells.round();
            n[a] = if (cells - r).abs() < 1e-9 * r.max(1.0) { r } else { cells.ceil() } as usize;
            n[a] = n[a].max(1);
        }
        Ok(GridFrame { origin: bounds.min, voxel_size, dims: Dims::new(n[0], n[1], n[2]) })
    }

    pub fn bounds(&self) -> Aabb {
        let d = self.dims;
        let max = self.origin
            + Vec3::new(d.nx as f64, d.ny as f64, d.nz as f64) * self.voxel_size;
        Aabb::new(self.origin, max)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    /// Containing voxel (floor); points on the upper domain face map to the
    /// last voxel. `None` outside the grid.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.voxel_size;
            let n = self.dims.axis(a);
            if !(u >= 0.0 && u <= n as f64) {
                return None;
            }
            out[a] = (u.floor() as usize).min(n - 1);
        }
        Some(out)
    }

    /// Containing voxel after clamping `p` into the grid.
    pub fn voxel_of_clamped(&self, p: Vec3) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let u = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            let n = self.dims.axis(a) as f64;
            out[a] = u.clamp(0.0, n - 1.0) as usize;
        }
        out
    }

    /// Amanatides-Woo traversal of the segment `a -> b`, clipped to the grid.
    /// Visits voxels in order; stops at the voxel containing `b`, which is
    /// visited only when `include_end` is set.
    pub fn walk_segment(&self, a: Vec3, b: Vec3, include_end: bool, mut visit: impl FnMut([usize; 3])) {
        let d = b - a;
        let Some((t0, t1)) = clip_segment(self.bounds(), a, d) else { return };
        let vs = self.voxel_size;
        let n = [self.dims.nx as i64, self.dims.ny as i64, self.dims.nz as i64];

        let end: [i64; 3] = std::array::from_fn(|ax| ((b[ax] - self.origin[ax]) / vs).floor() as i64);
        let entry = a + d * t0;
        let mut cell: [i64; 3] = std::array::from_fn(|ax| {
            (((entry[ax] - self.origin[ax]) / vs).floor() as i64).clamp(0, n[ax] - 1)
        });

        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for ax in 0..3 {
            if d[ax] > 0.0 {
                step[ax] = 1;
                let boundary = self.origin[ax] + (cell[ax] + 1) as f64 * vs;
                t_max[ax] = (boundary - a[ax]) / d[ax];
                t_delta[ax] = vs / d[ax];
            } else if d[ax] < 0.0 {
                step[ax] = -1;
                let boundary = self.origin[ax] + cell[ax] as f64 * vs;
                t_max[ax] = (boundary - a[ax]) / d[ax];
                t_delta[ax] = -vs / d[ax];
            }
        }

        loop {
            if cell == end {
                if include_end {
                    visit([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
                }
                return;
            }
            visit([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
            let ax = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[ax] > t1 {
                return;
            }
            cell[ax] += step[ax];
            if cell[ax] < 0 || cell[ax] >= n[ax] {
                return;
            }
            t_max[ax] += t_delta[ax];
        }
    }
}

/// Parameter interval of `a + t d`, `t in [0, 1]`, inside `bounds`.
fn clip_segment(bounds: Aabb, a: Vec3, d: Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for ax in 0..3 {
        if d[ax] == 0.0 {
            if a[ax] < bounds.min[ax] || a[ax] > bounds.max[ax] {
                return None;
            }
            continue;
        }
        let mut lo = (bounds.min[ax] - a[ax]) / d[ax];
        let mut hi = (bounds.max[ax] - a[ax]) / d[ax];
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelPartition {
    pub frame: GridFrame,
    pub labels: Vec<Label>,
    /// Set when the partition was carved from zero rays.
    pub no_evidence: bool,
}

impl VoxelPartition {
    pub fn filled(frame: GridFrame, label: Label) -> Self {
        VoxelPartition { frame, labels: vec![label; frame.dims.len()], no_evidence: false }
    }

    pub fn dims(&self) -> Dims {
        self.frame.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.frame.voxel_size
    }

    pub fn label(&self, i: usize, j: usize, k: usize) -> Label {
        self.labels[self.frame.dims.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: Label) {
        let idx = self.frame.dims.index(i, j, k);
        self.labels[idx] = l;
    }

    /// Label of the voxel containing `p` (clamped into the grid).
    pub fn label_at(&self, p: Vec3) -> Label {
        let [i, j, k] = self.frame.voxel_of_clamped(p);
        self.label(i, j, k)
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0usize; 3];
        for l in &self.labels {
            c[*l as usize - 1] += 1;
        }
        c
    }

    pub fn mask(&self, f: impl Fn(Label) -> bool) -> Vec<bool> {
        self.labels.iter().map(|&l| f(l)).collect()
    }
}

/// Ray carving: voxels crossed by a ray before its hit voxel (or up to
/// `max_range` for misses) become FREE, voxels holding a hit point become
/// OCC, everything else stays UNK. OCC wins over FREE.
pub fn carve(scans: &[SensorScan], bounds: Aabb, voxel_size: f64) -> Result<VoxelPartition> {
    let frame = GridFrame::new(bounds, voxel_size)?;
    let mut part = VoxelPartition::filled(frame, Label::Unk);
    let n_rays: usize = scans.iter().map(|s| s.rays.len()).sum();
    if n_rays == 0 {
        log::warn!("carve: no rays, partition is entirely UNK");
        part.no_evidence = true;
        return Ok(part);
    }
    let dims = frame.dims;
    for s in scans {
        for r in &s.rays {
            let end = r.end_point(s.origin);
            let is_hit = matches!(r.outcome, RayOutcome::Hit { .. });
            frame.walk_segment(s.origin, end, !is_hit, |[i, j, k]| {
                part.labels[dims.index(i, j, k)] = Label::Free;
            });
        }
    }
    for s in scans {
        for p in s.hits() {
            if let Some([i, j, k]) = frame.voxel_of(p) {
                part.labels[dims.index(i, j, k)] = Label::Occ;
            }
        }
    }
    Ok(part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::RayRecord;

    fn cube(n: f64) -> Aabb {
        Aabb::new(Vec3::ZERO, Vec3::new(n, n, n))
    }

    fn hit_scan(origin: Vec3, hit: Vec3) -> SensorScan {
        SensorScan {
            origin,
            rays: vec![RayRecord { dir: (hit - origin).normalized(), outcome: RayOutcome::Hit { point: hit } }],
        }
    }

    #[test]
    fn single_axis_ray() {
        let scan = hit_scan(Vec3::new(0.5, 0.5, 0.5), Vec3::new(10.5, 0.5, 0.5));
        let p = carve(&[scan], cube(12.0), 1.0).unwrap();
        for i in 0..10 {
            assert_eq!(p.label(i, 0, 0), Label::Free, "voxel {i}");
        }
        assert_eq!(p.label(10, 0, 0), Label::Occ);
        assert_eq!(p.label(11, 0, 0), Label::Unk);
        assert_eq!(p.label(3, 1, 0), Label::Unk);
        assert_eq!(p.counts(), [1, 10, 12 * 12 * 12 - 11]);
    }

    #[test]
    fn no_scans_all_unknown() {
        let p = carve(&[], cube(4.0), 1.0).unwrap();
        assert!(p.no_evidence);
        assert!(p.labels.iter().all(|&l| l == Label::Unk));
    }

    #[test]
    fn occupied_beats_free() {
        let through = SensorScan {
            origin: Vec3::new(0.5, 2.5, 0.5),
            rays: vec![RayRecord {
                dir: Vec3::new(1.0, 0.0, 0.0),
                outcome: RayOutcome::Miss { max_range: 7.0 },
            }],
        };
        let hit = hit_scan(Vec3::new(3.5, 0.5, 0.5), Vec3::new(3.5, 2.5, 0.5));
        for order in [vec![through.clone(), hit.clone()], vec![hit, through]] {
            let p = carve(&order, cube(8.0), 1.0).unwrap();
            assert_eq!(p.label(3, 2, 0), Label::Occ);
            assert_eq!(p.label(2, 2, 0), Label::Free);
            assert_eq!(p.label(7, 2, 0), Label::Free);
        }
    }

    #[test]
    fn miss_carves_to_max_range() {
        let scan = SensorScan {
            origin: Vec3::new(0.5, 0.5, 0.5),
            rays: vec![RayRecord { dir: Vec3::new(1.0, 0.0, 0.0), outcome: RayOutcome::Miss { max_range: 4.0 } }],
        };
        let p = carve(&[scan], cube(8.0), 1.0).unwrap();
        for i in 0..=4 {
            assert_eq!(p.label(i, 0, 0), Label::Free);
        }
        assert_eq!(p.label(5, 0, 0), Label::Unk);
    }

    #[test]
    fn walk_is_face_connected() {
        let frame = GridFrame::new(cube(10.0), 0.5).unwrap();
        let mut cells = Vec::new();
        frame.walk_segment(Vec3::new(0.3, 0.2, 9.1), Vec3::new(9.7, 8.9, 0.4), true, |c| cells.push(c));
        assert_eq!(cells.first(), Some(&[0, 0, 18]));
        assert_eq!(cells.last(), Some(&[19, 17, 0]));
        for w in cells.windows(2) {
            let dist: usize = (0..3).map(|a| w[0][a].abs_diff(w[1][a])).sum();
            assert_eq!(dist, 1);
        }
    }

    #[test]
    fn segment_outside_grid_visits_nothing() {
        let frame = GridFrame::new(cube(4.0), 1.0).unwrap();
        let mut n = 0;
        frame.walk_segment(Vec3::new(-3.0, -1.0, 0.5), Vec3::new(-1.0, 5.0, 0.5), true, |_| n += 1);
        assert_eq!(n, 0);
    }

    #[test]
    fn bad_voxel_size_rejected() {
        assert!(carve(&[], cube(4.0), 0.0).is_err());
        assert!(carve(&[], cube(4.0), -1.0).is_err());
    }
}
