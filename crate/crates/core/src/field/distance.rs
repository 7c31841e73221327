use crate::error::{Error, Result};
use crate::lidar::PointCloud;
use crate::math::Vec3;

use super::edt::{edt_mask, EMPTY_MASK_DISTANCE};
use super::partition::{Dims, GridFrame, Label, VoxelPartition};

/// Per-regime distance grids and their central-difference gradients.
///
/// * `d_occ`: distance to the nearest voxel holding a LiDAR point.
/// * `d_trust`: penetration depth into FREE (distance to the nearest
///   non-FREE voxel), zero outside FREE.
/// * `d_unk`: distance to the nearest UNK voxel, zero inside UNK.
///
/// Gradients are dimensionless (meters per meter).
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceFieldSet {
    pub frame: GridFrame,
    pub d_occ: Vec<f64>,
    pub d_trust: Vec<f64>,
    pub d_unk: Vec<f64>,
    pub grad_occ: Vec<Vec3>,
    pub grad_trust: Vec<Vec3>,
    pub grad_unk: Vec<Vec3>,
    /// False when the point cloud was empty; the occupancy term is then off.
    pub occ_active: bool,
}

impl DistanceFieldSet {
    /// Assemble from distance grids, deriving the gradient grids.
    pub fn from_distances(frame: GridFrame, d_occ: Vec<f64>, d_trust: Vec<f64>, d_unk: Vec<f64>) -> Self {
        let grad_occ = central_gradient(frame, &d_occ);
        let grad_trust = central_gradient(frame, &d_trust);
        let grad_unk = central_gradient(frame, &d_unk);
        let occ_active = d_occ.iter().any(|&d| d < EMPTY_MASK_DISTANCE);
        DistanceFieldSet { frame, d_occ, d_trust, d_unk, grad_occ, grad_trust, grad_unk, occ_active }
    }
}

/// Build all three distance grids for a partition and its point cloud.
/// Points outside the grid are ignored.
pub fn build_distance_fields(partition: &VoxelPartition, cloud: &PointCloud) -> DistanceFieldSet {
    let frame = partition.frame;
    let dims = frame.dims;
    let vs = frame.voxel_size;

    let mut occ_mask = vec![false; dims.len()];
    for p in &cloud.points {
        if let Some([i, j, k]) = frame.voxel_of(*p) {
            occ_mask[dims.index(i, j, k)] = true;
        }
    }
    if cloud.is_empty() {
        log::warn!("empty point cloud: occupancy attraction disabled");
    }
    let d_occ = edt_mask(dims, &occ_mask, vs);

    let mut d_trust = edt_mask(dims, &partition.mask(|l| l != Label::Free), vs);
    for (d, &l) in d_trust.iter_mut().zip(&partition.labels) {
        if l != Label::Free {
            *d = 0.0;
        }
    }
    let mut d_unk = edt_mask(dims, &partition.mask(|l| l == Label::Unk), vs);
    for (d, &l) in d_unk.iter_mut().zip(&partition.labels) {
        if l == Label::Unk {
            *d = 0.0;
        }
    }
    DistanceFieldSet::from_distances(frame, d_occ, d_trust, d_unk)
}

/// Central differences in the interior, one-sided on the faces, divided by
/// the voxel size. A field that is entirely sentinel has zero gradient.
pub fn central_gradient(frame: GridFrame, d: &[f64]) -> Vec<Vec3> {
    let dims = frame.dims;
    if d.iter().all(|&x| x >= EMPTY_MASK_DISTANCE) {
        return vec![Vec3::ZERO; dims.len()];
    }
    let vs = frame.voxel_size;
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let mut out = vec![Vec3::ZERO; dims.len()];
    for (idx, g) in out.iter_mut().enumerate() {
        let c = dims.coords(idx);
        for a in 0..3 {
            let n = dims.axis(a);
            if n < 2 {
                continue;
            }
            let s = strides[a];
            g[a] = if c[a] == 0 {
                (d[idx + s] - d[idx]) / vs
            } else if c[a] == n - 1 {
                (d[idx] - d[idx - s]) / vs
            } else {
                (d[idx + s] - d[idx - s]) / (2.0 * vs)
            };
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldQueryResult {
    pub label: Label,
    pub d_occ: f64,
    pub d_trust: f64,
    pub d_unk: f64,
    pub grad_occ: Vec3,
    pub grad_trust: Vec3,
    pub grad_unk: Vec3,
    /// The position was outside the domain and has been clamped.
    pub clamped: bool,
}

/// Eight trilinear corner indices and weights for a position.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Stencil {
    /// Nodes sit at voxel centers; positions within half a voxel of the
    /// domain faces reuse the outermost node values.
    pub fn new(frame: &GridFrame, p: Vec3) -> Stencil {
        let dims = frame.dims;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = dims.axis(a);
            let u = (p[a] - frame.origin[a]) / frame.voxel_size - 0.5;
            if n == 1 {
                continue;
            }
            let base = u.floor().clamp(0.0, (n - 2) as f64);
            lo[a] = base as usize;
            hi[a] = lo[a] + 1;
            t[a] = (u - base).clamp(0.0, 1.0);
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for c in 0..8 {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let i = if bx == 1 { hi[0] } else { lo[0] };
            let j = if by == 1 { hi[1] } else { lo[1] };
            let k = if bz == 1 { hi[2] } else { lo[2] };
            idx[c] = dims.index(i, j, k);
            let wx = if bx == 1 { t[0] } else { 1.0 - t[0] };
            let wy = if by == 1 { t[1] } else { 1.0 - t[1] };
            let wz = if bz == 1 { t[2] } else { 1.0 - t[2] };
            w[c] = wx * wy * wz;
        }
        Stencil { idx, w }
    }

    #[inline]
    pub fn scalar(&self, grid: &[f64]) -> f64 {
        let mut s = 0.0;
        for c in 0..8 {
            s += self.w[c] * grid[self.idx[c]];
        }
        s
    }

    #[inline]
    pub fn vector(&self, grid: &[Vec3]) -> Vec3 {
        let mut s = Vec3::ZERO;
        for c in 0..8 {
            s += grid[self.idx[c]] * self.w[c];
        }
        s
    }
}

/// Exact gradient of the trilinear interpolant of `grid` at `p`, in units of
/// grid value per meter. Zero along axes where the position is clamped to
/// the outermost node or the grid has a single node.
pub fn interpolant_gradient(frame: &GridFrame, grid: &[f64], p: Vec3) -> Vec3 {
    let dims = frame.dims;
    let mut lo = [0usize; 3];
    let mut t = [0.0f64; 3];
    let mut live = [false; 3];
    for a in 0..3 {
        let n = dims.axis(a);
        if n == 1 {
            continue;
        }
        let u = (p[a] - frame.origin[a]) / frame.voxel_size - 0.5;
        let base = u.floor().clamp(0.0, (n - 2) as f64);
        lo[a] = base as usize;
        t[a] = (u - base).clamp(0.0, 1.0);
        live[a] = u > 0.0 && u < (n - 1) as f64;
    }
    let mut g = Vec3::ZERO;
    for c in 0..8usize {
        let b = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let node = |a: usize| if dims.axis(a) == 1 { 0 } else { lo[a] + b[a] };
        let v = grid[dims.index(node(0), node(1), node(2))];
        let w = |a: usize| if b[a] == 1 { t[a] } else { 1.0 - t[a] };
        let dw = |a: usize| {
            if !live[a] {
                0.0
            } else if b[a] == 1 {
                1.0
            } else {
                -1.0
            }
        };
        g.x += v * dw(0) * w(1) * w(2);
        g.y += v * w(0) * dw(1) * w(2);
        g.z += v * w(0) * w(1) * dw(2);
    }
    g * (1.0 / frame.voxel_size)
}

/// A carved partition with its distance grids: everything the energy and
/// relaxation code needs. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBundle {
    pub partition: VoxelPartition,
    pub fields: DistanceFieldSet,
}

impl FieldBundle {
    pub fn new(partition: VoxelPartition, cloud: &PointCloud) -> Self {
        let fields = build_distance_fields(&partition, cloud);
        FieldBundle { partition, fields }
    }

    pub fn frame(&self) -> &GridFrame {
        &self.partition.frame
    }

    pub fn dims(&self) -> Dims {
        self.partition.dims()
    }

    pub fn voxel_size(&self) -> f64 {
        self.partition.voxel_size()
    }

    pub fn query(&self, pos: Vec3) -> Result<FieldQueryResult> {
        query(&self.fields, &self.partition, pos)
    }

    /// Region code of the containing voxel (1 = OCC, 2 = FREE, 3 = UNK).
    pub fn query_region(&self, pos: Vec3) -> Label {
        self.partition.label_at(pos)
    }

    pub fn d_trust_at(&self, pos: Vec3) -> f64 {
        let p = self.partition.frame.bounds().clamp(pos);
        Stencil::new(&self.partition.frame, p).scalar(&self.fields.d_trust)
    }
}

/// Trilinear query of all distances and gradients; the region label comes
/// from the containing voxel and is never interpolated.
pub fn query(fields: &DistanceFieldSet, partition: &VoxelPartition, pos: Vec3) -> Result<FieldQueryResult> {
    if !pos.is_finite() {
        return Err(Error::NonFinitePosition);
    }
    let bounds = partition.frame.bounds();
    let p = bounds.clamp(pos);
    let clamped = p != pos;
    let st = Stencil::new(&fields.frame, p);
    Ok(FieldQueryResult {
        label: partition.label_at(p),
        d_occ: st.scalar(&fields.d_occ),
        d_trust: st.scalar(&fields.d_trust),
        d_unk: st.scalar(&fields.d_unk),
        grad_occ: st.vector(&fields.grad_occ),
        grad_trust: st.vector(&fields.grad_trust),
        grad_unk: st.vector(&fields.grad_unk),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Aabb;

    fn frame(n: usize, vs: f64) -> GridFrame {
        GridFrame::new(Aabb::new(Vec3::ZERO, Vec3::new(n as f64, n as f64, n as f64) * vs), vs).unwrap()
    }

    #[test]
    fn point_at_voxel_center() {
        let f = frame(5, 0.5);
        let part = VoxelPartition::filled(f, Label::Unk);
        let cloud = PointCloud { points: vec![f.center(2, 2, 2)] };
        let fs = build_distance_fields(&part, &cloud);
        let d = f.dims;
        assert_eq!(fs.d_occ[d.index(2, 2, 2)], 0.0);
        assert_eq!(fs.d_occ[d.index(3, 2, 2)], 0.5);
        assert!(fs.occ_active);
    }

    #[test]
    fn free_slab_depth_and_gradient_sign() {
        // FREE for x in 2..=6: the center plane x = 4 is three voxel steps
        // from the nearest non-FREE center.
        let f = frame(9, 0.25);
        let mut part = VoxelPartition::filled(f, Label::Occ);
        let d = f.dims;
        for k in 0..9 {
            for j in 0..9 {
                for i in 2..=6 {
                    part.set(i, j, k, Label::Free);
                }
            }
        }
        let fs = build_distance_fields(&part, &PointCloud::default());
        assert_eq!(fs.d_trust[d.index(4, 4, 4)], 3.0 * 0.25);
        assert_eq!(fs.d_trust[d.index(0, 4, 4)], 0.0);
        // just inside the lower wall, depth grows with x
        assert!(fs.grad_trust[d.index(2, 4, 4)].x > 0.0);
        assert!(fs.grad_trust[d.index(6, 4, 4)].x < 0.0);
        assert!(!fs.occ_active);
        assert!(fs.d_occ.iter().all(|&x| x == EMPTY_MASK_DISTANCE));
        assert!(fs.grad_occ.iter().all(|g| *g == Vec3::ZERO));
    }

    #[test]
    fn trust_support_is_free_set() {
        let f = frame(6, 1.0);
        let mut part = VoxelPartition::filled(f, Label::Unk);
        for idx in [3usize, 10, 11, 50, 51, 52, 100] {
            let [i, j, k] = f.dims.coords(idx);
            part.set(i, j, k, Label::Free);
        }
        let fs = build_distance_fields(&part, &PointCloud::default());
        for (d, l) in fs.d_trust.iter().zip(&part.labels) {
            assert_eq!(*d > 0.0, *l == Label::Free);
        }
        for (d, l) in fs.d_unk.iter().zip(&part.labels) {
            assert_eq!(*d == 0.0, *l == Label::Unk);
        }
    }

    #[test]
    fn query_at_node_and_midpoint() {
        let f = frame(4, 0.5);
        let n = f.dims.len();
        let d_occ: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let fs = DistanceFieldSet::from_distances(f, d_occ.clone(), vec![0.0; n], vec![0.0; n]);
        let part = VoxelPartition::filled(f, Label::Occ);
        let q = query(&fs, &part, f.center(1, 2, 1)).unwrap();
        assert_eq!(q.d_occ, d_occ[f.dims.index(1, 2, 1)]);
        let mid = (f.center(1, 2, 1) + f.center(2, 2, 1)) * 0.5;
        let q = query(&fs, &part, mid).unwrap();
        let want = 0.5 * (d_occ[f.dims.index(1, 2, 1)] + d_occ[f.dims.index(2, 2, 1)]);
        assert!((q.d_occ - want).abs() < 1e-15);
        assert!(!q.clamped);
    }

    #[test]
    fn query_clamps_and_rejects_nan() {
        let f = frame(4, 1.0);
        let part = VoxelPartition::filled(f, Label::Free);
        let fs = build_distance_fields(&part, &PointCloud::default());
        let q = query(&fs, &part, Vec3::new(-3.0, 1.0, 9.0)).unwrap();
        assert!(q.clamped);
        assert_eq!(q.label, Label::Free);
        assert!(matches!(query(&fs, &part, Vec3::new(f64::NAN, 0.0, 0.0)), Err(Error::NonFinitePosition)));
    }

    #[test]
    fn label_is_nearest_cell() {
        let f = frame(2, 1.0);
        let mut part = VoxelPartition::filled(f, Label::Unk);
        part.set(1, 0, 0, Label::Free);
        let fs = build_distance_fields(&part, &PointCloud::default());
        assert_eq!(query(&fs, &part, Vec3::new(0.999, 0.5, 0.5)).unwrap().label, Label::Unk);
        assert_eq!(query(&fs, &part, Vec3::new(1.0, 0.5, 0.5)).unwrap().label, Label::Free);
    }

    #[test]
    fn interpolant_gradient_matches_difference() {
        let f = frame(6, 0.5);
        let grid: Vec<f64> = (0..f.dims.len()).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let p = Vec3::new(1.13, 1.71, 0.92);
        let g = interpolant_gradient(&f, &grid, p);
        let h = 1e-6;
        for a in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[a] += h;
            pm[a] -= h;
            let fd = (Stencil::new(&f, pp).scalar(&grid) - Stencil::new(&f, pm).scalar(&grid)) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
        }
    }
}
