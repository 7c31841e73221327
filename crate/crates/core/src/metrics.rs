//! Geometric metric suite over a particle set and force-norm statistics.

use std::fmt::Write as _;

use crate::energy::EnergyParams;
use crate::error::{Error, Result};
use crate::field::{edt, FieldBundle, Label, Stencil, EMPTY_MASK_DISTANCE};
use crate::particles::ParticleSet;
use crate::relax::evaluate;

pub const REPORT_HEADER: &str = "leak_pct,occcov_pct,margin_m,thick_m,num_alive,force_mean,force_p50,force_p95,force_max";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForceStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub leak_pct: f64,
    pub occcov_pct: f64,
    pub margin_m: f64,
    pub thick_m: f64,
    pub num_alive: usize,
    pub force: ForceStats,
    /// No alive particles; every rate is reported as 0.
    pub empty: bool,
    /// The partition has no OCC voxel; `occcov_pct` is meaningless.
    pub occcov_undefined: bool,
    /// The partition has no FREE voxel; `margin_m` is meaningless.
    pub margin_undefined: bool,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let f = &self.force;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.leak_pct, self.occcov_pct, self.margin_m, self.thick_m, self.num_alive, f.mean, f.p50, f.p95, f.max
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn force_stats(norms: impl IntoIterator<Item = f64>) -> ForceStats {
    let mut v: Vec<f64> = norms.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return ForceStats::default();
    }
    v.sort_by(f64::total_cmp);
    ForceStats {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p50: percentile(&v, 50.0),
        p95: percentile(&v, 95.0),
        max: v[v.len() - 1],
    }
}

/// Force norm per particle, 0 for dead ones.
pub fn force_norms(particles: &ParticleSet, bundle: &FieldBundle, params: &EnergyParams) -> Result<Vec<f64>> {
    Ok(evaluate(particles, bundle, params)?
        .into_iter()
        .map(|s| s.map_or(0.0, |s| s.force.norm()))
        .collect())
}

/// Metrics of the alive particles. `force_norms` is indexed like the
/// particle set; entries of dead particles are ignored.
pub fn compute_metrics(particles: &ParticleSet, bundle: &FieldBundle, force_norms: &[f64]) -> Result<MetricsReport> {
    if force_norms.len() != particles.len() {
        return Err(Error::InvalidArgument("force_norms length differs from particle count".into()));
    }
    let part = &bundle.partition;
    let frame = part.frame;
    let dims = frame.dims;
    let counts = part.counts();
    let (n_occ, n_free) = (counts[0], counts[1]);

    let mut report = MetricsReport {
        occcov_undefined: n_occ == 0,
        margin_undefined: n_free == 0,
        ..MetricsReport::default()
    };
    let alive: Vec<usize> = (0..particles.len()).filter(|&i| particles.alive[i]).collect();
    report.num_alive = alive.len();
    if alive.is_empty() {
        report.empty = true;
        return Ok(report);
    }

    let to_free = if n_free > 0 { edt(part, |l| l == Label::Free) } else { Vec::new() };
    let mut covered = vec![false; dims.len()];
    let mut leak = 0usize;
    let (mut margin_sum, mut margin_n) = (0.0, 0usize);
    let (mut thick_sum, mut thick_n) = (0.0, 0usize);
    for &i in &alive {
        let [a, b, c] = frame.voxel_of_clamped(particles.positions[i]);
        let idx = dims.index(a, b, c);
        match part.labels[idx] {
            Label::Free => leak += 1,
            Label::Occ => {
                covered[idx] = true;
                thick_sum += Stencil::new(&frame, particles.positions[i]).scalar(&bundle.fields.d_occ);
                thick_n += 1;
                if n_free > 0 {
                    margin_sum += to_free[idx];
                    margin_n += 1;
                }
            }
            Label::Unk => {
                if n_free > 0 {
                    margin_sum += to_free[idx];
                    margin_n += 1;
                }
            }
        }
    }
    let n = alive.len() as f64;
    report.leak_pct = 100.0 * leak as f64 / n;
    if n_occ > 0 {
        report.occcov_pct = 100.0 * covered.iter().filter(|&&c| c).count() as f64 / n_occ as f64;
    }
    if margin_n > 0 {
        report.margin_m = margin_sum / margin_n as f64;
    }
    if thick_n > 0 && bundle.fields.occ_active {
        let mean = thick_sum / thick_n as f64;
        report.thick_m = if mean < EMPTY_MASK_DISTANCE { 2.0 * mean } else { 0.0 };
    }
    report.force = force_stats(alive.iter().map(|&i| force_norms[i]));
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_left(&self, i: usize) -> f64 {
        i as f64 * self.bin_width
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{}", self.bin_left(i), c);
        }
        s
    }
}

/// Histogram of force norms over alive particles, `bins` uniform bins on
/// `[0, max]`; the maximum lands in the last bin.
pub fn force_norm_histogram(particles: &ParticleSet, force_norms: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be at least 1".into()));
    }
    let values: Vec<f64> = (0..particles.len())
        .filter(|&i| particles.alive[i] && force_norms[i].is_finite())
        .map(|i| force_norms[i])
        .collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut counts = vec![0; bins];
    if max == 0.0 {
        counts[0] = values.len();
        return Ok(Histogram { bin_width: 0.0, counts });
    }
    let width = max / bins as f64;
    for v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { bin_width: width, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridFrame, VoxelPartition};
    use crate::lidar::PointCloud;
    use crate::math::{Aabb, Vec3};

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    fn slab() -> FieldBundle {
        let frame = GridFrame::new(Aabb::new(Vec3::ZERO, Vec3::new(2.0, 2.0, 2.0)), 0.5).unwrap();
        let mut part = VoxelPartition::filled(frame, Label::Unk);
        for j in 0..4 {
            for k in 0..4 {
                part.set(0, j, k, Label::Free);
                part.set(1, j, k, Label::Occ);
            }
        }
        let cloud = PointCloud { points: vec![frame.center(1, 1, 1)] };
        FieldBundle::new(part, &cloud)
    }

    #[test]
    fn leak_counts_free_voxels() {
        let b = slab();
        let f = b.frame();
        let mut pts = vec![f.center(0, 0, 0), f.center(0, 1, 0), f.center(0, 2, 3)];
        pts.extend((0..7).map(|i| f.center(3, i % 4, 0)));
        let ps = ParticleSet::new(pts);
        let r = compute_metrics(&ps, &b, &[0.0; 10]).unwrap();
        assert_eq!(r.leak_pct, 30.0);
        assert_eq!(r.num_alive, 10);
    }

    #[test]
    fn empty_and_undefined_flags() {
        let b = slab();
        let mut ps = ParticleSet::new(vec![Vec3::new(1.0, 1.0, 1.0)]);
        ps.alive[0] = false;
        let r = compute_metrics(&ps, &b, &[0.0]).unwrap();
        assert!(r.empty);
        assert_eq!((r.leak_pct, r.occcov_pct, r.num_alive), (0.0, 0.0, 0));
        assert!(r.to_csv().starts_with(REPORT_HEADER));

        let frame = *b.frame();
        let unk = FieldBundle::new(VoxelPartition::filled(frame, Label::Unk), &PointCloud::default());
        let r = compute_metrics(&ParticleSet::new(vec![Vec3::new(1.0, 1.0, 1.0)]), &unk, &[0.0]).unwrap();
        assert!(r.occcov_undefined && r.margin_undefined && !r.empty);
    }

    #[test]
    fn permutation_invariant() {
        let b = slab();
        let ps = crate::particles::init_uniform_in_domain(&b, 40, 1);
        let norms = force_norms(&ps, &b, &EnergyParams::default()).unwrap();
        let r = compute_metrics(&ps, &b, &norms).unwrap();
        let mut pos = ps.positions.clone();
        let mut nn = norms.clone();
        pos.reverse();
        nn.reverse();
        let r2 = compute_metrics(&ParticleSet::new(pos), &b, &nn).unwrap();
        assert_eq!(r.leak_pct, r2.leak_pct);
        assert_eq!(r.occcov_pct, r2.occcov_pct);
        assert!((r.margin_m - r2.margin_m).abs() < 1e-12);
        assert!((r.force.mean - r2.force.mean).abs() < 1e-12);
        assert_eq!(r.force.p95, r2.force.p95);
    }

    #[test]
    fn histogram_spike_and_edges() {
        let ps = ParticleSet::new(vec![Vec3::ZERO; 5]);
        let h = force_norm_histogram(&ps, &[0.0; 5], 4).unwrap();
        assert_eq!(h.counts, vec![5, 0, 0, 0]);
        let h = force_norm_histogram(&ps, &[0.0, 1.0, 2.0, 3.0, 4.0], 4).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert_eq!(h.bin_left(3), 3.0);
        assert!(h.to_csv().starts_with("bin_left,count\n0,1\n"));
        assert!(force_norm_histogram(&ps, &[0.0; 5], 0).is_err());
    }
}
