//! Exact Euclidean distance transform on voxel centers.
//!
//! Separable lower-envelope-of-parabolas squared distance transform, one
//! 1-D pass per axis. Squared distances are integers in voxel units and
//! stay exact in `f64`, so the result matches a brute-force search bit for
//! bit.

use super::partition::{Dims, Label, VoxelPartition};

/// Distance reported everywhere when the target mask is empty (meters).
pub const EMPTY_MASK_DISTANCE: f64 = 1e9;

/// Stand-in for "infinitely far" inside the squared transform. Finite so
/// that parabola intersections never produce `inf - inf`.
const FAR: f64 = 1e20;
const FAR_CUTOFF: f64 = 1e19;

/// 1-D squared distance transform of the sampled function `f`.
fn dt1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        // z[0] is -inf, so the pop loop always terminates at k = 0
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared distances (voxel units) from every voxel center to the nearest
/// masked voxel center. Entries at or above `1e19` mean "no target".
pub fn squared_edt(dims: Dims, mask: &[bool]) -> Vec<f64> {
    assert_eq!(mask.len(), dims.len(), "mask length does not match grid");
    let mut g: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();
    let nmax = dims.nx.max(dims.ny).max(dims.nz);
    let mut line = vec![0.0; nmax];
    let mut out = vec![0.0; nmax];
    let mut v = vec![0usize; nmax];
    let mut z = vec![0.0; nmax + 1];

    for axis in 0..3 {
        let n = dims.axis(axis);
        let stride = match axis {
            0 => 1,
            1 => dims.nx,
            _ => dims.nx * dims.ny,
        };
        for base in 0..dims.len() {
            // visit each line once, from its first element
            if (base / stride) % n != 0 {
                continue;
            }
            for q in 0..n {
                line[q] = g[base + q * stride];
            }
            dt1d(&line[..n], &mut out[..n], &mut v, &mut z);
            for q in 0..n {
                g[base + q * stride] = out[q];
            }
        }
    }
    g
}

/// Euclidean distance (meters) from each voxel center to the nearest
/// masked voxel center; [`EMPTY_MASK_DISTANCE`] when the mask is empty.
pub fn edt_mask(dims: Dims, mask: &[bool], voxel_size: f64) -> Vec<f64> {
    squared_edt(dims, mask)
        .into_iter()
        .map(|sq| if sq >= FAR_CUTOFF { EMPTY_MASK_DISTANCE } else { sq.sqrt() * voxel_size })
        .collect()
}

/// EDT to the voxels whose label satisfies `target`.
pub fn edt(partition: &VoxelPartition, target: impl Fn(Label) -> bool) -> Vec<f64> {
    let mask = partition.mask(target);
    edt_mask(partition.dims(), &mask, partition.voxel_size())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(dims: Dims, mask: &[bool], vs: f64) -> Vec<f64> {
        let targets: Vec<[usize; 3]> = (0..dims.len()).filter(|&i| mask[i]).map(|i| dims.coords(i)).collect();
        (0..dims.len())
            .map(|i| {
                let c = dims.coords(i);
                targets
                    .iter()
                    .map(|t| {
                        (0..3)
                            .map(|a| {
                                let d = c[a] as i64 - t[a] as i64;
                                (d * d) as u64
                            })
                            .sum::<u64>()
                    })
                    .min()
                    .map_or(EMPTY_MASK_DISTANCE, |sq| (sq as f64).sqrt() * vs)
            })
            .collect()
    }

    #[test]
    fn single_voxel_two_away() {
        let dims = Dims::new(5, 1, 1);
        let mut mask = vec![false; 5];
        mask[0] = true;
        let d = edt_mask(dims, &mask, 0.5);
        assert_eq!(d[2], 1.0);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn empty_mask_is_sentinel() {
        let dims = Dims::new(3, 4, 2);
        let d = edt_mask(dims, &vec![false; dims.len()], 0.25);
        assert!(d.iter().all(|&x| x == EMPTY_MASK_DISTANCE));
    }

    #[test]
    fn random_8_cubed_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = Dims::new(8, 8, 8);
        for _ in 0..5 {
            let mask: Vec<bool> = (0..dims.len()).map(|_| rng.random::<f64>() < 0.1).collect();
            assert_eq!(edt_mask(dims, &mask, 0.3), brute(dims, &mask, 0.3));
        }
    }

    #[test]
    fn anisotropic_dims_and_single_target() {
        let dims = Dims::new(3, 7, 2);
        let mut mask = vec![false; dims.len()];
        mask[dims.index(2, 6, 1)] = true;
        assert_eq!(edt_mask(dims, &mask, 1.0), brute(dims, &mask, 1.0));
    }

    proptest::proptest! {
        #[test]
        fn separable_equals_brute(nx in 1usize..7, ny in 1usize..7, nz in 1usize..7,
                                  seed in 0u64..1000, density in 0.0f64..0.5) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::new(nx, ny, nz);
            let mask: Vec<bool> = (0..dims.len()).map(|_| rng.random::<f64>() < density).collect();
            proptest::prop_assert_eq!(edt_mask(dims, &mask, 0.25), brute(dims, &mask, 0.25));
        }
    }
}
