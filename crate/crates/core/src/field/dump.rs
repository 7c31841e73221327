//! `EGSF` binary grid dump.
//!
//! Layout, little-endian:
//!
//! ```text
//! b"EGSF" | version u16 | nx ny nz u32 | origin 3 x f64 | voxel_size f64
//! labels u8 x N (x fastest) | d_occ f32 x N | d_trust f32 x N | d_unk f32 x N
//! ```
//!
//! Gradients are not stored; they are rebuilt from the loaded distances.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::distance::{DistanceFieldSet, FieldBundle};
use super::partition::{Dims, GridFrame, Label, VoxelPartition};

pub const MAGIC: &[u8; 4] = b"EGSF";
pub const VERSION: u16 = 1;

pub fn write_egsf(bundle: &FieldBundle, mut w: impl Write) -> Result<()> {
    let frame = bundle.partition.frame;
    let d = frame.dims;
    let mut buf = Vec::with_capacity(48 + d.len() * 13);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for n in [d.nx, d.ny, d.nz] {
        let n = u32::try_from(n).map_err(|_| Error::Format("grid dimension exceeds u32".into()))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    for c in frame.origin.to_array() {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    buf.extend_from_slice(&frame.voxel_size.to_le_bytes());
    buf.extend(bundle.partition.labels.iter().map(|l| l.code()));
    let f = &bundle.fields;
    for grid in [&f.d_occ, &f.d_trust, &f.d_unk] {
        for &v in grid.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Load a dump. Distances come back as the stored `f32` values widened to
/// `f64`.
pub fn read_egsf(mut r: impl Read) -> Result<FieldBundle> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(c.array()?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut n = [0usize; 3];
    for v in &mut n {
        *v = u32::from_le_bytes(c.array()?) as usize;
    }
    let dims = Dims::new(n[0], n[1], n[2]);
    if dims.is_empty() {
        return Err(Error::Format("empty grid".into()));
    }
    let mut o = [0.0f64; 3];
    for v in &mut o {
        *v = f64::from_le_bytes(c.array()?);
    }
    let voxel_size = f64::from_le_bytes(c.array()?);
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Format("non-positive voxel size".into()));
    }
    let frame = GridFrame { origin: Vec3::from(o), voxel_size, dims };

    let labels = c
        .take(dims.len())?
        .iter()
        .map(|&b| Label::from_code(b).ok_or_else(|| Error::Format(format!("bad label code {b}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut grid = || -> Result<Vec<f64>> {
        let raw = c.take(dims.len() * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect())
    };
    let d_occ = grid()?;
    let d_trust = grid()?;
    let d_unk = grid()?;
    if c.pos != data.len() {
        return Err(Error::Format("trailing bytes after grids".into()));
    }
    let no_evidence = labels.iter().all(|&l| l == Label::Unk);
    let partition = VoxelPartition { frame, labels, no_evidence };
    let fields = DistanceFieldSet::from_distances(frame, d_occ, d_trust, d_unk);
    Ok(FieldBundle { partition, fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::PointCloud;
    use crate::math::Aabb;

    fn sample_bundle() -> FieldBundle {
        let frame = GridFrame::new(Aabb::new(Vec3::new(-1.0, 0.5, 2.0), Vec3::new(2.0, 2.5, 3.0)), 0.25).unwrap();
        let mut part = VoxelPartition::filled(frame, Label::Unk);
        for idx in 0..frame.dims.len() {
            let [i, j, k] = frame.dims.coords(idx);
            if i > 3 && j < 5 {
                part.set(i, j, k, Label::Free);
            }
        }
        part.set(4, 2, 1, Label::Occ);
        let cloud = PointCloud { points: vec![frame.center(4, 2, 1), Vec3::new(0.31, 1.0, 2.6)] };
        FieldBundle::new(part, &cloud)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let b = sample_bundle();
        let mut bytes = Vec::new();
        write_egsf(&b, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"EGSF");
        let back = read_egsf(bytes.as_slice()).unwrap();
        assert_eq!(back.partition.labels, b.partition.labels);
        assert_eq!(back.partition.frame, b.partition.frame);
        for (x, y) in back.fields.d_trust.iter().zip(&b.fields.d_trust) {
            assert_eq!(x.to_bits(), (*y as f32 as f64).to_bits());
        }
        let mut again = Vec::new();
        write_egsf(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn truncated_and_corrupt_rejected() {
        let mut bytes = Vec::new();
        write_egsf(&sample_bundle(), &mut bytes).unwrap();
        assert!(read_egsf(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_egsf(bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[50] = 9; // first label byte
        assert!(read_egsf(bad.as_slice()).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(read_egsf(long.as_slice()).is_err());
    }
}
