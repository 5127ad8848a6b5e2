//! Binary lattice formats.
//!
//! `.vxg` (dense): `"VXG1"`, then `u32` LE `H, W, D, C`, then `H*W*D*C` LE
//! `f32` values, voxel-major with `x` fastest and channels contiguous.
//!
//! `.vxs` (sparse): `"VXS1"`, `u32` LE `N, C, count`, then `count` records of
//! `u16 x, u16 y, u16 z, u16 pad(=0)` followed by `C` LE `f32` features, in
//! canonical coordinate order.
//!
//! In-memory values are `f64`; they are narrowed to `f32` on write, so a
//! write/read cycle is bit-exact for `f32`-representable payloads. Non-finite
//! values are rejected in both directions.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lattice::{Coord, DenseLatentGrid, Dims, SparseLatentSet};

pub const VXG_MAGIC: &[u8; 4] = b"VXG1";
pub const VXS_MAGIC: &[u8; 4] = b"VXS1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite value at byte {}", self.pos - 4)));
        }
        Ok(v)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn narrow(v: f64) -> Result<f32> {
    let x = v as f32;
    if !x.is_finite() {
        return Err(Error::Format(format!("value {v} does not fit in f32")));
    }
    Ok(x)
}

pub fn encode_vxg(grid: &DenseLatentGrid) -> Result<Vec<u8>> {
    let d = grid.dims();
    let mut out = Vec::with_capacity(20 + grid.values().len() * 4);
    out.extend_from_slice(VXG_MAGIC);
    for v in [d.h, d.w, d.d, grid.channels()] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("extent {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in grid.values() {
        out.extend_from_slice(&narrow(*v)?.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vxg(bytes: &[u8]) -> Result<DenseLatentGrid> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != VXG_MAGIC {
        return Err(Error::Format("bad .vxg magic".into()));
    }
    let (h, w, d, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let count = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::Format("value count overflows".into()))?;
    if count.checked_mul(4) != Some(r.remaining()) {
        return Err(Error::Format(format!(
            "header {h}x{w}x{d}x{c} needs {} payload bytes, found {}",
            count.saturating_mul(4),
            r.remaining()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f32()? as f64);
    }
    r.finish()?;
    DenseLatentGrid::new(Dims::new(h, w, d), c, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_vxs(set: &SparseLatentSet) -> Result<Vec<u8>> {
    let c = set.channels();
    let mut out = Vec::with_capacity(16 + set.len() * (8 + 4 * c));
    out.extend_from_slice(VXS_MAGIC);
    for v in [set.resolution(), c, set.len()] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("field {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (row, coord) in set.coords().iter().enumerate() {
        for k in coord {
            out.extend_from_slice(&k.to_le_bytes());
        }
        out.extend_from_slice(&0u16.to_le_bytes());
        for v in set.feature(row) {
            out.extend_from_slice(&narrow(*v)?.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_vxs(bytes: &[u8]) -> Result<SparseLatentSet> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != VXS_MAGIC {
        return Err(Error::Format("bad .vxs magic".into()));
    }
    let (n, c, count) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let record = c
        .checked_mul(4)
        .and_then(|x| x.checked_add(8))
        .ok_or_else(|| Error::Format("record size overflows".into()))?;
    if count.checked_mul(record) != Some(r.remaining()) {
        return Err(Error::Format(format!(
            "{count} records of {record} bytes do not match {} payload bytes",
            r.remaining()
        )));
    }
    let mut coords: Vec<Coord> = Vec::with_capacity(count);
    let mut feats = Vec::with_capacity(count * c);
    for _ in 0..count {
        let coord = [r.u16()?, r.u16()?, r.u16()?];
        if r.u16()? != 0 {
            return Err(Error::Format(format!("non-zero pad in record {coord:?}")));
        }
        coords.push(coord);
        for _ in 0..c {
            feats.push(r.f32()? as f64);
        }
    }
    r.finish()?;
    SparseLatentSet::new(n, c, coords, feats).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_vxg(path: impl AsRef<Path>, grid: &DenseLatentGrid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_vxg(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_vxg(path: impl AsRef<Path>) -> Result<DenseLatentGrid> {
    let path = path.as_ref();
    decode_vxg(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_vxs(path: impl AsRef<Path>, set: &SparseLatentSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_vxs(set)?).map_err(|e| Error::io(path, e))
}

pub fn read_vxs(path: impl AsRef<Path>) -> Result<SparseLatentSet> {
    let path = path.as_ref();
    decode_vxs(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vxg_layout_is_little_endian_x_fastest() {
        let g = DenseLatentGrid::new(Dims::new(2, 1, 1), 1, vec![1.0, 2.0]).unwrap();
        let b = encode_vxg(&g).unwrap();
        assert_eq!(&b[..4], b"VXG1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[24..28], &2.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn vxs_record_layout() {
        let s = SparseLatentSet::new(4, 1, vec![[1, 2, 3]], vec![0.5]).unwrap();
        let b = encode_vxs(&s).unwrap();
        assert_eq!(&b[..4], b"VXS1");
        assert_eq!(b.len(), 16 + 12);
        assert_eq!(&b[16..18], &1u16.to_le_bytes());
        assert_eq!(&b[22..24], &[0, 0]);
        assert_eq!(&b[24..28], &0.5f32.to_le_bytes());
    }

    #[test]
    fn decode_rejects_nan_truncation_and_bad_order() {
        let g = DenseLatentGrid::new(Dims::new(1, 1, 1), 1, vec![1.0]).unwrap();
        let mut b = encode_vxg(&g).unwrap();
        b[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_vxg(&b), Err(Error::Format(_))));
        assert!(decode_vxg(&b[..22]).is_err());
        assert!(decode_vxg(b"VXG1").is_err());

        let s = SparseLatentSet::new(4, 1, vec![[0, 0, 1], [0, 0, 2]], vec![0.0, 0.0]).unwrap();
        let mut b = encode_vxs(&s).unwrap();
        // swap z of the two records
        b[20] = 2;
        b[32] = 1;
        assert!(decode_vxs(&b).is_err());
    }

    #[test]
    fn encode_rejects_values_beyond_f32() {
        let g = DenseLatentGrid::new(Dims::new(1, 1, 1), 1, vec![1e300]).unwrap();
        assert!(encode_vxg(&g).is_err());
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut b = b"VXG1".to_vec();
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode_vxg(&b).is_err());
    }

    proptest! {
        #[test]
        fn vxg_roundtrip_is_bitwise(h in 1usize..5, w in 1usize..5, d in 1usize..5, c in 1usize..4,
                                    seed in proptest::collection::vec(any::<f32>(), 400)) {
            let n = h * w * d * c;
            let values: Vec<f64> = seed.iter().cycle().take(n)
                .map(|v| if v.is_finite() { *v as f64 } else { 0.0 }).collect();
            let g = DenseLatentGrid::new(Dims::new(h, w, d), c, values).unwrap();
            let bytes = encode_vxg(&g).unwrap();
            let back = decode_vxg(&bytes).unwrap();
            prop_assert_eq!(encode_vxg(&back).unwrap(), bytes);
            prop_assert!(back.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn vxs_roundtrip_is_bitwise(coords in proptest::collection::btree_set((0u16..9, 0u16..9, 0u16..9), 0..40),
                                    feats in proptest::collection::vec(-1e6f32..1e6, 120)) {
            let coords: Vec<Coord> = coords.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let values: Vec<f64> = feats.iter().cycle().take(coords.len() * 3).map(|v| *v as f64).collect();
            let s = SparseLatentSet::new(9, 3, coords, values).unwrap();
            let back = decode_vxs(&encode_vxs(&s).unwrap()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
