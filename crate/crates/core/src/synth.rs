//! Synthetic assets and edit regions built from short text specs.
//!
//! Shapes: `sphere:cx,cy,cz,r`, `box:x0,y0,z0,x1,y1,z1`,
//! `lshape:x0,y0,z0,x1,y1,z1` (a box without its `+x,+y` quarter) and
//! `union:a|b|...`. Regions: `octant:k` (bit 1 = upper x, 2 = upper y,
//! 4 = upper z), `ball:cx,cy,cz,r`, `slab:axis,lo,hi` and `none`. All
//! lengths are in unit-cube coordinates; a voxel is tested at its centre.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lattice::{surface_voxels, upsample_mask, BinaryMask3D, Coord, DenseLatentGrid, Dims, SparseLatentSet};
use crate::metrics::Axis;
use crate::pipeline::{Asset, ST_CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { lo: [f64; 3], hi: [f64; 3] },
    LShape { lo: [f64; 3], hi: [f64; 3] },
    Union(Vec<Shape>),
}

fn numbers(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{what}: cannot parse numbers in {s:?}")))?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{what}: expected {n} finite numbers, got {s:?}")));
    }
    Ok(v)
}

fn corners(v: &[f64], what: &str) -> Result<([f64; 3], [f64; 3])> {
    let lo = [v[0], v[1], v[2]];
    let hi = [v[3], v[4], v[5]];
    if (0..3).any(|a| lo[a] > hi[a]) {
        return Err(Error::Config(format!("{what}: lower corner above upper corner")));
    }
    Ok((lo, hi))
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("shape {s:?} needs kind:params")))?;
        match kind {
            "sphere" => {
                let v = numbers(args, 4, "sphere")?;
                if v[3] < 0.0 {
                    return Err(Error::Config("sphere radius < 0".into()));
                }
                Ok(Shape::Sphere {
                    center: [v[0], v[1], v[2]],
                    radius: v[3],
                })
            }
            "box" => {
                let (lo, hi) = corners(&numbers(args, 6, "box")?, "box")?;
                Ok(Shape::Box { lo, hi })
            }
            "lshape" => {
                let (lo, hi) = corners(&numbers(args, 6, "lshape")?, "lshape")?;
                Ok(Shape::LShape { lo, hi })
            }
            "union" => {
                let parts = args
                    .split('|')
                    .map(|p| match p.trim().split_once(':') {
                        Some(("union", _)) => Err(Error::Config("nested union".into())),
                        _ => p.parse(),
                    })
                    .collect::<Result<Vec<Shape>>>()?;
                Ok(Shape::Union(parts))
            }
            _ => Err(Error::Config(format!("unknown shape kind {kind:?}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Shape::Sphere { center, radius } => write!(f, "sphere:{},{radius}", join(center)),
            Shape::Box { lo, hi } => write!(f, "box:{},{}", join(lo), join(hi)),
            Shape::LShape { lo, hi } => write!(f, "lshape:{},{}", join(lo), join(hi)),
            Shape::Union(parts) => {
                let s: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                write!(f, "union:{}", s.join("|"))
            }
        }
    }
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let in_box = |lo: &[f64; 3], hi: &[f64; 3]| (0..3).all(|a| lo[a] <= p[a] && p[a] <= hi[a]);
        match self {
            Shape::Sphere { center, radius } => {
                (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() <= radius * radius
            }
            Shape::Box { lo, hi } => in_box(lo, hi),
            Shape::LShape { lo, hi } => {
                let mx = 0.5 * (lo[0] + hi[0]);
                let my = 0.5 * (lo[1] + hi[1]);
                in_box(lo, hi) && !(p[0] > mx && p[1] > my)
            }
            Shape::Union(parts) => parts.iter().any(|s| s.contains(p)),
        }
    }
}

/// A shape plus the seed of its feature texture.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        Ok(ShapeSpec {
            shape: text.parse()?,
            seed,
        })
    }
}

fn centre(c: Coord, n: usize) -> [f64; 3] {
    [0, 1, 2].map(|a| (c[a] as f64 + 0.5) / n as f64)
}

/// Voxels of an `n^3` grid whose centre satisfies `inside`.
fn voxelize(n: usize, inside: impl Fn([f64; 3]) -> bool) -> BinaryMask3D {
    let d = Dims::cube(n);
    let bits = (0..d.voxel_count()).map(|i| inside(centre(d.coord_of(i), n))).collect();
    BinaryMask3D::new(d, bits).expect("matching dims")
}

/// Position texture: centre coordinates, then seeded sinusoids of position.
pub fn feature_rule(p: [f64; 3], channels: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..channels)
        .map(|ch| {
            let freq: [f64; 3] = [0; 3].map(|_| rng.random_range(1..=3) as f64);
            let phase = rng.random_range(0.0..2.0 * PI);
            if ch < 3 {
                p[ch]
            } else {
                (2.0 * PI * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2]) + phase).sin()
            }
        })
        .collect()
}

/// Occupancy plus centre coordinates at `n_st`, and surface features at `n_slat`.
pub fn gen_asset(spec: &ShapeSpec, n_st: usize, n_slat: usize, c_slat: usize) -> Result<Asset> {
    if n_st < 4 || n_slat < n_st || n_slat % n_st != 0 {
        return Err(Error::Parameter(format!(
            "resolutions {n_st} / {n_slat}: need >= 4 and a whole block factor"
        )));
    }
    let occ = voxelize(n_st, |p| spec.shape.contains(p));
    if occ.is_empty() {
        return Err(Error::Empty(format!("shape {} occupies no voxel at {n_st}^3", spec.shape)));
    }
    let d = Dims::cube(n_st);
    let mut values = vec![0.0; d.voxel_count() * ST_CHANNELS];
    for c in occ.set_coords() {
        let base = d.index_of(c) * ST_CHANNELS;
        values[base] = 1.0;
        values[base + 1..base + 4].copy_from_slice(&centre(c, n_st));
    }
    let st_grid = DenseLatentGrid::new(d, ST_CHANNELS, values)?;
    let coords = surface_voxels(&upsample_mask(&occ, n_slat / n_st)?);
    let feats: Vec<f64> = coords
        .iter()
        .flat_map(|c| feature_rule(centre(*c, n_slat), c_slat, spec.seed))
        .collect();
    let slat = SparseLatentSet::new(n_slat, c_slat, coords, feats)?;
    Asset::new(st_grid, slat)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    None,
    Octant(u8),
    Ball { center: [f64; 3], radius: f64 },
    Slab { axis: Axis, lo: f64, hi: f64 },
}

impl FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Region::None);
        }
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("region {s:?} needs kind:params")))?;
        match kind {
            "octant" => match args.trim().parse::<u8>() {
                Ok(k) if k < 8 => Ok(Region::Octant(k)),
                _ => Err(Error::Config(format!("octant id {args:?} not in 0..8"))),
            },
            "ball" => {
                let v = numbers(args, 4, "ball")?;
                if v[3] < 0.0 {
                    return Err(Error::Config("ball radius < 0".into()));
                }
                Ok(Region::Ball {
                    center: [v[0], v[1], v[2]],
                    radius: v[3],
                })
            }
            "slab" => {
                let (axis, range) = args
                    .split_once(',')
                    .ok_or_else(|| Error::Config("slab needs axis,lo,hi".into()))?;
                let axis: Axis = axis.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?;
                let v = numbers(range, 2, "slab")?;
                Ok(Region::Slab { axis, lo: v[0], hi: v[1] })
            }
            _ => Err(Error::Config(format!("unknown region kind {kind:?}"))),
        }
    }
}

impl Region {
    /// The region's voxels on an `n^3` grid.
    pub fn voxelize(&self, n: usize) -> BinaryMask3D {
        match self {
            Region::None => voxelize(n, |_| false),
            Region::Octant(k) => voxelize(n, |p| (0..3).all(|a| (p[a] >= 0.5) == (k >> a & 1 == 1))),
            Region::Ball { center, radius } => {
                let cell = center.map(|x| (x * n as f64).floor());
                voxelize(n, |p| {
                    let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
                    let holds_centre = (0..3).all(|a| (p[a] * n as f64).floor() == cell[a]);
                    d2 <= radius * radius || holds_centre
                })
            }
            Region::Slab { axis, lo, hi } => {
                let a = match axis {
                    Axis::X => 0,
                    Axis::Y => 1,
                    Axis::Z => 2,
                };
                voxelize(n, |p| *lo <= p[a] && p[a] <= *hi)
            }
        }
    }
}

/// An edit mask with its overlap counts.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub mask: BinaryMask3D,
    /// Active (SLAT) coordinates under the mask.
    pub masked_active: usize,
    /// Active coordinates outside the mask.
    pub keep: usize,
}

/// The region as an edit mask at the asset's structure resolution.
pub fn gen_edit_scenario(asset: &Asset, region: &Region) -> Result<Scenario> {
    let n = asset.st_grid().dims().h;
    let mask = region.voxelize(n);
    if mask.is_empty() && *region != Region::None {
        log::warn!("region {region:?} covers no voxel of the {n}^3 grid");
    }
    let f = asset.block_factor();
    let masked_active = asset
        .slat()
        .coords()
        .iter()
        .filter(|c| mask.is_set(c.map(|v| v / f as u16)))
        .count();
    Ok(Scenario {
        masked_active,
        keep: asset.slat().len() - masked_active,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: &str) -> ShapeSpec {
        ShapeSpec::parse(s, 5).unwrap()
    }

    #[test]
    fn sphere_occupancy_matches_scan() {
        let a = gen_asset(&spec("sphere:0.5,0.5,0.5,0.4"), 16, 16, 6).unwrap();
        let mut count = 0;
        for x in 0..16 {
            for y in 0..16 {
                for z in 0..16 {
                    let p = [x, y, z].map(|v| (v as f64 + 0.5) / 16.0);
                    let d2: f64 = p.iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
                    count += usize::from(d2 <= 0.16);
                }
            }
        }
        let occ = a.st_grid().channel(0).iter().filter(|v| **v == 1.0).count();
        assert_eq!(occ, count);
        assert!(a.slat().len() < occ);
    }

    #[test]
    fn octant_box_and_scenario_counts() {
        let a = gen_asset(&spec("box:0,0,0,0.5,0.5,0.5"), 8, 8, 4).unwrap();
        assert_eq!(a.st_grid().channel(0).iter().filter(|v| **v == 1.0).count(), 64);
        let s = gen_edit_scenario(&a, &"octant:7".parse().unwrap()).unwrap();
        assert_eq!(s.mask.count(), 64);
        assert_eq!(s.masked_active, 0);
        let s = gen_edit_scenario(&a, &"octant:0".parse().unwrap()).unwrap();
        assert_eq!((s.masked_active, s.keep), (a.slat().len(), 0));
    }

    #[test]
    fn degenerate_ball_hits_one_voxel() {
        let m = Region::Ball {
            center: [0.3, 0.61, 0.9],
            radius: 0.0,
        }
        .voxelize(8);
        assert_eq!(m.set_coords(), vec![[2, 4, 7]]);
    }

    #[test]
    fn slab_missing_the_shape_keeps_everything() {
        let a = gen_asset(&spec("sphere:0.5,0.5,0.5,0.2"), 8, 8, 4).unwrap();
        let s = gen_edit_scenario(&a, &"slab:x,0.0,0.1".parse().unwrap()).unwrap();
        assert!(s.mask.count() > 0);
        assert_eq!(s.keep, a.slat().len());
    }

    #[test]
    fn deterministic_and_parse_round_trip() {
        let s = spec("union:sphere:0.3,0.3,0.3,0.2|lshape:0.4,0.4,0.4,0.9,0.9,0.9");
        assert_eq!(gen_asset(&s, 8, 16, 5).unwrap(), gen_asset(&s, 8, 16, 5).unwrap());
        assert_eq!(s.shape.to_string().parse::<Shape>().unwrap(), s.shape);
        let m1 = "ball:0.5,0.5,0.5,0.25".parse::<Region>().unwrap().voxelize(8);
        let m2 = "ball:0.5,0.5,0.5,0.25".parse::<Region>().unwrap().voxelize(8);
        assert_eq!(m1, m2);
    }

    #[test]
    fn features_carry_position() {
        let a = gen_asset(&spec("box:0.2,0.2,0.2,0.8,0.8,0.8"), 8, 8, 5).unwrap();
        let row = 0;
        let c = a.slat().coords()[row];
        assert_eq!(&a.slat().feature(row)[..3], &centre(c, 8));
        assert!(a.slat().feature(row)[3..].iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn lshape_drops_a_quarter() {
        let l = voxelize(8, |p| "lshape:0,0,0,1,1,1".parse::<Shape>().unwrap().contains(p));
        assert_eq!(l.count(), 512 - 128);
    }

    #[test]
    fn bad_specs() {
        for bad in ["cone:1", "sphere:1,2", "box:1,1,1,0,0,0", "union:union:x", "sphere:0,0,0,nan"] {
            assert!(bad.parse::<Shape>().is_err(), "{bad}");
        }
        for bad in ["octant:8", "slab:w,0,1", "ball:1,1,1,-1", "plane:1"] {
            assert!(bad.parse::<Region>().is_err(), "{bad}");
        }
        assert!(matches!(gen_asset(&spec("sphere:5,5,5,0.1"), 8, 8, 4), Err(Error::Empty(_))));
        assert!(gen_asset(&spec("sphere:0.5,0.5,0.5,0.3"), 8, 12, 4).is_err());
    }
}
