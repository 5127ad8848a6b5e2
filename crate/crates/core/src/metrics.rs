//! Preservation metrics: Chamfer distance on voxel centres and masked
//! PSNR/SSIM on axis-aligned projections.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lattice::{Coord, DenseLatentGrid, SparseLatentSet};

pub type Point = [f64; 3];

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Voxel centres scaled into `[0, 1]^3`.
pub fn point_set(coords: &[Coord], resolution: usize) -> Vec<Point> {
    let n = resolution as f64;
    coords
        .iter()
        .map(|c| [0, 1, 2].map(|a| (c[a] as f64 + 0.5) / n))
        .collect()
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest-neighbour distances from every point of `a` into `sorted_b`
/// (sorted by x), pruning on the x gap.
fn nearest(a: &[Point], sorted_b: &[Point]) -> f64 {
    let mut total = 0.0;
    for p in a {
        let start = sorted_b.partition_point(|q| q[0] < p[0]);
        let mut best = f64::INFINITY;
        for q in &sorted_b[start..] {
            if q[0] - p[0] > best {
                break;
            }
            best = best.min(dist(p, q));
        }
        for q in sorted_b[..start].iter().rev() {
            if p[0] - q[0] > best {
                break;
            }
            best = best.min(dist(p, q));
        }
        total += best;
    }
    total / a.len() as f64
}

fn check_points(p: &[Point], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty(format!("chamfer distance of an empty set {name}")));
    }
    if p.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite point in {name}")));
    }
    Ok(())
}

/// Symmetric Chamfer distance: half the sum of the two mean unsquared
/// nearest-neighbour distances.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    check_points(a, "A")?;
    check_points(b, "B")?;
    let sorted = |p: &[Point]| {
        let mut s = p.to_vec();
        s.sort_by(|x, y| x[0].total_cmp(&y[0]));
        s
    };
    Ok(0.5 * (nearest(a, &sorted(b)) + nearest(b, &sorted(a))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::Parameter(format!("unknown axis {s:?}"))),
        }
    }
}

/// Single-channel image, row-major with `width` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Projection2D {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn scaled(&self, s: f64) -> Projection2D {
        Projection2D {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// Scales two projections by a shared factor so both lie in `[0, 1]`.
pub fn normalize_pair(a: &Projection2D, b: &Projection2D) -> (Projection2D, Projection2D) {
    let peak = a.max().max(b.max());
    if peak == 0.0 {
        return (a.clone(), b.clone());
    }
    (a.scaled(1.0 / peak), b.scaled(1.0 / peak))
}

/// Image-plane axes `(rows, cols)` and the depth axis for a view along `axis`.
fn view_axes(axis: Axis) -> (usize, usize, usize) {
    match axis {
        Axis::X => (1, 2, 0),
        Axis::Y => (0, 2, 1),
        Axis::Z => (0, 1, 2),
    }
}

/// Mean L2 magnitude of the non-zero voxels along each column; 0 for empty columns.
pub fn project_ortho(grid: &DenseLatentGrid, axis: Axis) -> Projection2D {
    let dims = grid.dims();
    let ext = [dims.h, dims.w, dims.d];
    let (ra, ca, da) = view_axes(axis);
    let (height, width) = (ext[ra], ext[ca]);
    let mut values = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            let mut sum = 0.0;
            let mut count = 0usize;
            for k in 0..ext[da] {
                let mut p = [0usize; 3];
                p[ra] = r;
                p[ca] = c;
                p[da] = k;
                let v = grid.voxel([p[0] as u16, p[1] as u16, p[2] as u16]);
                if v.iter().any(|x| *x != 0.0) {
                    sum += v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    count += 1;
                }
            }
            if count > 0 {
                values[r * width + c] = sum / count as f64;
            }
        }
    }
    Projection2D { height, width, values }
}

/// Dense grid of the features of a sparse set, zero off the active voxels.
pub fn sparse_grid(set: &SparseLatentSet) -> DenseLatentGrid {
    let dims = crate::lattice::Dims::cube(set.resolution());
    let c = set.channels();
    let mut values = vec![0.0; dims.voxel_count() * c];
    for (row, coord) in set.coords().iter().enumerate() {
        let base = dims.index_of(*coord) * c;
        values[base..base + c].copy_from_slice(set.feature(row));
    }
    DenseLatentGrid::new(dims, c, values).expect("features are finite")
}

fn check_images(a: &Projection2D, b: &Projection2D, mask: &[bool]) -> Result<()> {
    if a.height != b.height || a.width != b.width || a.values.len() != b.values.len() {
        return Err(Error::Shape(format!(
            "images {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if mask.len() != a.values.len() {
        return Err(Error::Shape(format!("mask of {} for {} pixels", mask.len(), a.values.len())));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::Empty("mask selects no pixels".into()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over masked pixels, capped at [`PSNR_CAP`].
pub fn masked_psnr(a: &Projection2D, b: &Projection2D, mask: &[bool]) -> Result<f64> {
    check_images(a, b, mask)?;
    let (mut se, mut n) = (0.0, 0usize);
    for i in 0..mask.len() {
        if mask[i] {
            se += (a.values[i] - b.values[i]).powi(2);
            n += 1;
        }
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// SSIM of one window with top-left corner `(r, c)`.
fn window_ssim(a: &Projection2D, b: &Projection2D, r: usize, c: usize) -> f64 {
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in r..r + SSIM_WINDOW {
        for j in c..c + SSIM_WINDOW {
            ma += a.get(i, j);
            mb += b.get(i, j);
        }
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in r..r + SSIM_WINDOW {
        for j in c..c + SSIM_WINDOW {
            let (da, db) = (a.get(i, j) - ma, b.get(i, j) - mb);
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over the 7x7 uniform windows that fit in the image and whose
/// centre pixel is masked.
pub fn masked_ssim(a: &Projection2D, b: &Projection2D, mask: &[bool]) -> Result<f64> {
    check_images(a, b, mask)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.height, a.width
        )));
    }
    let half = SSIM_WINDOW / 2;
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..=a.height - SSIM_WINDOW {
        for c in 0..=a.width - SSIM_WINDOW {
            if mask[(r + half) * a.width + c + half] {
                sum += window_ssim(a, b, r, c);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no masked window centres".into()));
    }
    Ok(sum / count as f64)
}

/// Columns along `axis` that contain no voxel of `mask`.
pub fn projected_keep_mask(mask: &crate::lattice::BinaryMask3D, axis: Axis) -> Vec<bool> {
    let grid = mask.to_grid();
    project_ortho(&grid, axis).values.iter().map(|v| *v == 0.0).collect()
}
