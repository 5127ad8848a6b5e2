//! Voxel lattice types, edit masks and the morphology used to build soft masks.
//!
//! Dense layouts are voxel-major with `x` fastest, then `y`, then `z`; the
//! channels of one voxel are contiguous. Sparse sets and coordinate sets are
//! kept in lexicographic `(x, y, z)` order everywhere.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Integer voxel coordinate `(x, y, z)`. Array ordering is lexicographic.
pub type Coord = [u16; 3];

/// Largest resolution representable by [`Coord`].
pub const MAX_RESOLUTION: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        Dims { h, w, d }
    }

    pub fn cube(n: usize) -> Self {
        Dims { h: n, w: n, d: n }
    }

    pub fn voxel_count(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn is_cubic(&self) -> bool {
        self.h == self.w && self.w == self.d
    }

    pub fn contains(&self, c: Coord) -> bool {
        (c[0] as usize) < self.h && (c[1] as usize) < self.w && (c[2] as usize) < self.d
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.h * (y + self.w * z)
    }

    #[inline]
    pub fn index_of(&self, c: Coord) -> usize {
        self.index(c[0] as usize, c[1] as usize, c[2] as usize)
    }

    #[inline]
    pub fn coord_of(&self, idx: usize) -> Coord {
        let x = idx % self.h;
        let y = (idx / self.h) % self.w;
        let z = idx / (self.h * self.w);
        [x as u16, y as u16, z as u16]
    }

    fn check(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::Dimension(format!("zero extent in {self:?}")));
        }
        if self.h > MAX_RESOLUTION || self.w > MAX_RESOLUTION || self.d > MAX_RESOLUTION {
            return Err(Error::Dimension(format!("extent too large in {self:?}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what}: value {i} is {}", values[i]))),
        None => Ok(()),
    }
}

/// Dense `H x W x D` grid of `C`-channel feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLatentGrid {
    dims: Dims,
    channels: usize,
    values: Vec<f64>,
}

impl DenseLatentGrid {
    pub fn new(dims: Dims, channels: usize, values: Vec<f64>) -> Result<Self> {
        dims.check()?;
        if channels == 0 {
            return Err(Error::Dimension("grid needs at least one channel".into()));
        }
        let expected = dims.voxel_count() * channels;
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "grid {dims} x {channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        check_finite(&values, "grid")?;
        Ok(DenseLatentGrid {
            dims,
            channels,
            values,
        })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Result<Self> {
        Self::new(dims, channels, vec![0.0; dims.voxel_count() * channels])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn voxel(&self, c: Coord) -> &[f64] {
        let i = self.dims.index_of(c) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, z: usize, ch: usize) -> f64 {
        self.values[self.dims.index(x, y, z) * self.channels + ch]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, ch: usize, v: f64) {
        let i = self.dims.index(x, y, z) * self.channels + ch;
        self.values[i] = v;
    }

    /// Replaces the value buffer, keeping dims and channels.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.channels, values)
    }

    /// One channel as a flat voxel-ordered vector.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect()
    }
}

/// Features anchored to distinct voxel coordinates of an `N^3` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLatentSet {
    resolution: usize,
    channels: usize,
    coords: Vec<Coord>,
    feats: Vec<f64>,
}

impl SparseLatentSet {
    /// Builds a set from coordinates already in canonical order.
    pub fn new(resolution: usize, channels: usize, coords: Vec<Coord>, feats: Vec<f64>) -> Result<Self> {
        if resolution == 0 || resolution > MAX_RESOLUTION {
            return Err(Error::Dimension(format!("bad resolution {resolution}")));
        }
        if channels == 0 {
            return Err(Error::Dimension("sparse set needs at least one channel".into()));
        }
        if feats.len() != coords.len() * channels {
            return Err(Error::Dimension(format!(
                "{} coords x {channels} channels needs {} values, got {}",
                coords.len(),
                coords.len() * channels,
                feats.len()
            )));
        }
        let dims = Dims::cube(resolution);
        if let Some(c) = coords.iter().find(|c| !dims.contains(**c)) {
            return Err(Error::Dimension(format!("coordinate {c:?} outside {resolution}^3")));
        }
        if let Some(w) = coords.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Dimension(format!(
                "coordinates not strictly increasing at {:?} -> {:?}",
                w[0], w[1]
            )));
        }
        check_finite(&feats, "sparse features")?;
        Ok(SparseLatentSet {
            resolution,
            channels,
            coords,
            feats,
        })
    }

    /// Builds a set from `(coord, feature)` rows in any order.
    pub fn from_rows(resolution: usize, channels: usize, mut rows: Vec<(Coord, Vec<f64>)>) -> Result<Self> {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut coords = Vec::with_capacity(rows.len());
        let mut feats = Vec::with_capacity(rows.len() * channels);
        for (c, f) in rows {
            if f.len() != channels {
                return Err(Error::Dimension(format!(
                    "feature at {c:?} has {} channels, expected {channels}",
                    f.len()
                )));
            }
            coords.push(c);
            feats.extend_from_slice(&f);
        }
        Self::new(resolution, channels, coords, feats)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feature(&self, row: usize) -> &[f64] {
        &self.feats[row * self.channels..(row + 1) * self.channels]
    }

    pub fn row_of(&self, c: Coord) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    pub fn coordinate_set(&self) -> CoordinateSet {
        CoordinateSet {
            coords: self.coords.clone(),
        }
    }

    /// Same coordinates, new feature buffer.
    pub fn with_feats(&self, feats: Vec<f64>) -> Result<Self> {
        if feats.len() != self.feats.len() {
            return Err(Error::Shape(format!(
                "feature buffer of {} values for a set of {}",
                feats.len(),
                self.feats.len()
            )));
        }
        check_finite(&feats, "sparse features")?;
        Ok(SparseLatentSet {
            feats,
            ..self.clone()
        })
    }

    /// Places the features into a dense grid with an extra occupancy channel
    /// at index `occupancy_channel` (1 on active voxels); all else zero.
    pub fn to_dense(&self, occupancy_channel: usize) -> Result<DenseLatentGrid> {
        let out_ch = self.channels + 1;
        if occupancy_channel >= out_ch {
            return Err(Error::Parameter(format!(
                "occupancy channel {occupancy_channel} >= {out_ch}"
            )));
        }
        let dims = Dims::cube(self.resolution);
        let mut values = vec![0.0; dims.voxel_count() * out_ch];
        for (row, c) in self.coords.iter().enumerate() {
            let base = dims.index_of(*c) * out_ch;
            let mut src = self.feature(row).iter();
            for ch in 0..out_ch {
                values[base + ch] = if ch == occupancy_channel {
                    1.0
                } else {
                    *src.next().unwrap()
                };
            }
        }
        DenseLatentGrid::new(dims, out_ch, values)
    }
}

/// Per-voxel edit flags (`true` = edited).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3D {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        dims.check()?;
        if bits.len() != dims.voxel_count() {
            return Err(Error::Dimension(format!(
                "mask {dims} needs {} bits, got {}",
                dims.voxel_count(),
                bits.len()
            )));
        }
        Ok(BinaryMask3D { dims, bits })
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![false; dims.voxel_count()])
    }

    pub fn full(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![true; dims.voxel_count()])
    }

    pub fn from_coords(dims: Dims, coords: &[Coord]) -> Result<Self> {
        let mut m = Self::empty(dims)?;
        for c in coords {
            if !dims.contains(*c) {
                return Err(Error::Dimension(format!("coordinate {c:?} outside mask {dims}")));
            }
            m.bits[dims.index_of(*c)] = true;
        }
        Ok(m)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_set(&self, c: Coord) -> bool {
        self.bits[self.dims.index_of(c)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn set_coords(&self) -> Vec<Coord> {
        // dense order is z-major; sort to canonical
        let mut out: Vec<Coord> = self
            .bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| self.dims.coord_of(i))
            .collect();
        out.sort_unstable();
        out
    }

    /// Interprets a one-channel grid: voxel set iff value > 0.5.
    pub fn from_grid(grid: &DenseLatentGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Dimension(format!(
                "mask grid must have 1 channel, got {}",
                grid.channels()
            )));
        }
        Self::new(grid.dims(), grid.values().iter().map(|v| *v > 0.5).collect())
    }

    pub fn to_grid(&self) -> DenseLatentGrid {
        let values = self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        DenseLatentGrid::new(self.dims, 1, values).expect("mask dims already validated")
    }

    /// True when `self` is a subset of `other`.
    pub fn is_subset_of(&self, other: &BinaryMask3D) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }
}

/// Per-voxel edit weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask3D {
    dims: Dims,
    weights: Vec<f64>,
}

impl SoftMask3D {
    pub fn new(dims: Dims, weights: Vec<f64>) -> Result<Self> {
        dims.check()?;
        if weights.len() != dims.voxel_count() {
            return Err(Error::Dimension(format!(
                "soft mask {dims} needs {} weights, got {}",
                dims.voxel_count(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Parameter(format!("soft mask weight {w} outside [0, 1]")));
        }
        Ok(SoftMask3D { dims, weights })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, c: Coord) -> f64 {
        self.weights[self.dims.index_of(c)]
    }

    /// Voxels with a non-zero weight.
    pub fn support(&self) -> BinaryMask3D {
        BinaryMask3D::new(self.dims, self.weights.iter().map(|w| *w > 0.0).collect())
            .expect("same dims")
    }

    pub fn to_grid(&self) -> DenseLatentGrid {
        DenseLatentGrid::new(self.dims, 1, self.weights.clone()).expect("weights are finite")
    }
}

impl From<&BinaryMask3D> for SoftMask3D {
    fn from(m: &BinaryMask3D) -> Self {
        SoftMask3D {
            dims: m.dims,
            weights: m.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Sorted, distinct voxel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoordinateSet {
    coords: Vec<Coord>,
}

impl CoordinateSet {
    pub fn new(mut coords: Vec<Coord>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        CoordinateSet { coords }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.coords.binary_search(&c).is_ok()
    }

    pub fn union(&self, other: &CoordinateSet) -> CoordinateSet {
        let set: BTreeSet<Coord> = self.coords.iter().chain(&other.coords).copied().collect();
        CoordinateSet {
            coords: set.into_iter().collect(),
        }
    }
}

/// Which voxels of a dense grid count as active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyRule {
    pub channel: usize,
    pub threshold: f64,
}

impl Default for OccupancyRule {
    fn default() -> Self {
        OccupancyRule {
            channel: 0,
            threshold: 0.5,
        }
    }
}

/// Voxels whose occupancy channel exceeds the threshold, carrying the other
/// channels as features.
pub fn sparse_from_dense(grid: &DenseLatentGrid, rule: OccupancyRule) -> Result<SparseLatentSet> {
    let dims = grid.dims();
    if !dims.is_cubic() {
        return Err(Error::Dimension(format!("grid {dims} is not cubic")));
    }
    if !rule.threshold.is_finite() {
        return Err(Error::Parameter(format!("threshold {}", rule.threshold)));
    }
    let ch = grid.channels();
    if rule.channel >= ch {
        return Err(Error::Parameter(format!(
            "occupancy channel {} >= {ch}",
            rule.channel
        )));
    }
    if ch < 2 {
        return Err(Error::Dimension(
            "grid needs feature channels besides occupancy".into(),
        ));
    }
    let mut rows = Vec::new();
    for idx in 0..dims.voxel_count() {
        let v = &grid.values()[idx * ch..(idx + 1) * ch];
        if v[rule.channel] > rule.threshold {
            let feat: Vec<f64> = v
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != rule.channel)
                .map(|(_, x)| *x)
                .collect();
            rows.push((dims.coord_of(idx), feat));
        }
    }
    SparseLatentSet::from_rows(dims.h, ch - 1, rows)
}

/// L-infinity (cube) dilation. Separable: a running max along each axis.
pub fn dilate_mask(mask: &BinaryMask3D, radius: usize) -> BinaryMask3D {
    if radius == 0 {
        return mask.clone();
    }
    let dims = mask.dims;
    let mut cur = mask.bits.clone();
    let extents = [dims.h, dims.w, dims.d];
    let strides = [1, dims.h, dims.h * dims.w];
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        let mut next = vec![false; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / stride) % n;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(n - 1);
            let base = idx - pos * stride;
            *out = (lo..=hi).any(|p| cur[base + p * stride]);
        }
        cur = next;
    }
    BinaryMask3D { dims, bits: cur }
}

/// Exact squared Euclidean distance (in voxel units) from every voxel centre
/// to the nearest set voxel centre; `None` for an empty mask.
pub fn squared_distance_field(mask: &BinaryMask3D) -> Option<Vec<f64>> {
    if mask.is_empty() {
        return None;
    }
    let dims = mask.dims;
    // Larger than any in-grid squared distance; stays exact in f64.
    let inf = ((dims.h * dims.h + dims.w * dims.w + dims.d * dims.d) as f64) * 4.0 + 1.0;
    let mut f: Vec<f64> = mask.bits.iter().map(|b| if *b { 0.0 } else { inf }).collect();
    let extents = [dims.h, dims.w, dims.d];
    let strides = [1, dims.h, dims.h * dims.w];
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for base in 0..f.len() {
            if (base / stride) % n != 0 {
                continue;
            }
            for (p, slot) in line.iter_mut().enumerate() {
                *slot = f[base + p * stride];
            }
            edt_1d(&line, &mut out, inf);
            for (p, v) in out.iter().enumerate() {
                f[base + p * stride] = *v;
            }
        }
    }
    Some(f)
}

/// One pass of the lower-envelope squared distance transform over a line.
/// All inputs are integers (or `inf`), so every comparison is exact.
fn edt_1d(f: &[f64], out: &mut [f64], inf: f64) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| *x < inf) {
        Some(p) => p,
        None => {
            out.iter_mut().for_each(|o| *o = inf);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= inf {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k > 0 whenever s <= z[k], since z[0] = -inf
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// `1` on set voxels, `exp(-d^2 / 2 sigma^2)` elsewhere, all zero for an
/// empty mask.
pub fn gaussian_falloff(mask: &BinaryMask3D, sigma: f64) -> Result<SoftMask3D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("falloff sigma must be > 0, got {sigma}")));
    }
    let weights = match squared_distance_field(mask) {
        None => vec![0.0; mask.dims.voxel_count()],
        Some(d2) => d2
            .iter()
            .zip(&mask.bits)
            .map(|(d2, set)| if *set { 1.0 } else { (-d2 / (2.0 * sigma * sigma)).exp() })
            .collect(),
    };
    SoftMask3D::new(mask.dims, weights)
}

/// Soft edit mask: Gaussian falloff around the edit mask, truncated to the
/// support of its L-infinity dilation so voxels beyond the band are exactly 0.
pub fn soft_edit_mask(mask: &BinaryMask3D, radius: usize, sigma: f64) -> Result<SoftMask3D> {
    let falloff = gaussian_falloff(mask, sigma)?;
    let support = dilate_mask(mask, radius);
    let weights = falloff
        .weights
        .iter()
        .zip(&support.bits)
        .map(|(w, inside)| if *inside { *w } else { 0.0 })
        .collect();
    SoftMask3D::new(mask.dims, weights)
}

/// `active` minus the voxels set in `edit`.
pub fn keep_complement(active: &CoordinateSet, edit: &BinaryMask3D) -> Result<CoordinateSet> {
    let dims = edit.dims();
    if let Some(c) = active.coords.iter().find(|c| !dims.contains(**c)) {
        return Err(Error::Dimension(format!("coordinate {c:?} outside edit mask {dims}")));
    }
    Ok(CoordinateSet {
        coords: active
            .coords
            .iter()
            .filter(|c| !edit.is_set(**c))
            .copied()
            .collect(),
    })
}

/// Set voxels with a 6-neighbour that is unset or outside the grid.
pub fn surface_voxels(mask: &BinaryMask3D) -> Vec<Coord> {
    let d = mask.dims;
    let unset = |x: isize, y: isize, z: isize| {
        x < 0
            || y < 0
            || z < 0
            || x >= d.h as isize
            || y >= d.w as isize
            || z >= d.d as isize
            || !mask.bits[d.index(x as usize, y as usize, z as usize)]
    };
    mask.set_coords()
        .into_iter()
        .filter(|c| {
            let (x, y, z) = (c[0] as isize, c[1] as isize, c[2] as isize);
            unset(x - 1, y, z)
                || unset(x + 1, y, z)
                || unset(x, y - 1, z)
                || unset(x, y + 1, z)
                || unset(x, y, z - 1)
                || unset(x, y, z + 1)
        })
        .collect()
}

/// Each voxel becomes a `factor^3` block.
pub fn upsample_mask(mask: &BinaryMask3D, factor: usize) -> Result<BinaryMask3D> {
    if factor == 0 {
        return Err(Error::Parameter("upsampling factor 0".into()));
    }
    let d = mask.dims;
    let out = Dims::new(d.h * factor, d.w * factor, d.d * factor);
    out.check()?;
    let bits = (0..out.voxel_count())
        .map(|i| {
            let c = out.coord_of(i);
            mask.bits[d.index(
                c[0] as usize / factor,
                c[1] as usize / factor,
                c[2] as usize / factor,
            )]
        })
        .collect();
    BinaryMask3D::new(out, bits)
}
