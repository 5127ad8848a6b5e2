//! Two-stage editing: the dense structure grid first, then the sparse
//! structured latents on the re-derived active set.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::{FieldSpec, RunConfig};
use crate::editor::{edit_denoise, StageContext};
use crate::error::{Error, Result};
use crate::fields::{make_analytic_field, AttentionHook, CondMode, ConditionInput, FieldLayout, ToyTransformer, VelocityField};
use crate::formats::{read_vxg, read_vxs, write_vxg, write_vxs};
use crate::kvstore::{KVCacheStore, Stage};
use crate::lattice::{
    keep_complement, surface_voxels, upsample_mask, BinaryMask3D, Coord, CoordinateSet, DenseLatentGrid, Dims,
    SparseLatentSet,
};
use crate::solver::{invert, sample, Schedule, TrajectoryCache};

/// Occupancy plus three coarse channels.
pub const ST_CHANNELS: usize = 4;
const OCCUPANCY_THRESHOLD: f64 = 0.5;
const FRESH_NOISE_SALT: u64 = 0x5eed_f00d;
const SLAT_ONLY_NOISE_SALT: u64 = 0x0dd_ba11;

/// A dense structure grid and the sparse latents on its surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Asset {
    st_grid: DenseLatentGrid,
    slat: SparseLatentSet,
    threshold: f64,
}

impl Asset {
    pub fn new(st_grid: DenseLatentGrid, slat: SparseLatentSet) -> Result<Self> {
        Self::with_threshold(st_grid, slat, OCCUPANCY_THRESHOLD)
    }

    /// Checks that every sparse coordinate lies in a structure voxel whose
    /// occupancy exceeds `threshold`.
    pub fn with_threshold(st_grid: DenseLatentGrid, slat: SparseLatentSet, threshold: f64) -> Result<Self> {
        let dims = st_grid.dims();
        if !dims.is_cubic() {
            return Err(Error::Dimension(format!("structure grid {dims} is not cubic")));
        }
        if st_grid.channels() != ST_CHANNELS {
            return Err(Error::Dimension(format!(
                "structure grid has {} channels, expected {ST_CHANNELS}",
                st_grid.channels()
            )));
        }
        if slat.resolution() < dims.h || slat.resolution() % dims.h != 0 {
            return Err(Error::Dimension(format!(
                "latent resolution {} is not a multiple of structure resolution {}",
                slat.resolution(),
                dims.h
            )));
        }
        let f = (slat.resolution() / dims.h) as u16;
        if let Some(c) = slat.coords().iter().find(|c| st_grid.voxel(c.map(|v| v / f))[0] <= threshold) {
            return Err(Error::Alignment(format!("latent coordinate {c:?} lies in an unoccupied structure voxel")));
        }
        Ok(Asset {
            st_grid,
            slat,
            threshold,
        })
    }

    pub fn st_grid(&self) -> &DenseLatentGrid {
        &self.st_grid
    }

    pub fn slat(&self) -> &SparseLatentSet {
        &self.slat
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn block_factor(&self) -> usize {
        self.slat.resolution() / self.st_grid.dims().h
    }

    pub fn occupancy(&self) -> BinaryMask3D {
        occupancy(&self.st_grid, self.threshold)
    }

    /// Writes `st.vxg`, `slat.vxs` and `meta.txt`; returns the file names.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_vxg(dir.join("st.vxg"), &self.st_grid)?;
        write_vxs(dir.join("slat.vxs"), &self.slat)?;
        let meta = format!(
            "format = voxflow-asset\nst_resolution = {}\nslat_resolution = {}\nslat_channels = {}\nslat_count = {}\nthreshold = {}\n",
            self.st_grid.dims().h,
            self.slat.resolution(),
            self.slat.channels(),
            self.slat.len(),
            self.threshold
        );
        let path = dir.join("meta.txt");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
        Ok(vec!["st.vxg".into(), "slat.vxs".into(), "meta.txt".into()])
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let st = read_vxg(dir.join("st.vxg"))?;
        let slat = read_vxs(dir.join("slat.vxs"))?;
        let path = dir.join("meta.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta = crate::config::parse_config(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let threshold = meta
            .iter()
            .find(|(k, _)| k == "threshold")
            .map(|(_, v)| v.parse::<f64>())
            .transpose()
            .map_err(|_| Error::Format(format!("{}: bad threshold", path.display())))?
            .unwrap_or(OCCUPANCY_THRESHOLD);
        // stored values are f32, so the loaded asset is checked as read
        Self::with_threshold(st, slat, threshold)
    }
}

pub fn occupancy(grid: &DenseLatentGrid, threshold: f64) -> BinaryMask3D {
    let bits = grid.channel(0).iter().map(|v| *v > threshold).collect();
    BinaryMask3D::new(grid.dims(), bits).expect("grid dims")
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn of(set: &SparseLatentSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Empty("cannot normalise an empty latent set".into()));
        }
        let c = set.channels();
        let n = set.len() as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![1.0; c];
        for ch in 0..c {
            let col: Vec<f64> = (0..set.len()).map(|r| set.feature(r)[ch]).collect();
            if col.iter().all(|v| *v == col[0]) {
                mean[ch] = col[0];
                continue;
            }
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[ch] = m;
            if var > 0.0 {
                std[ch] = var.sqrt();
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, feats: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        feats
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    pub fn denormalize(&self, feats: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        feats
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect()
    }
}

pub fn normalize_features(set: &SparseLatentSet) -> Result<(SparseLatentSet, NormStats)> {
    let stats = NormStats::of(set)?;
    Ok((set.with_feats(stats.normalize(set.feats()))?, stats))
}

pub fn build_st_field(config: &RunConfig, dims: Dims) -> Result<Box<dyn VelocityField>> {
    Ok(match &config.field {
        FieldSpec::Toy => Box::new(ToyTransformer::new(
            config.toy_config(),
            FieldLayout::Dense {
                dims,
                channels: ST_CHANNELS,
            },
            config.seed,
        )?),
        FieldSpec::Analytic(kind) => Box::new(make_analytic_field(kind.clone(), dims.voxel_count() * ST_CHANNELS)?),
    })
}

pub fn build_slat_field(
    config: &RunConfig,
    resolution: usize,
    coords: Vec<Coord>,
    channels: usize,
) -> Result<Box<dyn VelocityField>> {
    Ok(match &config.field {
        FieldSpec::Toy => Box::new(ToyTransformer::new(
            config.toy_config(),
            FieldLayout::Sparse {
                resolution,
                coords,
                channels,
            },
            config.seed.wrapping_add(1),
        )?),
        FieldSpec::Analytic(kind) => Box::new(make_analytic_field(kind.clone(), coords.len() * channels)?),
    })
}

/// Source, target and negative conditions of a run.
pub struct Conditions {
    pub source: ConditionInput,
    pub target: ConditionInput,
    pub negative: ConditionInput,
}

pub fn conditions(config: &RunConfig, width: usize) -> Conditions {
    let named = |mode, name: &str| ConditionInput::named(mode, name, width, config.seed);
    Conditions {
        source: named(CondMode::Conditional, &config.source_prompt),
        target: named(CondMode::Conditional, &config.target_prompt),
        negative: named(CondMode::Negative, &config.negative_prompt),
    }
}

/// Trajectory and captured keys/values of one stage.
#[derive(Debug, Clone)]
pub struct StageInversion {
    pub trajectory: TrajectoryCache,
    pub kv: Option<KVCacheStore>,
    pub evaluations: usize,
}

/// Inverts `data` under the source condition, capturing keys/values when
/// the field has attention.
pub fn invert_stage(
    field: &dyn VelocityField,
    schedule: &Schedule,
    data: &[f64],
    config: &RunConfig,
    stage: Stage,
) -> Result<StageInversion> {
    let conds = conditions(config, field.cond_width());
    let mut kv = field.token_layout().map(|l| KVCacheStore::new(stage, l.clone()));
    let mut hook = match kv.as_mut() {
        Some(store) => AttentionHook::capture(store),
        None => AttentionHook::off(),
    };
    let inv = invert(field, schedule, data, &config.guidance(), &conds.source, &conds.negative, stage, &mut hook)?;
    let evaluations = inv.reports.iter().map(|r| r.evaluations).sum::<usize>() + inv.terminal_evaluations;
    Ok(StageInversion {
        trajectory: inv.trajectory,
        kv,
        evaluations,
    })
}

/// Inverts both stages of an unedited asset.
pub fn invert_asset(asset: &Asset, config: &RunConfig) -> Result<(StageInversion, StageInversion)> {
    let schedule = config.schedule()?;
    let st_field = build_st_field(config, asset.st_grid.dims())?;
    let st = invert_stage(st_field.as_ref(), &schedule, asset.st_grid.values(), config, Stage::St)?;
    let (norm, _) = normalize_features(&asset.slat)?;
    let slat_field = build_slat_field(config, asset.slat.resolution(), asset.slat.coords().to_vec(), asset.slat.channels())?;
    let slat = invert_stage(slat_field.as_ref(), &schedule, norm.feats(), config, Stage::Slat)?;
    Ok((st, slat))
}

/// SHA-256 of values as little-endian f64 bytes.
pub fn checksum(values: impl IntoIterator<Item = f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Ordered `key = value` report of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub entries: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s: String = self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        for w in &self.warnings {
            s.push_str(&format!("warning = {w}\n"));
        }
        s
    }
}

/// Everything an edit produces besides the asset.
#[derive(Debug, Clone)]
pub struct EditRun {
    pub asset: Asset,
    pub report: RunReport,
    /// Structure voxels allowed to change (support of the latent mask).
    pub st_region: BinaryMask3D,
    /// Latent coordinates copied from the source.
    pub keep: CoordinateSet,
}

fn preserved_st_values(grid: &DenseLatentGrid, region: &BinaryMask3D) -> Vec<f64> {
    let c = grid.channels();
    region
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, b)| !**b)
        .flat_map(|(v, _)| grid.values()[v * c..(v + 1) * c].to_vec())
        .collect()
}

fn kept_features(set: &SparseLatentSet, keep: &CoordinateSet) -> Vec<f64> {
    keep.coords()
        .iter()
        .filter_map(|c| set.row_of(*c))
        .flat_map(|r| set.feature(r).to_vec())
        .collect()
}

/// Edits `asset` inside `edit_mask` (structure resolution). `st_inversion`
/// reuses a previous structure inversion of the same asset and schedule.
pub fn run_two_stage_edit(
    asset: &Asset,
    edit_mask: &BinaryMask3D,
    config: &RunConfig,
    st_inversion: Option<&StageInversion>,
) -> Result<EditRun> {
    config.validate()?;
    let dims = asset.st_grid.dims();
    if edit_mask.dims() != dims {
        return Err(Error::Dimension(format!("edit mask {} vs structure grid {dims}", edit_mask.dims())));
    }
    let schedule = config.schedule()?;
    let opts = config.edit_options();
    let mut report = RunReport::default();
    report.push("steps", schedule.steps());
    report.push("edit_voxels", edit_mask.count());

    // structure stage
    let st_field = build_st_field(config, dims)?;
    let conds = conditions(config, st_field.cond_width());
    let fresh;
    let st_inv = match st_inversion {
        Some(inv) => {
            if inv.trajectory.input() != asset.st_grid.values() {
                return Err(Error::Alignment("structure trajectory was inverted from a different asset".into()));
            }
            inv
        }
        None => {
            fresh = invert_stage(st_field.as_ref(), &schedule, asset.st_grid.values(), config, Stage::St)?;
            &fresh
        }
    };
    let st_mask = opts.latent_mask(edit_mask)?;
    let st_region = st_mask.support();
    let ctx = StageContext::dense(&st_inv.trajectory, st_inv.kv.as_ref(), &st_mask, ST_CHANNELS)?;
    let st_out = edit_denoise(&ctx, st_field.as_ref(), &schedule, &opts, &conds.target, &conds.negative, None)?;
    let st_grid = asset.st_grid.with_values(st_out.latent)?;
    report.push("st_region_voxels", st_region.count());
    report.push("st_inversion_evaluations", st_inv.evaluations);
    report.push("st_edit_evaluations", st_out.reports.iter().map(|r| r.evaluations).sum::<usize>());
    report.push("st_kv_entries", st_inv.kv.as_ref().map_or(0, |k| k.len()));

    // active set: preserved coordinates plus the new surface inside the region
    let f = asset.block_factor();
    let region_slat = upsample_mask(&st_region, f)?;
    let keep = keep_complement(&asset.slat.coordinate_set(), &region_slat)?;
    let new_occ = upsample_mask(&occupancy(&st_grid, config.threshold), f)?;
    let grown = CoordinateSet::new(
        surface_voxels(&new_occ)
            .into_iter()
            .filter(|c| region_slat.is_set(*c))
            .collect(),
    );
    let active = keep.union(&grown);
    if active.is_empty() {
        return Err(Error::Empty("edit removed every active voxel".into()));
    }
    if keep.is_empty() {
        report.warnings.push("no latent coordinate is preserved".into());
    }

    // latent stage, in normalised feature space
    let c = asset.slat.channels();
    let stats = NormStats::of(&asset.slat)?;
    let source_norm = stats.normalize(asset.slat.feats());
    let mut work = vec![0.0; active.len() * c];
    let mut fresh_rows = Vec::new();
    for (row, coord) in active.coords().iter().enumerate() {
        match asset.slat.row_of(*coord) {
            Some(src) => work[row * c..(row + 1) * c].copy_from_slice(&source_norm[src * c..(src + 1) * c]),
            None => fresh_rows.push(row),
        }
    }
    let slat_field = build_slat_field(config, asset.slat.resolution(), active.coords().to_vec(), c)?;
    let slat_inv = invert_stage(slat_field.as_ref(), &schedule, &work, config, Stage::Slat)?;
    let mut start = slat_inv.trajectory.terminal().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ FRESH_NOISE_SALT);
    for row in &fresh_rows {
        for v in &mut start[row * c..(row + 1) * c] {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    let ctx = StageContext::sparse(&slat_inv.trajectory, slat_inv.kv.as_ref(), active.coords(), c, &keep, None)?
        .with_start(start);
    let slat_out = edit_denoise(&ctx, slat_field.as_ref(), &schedule, &opts, &conds.target, &conds.negative, None)?;
    let mut feats = stats.denormalize(&slat_out.latent);
    if opts.latent_replacement {
        // the normalised copy is exact; undo the rounding of the affine round trip
        for coord in keep.coords() {
            let (dst, src) = (active.coords().binary_search(coord).unwrap(), asset.slat.row_of(*coord).unwrap());
            feats[dst * c..(dst + 1) * c].copy_from_slice(asset.slat.feature(src));
        }
    }
    let slat = SparseLatentSet::new(asset.slat.resolution(), c, active.coords().to_vec(), feats)?;
    report.push("slat_active", active.len());
    report.push("slat_keep", keep.len());
    report.push("slat_fresh", fresh_rows.len());
    report.push("slat_inversion_evaluations", slat_inv.evaluations);
    report.push("slat_edit_evaluations", slat_out.reports.iter().map(|r| r.evaluations).sum::<usize>());
    report.push("slat_kv_entries", slat_inv.kv.as_ref().map_or(0, |k| k.len()));

    let edited = Asset::with_threshold(st_grid, slat, config.threshold)?;
    let st_in = checksum(preserved_st_values(&asset.st_grid, &st_region));
    let st_out = checksum(preserved_st_values(&edited.st_grid, &st_region));
    let slat_in = checksum(kept_features(&asset.slat, &keep));
    let slat_out = checksum(kept_features(&edited.slat, &keep));
    report.push("preserved_match", st_in == st_out && slat_in == slat_out);
    report.push("st_preserved_sha256_input", st_in);
    report.push("st_preserved_sha256_output", st_out);
    report.push("slat_keep_sha256_input", slat_in);
    report.push("slat_keep_sha256_output", slat_out);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(EditRun {
        asset: edited,
        report,
        st_region,
        keep,
    })
}

/// Per-stage relative L2 errors of a reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructReport {
    pub st_rel_l2: f64,
    /// Measured on normalised features.
    pub slat_rel_l2: f64,
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Inverts and re-samples without replacement. With `invert_slat` false the
/// latents are sampled from seeded noise instead of their inversion.
pub fn reconstruct_asset(asset: &Asset, config: &RunConfig, invert_slat: bool) -> Result<(Asset, ReconstructReport)> {
    config.validate()?;
    let schedule = config.schedule()?;
    let guidance = config.guidance();

    let st_field = build_st_field(config, asset.st_grid.dims())?;
    let conds = conditions(config, st_field.cond_width());
    let off = || AttentionHook::off();
    let st_inv = invert(st_field.as_ref(), &schedule, asset.st_grid.values(), &guidance, &conds.source, &conds.negative, Stage::St, &mut off())?;
    let st = sample(st_field.as_ref(), &schedule, &st_inv.noise, &guidance, &conds.source, &conds.negative, &mut off(), None)?;

    let (norm, stats) = normalize_features(&asset.slat)?;
    let slat_field = build_slat_field(config, asset.slat.resolution(), asset.slat.coords().to_vec(), asset.slat.channels())?;
    let noise = if invert_slat {
        invert(slat_field.as_ref(), &schedule, norm.feats(), &guidance, &conds.source, &conds.negative, Stage::Slat, &mut off())?.noise
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SLAT_ONLY_NOISE_SALT);
        (0..norm.feats().len()).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let slat = sample(slat_field.as_ref(), &schedule, &noise, &guidance, &conds.source, &conds.negative, &mut off(), None)?;
    let report = ReconstructReport {
        st_rel_l2: rel_l2(&st.data, asset.st_grid.values()),
        slat_rel_l2: rel_l2(&slat.data, norm.feats()),
    };
    let st_grid = asset.st_grid.with_values(st.data)?;
    let slat_set = asset.slat.with_feats(stats.denormalize(&slat.data))?;
    // a reconstruction keeps the source structure, so skip the occupancy check
    let out = Asset {
        st_grid,
        slat: slat_set,
        threshold: asset.threshold,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_asset, ShapeSpec};
    use rand::Rng;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("steps", "3"),
            ("toy_layers", "2"),
            ("toy_dim", "16"),
            ("toy_heads", "2"),
            ("st_token_side", "4"),
            ("cond_width", "4"),
            ("st_resolution", "8"),
            ("slat_resolution", "8"),
            ("slat_channels", "4"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    fn sphere(n: usize) -> Asset {
        gen_asset(&ShapeSpec::parse("sphere:0.5,0.5,0.5,0.35", 1).unwrap(), n, n, 4).unwrap()
    }

    #[test]
    fn normalisation_cases() {
        let set = SparseLatentSet::new(4, 2, vec![[0, 0, 0], [1, 0, 0]], vec![0.1, 0.0, 0.1, 2.0]).unwrap();
        let (n, s) = normalize_features(&set).unwrap();
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.mean, vec![0.1, 1.0]);
        assert_eq!(n.feats(), &[0.0, -1.0, 0.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<Coord> = (0..50u16).map(|i| [i / 10, i % 10, 0]).collect();
        let feats: Vec<f64> = (0..150).map(|_| rng.random_range(-30.0..30.0)).collect();
        let set = SparseLatentSet::new(16, 3, coords, feats).unwrap();
        let (n, s) = normalize_features(&set).unwrap();
        let back = s.denormalize(n.feats());
        assert!(back.iter().zip(set.feats()).all(|(a, b)| (a - b).abs() <= 1e-6));
        let empty = SparseLatentSet::new(4, 1, vec![], vec![]).unwrap();
        assert!(matches!(normalize_features(&empty), Err(Error::Empty(_))));
    }

    #[test]
    fn asset_invariant_and_io() {
        let a = sphere(8);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = Asset::load(dir.path()).unwrap();
        assert_eq!(b.slat().coords(), a.slat().coords());
        let stray = SparseLatentSet::new(8, 4, vec![[0, 0, 0]], vec![0.0; 4]).unwrap();
        assert!(matches!(Asset::new(a.st_grid().clone(), stray), Err(Error::Alignment(_))));
    }

    #[test]
    fn empty_mask_is_identity() {
        let a = sphere(8);
        let cfg = small_config();
        let empty = BinaryMask3D::empty(Dims::cube(8)).unwrap();
        let run = run_two_stage_edit(&a, &empty, &cfg, None).unwrap();
        assert_eq!(run.asset, a);
        assert_eq!(run.report.get("preserved_match"), Some("true"));
    }

    #[test]
    fn octant_edit_preserves_outside() {
        let a = sphere(8);
        let mut cfg = small_config();
        cfg.set("soft_radius", "1").unwrap();
        let mask = crate::synth::Region::Octant(7).voxelize(8);
        let run = run_two_stage_edit(&a, &mask, &cfg, None).unwrap();
        let d = Dims::cube(8);
        for v in 0..d.voxel_count() {
            if !run.st_region.is_set(d.coord_of(v)) {
                assert_eq!(run.asset.st_grid().voxel(d.coord_of(v)), a.st_grid().voxel(d.coord_of(v)));
            }
        }
        for c in run.keep.coords() {
            let (i, j) = (run.asset.slat().row_of(*c).unwrap(), a.slat().row_of(*c).unwrap());
            assert_eq!(run.asset.slat().feature(i), a.slat().feature(j));
        }
        assert!(!run.keep.is_empty() && run.keep.len() < a.slat().len());
        assert_ne!(run.asset.st_grid(), a.st_grid());
        assert_eq!(run.report.get("preserved_match"), Some("true"));
    }

    #[test]
    fn full_mask_structure_is_free_generation() {
        let a = sphere(8);
        let mut cfg = small_config();
        cfg.set("soft_mask", "false").unwrap();
        let full = BinaryMask3D::full(Dims::cube(8)).unwrap();
        let run = match run_two_stage_edit(&a, &full, &cfg, None) {
            Ok(r) => r,
            Err(Error::Empty(_)) => return,
            Err(e) => panic!("{e}"),
        };
        let field = build_st_field(&cfg, Dims::cube(8)).unwrap();
        let inv = invert_stage(field.as_ref(), &cfg.schedule().unwrap(), a.st_grid().values(), &cfg, Stage::St).unwrap();
        let conds = conditions(&cfg, field.cond_width());
        let free = sample(
            field.as_ref(),
            &cfg.schedule().unwrap(),
            inv.trajectory.terminal(),
            &cfg.guidance(),
            &conds.target,
            &conds.negative,
            &mut AttentionHook::off(),
            None,
        )
        .unwrap();
        assert_eq!(run.asset.st_grid().values(), free.data.as_slice());
        assert!(run.keep.is_empty());
    }

    #[test]
    fn reconstruction_with_zero_field_is_exact() {
        let a = sphere(8);
        let mut cfg = small_config();
        cfg.set("field", "zero").unwrap();
        let (_, r) = reconstruct_asset(&a, &cfg, true).unwrap();
        assert_eq!((r.st_rel_l2, r.slat_rel_l2), (0.0, 0.0));
    }

    #[test]
    fn reused_inversion_must_match_asset() {
        let a = sphere(8);
        let cfg = small_config();
        let (st, _) = invert_asset(&a, &cfg).unwrap();
        let empty = BinaryMask3D::empty(Dims::cube(8)).unwrap();
        let run = run_two_stage_edit(&a, &empty, &cfg, Some(&st)).unwrap();
        assert_eq!(run.asset, a);
        let other = gen_asset(&ShapeSpec::parse("sphere:0.5,0.5,0.5,0.3", 1).unwrap(), 8, 8, 4).unwrap();
        assert!(matches!(run_two_stage_edit(&other, &empty, &cfg, Some(&st)), Err(Error::Alignment(_))));
    }
}
