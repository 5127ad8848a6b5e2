//! The editing denoise loop: start from inverted noise, then after every
//! step pull preserved latents back to their inverted values while the
//! field reads cached keys/values for preserved tokens.

use crate::error::{Error, Result};
use crate::fields::{AttentionHook, AttentionTrace, ConditionInput, GuidanceConfig, TokenRole, VelocityField};
use crate::kvstore::{KVCacheStore, Stage};
use crate::lattice::{
    soft_edit_mask, BinaryMask3D, Coord, CoordinateSet, DenseLatentGrid, SoftMask3D, SparseLatentSet,
};
use crate::solver::{sample, Schedule, StepCallback, StepReport, TrajectoryCache};

/// Dilation radius and Gaussian width of the soft latent mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftMaskParams {
    pub radius: usize,
    pub sigma: f64,
}

impl Default for SoftMaskParams {
    fn default() -> Self {
        SoftMaskParams { radius: 2, sigma: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditOptions {
    pub latent_replacement: bool,
    /// `None` keeps the latent mask binary.
    pub soft_mask: Option<SoftMaskParams>,
    pub kv_replacement: bool,
    pub attention_mask: bool,
    pub guidance: GuidanceConfig,
}

impl Default for EditOptions {
    fn default() -> Self {
        EditOptions {
            latent_replacement: true,
            soft_mask: Some(SoftMaskParams::default()),
            kv_replacement: true,
            attention_mask: false,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl EditOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.soft_mask {
            if !(p.sigma > 0.0) || !p.sigma.is_finite() {
                return Err(Error::Parameter(format!("soft mask sigma {} must be > 0", p.sigma)));
            }
        }
        self.guidance.validate()
    }

    /// The latent replacement mask for a binary edit mask.
    pub fn latent_mask(&self, edit: &BinaryMask3D) -> Result<SoftMask3D> {
        match self.soft_mask {
            Some(p) => soft_edit_mask(edit, p.radius, p.sigma),
            None => Ok(SoftMask3D::from(edit)),
        }
    }

    /// Voxels whose latents may change: the support of [`Self::latent_mask`].
    pub fn edit_region(&self, edit: &BinaryMask3D) -> Result<BinaryMask3D> {
        Ok(self.latent_mask(edit)?.support())
    }
}

/// `w * current + (1 - w) * cached` per element, with exact copies at 0 and 1.
fn blend_in_place(current: &mut [f64], cached: &[f64], w: &[f64]) {
    for ((c, h), wi) in current.iter_mut().zip(cached).zip(w) {
        if *wi == 0.0 {
            *c = *h;
        } else if *wi != 1.0 {
            *c = wi * *c + (1.0 - wi) * h;
        }
    }
}

/// Blends a dense latent with its cached counterpart; the mask weight is
/// the share of `current` and broadcasts over channels.
pub fn blend_st_latent(current: &DenseLatentGrid, cached: &DenseLatentGrid, mask: &SoftMask3D) -> Result<DenseLatentGrid> {
    if current.dims() != cached.dims() || current.channels() != cached.channels() {
        return Err(Error::Shape(format!(
            "blend of {}x{} and {}x{} latents",
            current.dims(),
            current.channels(),
            cached.dims(),
            cached.channels()
        )));
    }
    if mask.dims() != current.dims() {
        return Err(Error::Dimension(format!("mask {} vs latent {}", mask.dims(), current.dims())));
    }
    let w = expand_voxel_weights(mask, current.channels());
    let mut out = current.values().to_vec();
    blend_in_place(&mut out, cached.values(), &w);
    current.with_values(out)
}

fn expand_voxel_weights(mask: &SoftMask3D, channels: usize) -> Vec<f64> {
    mask.weights()
        .iter()
        .flat_map(|w| std::iter::repeat_n(*w, channels))
        .collect()
}

/// Copies cached features onto `keep`. `boundary_weights`, aligned with
/// `keep`, is the cached share per coordinate (1 = full copy).
pub fn copy_slat_preserved(
    current: &SparseLatentSet,
    cached: &SparseLatentSet,
    keep: &CoordinateSet,
    boundary_weights: Option<&[f64]>,
) -> Result<SparseLatentSet> {
    if current.channels() != cached.channels() {
        return Err(Error::Shape(format!(
            "feature widths {} and {}",
            current.channels(),
            cached.channels()
        )));
    }
    check_boundary(keep, boundary_weights)?;
    let c = current.channels();
    let mut feats = current.feats().to_vec();
    for (i, coord) in keep.coords().iter().enumerate() {
        let (Some(dst), Some(src)) = (current.row_of(*coord), cached.row_of(*coord)) else {
            return Err(Error::Alignment(format!("kept coordinate {coord:?} missing from a latent set")));
        };
        let keep_share = boundary_weights.map_or(1.0, |b| b[i]);
        blend_in_place(&mut feats[dst * c..(dst + 1) * c], cached.feature(src), &vec![1.0 - keep_share; c]);
    }
    current.with_feats(feats)
}

fn check_boundary(keep: &CoordinateSet, boundary_weights: Option<&[f64]>) -> Result<()> {
    if let Some(b) = boundary_weights {
        if b.len() != keep.len() {
            return Err(Error::Shape(format!("{} boundary weights for {} kept coordinates", b.len(), keep.len())));
        }
        if let Some(w) = b.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Parameter(format!("boundary weight {w} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Hard attention mask: a query reads only keys of its own role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    roles: Vec<TokenRole>,
}

pub fn build_attention_mask(roles: &[TokenRole]) -> AttentionMask {
    AttentionMask { roles: roles.to_vec() }
}

impl AttentionMask {
    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.roles[query] == self.roles[key]
    }

    /// Row-major `tokens x tokens` allowance matrix.
    pub fn dense(&self) -> Vec<bool> {
        let n = self.roles.len();
        (0..n * n).map(|i| self.allowed(i / n, i % n)).collect()
    }
}

/// Everything one stage's edit pass reads.
pub struct StageContext<'a> {
    pub stage: Stage,
    pub trajectory: &'a TrajectoryCache,
    pub kv: Option<&'a KVCacheStore>,
    /// Per state value: 1 keeps the denoised value, 0 takes the cached one.
    pub weights: Vec<f64>,
    /// Per-token share of fresh keys/values; derived from `weights` if unset.
    pub token_mask: Option<Vec<f64>>,
    /// Starting state; the trajectory's terminal noise if unset.
    pub start: Option<Vec<f64>>,
}

impl<'a> StageContext<'a> {
    /// Dense stage with a voxel mask broadcast over `channels`.
    pub fn dense(
        trajectory: &'a TrajectoryCache,
        kv: Option<&'a KVCacheStore>,
        mask: &SoftMask3D,
        channels: usize,
    ) -> Result<Self> {
        Self::build(trajectory, kv, expand_voxel_weights(mask, channels))
    }

    /// Sparse stage over `coords`, preserving `keep` (optionally softened
    /// by per-coordinate cached shares).
    pub fn sparse(
        trajectory: &'a TrajectoryCache,
        kv: Option<&'a KVCacheStore>,
        coords: &[Coord],
        channels: usize,
        keep: &CoordinateSet,
        boundary_weights: Option<&[f64]>,
    ) -> Result<Self> {
        check_boundary(keep, boundary_weights)?;
        let mut weights = vec![1.0; coords.len() * channels];
        for (i, c) in keep.coords().iter().enumerate() {
            let row = coords
                .binary_search(c)
                .map_err(|_| Error::Alignment(format!("kept coordinate {c:?} is not active")))?;
            let w = 1.0 - boundary_weights.map_or(1.0, |b| b[i]);
            weights[row * channels..(row + 1) * channels].fill(w);
        }
        Self::build(trajectory, kv, weights)
    }

    fn build(trajectory: &'a TrajectoryCache, kv: Option<&'a KVCacheStore>, weights: Vec<f64>) -> Result<Self> {
        let stage = trajectory.stage();
        if let Some(store) = kv {
            if store.stage() != stage {
                return Err(Error::Alignment(format!("{} cache for a {stage} trajectory", store.stage())));
            }
        }
        if weights.len() != trajectory.input().len() {
            return Err(Error::Shape(format!(
                "{} mask weights for a state of {}",
                weights.len(),
                trajectory.input().len()
            )));
        }
        Ok(StageContext {
            stage,
            trajectory,
            kv,
            weights,
            token_mask: None,
            start: None,
        })
    }

    pub fn with_start(mut self, start: Vec<f64>) -> Self {
        self.start = Some(start);
        self
    }

    pub fn with_token_mask(mut self, mask: Vec<f64>) -> Self {
        self.token_mask = Some(mask);
        self
    }

    /// State values the latent replacement pulls back fully.
    pub fn preserved_count(&self) -> usize {
        self.weights.iter().filter(|w| **w == 0.0).count()
    }

    /// Per-token fresh share: a token is edited if any of its values may change.
    pub fn derive_token_mask(&self, field: &dyn VelocityField) -> Option<Vec<f64>> {
        if let Some(m) = &self.token_mask {
            return Some(m.clone());
        }
        let owner = field.token_of_state()?;
        let tokens = field.token_layout()?.len();
        let mut mask = vec![0.0; tokens];
        for (w, t) in self.weights.iter().zip(owner) {
            if *w > 0.0 {
                mask[t] = 1.0;
            }
        }
        Some(mask)
    }
}

pub fn token_roles(token_mask: &[f64]) -> Vec<TokenRole> {
    token_mask
        .iter()
        .map(|w| if *w > 0.0 { TokenRole::Edited } else { TokenRole::Preserved })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub latent: Vec<f64>,
    pub reports: Vec<StepReport>,
    pub token_mask: Option<Vec<f64>>,
}

/// Denoises from the context's noise with latent and key/value replacement.
#[allow(clippy::too_many_arguments)]
pub fn edit_denoise(
    ctx: &StageContext<'_>,
    field: &dyn VelocityField,
    schedule: &Schedule,
    options: &EditOptions,
    cond: &ConditionInput,
    neg: &ConditionInput,
    trace: Option<&mut AttentionTrace>,
) -> Result<EditOutcome> {
    options.validate()?;
    let token_mask = ctx.derive_token_mask(field);
    if let (Some(m), Some(layout)) = (&token_mask, field.token_layout()) {
        if m.len() != layout.len() {
            return Err(Error::Shape(format!("token mask of {} for {} tokens", m.len(), layout.len())));
        }
    }
    if options.latent_replacement && ctx.weights.iter().all(|w| *w == 1.0) {
        log::warn!("{} edit covers every value; denoising without preservation", ctx.stage);
    }
    let roles = match (&token_mask, options.attention_mask) {
        (Some(m), true) => Some(build_attention_mask(&token_roles(m))),
        _ => None,
    };
    let mut hook = match (options.kv_replacement, ctx.kv, &token_mask) {
        (true, Some(store), Some(m)) => {
            if let Some(layout) = field.token_layout() {
                store.check_layout(layout)?;
            }
            AttentionHook::inject(store, m)
        }
        (true, None, Some(_)) => {
            return Err(Error::Alignment(format!("{} key/value replacement without a cache", ctx.stage)));
        }
        _ => AttentionHook::off(),
    };
    hook = hook.with_roles(roles.as_ref().map(|m| m.roles())).with_trace(trace);

    let start = ctx.start.as_deref().unwrap_or(ctx.trajectory.terminal());
    let mut overwrite = |_k: usize, t: f64, x: &mut Vec<f64>| -> Result<()> {
        blend_in_place(x, ctx.trajectory.at(t)?, &ctx.weights);
        Ok(())
    };
    let callback: Option<&mut StepCallback<'_>> = if options.latent_replacement {
        Some(&mut overwrite)
    } else {
        None
    };
    let run = sample(field, schedule, start, &options.guidance, cond, neg, &mut hook, callback)?;
    Ok(EditOutcome {
        latent: run.data,
        reports: run.reports,
        token_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{attend, CondMode, FieldLayout, ToyConfig, ToyTransformer};
    use crate::lattice::{dilate_mask, Dims};
    use crate::solver::{invert, make_schedule, ScheduleKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, c: usize, v: f64) -> DenseLatentGrid {
        DenseLatentGrid::new(Dims::cube(n), c, vec![v; n * n * n * c]).unwrap()
    }

    fn random(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn st_blend_cases() {
        let d = Dims::cube(3);
        let cur = DenseLatentGrid::new(d, 2, random(54, 1)).unwrap();
        let old = DenseLatentGrid::new(d, 2, random(54, 2)).unwrap();
        let ones = SoftMask3D::from(&BinaryMask3D::full(d).unwrap());
        let zeros = SoftMask3D::from(&BinaryMask3D::empty(d).unwrap());
        assert_eq!(blend_st_latent(&cur, &old, &ones).unwrap(), cur);
        assert_eq!(blend_st_latent(&cur, &old, &zeros).unwrap(), old);
        let half = SoftMask3D::new(d, vec![0.5; 27]).unwrap();
        let out = blend_st_latent(&grid(3, 2, 2.0), &grid(3, 2, 0.0), &half).unwrap();
        assert!(out.values().iter().all(|v| *v == 1.0));
        assert!(blend_st_latent(&cur, &grid(3, 1, 0.0), &half).is_err());
    }

    fn set(coords: &[Coord], seed: u64) -> SparseLatentSet {
        SparseLatentSet::new(8, 3, coords.to_vec(), random(coords.len() * 3, seed)).unwrap()
    }

    const FIVE: [Coord; 5] = [[0, 0, 0], [0, 1, 0], [1, 0, 2], [3, 3, 3], [7, 0, 1]];

    #[test]
    fn slat_copy_cases() {
        let cur = set(&FIVE, 3);
        let old = set(&FIVE, 4);
        let all = CoordinateSet::new(FIVE.to_vec());
        assert_eq!(copy_slat_preserved(&cur, &old, &all, None).unwrap().feats(), old.feats());
        assert_eq!(copy_slat_preserved(&cur, &old, &CoordinateSet::default(), None).unwrap(), cur);

        let keep = CoordinateSet::new(vec![FIVE[3], FIVE[1]]);
        let out = copy_slat_preserved(&cur, &old, &keep, None).unwrap();
        for row in 0..5 {
            let want = if row == 1 || row == 3 { old.feature(row) } else { cur.feature(row) };
            assert_eq!(out.feature(row), want);
        }
        assert_eq!(out.coords(), cur.coords());
    }

    #[test]
    fn slat_copy_boundary_and_errors() {
        let cur = set(&FIVE, 3);
        let old = set(&FIVE, 4);
        let keep = CoordinateSet::new(vec![FIVE[0], FIVE[4]]);
        let out = copy_slat_preserved(&cur, &old, &keep, Some(&[1.0, 0.25])).unwrap();
        assert_eq!(out.feature(0), old.feature(0));
        for ch in 0..3 {
            let want = 0.75 * cur.feature(4)[ch] + 0.25 * old.feature(4)[ch];
            assert_eq!(out.feature(4)[ch], want);
        }
        let stray = CoordinateSet::new(vec![[5, 5, 5]]);
        assert!(matches!(copy_slat_preserved(&cur, &old, &stray, None), Err(Error::Alignment(_))));
        assert!(copy_slat_preserved(&cur, &old, &keep, Some(&[1.0])).is_err());
        assert!(copy_slat_preserved(&cur, &old, &keep, Some(&[1.0, 2.0])).is_err());
    }

    /// Softmax attention over an explicit allowance matrix.
    fn dense_masked_attention(q: &[f64], k: &[f64], v: &[f64], d: usize, heads: usize, allow: &[bool]) -> Vec<f64> {
        let n = q.len() / d;
        let hd = d / heads;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for h in 0..heads {
                let logits: Vec<Option<f64>> = (0..n)
                    .map(|j| {
                        allow[i * n + j].then(|| {
                            (0..hd).map(|e| q[i * d + h * hd + e] * k[j * d + h * hd + e]).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                    })
                    .collect();
                let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
                let z: f64 = logits.iter().flatten().map(|l| (l - max).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    if let Some(l) = l {
                        let p = (l - max).exp() / z;
                        for e in 0..hd {
                            out[i * d + h * hd + e] += p * v[j * d + h * hd + e];
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_mask_cases() {
        use TokenRole::*;
        let (d, heads) = (8, 2);
        let q = random(4 * d, 5);
        let k = random(4 * d, 6);
        let v = random(4 * d, 7);

        let all = build_attention_mask(&[Preserved; 4]);
        assert!(all.dense().iter().all(|a| *a));
        assert_eq!(attend(&q, &k, &v, d, heads, Some(all.roles())), attend(&q, &k, &v, d, heads, None));

        let m = build_attention_mask(&[Edited, Preserved, Edited, Preserved]);
        let allow = m.dense();
        assert_eq!(allow.iter().filter(|a| **a).count(), 8);
        assert!(m.allowed(0, 2) && m.allowed(1, 3) && !m.allowed(0, 1) && !m.allowed(3, 2));
        let got = attend(&q, &k, &v, d, heads, Some(m.roles()));
        let want = dense_masked_attention(&q, &k, &v, d, heads, &allow);
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));

        let solo = build_attention_mask(&[Preserved, Edited, Preserved, Preserved]);
        let out = attend(&q, &k, &v, d, heads, Some(solo.roles()));
        assert_eq!(&out[d..2 * d], &v[d..2 * d]);
    }

    struct Rig {
        field: ToyTransformer,
        schedule: Schedule,
        data: Vec<f64>,
        trajectory: TrajectoryCache,
        kv: KVCacheStore,
        guidance: GuidanceConfig,
    }

    const N: usize = 8;
    const C: usize = 2;

    fn cond(name: &str) -> ConditionInput {
        ConditionInput::named(CondMode::Conditional, name, 4, 9)
    }

    fn neg() -> ConditionInput {
        ConditionInput::named(CondMode::Negative, "", 4, 9)
    }

    fn rig(steps: usize) -> Rig {
        let config = ToyConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            token_grid_side: 4,
            cond_width: 4,
            output_gain: 0.5,
        };
        let layout = FieldLayout::Dense {
            dims: Dims::cube(N),
            channels: C,
        };
        let field = ToyTransformer::new(config, layout, 42).unwrap();
        let schedule = make_schedule(steps, ScheduleKind::Uniform).unwrap();
        let data = random(N * N * N * C, 11);
        let guidance = GuidanceConfig::default();
        let mut kv = KVCacheStore::new(Stage::St, field.token_layout().unwrap().clone());
        let inv = invert(
            &field,
            &schedule,
            &data,
            &guidance,
            &cond("source"),
            &neg(),
            Stage::St,
            &mut AttentionHook::capture(&mut kv),
        )
        .unwrap();
        Rig {
            field,
            schedule,
            data,
            trajectory: inv.trajectory,
            kv,
            guidance,
        }
    }

    fn half_mask() -> BinaryMask3D {
        let d = Dims::cube(N);
        let bits = (0..d.voxel_count()).map(|i| d.coord_of(i)[0] >= 4).collect();
        BinaryMask3D::new(d, bits).unwrap()
    }

    fn options(r: &Rig, kv: bool, soft: bool) -> EditOptions {
        EditOptions {
            latent_replacement: true,
            soft_mask: soft.then(SoftMaskParams::default),
            kv_replacement: kv,
            attention_mask: false,
            guidance: r.guidance,
        }
    }

    fn run(r: &Rig, mask: &BinaryMask3D, opts: &EditOptions, start: Option<Vec<f64>>) -> EditOutcome {
        let soft = opts.latent_mask(mask).unwrap();
        let mut ctx = StageContext::dense(&r.trajectory, Some(&r.kv), &soft, C).unwrap();
        if let Some(s) = start {
            ctx = ctx.with_start(s);
        }
        edit_denoise(&ctx, &r.field, &r.schedule, opts, &cond("target"), &neg(), None).unwrap()
    }

    #[test]
    fn empty_mask_reconstructs_input_exactly() {
        let r = rig(4);
        let empty = BinaryMask3D::empty(Dims::cube(N)).unwrap();
        for opts in [options(&r, true, true), options(&r, false, false)] {
            assert_eq!(run(&r, &empty, &opts, None).latent, r.data);
        }
    }

    #[test]
    fn full_mask_without_kv_is_plain_sampling() {
        let r = rig(4);
        let full = BinaryMask3D::full(Dims::cube(N)).unwrap();
        let out = run(&r, &full, &options(&r, false, false), None);
        let plain = sample(
            &r.field,
            &r.schedule,
            r.trajectory.terminal(),
            &r.guidance,
            &cond("target"),
            &neg(),
            &mut AttentionHook::off(),
            None,
        )
        .unwrap();
        assert_eq!(out.latent, plain.data);
    }

    #[test]
    fn half_edit_preserves_the_other_half() {
        let r = rig(4);
        let mask = half_mask();
        for soft in [false, true] {
            let opts = options(&r, true, soft);
            let out = run(&r, &mask, &opts, None);
            let region = opts.edit_region(&mask).unwrap();
            let d = Dims::cube(N);
            let mut changed = 0;
            for v in 0..d.voxel_count() {
                let span = v * C..(v + 1) * C;
                if region.is_set(d.coord_of(v)) {
                    changed += usize::from(out.latent[span.clone()] != r.data[span]);
                } else {
                    assert_eq!(out.latent[span.clone()], r.data[span]);
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn kv_with_every_token_edited_is_a_no_op() {
        let r = rig(3);
        let full = BinaryMask3D::full(Dims::cube(N)).unwrap();
        let on = run(&r, &full, &options(&r, true, false), None);
        let off = run(&r, &full, &options(&r, false, false), None);
        assert_eq!(on.latent, off.latent);
        assert!(on.token_mask.unwrap().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn hard_mask_isolates_preserved_attention_from_edited_noise() {
        let r = rig(3);
        let mask = half_mask();
        let mut opts = options(&r, true, false);
        opts.attention_mask = true;
        opts.latent_replacement = false;
        let soft = opts.latent_mask(&mask).unwrap();
        let trace_of = |start: Vec<f64>| {
            let ctx = StageContext::dense(&r.trajectory, Some(&r.kv), &soft, C)
                .unwrap()
                .with_start(start);
            let mut trace = AttentionTrace::default();
            let out = edit_denoise(&ctx, &r.field, &r.schedule, &opts, &cond("t"), &neg(), Some(&mut trace)).unwrap();
            (trace, out.token_mask.unwrap())
        };
        let base = r.trajectory.terminal().to_vec();
        let mut bumped = base.clone();
        let d = Dims::cube(N);
        for v in 0..d.voxel_count() {
            if mask.is_set(d.coord_of(v)) {
                for c in 0..C {
                    bumped[v * C + c] += 0.37;
                }
            }
        }
        let (a, tokens) = trace_of(base);
        let (b, _) = trace_of(bumped);
        assert_eq!(a.records.len(), b.records.len());
        let mut edited_differs = false;
        for (ra, rb) in a.records.iter().zip(&b.records) {
            for (t, w) in tokens.iter().enumerate() {
                let rows = t * ra.width..(t + 1) * ra.width;
                if *w == 0.0 {
                    assert_eq!(ra.output[rows.clone()], rb.output[rows]);
                } else {
                    edited_differs |= ra.output[rows.clone()] != rb.output[rows];
                }
            }
        }
        assert!(edited_differs);
    }

    #[test]
    fn schedule_mismatch_is_a_cache_miss() {
        let r = rig(4);
        let other = make_schedule(5, ScheduleKind::Uniform).unwrap();
        let soft = SoftMask3D::from(&half_mask());
        let ctx = StageContext::dense(&r.trajectory, Some(&r.kv), &soft, C).unwrap();
        let err = edit_denoise(&ctx, &r.field, &other, &options(&r, true, false), &cond("t"), &neg(), None)
            .unwrap_err();
        assert!(matches!(err, Error::CacheMiss(_)), "{err}");
        assert!(err.to_string().contains("layer="));
    }

    #[test]
    fn soft_mask_values_lie_between_cache_and_free_run() {
        let r = rig(3);
        let mask = half_mask();
        let opts = options(&r, false, true);
        let soft = opts.latent_mask(&mask).unwrap();
        assert!(mask.set_coords().iter().all(|c| soft.weight(*c) == 1.0));
        assert!(soft.support().is_subset_of(&dilate_mask(&mask, 2)));
        // one step: the blended value sits between the free step and the cache
        let one = make_schedule(1, ScheduleKind::Uniform).unwrap();
        let mut kv = KVCacheStore::new(Stage::St, r.field.token_layout().unwrap().clone());
        let inv = invert(&r.field, &one, &r.data, &r.guidance, &cond("s"), &neg(), Stage::St, &mut AttentionHook::capture(&mut kv)).unwrap();
        let ctx = StageContext::dense(&inv.trajectory, Some(&kv), &soft, C).unwrap();
        let edited = edit_denoise(&ctx, &r.field, &one, &opts, &cond("t"), &neg(), None).unwrap().latent;
        let free = sample(&r.field, &one, &inv.noise, &r.guidance, &cond("t"), &neg(), &mut AttentionHook::off(), None)
            .unwrap()
            .data;
        for i in 0..edited.len() {
            let (lo, hi) = (free[i].min(r.data[i]), free[i].max(r.data[i]));
            assert!(edited[i] >= lo - 1e-12 && edited[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn sparse_context_weights() {
        let r = rig(1);
        let coords: Vec<Coord> = FIVE.to_vec();
        let traj = TrajectoryCache::new(Stage::Slat, vec![0.0, 1.0], vec![vec![0.0; 15], vec![1.0; 15]]).unwrap();
        let keep = CoordinateSet::new(vec![FIVE[2]]);
        let ctx = StageContext::sparse(&traj, None, &coords, 3, &keep, Some(&[0.5])).unwrap();
        assert_eq!(&ctx.weights[6..9], &[0.5; 3]);
        assert_eq!(ctx.weights.iter().filter(|w| **w == 1.0).count(), 12);
        let stray = CoordinateSet::new(vec![[6, 6, 6]]);
        assert!(StageContext::sparse(&traj, None, &coords, 3, &stray, None).is_err());
        assert!(StageContext::sparse(&traj, Some(&r.kv), &coords, 3, &keep, None).is_err());
    }
}
