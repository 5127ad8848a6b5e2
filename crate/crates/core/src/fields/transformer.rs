//! A small seeded attention network used as a stand-in denoiser.
//!
//! Every token gets an input projection of its features, a sinusoidal code
//! of its position, a sinusoidal code of the time, and the condition
//! embedding. Blocks are pre-norm multi-head self-attention followed by a
//! two-layer SiLU feed-forward, both residual. All reductions run in a
//! fixed order, so outputs are bitwise reproducible regardless of how many
//! threads rayon uses.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{AttentionHook, ConditionInput, HookMode, TokenRole, TraceRecord, VelocityField};
use crate::error::{Error, Result};
use crate::kvstore::{replace_kv, AttnType, KVEntry, KVKey, TimeKey, TokenLayout};
use crate::lattice::{Coord, Dims};

const POS_FREQS: [f64; 3] = [1.0, 2.0, 4.0];
const TIME_FREQS: [f64; 3] = [0.25, 0.5, 1.0];
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Tokens per axis for dense grids; the grid is cut into cubic patches.
    pub token_grid_side: usize,
    pub cond_width: usize,
    /// Scale of the output projection.
    pub output_gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            layers: 4,
            model_dim: 64,
            heads: 4,
            token_grid_side: 8,
            cond_width: 8,
            output_gain: 0.5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 {
            return Err(Error::Parameter("toy network needs layers, width and heads".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.token_grid_side == 0 || self.token_grid_side.pow(3) > 1024 {
            return Err(Error::Parameter(format!(
                "token grid side {} must give 1..=1024 tokens",
                self.token_grid_side
            )));
        }
        if !self.output_gain.is_finite() {
            return Err(Error::Parameter("output gain".into()));
        }
        Ok(())
    }
}

/// How the flat state maps onto tokens.
#[derive(Debug, Clone)]
pub enum FieldLayout {
    /// Dense cubic grid with `channels` per voxel.
    Dense { dims: Dims, channels: usize },
    /// Sparse set over fixed coordinates, `channels` per coordinate.
    Sparse {
        resolution: usize,
        coords: Vec<Coord>,
        channels: usize,
    },
}

struct Linear {
    w: Vec<f64>,
    b: Vec<f64>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, gain: f64) -> Self {
        let scale = gain / (d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let b = (0..d_out)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.02)
            .collect();
        Linear { w, b, d_in, d_out }
    }

    /// `x` is `rows x d_in`; returns `rows x d_out`.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.d_in;
        let mut out = vec![0.0; rows * self.d_out];
        out.par_chunks_mut(self.d_out)
            .zip(x.par_chunks(self.d_in))
            .for_each(|(o, xi)| {
                o.copy_from_slice(&self.b);
                for (k, xk) in xi.iter().enumerate() {
                    let wk = &self.w[k * self.d_out..(k + 1) * self.d_out];
                    for (oj, wj) in o.iter_mut().zip(wk) {
                        *oj += xk * wj;
                    }
                }
            });
        out
    }
}

struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    w1: Linear,
    w2: Linear,
}

pub struct ToyTransformer {
    config: ToyConfig,
    layout: TokenLayout,
    /// For each token, the state indices of its features in token order.
    gather: Vec<usize>,
    token_width: usize,
    state_len: usize,
    pos_codes: Vec<f64>,
    input: Linear,
    blocks: Vec<Block>,
    output: Linear,
}

fn layer_norm(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(width).zip(x.par_chunks(width)).for_each(|(o, r)| {
        let mean = r.iter().sum::<f64>() / width as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (oi, ri) in o.iter_mut().zip(r) {
            *oi = (ri - mean) * inv;
        }
    });
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl ToyTransformer {
    pub fn new(config: ToyConfig, layout: FieldLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        let (token_layout, gather, token_width, state_len) = match layout {
            FieldLayout::Dense { dims, channels } => {
                if !dims.is_cubic() {
                    return Err(Error::Dimension(format!("dense field grid {dims} is not cubic")));
                }
                let side = config.token_grid_side;
                if dims.h % side != 0 {
                    return Err(Error::Parameter(format!(
                        "grid side {} not divisible by token side {side}",
                        dims.h
                    )));
                }
                let patch = dims.h / side;
                let mut coords: Vec<Coord> = Vec::with_capacity(side.pow(3));
                for x in 0..side {
                    for y in 0..side {
                        for z in 0..side {
                            coords.push([x as u16, y as u16, z as u16]);
                        }
                    }
                }
                let token_width = patch.pow(3) * channels;
                let mut gather = Vec::with_capacity(coords.len() * token_width);
                for c in &coords {
                    for dz in 0..patch {
                        for dy in 0..patch {
                            for dx in 0..patch {
                                let (x, y, z) = (
                                    c[0] as usize * patch + dx,
                                    c[1] as usize * patch + dy,
                                    c[2] as usize * patch + dz,
                                );
                                let base = dims.index(x, y, z) * channels;
                                gather.extend(base..base + channels);
                            }
                        }
                    }
                }
                let layout = TokenLayout {
                    resolution: dims.h,
                    patch,
                    coords,
                };
                (layout, gather, token_width, dims.voxel_count() * channels)
            }
            FieldLayout::Sparse {
                resolution,
                coords,
                channels,
            } => {
                if coords.is_empty() {
                    return Err(Error::Empty("sparse field over no coordinates".into()));
                }
                let n = coords.len() * channels;
                let layout = TokenLayout {
                    resolution,
                    patch: 1,
                    coords,
                };
                (layout, (0..n).collect(), channels, n)
            }
        };
        if token_width == 0 {
            return Err(Error::Parameter("tokens carry no features".into()));
        }

        let extent = (token_layout.resolution / token_layout.patch).max(1) as f64;
        let mut pos_codes = Vec::with_capacity(token_layout.len() * 18);
        for c in &token_layout.coords {
            for axis in c {
                let p = (*axis as f64 + 0.5) / extent;
                for f in POS_FREQS {
                    pos_codes.push((PI * f * p).sin());
                    pos_codes.push((PI * f * p).cos());
                }
            }
        }

        let d = config.model_dim;
        let d_in = token_width + 18 + 2 * TIME_FREQS.len() + config.cond_width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Linear::random(&mut rng, d_in, d, 1.0);
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: Linear::random(&mut rng, d, d, 1.0),
                wk: Linear::random(&mut rng, d, d, 1.0),
                wv: Linear::random(&mut rng, d, d, 1.0),
                wo: Linear::random(&mut rng, d, d, 0.5),
                w1: Linear::random(&mut rng, d, 2 * d, 1.0),
                w2: Linear::random(&mut rng, 2 * d, d, 0.5),
            })
            .collect();
        let output = Linear::random(&mut rng, d, token_width, config.output_gain);
        Ok(ToyTransformer {
            config,
            layout: token_layout,
            gather,
            token_width,
            state_len,
            pos_codes,
            input,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn token_count(&self) -> usize {
        self.layout.len()
    }

    fn embed(&self, state: &[f64], t: f64, cond: &ConditionInput) -> Vec<f64> {
        let n = self.token_count();
        let d_in = self.input.d_in;
        let mut x = Vec::with_capacity(n * d_in);
        let time_code: Vec<f64> = TIME_FREQS
            .iter()
            .flat_map(|f| [(2.0 * PI * f * t).sin(), (2.0 * PI * f * t).cos()])
            .collect();
        let zeros = vec![0.0; self.config.cond_width];
        let cond_code = cond.embedding.as_deref().unwrap_or(&zeros);
        for tok in 0..n {
            let g = &self.gather[tok * self.token_width..(tok + 1) * self.token_width];
            x.extend(g.iter().map(|i| state[*i]));
            x.extend_from_slice(&self.pos_codes[tok * 18..(tok + 1) * 18]);
            x.extend_from_slice(&time_code);
            x.extend_from_slice(cond_code);
        }
        self.input.apply(&x)
    }
}

/// Multi-head attention of `q` over `k`, `v` (all `tokens x d`). With roles,
/// a query only reads keys of its own role.
pub(crate) fn attend(q: &[f64], k: &[f64], v: &[f64], d: usize, heads: usize, roles: Option<&[TokenRole]>) -> Vec<f64> {
    let hd = d / heads;
    let n = q.len() / d;
    let scale = 1.0 / (hd as f64).sqrt();
    // keys as `[h][c][token]`, values as `[h][token][c]`
    let mut kt = vec![0.0; n * d];
    let mut vh = Vec::with_capacity(n * d);
    for h in 0..heads {
        for j in 0..n {
            for c in 0..hd {
                kt[(h * hd + c) * n + j] = k[j * d + h * hd + c];
            }
            vh.extend_from_slice(&v[j * d + h * hd..j * d + (h + 1) * hd]);
        }
    }
    let mut out = vec![0.0; n * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, oi)| {
        let keys: Option<Vec<usize>> = roles.map(|r| (0..n).filter(|j| r[i] == r[*j]).collect());
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            scores.fill(0.0);
            for c in 0..hd {
                let qc = q[i * d + h * hd + c] * scale;
                let row = &kt[(h * hd + c) * n..(h * hd + c + 1) * n];
                for (s, kv) in scores.iter_mut().zip(row) {
                    *s += qc * kv;
                }
            }
            let vh = &vh[h * n * hd..(h + 1) * n * hd];
            let oh = &mut oi[h * hd..(h + 1) * hd];
            match &keys {
                None => softmax_mix(&mut scores, 0..n, vh, hd, oh),
                Some(keys) => softmax_mix(&mut scores, keys.iter().copied(), vh, hd, oh),
            }
        }
    });
    out
}

/// Softmax over the listed score entries, then the weighted sum of their value rows.
fn softmax_mix(scores: &mut [f64], keys: impl Iterator<Item = usize> + Clone, v: &[f64], hd: usize, out: &mut [f64]) {
    let max = keys.clone().fold(f64::NEG_INFINITY, |m, j| m.max(scores[j]));
    let mut denom = 0.0;
    for j in keys.clone() {
        scores[j] = (scores[j] - max).exp();
        denom += scores[j];
    }
    for j in keys {
        let p = scores[j];
        for (o, vv) in out.iter_mut().zip(&v[j * hd..(j + 1) * hd]) {
            *o += p * vv;
        }
    }
    let inv = 1.0 / denom;
    out.iter_mut().for_each(|o| *o *= inv);
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|v| *v as f32).collect()
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|v| *v as f64).collect()
}

impl VelocityField for ToyTransformer {
    fn state_len(&self) -> usize {
        self.state_len
    }

    fn cond_width(&self) -> usize {
        self.config.cond_width
    }

    fn token_layout(&self) -> Option<&TokenLayout> {
        Some(&self.layout)
    }

    fn token_of_state(&self) -> Option<Vec<usize>> {
        let mut owner = vec![0; self.state_len];
        for (i, s) in self.gather.iter().enumerate() {
            owner[*s] = i / self.token_width;
        }
        Some(owner)
    }

    fn evaluate(&self, state: &[f64], t: f64, cond: &ConditionInput, hook: &mut AttentionHook<'_>) -> Result<Vec<f64>> {
        let n = self.token_count();
        let d = self.config.model_dim;
        if let Some(r) = hook.roles {
            if r.len() != n {
                return Err(Error::Shape(format!("{} token roles for {n} tokens", r.len())));
            }
        }
        match &hook.mode {
            HookMode::Capture(sink) => sink.check_layout(&self.layout)?,
            HookMode::Inject { source, token_mask } => {
                source.check_layout(&self.layout)?;
                if token_mask.len() != n {
                    return Err(Error::Shape(format!("{} token weights for {n} tokens", token_mask.len())));
                }
            }
            HookMode::Off => {}
        }

        let mut h = self.embed(state, t, cond);
        for (layer, block) in self.blocks.iter().enumerate() {
            let hn = layer_norm(&h, d);
            let q = block.wq.apply(&hn);
            let mut k = block.wk.apply(&hn);
            let mut v = block.wv.apply(&hn);
            let stage = match &hook.mode {
                HookMode::Capture(s) => Some(s.stage()),
                HookMode::Inject { source, .. } => Some(source.stage()),
                HookMode::Off => None,
            };
            if let Some(stage) = stage {
                let key = KVKey {
                    stage,
                    time: TimeKey::new(t),
                    branch: cond.mode,
                    layer_id: layer as u32,
                    attn_type: AttnType::SelfAttention,
                    block_order: layer as u32,
                };
                match &mut hook.mode {
                    HookMode::Capture(sink) => {
                        let entry = KVEntry::new(n, d, self.config.heads, to_f32(&k), to_f32(&v))?;
                        sink.put(key, entry)?;
                    }
                    HookMode::Inject { source, token_mask } => {
                        let cached = source.get(&key)?;
                        if cached.width != d {
                            return Err(Error::Shape(format!("{key}: cached width {} vs {d}", cached.width)));
                        }
                        let (k2, v2) = replace_kv(&k, &v, &to_f64(&cached.k), &to_f64(&cached.v), token_mask, d)?;
                        k = k2;
                        v = v2;
                    }
                    HookMode::Off => unreachable!(),
                }
            }
            let attn = block.wo.apply(&attend(&q, &k, &v, d, self.config.heads, hook.roles));
            if let Some(trace) = hook.trace.as_deref_mut() {
                trace.records.push(TraceRecord {
                    time: TimeKey::new(t),
                    branch: cond.mode,
                    layer: layer as u32,
                    output: attn.clone(),
                    width: d,
                });
            }
            h.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);

            let hn = layer_norm(&h, d);
            let mut mid = block.w1.apply(&hn);
            mid.iter_mut().for_each(|x| *x = silu(*x));
            let ff = block.w2.apply(&mid);
            h.iter_mut().zip(&ff).for_each(|(a, b)| *a += b);
        }
        let out_tokens = self.output.apply(&layer_norm(&h, d));
        let mut out = vec![0.0; self.state_len];
        for (i, s) in self.gather.iter().enumerate() {
            out[*s] = out_tokens[i];
        }
        Ok(out)
    }
}
