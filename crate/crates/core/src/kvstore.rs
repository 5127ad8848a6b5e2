//! Store of attention keys/values captured during inversion, and the masked
//! row replacement applied while editing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fields::CondMode;
use crate::lattice::Coord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    St,
    Slat,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::St => "st",
            Stage::Slat => "slat",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "st" => Ok(Stage::St),
            "slat" => Ok(Stage::Slat),
            _ => Err(Error::Format(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttnType {
    SelfAttention,
}

impl fmt::Display for AttnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("self")
    }
}

impl FromStr for AttnType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(AttnType::SelfAttention),
            _ => Err(Error::Format(format!("unknown attention type {s:?}"))),
        }
    }
}

/// Evaluation time compared by exact bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeKey(u64);

impl TimeKey {
    pub fn new(t: f64) -> Self {
        // fold -0.0 onto 0.0 so the origin has a single key
        TimeKey((t + 0.0).to_bits())
    }

    pub fn value(self) -> f64 {
        f64::from_bits(self.0)
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 16 {
            return Err(Error::Format(format!("time key {s:?} is not 16 hex digits")));
        }
        let bits = u64::from_str_radix(s, 16).map_err(|_| Error::Format(format!("bad time key {s:?}")))?;
        let t = f64::from_bits(bits);
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Format(format!("time key {s} decodes to {t}, outside [0, 1]")));
        }
        Ok(TimeKey(bits))
    }
}

impl fmt::Debug for TimeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (0x{})", self.value(), self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KVKey {
    pub stage: Stage,
    pub time: TimeKey,
    pub branch: CondMode,
    pub layer_id: u32,
    pub attn_type: AttnType,
    pub block_order: u32,
}

impl fmt::Display for KVKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "KVKey{{stage={}, t={:?}, branch={}, layer={}, attn={}, block={}}}",
            self.stage, self.time, self.branch, self.layer_id, self.attn_type, self.block_order
        )
    }
}

/// Key and value rows for one attention layer evaluation, `tokens x width`
/// with `width = heads * head_dim` (head-major within a row).
#[derive(Debug, Clone, PartialEq)]
pub struct KVEntry {
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

impl KVEntry {
    pub fn new(tokens: usize, width: usize, heads: usize, k: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!("width {width} not divisible into {heads} heads")));
        }
        if k.len() != tokens * width || v.len() != k.len() {
            return Err(Error::Shape(format!(
                "K has {} and V has {} values, expected {} each",
                k.len(),
                v.len(),
                tokens * width
            )));
        }
        Ok(KVEntry { tokens, width, heads, k, v })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Voxel coordinates the token rows refer to. Dense stages group voxels into
/// `patch^3` blocks; `coords` then holds block indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub resolution: usize,
    pub patch: usize,
    pub coords: Vec<Coord>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheStore {
    stage: Stage,
    layout: TokenLayout,
    entries: BTreeMap<KVKey, KVEntry>,
}

impl KVCacheStore {
    pub fn new(stage: Stage, layout: TokenLayout) -> Self {
        KVCacheStore {
            stage,
            layout,
            entries: BTreeMap::new(),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &KVKey> {
        self.entries.keys()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|e| e.k.len() + e.v.len()).sum()
    }

    pub fn put(&mut self, key: KVKey, entry: KVEntry) -> Result<()> {
        if key.stage != self.stage {
            return Err(Error::Alignment(format!("{key} written to a {} store", self.stage)));
        }
        if entry.tokens != self.layout.len() {
            return Err(Error::Shape(format!(
                "{key}: {} token rows for a layout of {}",
                entry.tokens,
                self.layout.len()
            )));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::Collision(key));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn get(&self, key: &KVKey) -> Result<&KVEntry> {
        self.entries.get(key).ok_or(Error::CacheMiss(*key))
    }

    pub fn check_layout(&self, layout: &TokenLayout) -> Result<()> {
        if &self.layout != layout {
            return Err(Error::Alignment(format!(
                "{} token layout changed between capture ({} tokens, patch {}) and use ({} tokens, patch {})",
                self.stage,
                self.layout.len(),
                self.layout.patch,
                layout.len(),
                layout.patch
            )));
        }
        Ok(())
    }
}

/// Row blend `w * new + (1 - w) * cache` with `w` broadcast over each row of
/// `width` values. Rows with `w == 1` or `w == 0` are copied verbatim.
pub fn replace_rows(new: &[f64], cache: &[f64], w: &[f64], width: usize) -> Result<Vec<f64>> {
    if new.len() != cache.len() || new.len() != w.len() * width {
        return Err(Error::Shape(format!(
            "replace: new {} / cache {} values vs {} rows of {width}",
            new.len(),
            cache.len(),
            w.len()
        )));
    }
    let mut out = Vec::with_capacity(new.len());
    for (row, wi) in w.iter().enumerate() {
        let span = row * width..(row + 1) * width;
        if *wi == 1.0 {
            out.extend_from_slice(&new[span]);
        } else if *wi == 0.0 {
            out.extend_from_slice(&cache[span]);
        } else {
            out.extend(new[span.clone()].iter().zip(&cache[span]).map(|(n, c)| wi * n + (1.0 - wi) * c));
        }
    }
    Ok(out)
}

/// Applies [`replace_rows`] to keys and values.
pub fn replace_kv(
    k_new: &[f64],
    v_new: &[f64],
    k_cache: &[f64],
    v_cache: &[f64],
    token_mask: &[f64],
    width: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(w) = token_mask.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Parameter(format!("token mask weight {w} outside [0, 1]")));
    }
    Ok((
        replace_rows(k_new, k_cache, token_mask, width)?,
        replace_rows(v_new, v_cache, token_mask, width)?,
    ))
}

const KV_MANIFEST: &str = "kv_manifest.txt";
const KV_LAYOUT: &str = "kv_layout.bin";

/// One `entry = ...` line of a spill manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpillRecord {
    pub file: String,
    pub key: KVKey,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpillManifest {
    pub stage: Stage,
    pub resolution: usize,
    pub patch: usize,
    pub token_count: usize,
    pub records: Vec<SpillRecord>,
}

fn entry_file_name(key: &KVKey) -> String {
    format!(
        "{}_{}_{}_{}.kv",
        key.stage,
        key.layer_id,
        key.branch,
        key.time.to_hex()
    )
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::Format(format!("bad {what} {s:?}")))
}

/// Parses the text manifest written by [`KVCacheStore::spill`].
pub fn parse_spill_manifest(text: &str) -> Result<SpillManifest> {
    let mut stage = None;
    let (mut resolution, mut patch, mut token_count) = (None, None, None);
    let mut records = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key = value", lineno + 1)))?;
        let v = v.trim();
        match k.trim() {
            "stage" => stage = Some(v.parse::<Stage>()?),
            "resolution" => resolution = Some(parse_usize(v, "resolution")?),
            "patch" => patch = Some(parse_usize(v, "patch")?),
            "tokens" => token_count = Some(parse_usize(v, "tokens")?),
            "entry" => {
                let f: Vec<&str> = v.split_whitespace().collect();
                if f.len() != 9 {
                    return Err(Error::Format(format!("line {}: entry needs 9 fields", lineno + 1)));
                }
                let stage_v: Stage = f[1].parse()?;
                let key = KVKey {
                    stage: stage_v,
                    time: TimeKey::from_hex(f[2])?,
                    branch: f[3].parse()?,
                    layer_id: parse_usize(f[4], "layer")? as u32,
                    attn_type: f[5].parse()?,
                    block_order: parse_usize(f[6], "block")? as u32,
                };
                let tokens = parse_usize(f[7], "tokens")?;
                let (width, heads) = f[8]
                    .split_once('/')
                    .ok_or_else(|| Error::Format(format!("line {}: width/heads", lineno + 1)))?;
                let file = f[0].to_string();
                if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                    return Err(Error::Format(format!("entry file name {file:?} is not a plain name")));
                }
                records.push(SpillRecord {
                    file,
                    key,
                    tokens,
                    width: parse_usize(width, "width")?,
                    heads: parse_usize(heads, "heads")?,
                });
            }
            other => return Err(Error::Format(format!("line {}: unknown key {other:?}", lineno + 1))),
        }
    }
    let stage = stage.ok_or_else(|| Error::Format("manifest lacks stage".into()))?;
    if let Some(r) = records.iter().find(|r| r.key.stage != stage) {
        return Err(Error::Format(format!("{} in a {stage} manifest", r.key)));
    }
    Ok(SpillManifest {
        stage,
        resolution: resolution.ok_or_else(|| Error::Format("manifest lacks resolution".into()))?,
        patch: patch.ok_or_else(|| Error::Format("manifest lacks patch".into()))?,
        token_count: token_count.ok_or_else(|| Error::Format("manifest lacks tokens".into()))?,
        records,
    })
}

fn f32_bytes(values: &[f32]) -> impl Iterator<Item = u8> + '_ {
    values.iter().flat_map(|v| v.to_le_bytes())
}

impl KVCacheStore {
    /// Writes one raw little-endian `f32` file per entry (K rows then V
    /// rows), the token layout, and a text manifest.
    pub fn spill(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!(
            "# kv spill\nstage = {}\nresolution = {}\npatch = {}\ntokens = {}\n",
            self.stage,
            self.layout.resolution,
            self.layout.patch,
            self.layout.len()
        );
        for (key, entry) in &self.entries {
            let name = entry_file_name(key);
            let bytes: Vec<u8> = f32_bytes(&entry.k).chain(f32_bytes(&entry.v)).collect();
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            manifest.push_str(&format!(
                "entry = {name} {} {} {} {} {} {} {} {}/{}\n",
                key.stage,
                key.time.to_hex(),
                key.branch,
                key.layer_id,
                key.attn_type,
                key.block_order,
                entry.tokens,
                entry.width,
                entry.heads
            ));
        }
        let layout: Vec<u8> = self.layout.coords.iter().flatten().flat_map(|c| c.to_le_bytes()).collect();
        let path = dir.join(KV_LAYOUT);
        fs::write(&path, layout).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(KV_MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(KV_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = parse_spill_manifest(&text)?;
        let path = dir.join(KV_LAYOUT);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if raw.len() != m.token_count * 6 {
            return Err(Error::Format(format!(
                "layout file has {} bytes for {} tokens",
                raw.len(),
                m.token_count
            )));
        }
        let coords = raw
            .chunks_exact(6)
            .map(|c| {
                [
                    u16::from_le_bytes([c[0], c[1]]),
                    u16::from_le_bytes([c[2], c[3]]),
                    u16::from_le_bytes([c[4], c[5]]),
                ]
            })
            .collect();
        let mut store = KVCacheStore::new(
            m.stage,
            TokenLayout {
                resolution: m.resolution,
                patch: m.patch,
                coords,
            },
        );
        for rec in m.records {
            let path = dir.join(&rec.file);
            let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let n = rec.tokens * rec.width;
            if raw.len() != n * 8 {
                return Err(Error::Format(format!("{}: {} bytes, expected {}", rec.file, raw.len(), n * 8)));
            }
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let (k, v) = vals.split_at(n);
            store.put(rec.key, KVEntry::new(rec.tokens, rec.width, rec.heads, k.to_vec(), v.to_vec())?)?;
        }
        Ok(store)
    }
}
