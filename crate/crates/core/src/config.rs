//! Flat `key = value` run configuration.
//!
//! Layers apply in order: built-in defaults, config file, the `VOXFLOW_SEED`
//! environment variable, then command-line overrides.

use std::fmt;
use std::str::FromStr;

use crate::editor::{EditOptions, SoftMaskParams};
use crate::error::{Error, Result};
use crate::fields::{AnalyticKind, GuidanceConfig, ToyConfig};
use crate::solver::{make_schedule, Schedule, ScheduleKind};

pub const SEED_ENV: &str = "VOXFLOW_SEED";

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", no + 1)));
        };
        let key = k.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(Error::Config(format!("line {}: bad key {key:?}", no + 1)));
        }
        if out.iter().any(|(seen, _)| seen == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", no + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Which velocity field a run uses.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldSpec {
    Toy,
    Analytic(AnalyticKind),
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSpec::Toy => f.write_str("toy"),
            FieldSpec::Analytic(AnalyticKind::Constant(c)) if *c == 0.0 => f.write_str("zero"),
            FieldSpec::Analytic(AnalyticKind::Constant(c)) => write!(f, "constant:{c}"),
            FieldSpec::Analytic(AnalyticKind::Linear(l)) => write!(f, "linear:{l}"),
            FieldSpec::Analytic(AnalyticKind::TimePoly) => f.write_str("timepoly"),
            FieldSpec::Analytic(AnalyticKind::Affine { .. }) => f.write_str("affine"),
        }
    }
}

impl FromStr for FieldSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("bad field parameter {v:?}")))
        };
        Ok(match s.split_once(':') {
            None if s == "toy" => FieldSpec::Toy,
            None if s == "zero" => FieldSpec::Analytic(AnalyticKind::Constant(0.0)),
            None if s == "timepoly" => FieldSpec::Analytic(AnalyticKind::TimePoly),
            Some(("constant", v)) => FieldSpec::Analytic(AnalyticKind::Constant(num(v)?)),
            Some(("linear", v)) => FieldSpec::Analytic(AnalyticKind::Linear(num(v)?)),
            _ => return Err(Error::Config(format!("unknown field {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub omega: f64,
    pub cfg_interval: Option<(f64, f64)>,
    pub soft_mask: bool,
    pub soft_radius: usize,
    pub soft_sigma: f64,
    pub kv_replacement: bool,
    pub attention_mask: bool,
    pub latent_replacement: bool,
    pub seed: u64,
    pub field: FieldSpec,
    pub toy_layers: usize,
    pub toy_dim: usize,
    pub toy_heads: usize,
    pub st_token_side: usize,
    pub cond_width: usize,
    pub toy_gain: f64,
    pub threshold: f64,
    pub source_prompt: String,
    pub target_prompt: String,
    pub negative_prompt: String,
    pub shape: String,
    pub region: String,
    pub st_resolution: usize,
    pub slat_resolution: usize,
    pub slat_channels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        RunConfig {
            steps: 25,
            schedule: ScheduleKind::Uniform,
            omega: 5.0,
            cfg_interval: Some((0.5, 1.0)),
            soft_mask: true,
            soft_radius: 2,
            soft_sigma: 1.5,
            kv_replacement: true,
            attention_mask: false,
            latent_replacement: true,
            seed: 42,
            field: FieldSpec::Toy,
            toy_layers: toy.layers,
            toy_dim: toy.model_dim,
            toy_heads: toy.heads,
            st_token_side: toy.token_grid_side,
            cond_width: toy.cond_width,
            toy_gain: toy.output_gain,
            threshold: 0.5,
            source_prompt: "source".into(),
            target_prompt: "edit".into(),
            negative_prompt: String::new(),
            shape: "sphere:0.5,0.5,0.5,0.4".into(),
            region: "octant:7".into(),
            st_resolution: 16,
            slat_resolution: 16,
            slat_channels: 8,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: {v} is not finite")));
    }
    Ok(x)
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`], in manifest order.
    pub const KEYS: [&'static str; 27] = [
        "steps",
        "schedule",
        "omega",
        "cfg_interval",
        "soft_mask",
        "soft_radius",
        "soft_sigma",
        "kv_replacement",
        "attention_mask",
        "latent_replacement",
        "seed",
        "field",
        "toy_layers",
        "toy_dim",
        "toy_heads",
        "st_token_side",
        "cond_width",
        "toy_gain",
        "threshold",
        "source_prompt",
        "target_prompt",
        "negative_prompt",
        "shape",
        "region",
        "st_resolution",
        "slat_resolution",
        "slat_channels",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse_num(key, v)?,
            "schedule" => self.schedule = v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))?,
            "omega" => self.omega = parse_real(key, v)?,
            "cfg_interval" => {
                self.cfg_interval = if v == "none" {
                    None
                } else {
                    let (lo, hi) = v
                        .split_once(',')
                        .ok_or_else(|| Error::Config(format!("{key}: expected lo,hi or none")))?;
                    Some((parse_real(key, lo.trim())?, parse_real(key, hi.trim())?))
                }
            }
            "soft_mask" => self.soft_mask = parse_bool(key, v)?,
            "soft_radius" => self.soft_radius = parse_num(key, v)?,
            "soft_sigma" => self.soft_sigma = parse_real(key, v)?,
            "kv_replacement" => self.kv_replacement = parse_bool(key, v)?,
            "attention_mask" => self.attention_mask = parse_bool(key, v)?,
            "latent_replacement" => self.latent_replacement = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "field" => self.field = v.parse()?,
            "toy_layers" => self.toy_layers = parse_num(key, v)?,
            "toy_dim" => self.toy_dim = parse_num(key, v)?,
            "toy_heads" => self.toy_heads = parse_num(key, v)?,
            "st_token_side" => self.st_token_side = parse_num(key, v)?,
            "cond_width" => self.cond_width = parse_num(key, v)?,
            "toy_gain" => self.toy_gain = parse_real(key, v)?,
            "threshold" => self.threshold = parse_real(key, v)?,
            "source_prompt" => self.source_prompt = v.to_string(),
            "target_prompt" => self.target_prompt = v.to_string(),
            "negative_prompt" => self.negative_prompt = v.to_string(),
            "shape" => self.shape = v.to_string(),
            "region" => self.region = v.to_string(),
            "st_resolution" => self.st_resolution = parse_num(key, v)?,
            "slat_resolution" => self.slat_resolution = parse_num(key, v)?,
            "slat_channels" => self.slat_channels = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |x: bool| x.to_string();
        Some(match key {
            "steps" => self.steps.to_string(),
            "schedule" => self.schedule.to_string(),
            "omega" => self.omega.to_string(),
            "cfg_interval" => match self.cfg_interval {
                Some((lo, hi)) => format!("{lo},{hi}"),
                None => "none".into(),
            },
            "soft_mask" => b(self.soft_mask),
            "soft_radius" => self.soft_radius.to_string(),
            "soft_sigma" => self.soft_sigma.to_string(),
            "kv_replacement" => b(self.kv_replacement),
            "attention_mask" => b(self.attention_mask),
            "latent_replacement" => b(self.latent_replacement),
            "seed" => self.seed.to_string(),
            "field" => self.field.to_string(),
            "toy_layers" => self.toy_layers.to_string(),
            "toy_dim" => self.toy_dim.to_string(),
            "toy_heads" => self.toy_heads.to_string(),
            "st_token_side" => self.st_token_side.to_string(),
            "cond_width" => self.cond_width.to_string(),
            "toy_gain" => self.toy_gain.to_string(),
            "threshold" => self.threshold.to_string(),
            "source_prompt" => self.source_prompt.clone(),
            "target_prompt" => self.target_prompt.clone(),
            "negative_prompt" => self.negative_prompt.clone(),
            "shape" => self.shape.clone(),
            "region" => self.region.clone(),
            "st_resolution" => self.st_resolution.to_string(),
            "slat_resolution" => self.slat_resolution.to_string(),
            "slat_channels" => self.slat_channels.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> Vec<(String, String)> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Defaults, then `env_seed`, then `file` text, then `overrides`; later
    /// layers win.
    pub fn resolve(file: Option<&str>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse {s:?}")))?;
        }
        if let Some(text) = file {
            for (k, v) in parse_config(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        self.schedule()?;
        self.guidance().validate()?;
        self.edit_options().validate()?;
        self.toy_config().validate()?;
        if !(self.threshold.is_finite()) {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if self.st_resolution < 4 || self.slat_resolution < self.st_resolution || self.slat_resolution % self.st_resolution != 0 {
            return Err(Error::Config(format!(
                "resolutions st {} / slat {}: need st >= 4 and slat a multiple of st",
                self.st_resolution, self.slat_resolution
            )));
        }
        if self.slat_channels == 0 {
            return Err(Error::Config("slat_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            omega: self.omega,
            active_interval: self.cfg_interval,
        }
    }

    pub fn edit_options(&self) -> EditOptions {
        EditOptions {
            latent_replacement: self.latent_replacement,
            soft_mask: self.soft_mask.then_some(SoftMaskParams {
                radius: self.soft_radius,
                sigma: self.soft_sigma,
            }),
            kv_replacement: self.kv_replacement,
            attention_mask: self.attention_mask,
            guidance: self.guidance(),
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.steps, self.schedule)
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            layers: self.toy_layers,
            model_dim: self.toy_dim,
            heads: self.toy_heads,
            token_grid_side: self.st_token_side,
            cond_width: self.cond_width,
            output_gain: self.toy_gain,
        }
    }
}
