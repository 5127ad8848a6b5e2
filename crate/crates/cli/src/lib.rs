//! Argument parsing and verb dispatch for the `voxflow` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use voxflow::config::{parse_config, FieldSpec, RunConfig, SEED_ENV};
use voxflow::fields::{make_analytic_field, VelocityField};
use voxflow::formats::{read_vxg, write_vxg};
use voxflow::kvstore::KVCacheStore;
use voxflow::lattice::{upsample_mask, BinaryMask3D, Coord, Dims};
use voxflow::manifest::Manifest;
use voxflow::metrics::{chamfer, masked_psnr, masked_ssim, point_set, project_ortho, projected_keep_mask, sparse_grid, Axis};
use voxflow::pipeline::{invert_asset, reconstruct_asset, run_two_stage_edit, Asset, StageInversion, ST_CHANNELS};
use voxflow::solver::{convergence_probe, LatentShape, StepOrder, TrajectoryCache};
use voxflow::synth::{gen_asset, gen_edit_scenario, Region, ShapeSpec};
use voxflow::ErrorClass;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_CACHE: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Rendered help or version text; not a failure.
    #[error("{0}")]
    Help(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] voxflow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Help(_) => EXIT_OK,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Io => EXIT_IO,
                ErrorClass::Numeric => EXIT_NUMERIC,
                ErrorClass::Cache => EXIT_CACHE,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "voxflow", version, about = "Inversion and local editing of voxel latents")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

/// Config layers shared by every verb.
#[derive(Debug, Clone, Default, Args, PartialEq)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Debug, Clone, Subcommand, PartialEq)]
pub enum Verb {
    /// Write a synthetic asset and an edit mask.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Shape spec, e.g. `sphere:0.5,0.5,0.5,0.4`.
        #[arg(long)]
        shape: Option<String>,
        /// Region spec, e.g. `octant:7`, `ball:0.5,0.5,0.5,0.2`, `slab:x,0,0.25`, `none`.
        #[arg(long)]
        region: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Invert both stages, writing trajectories and key/value caches.
    Invert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Edit an asset inside a mask.
    Edit {
        #[arg(long = "in")]
        input: PathBuf,
        /// One-channel `.vxg` at structure resolution.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output directory of an earlier `invert`; its structure stage is reused.
        #[arg(long)]
        inversion: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Invert and re-sample without replacement.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample the latents from fresh noise instead of their inversion.
        #[arg(long)]
        st_only: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Global error slopes of the solver on an analytic field.
    BenchOrder {
        /// `linear:<lambda>`, `constant:<c>` or `timepoly`.
        #[arg(long, default_value = "linear:1")]
        field: String,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, default_value = "8,16,32,64", value_delimiter = ',')]
        steps_list: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare an asset against a reference, outside an optional mask.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::Gen { .. } => "gen",
            Verb::Invert { .. } => "invert",
            Verb::Edit { .. } => "edit",
            Verb::Reconstruct { .. } => "reconstruct",
            Verb::BenchOrder { .. } => "bench-order",
            Verb::Metrics { .. } => "metrics",
        }
    }

    fn cfg(&self) -> &ConfigArgs {
        match self {
            Verb::Gen { cfg, .. }
            | Verb::Invert { cfg, .. }
            | Verb::Edit { cfg, .. }
            | Verb::Reconstruct { cfg, .. }
            | Verb::BenchOrder { cfg, .. }
            | Verb::Metrics { cfg, .. } => cfg,
        }
    }

    /// Paths that must exist before any work starts.
    fn inputs(&self) -> Vec<&Path> {
        match self {
            Verb::Invert { input, .. } | Verb::Reconstruct { input, .. } => vec![input.as_path()],
            Verb::Edit { input, mask, inversion, .. } => {
                let mut v = vec![input.as_path(), mask.as_path()];
                v.extend(inversion.as_deref());
                v
            }
            Verb::Metrics { input, reference, mask, .. } => {
                let mut v = vec![input.as_path(), reference.as_path()];
                v.extend(mask.as_deref());
                v
            }
            Verb::Gen { .. } | Verb::BenchOrder { .. } => vec![],
        }
        .into_iter()
        .chain(self.cfg().config.as_deref())
        .collect()
    }
}

/// A parsed invocation plus the seed found in the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub verb: Verb,
    pub env_seed: Option<String>,
}

impl Command {
    /// Defaults, environment seed, config file, then flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let args = self.verb.cfg();
        let text = match &args.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| voxflow::Error::io(p, e))?),
            None => None,
        };
        let mut overrides = Vec::new();
        if let Some(s) = args.steps {
            overrides.push(("steps".to_string(), s.to_string()));
        }
        if let Some(s) = args.seed {
            overrides.push(("seed".to_string(), s.to_string()));
        }
        if let Verb::Gen { shape, region, .. } = &self.verb {
            overrides.extend(shape.iter().map(|s| ("shape".to_string(), s.clone())));
            overrides.extend(region.iter().map(|s| ("region".to_string(), s.clone())));
        }
        overrides.extend(args.overrides.iter().cloned());
        Ok(RunConfig::resolve(text.as_deref(), self.env_seed.as_deref(), &overrides)?)
    }
}

/// Parses `argv` (including the program name). Help and version requests
/// come back as [`CliError::Help`].
pub fn parse_invocation<I, S>(argv: I, env_seed: Option<String>) -> Result<Command>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp
        | clap::error::ErrorKind::DisplayVersion
        | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => CliError::Help(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    Ok(Command { verb: cli.verb, env_seed })
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// Lines for stdout; artifacts are already on disk.
#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    for p in cmd.verb.inputs() {
        if !p.exists() {
            return Err(voxflow::Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)).into());
        }
    }
    let config = cmd.resolve_config()?;
    let mut manifest = Manifest::new(cmd.verb.name());
    manifest.config = config.entries();
    let mut report: Vec<(String, String)> = Vec::new();
    let out_dir: Option<PathBuf> = match &cmd.verb {
        Verb::Gen { out, .. } => {
            let spec = ShapeSpec::parse(&config.shape, config.seed)?;
            let asset = gen_asset(&spec, config.st_resolution, config.slat_resolution, config.slat_channels)?;
            let region: Region = config.region.parse()?;
            let scenario = gen_edit_scenario(&asset, &region)?;
            prepare(out)?;
            asset.save(out)?;
            write_vxg(out.join("mask.vxg"), &scenario.mask.to_grid())?;
            report.push(kv("st_occupied", asset.occupancy().count()));
            report.push(kv("slat_active", asset.slat().len()));
            report.push(kv("mask_voxels", scenario.mask.count()));
            report.push(kv("masked_active", scenario.masked_active));
            report.push(kv("keep", scenario.keep));
            Some(out.clone())
        }
        Verb::Invert { input, out, .. } => {
            let asset = Asset::load(input)?;
            let (st, slat) = invert_asset(&asset, &config)?;
            prepare(out)?;
            let dims = asset.st_grid().dims();
            st.trajectory.save(out.join("st"), &LatentShape::Dense { dims, channels: ST_CHANNELS })?;
            slat.trajectory.save(
                out.join("slat"),
                &LatentShape::Sparse {
                    resolution: asset.slat().resolution(),
                    coords: asset.slat().coords().to_vec(),
                    channels: asset.slat().channels(),
                },
            )?;
            for (name, inv) in [("kv_st", &st), ("kv_slat", &slat)] {
                if let Some(kv) = &inv.kv {
                    kv.spill(out.join(name))?;
                }
                report.push(kv(&format!("{name}_entries"), inv.kv.as_ref().map_or(0, |k| k.len())));
            }
            report.push(kv("steps", config.steps));
            report.push(kv("st_evaluations", st.evaluations));
            report.push(kv("slat_evaluations", slat.evaluations));
            Some(out.clone())
        }
        Verb::Edit { input, mask, out, inversion, .. } => {
            let asset = Asset::load(input)?;
            let mask = BinaryMask3D::from_grid(&read_vxg(mask)?)?;
            let reuse = inversion.as_deref().map(|d| load_st_inversion(d, asset.st_grid().dims())).transpose()?;
            let run = run_two_stage_edit(&asset, &mask, &config, reuse.as_ref())?;
            prepare(out)?;
            run.asset.save(out)?;
            fs::write(out.join("report.txt"), run.report.to_text()).map_err(|e| voxflow::Error::io(out, e))?;
            report.extend(run.report.entries.iter().cloned());
            report.extend(run.report.warnings.iter().map(|w| ("warning".to_string(), w.clone())));
            Some(out.clone())
        }
        Verb::Reconstruct { input, out, st_only, .. } => {
            let asset = Asset::load(input)?;
            let (rec, errors) = reconstruct_asset(&asset, &config, !st_only)?;
            prepare(out)?;
            rec.save(out)?;
            report.push(kv("mode", if *st_only { "st-only" } else { "st+slat" }));
            report.push(kv("st_rel_l2", errors.st_rel_l2));
            report.push(kv("slat_rel_l2", errors.slat_rel_l2));
            Some(out.clone())
        }
        Verb::BenchOrder { field, len, steps_list, out, .. } => {
            let kind = match field.parse::<FieldSpec>().map_err(|e| CliError::Usage(e.to_string()))? {
                FieldSpec::Analytic(kind) => kind,
                FieldSpec::Toy => return Err(CliError::Usage("bench-order needs an analytic field".into())),
            };
            let f = make_analytic_field(kind, *len)?;
            let start = bench_start(f.state_len(), config.seed);
            for order in [StepOrder::Taylor, StepOrder::Euler] {
                let r = convergence_probe(&f, &start, steps_list, order)?;
                let name = match order {
                    StepOrder::Taylor => "taylor",
                    StepOrder::Euler => "euler",
                };
                for (t, e) in r.step_counts.iter().zip(&r.errors) {
                    report.push(kv(&format!("{name}_error_T{t}"), format!("{e:e}")));
                }
                report.push(kv(
                    &format!("{name}_slope"),
                    r.slope.map_or("exact".to_string(), |s| format!("{s:.6}")),
                ));
            }
            if let Some(out) = out {
                prepare(out)?;
            }
            out.clone()
        }
        Verb::Metrics { input, reference, mask, out, .. } => {
            let a = Asset::load(input)?;
            let b = Asset::load(reference)?;
            report.extend(metrics_report(&a, &b, mask.as_deref(), &config)?);
            if let Some(out) = out {
                prepare(out)?;
            }
            out.clone()
        }
    };
    let lines: Vec<String> = report.iter().map(|(k, v)| format!("{k} = {v}")).collect();
    if let Some(dir) = out_dir {
        manifest.report = report;
        manifest.checksum_dir(&dir)?;
        manifest.write(&dir)?;
    }
    Ok(Outcome { lines })
}

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| voxflow::Error::io(dir, e))?;
    Ok(())
}

fn bench_start(len: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn load_st_inversion(dir: &Path, dims: Dims) -> Result<StageInversion> {
    let (trajectory, shape) = TrajectoryCache::load(dir.join("st"))?;
    if shape != (LatentShape::Dense { dims, channels: ST_CHANNELS }) {
        return Err(voxflow::Error::Alignment(format!("{}: trajectory shape does not match the asset", dir.display())).into());
    }
    let kv_dir = dir.join("kv_st");
    let kv = if kv_dir.exists() { Some(KVCacheStore::load(&kv_dir)?) } else { None };
    Ok(StageInversion {
        trajectory,
        kv,
        evaluations: 0,
    })
}

/// Chamfer, PSNR and SSIM between two assets outside the edit region of `mask`.
fn metrics_report(a: &Asset, b: &Asset, mask: Option<&Path>, config: &RunConfig) -> Result<Vec<(String, String)>> {
    let dims = b.st_grid().dims();
    let region = match mask {
        Some(p) => {
            let m = BinaryMask3D::from_grid(&read_vxg(p)?)?;
            config.edit_options().edit_region(&m)?
        }
        None => BinaryMask3D::empty(dims)?,
    };
    if a.slat().resolution() != b.slat().resolution() || a.st_grid().dims() != dims {
        return Err(voxflow::Error::Dimension("assets differ in resolution".into()).into());
    }
    let region_slat = upsample_mask(&region, b.block_factor())?;
    let outside = |asset: &Asset| -> Vec<Coord> {
        asset.slat().coords().iter().copied().filter(|c| !region_slat.is_set(*c)).collect()
    };
    let res = b.slat().resolution();
    let cd = chamfer(&point_set(&outside(a), res), &point_set(&outside(b), res))?;
    let mut out = vec![
        kv("views", "axis projections of latent magnitude, mask = projected dilated edit region"),
        kv("region_voxels", region.count()),
        kv("chamfer", cd),
    ];
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        let keep = projected_keep_mask(&region_slat, axis);
        let (pa, pb) = (project_ortho(&sparse_grid(a.slat()), axis), project_ortho(&sparse_grid(b.slat()), axis));
        out.push(kv(&format!("psnr_{axis}"), masked_psnr(&pa, &pb, &keep)?));
        match masked_ssim(&pa, &pb, &keep) {
            Ok(s) => out.push(kv(&format!("ssim_{axis}"), s)),
            Err(e) => out.push(kv(&format!("ssim_{axis}"), format!("n/a ({e})"))),
        }
    }
    let psnr_min = out
        .iter()
        .filter(|(k, _)| k.starts_with("psnr_"))
        .map(|(_, v)| v.parse::<f64>().unwrap())
        .fold(f64::INFINITY, f64::min);
    out.push(kv("masked_psnr", psnr_min));
    Ok(out)
}

/// Reads `key = value` lines written by a run.
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| voxflow::Error::io(path, e))?;
    Ok(parse_config(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Command> {
        parse_invocation(std::iter::once("voxflow").chain(args.iter().copied()), None)
    }

    #[test]
    fn edit_invocation() {
        let c = parse(&["edit", "--in", "a/", "--mask", "m.vxg", "--out", "b/", "--config", "c.cfg"]).unwrap();
        match c.verb {
            Verb::Edit { input, mask, out, inversion, cfg } => {
                assert_eq!(input, PathBuf::from("a/"));
                assert_eq!(mask, PathBuf::from("m.vxg"));
                assert_eq!(out, PathBuf::from("b/"));
                assert_eq!(inversion, None);
                assert_eq!(cfg.config, Some(PathBuf::from("c.cfg")));
            }
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn steps_flag_and_overrides() {
        let c = parse(&["gen", "--out", "x", "--steps", "50", "--set", "omega=2.5"]).unwrap();
        let cfg = c.resolve_config().unwrap();
        assert_eq!((cfg.steps, cfg.omega), (50, 2.5));
        let c = parse(&["gen", "--out", "x", "--set", "steps=7", "--steps", "9"]).unwrap();
        assert_eq!(c.resolve_config().unwrap().steps, 7);
    }

    #[test]
    fn usage_errors() {
        for args in [&["edit", "--bogus"][..], &["frobnicate"], &["edit", "--in", "a"], &["gen", "--out", "x", "--set", "novalue"]] {
            let e = parse(args).unwrap_err();
            assert_eq!(e.exit_code(), EXIT_USAGE, "{args:?}");
        }
        assert!(matches!(parse(&["--help"]), Err(CliError::Help(_))));
        let c = parse(&["gen", "--out", "x", "--set", "nosuchkey=1"]).unwrap();
        assert_eq!(c.resolve_config().unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn env_seed_has_lowest_precedence() {
        let c = parse_invocation(["voxflow", "gen", "--out", "x"], Some("5".into())).unwrap();
        assert_eq!(c.resolve_config().unwrap().seed, 5);
        let c = parse_invocation(["voxflow", "gen", "--out", "x", "--seed", "6"], Some("5".into())).unwrap();
        assert_eq!(c.resolve_config().unwrap().seed, 6);
    }
}
