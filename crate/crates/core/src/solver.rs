//! Time schedules and the second-order Taylor rectified-flow stepper.
//!
//! Orientation: `t = 1` is noise and `t = 0` is data. Sampling integrates
//! towards decreasing `t`, inversion towards increasing `t`. Each Taylor step
//! from `a` to `b` evaluates the field at `a` and at the midpoint
//! `(a + b) / 2`; the midpoint expression is symmetric, so inversion and
//! sampling over one schedule evaluate at bit-identical midpoint times.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::{guided_velocity, AttentionHook, ConditionInput, GuidanceConfig, HookMode, VelocityField};
use crate::formats;
use crate::kvstore::{Stage, TimeKey};
use crate::lattice::{Coord, DenseLatentGrid, Dims, SparseLatentSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Uniform,
    /// `s_k = (k / T)^gamma`
    Shifted(f64),
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Uniform => f.write_str("uniform"),
            ScheduleKind::Shifted(g) => write!(f, "shifted:{g}"),
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(ScheduleKind::Uniform);
        }
        if let Some(g) = s.strip_prefix("shifted:") {
            let g: f64 = g
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad schedule exponent {g:?}")))?;
            return Ok(ScheduleKind::Shifted(g));
        }
        Err(Error::Config(format!("unknown schedule kind {s:?}")))
    }
}

/// Strictly increasing times `0 = s_0 < ... < s_T = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
    kind: ScheduleKind,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<Schedule> {
    if steps < 1 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if let ScheduleKind::Shifted(g) = kind {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::Parameter(format!("schedule exponent {g} must be > 0")));
        }
    }
    let times: Vec<f64> = (0..=steps)
        .map(|k| {
            let u = k as f64 / steps as f64;
            match kind {
                ScheduleKind::Uniform => u,
                ScheduleKind::Shifted(g) => u.powf(g),
            }
        })
        .collect();
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!(
            "{steps} steps of {kind} schedule are not strictly increasing"
        )));
    }
    Ok(Schedule { times, kind })
}

impl Schedule {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }
}

/// Diagnostics for one solver step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub t_from: f64,
    pub t_to: f64,
    pub evaluations: usize,
    pub max_abs_velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOrder {
    /// Second-order Taylor update with a finite-difference time derivative.
    Taylor,
    /// Plain explicit Euler, kept as a baseline.
    Euler,
}

/// Per-step hook into a traversal: `(k, t_k, state)` after arriving at `t_k`.
pub type StepCallback<'c> = dyn FnMut(usize, f64, &mut Vec<f64>) -> Result<()> + 'c;

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("state component {i} at t = {t} is {}", x[i]))),
        None => Ok(()),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Runs `f` with capture suspended, leaving roles, trace and inject modes alone.
fn without_capture<T>(hook: &mut AttentionHook<'_>, f: impl FnOnce(&mut AttentionHook<'_>) -> T) -> T {
    if !hook.is_capturing() {
        return f(hook);
    }
    let saved = std::mem::replace(&mut hook.mode, HookMode::Off);
    let out = f(hook);
    hook.mode = saved;
    out
}

#[allow(clippy::too_many_arguments)]
fn step_impl(
    field: &dyn VelocityField,
    x_a: &[f64],
    a: f64,
    b: f64,
    guidance: &GuidanceConfig,
    cond: &ConditionInput,
    neg: &ConditionInput,
    hook: &mut AttentionHook<'_>,
    order: StepOrder,
    capture_start: bool,
) -> Result<(Vec<f64>, StepReport)> {
    if a == b {
        return Err(Error::DegenerateStep(a));
    }
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
        return Err(Error::Parameter(format!("step {a} -> {b} leaves [0, 1]")));
    }
    check_finite(x_a, a)?;
    let h = b - a;
    let (f_a, n_a) = if capture_start {
        guided_velocity(field, x_a, a, guidance, cond, neg, hook)?
    } else {
        without_capture(hook, |hk| guided_velocity(field, x_a, a, guidance, cond, neg, hk))?
    };
    let mut report = StepReport {
        t_from: a,
        t_to: b,
        evaluations: n_a,
        max_abs_velocity: max_abs(&f_a),
    };
    let x_b: Vec<f64> = match order {
        StepOrder::Euler => x_a.iter().zip(&f_a).map(|(x, f)| x + h * f).collect(),
        StepOrder::Taylor => {
            let mid = 0.5 * (a + b);
            let half = mid - a;
            let x_mid: Vec<f64> = x_a.iter().zip(&f_a).map(|(x, f)| x + half * f).collect();
            let (f_m, n_m) = guided_velocity(field, &x_mid, mid, guidance, cond, neg, hook)?;
            report.evaluations += n_m;
            report.max_abs_velocity = report.max_abs_velocity.max(max_abs(&f_m));
            x_a.iter()
                .zip(f_a.iter().zip(&f_m))
                .map(|(x, (fa, fm))| {
                    let dfdt = (fm - fa) / half;
                    x + h * fa + 0.5 * h * h * dfdt
                })
                .collect()
        }
    };
    check_finite(&x_b, b)?;
    Ok((x_b, report))
}

/// One second-order step from `t_from` to `t_to` (either direction).
#[allow(clippy::too_many_arguments)]
pub fn taylor_step(
    field: &dyn VelocityField,
    x_a: &[f64],
    t_from: f64,
    t_to: f64,
    guidance: &GuidanceConfig,
    cond: &ConditionInput,
    neg: &ConditionInput,
    hook: &mut AttentionHook<'_>,
) -> Result<(Vec<f64>, StepReport)> {
    step_impl(field, x_a, t_from, t_to, guidance, cond, neg, hook, StepOrder::Taylor, true)
}

/// Steps through `times` in the given order, starting from `x`. The
/// callback runs after every step with the index of the arrival time.
#[allow(clippy::too_many_arguments)]
pub fn traverse(
    field: &dyn VelocityField,
    times: &[f64],
    x: &[f64],
    guidance: &GuidanceConfig,
    cond: &ConditionInput,
    neg: &ConditionInput,
    hook: &mut AttentionHook<'_>,
    order: StepOrder,
    mut callback: Option<&mut StepCallback<'_>>,
) -> Result<(Vec<Vec<f64>>, Vec<StepReport>)> {
    if times.len() < 2 {
        return Err(Error::Parameter("traversal needs at least two times".into()));
    }
    guidance.validate()?;
    let mut states = Vec::with_capacity(times.len());
    let mut reports = Vec::with_capacity(times.len() - 1);
    states.push(x.to_vec());
    let mut cur = x.to_vec();
    for (i, w) in times.windows(2).enumerate() {
        let (next, report) = step_impl(field, &cur, w[0], w[1], guidance, cond, neg, hook, order, true)?;
        cur = next;
        if let Some(cb) = callback.as_deref_mut() {
            cb(i + 1, w[1], &mut cur)?;
        }
        states.push(cur.clone());
        reports.push(report);
    }
    Ok((states, reports))
}

/// Per-time record of the states visited during inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCache {
    stage: Stage,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl TrajectoryCache {
    pub fn new(stage: Stage, times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != states.len() || times.is_empty() {
            return Err(Error::Alignment(format!(
                "{} times for {} trajectory states",
                times.len(),
                states.len()
            )));
        }
        let len = states[0].len();
        if states.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("trajectory states differ in length".into()));
        }
        Ok(TrajectoryCache { stage, times, states })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// State recorded at exactly time `t`.
    pub fn at(&self, t: f64) -> Result<&[f64]> {
        let key = TimeKey::new(t);
        self.times
            .iter()
            .position(|s| TimeKey::new(*s) == key)
            .map(|k| self.states[k].as_slice())
            .ok_or_else(|| Error::Alignment(format!("{} trajectory has no entry at t = {t:?}", self.stage)))
    }

    pub fn input(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().unwrap()
    }
}

/// Result of [`invert`].
#[derive(Debug, Clone)]
pub struct Inversion {
    pub noise: Vec<f64>,
    pub trajectory: TrajectoryCache,
    pub reports: Vec<StepReport>,
    /// Evaluations spent on the terminal key/value capture.
    pub terminal_evaluations: usize,
}

/// Integrates data (`t = 0`) to noise (`t = 1`), recording every schedule
/// state. When the hook captures, keys/values are stored for exactly the
/// evaluation times a later [`sample`] over the same schedule will request:
/// the start evaluation at `s_0` is not stored, and one extra evaluation at
/// `s_T` on the terminal state is.
#[allow(clippy::too_many_arguments)]
pub fn invert(
    field: &dyn VelocityField,
    schedule: &Schedule,
    data: &[f64],
    guidance: &GuidanceConfig,
    cond: &ConditionInput,
    neg: &ConditionInput,
    stage: Stage,
    hook: &mut AttentionHook<'_>,
) -> Result<Inversion> {
    if data.len() != field.state_len() {
        return Err(Error::Shape(format!(
            "data has {} values, field expects {}",
            data.len(),
            field.state_len()
        )));
    }
    guidance.validate()?;
    let times = schedule.times();
    let mut states = Vec::with_capacity(times.len());
    let mut reports = Vec::with_capacity(schedule.steps());
    let mut cur = data.to_vec();
    states.push(cur.clone());
    for (k, w) in times.windows(2).enumerate() {
        let (next, report) = step_impl(field, &cur, w[0], w[1], guidance, cond, neg, hook, StepOrder::Taylor, k > 0)?;
        cur = next;
        states.push(cur.clone());
        reports.push(report);
    }
    let mut terminal_evaluations = 0;
    if hook.is_capturing() {
        let (_, n) = guided_velocity(field, &cur, times[times.len() - 1], guidance, cond, neg, hook)?;
        terminal_evaluations = n;
    }
    Ok(Inversion {
        noise: cur,
        trajectory: TrajectoryCache::new(stage, times.to_vec(), states)?,
        reports,
        terminal_evaluations,
    })
}

/// Result of [`sample`]; `states[k]` is the state at schedule time `s_k`.
#[derive(Debug, Clone)]
pub struct Sampling {
    pub data: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub reports: Vec<StepReport>,
}

/// Integrates noise (`t = 1`) to data (`t = 0`). The callback receives
/// `(k - 1, s_{k-1}, state)` after each step and may modify the state.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    field: &dyn VelocityField,
    schedule: &Schedule,
    noise: &[f64],
    guidance: &GuidanceConfig,
    cond: &ConditionInput,
    neg: &ConditionInput,
    hook: &mut AttentionHook<'_>,
    callback: Option<&mut StepCallback<'_>>,
) -> Result<Sampling> {
    if noise.len() != field.state_len() {
        return Err(Error::Shape(format!(
            "noise has {} values, field expects {}",
            noise.len(),
            field.state_len()
        )));
    }
    let t_count = schedule.times().len();
    let reversed: Vec<f64> = schedule.times().iter().rev().copied().collect();
    let mut remap = callback.map(|cb| {
        move |i: usize, t: f64, x: &mut Vec<f64>| -> Result<()> { cb(t_count - 1 - i, t, x) }
    });
    let (mut states, reports) = traverse(
        field,
        &reversed,
        noise,
        guidance,
        cond,
        neg,
        hook,
        StepOrder::Taylor,
        remap.as_mut().map(|f| f as &mut StepCallback<'_>),
    )?;
    states.reverse();
    Ok(Sampling {
        data: states[0].clone(),
        states,
        reports,
    })
}

/// Global errors of integrating `1 -> 0` for several step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub order: StepOrder,
    pub step_counts: Vec<usize>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `log(error)` against `log(1/T)`; `None` when
    /// every error is exactly zero.
    pub slope: Option<f64>,
}

impl ConvergenceReport {
    pub fn is_exact(&self) -> bool {
        self.errors.iter().all(|e| *e == 0.0)
    }
}

pub fn convergence_probe(
    field: &dyn VelocityField,
    start: &[f64],
    step_counts: &[usize],
    order: StepOrder,
) -> Result<ConvergenceReport> {
    if step_counts.len() < 2 {
        return Err(Error::Parameter("convergence probe needs at least two step counts".into()));
    }
    let exact = field
        .exact_flow(start, 1.0, 0.0)
        .ok_or_else(|| Error::Parameter("field has no closed-form flow".into()))?;
    let uncond = ConditionInput::unconditional();
    let guidance = GuidanceConfig::disabled();
    let mut errors = Vec::with_capacity(step_counts.len());
    for &steps in step_counts {
        let schedule = make_schedule(steps, ScheduleKind::Uniform)?;
        let reversed: Vec<f64> = schedule.times().iter().rev().copied().collect();
        let (states, _) = traverse(
            field,
            &reversed,
            start,
            &guidance,
            &uncond,
            &uncond,
            &mut AttentionHook::off(),
            order,
            None,
        )?;
        let end = states.last().unwrap();
        errors.push(end.iter().zip(&exact).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())));
    }
    let slope = if errors.iter().all(|e| *e == 0.0) {
        None
    } else {
        let pts: Vec<(f64, f64)> = step_counts
            .iter()
            .zip(&errors)
            .filter(|(_, e)| **e > 0.0)
            .map(|(t, e)| ((1.0 / *t as f64).ln(), e.ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        (sxx > 0.0).then(|| sxy / sxx)
    };
    Ok(ConvergenceReport {
        order,
        step_counts: step_counts.to_vec(),
        errors,
        slope,
    })
}

/// Shape used to serialize trajectory states as lattice files.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentShape {
    Dense { dims: Dims, channels: usize },
    Sparse { resolution: usize, coords: Vec<Coord>, channels: usize },
}

const TRAJ_MANIFEST: &str = "trajectory_manifest.txt";

impl TrajectoryCache {
    /// Writes `<stage>_k<NNN>.vxg|.vxs` per schedule time plus a manifest.
    pub fn save(&self, dir: impl AsRef<Path>, shape: &LatentShape) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("# trajectory\nstage = {}\ncount = {}\n", self.stage, self.len());
        let mut files = Vec::new();
        for (k, (t, state)) in self.times.iter().zip(&self.states).enumerate() {
            let name = match shape {
                LatentShape::Dense { dims, channels } => {
                    let name = format!("{}_k{k:03}.vxg", self.stage);
                    let grid = DenseLatentGrid::new(*dims, *channels, state.clone())?;
                    formats::write_vxg(dir.join(&name), &grid)?;
                    name
                }
                LatentShape::Sparse { resolution, coords, channels } => {
                    let name = format!("{}_k{k:03}.vxs", self.stage);
                    let set = SparseLatentSet::new(*resolution, *channels, coords.clone(), state.clone())?;
                    formats::write_vxs(dir.join(&name), &set)?;
                    name
                }
            };
            manifest.push_str(&format!("time = {k} {} {t:?} {name}\n", TimeKey::new(*t).to_hex()));
            files.push(name);
        }
        let path = dir.join(TRAJ_MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(files)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, LatentShape)> {
        let dir = dir.as_ref();
        let path = dir.join(TRAJ_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = parse_trajectory_manifest(&text)?;
        let mut states = Vec::with_capacity(m.entries.len());
        let mut times = Vec::with_capacity(m.entries.len());
        let mut shape = None;
        for (time, file) in &m.entries {
            let p = dir.join(file);
            let (state, s) = if file.ends_with(".vxg") {
                let g = formats::read_vxg(&p)?;
                let s = LatentShape::Dense { dims: g.dims(), channels: g.channels() };
                (g.into_values(), s)
            } else {
                let set = formats::read_vxs(&p)?;
                let s = LatentShape::Sparse {
                    resolution: set.resolution(),
                    coords: set.coords().to_vec(),
                    channels: set.channels(),
                };
                (set.feats().to_vec(), s)
            };
            match &shape {
                None => shape = Some(s),
                Some(prev) if *prev != s => {
                    return Err(Error::Alignment(format!("{file} differs in shape from earlier states")))
                }
                _ => {}
            }
            times.push(time.value());
            states.push(state);
        }
        let shape = shape.ok_or_else(|| Error::Format("empty trajectory".into()))?;
        Ok((TrajectoryCache::new(m.stage, times, states)?, shape))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryManifest {
    pub stage: Stage,
    pub entries: Vec<(TimeKey, String)>,
}

/// Parses a trajectory manifest: `stage`, `count`, then `time = k hex value file` lines.
pub fn parse_trajectory_manifest(text: &str) -> Result<TrajectoryManifest> {
    let mut stage = None;
    let mut count = None;
    let mut entries = Vec::new();
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
            "count" => {
                count = Some(v.parse::<usize>().map_err(|_| Error::Format(format!("bad count {v:?}")))?)
            }
            "time" => {
                let f: Vec<&str> = v.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(Error::Format(format!("line {}: time needs 4 fields", lineno + 1)));
                }
                let k: usize = f[0].parse().map_err(|_| Error::Format(format!("bad index {:?}", f[0])))?;
                if k != entries.len() {
                    return Err(Error::Format(format!("time index {k} out of order")));
                }
                let file = f[3];
                if file.contains('/') || file.contains('\\') || file.starts_with('.') {
                    return Err(Error::Format(format!("file name {file:?} is not a plain name")));
                }
                if !(file.ends_with(".vxg") || file.ends_with(".vxs")) {
                    return Err(Error::Format(format!("unknown state file type {file:?}")));
                }
                let key = TimeKey::from_hex(f[1])?;
                if let Some((prev, _)) = entries.last() {
                    if key.value() <= TimeKey::value(*prev) {
                        return Err(Error::Format("trajectory times not increasing".into()));
                    }
                }
                entries.push((key, file.to_string()));
            }
            other => return Err(Error::Format(format!("line {}: unknown key {other:?}", lineno + 1))),
        }
    }
    let stage = stage.ok_or_else(|| Error::Format("trajectory manifest lacks stage".into()))?;
    if count != Some(entries.len()) {
        return Err(Error::Format(format!("count {count:?} vs {} time lines", entries.len())));
    }
    Ok(TrajectoryManifest { stage, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_analytic_field, AnalyticKind, CondMode};

    fn unc() -> ConditionInput {
        ConditionInput::unconditional()
    }

    fn off() -> AttentionHook<'static> {
        AttentionHook::off()
    }

    #[test]
    fn schedules() {
        assert_eq!(make_schedule(1, ScheduleKind::Uniform).unwrap().times(), &[0.0, 1.0]);
        assert_eq!(make_schedule(4, ScheduleKind::Uniform).unwrap().times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(
            make_schedule(4, ScheduleKind::Shifted(2.0)).unwrap().times(),
            &[0.0, 0.0625, 0.25, 0.5625, 1.0]
        );
        assert!(make_schedule(0, ScheduleKind::Uniform).is_err());
        assert!(make_schedule(4, ScheduleKind::Shifted(0.0)).is_err());
        let s = make_schedule(25, ScheduleKind::Uniform).unwrap();
        assert_eq!(s.times()[0], 0.0);
        assert_eq!(s.times()[25], 1.0);
        assert!(s.times().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_field_step_is_exact() {
        let f = make_analytic_field(AnalyticKind::Constant(1.5), 3).unwrap();
        let g = GuidanceConfig::disabled();
        let (x, r) = taylor_step(&f, &[1.0, 2.0, 3.0], 0.25, 0.75, &g, &unc(), &unc(), &mut off()).unwrap();
        assert_eq!(x, vec![1.75, 2.75, 3.75]);
        assert_eq!(r.evaluations, 2);
    }

    #[test]
    fn time_poly_step_is_exact() {
        let f = make_analytic_field(AnalyticKind::TimePoly, 2).unwrap();
        let g = GuidanceConfig::disabled();
        for (a, b) in [(0.0, 0.1), (0.3, 0.9), (1.0, 0.2), (0.55, 0.5)] {
            let (x, _) = taylor_step(&f, &[0.5, -1.0], a, b, &g, &unc(), &unc(), &mut off()).unwrap();
            let integral = 0.5 * (b * b - a * a);
            assert!((x[0] - (0.5 + integral)).abs() <= 1e-12);
            assert!((x[1] - (-1.0 + integral)).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_step_matches_second_order_taylor() {
        let f = make_analytic_field(AnalyticKind::Linear(1.0), 1).unwrap();
        let g = GuidanceConfig::disabled();
        for h in [0.1, 0.05, 0.025] {
            let (x, _) = taylor_step(&f, &[1.0], 0.0, h, &g, &unc(), &unc(), &mut off()).unwrap();
            assert!((x[0] - (1.0 + h + h * h / 2.0)).abs() < 1e-14);
            // local error against exp is O(h^3): h^3/6 leading term
            let local = (x[0] - f64::exp(h)).abs();
            assert!(local < h * h * h / 6.0 * 1.1 && local > h * h * h / 6.0 * 0.9);
        }
    }

    #[test]
    fn degenerate_and_nonfinite_steps() {
        let f = make_analytic_field(AnalyticKind::Constant(1.0), 1).unwrap();
        let g = GuidanceConfig::disabled();
        assert!(matches!(taylor_step(&f, &[0.0], 0.5, 0.5, &g, &unc(), &unc(), &mut off()), Err(Error::DegenerateStep(_))));
        assert!(matches!(taylor_step(&f, &[f64::NAN], 0.0, 0.5, &g, &unc(), &unc(), &mut off()), Err(Error::Numeric(_))));
    }

    #[test]
    fn invert_and_sample_zero_and_constant_fields() {
        let s = make_schedule(4, ScheduleKind::Uniform).unwrap();
        let g = GuidanceConfig::disabled();
        let zero = make_analytic_field(AnalyticKind::Constant(0.0), 2).unwrap();
        let inv = invert(&zero, &s, &[1.0, 2.0], &g, &unc(), &unc(), Stage::St, &mut off()).unwrap();
        assert_eq!(inv.noise, vec![1.0, 2.0]);
        assert!(inv.trajectory.states().iter().all(|x| x == &vec![1.0, 2.0]));
        let smp = sample(&zero, &s, &[3.0, 4.0], &g, &unc(), &unc(), &mut off(), None).unwrap();
        assert_eq!(smp.data, vec![3.0, 4.0]);

        let c = make_analytic_field(AnalyticKind::Constant(0.5), 1).unwrap();
        let inv = invert(&c, &s, &[1.0], &g, &unc(), &unc(), Stage::St, &mut off()).unwrap();
        assert_eq!(inv.noise, vec![1.5]);
        for (k, t) in s.times().iter().enumerate() {
            assert_eq!(inv.trajectory.state(k), &[1.0 + t * 0.5]);
            assert_eq!(inv.trajectory.at(*t).unwrap(), &[1.0 + t * 0.5]);
        }
        let smp = sample(&c, &s, &[1.5], &g, &unc(), &unc(), &mut off(), None).unwrap();
        assert_eq!(smp.data, vec![1.0]);
    }

    #[test]
    fn linear_inversion_error_is_second_order() {
        let f = make_analytic_field(AnalyticKind::Linear(1.0), 1).unwrap();
        let g = GuidanceConfig::disabled();
        let s = make_schedule(64, ScheduleKind::Uniform).unwrap();
        let inv = invert(&f, &s, &[1.0], &g, &unc(), &unc(), Stage::St, &mut off()).unwrap();
        let err = (inv.noise[0] - std::f64::consts::E).abs();
        // global error ~ C / T^2 with C = e/6
        assert!(err < 2.0 / (64.0 * 64.0));
    }

    #[test]
    fn sample_callback_sees_descending_indices() {
        let f = make_analytic_field(AnalyticKind::Constant(1.0), 1).unwrap();
        let s = make_schedule(3, ScheduleKind::Uniform).unwrap();
        let mut seen = Vec::new();
        let mut cb = |k: usize, t: f64, x: &mut Vec<f64>| {
            seen.push((k, t));
            x[0] = 10.0 * k as f64;
            Ok(())
        };
        let out = sample(&f, &s, &[0.0], &GuidanceConfig::disabled(), &unc(), &unc(), &mut off(), Some(&mut cb)).unwrap();
        assert_eq!(seen, vec![(2, s.times()[2]), (1, s.times()[1]), (0, 0.0)]);
        assert_eq!(out.data, vec![0.0]);
        assert_eq!(out.states[2], vec![20.0]);
    }

    #[test]
    fn evaluation_counts_follow_guidance_gate() {
        let f = make_analytic_field(AnalyticKind::Constant(1.0), 1).unwrap();
        let s = make_schedule(4, ScheduleKind::Uniform).unwrap();
        let cond = ConditionInput { mode: CondMode::Conditional, embedding: None };
        let neg = ConditionInput { mode: CondMode::Negative, embedding: None };
        let g = GuidanceConfig::default();
        let inv = invert(&f, &s, &[0.0], &g, &cond, &neg, Stage::St, &mut off()).unwrap();
        // steps start at 0, .25, .5, .75; midpoints .125, .375, .625, .875
        let evals: Vec<usize> = inv.reports.iter().map(|r| r.evaluations).collect();
        assert_eq!(evals, vec![2, 2, 4, 4]);
    }

    #[test]
    fn convergence_orders() {
        let f = make_analytic_field(AnalyticKind::Linear(1.0), 64).unwrap();
        let start: Vec<f64> = (0..64).map(|i| 1.0 + i as f64 / 64.0).collect();
        let taylor = convergence_probe(&f, &start, &[8, 16, 32, 64], StepOrder::Taylor).unwrap();
        let euler = convergence_probe(&f, &start, &[8, 16, 32, 64], StepOrder::Euler).unwrap();
        let ts = taylor.slope.unwrap();
        let es = euler.slope.unwrap();
        assert!((1.8..=2.2).contains(&ts), "taylor slope {ts}");
        assert!((0.8..=1.2).contains(&es), "euler slope {es}");
        let c = make_analytic_field(AnalyticKind::Constant(0.3), 4).unwrap();
        let r = convergence_probe(&c, &[0.0; 4], &[2, 4], StepOrder::Taylor).unwrap();
        assert!(r.is_exact() && r.slope.is_none());
    }

    #[test]
    fn trajectory_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_schedule(3, ScheduleKind::Uniform).unwrap();
        let states: Vec<Vec<f64>> = (0..4).map(|k| vec![k as f64 * 0.5; 8]).collect();
        let traj = TrajectoryCache::new(Stage::St, s.times().to_vec(), states).unwrap();
        let shape = LatentShape::Dense { dims: Dims::cube(2), channels: 1 };
        traj.save(dir.path(), &shape).unwrap();
        let (back, back_shape) = TrajectoryCache::load(dir.path()).unwrap();
        assert_eq!(back, traj);
        assert_eq!(back_shape, shape);
    }

    #[test]
    fn trajectory_manifest_rejects_garbage() {
        assert!(parse_trajectory_manifest("stage = st\ncount = 1\ntime = 0 zz 0 a.vxg\n").is_err());
        assert!(parse_trajectory_manifest("stage = st\ncount = 2\n").is_err());
        assert!(parse_trajectory_manifest("stage = st\ncount = 1\ntime = 0 0000000000000000 0 ../a.vxg\n").is_err());
    }
}
