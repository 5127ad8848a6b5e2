//! Velocity fields `f(x, t)`, classifier-free guidance, and the attention
//! hook through which keys/values are captured or injected.

mod analytic;
mod transformer;

pub use analytic::{make_analytic_field, AnalyticField, AnalyticKind};
pub use transformer::{FieldLayout, ToyConfig, ToyTransformer};
#[cfg(test)]
pub(crate) use transformer::attend;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kvstore::{KVCacheStore, TimeKey, TokenLayout};

/// Which guidance branch an evaluation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CondMode {
    Conditional,
    Negative,
    Unconditional,
}

impl fmt::Display for CondMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CondMode::Conditional => "cond",
            CondMode::Negative => "neg",
            CondMode::Unconditional => "uncond",
        })
    }
}

impl FromStr for CondMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cond" => Ok(CondMode::Conditional),
            "neg" => Ok(CondMode::Negative),
            "uncond" => Ok(CondMode::Unconditional),
            _ => Err(Error::Format(format!("unknown branch {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInput {
    pub mode: CondMode,
    pub embedding: Option<Vec<f64>>,
}

impl ConditionInput {
    pub fn unconditional() -> Self {
        ConditionInput {
            mode: CondMode::Unconditional,
            embedding: None,
        }
    }

    /// A fixed pseudo-random embedding derived from `(name, seed)`.
    pub fn named(mode: CondMode, name: &str, width: usize, seed: u64) -> Self {
        // FNV-1a over the name, mixed with the seed
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ seed.rotate_left(17));
        let embedding = (0..width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        ConditionInput {
            mode,
            embedding: Some(embedding),
        }
    }
}

/// CFG scale and the closed time interval in which it is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub active_interval: Option<(f64, f64)>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega: 5.0,
            active_interval: Some((0.5, 1.0)),
        }
    }
}

impl GuidanceConfig {
    /// Conditional branch only, at every time.
    pub fn disabled() -> Self {
        GuidanceConfig {
            omega: 0.0,
            active_interval: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(Error::Parameter(format!("guidance scale {} must be >= 0", self.omega)));
        }
        if let Some((lo, hi)) = self.active_interval {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Parameter(format!("guidance interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn is_active(&self, t: f64) -> bool {
        matches!(self.active_interval, Some((lo, hi)) if lo <= t && t <= hi)
    }
}

/// Role of a token under the hard attention mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Edited,
    Preserved,
}

/// Records attention-block outputs per evaluation, for inspection.
#[derive(Debug, Default, Clone)]
pub struct AttentionTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub time: TimeKey,
    pub branch: CondMode,
    pub layer: u32,
    /// `tokens x model_dim`, row-major.
    pub output: Vec<f64>,
    pub width: usize,
}

pub enum HookMode<'a> {
    Off,
    Capture(&'a mut KVCacheStore),
    Inject {
        source: &'a KVCacheStore,
        /// Per-token weight of the freshly computed rows (1 = edited).
        token_mask: &'a [f64],
    },
}

/// Per-evaluation attention instrumentation. Fields without attention ignore it.
pub struct AttentionHook<'a> {
    pub mode: HookMode<'a>,
    pub roles: Option<&'a [TokenRole]>,
    pub trace: Option<&'a mut AttentionTrace>,
}

impl<'a> AttentionHook<'a> {
    pub fn off() -> Self {
        AttentionHook {
            mode: HookMode::Off,
            roles: None,
            trace: None,
        }
    }

    pub fn capture(sink: &'a mut KVCacheStore) -> Self {
        AttentionHook {
            mode: HookMode::Capture(sink),
            roles: None,
            trace: None,
        }
    }

    pub fn inject(source: &'a KVCacheStore, token_mask: &'a [f64]) -> Self {
        AttentionHook {
            mode: HookMode::Inject { source, token_mask },
            roles: None,
            trace: None,
        }
    }

    pub fn with_roles(mut self, roles: Option<&'a [TokenRole]>) -> Self {
        self.roles = roles;
        self
    }

    pub fn with_trace(mut self, trace: Option<&'a mut AttentionTrace>) -> Self {
        self.trace = trace;
        self
    }

    pub fn is_capturing(&self) -> bool {
        matches!(self.mode, HookMode::Capture(_))
    }
}

/// A deterministic velocity field over a flat state of fixed length.
pub trait VelocityField: Send + Sync {
    fn state_len(&self) -> usize;

    /// Width of the conditioning embedding, 0 if the field ignores it.
    fn cond_width(&self) -> usize {
        0
    }

    fn evaluate(&self, state: &[f64], t: f64, cond: &ConditionInput, hook: &mut AttentionHook<'_>) -> Result<Vec<f64>>;

    /// Token rows seen by the field's attention, if it has any.
    fn token_layout(&self) -> Option<&TokenLayout> {
        None
    }

    /// Token index owning each state value, if the field tokenizes its state.
    fn token_of_state(&self) -> Option<Vec<usize>> {
        None
    }

    /// Closed-form flow map from `t_from` to `t_to`, when one exists.
    fn exact_flow(&self, _state: &[f64], _t_from: f64, _t_to: f64) -> Option<Vec<f64>> {
        None
    }
}

/// Evaluates `field` with shape, time and finiteness checks.
pub fn eval_velocity(
    field: &dyn VelocityField,
    state: &[f64],
    t: f64,
    cond: &ConditionInput,
    hook: &mut AttentionHook<'_>,
) -> Result<Vec<f64>> {
    if state.len() != field.state_len() {
        return Err(Error::Shape(format!(
            "state has {} values, field expects {}",
            state.len(),
            field.state_len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("time {t} outside [0, 1]")));
    }
    if let Some(e) = &cond.embedding {
        if e.len() != field.cond_width() {
            return Err(Error::Shape(format!(
                "condition embedding width {} vs field width {}",
                e.len(),
                field.cond_width()
            )));
        }
    }
    let v = field.evaluate(state, t, cond, hook)?;
    if v.len() != state.len() {
        return Err(Error::Shape(format!("field returned {} values for {}", v.len(), state.len())));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("velocity component {i} at t = {t} is {}", v[i])));
    }
    Ok(v)
}

/// `(1 + omega) * f_cond - omega * f_neg`, elementwise.
pub fn cfg_combine(f_cond: &[f64], f_neg: &[f64], omega: f64) -> Result<Vec<f64>> {
    if f_cond.len() != f_neg.len() {
        return Err(Error::Shape(format!(
            "cfg branches of {} and {} values",
            f_cond.len(),
            f_neg.len()
        )));
    }
    if omega == 0.0 {
        return Ok(f_cond.to_vec());
    }
    Ok(f_cond
        .iter()
        .zip(f_neg)
        .map(|(c, n)| (1.0 + omega) * c - omega * n)
        .collect())
}

/// Velocity with guidance gated to the configured interval. Returns the
/// velocity and the number of field evaluations spent.
pub fn guided_velocity(
    field: &dyn VelocityField,
    state: &[f64],
    t: f64,
    guidance: &GuidanceConfig,
    cond: &ConditionInput,
    neg: &ConditionInput,
    hook: &mut AttentionHook<'_>,
) -> Result<(Vec<f64>, usize)> {
    let f_cond = eval_velocity(field, state, t, cond, hook)?;
    if !guidance.is_active(t) {
        return Ok((f_cond, 1));
    }
    let f_neg = eval_velocity(field, state, t, neg, hook)?;
    Ok((cfg_combine(&f_cond, &f_neg, guidance.omega)?, 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond() -> ConditionInput {
        ConditionInput {
            mode: CondMode::Conditional,
            embedding: None,
        }
    }

    fn neg() -> ConditionInput {
        ConditionInput {
            mode: CondMode::Negative,
            embedding: None,
        }
    }

    /// Returns 2 for the conditional branch and 1 otherwise.
    struct Branchy;

    impl VelocityField for Branchy {
        fn state_len(&self) -> usize {
            3
        }
        fn evaluate(&self, _: &[f64], _: f64, c: &ConditionInput, _: &mut AttentionHook<'_>) -> Result<Vec<f64>> {
            Ok(vec![if c.mode == CondMode::Conditional { 2.0 } else { 1.0 }; 3])
        }
    }

    #[test]
    fn cfg_combine_cases() {
        let a = [1.0, -2.0, 0.5];
        assert_eq!(cfg_combine(&a, &[9.0, 9.0, 9.0], 0.0).unwrap(), a);
        assert_eq!(cfg_combine(&[1.0; 4], &[0.0; 4], 5.0).unwrap(), vec![6.0; 4]);
        for omega in [0.5, 5.0, 100.0] {
            let out = cfg_combine(&a, &a, omega).unwrap();
            for (o, x) in out.iter().zip(&a) {
                assert!((o - x).abs() <= 1e-12 * (1.0 + omega));
            }
        }
        assert!(cfg_combine(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn cfg_combine_zero_omega_keeps_negative_zero() {
        let out = cfg_combine(&[-0.0], &[f64::MAX], 0.0).unwrap();
        assert_eq!(out[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn guidance_gating() {
        let g = GuidanceConfig::default();
        let mut hook = AttentionHook::off();
        let (v, n) = guided_velocity(&Branchy, &[0.0; 3], 0.3, &g, &cond(), &neg(), &mut hook).unwrap();
        assert_eq!((v, n), (vec![2.0; 3], 1));
        let (v, n) = guided_velocity(&Branchy, &[0.0; 3], 0.5, &g, &cond(), &neg(), &mut hook).unwrap();
        assert_eq!((v, n), (vec![7.0; 3], 2));
        let (v, _) = guided_velocity(&Branchy, &[0.0; 3], 0.7, &g, &cond(), &neg(), &mut hook).unwrap();
        assert_eq!(v, vec![7.0; 3]);
        let (v, _) = guided_velocity(&Branchy, &[0.0; 3], 1.0, &g, &cond(), &neg(), &mut hook).unwrap();
        assert_eq!(v, vec![7.0; 3]);
    }

    #[test]
    fn outside_interval_is_independent_of_omega() {
        let mut hook = AttentionHook::off();
        let base = guided_velocity(&Branchy, &[0.0; 3], 0.49, &GuidanceConfig::disabled(), &cond(), &neg(), &mut hook).unwrap().0;
        for omega in [0.0, 5.0, 100.0] {
            let g = GuidanceConfig { omega, active_interval: Some((0.5, 1.0)) };
            let v = guided_velocity(&Branchy, &[0.0; 3], 0.49, &g, &cond(), &neg(), &mut hook).unwrap().0;
            assert!(v.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn eval_checks_shape_and_time() {
        let mut hook = AttentionHook::off();
        assert!(matches!(eval_velocity(&Branchy, &[0.0; 2], 0.1, &cond(), &mut hook), Err(Error::Shape(_))));
        assert!(eval_velocity(&Branchy, &[0.0; 3], 1.5, &cond(), &mut hook).is_err());
    }

    #[test]
    fn guidance_validation() {
        assert!(GuidanceConfig { omega: -1.0, active_interval: None }.validate().is_err());
        assert!(GuidanceConfig { omega: 1.0, active_interval: Some((0.8, 0.2)) }.validate().is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }

    #[test]
    fn named_conditions_are_reproducible() {
        let a = ConditionInput::named(CondMode::Conditional, "edit", 8, 42);
        let b = ConditionInput::named(CondMode::Conditional, "edit", 8, 42);
        let c = ConditionInput::named(CondMode::Negative, "negative", 8, 42);
        assert_eq!(a, b);
        assert_ne!(a.embedding, c.embedding);
    }
}
