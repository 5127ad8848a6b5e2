use super::{AttentionHook, ConditionInput, VelocityField};
use crate::error::{Error, Result};

/// Fields whose flow maps have closed forms.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticKind {
    /// `f(x, t) = c`
    Constant(f64),
    /// `f(x, t) = t`
    TimePoly,
    /// `f(x, t) = lambda * x`
    Linear(f64),
    /// `f(x, t) = A x + b`, `A` row-major `n x n`.
    Affine { a: Vec<f64>, b: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct AnalyticField {
    kind: AnalyticKind,
    len: usize,
}

/// Bound on the row-sum norm of `A` so flows stay finite on `[0, 1]`.
const MAX_AFFINE_NORM: f64 = 50.0;

pub fn make_analytic_field(kind: AnalyticKind, len: usize) -> Result<AnalyticField> {
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    match &kind {
        AnalyticKind::Constant(c) | AnalyticKind::Linear(c) if !c.is_finite() => {
            return Err(Error::Parameter(format!("non-finite field parameter {c}")))
        }
        AnalyticKind::Linear(l) if l.abs() > MAX_AFFINE_NORM => {
            return Err(Error::Parameter(format!("rate {l} too large")))
        }
        AnalyticKind::Affine { a, b } => {
            if a.len() != len * len || b.len() != len {
                return Err(Error::Parameter(format!("affine field needs a {len}x{len} matrix and {len} offsets")));
            }
            if !finite(a) || !finite(b) {
                return Err(Error::Parameter("non-finite affine parameters".into()));
            }
            let norm = a
                .chunks(len.max(1))
                .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if norm > MAX_AFFINE_NORM {
                return Err(Error::Parameter(format!("affine matrix norm {norm} too large")));
            }
        }
        _ => {}
    }
    Ok(AnalyticField { kind, len })
}

impl AnalyticField {
    pub fn kind(&self) -> &AnalyticKind {
        &self.kind
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `exp(M)` by scaling and squaring with a truncated Taylor series.
fn expm(m: &[f64], n: usize) -> Vec<f64> {
    let norm = m
        .chunks(n)
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = 0.5f64.powi(squarings as i32);
    let a: Vec<f64> = m.iter().map(|x| x * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=24 {
        term = matmul(&term, &a, n);
        term.iter_mut().for_each(|x| *x /= k as f64);
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, n);
    }
    result
}

impl VelocityField for AnalyticField {
    fn state_len(&self) -> usize {
        self.len
    }

    fn evaluate(&self, state: &[f64], t: f64, _: &ConditionInput, _: &mut AttentionHook<'_>) -> Result<Vec<f64>> {
        Ok(match &self.kind {
            AnalyticKind::Constant(c) => vec![*c; state.len()],
            AnalyticKind::TimePoly => vec![t; state.len()],
            AnalyticKind::Linear(l) => state.iter().map(|x| l * x).collect(),
            AnalyticKind::Affine { a, b } => (0..self.len)
                .map(|i| {
                    let row = &a[i * self.len..(i + 1) * self.len];
                    row.iter().zip(state).map(|(r, x)| r * x).sum::<f64>() + b[i]
                })
                .collect(),
        })
    }

    fn exact_flow(&self, state: &[f64], t_from: f64, t_to: f64) -> Option<Vec<f64>> {
        let dt = t_to - t_from;
        Some(match &self.kind {
            AnalyticKind::Constant(c) => state.iter().map(|x| x + c * dt).collect(),
            AnalyticKind::TimePoly => {
                let shift = 0.5 * (t_to * t_to - t_from * t_from);
                state.iter().map(|x| x + shift).collect()
            }
            AnalyticKind::Linear(l) => {
                let g = (l * dt).exp();
                state.iter().map(|x| x * g).collect()
            }
            AnalyticKind::Affine { a, b } => {
                // exp of the augmented generator [[A, b], [0, 0]] carries the offset
                let n = self.len + 1;
                let mut m = vec![0.0; n * n];
                for i in 0..self.len {
                    for j in 0..self.len {
                        m[i * n + j] = a[i * self.len + j] * dt;
                    }
                    m[i * n + self.len] = b[i] * dt;
                }
                let e = expm(&m, n);
                (0..self.len)
                    .map(|i| {
                        let row = &e[i * n..i * n + self.len];
                        row.iter().zip(state).map(|(r, x)| r * x).sum::<f64>() + e[i * n + self.len]
                    })
                    .collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::eval_velocity;

    fn eval(f: &AnalyticField, x: &[f64], t: f64) -> Vec<f64> {
        eval_velocity(f, x, t, &ConditionInput::unconditional(), &mut AttentionHook::off()).unwrap()
    }

    #[test]
    fn constant_and_linear_definitions() {
        let c = make_analytic_field(AnalyticKind::Constant(2.5), 4).unwrap();
        assert_eq!(eval(&c, &[1.0, -3.0, 0.0, 9.0], 0.7), vec![2.5; 4]);
        let l = make_analytic_field(AnalyticKind::Linear(1.0), 3).unwrap();
        assert_eq!(eval(&l, &[1.0; 3], 0.2), vec![1.0; 3]);
    }

    #[test]
    fn exact_flows() {
        let l = make_analytic_field(AnalyticKind::Linear(1.0), 1).unwrap();
        assert!((l.exact_flow(&[2.0], 0.0, 0.3).unwrap()[0] - 2.0 * 0.3f64.exp()).abs() < 1e-15);
        let p = make_analytic_field(AnalyticKind::TimePoly, 1).unwrap();
        assert!((p.exact_flow(&[1.0], 0.0, 0.6).unwrap()[0] - (1.0 + 0.18)).abs() < 1e-15);
        let c = make_analytic_field(AnalyticKind::Constant(-2.0), 1).unwrap();
        assert_eq!(c.exact_flow(&[1.0], 0.0, 0.5).unwrap(), vec![0.0]);
    }

    #[test]
    fn affine_flow_matches_scalar_closed_form() {
        // diagonal A: x(t) = e^{a t} x0 + b (e^{a t} - 1) / a per component
        let a = vec![0.7, 0.0, 0.0, -1.3];
        let b = vec![0.4, 2.0];
        let f = make_analytic_field(AnalyticKind::Affine { a, b }, 2).unwrap();
        let out = f.exact_flow(&[1.0, -0.5], 0.2, 0.9).unwrap();
        let dt: f64 = 0.7;
        let e0 = f64::exp(0.7 * dt);
        let e1 = f64::exp(-1.3 * dt);
        assert!((out[0] - (e0 * 1.0 + 0.4 * (e0 - 1.0) / 0.7)).abs() < 1e-13);
        assert!((out[1] - (e1 * -0.5 + 2.0 * (e1 - 1.0) / -1.3)).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(make_analytic_field(AnalyticKind::Constant(f64::NAN), 1).is_err());
        assert!(make_analytic_field(AnalyticKind::Affine { a: vec![1.0; 3], b: vec![0.0; 2] }, 2).is_err());
        assert!(make_analytic_field(AnalyticKind::Affine { a: vec![100.0; 4], b: vec![0.0; 2] }, 2).is_err());
    }
}
