//! Deterministic functions of time with closed-form integrals.
//!
//! Used for the default intensity and for the time-dependent market
//! coefficients. Piecewise-linear functions are extended by constants
//! outside their knot range.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeFn<S> {
    Constant { value: S },
    PiecewiseLinear { knots: Vec<S>, values: Vec<S> },
}

impl<S: Scalar> TimeFn<S> {
    pub fn constant(value: S) -> Self {
        TimeFn::Constant { value }
    }

    pub fn piecewise_linear(knots: Vec<S>, values: Vec<S>) -> Result<Self> {
        let f = TimeFn::PiecewiseLinear { knots, values };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TimeFn::Constant { value } => {
                if !value.is_finite() {
                    return Err(invalid("time function value is not finite"));
                }
            }
            TimeFn::PiecewiseLinear { knots, values } => {
                if knots.is_empty() || knots.len() != values.len() {
                    return Err(invalid("piecewise-linear function needs matching, non-empty knots and values"));
                }
                if knots.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(invalid("piecewise-linear knots must be strictly increasing"));
                }
                if values.iter().chain(knots).any(|v| !v.is_finite()) {
                    return Err(invalid("piecewise-linear function has non-finite entries"));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, t: S) -> S {
        match self {
            TimeFn::Constant { value } => *value,
            TimeFn::PiecewiseLinear { knots, values } => {
                let n = knots.len();
                if t <= knots[0] {
                    return values[0];
                }
                if t >= knots[n - 1] {
                    return values[n - 1];
                }
                let i = segment(knots, t);
                let w = (t - knots[i]) / (knots[i + 1] - knots[i]);
                values[i] + w * (values[i + 1] - values[i])
            }
        }
    }

    /// Exact integral over `[0, t]`.
    pub fn cumulative(&self, t: S) -> S {
        match self {
            TimeFn::Constant { value } => *value * t,
            TimeFn::PiecewiseLinear { knots, values } => {
                let mut acc = S::zero();
                let mut left = S::zero();
                for (a, b, va, vb) in self.pieces(knots, values) {
                    if t <= left {
                        break;
                    }
                    let lo = a.max(left);
                    let hi = b.min(t);
                    if hi > lo {
                        let (fa, fb) = (lerp(a, b, va, vb, lo), lerp(a, b, va, vb, hi));
                        acc = acc + (fa + fb) / S::lit(2.0) * (hi - lo);
                        left = hi;
                    }
                }
                acc
            }
        }
    }

    pub fn integral(&self, a: S, b: S) -> S {
        self.cumulative(b) - self.cumulative(a)
    }

    /// Smallest `t >= 0` with `cumulative(t) >= level`, if one exists.
    ///
    /// Requires a nonnegative function.
    pub fn inverse_cumulative(&self, level: S) -> Option<S> {
        if level <= S::zero() {
            return Some(S::zero());
        }
        match self {
            TimeFn::Constant { value } => {
                if *value > S::zero() {
                    Some(level / *value)
                } else {
                    None
                }
            }
            TimeFn::PiecewiseLinear { knots, values } => {
                let mut acc = S::zero();
                for (a0, b, va, vb) in self.pieces(knots, values) {
                    let a = a0.max(S::zero());
                    if b <= a {
                        continue;
                    }
                    let fa = lerp(a0, b, va, vb, a);
                    let mass = if b.is_finite() {
                        (fa + vb) / S::lit(2.0) * (b - a)
                    } else if fa > S::zero() {
                        S::infinity()
                    } else {
                        S::zero()
                    };
                    if acc + mass >= level {
                        let rest = level - acc;
                        if !b.is_finite() {
                            return Some(a + rest / fa);
                        }
                        let slope = (vb - fa) / (b - a);
                        let disc = (fa * fa + S::lit(2.0) * slope * rest).max(S::zero());
                        let denom = fa + disc.sqrt();
                        let x = if denom > S::zero() { S::lit(2.0) * rest / denom } else { b - a };
                        return Some((a + x).min(b));
                    }
                    acc = acc + mass;
                }
                None
            }
        }
    }

    /// Upper bound of the function on `[0, horizon]`.
    pub fn sup_on(&self, horizon: S) -> S {
        match self {
            TimeFn::Constant { value } => *value,
            TimeFn::PiecewiseLinear { knots, .. } => {
                let mut m = self.value(S::zero()).max(self.value(horizon));
                for &k in knots {
                    if k >= S::zero() && k <= horizon {
                        m = m.max(self.value(k));
                    }
                }
                m
            }
        }
    }

    /// Lower bound of the function on `[0, horizon]`.
    pub fn inf_on(&self, horizon: S) -> S {
        match self {
            TimeFn::Constant { value } => *value,
            TimeFn::PiecewiseLinear { knots, .. } => {
                let mut m = self.value(S::zero()).min(self.value(horizon));
                for &k in knots {
                    if k >= S::zero() && k <= horizon {
                        m = m.min(self.value(k));
                    }
                }
                m
            }
        }
    }

    /// Linear pieces `(a, b, f(a), f(b))` covering the real line, with
    /// constant extensions `(-inf, k0]` and `[kn, +inf)`.
    fn pieces<'a>(&self, knots: &'a [S], values: &'a [S]) -> impl Iterator<Item = (S, S, S, S)> + 'a {
        let n = knots.len();
        let head = std::iter::once((S::neg_infinity(), knots[0], values[0], values[0]));
        let mid = (0..n - 1).map(move |i| (knots[i], knots[i + 1], values[i], values[i + 1]));
        let tail = std::iter::once((knots[n - 1], S::infinity(), values[n - 1], values[n - 1]));
        head.chain(mid).chain(tail)
    }
}

fn segment<S: Scalar>(knots: &[S], t: S) -> usize {
    match knots.binary_search_by(|k| k.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
        Ok(i) => i.min(knots.len() - 2),
        Err(i) => i - 1,
    }
}

fn lerp<S: Scalar>(a: S, b: S, va: S, vb: S, t: S) -> S {
    if !a.is_finite() || !b.is_finite() || b == a {
        return if a.is_finite() { va } else { vb };
    }
    va + (vb - va) * (t - a) / (b - a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> TimeFn<f64> {
        TimeFn::piecewise_linear(vec![0.0, 1.0], vec![0.0, 2.0]).unwrap()
    }

    #[test]
    fn ramp_cumulative_is_t_squared() {
        let f = ramp();
        for &t in &[0.0, 0.25, 0.5, 1.0] {
            assert!((f.cumulative(t) - t * t).abs() < 1e-14);
        }
        // constant continuation at 2 beyond t = 1
        assert!((f.cumulative(1.5) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ramp_inverse_is_sqrt() {
        let f = ramp();
        for &e in &[0.01, 0.3, 0.99] {
            let t = f.inverse_cumulative(e).unwrap();
            assert!((t - e.sqrt()).abs() < 1e-12, "{e} -> {t}");
        }
        let t = f.inverse_cumulative(1.5).unwrap();
        assert!((t - 1.25).abs() < 1e-12);
    }

    #[test]
    fn constant_zero_never_reaches_level() {
        let f = TimeFn::constant(0.0_f64);
        assert_eq!(f.inverse_cumulative(0.1), None);
    }

    #[test]
    fn decreasing_piece_inverse() {
        let f: TimeFn<f64> = TimeFn::piecewise_linear(vec![0.0, 2.0], vec![2.0, 0.0]).unwrap();
        // Lambda(t) = 2t - t^2/2 on [0,2], total mass 2, then flat at 0
        let t = f.inverse_cumulative(1.5).unwrap();
        assert!((2.0 * t - t * t / 2.0 - 1.5).abs() < 1e-12);
        assert_eq!(f.inverse_cumulative(2.5), None);
    }

    #[test]
    fn sup_and_inf() {
        let f = TimeFn::piecewise_linear(vec![0.5, 1.0], vec![3.0, -1.0]).unwrap();
        assert_eq!(f.sup_on(2.0), 3.0);
        assert_eq!(f.inf_on(2.0), -1.0);
    }
}
