//! Cross-sectional least squares for conditional expectations given the
//! enlarged filtration at a base knot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::FiltrationPath;
use crate::scalar::Scalar;

/// Path functional evaluated at a knot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisFn {
    Constant,
    Time,
    W,
    W2,
    W3,
    /// `exp(a W_t - a^2 t / 2)`
    ExpMartingale {
        a: f64,
    },
    H,
    /// `H_t (t - tau)`
    HSinceDefault,
    /// Forward state supplied by the caller.
    State,
    /// Reciprocal of the forward state.
    InvState,
}

impl BasisFn {
    pub fn eval<S: Scalar>(&self, t: S, w: S, h: S, tau: S, x: Option<S>) -> S {
        match *self {
            BasisFn::Constant => S::one(),
            BasisFn::Time => t,
            BasisFn::W => w,
            BasisFn::W2 => w * w,
            BasisFn::W3 => w * w * w,
            BasisFn::ExpMartingale { a } => {
                let a = S::lit(a);
                (a * w - a * a * t * S::lit(0.5)).exp()
            }
            BasisFn::H => h,
            BasisFn::HSinceDefault => {
                if h > S::zero() {
                    h * (t - tau)
                } else {
                    S::zero()
                }
            }
            BasisFn::State => x.unwrap_or_else(S::zero),
            BasisFn::InvState => x.map_or_else(S::zero, |x| S::one() / x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub features: Vec<BasisFn>,
    pub split_on_default: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            features: vec![BasisFn::Constant, BasisFn::Time, BasisFn::W, BasisFn::W2, BasisFn::HSinceDefault],
            split_on_default: true,
        }
    }
}

impl RegressionBasis {
    pub fn new(features: Vec<BasisFn>, split_on_default: bool) -> Self {
        Self { features, split_on_default }
    }

    pub fn with(mut self, f: BasisFn) -> Self {
        if !self.features.contains(&f) {
            self.features.push(f);
        }
        self
    }

    pub fn uses_state(&self) -> bool {
        self.features.iter().any(|f| matches!(f, BasisFn::State | BasisFn::InvState))
    }
}

/// Orthonormal basis of the column span, built by modified Gram-Schmidt with
/// one reorthogonalization pass. Columns that are numerically dependent on the
/// earlier ones are dropped.
#[derive(Debug, Clone)]
pub struct Projection<S> {
    q: Vec<Vec<S>>,
    pub dropped: usize,
    pub condition: f64,
}

const DROP_TOL: f64 = 1e-9;

impl<S: Scalar> Projection<S> {
    pub fn new(columns: Vec<Vec<S>>) -> Self {
        let mut q: Vec<Vec<S>> = Vec::new();
        let mut dropped = 0;
        let (mut r_max, mut r_min) = (0.0f64, f64::INFINITY);
        for col in columns {
            let norm0 = norm(&col);
            if !(norm0 > S::zero()) || !norm0.is_finite() {
                dropped += 1;
                continue;
            }
            let mut v: Vec<S> = col.iter().map(|&c| c / norm0).collect();
            for _ in 0..2 {
                for qk in &q {
                    let d = dot(qk, &v);
                    for (vi, &qi) in v.iter_mut().zip(qk) {
                        *vi = *vi - d * qi;
                    }
                }
            }
            let r = norm(&v);
            if r.as_f64() <= DROP_TOL.max(S::epsilon().as_f64() * 1e3) {
                dropped += 1;
                continue;
            }
            r_max = r_max.max(r.as_f64());
            r_min = r_min.min(r.as_f64());
            for vi in v.iter_mut() {
                *vi = *vi / r;
            }
            q.push(v);
        }
        let condition = if q.is_empty() { f64::INFINITY } else { r_max / r_min };
        Self { q, dropped, condition }
    }

    pub fn rank(&self) -> usize {
        self.q.len()
    }

    /// Least-squares fitted values of `y`.
    pub fn project(&self, y: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); y.len()];
        for qk in &self.q {
            let c = dot(qk, y);
            for (o, &qi) in out.iter_mut().zip(qk) {
                *o = *o + c * qi;
            }
        }
        out
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    Alive,
    Defaulted,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Alive => "alive",
            Stratum::Defaulted => "defaulted",
        }
    }
}

#[derive(Debug, Clone)]
struct Group<S> {
    stratum: Stratum,
    members: Vec<usize>,
    proj: Projection<S>,
}

/// Regression operator at one base knot, shared by every quantity projected
/// at that knot.
#[derive(Debug, Clone)]
pub struct CrossSection<S> {
    groups: Vec<Group<S>>,
    n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RegressionDiagnostics {
    pub max_condition: f64,
    pub dropped_columns: usize,
    pub min_stratum_size: usize,
}

impl RegressionDiagnostics {
    pub fn absorb<S: Scalar>(&mut self, cs: &CrossSection<S>) {
        for g in &cs.groups {
            self.max_condition = self.max_condition.max(g.proj.condition);
            self.dropped_columns += g.proj.dropped;
            if self.min_stratum_size == 0 || g.members.len() < self.min_stratum_size {
                self.min_stratum_size = g.members.len();
            }
        }
    }
}

impl<S: Scalar> CrossSection<S> {
    /// Builds the design at base knot `j`. A constant column is always included.
    /// `state` holds the forward state per path at that knot when the basis
    /// uses it.
    pub fn build(basis: &RegressionBasis, paths: &[FiltrationPath<S>], j: usize, state: Option<&[S]>) -> Result<Self> {
        let n = paths.len();
        let mut strata: Vec<(Stratum, Vec<usize>)> = if basis.split_on_default {
            let (dead, alive): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| paths[i].base_h(j) > S::zero());
            vec![(Stratum::Alive, alive), (Stratum::Defaulted, dead)]
        } else {
            vec![(Stratum::All, (0..n).collect())]
        };
        strata.retain(|(_, m)| !m.is_empty());
        let mut features = vec![BasisFn::Constant];
        features.extend(basis.features.iter().copied().filter(|f| *f != BasisFn::Constant));
        let mut groups = Vec::with_capacity(strata.len());
        for (stratum, members) in strata {
            let columns = features
                .iter()
                .map(|f| {
                    members
                        .iter()
                        .map(|&i| {
                            let p = &paths[i];
                            let t = p.grid.base_knot(j);
                            f.eval(t, p.base_w(j), p.base_h(j), p.tau, state.map(|s| s[i]))
                        })
                        .collect()
                })
                .collect();
            let proj = Projection::new(columns);
            if proj.rank() == 0 {
                return Err(Error::Regression {
                    knot: j,
                    stratum: stratum.name(),
                    reason: "no usable basis columns".into(),
                });
            }
            groups.push(Group { stratum, members, proj });
        }
        Ok(Self { groups, n })
    }

    /// Fitted conditional expectation of `y` (indexed by path).
    pub fn project(&self, y: &[S]) -> Vec<S> {
        self.project_where(y, |_| true)
    }

    /// Projects only on strata accepted by `keep`; other paths get zero.
    pub fn project_where(&self, y: &[S], keep: impl Fn(Stratum) -> bool) -> Vec<S> {
        let mut out = vec![S::zero(); self.n];
        for g in self.groups.iter().filter(|g| keep(g.stratum)) {
            let local: Vec<S> = g.members.iter().map(|&i| y[i]).collect();
            for (&i, v) in g.members.iter().zip(g.proj.project(&local)) {
                out[i] = v;
            }
        }
        out
    }

    pub fn strata(&self) -> impl Iterator<Item = (Stratum, &[usize])> {
        self.groups.iter().map(|g| (g.stratum, g.members.as_slice()))
    }
}
