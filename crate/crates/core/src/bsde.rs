//! Backward equations with a single default jump: the explicit solution of the
//! linear equation through the integrating factor Gamma, a regression-based
//! backward scheme for Lipschitz generators, and plug-back / contraction
//! diagnostics.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::paths::FiltrationPath;
use crate::regression::{CrossSection, RegressionBasis, RegressionDiagnostics, Stratum};
use crate::scalar::Scalar;

/// Information available at base knot `knot` of path `path`.
#[derive(Debug, Clone, Copy)]
pub struct KnotContext<S> {
    pub path: usize,
    pub knot: usize,
    pub t: S,
    pub dt: S,
    pub w: S,
    pub h: S,
    pub lambda_g: S,
    pub tau: S,
}

impl<S: Scalar> KnotContext<S> {
    pub fn at(path: &FiltrationPath<S>, path_id: usize, j: usize) -> Self {
        let g = &path.grid;
        Self {
            path: path_id,
            knot: j,
            t: g.base_knot(j),
            dt: if j < g.n_steps() { g.base_dt(j) } else { S::zero() },
            w: path.base_w(j),
            h: path.base_h(j),
            lambda_g: path.base_lambda_g(j),
            tau: path.tau,
        }
    }
}

pub type AdaptedFn<S> = Arc<dyn Fn(&KnotContext<S>) -> S + Send + Sync>;
pub type Terminal<S> = Arc<dyn Fn(&FiltrationPath<S>, usize) -> S + Send + Sync>;
pub type Generator<S> = Arc<dyn Fn(&KnotContext<S>, S, S, S) -> S + Send + Sync>;

/// Coefficient process: a constant or a function of the knot context.
#[derive(Clone)]
pub enum Adapted<S> {
    Constant(S),
    Fn(AdaptedFn<S>),
}

impl<S: Scalar> Adapted<S> {
    pub fn from_fn(f: impl Fn(&KnotContext<S>) -> S + Send + Sync + 'static) -> Self {
        Adapted::Fn(Arc::new(f))
    }

    pub fn at(&self, ctx: &KnotContext<S>) -> S {
        match self {
            Adapted::Constant(c) => *c,
            Adapted::Fn(f) => f(ctx),
        }
    }
}

impl<S: Scalar> fmt::Debug for Adapted<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Adapted::Constant(c) => write!(f, "Constant({c})"),
            Adapted::Fn(_) => f.write_str("Fn(..)"),
        }
    }
}

/// `dp = -(phi + (alpha - pi + lambda^G mu) p + beta q + lambda^G mu w) dt + q dW + w dM`,
/// `p_T = F`.
#[derive(Clone)]
pub struct LinearBsdeSpec<S> {
    pub phi: Adapted<S>,
    pub alpha: Adapted<S>,
    pub pi: Adapted<S>,
    pub mu: Adapted<S>,
    pub beta: Adapted<S>,
    pub terminal: Terminal<S>,
}

impl<S: Scalar> fmt::Debug for LinearBsdeSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearBsdeSpec")
            .field("phi", &self.phi)
            .field("alpha", &self.alpha)
            .field("pi", &self.pi)
            .field("mu", &self.mu)
            .field("beta", &self.beta)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> LinearBsdeSpec<S> {
    pub fn constant(phi: S, alpha: S, pi: S, mu: S, beta: S, terminal: S) -> Self {
        Self {
            phi: Adapted::Constant(phi),
            alpha: Adapted::Constant(alpha),
            pi: Adapted::Constant(pi),
            mu: Adapted::Constant(mu),
            beta: Adapted::Constant(beta),
            terminal: Arc::new(move |_, _| terminal),
        }
    }

    pub fn with_terminal(mut self, f: impl Fn(&FiltrationPath<S>, usize) -> S + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self
    }

    /// Coefficient of `p` in the generator.
    pub fn drift(&self, ctx: &KnotContext<S>) -> S {
        self.alpha.at(ctx) - self.pi.at(ctx) + ctx.lambda_g * self.mu.at(ctx)
    }

    /// Same equation as a general spec in martingale form.
    pub fn to_general(&self, lipschitz: S) -> GeneralBsdeSpec<S> {
        let s = self.clone();
        GeneralBsdeSpec {
            generator: Arc::new(move |c, y, z, k| s.phi.at(c) + s.drift(c) * y + s.beta.at(c) * z + c.lambda_g * s.mu.at(c) * k),
            lipschitz,
            terminal: self.terminal.clone(),
            form: GeneratorForm::Martingale,
            scheme: Scheme::Explicit,
            state: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaPath<S> {
    /// Values at every refined knot of the path's grid.
    pub gamma: Vec<S>,
    /// Values at base knots.
    pub base: Vec<S>,
}

fn base_coeffs<S: Scalar>(spec: &LinearBsdeSpec<S>, path: &FiltrationPath<S>, path_id: usize) -> Result<Vec<(S, S, S, S)>> {
    (0..path.grid.n_steps())
        .map(|j| {
            let c = KnotContext::at(path, path_id, j);
            let mu = spec.mu.at(&c);
            if !(mu > -S::one()) {
                return Err(invalid(format!("mu must be > -1, got {mu} at knot {j}")));
            }
            Ok((spec.alpha.at(&c), spec.pi.at(&c), mu, spec.beta.at(&c)))
        })
        .collect()
}

/// Closed form `Gamma_t = exp(int (alpha - pi - beta^2/2) ds + int beta dW) (1 + mu)^{H_t}`
/// with coefficients frozen on base steps.
pub fn simulate_gamma<S: Scalar>(spec: &LinearBsdeSpec<S>, path: &FiltrationPath<S>, path_id: usize) -> Result<GammaPath<S>> {
    let coeffs = base_coeffs(spec, path, path_id)?;
    let grid = &path.grid;
    let knots = grid.knots();
    let half = S::lit(0.5);
    let mut gamma = Vec::with_capacity(knots.len());
    let (mut log_g, mut factor) = (S::zero(), S::one());
    gamma.push(S::one());
    for k in 0..knots.len() - 1 {
        let (a, pi, mu, b) = coeffs[grid.base_step_of(k)];
        log_g = log_g + (a - pi - half * b * b) * (knots[k + 1] - knots[k]) + b * path.dw[k];
        if grid.tau_index() == Some(k + 1) {
            factor = S::one() + mu;
        }
        gamma.push(log_g.exp() * factor);
    }
    let base = grid.base_index().iter().map(|&k| gamma[k]).collect();
    Ok(GammaPath { gamma, base })
}

/// Euler scheme for `dGamma = Gamma[(alpha - pi + lambda^G mu) dt + beta dW + mu dM]`,
/// with `lambda^G dt` realized by the exact compensator increment.
pub fn simulate_gamma_euler<S: Scalar>(spec: &LinearBsdeSpec<S>, path: &FiltrationPath<S>, path_id: usize) -> Result<GammaPath<S>> {
    let coeffs = base_coeffs(spec, path, path_id)?;
    let grid = &path.grid;
    let knots = grid.knots();
    let mut gamma = Vec::with_capacity(knots.len());
    gamma.push(S::one());
    for k in 0..knots.len() - 1 {
        let (a, pi, mu, b) = coeffs[grid.base_step_of(k)];
        let dc = path.compensator[k + 1] - path.compensator[k];
        let dm = path.m[k + 1] - path.m[k];
        let g = gamma[k];
        gamma.push(g + g * ((a - pi) * (knots[k + 1] - knots[k]) + mu * dc + b * path.dw[k] + mu * dm));
    }
    let base = grid.base_index().iter().map(|&k| gamma[k]).collect();
    Ok(GammaPath { gamma, base })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BsdeDiagnostics {
    pub regression: RegressionDiagnostics,
    pub inner_iterations_max: usize,
}

/// Solution at base knots, stored `[knot][path]`. `z` and `k` at the last
/// knot repeat the previous step.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution<S> {
    pub t: Vec<S>,
    pub y: Vec<Vec<S>>,
    pub z: Vec<Vec<S>>,
    pub k: Vec<Vec<S>>,
    pub diagnostics: BsdeDiagnostics,
}

impl<S: Scalar> BsdeSolution<S> {
    pub fn n_knots(&self) -> usize {
        self.t.len()
    }

    pub fn y0(&self) -> S {
        mean(&self.y[0])
    }

    pub fn mean_y(&self) -> Vec<S> {
        self.y.iter().map(|v| mean(v)).collect()
    }

    /// Writes `knot, t, mean_Y, mean_Z, mean_K, residual` rows.
    pub fn write_csv<W: Write>(&self, out: W, residual_by_knot: &[f64]) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["knot", "t", "mean_Y", "mean_Z", "mean_K", "residual"])?;
        for j in 0..self.n_knots() {
            wtr.write_record([
                j.to_string(),
                self.t[j].as_f64().to_string(),
                mean(&self.y[j]).as_f64().to_string(),
                mean(&self.z[j]).as_f64().to_string(),
                mean(&self.k[j]).as_f64().to_string(),
                residual_by_knot.get(j).copied().unwrap_or(0.0).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn mean<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, &b| a + b) / S::from_count(v.len())
}

fn check_paths<S: Scalar>(paths: &[FiltrationPath<S>]) -> Result<usize> {
    let first = paths.first().ok_or_else(|| invalid("no paths"))?;
    let n = first.grid.n_steps();
    let t0 = first.grid.horizon();
    if paths.iter().any(|p| p.grid.n_steps() != n || p.grid.horizon() != t0) {
        return Err(Error::Alignment("paths must share the base grid".into()));
    }
    Ok(n)
}

fn base_times<S: Scalar>(path: &FiltrationPath<S>) -> Vec<S> {
    (0..=path.grid.n_steps()).map(|j| path.grid.base_knot(j)).collect()
}

/// `E[(next - E[next]) dW] / dt` and `E[(next - E[next]) dM] / E[dC]` on the
/// pre-default stratum; `K = 0` once default has occurred.
fn martingale_parts<S: Scalar>(cs: &CrossSection<S>, paths: &[FiltrationPath<S>], j: usize, next: &[S], fitted: &[S]) -> (Vec<S>, Vec<S>) {
    let incs: Vec<_> = paths.iter().map(|p| p.base_increments(j)).collect();
    let dt = incs[0].dt;
    let centered: Vec<S> = next.iter().zip(fitted).map(|(a, b)| *a - *b).collect();
    let zw: Vec<S> = centered.iter().zip(&incs).map(|(c, i)| *c * i.dw).collect();
    let z = cs.project(&zw).into_iter().map(|v| v / dt).collect();
    let mut k = vec![S::zero(); paths.len()];
    for (stratum, members) in cs.strata() {
        if stratum == Stratum::Defaulted {
            continue;
        }
        let alive: Vec<usize> = members.iter().copied().filter(|&i| paths[i].base_h(j) == S::zero()).collect();
        if alive.is_empty() {
            continue;
        }
        let norm = mean(&alive.iter().map(|&i| incs[i].dc).collect::<Vec<_>>());
        if !(norm > S::zero()) {
            continue;
        }
        let km: Vec<S> = centered.iter().zip(&incs).map(|(c, i)| *c * i.dm).collect();
        let fit = cs.project_where(&km, |s| s == stratum);
        for &i in &alive {
            k[i] = fit[i] / norm;
        }
    }
    (z, k)
}

/// Explicit solution `p_t = E[F Gamma_T / Gamma_t + int_t^T Gamma_s / Gamma_t phi_s ds | G_t]`.
///
/// The Gamma-weighted payoff `Gamma_T F + sum Gamma_s phi_s ds` (right-point
/// rule on base steps) is regressed at each base knot and divided by
/// `Gamma_t`; `q` and `w` come from
/// regressing the one-step increments of `p` against `dW` and `dM`.
pub fn solve_linear_explicit<S: Scalar>(spec: &LinearBsdeSpec<S>, paths: &[FiltrationPath<S>], basis: &RegressionBasis) -> Result<BsdeSolution<S>> {
    let n = check_paths(paths)?;
    let per_path: Vec<(Vec<S>, Vec<S>, S)> = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = simulate_gamma(spec, p, i)?;
            let phi: Vec<S> = (0..=n).map(|j| spec.phi.at(&KnotContext::at(p, i, j))).collect();
            let f = (spec.terminal)(p, i);
            if !f.is_finite() {
                return Err(invalid(format!("terminal value not finite on path {i}")));
            }
            Ok((g.base, phi, f))
        })
        .collect::<Result<_>>()?;
    // acc[i] = Gamma_N F + sum_{l >= j} Gamma_{l+1} phi_{l+1} dt_l, updated backwards
    let mut acc: Vec<S> = per_path.iter().map(|(g, _, f)| g[n] * *f).collect();
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    let mut k = vec![Vec::new(); n + 1];
    let mut diag = BsdeDiagnostics::default();
    y[n] = per_path.iter().map(|(_, _, f)| *f).collect();
    for j in (0..n).rev() {
        let dt = paths[0].grid.base_dt(j);
        for (a, (g, phi, _)) in acc.iter_mut().zip(&per_path) {
            *a = *a + g[j + 1] * phi[j + 1] * dt;
        }
        let cs = CrossSection::build(basis, paths, j, None)?;
        diag.regression.absorb(&cs);
        y[j] = cs.project(&acc).into_iter().zip(&per_path).map(|(v, (g, _, _))| v / g[j]).collect();
        let fitted = cs.project(&y[j + 1]);
        let (zj, kj) = martingale_parts(&cs, paths, j, &y[j + 1], &fitted);
        z[j] = zj;
        k[j] = kj;
    }
    z[n] = z[n - 1].clone();
    k[n] = k[n - 1].clone();
    Ok(BsdeSolution {
        t: base_times(&paths[0]),
        y,
        z,
        k,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorForm {
    /// Generator `f` paired with `dH`; the `dM` generator is `f - lambda^G k`.
    DefaultH,
    /// Generator `F` paired with `dM`.
    Martingale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `Y_j = E[Y_{j+1} + F(t_j, Y_{j+1}, Z_j, K_j) dt]`
    Explicit,
    /// `Y_j = E[Y_{j+1}] + F(t_j, Y_j, Z_j, K_j) dt`, solved by fixed point.
    Implicit,
}

/// `Y_t = xi + int F(s, Y, Z, K) ds - int Z dW - int K dM`.
#[derive(Clone)]
pub struct GeneralBsdeSpec<S> {
    pub generator: Generator<S>,
    pub lipschitz: S,
    pub terminal: Terminal<S>,
    pub form: GeneratorForm,
    pub scheme: Scheme,
    /// Forward state `[path][base knot]` for `State` basis features.
    pub state: Option<Arc<Vec<Vec<S>>>>,
}

impl<S: Scalar> fmt::Debug for GeneralBsdeSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralBsdeSpec")
            .field("lipschitz", &self.lipschitz)
            .field("form", &self.form)
            .field("scheme", &self.scheme)
            .finish_non_exhaustive()
    }
}

const INNER_TOL: f64 = 1e-10;
const INNER_MAX: usize = 50;

impl<S: Scalar> GeneralBsdeSpec<S> {
    pub fn new(
        generator: impl Fn(&KnotContext<S>, S, S, S) -> S + Send + Sync + 'static,
        lipschitz: S,
        terminal: impl Fn(&FiltrationPath<S>, usize) -> S + Send + Sync + 'static,
        form: GeneratorForm,
    ) -> Self {
        Self {
            generator: Arc::new(generator),
            lipschitz,
            terminal: Arc::new(terminal),
            form,
            scheme: Scheme::Explicit,
            state: None,
        }
    }

    pub fn with_state(mut self, state: Arc<Vec<Vec<S>>>) -> Self {
        self.state = Some(state);
        self
    }

    fn state_at(&self, j: usize) -> Option<Vec<S>> {
        self.state.as_ref().map(|s| s.iter().map(|row| row[j]).collect())
    }

    fn section(&self, basis: &RegressionBasis, paths: &[FiltrationPath<S>], j: usize) -> Result<CrossSection<S>> {
        if basis.uses_state() && self.state.is_none() {
            return Err(invalid("basis uses the forward state but the spec carries none"));
        }
        CrossSection::build(basis, paths, j, self.state_at(j).as_deref())
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Generator paired with `dM`.
    pub fn martingale_generator(&self, c: &KnotContext<S>, y: S, z: S, k: S) -> S {
        let f = (self.generator)(c, y, z, k);
        match self.form {
            GeneratorForm::DefaultH => f - c.lambda_g * k,
            GeneratorForm::Martingale => f,
        }
    }

    /// Largest observed `|f(a) - f(b)| / (|dy| + |dz| + |dk|)` over the
    /// sample, to compare with the declared constant.
    pub fn observed_lipschitz(&self, contexts: &[KnotContext<S>], points: &[[S; 6]]) -> S {
        let mut worst = S::zero();
        for c in contexts {
            for p in points {
                let fa = (self.generator)(c, p[0], p[1], p[2]);
                let fb = (self.generator)(c, p[3], p[4], p[5]);
                let d = (p[0] - p[3]).abs() + (p[1] - p[4]).abs() + (p[2] - p[5]).abs();
                if d > S::zero() {
                    worst = worst.max((fa - fb).abs() / d);
                }
            }
        }
        worst
    }

    /// `E[sum |f(t, 0, 0, 0)|^2 dt]`, required to be finite.
    pub fn zero_generator_norm(&self, paths: &[FiltrationPath<S>]) -> S {
        let total = paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (0..p.grid.n_steps()).fold(S::zero(), |acc, j| {
                    let c = KnotContext::at(p, i, j);
                    let f = (self.generator)(&c, S::zero(), S::zero(), S::zero());
                    acc + f * f * c.dt
                })
            })
            .fold(S::zero(), |a, b| a + b);
        total / S::from_count(paths.len())
    }
}

fn terminal_values<S: Scalar>(spec: &GeneralBsdeSpec<S>, paths: &[FiltrationPath<S>]) -> Result<Vec<S>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let v = (spec.terminal)(p, i);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(invalid(format!("terminal value not finite on path {i}")))
            }
        })
        .collect()
}

/// Backward induction with least-squares conditional expectations.
pub fn solve_regression_backward<S: Scalar>(
    spec: &GeneralBsdeSpec<S>,
    paths: &[FiltrationPath<S>],
    basis: &RegressionBasis,
) -> Result<BsdeSolution<S>> {
    let n = check_paths(paths)?;
    if !spec.zero_generator_norm(paths).is_finite() {
        return Err(invalid("generator at zero is not square integrable"));
    }
    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n + 1];
    let mut k = vec![Vec::new(); n + 1];
    let mut diag = BsdeDiagnostics::default();
    y[n] = terminal_values(spec, paths)?;
    for j in (0..n).rev() {
        let cs = spec.section(basis, paths, j)?;
        diag.regression.absorb(&cs);
        let fitted = cs.project(&y[j + 1]);
        let (zj, kj) = martingale_parts(&cs, paths, j, &y[j + 1], &fitted);
        let ctx: Vec<KnotContext<S>> = paths.iter().enumerate().map(|(i, p)| KnotContext::at(p, i, j)).collect();
        y[j] = match spec.scheme {
            Scheme::Explicit => {
                let target: Vec<S> = (0..paths.len())
                    .map(|i| y[j + 1][i] + spec.martingale_generator(&ctx[i], y[j + 1][i], zj[i], kj[i]) * ctx[i].dt)
                    .collect();
                cs.project(&target)
            }
            Scheme::Implicit => {
                let mut out = Vec::with_capacity(paths.len());
                for i in 0..paths.len() {
                    let mut v = fitted[i];
                    let mut done = false;
                    for it in 1..=INNER_MAX {
                        let next = fitted[i] + spec.martingale_generator(&ctx[i], v, zj[i], kj[i]) * ctx[i].dt;
                        let diff = (next - v).abs();
                        v = next;
                        if diff.as_f64() <= INNER_TOL * (1.0 + v.abs().as_f64()) {
                            diag.inner_iterations_max = diag.inner_iterations_max.max(it);
                            done = true;
                            break;
                        }
                    }
                    if !done {
                        return Err(Error::InnerFixedPoint { knot: j, path: i });
                    }
                    out.push(v);
                }
                out
            }
        };
        z[j] = zj;
        k[j] = kj;
    }
    z[n] = z[n - 1].clone();
    k[n] = k[n - 1].clone();
    Ok(BsdeSolution {
        t: base_times(&paths[0]),
        y,
        z,
        k,
        diagnostics: diag,
    })
}

/// Per-knot root-mean-square over paths of
/// `Y_j - (xi + sum_{i >= j} (f_i dt - Z_i dW_i - K_i dN_i))`, with `f, dN`
/// the generator and jump driver of the spec's form.
pub fn bsde_residual_by_knot<S: Scalar>(sol: &BsdeSolution<S>, spec: &GeneralBsdeSpec<S>, paths: &[FiltrationPath<S>]) -> Result<Vec<f64>> {
    let n = check_paths(paths)?;
    if sol.n_knots() != n + 1 || sol.y[0].len() != paths.len() {
        return Err(Error::Alignment("solution does not match paths".into()));
    }
    let per_path: Vec<Vec<f64>> = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let xi = (spec.terminal)(p, i);
            let mut tail = xi;
            let mut r = vec![0.0; n + 1];
            r[n] = (sol.y[n][i] - xi).as_f64();
            for j in (0..n).rev() {
                let c = KnotContext::at(p, i, j);
                let inc = p.base_increments(j);
                let (yj, zj, kj) = (sol.y[j][i], sol.z[j][i], sol.k[j][i]);
                let f = (spec.generator)(&c, yj, zj, kj);
                let jump = match spec.form {
                    GeneratorForm::DefaultH => inc.dh,
                    GeneratorForm::Martingale => inc.dm,
                };
                tail = tail + f * inc.dt - zj * inc.dw - kj * jump;
                r[j] = (yj - tail).as_f64();
            }
            r
        })
        .collect();
    let np = paths.len() as f64;
    Ok((0..=n).map(|j| (per_path.iter().map(|r| r[j] * r[j]).sum::<f64>() / np).sqrt()).collect())
}

/// Root-mean-square of the telescoped plug-back residual over paths and knots.
pub fn bsde_residual<S: Scalar>(sol: &BsdeSolution<S>, spec: &GeneralBsdeSpec<S>, paths: &[FiltrationPath<S>]) -> Result<f64> {
    let by_knot = bsde_residual_by_knot(sol, spec, paths)?;
    Ok((by_knot.iter().map(|r| r * r).sum::<f64>() / by_knot.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionDiagnostic {
    pub beta_weight: f64,
    pub rho: f64,
    pub norms: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
}

impl ContractionDiagnostic {
    /// Every ratio below one over at least `min_iter` iterations.
    pub fn geometric(&self, min_iter: usize) -> bool {
        let informative: Vec<f64> = self.ratios.iter().copied().filter(|r| r.is_finite()).collect();
        self.norms.len() >= min_iter && !informative.is_empty() && informative.iter().all(|&r| r < 1.0)
    }
}

/// Global Picard iteration of the map that freezes `(Y, Z, K)` inside the
/// generator and solves the resulting equation, started from zero. Reports
/// the weighted squared norms
/// `E[sum e^{beta t} (beta |dY|^2 + |dZ|^2 + lambda^G |dK|^2) dt]` of
/// successive differences, with `beta = 1 + 10 rho C^2`, `rho = 1`.
pub fn contraction_diagnostic<S: Scalar>(
    spec: &GeneralBsdeSpec<S>,
    paths: &[FiltrationPath<S>],
    basis: &RegressionBasis,
    max_iter: usize,
    rel_tol: f64,
) -> Result<ContractionDiagnostic> {
    let n = check_paths(paths)?;
    let np = paths.len();
    let rho = 1.0;
    let c = spec.lipschitz.as_f64();
    let beta = 1.0 + 10.0 * rho * c * c;
    let horizon = paths[0].grid.horizon().as_f64();
    let xi = terminal_values(spec, paths)?;
    let sections: Vec<CrossSection<S>> = (0..n).map(|j| spec.section(basis, paths, j)).collect::<Result<_>>()?;
    let ctx: Vec<Vec<KnotContext<S>>> = (0..n)
        .map(|j| paths.iter().enumerate().map(|(i, p)| KnotContext::at(p, i, j)).collect())
        .collect();
    let zeros = vec![vec![S::zero(); np]; n];
    let (mut y_old, mut z_old, mut k_old) = (zeros.clone(), zeros.clone(), zeros);
    let mut norms = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut y_new = vec![Vec::new(); n];
        let mut z_new = vec![Vec::new(); n];
        let mut k_new = vec![Vec::new(); n];
        let mut next = xi.clone();
        for j in (0..n).rev() {
            let cs = &sections[j];
            let fitted = cs.project(&next);
            let (zj, kj) = martingale_parts(cs, paths, j, &next, &fitted);
            let target: Vec<S> = (0..np)
                .map(|i| {
                    let c = &ctx[j][i];
                    next[i] + spec.martingale_generator(c, y_old[j][i], z_old[j][i], k_old[j][i]) * c.dt
                })
                .collect();
            y_new[j] = cs.project(&target);
            z_new[j] = zj;
            k_new[j] = kj;
            next = y_new[j].clone();
        }
        let mut total = 0.0;
        for j in 0..n {
            let t = ctx[j][0].t.as_f64();
            let dt = ctx[j][0].dt.as_f64();
            let wgt = (beta * (t - horizon)).exp() * dt;
            for i in 0..np {
                let dy = (y_new[j][i] - y_old[j][i]).as_f64();
                let dz = (z_new[j][i] - z_old[j][i]).as_f64();
                let dk = (k_new[j][i] - k_old[j][i]).as_f64();
                total += wgt * (beta * dy * dy + dz * dz + ctx[j][i].lambda_g.as_f64() * dk * dk);
            }
        }
        let norm = total / np as f64;
        norms.push(norm);
        y_old = y_new;
        z_old = z_new;
        k_old = k_new;
        if norm <= rel_tol * norms[0] {
            converged = true;
            break;
        }
    }
    let ratios = norms.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect();
    Ok(ContractionDiagnostic {
        beta_weight: beta,
        rho,
        norms,
        ratios,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_paths, IntensitySpec, TimeGrid};

    fn paths(n_steps: usize, n: usize, lam: f64, seed: u64) -> Vec<FiltrationPath<f64>> {
        build_paths(&TimeGrid::uniform(1.0, n_steps).unwrap(), &IntensitySpec::constant(lam), seed, n).unwrap()
    }

    #[test]
    fn trivial_gamma_is_one() {
        let ps = paths(10, 20, 1.0, 1);
        let spec = LinearBsdeSpec::constant(0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        for (i, p) in ps.iter().enumerate() {
            assert!(simulate_gamma(&spec, p, i).unwrap().gamma.iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn gamma_jump_factor() {
        let ps = paths(10, 200, 2.0, 2);
        let spec = LinearBsdeSpec::constant(0.0, 0.1, 0.0, -0.4, 0.3, 1.0);
        let mut seen = 0;
        for (i, p) in ps.iter().enumerate() {
            let g = simulate_gamma(&spec, p, i).unwrap();
            if let Some(ti) = p.grid.tau_index() {
                let pre = g.gamma[ti - 1] * ((0.1 - 0.045) * (p.grid.knots()[ti] - p.grid.knots()[ti - 1]) + 0.3 * p.dw[ti - 1]).exp();
                assert!((g.gamma[ti] / pre - 0.6).abs() < 1e-12);
                seen += 1;
            }
        }
        assert!(seen > 50);
    }

    #[test]
    fn mu_at_minus_one_rejected() {
        let ps = paths(4, 1, 1.0, 0);
        let spec = LinearBsdeSpec::constant(0.0, 0.0, 0.0, -1.0, 0.0, 1.0);
        assert!(simulate_gamma(&spec, &ps[0], 0).is_err());
    }

    #[test]
    fn explicit_trivial_cases() {
        let ps = paths(10, 500, 1.0, 3);
        let basis = RegressionBasis::default();
        let one = solve_linear_explicit(&LinearBsdeSpec::constant(0.0, 0.0, 0.0, 0.0, 0.0, 1.0), &ps, &basis).unwrap();
        for j in 0..=10 {
            for i in 0..ps.len() {
                assert!((one.y[j][i] - 1.0).abs() < 1e-12);
                assert!(one.z[j][i].abs() < 1e-12 && one.k[j][i].abs() < 1e-12);
            }
        }
        let lin = solve_linear_explicit(&LinearBsdeSpec::constant(1.0, 0.0, 0.0, 0.0, 0.0, 0.0), &ps, &basis).unwrap();
        for j in 0..=10 {
            for i in 0..ps.len() {
                assert!((lin.y[j][i] - (1.0 - lin.t[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regression_trivial_case() {
        let ps = paths(8, 200, 1.0, 4);
        let spec = GeneralBsdeSpec::new(|_, _, _, _| 0.0, 0.0, |_, _| 2.5, GeneratorForm::DefaultH);
        let sol = solve_regression_backward(&spec, &ps, &RegressionBasis::default()).unwrap();
        assert!(sol.y.iter().flatten().all(|&v| (v - 2.5).abs() < 1e-12));
        assert!(sol.z.iter().flatten().chain(sol.k.iter().flatten()).all(|&v| v.abs() < 1e-12));
        assert!(bsde_residual(&sol, &spec, &ps).unwrap() < 1e-12);
    }

    #[test]
    fn discounting_generator_converges_to_exponential() {
        let r = 0.7;
        let err = |n: usize| {
            let ps = paths(n, 100, 0.5, 5);
            let spec = GeneralBsdeSpec::new(move |_, y, _, _| -r * y, r, |_, _| 1.0, GeneratorForm::DefaultH);
            let sol = solve_regression_backward(&spec, &ps, &RegressionBasis::default()).unwrap();
            (sol.y0() - (-r).exp()).abs()
        };
        let (e1, e2) = (err(10), err(20));
        assert!((e1 / e2 - 2.0).abs() < 0.2, "{e1} {e2}");
    }

    #[test]
    fn implicit_scheme_matches_closed_form_recursion() {
        let r = 0.5;
        let ps = paths(10, 100, 0.5, 6);
        let spec = GeneralBsdeSpec::new(move |_, y, _, _| -r * y, r, |_, _| 1.0, GeneratorForm::Martingale).with_scheme(Scheme::Implicit);
        let sol = solve_regression_backward(&spec, &ps, &RegressionBasis::default()).unwrap();
        let exact = (1.0f64 + r * 0.1).powi(-10);
        assert!((sol.y0() - exact).abs() < 1e-9);
    }

    #[test]
    fn implicit_scheme_reports_inner_failure() {
        let ps = paths(2, 100, 0.5, 6);
        let spec = GeneralBsdeSpec::new(|_, y, _, _| 50.0 * y, 50.0, |_, _| 1.0, GeneratorForm::Martingale).with_scheme(Scheme::Implicit);
        assert!(matches!(
            solve_regression_backward(&spec, &ps, &RegressionBasis::default()),
            Err(Error::InnerFixedPoint { .. })
        ));
    }

    #[test]
    fn k_vanishes_after_default() {
        let ps = paths(10, 1000, 1.5, 7);
        let spec = LinearBsdeSpec::constant(0.2, 0.1, 0.0, -0.5, 0.2, 1.0)
            .with_terminal(|p, _| 1.0 + p.h.last().copied().unwrap() + p.w.last().copied().unwrap());
        let sol = solve_linear_explicit(&spec, &ps, &RegressionBasis::default()).unwrap();
        for j in 0..10 {
            for (i, p) in ps.iter().enumerate() {
                if p.base_h(j) > 0.0 {
                    assert_eq!(sol.k[j][i], 0.0);
                }
            }
        }
    }

    #[test]
    fn contraction_for_constant_generator() {
        let ps = paths(8, 200, 1.0, 8);
        let spec = GeneralBsdeSpec::new(|c, _, _, _| c.t, 0.0, |_, _| 1.0, GeneratorForm::Martingale);
        let d = contraction_diagnostic(&spec, &ps, &RegressionBasis::default(), 5, 1e-20).unwrap();
        assert!(d.converged);
        assert_eq!(d.norms.len(), 2);
        assert_eq!(d.norms[1], 0.0);
    }

    #[test]
    fn contraction_small_lipschitz() {
        let ps = paths(8, 300, 1.0, 9);
        let spec = GeneralBsdeSpec::new(
            |_, y, z, k| 0.3 * y + 0.2 * z - 0.1 * k + 1.0,
            0.3,
            |p, _| p.w.last().copied().unwrap(),
            GeneratorForm::Martingale,
        );
        let d = contraction_diagnostic(&spec, &ps, &RegressionBasis::default(), 6, 1e-30).unwrap();
        assert!(d.ratios.iter().all(|&r| r < 0.5), "{:?}", d.ratios);
    }
}
