//! Forward SDE with default: Euler scheme with the jump applied exactly at
//! the default knot, a Picard solver for the same discrete equations, and the
//! closed-form solution of the multiplicative wealth dynamics.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::paths::{FiltrationPath, TimeGrid};
use crate::scalar::{Interval, Scalar};
use crate::timefn::TimeFn;

pub type Coef<S> = Arc<dyn Fn(S, S, S) -> S + Send + Sync>;

fn coef<S: Scalar>(f: impl Fn(S, S, S) -> S + Send + Sync + 'static) -> Coef<S> {
    Arc::new(f)
}

/// Drift `b`, diffusion `sigma`, jump size `gamma` as functions of `(t, x, u)`,
/// with their partial derivatives in `x` and `u`.
#[derive(Clone)]
pub struct CoefficientSet<S> {
    pub b: Coef<S>,
    pub sigma: Coef<S>,
    pub gamma: Coef<S>,
    pub db_dx: Coef<S>,
    pub dsigma_dx: Coef<S>,
    pub dgamma_dx: Coef<S>,
    pub db_du: Coef<S>,
    pub dsigma_du: Coef<S>,
    pub dgamma_du: Coef<S>,
    pub lipschitz_const: S,
    pub growth_const: S,
}

impl<S: Scalar> fmt::Debug for CoefficientSet<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("lipschitz_const", &self.lipschitz_const)
            .field("growth_const", &self.growth_const)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> CoefficientSet<S> {
    pub fn zero() -> Self {
        let z = || coef(|_, _, _| S::zero());
        Self {
            b: z(),
            sigma: z(),
            gamma: z(),
            db_dx: z(),
            dsigma_dx: z(),
            dgamma_dx: z(),
            db_du: z(),
            dsigma_du: z(),
            dgamma_du: z(),
            lipschitz_const: S::zero(),
            growth_const: S::zero(),
        }
    }

    /// Wealth dynamics `dS = S[(alpha - u) dt + beta dW + mu dH]`.
    ///
    /// The Lipschitz constant assumes controls bounded by `u_bound`.
    pub fn wealth(alpha: TimeFn<S>, beta: TimeFn<S>, mu: S, horizon: S, u_bound: S) -> Self {
        let a_sup = alpha.sup_on(horizon).abs().max(alpha.inf_on(horizon).abs());
        let b_sup = beta.sup_on(horizon).abs().max(beta.inf_on(horizon).abs());
        let lip = a_sup + u_bound.abs() + b_sup + mu.abs();
        let (a1, a2) = (alpha.clone(), alpha);
        let (b1, b2) = (beta.clone(), beta);
        Self {
            b: coef(move |t: S, x: S, u: S| x * (a1.value(t) - u)),
            sigma: coef(move |t: S, x: S, _| x * b1.value(t)),
            gamma: coef(move |_, x: S, _| x * mu),
            db_dx: coef(move |t: S, _, u: S| a2.value(t) - u),
            dsigma_dx: coef(move |t: S, _, _| b2.value(t)),
            dgamma_dx: coef(move |_, _, _| mu),
            db_du: coef(|_, x: S, _| -x),
            dsigma_du: coef(|_, _, _| S::zero()),
            dgamma_du: coef(|_, _, _| S::zero()),
            lipschitz_const: lip,
            growth_const: lip,
        }
    }

    /// Largest relative mismatch between the analytic partials and centered
    /// differences at the given `(t, x, u)` points.
    pub fn derivative_mismatch(&self, points: &[(S, S, S)]) -> S {
        let pairs: [(&Coef<S>, &Coef<S>, bool); 6] = [
            (&self.b, &self.db_dx, true),
            (&self.sigma, &self.dsigma_dx, true),
            (&self.gamma, &self.dgamma_dx, true),
            (&self.b, &self.db_du, false),
            (&self.sigma, &self.dsigma_du, false),
            (&self.gamma, &self.dgamma_du, false),
        ];
        let mut worst = S::zero();
        for &(t, x, u) in points {
            for (f, df, in_x) in pairs.iter() {
                let fd = if *in_x {
                    central_diff(|v| f(t, v, u), x)
                } else {
                    central_diff(|v| f(t, x, v), u)
                };
                let exact = df(t, x, u);
                worst = worst.max((fd - exact).abs() / S::one().max(exact.abs()));
            }
        }
        worst
    }
}

pub(crate) fn central_diff<S: Scalar>(f: impl Fn(S) -> S, x: S) -> S {
    let h = S::lit(1e-6) * S::one().max(x.abs());
    (f(x + h) - f(x - h)) / (h + h)
}

/// State seen by a feedback rule at a base knot.
#[derive(Debug, Clone, Copy)]
pub struct ControlContext<S> {
    pub path: usize,
    pub knot: usize,
    pub t: S,
    /// Length of the base step starting at `t`.
    pub dt: S,
    pub x: S,
    pub h: S,
    pub w: S,
}

pub type Rule<S> = Arc<dyn Fn(&ControlContext<S>) -> S + Send + Sync>;

/// Feedback control evaluated at base knots and held over each base step.
/// Outputs are clamped into `value_set`.
#[derive(Clone)]
pub struct ControlProcess<S> {
    pub rule: Rule<S>,
    pub value_set: Interval<S>,
}

impl<S: Scalar> fmt::Debug for ControlProcess<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProcess")
            .field("value_set", &self.value_set)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> ControlProcess<S> {
    pub fn new(rule: impl Fn(&ControlContext<S>) -> S + Send + Sync + 'static, value_set: Interval<S>) -> Self {
        Self {
            rule: Arc::new(rule),
            value_set,
        }
    }

    pub fn constant(v: S, value_set: Interval<S>) -> Self {
        Self::new(move |_| v, value_set)
    }

    /// Open-loop control read from `table[path][knot]`.
    pub fn from_table(table: Arc<Vec<Vec<S>>>, value_set: Interval<S>) -> Self {
        Self::new(move |c| table[c.path][c.knot], value_set)
    }

    /// Raw rule output and whether it had to be clamped.
    pub fn evaluate(&self, ctx: &ControlContext<S>) -> (S, bool) {
        let raw = (self.rule)(ctx);
        let v = self.value_set.clamp(raw);
        (v, v != raw)
    }

    pub fn raw(&self, ctx: &ControlContext<S>) -> S {
        (self.rule)(ctx)
    }

    /// `u + y * beta`.
    pub fn perturbed(&self, beta: Rule<S>, y: S) -> Self {
        let base = self.rule.clone();
        Self {
            rule: Arc::new(move |c| base(c) + y * beta(c)),
            value_set: self.value_set,
        }
    }

    /// `u * factor`.
    pub fn scaled(&self, factor: S) -> Self {
        let base = self.rule.clone();
        Self {
            rule: Arc::new(move |c| base(c) * factor),
            value_set: self.value_set,
        }
    }
}

/// Context for base knot `j` of `path` at state `x`.
pub fn control_context<S: Scalar>(path: &FiltrationPath<S>, path_id: usize, j: usize, x: S) -> ControlContext<S> {
    let g = &path.grid;
    ControlContext {
        path: path_id,
        knot: j,
        t: g.base_knot(j),
        dt: if j < g.n_steps() { g.base_dt(j) } else { S::zero() },
        x,
        h: path.base_h(j),
        w: path.base_w(j),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdePath<S> {
    pub grid: TimeGrid<S>,
    pub x: Vec<S>,
    pub x_pre_jump: Option<S>,
    /// Control in force on the step starting at each knot (last knot repeats).
    pub u: Vec<S>,
    pub clamp_events: usize,
}

impl<S: Scalar> SdePath<S> {
    pub fn terminal(&self) -> S {
        *self.x.last().expect("non-empty path")
    }

    pub fn base_x(&self, j: usize) -> S {
        self.x[self.grid.base_index()[j]]
    }

    pub fn base_u(&self, j: usize) -> S {
        self.u[self.grid.base_index()[j]]
    }

    /// State just before knot `k` (differs from `x[k]` only at the default knot).
    pub fn left_limit(&self, k: usize) -> S {
        if self.grid.tau_index() == Some(k) {
            self.x_pre_jump.unwrap_or(self.x[k])
        } else {
            self.x[k]
        }
    }
}

/// `B = b + lambda^G * gamma`, the drift once `dH` is split as `dM + lambda^G dt`.
pub fn effective_drift<S: Scalar>(coeffs: &CoefficientSet<S>, lambda_g: S, t: S, x: S, u: S) -> S {
    (coeffs.b)(t, x, u) + lambda_g * (coeffs.gamma)(t, x, u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseForm {
    /// `b dt + sigma dW + gamma dH`
    Indicator,
    /// `B dt + sigma dW + gamma dM`
    Martingale,
}

/// Explicit Euler between knots, jump applied at the default knot using the
/// pre-jump state and the control in force.
pub fn euler_simulate<S: Scalar>(
    coeffs: &CoefficientSet<S>,
    control: &ControlProcess<S>,
    path: &FiltrationPath<S>,
    path_id: usize,
    x0: S,
) -> Result<SdePath<S>> {
    euler_simulate_form(coeffs, control, path, path_id, x0, NoiseForm::Indicator)
}

pub fn euler_simulate_form<S: Scalar>(
    coeffs: &CoefficientSet<S>,
    control: &ControlProcess<S>,
    path: &FiltrationPath<S>,
    path_id: usize,
    x0: S,
    form: NoiseForm,
) -> Result<SdePath<S>> {
    if !x0.is_finite() {
        return Err(invalid("initial state must be finite"));
    }
    let grid = &path.grid;
    let knots = grid.knots();
    let len = knots.len();
    let base = grid.base_index();
    let mut x = Vec::with_capacity(len);
    let mut u = Vec::with_capacity(len);
    let mut pre = None;
    let mut clamps = 0;
    let mut j = 0;
    let mut u_cur = S::zero();
    x.push(x0);
    for k in 0..len - 1 {
        if base[j] == k {
            let (v, c) = control.evaluate(&control_context(path, path_id, j, x[k]));
            u_cur = v;
            clamps += c as usize;
            j += 1;
        }
        u.push(u_cur);
        let (t, xk) = (knots[k], x[k]);
        let dt = knots[k + 1] - t;
        let (b, sig) = ((coeffs.b)(t, xk, u_cur), (coeffs.sigma)(t, xk, u_cur));
        let mut next = match form {
            NoiseForm::Indicator => xk + b * dt + sig * path.dw[k],
            NoiseForm::Martingale => {
                // lambda^G dt is realized by the exact compensator increment
                let dc = path.compensator[k + 1] - path.compensator[k];
                let g = (coeffs.gamma)(t, xk, u_cur);
                xk + (b * dt + g * dc) + sig * path.dw[k] - g * dc
            }
        };
        if grid.tau_index() == Some(k + 1) {
            let jump = match form {
                NoiseForm::Indicator => path.h[k + 1] - path.h[k],
                NoiseForm::Martingale => path.jumps[k + 1],
            };
            pre = Some(next);
            next = next + (coeffs.gamma)(knots[k + 1], next, u_cur) * jump;
        }
        if !next.is_finite() {
            return Err(Error::Divergence {
                path: path_id,
                step: k,
                t: t.as_f64(),
            });
        }
        x.push(next);
    }
    u.push(u_cur);
    Ok(SdePath {
        grid: grid.clone(),
        x,
        x_pre_jump: pre,
        u,
        clamp_events: clamps,
    })
}

pub fn euler_simulate_all<S: Scalar>(
    coeffs: &CoefficientSet<S>,
    control: &ControlProcess<S>,
    paths: &[FiltrationPath<S>],
    x0: S,
) -> Result<Vec<SdePath<S>>> {
    paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| euler_simulate(coeffs, control, p, i, x0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PicardConfig<S> {
    pub beta_weight: S,
    pub tol: S,
    pub max_iter: usize,
}

impl<S: Scalar> PicardConfig<S> {
    /// Weight `1 + C^2 / eps` with `eps = 1/2`.
    pub fn from_lipschitz(lipschitz: S, tol: S, max_iter: usize) -> Self {
        let eps = S::lit(0.5);
        Self {
            beta_weight: S::one() + lipschitz * lipschitz / eps,
            tol,
            max_iter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > S::zero()) || self.max_iter < 1 || !(self.beta_weight > S::zero()) {
            return Err(invalid("Picard config needs tol > 0, max_iter >= 1, beta_weight > 0"));
        }
        Ok(())
    }
}

/// Successive-difference norms `E[int e^{-beta s} |X^{k+1} - X^k|^2 ds]` of
/// the Picard iterates and their consecutive ratios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub beta_weight: f64,
    pub norms: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Map applications that still moved the iterate.
    pub iterations: usize,
}

impl ContractionReport {
    fn from_norms(beta_weight: f64, norms: Vec<f64>, tol: f64) -> Self {
        let ratios = norms.windows(2).map(|w| w[1] / w[0]).collect();
        let iterations = norms.iter().position(|&n| n < tol).unwrap_or(norms.len());
        Self {
            beta_weight,
            norms,
            ratios,
            iterations,
        }
    }
}

struct Iterate<S> {
    x: Vec<S>,
    pre: Option<S>,
    u: Vec<S>,
    clamps: usize,
}

fn picard_map<S: Scalar>(
    coeffs: &CoefficientSet<S>,
    control: &ControlProcess<S>,
    path: &FiltrationPath<S>,
    path_id: usize,
    x0: S,
    prev: &Iterate<S>,
) -> Result<Iterate<S>> {
    let grid = &path.grid;
    let knots = grid.knots();
    let base = grid.base_index();
    let len = knots.len();
    let mut x = Vec::with_capacity(len);
    let mut u = Vec::with_capacity(len);
    let mut clamps = 0;
    let mut pre = None;
    let mut j = 0;
    let mut u_cur = S::zero();
    x.push(x0);
    for k in 0..len - 1 {
        if base[j] == k {
            let (v, c) = control.evaluate(&control_context(path, path_id, j, prev.x[k]));
            u_cur = v;
            clamps += c as usize;
            j += 1;
        }
        u.push(u_cur);
        let (t, xo) = (knots[k], prev.x[k]);
        let dt = knots[k + 1] - t;
        let mut next = x[k] + (coeffs.b)(t, xo, u_cur) * dt + (coeffs.sigma)(t, xo, u_cur) * path.dw[k];
        if grid.tau_index() == Some(k + 1) {
            pre = Some(next);
            let old_pre = prev.pre.unwrap_or(prev.x[k + 1]);
            next = next + (coeffs.gamma)(knots[k + 1], old_pre, u_cur) * (path.h[k + 1] - path.h[k]);
        }
        if !next.is_finite() {
            return Err(Error::Divergence {
                path: path_id,
                step: k,
                t: t.as_f64(),
            });
        }
        x.push(next);
    }
    u.push(u_cur);
    Ok(Iterate { x, pre, u, clamps })
}

/// Iterates the integral map of the forward equation from `X = x0` until the
/// weighted norm of successive differences drops below `cfg.tol`.
pub fn picard_solve<S: Scalar>(
    coeffs: &CoefficientSet<S>,
    control: &ControlProcess<S>,
    paths: &[FiltrationPath<S>],
    x0: S,
    cfg: &PicardConfig<S>,
) -> Result<(Vec<SdePath<S>>, ContractionReport)> {
    cfg.validate()?;
    if paths.is_empty() {
        return Err(invalid("no paths"));
    }
    let mut iterates: Vec<Iterate<S>> = paths
        .iter()
        .map(|p| {
            let len = p.n_knots();
            Iterate {
                x: vec![x0; len],
                pre: p.defaulted().then_some(x0),
                u: vec![S::zero(); len],
                clamps: 0,
            }
        })
        .collect();
    let beta = cfg.beta_weight;
    let n = S::from_count(paths.len());
    let mut norms = Vec::new();
    loop {
        let step: Vec<(Iterate<S>, S)> = paths
            .par_iter()
            .zip(iterates.par_iter())
            .enumerate()
            .map(|(i, (p, prev))| {
                let next = picard_map(coeffs, control, p, i, x0, prev)?;
                let knots = p.grid.knots();
                let mut acc = S::zero();
                for k in 1..knots.len() {
                    let d = next.x[k] - prev.x[k];
                    acc = acc + (-beta * knots[k]).exp() * d * d * (knots[k] - knots[k - 1]);
                }
                Ok((next, acc))
            })
            .collect::<Result<_>>()?;
        let mut total = S::zero();
        iterates.clear();
        for (it, acc) in step {
            total = total + acc;
            iterates.push(it);
        }
        let norm = (total / n).as_f64();
        norms.push(norm);
        if norm < cfg.tol.as_f64() {
            break;
        }
        if norms.len() >= cfg.max_iter {
            return Err(Error::NonConvergence {
                iterations: norms.len(),
                last_norm: norm,
                norms,
            });
        }
    }
    let report = ContractionReport::from_norms(beta.as_f64(), norms, cfg.tol.as_f64());
    let out = paths
        .iter()
        .zip(iterates)
        .map(|(p, it)| SdePath {
            grid: p.grid.clone(),
            x: it.x,
            x_pre_jump: it.pre,
            u: it.u,
            clamp_events: it.clamps,
        })
        .collect();
    Ok((out, report))
}

/// Market coefficients of the wealth equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WealthParams<S> {
    pub alpha: TimeFn<S>,
    pub beta: TimeFn<S>,
    pub mu: S,
}

/// Closed-form wealth path for `dS = S[(alpha - pi) dt + beta dW + mu dH]`
/// with coefficients and control frozen on each base step:
/// `S_t = S_0 exp(int (alpha - pi - beta^2/2) ds + int beta dW) (1 + mu)^{H_t}`.
pub fn explicit_wealth_solution<S: Scalar>(
    params: &WealthParams<S>,
    control: &ControlProcess<S>,
    path: &FiltrationPath<S>,
    path_id: usize,
    s0: S,
) -> Result<SdePath<S>> {
    if params.mu < -S::one() {
        return Err(invalid("mu must be >= -1"));
    }
    if !(s0 > S::zero()) {
        return Err(invalid("initial wealth must be positive"));
    }
    let grid = &path.grid;
    let knots = grid.knots();
    let base = grid.base_index();
    let len = knots.len();
    let half = S::lit(0.5);
    let jump_factor = S::one() + params.mu;
    let mut x = Vec::with_capacity(len);
    let mut u = Vec::with_capacity(len);
    let mut clamps = 0;
    let mut pre = None;
    let mut log_growth = S::zero();
    let mut factor = S::one();
    let (mut j, mut u_cur, mut a_cur, mut b_cur) = (0, S::zero(), S::zero(), S::zero());
    x.push(s0);
    for k in 0..len - 1 {
        if base[j] == k {
            let tj = grid.base_knot(j);
            let (v, c) = control.evaluate(&control_context(path, path_id, j, x[k]));
            u_cur = v;
            clamps += c as usize;
            a_cur = params.alpha.value(tj);
            b_cur = params.beta.value(tj);
            j += 1;
        }
        u.push(u_cur);
        let dt = knots[k + 1] - knots[k];
        log_growth = log_growth + (a_cur - u_cur - half * b_cur * b_cur) * dt + b_cur * path.dw[k];
        if grid.tau_index() == Some(k + 1) {
            pre = Some(s0 * log_growth.exp() * factor);
            factor = jump_factor;
        }
        x.push(s0 * log_growth.exp() * factor);
    }
    u.push(u_cur);
    Ok(SdePath {
        grid: grid.clone(),
        x,
        x_pre_jump: pre,
        u,
        clamp_events: clamps,
    })
}

/// Writes `path, knot, t, X, u, H` rows.
pub fn write_sde_csv<S: Scalar, W: Write>(out: W, paths: &[FiltrationPath<S>], states: &[SdePath<S>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["path", "knot", "t", "X", "u", "H"])?;
    for (p, (path, sde)) in paths.iter().zip(states).enumerate() {
        for k in 0..sde.x.len() {
            wtr.write_record([
                p.to_string(),
                k.to_string(),
                sde.grid.knots()[k].as_f64().to_string(),
                sde.x[k].as_f64().to_string(),
                sde.u[k].as_f64().to_string(),
                path.h[k].as_f64().to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_filtration_path, build_paths, IntensitySpec};
    use crate::rng::RngSpec;

    fn wealth(alpha: f64, beta: f64, mu: f64) -> (CoefficientSet<f64>, WealthParams<f64>) {
        let p = WealthParams {
            alpha: TimeFn::constant(alpha),
            beta: TimeFn::constant(beta),
            mu,
        };
        (CoefficientSet::wealth(p.alpha.clone(), p.beta.clone(), mu, 1.0, 1.0), p)
    }

    fn any_control() -> ControlProcess<f64> {
        ControlProcess::constant(0.3, Interval::new(0.0, 10.0))
    }

    #[test]
    fn effective_drift_examples() {
        let mut c = CoefficientSet::<f64>::zero();
        c.b = coef(|_, _, _| 1.0);
        c.gamma = coef(|_, _, _| 2.0);
        assert_eq!(effective_drift(&c, 0.5, 0.0, 0.0, 0.0), 2.0);
        assert_eq!(effective_drift(&c, 0.0, 0.0, 0.0, 0.0), 1.0);
        c.gamma = coef(|_, _, _| 0.0);
        assert_eq!(effective_drift(&c, 3.0, 0.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn wealth_partials_match_finite_differences() {
        let (c, _) = wealth(0.07, 0.25, -0.4);
        let pts: Vec<(f64, f64, f64)> = (0..50).map(|i| (0.02 * i as f64, 0.5 + 0.1 * i as f64, 0.01 * i as f64)).collect();
        assert!(c.derivative_mismatch(&pts) < 1e-5);
    }

    #[test]
    fn zero_coefficients_keep_state() {
        let lam = IntensitySpec::constant(2.0);
        let p = build_filtration_path(&TimeGrid::uniform(1.0, 10).unwrap(), &lam, RngSpec::new(1, 1)).unwrap();
        let s = euler_simulate(&CoefficientSet::zero(), &any_control(), &p, 0, 3.5).unwrap();
        assert!(s.x.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn defaulted_wealth_jumps_by_one_plus_mu() {
        let lam = IntensitySpec::constant(3.0);
        let (c, params) = wealth(0.05, 0.2, -0.3);
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let mut checked = 0;
        for i in 0..40 {
            let p = build_filtration_path(&g, &lam, RngSpec::new(5, i)).unwrap();
            let Some(ti) = p.grid.tau_index() else { continue };
            let e = euler_simulate(&c, &any_control(), &p, i as usize, 1.0).unwrap();
            assert_eq!(e.x[ti], e.x_pre_jump.unwrap() + e.x_pre_jump.unwrap() * -0.3);
            let x = explicit_wealth_solution(&params, &any_control(), &p, i as usize, 1.0).unwrap();
            assert!((x.x[ti] - 0.7 * x.x_pre_jump.unwrap()).abs() < 1e-14);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn total_default_wipes_out_wealth() {
        let lam = IntensitySpec::constant(5.0);
        let (_, params) = wealth(0.05, 0.2, -1.0);
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        for i in 0..20 {
            let p = build_filtration_path(&g, &lam, RngSpec::new(6, i)).unwrap();
            let x = explicit_wealth_solution(&params, &any_control(), &p, 0, 2.0).unwrap();
            if let Some(ti) = p.grid.tau_index() {
                assert!(x.x[ti..].iter().all(|&v| v == 0.0));
            }
        }
        let bad = WealthParams { mu: -1.5, ..params };
        let p = build_filtration_path(&g, &lam, RngSpec::new(6, 0)).unwrap();
        assert!(explicit_wealth_solution(&bad, &any_control(), &p, 0, 1.0).is_err());
    }

    #[test]
    fn flat_market_keeps_wealth() {
        let lam = IntensitySpec::constant(0.0);
        let (_, params) = wealth(0.0, 0.0, 0.0);
        let p = build_filtration_path(&TimeGrid::uniform(1.0, 8).unwrap(), &lam, RngSpec::new(0, 0)).unwrap();
        let zero = ControlProcess::constant(0.0, Interval::new(0.0, 1.0));
        let x = explicit_wealth_solution(&params, &zero, &p, 0, 1.7).unwrap();
        assert!(x.x.iter().all(|&v| v == 1.7));
    }

    #[test]
    fn noise_forms_agree() {
        let lam = IntensitySpec::constant(1.2);
        let (c, _) = wealth(0.1, 0.3, -0.5);
        let paths = build_paths(&TimeGrid::uniform(1.0, 50).unwrap(), &lam, 3, 200).unwrap();
        for (i, p) in paths.iter().enumerate() {
            let a = euler_simulate_form(&c, &any_control(), p, i, 1.0, NoiseForm::Indicator).unwrap();
            let b = euler_simulate_form(&c, &any_control(), p, i, 1.0, NoiseForm::Martingale).unwrap();
            for (x, y) in a.x.iter().zip(&b.x) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn jump_locality() {
        let lam = IntensitySpec::constant(2.0);
        let g = TimeGrid::uniform(1.0, 30).unwrap();
        for i in 0..20 {
            let p = build_filtration_path(&g, &lam, RngSpec::new(8, i)).unwrap();
            let Some(ti) = p.grid.tau_index() else { continue };
            let (c1, _) = wealth(0.1, 0.3, -0.5);
            let (c2, _) = wealth(0.1, 0.3, 0.8);
            let a = euler_simulate(&c1, &any_control(), &p, 0, 1.0).unwrap();
            let b = euler_simulate(&c2, &any_control(), &p, 0, 1.0).unwrap();
            assert_eq!(a.x[..ti], b.x[..ti]);
        }
    }

    #[test]
    fn picard_trivial_needs_no_iterations() {
        let lam = IntensitySpec::constant(1.0);
        let paths = build_paths(&TimeGrid::uniform(1.0, 10).unwrap(), &lam, 1, 10).unwrap();
        let cfg = PicardConfig::from_lipschitz(0.0, 1e-20, 5);
        let (sol, rep) = picard_solve(&CoefficientSet::zero(), &any_control(), &paths, 2.0, &cfg).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(sol.iter().all(|s| s.x.iter().all(|&v| v == 2.0)));
    }

    #[test]
    fn picard_matches_euler() {
        let lam = IntensitySpec::constant(0.8);
        let (c, _) = wealth(0.05, 0.3, -0.4);
        let paths = build_paths(&TimeGrid::uniform(1.0, 20).unwrap(), &lam, 4, 100).unwrap();
        let cfg = PicardConfig::from_lipschitz(c.lipschitz_const, 1e-28, 200);
        let (sol, rep) = picard_solve(&c, &any_control(), &paths, 1.0, &cfg).unwrap();
        for (i, (p, s)) in paths.iter().zip(&sol).enumerate() {
            let e = euler_simulate(&c, &any_control(), p, i, 1.0).unwrap();
            for (a, b) in s.x.iter().zip(&e.x) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
        assert!(rep.ratios.iter().all(|&r| r < 1.0), "{:?}", rep.ratios);
    }

    #[test]
    fn picard_reports_non_convergence() {
        let lam = IntensitySpec::constant(0.8);
        let (c, _) = wealth(0.05, 0.3, -0.4);
        let paths = build_paths(&TimeGrid::uniform(1.0, 20).unwrap(), &lam, 4, 10).unwrap();
        let cfg = PicardConfig::from_lipschitz(c.lipschitz_const, 1e-30, 2);
        match picard_solve(&c, &any_control(), &paths, 1.0, &cfg) {
            Err(Error::NonConvergence { norms, .. }) => assert_eq!(norms.len(), 2),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn clamping_is_counted() {
        let lam = IntensitySpec::constant(0.0);
        let p = build_filtration_path(&TimeGrid::uniform(1.0, 10).unwrap(), &lam, RngSpec::new(0, 0)).unwrap();
        let ctl = ControlProcess::constant(5.0, Interval::new(0.0, 1.0));
        let (c, _) = wealth(0.0, 0.1, 0.0);
        let s = euler_simulate(&c, &ctl, &p, 0, 1.0).unwrap();
        assert_eq!(s.clamp_events, 10);
        assert!(s.u.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn divergence_is_reported() {
        let lam = IntensitySpec::constant(0.0);
        let p = build_filtration_path(&TimeGrid::uniform(1.0, 10).unwrap(), &lam, RngSpec::new(0, 0)).unwrap();
        let mut c = CoefficientSet::<f64>::zero();
        c.b = coef(|_, x, _| x * x * 1e300);
        match euler_simulate(&c, &any_control(), &p, 3, 1.0) {
            Err(Error::Divergence { path, .. }) => assert_eq!(path, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wealth_positive_when_mu_above_minus_one() {
        let lam = IntensitySpec::constant(2.0);
        let (_, params) = wealth(0.02, 0.6, -0.95);
        let paths = build_paths(&TimeGrid::uniform(2.0, 40).unwrap(), &lam, 12, 200).unwrap();
        for (i, p) in paths.iter().enumerate() {
            let s = explicit_wealth_solution(&params, &any_control(), p, i, 0.5).unwrap();
            assert!(s.x.iter().all(|&v| v > 0.0));
        }
    }
}
