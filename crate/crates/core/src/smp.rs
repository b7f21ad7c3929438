//! Hamiltonian, adjoint equation, performance functional, and numerical
//! checks of the sufficient and equivalence maximum principles.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_linear_explicit, Adapted, BsdeSolution, GeneralBsdeSpec, GeneratorForm, KnotContext, LinearBsdeSpec};
use crate::error::{invalid, Error, Result};
use crate::paths::{FiltrationPath, IntensitySpec};
use crate::regression::RegressionBasis;
use crate::scalar::{Interval, Scalar};
use crate::sde::{
    central_diff, control_context, euler_simulate, explicit_wealth_solution, CoefficientSet, ControlProcess, Rule, SdePath, WealthParams,
};
use crate::stats::Estimate;

pub type RunningFn<S> = Arc<dyn Fn(S, S, S) -> S + Send + Sync>;
/// Terminal functional of the path and the terminal state.
pub type TerminalFn<S> = Arc<dyn Fn(&FiltrationPath<S>, S) -> S + Send + Sync>;

/// How the controlled state is produced from the noise.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardScheme<S> {
    Euler,
    /// Closed-form wealth; the coefficient set must describe the same model.
    Wealth(WealthParams<S>),
}

/// Maximize `J(u) = E[int h(t, X, u) dt + g(X_T)]`.
#[derive(Clone)]
pub struct ControlProblem<S> {
    pub coeffs: CoefficientSet<S>,
    pub h: RunningFn<S>,
    pub dh_dx: RunningFn<S>,
    pub dh_du: RunningFn<S>,
    pub g: TerminalFn<S>,
    pub dg: TerminalFn<S>,
    pub value_set: Interval<S>,
    pub intensity: IntensitySpec<S>,
    pub x0: S,
    pub forward: ForwardScheme<S>,
}

impl<S: Scalar> fmt::Debug for ControlProblem<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("coeffs", &self.coeffs)
            .field("value_set", &self.value_set)
            .field("intensity", &self.intensity)
            .field("x0", &self.x0)
            .field("forward", &self.forward)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointPoint<S> {
    pub p: S,
    pub q: S,
    pub w: S,
}

impl<S: Scalar> ControlProblem<S> {
    /// `h + (b + lambda^G gamma) p + sigma q + lambda^G gamma w`.
    pub fn hamiltonian(&self, t: S, x: S, u: S, a: AdjointPoint<S>, lambda_g: S) -> S {
        let c = &self.coeffs;
        let gam = (c.gamma)(t, x, u);
        (self.h)(t, x, u) + ((c.b)(t, x, u) + lambda_g * gam) * a.p + (c.sigma)(t, x, u) * a.q + lambda_g * gam * a.w
    }

    /// `(dH/dx, dH/du)` from the coefficient partials.
    pub fn hamiltonian_partials(&self, t: S, x: S, u: S, a: AdjointPoint<S>, lambda_g: S) -> (S, S) {
        let c = &self.coeffs;
        let dx = (self.dh_dx)(t, x, u)
            + ((c.db_dx)(t, x, u) + lambda_g * (c.dgamma_dx)(t, x, u)) * a.p
            + (c.dsigma_dx)(t, x, u) * a.q
            + lambda_g * (c.dgamma_dx)(t, x, u) * a.w;
        (dx, self.hamiltonian_du(t, x, u, a, lambda_g))
    }

    pub fn hamiltonian_du(&self, t: S, x: S, u: S, a: AdjointPoint<S>, lambda_g: S) -> S {
        let c = &self.coeffs;
        (self.dh_du)(t, x, u)
            + ((c.db_du)(t, x, u) + lambda_g * (c.dgamma_du)(t, x, u)) * a.p
            + (c.dsigma_du)(t, x, u) * a.q
            + lambda_g * (c.dgamma_du)(t, x, u) * a.w
    }

    /// Sum of absolute terms of `dH/du`, the rounding scale of that quantity.
    fn hamiltonian_du_magnitude(&self, t: S, x: S, u: S, a: AdjointPoint<S>, lambda_g: S) -> S {
        let c = &self.coeffs;
        (self.dh_du)(t, x, u).abs()
            + ((c.db_du)(t, x, u) * a.p).abs()
            + (lambda_g * (c.dgamma_du)(t, x, u) * a.p).abs()
            + ((c.dsigma_du)(t, x, u) * a.q).abs()
            + (lambda_g * (c.dgamma_du)(t, x, u) * a.w).abs()
    }

    /// Largest relative mismatch of the analytic Hamiltonian partials against
    /// centered differences at `(t, x, u, p, q, w, lambda)` points.
    pub fn partials_mismatch(&self, points: &[(S, S, S, AdjointPoint<S>, S)]) -> S {
        let mut worst = self
            .coeffs
            .derivative_mismatch(&points.iter().map(|&(t, x, u, _, _)| (t, x, u)).collect::<Vec<_>>());
        for &(t, x, u, a, l) in points {
            let (dx, du) = self.hamiltonian_partials(t, x, u, a, l);
            let fx = central_diff(|v| self.hamiltonian(t, v, u, a, l), x);
            let fu = central_diff(|v| self.hamiltonian(t, x, v, a, l), u);
            worst = worst.max((fx - dx).abs() / S::one().max(dx.abs()));
            worst = worst.max((fu - du).abs() / S::one().max(du.abs()));
        }
        worst
    }

    pub fn forward_path(&self, control: &ControlProcess<S>, path: &FiltrationPath<S>, path_id: usize) -> Result<SdePath<S>> {
        match &self.forward {
            ForwardScheme::Euler => euler_simulate(&self.coeffs, control, path, path_id, self.x0),
            ForwardScheme::Wealth(params) => explicit_wealth_solution(params, control, path, path_id, self.x0),
        }
    }

    pub fn forward_all(&self, control: &ControlProcess<S>, paths: &[FiltrationPath<S>]) -> Result<Vec<SdePath<S>>> {
        paths.par_iter().enumerate().map(|(i, p)| self.forward_path(control, p, i)).collect()
    }

    /// `sum_j h(t_{j+1}, X_{j+1}, u_j) dt_j + g(X_T)` on base knots.
    pub fn path_cost(&self, path: &FiltrationPath<S>, x: &SdePath<S>) -> S {
        let g = &path.grid;
        let mut total = S::zero();
        for j in 0..g.n_steps() {
            total = total + (self.h)(g.base_knot(j + 1), x.base_x(j + 1), x.base_u(j)) * g.base_dt(j);
        }
        total + (self.g)(path, x.terminal())
    }

    /// Same problem with `h` and `g` multiplied by `c`.
    pub fn scaled(&self, c: S) -> Self {
        let mut out = self.clone();
        let scale = |f: RunningFn<S>| -> RunningFn<S> { Arc::new(move |t, x, u| c * f(t, x, u)) };
        let scale_t = |f: TerminalFn<S>| -> TerminalFn<S> { Arc::new(move |p, x| c * f(p, x)) };
        out.h = scale(self.h.clone());
        out.dh_dx = scale(self.dh_dx.clone());
        out.dh_du = scale(self.dh_du.clone());
        out.g = scale_t(self.g.clone());
        out.dg = scale_t(self.dg.clone());
        out
    }
}

/// Monte Carlo estimate of `J` with per-path values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JEstimate {
    pub estimate: Estimate,
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

pub fn path_costs<S: Scalar>(problem: &ControlProblem<S>, paths: &[FiltrationPath<S>], forwards: &[SdePath<S>]) -> Result<Vec<f64>> {
    paths
        .iter()
        .zip(forwards)
        .enumerate()
        .map(|(i, (p, x))| {
            let v = problem.path_cost(p, x).as_f64();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteCost { path: i })
            }
        })
        .collect()
}

pub fn estimate_j<S: Scalar>(problem: &ControlProblem<S>, control: &ControlProcess<S>, paths: &[FiltrationPath<S>]) -> Result<JEstimate> {
    let forwards = problem.forward_all(control, paths)?;
    let per_path = path_costs(problem, paths, &forwards)?;
    Ok(JEstimate {
        estimate: Estimate::from_samples(&per_path),
        per_path,
    })
}

/// Adjoint equation `dp = -dH/dx dt + q dW + w dM`, `p_T = g'(X_T)`, as a
/// linear spec: `phi = h_x`, `alpha = b_x`, `pi = 0`, `mu = gamma_x`,
/// `beta = sigma_x`. `phi` at knot `j` uses the control of the step ending
/// there, matching the right-point running cost of `J`.
pub fn assemble_adjoint<S: Scalar>(problem: &ControlProblem<S>, forwards: Arc<Vec<SdePath<S>>>) -> LinearBsdeSpec<S> {
    let at = |f: RunningFn<S>, lag: bool| {
        let fw = forwards.clone();
        Adapted::from_fn(move |c: &KnotContext<S>| {
            let x = &fw[c.path];
            let ju = if lag { c.knot.saturating_sub(1) } else { c.knot };
            f(c.t, x.base_x(c.knot), x.base_u(ju))
        })
    };
    let fw = forwards.clone();
    let dg = problem.dg.clone();
    LinearBsdeSpec {
        phi: at(problem.dh_dx.clone(), true),
        alpha: at(problem.coeffs.db_dx.clone(), false),
        pi: Adapted::Constant(S::zero()),
        mu: at(problem.coeffs.dgamma_dx.clone(), false),
        beta: at(problem.coeffs.dsigma_dx.clone(), false),
        terminal: Arc::new(move |p, i| dg(p, fw[i].terminal())),
    }
}

/// The adjoint equation written directly with `dH/dx` as generator, for
/// plug-back residuals.
pub fn adjoint_general_spec<S: Scalar>(problem: &ControlProblem<S>, forwards: Arc<Vec<SdePath<S>>>) -> GeneralBsdeSpec<S> {
    let pr = problem.clone();
    let fw = forwards.clone();
    let dg = problem.dg.clone();
    let lip = problem.coeffs.lipschitz_const;
    let state = Arc::new(forwards.iter().map(|x| (0..=x.grid.n_steps()).map(|j| x.base_x(j)).collect()).collect());
    GeneralBsdeSpec::new(
        move |c, y, z, k| {
            let x = &fw[c.path];
            pr.hamiltonian_partials(c.t, x.base_x(c.knot), x.base_u(c.knot), AdjointPoint { p: y, q: z, w: k }, c.lambda_g)
                .0
        },
        lip,
        move |p, i| dg(p, forwards[i].terminal()),
        GeneratorForm::Martingale,
    )
    .with_state(state)
}

pub type SharedPaths<S> = Arc<Vec<SdePath<S>>>;

/// Forward paths under `control` and the adjoint solution on them.
pub fn solve_adjoint<S: Scalar>(
    problem: &ControlProblem<S>,
    control: &ControlProcess<S>,
    paths: &[FiltrationPath<S>],
    basis: &RegressionBasis,
) -> Result<(SharedPaths<S>, BsdeSolution<S>)> {
    let forwards = Arc::new(problem.forward_all(control, paths)?);
    let spec = assemble_adjoint(problem, forwards.clone());
    let sol = solve_linear_explicit(&spec, paths, basis)?;
    Ok((forwards, sol))
}

fn adjoint_at<S: Scalar>(sol: &BsdeSolution<S>, j: usize, i: usize) -> AdjointPoint<S> {
    AdjointPoint {
        p: sol.y[j][i],
        q: sol.z[j][i],
        w: sol.k[j][i],
    }
}

/// Per-path `sum_j beta_j dH/du(t_j, X_j, u_j, p_j, q_j, w_j) dt_j`.
pub fn hamiltonian_gradient<S: Scalar>(
    problem: &ControlProblem<S>,
    paths: &[FiltrationPath<S>],
    forwards: &[SdePath<S>],
    adjoint: &BsdeSolution<S>,
    beta: &[Vec<S>],
) -> Vec<f64> {
    paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = &p.grid;
            let x = &forwards[i];
            (0..g.n_steps())
                .map(|j| {
                    let du = problem.hamiltonian_du(g.base_knot(j), x.base_x(j), x.base_u(j), adjoint_at(adjoint, j, i), p.base_lambda_g(j));
                    (beta[i][j] * du * g.base_dt(j)).as_f64()
                })
                .sum()
        })
        .collect()
}

/// Both representations of the Gateaux derivative of `J` at `u` in
/// direction `beta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionalReport {
    pub y: f64,
    pub j: Estimate,
    pub fd: Estimate,
    pub hamiltonian: Estimate,
    /// Paired per-path difference `fd - hamiltonian`.
    pub difference: Estimate,
    pub combined_se: f64,
    pub tolerance: f64,
    pub agree: bool,
    pub one_sided: bool,
    /// `|D(2y) - D(y)|`, a bound on the finite-difference truncation error.
    pub truncation: f64,
    /// Rounding allowance for finite differences of `J`.
    pub rounding: f64,
    pub delta_max: f64,
}

impl DirectionalReport {
    pub fn fd_vanishes(&self) -> bool {
        self.fd.mean.abs() <= 3.0 * self.fd.se + self.truncation + self.rounding
    }

    pub fn hamiltonian_vanishes(&self) -> bool {
        self.hamiltonian.mean.abs() <= 3.0 * self.hamiltonian.se + self.rounding
    }

    /// Both estimates clear of zero beyond their error allowances, with the same sign.
    pub fn nonzero_same_sign(&self) -> bool {
        !self.fd_vanishes() && !self.hamiltonian_vanishes() && self.fd.mean.signum() == self.hamiltonian.mean.signum()
    }
}

/// Largest `y <= cap` with `u + y beta` admissible on every path and knot.
fn delta_max<S: Scalar>(u: &[Vec<S>], beta: &[Vec<S>], set: &Interval<S>, cap: S) -> S {
    let mut d = cap;
    for (ur, br) in u.iter().zip(beta) {
        for (&uv, &bv) in ur.iter().zip(br) {
            if bv > S::zero() && set.hi.is_finite() {
                d = d.min((set.hi - uv) / bv);
            } else if bv < S::zero() && set.lo.is_finite() {
                d = d.min((set.lo - uv) / bv);
            }
        }
    }
    d.max(S::zero())
}

fn admissible<S: Scalar>(u: &[Vec<S>], beta: &[Vec<S>], set: &Interval<S>, y: S) -> bool {
    u.iter()
        .zip(beta)
        .all(|(ur, br)| ur.iter().zip(br).all(|(&a, &b)| set.contains(a + y * b)))
}

/// Central difference `[J(u + y beta) - J(u - y beta)] / 2y` on common random
/// numbers against `E[sum beta dH/du dt]` from the adjoint. The base control
/// and `beta` are frozen along the unperturbed paths, so the perturbation is
/// of the control process rather than of the feedback law.
pub fn directional_derivative<S: Scalar>(
    problem: &ControlProblem<S>,
    control: &ControlProcess<S>,
    beta: &Rule<S>,
    paths: &[FiltrationPath<S>],
    basis: &RegressionBasis,
    y: S,
) -> Result<DirectionalReport> {
    if !(y > S::zero()) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let (forwards, adjoint) = solve_adjoint(problem, control, paths, basis)?;
    let n = paths[0].grid.n_steps();
    let u: Vec<Vec<S>> = forwards.iter().map(|x| (0..n).map(|j| x.base_u(j)).collect()).collect();
    let b: Vec<Vec<S>> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| (0..n).map(|j| beta(&control_context(p, i, j, forwards[i].base_x(j)))).collect())
        .collect();
    let set = problem.value_set;
    let plus_ok = admissible(&u, &b, &set, y + y);
    let minus_ok = admissible(&u, &b, &set, -(y + y));
    let costs_at = |shift: S| -> Result<Vec<f64>> {
        let table: Vec<Vec<S>> = u
            .iter()
            .zip(&b)
            .map(|(ur, br)| ur.iter().zip(br).map(|(&a, &c)| a + shift * c).collect())
            .collect();
        let ctl = ControlProcess::from_table(Arc::new(table), set);
        let fw = problem.forward_all(&ctl, paths)?;
        path_costs(problem, paths, &fw)
    };
    let base_costs = path_costs(problem, paths, &forwards)?;
    let diff = |a: &[f64], c: &[f64], scale: f64| -> Vec<f64> { a.iter().zip(c).map(|(x, z)| (x - z) / scale).collect() };
    let yf = y.as_f64();
    let (d1, d2, one_sided) = match (plus_ok, minus_ok) {
        (true, true) => {
            let (p1, m1) = (costs_at(y)?, costs_at(-y)?);
            let (p2, m2) = (costs_at(y + y)?, costs_at(-(y + y))?);
            (diff(&p1, &m1, 2.0 * yf), diff(&p2, &m2, 4.0 * yf), false)
        }
        (true, false) => (diff(&costs_at(y)?, &base_costs, yf), diff(&costs_at(y + y)?, &base_costs, 2.0 * yf), true),
        (false, true) => (
            diff(&base_costs, &costs_at(-y)?, yf),
            diff(&base_costs, &costs_at(-(y + y))?, 2.0 * yf),
            true,
        ),
        (false, false) => return Err(invalid("perturbation leaves the control set in both directions")),
    };
    let ham = hamiltonian_gradient(problem, paths, &forwards, &adjoint, &b);
    let fd = Estimate::from_samples(&d1);
    let fd2 = Estimate::from_samples(&d2);
    let hamiltonian = Estimate::from_samples(&ham);
    let paired: Vec<f64> = d1.iter().zip(&ham).map(|(a, c)| a - c).collect();
    let difference = Estimate::from_samples(&paired);
    let j = Estimate::from_samples(&base_costs);
    let combined_se = fd.combined_se(&hamiltonian);
    let tolerance = (3.0 * combined_se).max(1e-3 * j.mean.abs());
    let scale = base_costs.iter().map(|v| v.abs()).sum::<f64>() / base_costs.len() as f64;
    let rounding = 1e-9 * scale.max(1.0) + 64.0 * S::epsilon().as_f64() * scale.max(1.0) / yf;
    let truncation = (fd2.mean - fd.mean).abs();
    Ok(DirectionalReport {
        y: yf,
        j,
        agree: (fd.mean - hamiltonian.mean).abs() <= tolerance + truncation,
        fd,
        hamiltonian,
        difference,
        combined_se,
        tolerance,
        one_sided,
        truncation,
        rounding,
        delta_max: delta_max(&u, &b, &set, S::lit(1e6)).as_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SufficientConfig {
    pub n_grid: usize,
    /// Allowed largest Hessian eigenvalue relative to the Hessian norm.
    pub concavity_tol: f64,
    /// Relative finite-difference step for second differences.
    pub fd_rel_step: f64,
    pub max_points: usize,
}

impl Default for SufficientConfig {
    fn default() -> Self {
        Self {
            n_grid: 21,
            concavity_tol: 1e-4,
            fd_rel_step: 1e-3,
            max_points: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginRow {
    pub v: f64,
    pub knot: usize,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SufficientReport {
    pub sampled_points: usize,
    pub max_hessian_eigen_ratio: f64,
    pub concavity_tol: f64,
    pub hamiltonian_concave: bool,
    pub max_terminal_second_diff: f64,
    pub terminal_concave: bool,
    pub v_grid: Vec<f64>,
    /// Worst knot of `E[dH/du (v - u)]` for each grid value.
    pub margins: Vec<MarginRow>,
    /// Largest `mean - 3 SE - rounding` over knots and grid values.
    pub worst_excess: f64,
    pub first_order_ok: bool,
    pub pass: bool,
}

fn second_diff<S: Scalar>(f: impl Fn(S) -> S, x: S, h: S) -> (S, S) {
    let (a, b, c) = (f(x + h), f(x), f(x - h));
    let rounding = S::lit(64.0) * S::epsilon() * (a.abs() + b.abs() + b.abs() + c.abs());
    (a - b - b + c, rounding)
}

/// Checks concavity of `(x, u) -> H` at sampled knots, concavity of `g` at the
/// terminal states, and the variational inequality `E[dH/du (v - u)] <= 0`
/// per knot over a grid of `v` in `search` intersected with the control set.
pub fn check_sufficient<S: Scalar>(
    problem: &ControlProblem<S>,
    control: &ControlProcess<S>,
    paths: &[FiltrationPath<S>],
    basis: &RegressionBasis,
    search: Interval<S>,
    cfg: &SufficientConfig,
) -> Result<SufficientReport> {
    let (forwards, adjoint) = solve_adjoint(problem, control, paths, basis)?;
    let n = paths[0].grid.n_steps();
    let np = paths.len();
    let rel = S::lit(cfg.fd_rel_step);
    let floor = S::lit(1e-8);

    let stride = (np * n).div_ceil(cfg.max_points.max(1)).max(1);
    let mut ratio_max = f64::NEG_INFINITY;
    let mut sampled = 0;
    let mut idx = 0;
    for (i, p) in paths.iter().enumerate() {
        for j in 0..n {
            idx += 1;
            if idx % stride != 0 {
                continue;
            }
            sampled += 1;
            let (t, x, u, a, l) = (
                p.grid.base_knot(j),
                forwards[i].base_x(j),
                forwards[i].base_u(j),
                adjoint_at(&adjoint, j, i),
                p.base_lambda_g(j),
            );
            let hx = rel * x.abs().max(floor);
            let hu = rel * u.abs().max(floor);
            let ham = |xx: S, uu: S| problem.hamiltonian(t, xx, uu, a, l);
            let (dxx, _) = second_diff(|v| ham(v, u), x, hx);
            let (duu, _) = second_diff(|v| ham(x, v), u, hu);
            let hxx = dxx / (hx * hx);
            let huu = duu / (hu * hu);
            let hxu = (ham(x + hx, u + hu) - ham(x + hx, u - hu) - ham(x - hx, u + hu) + ham(x - hx, u - hu)) / (S::lit(4.0) * hx * hu);
            let (a11, a22, a12) = (hxx.as_f64(), huu.as_f64(), hxu.as_f64());
            let norm = (a11 * a11 + a22 * a22 + 2.0 * a12 * a12).sqrt();
            let eig = 0.5 * (a11 + a22) + (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
            let ratio = if norm > 0.0 { eig / norm } else { 0.0 };
            ratio_max = ratio_max.max(ratio);
        }
    }
    let hamiltonian_concave = ratio_max <= cfg.concavity_tol;

    let mut g_max = f64::NEG_INFINITY;
    let mut terminal_concave = true;
    for (p, x) in paths.iter().zip(forwards.iter()) {
        let xt = x.terminal();
        let h = rel * xt.abs().max(floor);
        let (d2, rounding) = second_diff(|v| (problem.g)(p, v), xt, h);
        g_max = g_max.max((d2 / (h * h)).as_f64());
        terminal_concave &= d2 <= rounding;
    }

    let lo = search.lo.max(problem.value_set.lo);
    let hi = search.hi.min(problem.value_set.hi);
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(invalid("search interval must be finite and meet the control set"));
    }
    let v_grid = Interval::new(lo, hi).grid(cfg.n_grid);
    // per knot: dH/du and its rounding scale per path
    let grads: Vec<Vec<(S, S, S)>> = (0..n)
        .map(|j| {
            paths
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let (t, x, u, a, l) = (
                        p.grid.base_knot(j),
                        forwards[i].base_x(j),
                        forwards[i].base_u(j),
                        adjoint_at(&adjoint, j, i),
                        p.base_lambda_g(j),
                    );
                    (problem.hamiltonian_du(t, x, u, a, l), problem.hamiltonian_du_magnitude(t, x, u, a, l), u)
                })
                .collect()
        })
        .collect();
    let mut margins = Vec::with_capacity(v_grid.len());
    let mut worst_excess = f64::NEG_INFINITY;
    for &v in &v_grid {
        let mut worst: Option<(f64, MarginRow)> = None;
        for (j, row) in grads.iter().enumerate() {
            let vals: Vec<f64> = row.iter().map(|&(d, _, u)| (d * (v - u)).as_f64()).collect();
            let scale: f64 = row.iter().map(|&(_, m, u)| (m * (v - u).abs()).as_f64()).sum::<f64>() / np as f64;
            let est = Estimate::from_samples(&vals);
            let excess = est.mean - 3.0 * est.se - 1e-9 * scale.max(f64::MIN_POSITIVE);
            if worst.as_ref().is_none_or(|(e, _)| excess > *e) {
                worst = Some((
                    excess,
                    MarginRow {
                        v: v.as_f64(),
                        knot: j,
                        estimate: est,
                    },
                ));
            }
        }
        let (excess, row) = worst.expect("at least one knot");
        worst_excess = worst_excess.max(excess);
        margins.push(row);
    }
    let first_order_ok = worst_excess <= 0.0;
    Ok(SufficientReport {
        sampled_points: sampled,
        max_hessian_eigen_ratio: ratio_max,
        concavity_tol: cfg.concavity_tol,
        hamiltonian_concave,
        max_terminal_second_diff: g_max,
        terminal_concave,
        v_grid: v_grid.iter().map(|v| v.as_f64()).collect(),
        margins,
        worst_excess,
        first_order_ok,
        pass: hamiltonian_concave && terminal_concave && first_order_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_paths, TimeGrid};
    use crate::timefn::TimeFn;

    fn linear_problem() -> ControlProblem<f64> {
        let mut coeffs = CoefficientSet::zero();
        coeffs.b = Arc::new(|_, _, u| u);
        coeffs.db_du = Arc::new(|_, _, _| 1.0);
        ControlProblem {
            coeffs,
            h: Arc::new(|_, _, u| -0.5 * u * u),
            dh_dx: Arc::new(|_, _, _| 0.0),
            dh_du: Arc::new(|_, _, u| -u),
            g: Arc::new(|_, x| x),
            dg: Arc::new(|_, _| 1.0),
            value_set: Interval::new(-5.0, 5.0),
            intensity: IntensitySpec::constant(0.5),
            x0: 0.0,
            forward: ForwardScheme::Euler,
        }
    }

    fn paths(n: usize) -> Vec<FiltrationPath<f64>> {
        build_paths(&TimeGrid::uniform(1.0, 10).unwrap(), &IntensitySpec::constant(0.5), 21, n).unwrap()
    }

    #[test]
    fn hamiltonian_reduces_to_running_cost() {
        let pr = linear_problem();
        let zero = AdjointPoint { p: 0.0, q: 0.0, w: 0.0 };
        assert_eq!(pr.hamiltonian(0.3, 1.0, 0.7, zero, 0.4), -0.5 * 0.7 * 0.7);
    }

    #[test]
    fn constant_costs() {
        let mut pr = linear_problem();
        pr.h = Arc::new(|_, _, _| 1.0);
        pr.g = Arc::new(|_, _| 0.0);
        let ps = paths(100);
        let j = estimate_j(&pr, &ControlProcess::constant(0.2, pr.value_set), &ps).unwrap();
        assert!((j.estimate.mean - 1.0).abs() < 1e-12);
        assert!(j.estimate.se < 1e-12);
    }

    #[test]
    fn x_independent_adjoint_is_one() {
        let pr = linear_problem();
        let ps = paths(300);
        let (_, sol) = solve_adjoint(&pr, &ControlProcess::constant(0.2, pr.value_set), &ps, &RegressionBasis::default()).unwrap();
        assert!(sol.y.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(sol.z.iter().flatten().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn quadratic_problem_optimum() {
        // dH/du = 1 - u with p = 1, so u = 1 is optimal
        let pr = linear_problem();
        let ps = paths(200);
        let beta: Rule<f64> = Arc::new(|_| 1.0);
        let at = |u: f64| {
            directional_derivative(
                &pr,
                &ControlProcess::constant(u, pr.value_set),
                &beta,
                &ps,
                &RegressionBasis::default(),
                1e-4,
            )
            .unwrap()
        };
        let opt = at(1.0);
        assert!(opt.fd_vanishes() && opt.hamiltonian_vanishes(), "{opt:?}");
        let off = at(0.5);
        assert!(off.agree && off.nonzero_same_sign());
        assert!((off.fd.mean - 0.5).abs() < 1e-6);
    }

    #[test]
    fn one_sided_at_boundary() {
        let mut pr = linear_problem();
        pr.value_set = Interval::new(0.0, 5.0);
        let ps = paths(100);
        let beta: Rule<f64> = Arc::new(|_| 1.0);
        let r = directional_derivative(
            &pr,
            &ControlProcess::constant(0.0, pr.value_set),
            &beta,
            &ps,
            &RegressionBasis::default(),
            1e-4,
        )
        .unwrap();
        assert!(r.one_sided);
        assert!((r.fd.mean - 1.0).abs() < 1e-3);
    }

    #[test]
    fn wealth_partials_consistent() {
        let params = WealthParams {
            alpha: TimeFn::constant(0.05),
            beta: TimeFn::constant(0.2),
            mu: -0.3,
        };
        let coeffs = CoefficientSet::wealth(params.alpha.clone(), params.beta.clone(), params.mu, 1.0, 5.0);
        let pr = ControlProblem {
            coeffs,
            h: Arc::new(|_, x: f64, u: f64| (x * u).ln()),
            dh_dx: Arc::new(|_, x, _| 1.0 / x),
            dh_du: Arc::new(|_, _, u| 1.0 / u),
            g: Arc::new(|_, x: f64| x.ln()),
            dg: Arc::new(|_, x| 1.0 / x),
            value_set: Interval::new(1e-6, 10.0),
            intensity: IntensitySpec::constant(0.3),
            x0: 1.0,
            forward: ForwardScheme::Wealth(params),
        };
        let pts: Vec<_> = (1..200)
            .map(|i| {
                let f = i as f64 / 200.0;
                (
                    f,
                    0.5 + f,
                    0.2 + f,
                    AdjointPoint {
                        p: 1.0 - f,
                        q: f,
                        w: 0.3 * f,
                    },
                    0.3 * (i % 2) as f64,
                )
            })
            .collect();
        assert!(pr.partials_mismatch(&pts) < 1e-5);
    }
}
