//! Probabilistic primitives: Brownian increments, the default time and the
//! processes of the enlarged filtration on a shared time grid.
//!
//! The default time is drawn by inverse transform from its deterministic
//! intensity and is inserted into the grid as an extra knot, so the single
//! jump of `H` and `M` is represented exactly. The compensator is integrated
//! in closed form, which makes `M = H - compensator` hold to the last bit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{PathRng, RngSpec};
use crate::scalar::Scalar;
use crate::timefn::TimeFn;

/// Relative distance below which `tau` is merged with an existing knot.
const KNOT_MERGE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensitySpec<S> {
    pub lambda_f: TimeFn<S>,
    pub bound_c: S,
}

impl<S: Scalar> IntensitySpec<S> {
    pub fn constant(rate: S) -> Self {
        Self {
            lambda_f: TimeFn::constant(rate),
            bound_c: rate,
        }
    }

    pub fn new(lambda_f: TimeFn<S>, bound_c: S) -> Self {
        Self { lambda_f, bound_c }
    }

    /// Checks nonnegativity and the upper bound on `[0, horizon]`.
    pub fn validate(&self, horizon: S) -> Result<()> {
        self.lambda_f.validate()?;
        if self.lambda_f.inf_on(horizon) < S::zero() {
            return Err(invalid("negative intensity value encountered"));
        }
        if self.lambda_f.sup_on(horizon) > self.bound_c {
            return Err(invalid(format!("intensity exceeds its bound c = {}", self.bound_c)));
        }
        Ok(())
    }

    pub fn rate(&self, t: S) -> S {
        self.lambda_f.value(t)
    }

    /// Integrated intensity `int_0^t lambda^F ds`.
    pub fn cumulative(&self, t: S) -> S {
        self.lambda_f.cumulative(t)
    }

    /// `P(tau > t) = exp(-int_0^t lambda^F ds)`.
    pub fn survival(&self, t: S) -> S {
        (-self.cumulative(t)).exp()
    }
}

/// Knots `0 = t_0 < ... < t_n = T` of a uniform base grid, possibly refined
/// by one extra knot at the default time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<S> {
    horizon: S,
    n_steps: usize,
    knots: Vec<S>,
    tau_index: Option<usize>,
    /// Refined index of each base knot.
    base_index: Vec<usize>,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn uniform(horizon: S, n_steps: usize) -> Result<Self> {
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return Err(invalid("horizon must be positive and finite"));
        }
        if n_steps < 2 {
            return Err(invalid("n_steps must be at least 2"));
        }
        let dt = horizon / S::from_count(n_steps);
        let mut knots: Vec<S> = (0..=n_steps).map(|k| dt * S::from_count(k)).collect();
        knots[n_steps] = horizon;
        Ok(Self {
            horizon,
            n_steps,
            knots,
            tau_index: None,
            base_index: (0..=n_steps).collect(),
        })
    }

    /// Copy of the base grid with `tau` inserted. Returns the grid and `tau`
    /// snapped onto an existing knot when it is within rounding of one.
    pub fn with_tau(&self, tau: S) -> (Self, S) {
        let base = self.base_only();
        if !(tau <= self.horizon) {
            return (base, tau);
        }
        let eps = S::lit(KNOT_MERGE_EPS) * self.horizon;
        for (k, &t) in base.knots.iter().enumerate().skip(1) {
            if (t - tau).abs() <= eps {
                let mut g = base.clone();
                g.tau_index = Some(k);
                return (g, t);
            }
        }
        let pos = base.knots.partition_point(|&t| t < tau);
        let mut knots = base.knots.clone();
        knots.insert(pos, tau);
        let base_index = (0..=self.n_steps).map(|j| if j < pos { j } else { j + 1 }).collect();
        (
            Self {
                horizon: self.horizon,
                n_steps: self.n_steps,
                knots,
                tau_index: Some(pos),
                base_index,
            },
            tau,
        )
    }

    fn base_only(&self) -> Self {
        let knots = self.base_index.iter().map(|&i| self.knots[i]).collect();
        Self {
            horizon: self.horizon,
            n_steps: self.n_steps,
            knots,
            tau_index: None,
            base_index: (0..=self.n_steps).collect(),
        }
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    /// Number of base steps.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn knots(&self) -> &[S] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn tau_index(&self) -> Option<usize> {
        self.tau_index
    }

    pub fn base_index(&self) -> &[usize] {
        &self.base_index
    }

    pub fn base_knot(&self, j: usize) -> S {
        self.knots[self.base_index[j]]
    }

    pub fn base_dt(&self, j: usize) -> S {
        self.base_knot(j + 1) - self.base_knot(j)
    }

    /// Base step containing the refined step `k -> k+1`.
    pub fn base_step_of(&self, k: usize) -> usize {
        self.base_index.partition_point(|&i| i <= k) - 1
    }
}

/// One simulated world on a (refined) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationPath<S> {
    pub grid: TimeGrid<S>,
    /// Brownian increment over each refined step.
    pub dw: Vec<S>,
    /// Brownian motion at each knot.
    pub w: Vec<S>,
    /// Default time, `+inf` when no default happens in `[0, T]`.
    pub tau: S,
    pub h: Vec<S>,
    pub m: Vec<S>,
    pub lambda_g: Vec<S>,
    /// `int_0^{t ^ tau} lambda^F ds` at each knot.
    pub compensator: Vec<S>,
    /// Jump of `M` at each knot (1 at `tau`, else 0).
    pub jumps: Vec<S>,
    pub rng: RngSpec,
}

impl<S: Scalar> FiltrationPath<S> {
    pub fn defaulted(&self) -> bool {
        self.tau.is_finite()
    }

    pub fn n_knots(&self) -> usize {
        self.grid.len()
    }

    /// Values at the base knots of a per-knot series.
    pub fn at_base<'a>(&'a self, series: &'a [S]) -> impl Iterator<Item = S> + 'a {
        self.grid.base_index.iter().map(move |&i| series[i])
    }

    pub fn base_w(&self, j: usize) -> S {
        self.w[self.grid.base_index[j]]
    }

    pub fn base_h(&self, j: usize) -> S {
        self.h[self.grid.base_index[j]]
    }

    pub fn base_lambda_g(&self, j: usize) -> S {
        self.lambda_g[self.grid.base_index[j]]
    }

    /// Increments of `(W, M, H, compensator)` over base step `j`.
    pub fn base_increments(&self, j: usize) -> BaseIncrement<S> {
        let (a, b) = (self.grid.base_index[j], self.grid.base_index[j + 1]);
        BaseIncrement {
            dt: self.grid.knots[b] - self.grid.knots[a],
            dw: self.w[b] - self.w[a],
            dm: self.m[b] - self.m[a],
            dh: self.h[b] - self.h[a],
            dc: self.compensator[b] - self.compensator[a],
        }
    }

    /// Keeps every `factor`-th base knot, together with the default knot.
    /// Brownian values at retained knots are unchanged, so coarse and fine
    /// paths share one Brownian trajectory.
    pub fn coarsen(&self, factor: usize, intensity: &IntensitySpec<S>) -> Result<Self> {
        let n = self.grid.n_steps;
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(invalid(format!("cannot coarsen {n} steps by factor {factor}")));
        }
        let base = TimeGrid::uniform(self.grid.horizon, n / factor)?;
        let w_base: Vec<S> = (0..=n / factor).map(|j| self.base_w(j * factor)).collect();
        let w_tau = self.grid.tau_index.map(|k| self.w[k]);
        assemble(&base, &w_base, self.tau, w_tau, intensity, self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseIncrement<S> {
    pub dt: S,
    pub dw: S,
    pub dm: S,
    pub dh: S,
    pub dc: S,
}

fn draw_tau<S: Scalar>(intensity: &IntensitySpec<S>, horizon: S, rng: &mut PathRng) -> S {
    let e = S::lit(rng.exp1());
    match intensity.lambda_f.inverse_cumulative(e) {
        Some(t) if t <= horizon => t,
        _ => S::infinity(),
    }
}

/// Default time `inf{t : int_0^t lambda^F ds >= E}` with `E ~ Exp(1)`, or
/// `+inf` when the integrated intensity over `[0, horizon]` stays below `E`.
///
/// Uses the first draw of the stream, so it equals the `tau` of the path
/// built from the same `RngSpec`.
pub fn sample_default_time<S: Scalar>(intensity: &IntensitySpec<S>, horizon: S, spec: RngSpec) -> Result<S> {
    intensity.validate(horizon)?;
    if !(horizon > S::zero()) {
        return Err(invalid("horizon must be positive"));
    }
    Ok(draw_tau(intensity, horizon, &mut spec.stream()))
}

/// Draws Brownian increments and the default time on `grid` (a base grid)
/// and fills `H`, `M` and `lambda^G`.
pub fn build_filtration_path<S: Scalar>(grid: &TimeGrid<S>, intensity: &IntensitySpec<S>, spec: RngSpec) -> Result<FiltrationPath<S>> {
    intensity.validate(grid.horizon)?;
    let grid = grid.base_only();
    let mut rng = spec.stream();
    let tau = draw_tau(intensity, grid.horizon, &mut rng);

    let n = grid.n_steps;
    let mut w_base = Vec::with_capacity(n + 1);
    w_base.push(S::zero());
    let mut w_tau = None;
    for j in 0..n {
        let (t0, t1) = (grid.knots[j], grid.knots[j + 1]);
        let dt = t1 - t0;
        let z = S::lit(rng.normal());
        let zb = S::lit(rng.normal());
        let w0 = w_base[j];
        let w1 = w0 + dt.sqrt() * z;
        if tau > t0 && tau < t1 {
            // Brownian bridge between the two base knots
            let s = tau - t0;
            let mean = w0 + (w1 - w0) * s / dt;
            let sd = (s * (t1 - tau) / dt).sqrt();
            w_tau = Some(mean + sd * zb);
        }
        w_base.push(w1);
    }
    assemble(&grid, &w_base, tau, w_tau, intensity, spec)
}

fn assemble<S: Scalar>(
    base: &TimeGrid<S>,
    w_base: &[S],
    tau: S,
    w_tau: Option<S>,
    intensity: &IntensitySpec<S>,
    spec: RngSpec,
) -> Result<FiltrationPath<S>> {
    let (grid, tau) = base.with_tau(tau);
    let len = grid.len();
    let mut w = vec![S::zero(); len];
    for (j, &k) in grid.base_index.iter().enumerate() {
        w[k] = w_base[j];
    }
    if let Some(k) = grid.tau_index {
        if !grid.base_index.contains(&k) {
            w[k] = w_tau.ok_or_else(|| invalid("missing Brownian value at the default knot"))?;
        }
    }
    let dw: Vec<S> = w.windows(2).map(|p| p[1] - p[0]).collect();

    let lambda_tau = if tau.is_finite() { intensity.cumulative(tau) } else { S::infinity() };
    let mut h = Vec::with_capacity(len);
    let mut m = Vec::with_capacity(len);
    let mut lambda_g = Vec::with_capacity(len);
    let mut compensator = Vec::with_capacity(len);
    let mut jumps = vec![S::zero(); len];
    for (k, &t) in grid.knots.iter().enumerate() {
        let after = grid.tau_index.is_some_and(|i| k >= i);
        let hk = if after { S::one() } else { S::zero() };
        let ck = if after { lambda_tau } else { intensity.cumulative(t) };
        let lg = if t <= tau { intensity.rate(t) } else { S::zero() };
        h.push(hk);
        compensator.push(ck);
        m.push(hk - ck);
        lambda_g.push(lg);
    }
    if let Some(i) = grid.tau_index {
        jumps[i] = S::one();
    }
    Ok(FiltrationPath {
        grid,
        dw,
        w,
        tau,
        h,
        m,
        lambda_g,
        compensator,
        jumps,
        rng: spec,
    })
}

/// Builds `n_paths` paths on stream ids `0..n_paths` in parallel.
pub fn build_paths<S: Scalar>(grid: &TimeGrid<S>, intensity: &IntensitySpec<S>, seed: u64, n_paths: usize) -> Result<Vec<FiltrationPath<S>>> {
    use rayon::prelude::*;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| build_filtration_path(grid, intensity, RngSpec::new(seed, i)))
        .collect()
}

/// `true` iff the running sum of squared jumps of `M` equals `H` at every
/// knot, and the stored jumps match the discontinuities of `M`.
pub fn quadratic_variation_check<S: Scalar>(path: &FiltrationPath<S>) -> bool {
    let mut qv = S::zero();
    for k in 0..path.n_knots() {
        qv = qv + path.jumps[k] * path.jumps[k];
        if qv != path.h[k] {
            return false;
        }
        if k > 0 {
            // left limit of M at t_k: H before the knot, compensator continuous
            let left = path.h[k - 1] - path.compensator[k];
            let jump = path.m[k] - left;
            if (jump - path.jumps[k]).abs() > S::lit(8.0) * S::epsilon() * (S::one() + left.abs()) {
                return false;
            }
        }
    }
    true
}

/// Writes `path, knot, t, dW, W, H, M, lambda_G` rows. `dW` is the increment
/// ending at the knot.
pub fn write_paths_csv<S: Scalar, W: Write>(out: W, paths: &[FiltrationPath<S>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["path", "knot", "t", "dW", "W", "H", "M", "lambda_G"])?;
    for (p, path) in paths.iter().enumerate() {
        for k in 0..path.n_knots() {
            let dw = if k == 0 { S::zero() } else { path.dw[k - 1] };
            wtr.write_record([
                p.to_string(),
                k.to_string(),
                path.grid.knots[k].as_f64().to_string(),
                dw.as_f64().to_string(),
                path.w[k].as_f64().to_string(),
                path.h[k].as_f64().to_string(),
                path.m[k].as_f64().to_string(),
                path.lambda_g[k].as_f64().to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;

    fn grid(n: usize) -> TimeGrid<f64> {
        TimeGrid::uniform(1.0, n).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_input() {
        assert!(TimeGrid::<f64>::uniform(1.0, 1).is_err());
        assert!(TimeGrid::<f64>::uniform(0.0, 4).is_err());
    }

    #[test]
    fn tau_on_existing_knot_is_not_duplicated() {
        let g = grid(4);
        let (r, tau) = g.with_tau(0.5 + 1e-15);
        assert_eq!(r.len(), 5);
        assert_eq!(r.tau_index(), Some(2));
        assert_eq!(tau, 0.5);
    }

    #[test]
    fn tau_inserted_between_knots() {
        let g = grid(4);
        let (r, _) = g.with_tau(0.6);
        assert_eq!(r.len(), 6);
        assert_eq!(r.tau_index(), Some(3));
        assert_eq!(r.base_index(), &[0, 1, 2, 4, 5]);
        assert_eq!(r.base_step_of(2), 2);
        assert_eq!(r.base_step_of(3), 2);
        assert_eq!(r.base_step_of(4), 3);
        assert!(r.knots().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_intensity_never_defaults() {
        let lam = IntensitySpec::constant(0.0);
        for s in 0..200 {
            let tau: f64 = sample_default_time(&lam, 5.0, RngSpec::new(1, s)).unwrap();
            assert!(tau.is_infinite());
        }
    }

    #[test]
    fn negative_intensity_rejected() {
        let lam = IntensitySpec::new(TimeFn::piecewise_linear(vec![0.0, 1.0], vec![1.0, -1.0]).unwrap(), 1.0);
        assert!(sample_default_time(&lam, 1.0, RngSpec::new(0, 0)).is_err());
        let over = IntensitySpec::new(TimeFn::constant(2.0), 1.0);
        assert!(build_filtration_path(&grid(4), &over, RngSpec::new(0, 0)).is_err());
    }

    #[test]
    fn constant_intensity_survival_matches_exponential() {
        let c: f64 = 0.7;
        let lam = IntensitySpec::constant(c);
        let n = 100_000;
        let t = 0.8;
        let alive: Vec<f64> = (0..n)
            .map(|i| {
                let tau = sample_default_time(&lam, 2.0, RngSpec::new(11, i)).unwrap();
                if tau > t {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let est = Estimate::from_samples(&alive);
        let exact = (-c * t).exp();
        assert!((est.mean - exact).abs() <= 3.0 * est.se, "{} vs {}", est.mean, exact);
    }

    #[test]
    fn ramp_intensity_survival_at_one() {
        // lambda(t) = 2t, Lambda(t) = t^2, P(tau > 1) = e^{-1}
        let lam = IntensitySpec::new(TimeFn::piecewise_linear(vec![0.0, 1.0], vec![0.0, 2.0]).unwrap(), 2.0);
        let n = 100_000;
        let alive: Vec<f64> = (0..n)
            .map(|i| {
                let tau = sample_default_time(&lam, 1.0, RngSpec::new(5, i)).unwrap();
                if tau > 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let est = Estimate::from_samples(&alive);
        assert!((est.mean - (-1.0_f64).exp()).abs() <= 3.0 * est.se);
    }

    #[test]
    fn ramp_tau_is_sqrt_of_exponential() {
        let lam = IntensitySpec::new(TimeFn::piecewise_linear(vec![0.0, 1.0], vec![0.0, 2.0]).unwrap(), 2.0);
        for i in 0..500 {
            let spec = RngSpec::new(3, i);
            let e = spec.stream().exp1();
            let tau = sample_default_time(&lam, 1.0, spec).unwrap();
            if e <= 1.0 {
                assert!((tau - e.sqrt()).abs() < 1e-12);
            } else {
                assert!(tau.is_infinite());
            }
        }
    }

    #[test]
    fn path_structure_before_and_after_default() {
        let lam = IntensitySpec::constant(1.5);
        let g = grid(20);
        let mut seen_default = false;
        for i in 0..50 {
            let p = build_filtration_path(&g, &lam, RngSpec::new(9, i)).unwrap();
            assert!(quadratic_variation_check(&p));
            match p.grid.tau_index() {
                None => {
                    assert!(p.tau.is_infinite());
                    for (k, &t) in p.grid.knots().iter().enumerate() {
                        assert_eq!(p.h[k], 0.0);
                        assert_eq!(p.m[k], -1.5 * t);
                    }
                }
                Some(ti) => {
                    seen_default = true;
                    assert_eq!(p.grid.knots()[ti], p.tau);
                    assert_eq!(p.jumps[ti], 1.0);
                    for k in 0..p.n_knots() {
                        let t = p.grid.knots()[k];
                        if k < ti {
                            assert_eq!(p.m[k], -1.5 * t);
                            assert_eq!(p.lambda_g[k], 1.5);
                        } else {
                            assert_eq!(p.h[k], 1.0);
                            if k > ti {
                                assert_eq!(p.lambda_g[k], 0.0);
                                assert_eq!(p.m[k], p.m[ti]);
                            }
                        }
                    }
                }
            }
        }
        assert!(seen_default);
    }

    #[test]
    fn paths_are_reproducible() {
        let lam = IntensitySpec::constant(0.4);
        let a = build_filtration_path(&grid(16), &lam, RngSpec::new(1, 42)).unwrap();
        let b = build_filtration_path(&grid(16), &lam, RngSpec::new(1, 42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coarsening_keeps_brownian_values_and_tau() {
        let lam = IntensitySpec::constant(2.0);
        let g = grid(16);
        for i in 0..40 {
            let fine = build_filtration_path(&g, &lam, RngSpec::new(2, i)).unwrap();
            let coarse = fine.coarsen(4, &lam).unwrap();
            assert_eq!(coarse.grid.n_steps(), 4);
            assert_eq!(coarse.tau, fine.tau);
            for j in 0..=4 {
                assert_eq!(coarse.base_w(j), fine.base_w(4 * j));
            }
            if let (Some(a), Some(b)) = (fine.grid.tau_index(), coarse.grid.tau_index()) {
                assert_eq!(fine.w[a], coarse.w[b]);
            }
            assert!(quadratic_variation_check(&coarse));
        }
    }

    #[test]
    fn martingale_mean_is_zero() {
        let lam = IntensitySpec::constant(0.9);
        let paths = build_paths(&grid(5), &lam, 77, 100_000).unwrap();
        let mt: Vec<f64> = paths.iter().map(|p| *p.m.last().unwrap()).collect();
        let est = Estimate::from_samples(&mt);
        assert!(est.mean.abs() <= 3.0 * est.se, "{est:?}");
    }

    #[test]
    fn f32_paths_build() {
        let lam = IntensitySpec::constant(1.0_f32);
        let g = TimeGrid::uniform(1.0_f32, 8).unwrap();
        let p = build_filtration_path(&g, &lam, RngSpec::new(4, 4)).unwrap();
        assert!(quadratic_variation_check(&p));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let lam = IntensitySpec::constant(0.5);
        let p = build_filtration_path(&grid(4), &lam, RngSpec::new(0, 1)).unwrap();
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, std::slice::from_ref(&p)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("path,knot,t,dW,W,H,M,lambda_G\n"));
        assert_eq!(text.lines().count(), 1 + p.n_knots());
    }
}
