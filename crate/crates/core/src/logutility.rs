//! Consumption with logarithmic utility under a defaultable wealth process,
//! its closed-form optimal control, and numerical certification.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::paths::{FiltrationPath, IntensitySpec};
use crate::regression::{BasisFn, RegressionBasis};
use crate::scalar::{Interval, Scalar};
use crate::sde::{CoefficientSet, ControlProcess, Rule, WealthParams};
use crate::smp::{
    check_sufficient, directional_derivative, estimate_j, path_costs, solve_adjoint, ControlProblem, DirectionalReport, ForwardScheme,
    SufficientConfig, SufficientReport,
};
use crate::stats::Estimate;
use crate::timefn::TimeFn;

/// Terminal utility weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ThetaFamily {
    Constant {
        value: f64,
    },
    /// `exp(a W_T - a^2 T / 2)`
    ExpMartingale {
        a: f64,
    },
    /// `1 + b H_T`
    DefaultLinked {
        b: f64,
    },
}

impl ThetaFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThetaFamily::Constant { value } if !(value > 0.0) => Err(invalid("theta must be positive")),
            ThetaFamily::DefaultLinked { b } if !(b > -1.0) => Err(invalid("default-linked theta needs b > -1")),
            ThetaFamily::ExpMartingale { a } if !a.is_finite() => Err(invalid("theta exponent must be finite")),
            _ => Ok(()),
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match *self {
            ThetaFamily::Constant { value } => Some(value),
            _ => None,
        }
    }

    pub fn value<S: Scalar>(&self, path: &FiltrationPath<S>) -> S {
        let n = path.grid.n_steps();
        self.conditional(path, n, None)
    }

    /// Exact `E[theta | G_t]` at base knot `j`; `intensity` is needed only for
    /// the default-linked family before default.
    pub fn conditional<S: Scalar>(&self, path: &FiltrationPath<S>, j: usize, intensity: Option<&IntensitySpec<S>>) -> S {
        let t = path.grid.base_knot(j);
        match *self {
            ThetaFamily::Constant { value } => S::lit(value),
            ThetaFamily::ExpMartingale { a } => {
                let a = S::lit(a);
                (a * path.base_w(j) - a * a * t * S::lit(0.5)).exp()
            }
            ThetaFamily::DefaultLinked { b } => {
                let h = path.base_h(j);
                let p_default = if h > S::zero() {
                    S::one()
                } else {
                    let horizon = path.grid.horizon();
                    match intensity {
                        Some(lam) => S::one() - (lam.cumulative(t) - lam.cumulative(horizon)).exp(),
                        None => S::zero(),
                    }
                };
                S::one() + S::lit(b) * p_default
            }
        }
    }

    /// Feature that makes the conditional expectation exact in the basis.
    pub fn basis_hint(&self) -> Option<BasisFn> {
        match *self {
            ThetaFamily::ExpMartingale { a } => Some(BasisFn::ExpMartingale { a }),
            ThetaFamily::DefaultLinked { .. } => Some(BasisFn::H),
            ThetaFamily::Constant { .. } => None,
        }
    }
}

/// `dS = S[(alpha - pi) dt + beta dW + mu dH]`, utility
/// `E[int log(S pi) dt + theta log S_T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthModel<S> {
    pub alpha: TimeFn<S>,
    pub beta: TimeFn<S>,
    pub mu: S,
    pub intensity: IntensitySpec<S>,
    pub s0: S,
    pub theta: ThetaFamily,
    pub horizon: S,
}

impl<S: Scalar> WealthModel<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > S::zero()) {
            return Err(invalid("initial wealth must be positive"));
        }
        if self.mu < -S::one() {
            return Err(invalid("mu must be >= -1"));
        }
        if !(self.horizon > S::zero()) {
            return Err(invalid("horizon must be positive"));
        }
        self.alpha.validate()?;
        self.beta.validate()?;
        self.intensity.validate(self.horizon)?;
        self.theta.validate()
    }

    pub fn params(&self) -> WealthParams<S> {
        WealthParams {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            mu: self.mu,
        }
    }

    /// Basis with the theta-specific feature added.
    pub fn basis(&self, basis: &RegressionBasis) -> RegressionBasis {
        match self.theta.basis_hint() {
            Some(f) => basis.clone().with(f),
            None => basis.clone(),
        }
    }

    /// Control set `[0, inf)`; `u_bound` enters only the Lipschitz metadata.
    pub fn problem(&self, u_bound: S) -> ControlProblem<S> {
        let theta = self.theta;
        let theta2 = self.theta;
        ControlProblem {
            coeffs: CoefficientSet::wealth(self.alpha.clone(), self.beta.clone(), self.mu, self.horizon, u_bound),
            h: Arc::new(|_, x: S, u: S| (x * u).ln()),
            dh_dx: Arc::new(|_, x: S, _| S::one() / x),
            dh_du: Arc::new(|_, _, u: S| S::one() / u),
            g: Arc::new(move |p, x: S| theta.value(p) * x.ln()),
            dg: Arc::new(move |p, x: S| theta2.value(p) / x),
            value_set: Interval::new(S::zero(), S::infinity()),
            intensity: self.intensity.clone(),
            x0: self.s0,
            forward: ForwardScheme::Wealth(self.params()),
        }
    }
}

/// `pi_hat[path][knot]` and the regressed `E[theta | G_t]` on base knots.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalControlPath<S> {
    pub t: Vec<S>,
    pub pi_hat: Vec<Vec<S>>,
    pub conditional_theta: Vec<Vec<S>>,
}

impl<S: Scalar> OptimalControlPath<S> {
    pub fn control(&self) -> ControlProcess<S> {
        ControlProcess::from_table(Arc::new(self.pi_hat.clone()), Interval::new(S::zero(), S::infinity()))
    }

    pub fn scaled_control(&self, factor: S) -> ControlProcess<S> {
        let table = self.pi_hat.iter().map(|r| r.iter().map(|&v| v * factor).collect()).collect();
        ControlProcess::from_table(Arc::new(table), Interval::new(S::zero(), S::infinity()))
    }

    pub fn max_pi(&self) -> S {
        self.pi_hat.iter().flatten().fold(S::zero(), |a, &b| a.max(b))
    }

    /// Mean of `pi_hat` at each knot.
    pub fn mean_curve(&self) -> Vec<S> {
        let n = S::from_count(self.pi_hat.len());
        (0..self.t.len())
            .map(|j| self.pi_hat.iter().fold(S::zero(), |a, r| a + r[j]) / n)
            .collect()
    }
}

/// `pi_hat_t = 1 / (E[theta | G_t] + T - t)` with the conditional expectation
/// from stratified regression (exact for constant theta).
pub fn closed_form_pi_hat<S: Scalar>(model: &WealthModel<S>, paths: &[FiltrationPath<S>]) -> Result<OptimalControlPath<S>> {
    model.validate()?;
    let first = paths.first().ok_or_else(|| invalid("no paths"))?;
    let n = first.grid.n_steps();
    let horizon = first.grid.horizon();
    let t: Vec<S> = (0..=n).map(|j| first.grid.base_knot(j)).collect();
    let np = paths.len();
    // every supported family has E[theta | G_t] in closed form; a regression
    // estimate can turn negative in the tails and break 1/(. + T - t)
    let cond: Vec<Vec<S>> = paths
        .iter()
        .map(|p| (0..=n).map(|j| model.theta.conditional(p, j, Some(&model.intensity))).collect())
        .collect();
    let mut pi_hat = vec![vec![S::zero(); n + 1]; np];
    for (i, (row, crow)) in pi_hat.iter_mut().zip(&cond).enumerate() {
        for j in 0..=n {
            if !(crow[j] > S::zero()) {
                return Err(invalid(format!(
                    "nonpositive conditional theta estimate {} at path {i}, knot {j}",
                    crow[j]
                )));
            }
            row[j] = S::one() / (crow[j] + horizon - t[j]);
        }
    }
    Ok(OptimalControlPath {
        t,
        pi_hat,
        conditional_theta: cond,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointRow {
    pub knot: usize,
    pub t: f64,
    pub mean_ps: f64,
    pub target: f64,
    pub diff: f64,
    pub combined_se: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjointCheckReport {
    pub rows: Vec<AdjointRow>,
    pub max_abs_diff: f64,
    pub terminal_exact: bool,
    pub pass: bool,
}

/// Compares `p_t S_t` from the numerical adjoint with the exact
/// `E[theta | G_t] + T - t` at every base knot.
///
/// The standard error combines the sample error of the paired difference
/// with the sampling error of `theta` around its conditional mean, which is
/// what the regression carries into `mean(p S)`.
pub fn adjoint_closed_form_check<S: Scalar>(
    model: &WealthModel<S>,
    paths: &[FiltrationPath<S>],
    basis: &RegressionBasis,
) -> Result<AdjointCheckReport> {
    let basis = model.basis(basis);
    let opt = closed_form_pi_hat(model, paths)?;
    let problem = model.problem(opt.max_pi());
    let (forwards, adj) = solve_adjoint(&problem, &opt.control(), paths, &basis)?;
    let n = paths[0].grid.n_steps();
    let horizon = paths[0].grid.horizon().as_f64();
    let theta: Vec<f64> = paths.iter().map(|p| model.theta.value(p).as_f64()).collect();
    let mut rows = Vec::with_capacity(n + 1);
    let mut terminal_exact = true;
    for j in 0..=n {
        let t = opt.t[j].as_f64();
        let mut d = Vec::with_capacity(paths.len());
        let mut ps = Vec::with_capacity(paths.len());
        let mut sampling = Vec::with_capacity(paths.len());
        let mut scale = 0.0;
        for (i, p) in paths.iter().enumerate() {
            let v = (adj.y[j][i] * forwards[i].base_x(j)).as_f64();
            let exact = model.theta.conditional(p, j, Some(&model.intensity)).as_f64();
            let target = exact + horizon - t;
            if j == n && (v - theta[i]).abs() > 1e-12 * theta[i].abs().max(1.0) {
                terminal_exact = false;
            }
            d.push(v - target);
            ps.push(v);
            sampling.push(theta[i] - exact);
            scale += target.abs();
        }
        let scale = scale / paths.len() as f64;
        let de = Estimate::from_samples(&d);
        let se = de.combined_se(&Estimate::from_samples(&sampling));
        let mean_ps = Estimate::from_samples(&ps).mean;
        rows.push(AdjointRow {
            knot: j,
            t,
            mean_ps,
            target: mean_ps - de.mean,
            diff: de.mean,
            combined_se: se,
            ok: de.mean.abs() <= 3.0 * se + 1e-9 * scale,
        });
    }
    let max_abs_diff = rows.iter().map(|r| r.diff.abs()).fold(0.0, f64::max);
    let pass = terminal_exact && rows.iter().all(|r| r.ok);
    Ok(AdjointCheckReport {
        rows,
        max_abs_diff,
        terminal_exact,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub j: Estimate,
    /// Paired `J(pi_hat) - J(pi_hat (1 + delta))`.
    pub advantage: Estimate,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifyReport {
    pub j_hat: Estimate,
    pub sweep: Vec<SweepRow>,
    pub sweep_max_at_pi_hat: bool,
    pub derivative: DirectionalReport,
    pub derivative_vanishes: bool,
    pub sufficient: SufficientReport,
    pub pass: bool,
}

pub const SWEEP_DELTAS: [f64; 8] = [-0.5, -0.2, -0.1, -0.05, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyConfig<S> {
    pub deltas: Vec<f64>,
    pub fd_step: S,
    pub search: Interval<S>,
    pub sufficient: SufficientConfig,
}

impl<S: Scalar> Default for CertifyConfig<S> {
    fn default() -> Self {
        Self {
            deltas: SWEEP_DELTAS.to_vec(),
            fd_step: S::lit(1e-4),
            search: Interval::new(S::lit(0.05), S::lit(5.0)),
            sufficient: SufficientConfig::default(),
        }
    }
}

pub fn unit_direction<S: Scalar>() -> Rule<S> {
    Arc::new(|_| S::one())
}

/// Sufficient-condition check, directional derivative along `beta = 1`, and
/// a multiplicative perturbation sweep of `pi_hat` on common random numbers.
pub fn certify_optimality<S: Scalar>(
    model: &WealthModel<S>,
    paths: &[FiltrationPath<S>],
    basis: &RegressionBasis,
    cfg: &CertifyConfig<S>,
) -> Result<CertifyReport> {
    let basis = model.basis(basis);
    let opt = closed_form_pi_hat(model, paths)?;
    let problem = model.problem(opt.max_pi());
    let control = opt.control();
    let base = estimate_j(&problem, &control, paths)?;
    let mut sweep = Vec::with_capacity(cfg.deltas.len());
    for &delta in &cfg.deltas {
        let ctl = opt.scaled_control(S::one() + S::lit(delta));
        let fw = problem.forward_all(&ctl, paths)?;
        let costs = path_costs(&problem, paths, &fw)?;
        let adv: Vec<f64> = base.per_path.iter().zip(&costs).map(|(a, b)| a - b).collect();
        let advantage = Estimate::from_samples(&adv);
        sweep.push(SweepRow {
            delta,
            j: Estimate::from_samples(&costs),
            ok: advantage.mean >= 0.0,
            advantage,
        });
    }
    let sweep_max_at_pi_hat = sweep.iter().all(|r| r.ok);
    let derivative = directional_derivative(&problem, &control, &unit_direction(), paths, &basis, cfg.fd_step)?;
    let derivative_vanishes = derivative.fd_vanishes() && derivative.hamiltonian_vanishes();
    let sufficient = check_sufficient(&problem, &control, paths, &basis, cfg.search, &cfg.sufficient)?;
    let pass = sweep_max_at_pi_hat && derivative_vanishes && sufficient.pass;
    Ok(CertifyReport {
        j_hat: base.estimate,
        sweep,
        sweep_max_at_pi_hat,
        derivative,
        derivative_vanishes,
        sufficient,
        pass,
    })
}

/// Writes `knot, t, mean_pi_hat, mean_conditional_theta` rows.
pub fn write_curve_csv<S: Scalar, W: Write>(out: W, opt: &OptimalControlPath<S>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["knot", "t", "mean_pi_hat", "mean_conditional_theta"])?;
    let np = S::from_count(opt.pi_hat.len());
    let pis = opt.mean_curve();
    for (j, t) in opt.t.iter().enumerate() {
        let c = opt.conditional_theta.iter().fold(S::zero(), |a, r| a + r[j]) / np;
        wtr.write_record([j.to_string(), t.as_f64().to_string(), pis[j].as_f64().to_string(), c.as_f64().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{build_paths, TimeGrid};

    fn model(theta: ThetaFamily, lam: f64, mu: f64) -> WealthModel<f64> {
        WealthModel {
            alpha: TimeFn::constant(0.05),
            beta: TimeFn::constant(0.2),
            mu,
            intensity: IntensitySpec::constant(lam),
            s0: 1.0,
            theta,
            horizon: 1.0,
        }
    }

    fn paths(n: usize, lam: f64) -> Vec<FiltrationPath<f64>> {
        build_paths(&TimeGrid::uniform(1.0, 20).unwrap(), &IntensitySpec::constant(lam), 77, n).unwrap()
    }

    #[test]
    fn constant_theta_pi_hat() {
        let ps = paths(100, 0.3);
        let opt = closed_form_pi_hat(&model(ThetaFamily::Constant { value: 1.0 }, 0.3, -0.5), &ps).unwrap();
        assert_eq!(opt.pi_hat[0][0], 0.5);
        for row in &opt.pi_hat {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - 1.0 / (2.0 - opt.t[j])).abs() < 1e-12);
            }
            assert_eq!(row[20], 1.0);
        }
    }

    #[test]
    fn default_linked_conditional_is_exact() {
        let ps = paths(2000, 0.8);
        let m = model(ThetaFamily::DefaultLinked { b: 0.5 }, 0.8, -0.3);
        let opt = closed_form_pi_hat(&m, &ps).unwrap();
        // regression of theta and the exact conditional law agree in the mean at each knot
        for j in [0, 5, 10, 19] {
            let reg: f64 = opt.conditional_theta.iter().map(|r| r[j]).sum::<f64>() / 2000.0;
            let exact: f64 = ps.iter().map(|p| m.theta.conditional(p, j, Some(&m.intensity))).sum::<f64>() / 2000.0;
            let se = ps
                .iter()
                .map(|p| (m.theta.value(p) - m.theta.conditional(p, j, Some(&m.intensity))).powi(2))
                .sum::<f64>()
                .sqrt()
                / 2000.0;
            assert!((reg - exact).abs() <= 3.0 * se + 1e-12, "knot {j}: {reg} vs {exact}");
        }
    }

    #[test]
    fn adjoint_identity_constant_theta() {
        let ps = paths(500, 0.3);
        let rep = adjoint_closed_form_check(&model(ThetaFamily::Constant { value: 1.0 }, 0.3, -0.5), &ps, &RegressionBasis::default()).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.max_abs_diff < 1e-10);
    }

    #[test]
    fn certify_classical_case() {
        let ps = paths(500, 0.0);
        let rep = certify_optimality(
            &model(ThetaFamily::Constant { value: 1.0 }, 0.0, 0.0),
            &ps,
            &RegressionBasis::default(),
            &CertifyConfig::default(),
        )
        .unwrap();
        assert!(rep.pass, "{rep:#?}");
    }

    #[test]
    fn invalid_theta_rejected() {
        let ps = paths(100, 0.3);
        assert!(closed_form_pi_hat(&model(ThetaFamily::Constant { value: -1.0 }, 0.3, -0.5), &ps).is_err());
    }
}
